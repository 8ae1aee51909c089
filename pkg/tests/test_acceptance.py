"""Acceptance suite: one check per criterion, each printing a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` or ``python tests/test_acceptance.py``.
Criteria 6 and 7 train real models on the synthetic corpus and take several
minutes; their search runs are shared through a module-level cache.
"""

from __future__ import annotations

import functools
import itertools
import time

import numpy as np
import pytest

from sernas.autodiff import Tensor, precision, rng_stream
from sernas.checks import OP_CASES, ZERO_GRAD, gradient_errors, random_toy_space, zero_gradient_residual
from sernas.harness import (
    fold_plan,
    load_features,
    parameter_scale,
    parse_config,
    prepare_fold,
    report_digest,
    run_experiment,
    search,
)
from sernas.search_space import (
    MixedLayer,
    PathMask,
    Supernet,
    count_params,
    derive_architecture,
    dropout_mask,
    enumerate_architectures,
    mixed_forward,
    one_hot_weights,
    sample_path,
)
from sernas.strategies import evaluate

SEEDS = range(5)

# toy search space: two mixed conv layers with three kernel candidates each
TOY_LAYERS = [
    {"type": "conv", "name": "c1", "c_out": 8, "kernels": [[3, 3], [2, 5], [5, 2]]},
    {"type": "pool", "window": [2, 2]},
    {"type": "conv", "name": "c2", "c_out": 8, "kernels": [[3, 3], [2, 4], [4, 2]]},
    {"type": "pool", "window": [2, 2]},
    {"type": "sequence"},
    {"type": "attention", "name": "head", "channels": [16]},
]
TOY_DATA = {"n_utts": 600, "sample_rate": 4000, "dft_len": 160, "max_freq_hz": 800,
            "segment_seconds": 1.0, "noise": 1.5}
SEARCH_EPOCHS = 10
RETRAIN_EPOCHS = 5


def _line(n, ok, detail):
    print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}", flush=True)
    return ok, detail


def _crop(a, t, f):
    T, F = a.shape[-2:]
    t0, f0 = (T - t) // 2, (F - f) // 2
    return a[..., t0 : t0 + t, f0 : f0 + f]


def _random_net(seed):
    rng = np.random.default_rng(seed)
    net = Supernet(random_toy_space(rng, max_mixed=3, max_n=6), 8, 4, rng, nominal_time=10)
    for a in net.alpha.values():
        a.data[:] = rng.normal(size=a.shape)
    return net, rng.normal(size=(2, 10, 8))


# ---------------------------------------------------------------- 1


def criterion_1(n_nets=60):
    t0 = time.perf_counter()
    worst = 0.0
    with precision(64):
        for seed in range(n_nets):
            net, x = _random_net(seed)
            h = Tensor(x.reshape(2, 1, 10, 8))
            weights = net.arch_weights()
            for layer in net.layers:
                if isinstance(layer, MixedLayer):
                    outs = [op.forward(net.params, h, f"{layer.name}/{i}/").data
                            for i, op in enumerate(layer.ops)]
                    if outs[0].ndim == 4:
                        t = min(o.shape[2] for o in outs)
                        f = min(o.shape[3] for o in outs)
                        outs = [_crop(o, t, f) for o in outs]
                    a = np.exp(net.alpha[layer.group].data)
                    a /= a.sum()
                    explicit = sum(ai * o for ai, o in zip(a, outs))
                    got = mixed_forward(net, layer, h, weights[layer.group], None).data
                    worst = max(worst, float(np.abs(got - explicit).max()))
                h = net._apply(layer, h, None, weights)
    dt = time.perf_counter() - t0
    ok = worst < 1e-6 and dt < 60
    return _line(1, ok, f"max |full - explicit sum| = {worst:.2e} over {n_nets} supernets "
                        f"(tol 1e-6), {dt:.1f}s")


# ---------------------------------------------------------------- 2


def criterion_2():
    kernels = [[1, 1], [1, 2], [2, 1], [2, 2], [1, 3], [3, 1]]
    worst = 0.0
    with precision(64):
        for n in range(2, 7):
            space = [{"type": "conv", "name": "c", "c_out": 3, "kernels": kernels[:n]},
                     {"type": "sequence"},
                     {"type": "attention", "name": "head", "channels": [4]}]
            rng = np.random.default_rng(n)
            net = Supernet(space, 8, 4, rng, nominal_time=10)
            net.alpha["c"].data[:] = rng.normal(size=n)
            layer = net.layers[0]
            h = Tensor(rng.normal(size=(3, 1, 10, 8)))
            a = net.arch_weights()["c"]
            full = mixed_forward(net, layer, h, a, None).data
            # every mask dropout_mask can produce for k = 1
            seen = {}
            draw = np.random.default_rng(0)
            while len(seen) < n:
                m = dropout_mask(net, 1, draw)
                seen[tuple(m.keep["c"])] = m
            assert all(m.scale["c"] == n / (n - 1) for m in seen.values())
            avg = np.mean([mixed_forward(net, layer, h, a, m).data for m in seen.values()], axis=0)
            worst = max(worst, float(np.abs(avg - full).max()))
    return _line(2, worst < 1e-9, f"max |mean over C(N,1) masks - full| = {worst:.2e} "
                                  f"for N=2..6 (tol 1e-9)")


# ---------------------------------------------------------------- 3


def criterion_3(draws=10_000):
    t0 = time.perf_counter()
    kern = [[1, 1], [1, 2], [2, 1], [2, 2], [1, 3], [3, 1]]
    space = [
        {"type": "conv", "name": "a", "c_out": 2, "kernels": kern},
        {"type": "conv", "name": "b", "c_out": 2, "kernels": kern[:4]},
        {"type": "sequence"},
        {"type": "attention", "name": "head", "channels": [2, 3, 4]},
    ]
    net = Supernet(space, 12, 4, np.random.default_rng(0), nominal_time=12)
    rng = rng_stream(0, "mask-stats")
    counts = {(mode, k, g): np.zeros(n) for g, n in net.groups.items()
              for mode, k in (("sample", 0), ("dropout", 1), ("dropout", 2))}
    cardinality_ok = True
    for _ in range(draws):
        s = sample_path(net, rng)
        for g in net.groups:
            cardinality_ok &= int(s.keep[g].sum()) == 1
            counts[("sample", 0, g)] += s.keep[g]
        for k in (1, 2):
            d = dropout_mask(net, k, rng)
            for g, n in net.groups.items():
                dropped = ~d.keep[g]
                cardinality_ok &= int(dropped.sum()) == k and d.scale[g] == n / (n - k)
                counts[("dropout", k, g)] += dropped
    worst_z = 0.0
    for (mode, k, g), c in counts.items():
        n = net.groups[g]
        p = (1 if mode == "sample" else k) / n
        z = np.abs(c - draws * p) / np.sqrt(draws * p * (1 - p))
        worst_z = max(worst_z, float(z.max()))
    dt = time.perf_counter() - t0
    ok = cardinality_ok and worst_z < 3 and dt < 60
    return _line(3, ok, f"{draws} draws: cardinality {'exact' if cardinality_ok else 'VIOLATED'}, "
                        f"max |z| = {worst_z:.2f} (< 3 binomial sd), {dt:.1f}s")


# ---------------------------------------------------------------- 4


def criterion_4(trials=20):
    t0 = time.perf_counter()
    errs = {name: max(gradient_errors(name, trials=trials)) for name in OP_CASES}
    zero = max(zero_gradient_residual(name, trials=trials) for name in ZERO_GRAD)
    dt = time.perf_counter() - t0
    worst_name = max(errs, key=errs.get)
    ok = errs[worst_name] < 1e-4 and zero < 1e-8 and dt < 300
    return _line(4, ok, f"{len(errs)} cases x {trials} trials, worst rel err {errs[worst_name]:.2e} "
                        f"({worst_name}); structurally-zero grads |g| <= {zero:.1e}; {dt:.1f}s")


# ---------------------------------------------------------------- 5


def criterion_5():
    worst = 0.0
    with precision(64):
        for seed in range(20):
            net, x = _random_net(100 + seed)
            arch = derive_architecture(net)
            discrete = net.subnet(arch)
            diff = np.abs(discrete(x).data - net(x, weights=one_hot_weights(net, arch)).data).max()
            worst = max(worst, float(diff))
    # hand-computed counts: conv (1 -> 2 channels, kh x kw) then attention over D = 2 * F'
    space = [
        {"type": "conv", "name": "c", "c_out": 2, "kernels": [[1, 1], [2, 2], [1, 3]]},
        {"type": "sequence"},
        {"type": "attention", "name": "head", "channels": [2, 3, 4, 5]},
    ]
    net = Supernet(space, 8, 4, np.random.default_rng(0), nominal_time=10)
    mismatches = 0
    archs = list(itertools.islice(enumerate_architectures(net), 10))
    for arch in archs:
        kh, kw = space[0]["kernels"][arch.choices["c"]]
        C = space[2]["channels"][arch.choices["head"]]
        D = 2 * (8 - 3 + 1)
        hand = (2 * kh * kw + 2) + C * (D + 1) + (C + 1) + 4 * (C + 1)
        sub = net.subnet(arch)
        mismatches += int(hand != count_params(net, arch) or hand != count_params(sub)
                          or hand != sum(p.size for p in sub.params.values()))
    ok = worst < 1e-6 and mismatches == 0 and len(archs) == 10
    return _line(5, ok, f"derived vs one-hot max diff {worst:.2e} (tol 1e-6); "
                        f"count_params mismatches {mismatches}/10")


# ---------------------------------------------------------------- 6 / 7 shared runs


def toy_config(**kw):
    d = {"family": "custom", "layers": TOY_LAYERS, "search_epochs": SEARCH_EPOCHS,
         "retrain_epochs": RETRAIN_EPOCHS, "random_candidates": 5, "data": dict(TOY_DATA)}
    d.update(kw)
    return parse_config(d)


@functools.lru_cache(maxsize=None)
def _toy_fold():
    cfg = toy_config()
    with precision(32):
        utts, specs = load_features(cfg)
        return prepare_fold(utts, specs, fold_plan(utts)[0], cfg.data, np.float32)


@functools.lru_cache(maxsize=None)
def _toy_run(strategy, seed, retrain):
    cfg = toy_config(retrain_epochs=RETRAIN_EPOCHS if retrain else 1)
    data = _toy_fold()
    with precision(32):
        net, arch, model, ckpt, logs = search(cfg, data, seed, strategy)
        test = evaluate(model, data.test_utts) if retrain else None
    curve = lambda phase: np.array([r[2] for r in logs["search"].rows if r[1] == phase])
    return {"supernet": curve("train"), "probe": curve("probe"), "test": test, "arch": arch}


def criterion_6():
    t0 = time.perf_counter()
    a_ok = b_ok = 0
    rows = []
    for seed in SEEDS:
        runs = {s: _toy_run(s, seed, s == "dropout") for s in ("joint", "sampling", "dropout")}
        steps = {len(r["supernet"]) for r in runs.values()}
        assert len(steps) == 1, "strategies must see the same number of weight steps"
        sup = {s: float(r["supernet"].mean()) for s, r in runs.items()}
        prb = {s: float(r["probe"].mean()) for s, r in runs.items()}
        a = sup["joint"] <= sup["dropout"] <= sup["sampling"]
        b = prb["dropout"] < prb["sampling"] < prb["joint"]
        a_ok += a
        b_ok += b
        rows.append(f"seed {seed}: supernet J/D/S {sup['joint']:.3f}/{sup['dropout']:.3f}/"
                    f"{sup['sampling']:.3f} {'ok' if a else 'x'}; probe D/S/J {prb['dropout']:.3f}/"
                    f"{prb['sampling']:.3f}/{prb['joint']:.3f} {'ok' if b else 'x'}")
    dt = time.perf_counter() - t0
    for r in rows:
        print("   ", r)
    ok = a_ok >= 4 and b_ok >= 4 and dt < 1800
    return _line(6, ok, f"(a) supernet joint<=dropout<=sampling in {a_ok}/5 seeds; "
                        f"(b) probe dropout<sampling<joint in {b_ok}/5 seeds (need 4/5 each); "
                        f"{dt:.0f}s")


def criterion_7():
    t0 = time.perf_counter()
    cfg = toy_config()
    data = _toy_fold()
    drop, rand = [], []
    for seed in SEEDS:
        drop.append(_toy_run("dropout", seed, True)["test"]["wa"])
        with precision(32):
            _, _, model, _, _ = search(cfg, data, seed, "random")
            rand.append(evaluate(model, data.test_utts)["wa"])
    dt = time.perf_counter() - t0
    ok = np.mean(drop) >= np.mean(rand) and dt < 3600
    return _line(7, ok, f"mean test WA dropout-NAS {np.mean(drop):.4f} vs 5-candidate random "
                        f"{np.mean(rand):.4f} (per seed {np.round(drop, 3).tolist()} vs "
                        f"{np.round(rand, 3).tolist()}); {dt:.0f}s")


# ---------------------------------------------------------------- 8


def criterion_8():
    r = parameter_scale("cnn_seqcap", 401)
    documented = abs(r["relative_deviation"]) <= 0.25 or bool(r.get("reconciliation"))
    note = " with reconciliation" if "reconciliation" in r else ""
    return _line(8, documented, f"CNN_SeqCap baseline {r['params']:,} params at {r['n_freq']} bins vs "
                                f"{r['reference']:,} published ({r['relative_deviation']:+.1%}{note})")


# ---------------------------------------------------------------- 9


def criterion_9(tmp_dir=None):
    cfg = toy_config(search_epochs=1, retrain_epochs=1, folds=[0], seeds=[7])
    t0 = time.perf_counter()
    first = report_digest(run_experiment(cfg, tmp_dir))
    dt = time.perf_counter() - t0
    second = report_digest(run_experiment(cfg))
    return _line(9, first == second, f"report sha256 {first[:16]} vs {second[:16]}; "
                                     f"one experiment {dt:.0f}s")


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6,
            criterion_7, criterion_8, criterion_9]


@pytest.mark.parametrize("check", CRITERIA, ids=[f"criterion_{i + 1}" for i in range(9)])
def test_criterion(check, capsys):
    with capsys.disabled():
        print()
        ok, detail = check()
    assert ok, detail


if __name__ == "__main__":
    results = [check()[0] for check in CRITERIA]
    print(f"{sum(results)}/{len(results)} criteria passed")
