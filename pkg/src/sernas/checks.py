"""Finite-difference gradient cases for every neural op and for a small mixed network.

Each case builds random inputs and a scalar function of them.  The scalar
is a fixed random projection of the op's output, so no coordinate of the
gradient is trivially zero.  :func:`gradient_errors` perturbs one input at a
time with the others held constant.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .autodiff import Tensor, backward, finite_diff_check, precision, tsum
from .search_space import Supernet, dropout_mask


def _conv(rng):
    inputs = {
        "x": rng.normal(size=(2, 2, 6, 5)),
        "w": rng.normal(size=(3, 2, 2, 3)) * 0.5,
        "b": rng.normal(size=3) * 0.1,
    }
    r = rng.normal(size=(2, 3, 5, 3))
    return inputs, lambda t: tsum(ops.conv2d(t["x"], t["w"], t["b"]) * r)


def _maxpool(rng):
    r = rng.normal(size=(2, 2, 3, 2))
    return {"x": rng.normal(size=(2, 2, 7, 5))}, lambda t: tsum(ops.maxpool2d(t["x"], 2, 2) * r)


def _crop(rng):
    r = rng.normal(size=(1, 2, 3, 2))
    return {"x": rng.normal(size=(1, 2, 6, 5))}, lambda t: tsum(ops.center_crop(t["x"], 3, 2) * r)


def _dense(rng):
    inputs = {"x": rng.normal(size=(3, 4)), "w": rng.normal(size=(4, 5)), "b": rng.normal(size=5)}
    r = rng.normal(size=(3, 5))
    return inputs, lambda t: tsum(ops.dense(t["x"], t["w"], t["b"], activation="relu") * r)


def _gru_params(rng, D, H):
    p = {}
    for d in ("fw", "bw"):
        p[f"{d}_w_in"] = rng.normal(size=(D, 3 * H)) * 0.5
        p[f"{d}_w_hid"] = rng.normal(size=(H, 3 * H)) * 0.5
        p[f"{d}_b_in"] = rng.normal(size=3 * H) * 0.1
        p[f"{d}_b_hid"] = rng.normal(size=3 * H) * 0.1
    return p


def _bigru(rng):
    D, H = 3, 2
    inputs = {"x": rng.normal(size=(2, 4, D)), **_gru_params(rng, D, H)}
    r = rng.normal(size=(2, 4, 2 * H))
    lengths = np.array([4, 3])

    def f(t):
        out, _, _ = ops.bigru(t["x"], {k: v for k, v in t.items() if k != "x"}, lengths)
        return tsum(out * r)

    return inputs, f


def _attention(rng):
    D, C, K = 3, 4, 2
    inputs = {
        "x": rng.normal(size=(2, 5, D)),
        "w_proj": rng.normal(size=(D, C)),
        "b_proj": rng.normal(size=C) * 0.1,
        "w_bu": rng.normal(size=(C, 1)),
        "b_bu": rng.normal(size=1) * 0.1,
        "w_td": rng.normal(size=(C, K)),
        "b_td": rng.normal(size=K) * 0.1,
    }
    r = rng.normal(size=(2, K))
    lengths = np.array([5, 3])

    def f(t):
        logits, _ = ops.attention_pool(t["x"], {k: v for k, v in t.items() if k != "x"}, lengths)
        return tsum(logits * r)

    return inputs, f


def _squash(rng):
    r = rng.normal(size=(3, 4))
    return {"s": rng.normal(size=(3, 4))}, lambda t: tsum(ops.squash(t["s"]) * r)


def _routing(rng):
    r = rng.normal(size=(2, 3, 4))
    return {"u_hat": rng.normal(size=(2, 5, 3, 4))}, lambda t: tsum(ops.dynamic_routing(t["u_hat"]) * r)


def _capsule(rng):
    B, C, T, F = 1, 2, 5, 2
    nh, P, n_win, d_win, n_utt, d_utt = 3, 2, 2, 3, 2, 2
    J = P * F
    inputs = {
        "x": rng.normal(size=(B, C, T, F)),
        "w_heads": rng.normal(size=(nh, C, P)),
        "b_heads": rng.normal(size=nh * P) * 0.1,
        "w_window": rng.normal(size=(J, n_win, d_win, nh)),
        "w_utt": rng.normal(size=(n_win, n_utt, d_utt, d_win)),
    }
    r = rng.normal(size=(B, n_utt, d_utt))
    return inputs, lambda t: tsum(
        ops.capsule_stage(t["x"], {k: v for k, v in t.items() if k != "x"}, window=3, shift=2) * r
    )


def _xent(rng):
    labels = rng.integers(0, 4, size=3)
    return {"logits": rng.normal(size=(3, 4))}, lambda t: ops.softmax_xent(t["logits"], labels)


TOY_SPACE = [
    {"type": "conv", "name": "c1", "c_out": 2, "kernels": [[2, 2], [1, 3], [3, 1]]},
    {"type": "pool", "window": [2, 1]},
    {"type": "conv", "name": "c2", "c_out": 2, "kernels": [[2, 2], [1, 2], [2, 1]]},
    {"type": "sequence"},
    {"type": "attention", "name": "head", "channels": [3, 4]},
]


def _network(rng, mode):
    net = Supernet(TOY_SPACE, n_freq=4, n_classes=3, rng=rng, nominal_time=8)
    for a in net.alpha.values():
        a.data[:] = rng.normal(size=a.shape)
    mask = dropout_mask(net, 1, rng) if mode == "dropout" else None
    x = rng.normal(size=(2, 8, 4))
    r = rng.normal(size=(2, 3))
    keys = ["alpha/c1", "alpha/head", "c1/0/w", "c2/1/w", "head/1/w_td"]
    tensors = {**{f"alpha/{g}": a for g, a in net.alpha.items()}, **net.params}
    inputs = {k: tensors[k].data.copy() for k in keys} | {"x": x}

    def f(t):
        saved = {}
        for k in keys:
            owner = net.alpha if k.startswith("alpha/") else net.params
            name = k[len("alpha/"):] if k.startswith("alpha/") else k
            saved[(id(owner), name)] = (owner, name, owner[name])
            owner[name] = t[k]
        try:
            return tsum(net(t["x"], mask) * r)
        finally:
            for owner, name, v in saved.values():
                owner[name] = v

    return inputs, f


OP_CASES = {
    "conv2d": _conv,
    "maxpool2d": _maxpool,
    "center_crop": _crop,
    "dense": _dense,
    "bigru": _bigru,
    "attention_pool": _attention,
    "squash": _squash,
    "dynamic_routing": _routing,
    "capsule_stage": _capsule,
    "softmax_xent": _xent,
    "mixed_network_full": lambda rng: _network(rng, "full"),
    "mixed_network_dropout": lambda rng: _network(rng, "dropout"),
}


# Inputs whose gradient is identically zero: the attention softmax is
# invariant to a shared shift, so the bottom-up bias never moves the output.
# The relative-error formula degenerates to ~1 on pure rounding noise there,
# so these are checked for an absolute zero instead.
ZERO_GRAD = {"attention_pool": ("b_bu",)}


def _perturbations(name, trials, seed):
    build = OP_CASES[name]
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        inputs, f = build(rng)
        tensors = {k: Tensor(v) for k, v in inputs.items()}
        for key, value in inputs.items():
            def g(t, key=key):
                return f({**tensors, key: t})

            yield trial, key, value, g


def gradient_errors(name, trials=20, seed=0, h=1e-5):
    """Worst finite-difference relative error per trial for one case (64-bit)."""
    worst = [0.0] * trials
    skip = ZERO_GRAD.get(name, ())
    with precision(64):
        for trial, key, value, g in _perturbations(name, trials, seed):
            if key not in skip:
                worst[trial] = max(worst[trial], finite_diff_check(g, Tensor(value), h=h))
    return worst


def zero_gradient_residual(name, trials=20, seed=0, h=1e-5):
    """Largest absolute tape or central-difference gradient over the ``ZERO_GRAD`` inputs."""
    res = 0.0
    with precision(64):
        for _, key, value, g in _perturbations(name, trials, seed):
            if key not in ZERO_GRAD.get(name, ()):
                continue
            x = Tensor(value.copy(), requires_grad=True)
            backward(g(x))
            res = max(res, float(np.abs(x.grad).max()))
            for i in range(value.size):
                e = np.zeros_like(value)
                e.flat[i] = h
                num = (float(g(Tensor(value + e)).data) - float(g(Tensor(value - e)).data)) / (2 * h)
                res = max(res, abs(num))
    return res


_SMALL_KERNELS = [[1, 1], [1, 2], [2, 1], [2, 2], [1, 3], [3, 1]]


def random_toy_space(rng, max_mixed=3, max_n=6):
    """Small random search space with 1..``max_mixed`` mixed layers of 2..``max_n`` candidates.

    Inputs are expected to be ``[B, 10, 8]`` spectrograms.
    """
    n_mixed = int(rng.integers(1, max_mixed + 1))
    space = []
    for i in range(n_mixed - 1):
        n = int(rng.integers(2, max_n + 1))
        kernels = [_SMALL_KERNELS[j] for j in rng.permutation(len(_SMALL_KERNELS))[:n]]
        space.append({"type": "conv", "name": f"conv{i}", "c_out": 2, "kernels": kernels})
    space.append({"type": "sequence"})
    n = int(rng.integers(2, max_n + 1))
    widths = sorted(int(w) for w in rng.choice(np.arange(2, 9), size=n, replace=False))
    if rng.random() < 0.5:
        space.append({"type": "attention", "name": "head", "channels": widths})
    else:
        space.append({"type": "dense_head", "name": "head", "dims": widths})
    return space
