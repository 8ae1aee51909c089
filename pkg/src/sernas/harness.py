"""Experiment orchestration: configs, speaker-disjoint folds, metrics and run artifacts.

Run directory layout::

    <out>/config.yaml                 resolved config echo
    <out>/fold{f}/seed{s}/search_log.csv   every logged step of the search
    <out>/fold{f}/seed{s}/curves.csv       supernet loss per step + probe loss
    <out>/fold{f}/seed{s}/retrain_log.csv
    <out>/fold{f}/seed{s}/architecture.txt
    <out>/fold{f}/seed{s}/summary.json
    <out>/report.json                 aggregate over folds and seeds
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import audio
from .autodiff import precision, rng_stream
from .search_space import (
    FAMILIES,
    architecture_document,
    build_supernet,
    count_params,
    default_architecture,
    derive_architecture,
    family_space,
    random_architecture,
)
from .strategies import (
    LRSchedule,
    Probe,
    SegmentData,
    TrainLog,
    UtteranceData,
    evaluate,
    random_search,
    retrain_selected,
    train_bilevel,
    train_joint,
)

log = logging.getLogger(__name__)

STRATEGIES = ("none", "random", "joint", "sampling", "dropout")
CURVE_HEADER = ["step", "phase", "loss", "lr", "wall_ms"]
PUBLISHED_PARAMS_K = {"cnn_rnn_att": 833, "cnn_seqcap": 704}


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"
    manifest: str | None = None
    n_utts: int = 600
    sample_rate: int = 16000
    min_seconds: float = 2.0
    max_seconds: float = 6.0
    noise: float = 1.5
    window_ms: float = 40.0
    shift_ms: float = 10.0
    dft_len: int = 1600
    max_freq_hz: float | None = 4000.0
    segment_seconds: float = 2.0
    data_seed: int = 0


@dataclass
class ExperimentConfig:
    family: str = "cnn_seqcap"
    strategy: str = "dropout"
    k: int = 1
    search_epochs: int = 60
    retrain_epochs: int = 20
    batch_size: int = 16
    random_candidates: int = 5
    seeds: list = field(default_factory=lambda: [0])
    rates: list = field(default_factory=lambda: [0.001, 0.0005, 0.0002, 0.0001])
    warm_epochs: int = 3
    arch_lr: float = 0.001
    arch_warmup_epochs: int = 0
    tie_first_convs: bool = False
    kernel_order: str = "time_freq"
    layers: list | None = None
    probe_every: int = 10
    probe_batch: int = 64
    probe_seed: int = 12345
    folds: list | None = None
    n_classes: int = 4
    precision: int = 32
    workers: int = 1
    data: DataConfig = field(default_factory=DataConfig)

    def space(self):
        if self.family == "custom":
            return self.layers
        return family_space(
            self.family, self.tie_first_convs, self.kernel_order, n_classes=self.n_classes
        )

    def schedule(self):
        return LRSchedule(tuple(self.rates), self.warm_epochs)

    def to_dict(self):
        return dataclasses.asdict(self)


def _from_dict(cls, d, path, strict):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(d).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(names)
    if unknown and strict:
        raise ConfigError(f"unknown field(s) {sorted(f'{path}{u}' for u in unknown)}")
    kwargs = {}
    for k, v in d.items():
        if k not in names:
            continue
        if k == "data":
            v = _from_dict(DataConfig, v or {}, "data.", strict)
        kwargs[k] = v
    return cls(**kwargs)


def validate(cfg):
    def bad(field_path, msg):
        raise ConfigError(f"{field_path}: {msg}")

    if cfg.family not in FAMILIES + ("custom",):
        bad("family", f"must be one of {FAMILIES + ('custom',)}, got {cfg.family!r}")
    if cfg.family == "custom" and not cfg.layers:
        bad("layers", "custom family needs a layer list")
    if cfg.strategy not in STRATEGIES:
        bad("strategy", f"must be one of {STRATEGIES}, got {cfg.strategy!r}")
    if not cfg.seeds:
        bad("seeds", "must be non-empty")
    cfg.seeds = [int(s) for s in cfg.seeds]
    for name in ("search_epochs", "retrain_epochs", "batch_size", "random_candidates"):
        if int(getattr(cfg, name)) < 1:
            bad(name, "must be >= 1")
    if cfg.precision not in (32, 64):
        bad("precision", "must be 32 or 64")
    if cfg.data.source not in ("synthetic", "manifest"):
        bad("data.source", "must be 'synthetic' or 'manifest'")
    if cfg.data.source == "manifest" and not cfg.data.manifest:
        bad("data.manifest", "required when data.source is 'manifest'")
    rates = [float(r) for r in cfg.rates]
    if any(b >= a for a, b in zip(rates, rates[1:])):
        bad("rates", "must be strictly decreasing")
    cfg.rates = rates
    try:
        from .search_space import Supernet

        net = Supernet(cfg.space(), _n_bins(cfg.data), cfg.n_classes, init=False,
                       nominal_time=_segment_frames(cfg.data))
    except (ValueError, KeyError, TypeError) as exc:
        bad("layers" if cfg.family == "custom" else "family", f"invalid search space ({exc})")
    if cfg.strategy == "dropout":
        small = {g: n for g, n in net.groups.items() if 1 < n <= cfg.k}
        if cfg.k < 1 or small:
            bad("k", f"dropping {cfg.k} ops is impossible for groups {small or '(k < 1)'}")
    return cfg


def _n_bins(d):
    n = d.dft_len // 2 + 1
    if d.max_freq_hz is not None:
        n = min(n, int(np.floor(d.max_freq_hz * d.dft_len / d.sample_rate)) + 1)
    return n


def _segment_frames(d):
    return int(round(d.segment_seconds * 1000.0 / d.shift_ms))


def parse_config(source, strict=True, overrides=None):
    """Load a YAML/JSON config (path, text or mapping) with every default resolved."""
    if isinstance(source, dict):
        raw = source
    else:
        text = Path(source).read_text() if Path(str(source)).exists() else str(source)
        raw = yaml.safe_load(text) or {}
    raw = dict(raw)
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = v
    return validate(_from_dict(ExperimentConfig, raw, "", strict))


def emit_config(cfg):
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


# ---------------------------------------------------------------- folds


@dataclass
class Fold:
    train: list
    val: str
    test: str


def fold_plan(utterances):
    """One fold per session: that session's two speakers become validation and test."""
    sessions = {}
    for u in utterances:
        sessions.setdefault(u.session, set()).add(u.speaker)
    if len(sessions) < 5:
        raise ValueError(f"five-fold protocol needs 5 sessions, found {len(sessions)}")
    all_spk = sorted({u.speaker for u in utterances})
    plan = []
    for ses in sorted(sessions):
        spk = sorted(sessions[ses])
        if len(spk) < 2:
            raise ValueError(f"session {ses!r} needs two speakers, has {spk}")
        val, test = spk[0], spk[1]
        plan.append(Fold([s for s in all_spk if s not in (val, test)], val, test))
    return plan


# ---------------------------------------------------------------- metrics


def compute_metrics(pred, labels, n_classes=None):
    """WA (overall accuracy) and UA (mean recall over classes present in ``labels``)."""
    pred = np.asarray(pred, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if pred.shape != labels.shape:
        raise ValueError(f"{len(pred)} predictions for {len(labels)} labels")
    if labels.size == 0:
        raise ValueError("no samples to score")
    k = n_classes or int(max(pred.max(), labels.max()) + 1)
    cm = np.zeros((k, k), dtype=int)
    np.add.at(cm, (labels, pred), 1)
    support = cm.sum(axis=1)
    present = support > 0
    recall = np.where(present, np.diag(cm) / np.maximum(support, 1), np.nan)
    return {
        "wa": float(np.trace(cm) / cm.sum()),
        "ua": float(np.mean(recall[present])),
        "per_class": [None if np.isnan(r) else float(r) for r in recall],
        "confusion": cm.tolist(),
    }


# ---------------------------------------------------------------- data


def load_corpus(dcfg):
    if dcfg.source == "synthetic":
        return audio.synth_dataset(
            dcfg.n_utts, rng_stream(dcfg.data_seed, "data"), sample_rate=dcfg.sample_rate,
            min_s=dcfg.min_seconds, max_s=dcfg.max_seconds, noise=dcfg.noise,
        )
    rows = audio.read_manifest(dcfg.manifest)
    return [audio.load_wav(r["path"], rows) for r in rows]


def features(utterances, dcfg, cache_dir=None):
    """Spectrograms for every utterance, read from / written to ``cache_dir`` when given."""
    out = []
    for u in utterances:
        path = None
        if cache_dir is not None and u.uid:
            path = Path(cache_dir) / f"{u.uid}.spg"
            if path.exists():
                cached = audio.load_spectrogram(path)
                cached.label = u.label
                cached.meta = {"speaker": u.speaker, "session": u.session}
                out.append(cached)
                continue
        spec = audio.stft_spectrogram(u, dcfg.window_ms, dcfg.shift_ms, dcfg.dft_len,
                                      dcfg.max_freq_hz)
        if path is not None:
            audio.save_spectrogram(path, spec)
            spec.values = audio.load_spectrogram(path).values
        out.append(spec)
    return out


@dataclass
class FoldData:
    train: SegmentData
    val: SegmentData
    val_utts: UtteranceData
    test_utts: UtteranceData
    stats_digest: str


def prepare_fold(utterances, specs, fold, dcfg, dtype):
    """Normalise with training-speaker statistics only, then segment train/val."""
    idx = {"train": [], "val": [], "test": []}
    train_spk = set(fold.train)
    for i, u in enumerate(utterances):
        if u.speaker in train_spk:
            idx["train"].append(i)
        elif u.speaker == fold.val:
            idx["val"].append(i)
        elif u.speaker == fold.test:
            idx["test"].append(i)
    stats = audio.fit_stats([specs[i] for i in idx["train"]])
    norm = {k: [audio.normalize(specs[i], stats) for i in v] for k, v in idx.items()}

    def segs(items):
        pieces = [p for s in items for p in audio.segment(s, dcfg.segment_seconds)]
        if not pieces:
            raise ValueError("no segments survived segmentation")
        return SegmentData(
            np.stack([p.values for p in pieces]).astype(dtype), np.array([p.label for p in pieces])
        )

    def whole(items):
        return UtteranceData([s.values.astype(dtype) for s in items], np.array([s.label for s in items]))

    return FoldData(segs(norm["train"]), segs(norm["val"]), whole(norm["val"]),
                    whole(norm["test"]), stats.digest())


# ---------------------------------------------------------------- one run


def probe_architecture(net, probe_seed):
    """Candidate path tracked during search; depends only on the space and ``probe_seed``."""
    return random_architecture(net, rng_stream(probe_seed, "probe"))


def search(cfg, data, seed, strategy=None):
    """Run the configured strategy; returns ``(supernet, arch, model, checkpoint, logs)``."""
    strategy = strategy or cfg.strategy
    n_freq = data.train.x.shape[2]
    net = build_supernet(cfg.space(), n_freq, rng_stream(seed, "init"), cfg.n_classes,
                         nominal_time=data.train.x.shape[1])
    sched = cfg.schedule()
    pidx = np.arange(min(cfg.probe_batch, len(data.train)))
    probe = Probe(probe_architecture(net, cfg.probe_seed), data.train.x[pidx], data.train.y[pidx],
                  cfg.probe_every)
    search_log = TrainLog()
    if strategy == "joint":
        train_joint(net, data.train, cfg.search_epochs, sched, rng_stream(seed, "search"),
                    cfg.batch_size, probe, None, search_log)
        arch = derive_architecture(net)
    elif strategy in ("sampling", "dropout"):
        mode = "sample" if strategy == "sampling" else "dropout"
        train_bilevel(net, data.train, data.val, mode, cfg.k, cfg.search_epochs, sched,
                      rng_stream(seed, "search"), cfg.batch_size, cfg.arch_lr,
                      cfg.arch_warmup_epochs, probe, None, search_log)
        arch = derive_architecture(net)
    elif strategy == "none":
        arch = default_architecture(net)
    elif strategy == "random":
        arch, model, trials = random_search(
            net, data.train, data.val_utts, cfg.random_candidates, rng_stream(seed, "random"),
            cfg.retrain_epochs, cfg.batch_size, sched,
        )
        ckpt = next(c for a, c in trials if a is arch)
        return net, arch, model, ckpt, {"search": search_log, "retrain": TrainLog()}
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    retrain_log = TrainLog()
    model, ckpt, _ = retrain_selected(net, arch, data.train, data.val_utts, cfg.retrain_epochs,
                                      rng_stream(seed, "retrain"), cfg.batch_size, sched,
                                      retrain_log)
    return net, arch, model, ckpt, {"search": search_log, "retrain": retrain_log}


def write_log_csv(trainlog, path, phases=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_HEADER)
        for r in trainlog.rows:
            if phases is None or r[1] in phases:
                w.writerow([r[0], r[1], repr(r[2]), repr(r[3]), r[4]])


def emit_curves(trainlog, path):
    """Supernet training loss per weight step and probe loss per probe interval, in one CSV.

    Also writes ``<stem>_supernet.csv`` and ``<stem>_probe.csv`` with the two
    series split out.
    """
    if not trainlog.rows:
        raise ValueError("cannot emit curves for an empty log")
    path = Path(path)
    write_log_csv(trainlog, path, phases=("train", "probe"))
    write_log_csv(trainlog, path.with_name(f"{path.stem}_supernet.csv"), phases=("train",))
    write_log_csv(trainlog, path.with_name(f"{path.stem}_probe.csv"), phases=("probe",))
    return path


def load_features(cfg, out_dir=None):
    utts = load_corpus(cfg.data)
    cache = None if out_dir is None else Path(out_dir) / "cache"
    return utts, features(utts, cfg.data, cache)


def run_single(cfg, fold_id, seed, out_dir=None, corpus=None):
    """One fold and one seed: search, derive, retrain, test.  Returns a JSON-ready summary."""
    with precision(cfg.precision):
        utts, specs = corpus if corpus is not None else load_features(cfg, out_dir)
        plan = fold_plan(utts)
        dtype = np.float64 if cfg.precision == 64 else np.float32
        data = prepare_fold(utts, specs, plan[fold_id], cfg.data, dtype)
        net, arch, model, ckpt, logs = search(cfg, data, seed)
        test = evaluate(model, data.test_utts)
    doc = architecture_document(net, arch)
    summary = {
        "fold": fold_id,
        "seed": seed,
        "strategy": cfg.strategy,
        "architecture": arch.choices,
        "provenance": arch.provenance,
        "params": count_params(net, arch),
        "supernet_params": count_params(net),
        "best_epoch": ckpt.epoch,
        "val_wa": ckpt.wa,
        "val_ua": ckpt.ua,
        "test": test,
        "stats_digest": data.stats_digest,
        "n_train_segments": len(data.train),
        "n_test_utts": len(data.test_utts),
    }
    if out_dir is not None:
        run_dir = Path(out_dir) / f"fold{fold_id}" / f"seed{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        if logs["search"].rows:
            write_log_csv(logs["search"], run_dir / "search_log.csv")
            emit_curves(logs["search"], run_dir / "curves.csv")
        if logs["retrain"].rows:
            write_log_csv(logs["retrain"], run_dir / "retrain_log.csv")
        (run_dir / "architecture.txt").write_text(doc)
        (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    summary["_doc"] = doc
    return summary


def _job(args):
    cfg_dict, fold_id, seed, out_dir = args
    return run_single(parse_config(cfg_dict), fold_id, seed, out_dir)


def aggregate(runs):
    wa = [r["test"]["wa"] for r in runs]
    ua = [r["test"]["ua"] for r in runs]
    cm = np.sum([np.array(r["test"]["confusion"]) for r in runs], axis=0)
    return {
        "wa_mean": float(np.mean(wa)),
        "wa_std": float(np.std(wa)),
        "ua_mean": float(np.mean(ua)),
        "ua_std": float(np.std(ua)),
        "pooled_wa": float(np.trace(cm) / cm.sum()),
        "params": int(round(np.mean([r["params"] for r in runs]))),
        "per_fold": [{k: v for k, v in r.items() if not k.startswith("_")} for r in runs],
    }


def run_experiment(cfg, out_dir=None, folds=None):
    """Every fold (or the listed ones) times every seed, then the aggregate report.

    ``folds`` defaults to ``cfg.folds``; None there too means all folds.
    """
    if folds is None:
        folds = cfg.folds
    corpus = load_features(cfg, out_dir)
    plan = fold_plan(corpus[0])
    fold_ids = list(range(len(plan))) if folds is None else list(folds)
    for f in fold_ids:
        if not 0 <= f < len(plan):
            raise ValueError(f"fold {f} out of range 0..{len(plan) - 1}")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "config.yaml").write_text(emit_config(cfg))
    jobs = [(cfg.to_dict(), f, s, out_dir) for f in fold_ids for s in cfg.seeds]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            runs = list(pool.map(_job, jobs))
    else:
        runs = [run_single(cfg, f, s, out_dir, corpus) for _, f, s, _ in jobs]
    report = aggregate(runs)
    report["family"] = cfg.family
    report["strategy"] = cfg.strategy
    report["folds"] = [dataclasses.asdict(plan[f]) for f in fold_ids]
    if out_dir is not None:
        (Path(out_dir) / "report.json").write_text(report_json(report))
    return report


def report_json(report):
    return json.dumps(report, indent=2, sort_keys=True)


def report_digest(report):
    return hashlib.sha256(report_json(report).encode()).hexdigest()


# ---------------------------------------------------------------- parameter scale


def parameter_scale(family, n_freq, nominal_time=200):
    """Baseline parameter count of a model family against its published figure."""
    net = build_supernet(family_space(family), n_freq, None, nominal_time=nominal_time)
    count = count_params(net, default_architecture(net))
    ref = PUBLISHED_PARAMS_K[family] * 1000
    dev = (count - ref) / ref
    out = {
        "family": family,
        "n_freq": n_freq,
        "params": count,
        "reference": ref,
        "relative_deviation": dev,
    }
    if abs(dev) > 0.25:
        out["reconciliation"] = (
            "input frequency resolution is not published; the capsule/GRU input width scales "
            f"linearly with the number of bins ({n_freq} assumed), which dominates the count"
        )
    return out
