"""Search procedures: joint training, bi-level training with path sampling or path dropout,
random search, and retraining of a selected architecture."""

from __future__ import annotations

import contextlib
import copy
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import AdamState, adam_step, backward, no_grad, softmax
from .ops import softmax_xent
from .search_space import (
    DiscreteArch,
    count_params,
    dropout_mask,
    one_hot_mask,
    random_architecture,
    sample_path,
)

log = logging.getLogger(__name__)

DEFAULT_RATES = (0.001, 0.0005, 0.0002, 0.0001)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, snapshot):
        super().__init__(f"{message}; snapshot={snapshot}")
        self.snapshot = snapshot


@dataclass
class LRSchedule:
    """Stepwise rate that only moves down, one stage per epoch boundary.

    The first ``warm_epochs`` epochs run at ``rates[0]``.  After that, stage
    ``s`` becomes active once the mean epoch loss falls to the first epoch's
    mean loss divided by ``10**s``.
    """

    rates: tuple = DEFAULT_RATES
    warm_epochs: int = 3
    stage: int = 0
    reference: float | None = None
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.rates = tuple(float(r) for r in self.rates)
        if any(b >= a for a, b in zip(self.rates, self.rates[1:])):
            raise ValueError(f"learning rates must be strictly decreasing: {self.rates}")

    @property
    def lr(self):
        return self.rates[self.stage]

    def end_epoch(self, epoch, mean_loss):
        if self.reference is None:
            self.reference = float(mean_loss)
        if (
            epoch + 1 >= self.warm_epochs
            and self.stage < len(self.rates) - 1
            and mean_loss <= self.reference / 10 ** (self.stage + 1)
        ):
            self.stage += 1
        self.history.append(self.stage)
        return self.lr

    def fresh(self):
        return LRSchedule(self.rates, self.warm_epochs)


@dataclass
class TrainLog:
    """Step rows ``(step, phase, loss, lr, wall_ms)`` and per-epoch summaries."""

    rows: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    t0: float = field(default_factory=time.perf_counter)

    def add(self, step, phase, loss, lr):
        if self.rows and step < self.rows[-1][0]:
            raise ValueError("log steps must not go backwards")
        wall = int(round((time.perf_counter() - self.t0) * 1000))
        self.rows.append((int(step), phase, float(loss), float(lr), wall))

    def series(self, phase):
        return [(r[0], r[2]) for r in self.rows if r[1] == phase]

    def deterministic_view(self):
        """Everything except wall-clock times."""
        return [r[:4] for r in self.rows], copy.deepcopy(self.epochs)


@dataclass
class SegmentData:
    """Fixed-length training segments ``x [n, T, F]`` with labels ``y``."""

    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)


@dataclass
class UtteranceData:
    """Whole, variable-length spectrograms for evaluation."""

    xs: list
    y: np.ndarray

    def __len__(self):
        return len(self.y)


@dataclass
class Probe:
    """A fixed candidate path whose loss is tracked on a fixed batch during search."""

    arch: DiscreteArch
    x: np.ndarray
    y: np.ndarray
    every: int = 10

    def loss(self, net):
        with no_grad():
            return float(softmax_xent(net(self.x, one_hot_mask(net, self.arch)), self.y).data)


@contextlib.contextmanager
def frozen(tensors):
    """Stop recording gradients for ``tensors`` inside the block."""
    saved = [(t, t.requires_grad) for t in tensors]
    for t in tensors:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in saved:
            t.requires_grad = flag


def batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _check_finite(loss, step, lr, net):
    v = float(loss.data)
    if not np.isfinite(v):
        norms = {k: float(np.linalg.norm(p.data)) for k, p in net.params.items()}
        worst = sorted(norms.items(), key=lambda kv: -kv[1] if np.isfinite(kv[1]) else -np.inf)[:3]
        raise TrainingDiverged(
            "non-finite training loss",
            {"step": step, "loss": v, "lr": lr, "largest_param_norms": worst,
             "alpha": {g: a.data.tolist() for g, a in net.alpha.items()}},
        )
    return v


def _pad_to(x, t):
    if x.shape[0] >= t:
        return x
    return np.concatenate([x, np.zeros((t - x.shape[0], x.shape[1]), x.dtype)])


def predict_proba(net, xs, mask=None, max_batch=32):
    """Class posteriors for whole spectrograms; equal-length inputs are batched together."""
    t_min = net.min_time()
    dtype = next(iter(net.params.values())).dtype
    xs = [_pad_to(np.asarray(x, dtype=dtype), t_min) for x in xs]
    out = np.zeros((len(xs), net.n_classes))
    by_len = {}
    for i, x in enumerate(xs):
        by_len.setdefault(x.shape[0], []).append(i)
    with no_grad():
        for idx in by_len.values():
            for j in range(0, len(idx), max_batch):
                chunk = idx[j : j + max_batch]
                logits = net(np.stack([xs[i] for i in chunk]), mask)
                out[chunk] = softmax(logits, axis=1).data
    return out


def evaluate(net, data, mask=None):
    from .harness import compute_metrics

    pred = predict_proba(net, data.xs, mask).argmax(axis=1)
    return compute_metrics(pred, data.y, n_classes=net.n_classes)


def _named_alpha(net):
    return {f"alpha/{g}": a for g, a in net.alpha.items()}


def train_joint(net, train, epochs=60, schedule=None, rng=None, batch_size=16, probe=None,
                val=None, trainlog=None):
    """Update architecture logits and model weights together on the training loss."""
    schedule = schedule or LRSchedule()
    rng = rng if rng is not None else np.random.default_rng(0)
    trainlog = trainlog or TrainLog()
    state = AdamState()
    params = dict(net.params)
    params.update(_named_alpha(net))
    step = 0
    for epoch in range(epochs):
        losses = []
        for idx in batches(len(train), batch_size, rng):
            loss = softmax_xent(net(train.x[idx]), train.y[idx])
            v = _check_finite(loss, step, schedule.lr, net)
            backward(loss)
            adam_step(params, state, lr=schedule.lr)
            trainlog.add(step, "train", v, schedule.lr)
            losses.append(v)
            step += 1
            if probe is not None and step % probe.every == 0:
                trainlog.add(step, "probe", probe.loss(net), schedule.lr)
        _end_epoch(net, schedule, epoch, losses, val, trainlog)
    return net, trainlog


def _end_epoch(net, schedule, epoch, losses, val, trainlog, mask=None):
    summary = {"epoch": epoch, "train_loss": float(np.mean(losses)), "lr": schedule.lr}
    schedule.end_epoch(epoch, summary["train_loss"])
    if val is not None:
        m = evaluate(net, val, mask)
        summary.update(val_wa=m["wa"], val_ua=m["ua"])
    trainlog.epochs.append(summary)
    log.debug("epoch %d %s", epoch, summary)


def weight_step(net, x, y, mask, state, lr, step=0):
    """One Adam step on the parameters ``mask`` keeps; architecture logits stay fixed."""
    with frozen(net.alpha.values()):
        loss = softmax_xent(net(x, mask), y)
        v = _check_finite(loss, step, lr, net)
        backward(loss)
    adam_step(net.active_params(mask), state, lr=lr)
    return v


def arch_step(net, x, y, state, lr):
    """One Adam step on the architecture logits from the full-mixture loss; weights stay fixed."""
    with frozen(net.params.values()):
        loss = softmax_xent(net(x), y)
        backward(loss)
    adam_step(_named_alpha(net), state, lr=lr)
    return float(loss.data)


def train_bilevel(net, train, val, mode="dropout", k=1, epochs=60, schedule=None, rng=None,
                  batch_size=16, arch_lr=0.001, arch_warmup_epochs=0, probe=None,
                  val_utts=None, trainlog=None):
    """Alternate a masked weight step on training data with a full-mixture architecture step
    on validation data.

    ``mode`` is ``"sample"`` (one path per step) or ``"dropout"`` (drop ``k``
    candidates per mixed layer per step).  Only the parameters of kept
    candidates (and fixed layers) are updated in a weight step; only the
    architecture logits are updated in an architecture step.
    """
    if mode not in ("sample", "dropout"):
        raise ValueError(f"unknown bi-level mode {mode!r}")
    if val is None or len(val) == 0:
        raise ValueError("bi-level search needs a non-empty validation set")
    schedule = schedule or LRSchedule()
    rng = rng if rng is not None else np.random.default_rng(0)
    trainlog = trainlog or TrainLog()
    w_state, a_state = AdamState(), AdamState(learning_rate=arch_lr)
    val_order, val_pos = [], 0
    step = 0
    for epoch in range(epochs):
        losses = []
        for idx in batches(len(train), batch_size, rng):
            mask = sample_path(net, rng) if mode == "sample" else dropout_mask(net, k, rng)
            v = weight_step(net, train.x[idx], train.y[idx], mask, w_state, schedule.lr, step)
            trainlog.add(step, "train", v, schedule.lr)
            losses.append(v)
            step += 1
            if epoch >= arch_warmup_epochs:
                if val_pos >= len(val_order):
                    val_order, val_pos = batches(len(val), batch_size, rng), 0
                vidx = val_order[val_pos]
                val_pos += 1
                vloss = arch_step(net, val.x[vidx], val.y[vidx], a_state, arch_lr)
                trainlog.add(step, "arch", vloss, arch_lr)
            if probe is not None and step % probe.every == 0:
                trainlog.add(step, "probe", probe.loss(net), schedule.lr)
        _end_epoch(net, schedule, epoch, losses, val_utts, trainlog)
    return net, trainlog


@dataclass
class Checkpoint:
    epoch: int
    wa: float
    ua: float
    params: dict


def retrain_selected(supernet, arch, train, val, epochs=20, rng=None, batch_size=16,
                     schedule=None, trainlog=None):
    """Fresh Xavier-initialised copy of ``arch``, trained and checkpointed on best validation WA.

    Returns ``(model, checkpoint, trainlog)``; the model holds the best
    checkpoint's weights.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    model = supernet.subnet(arch, copy_params=False, rng=rng)
    schedule = schedule.fresh() if schedule is not None else LRSchedule()
    trainlog = trainlog or TrainLog()
    state = AdamState()
    best = None
    step = 0
    for epoch in range(epochs):
        losses = []
        for idx in batches(len(train), batch_size, rng):
            with frozen(model.alpha.values()):
                loss = softmax_xent(model(train.x[idx]), train.y[idx])
            v = _check_finite(loss, step, schedule.lr, model)
            backward(loss)
            adam_step(model.params, state, lr=schedule.lr)
            trainlog.add(step, "train", v, schedule.lr)
            losses.append(v)
            step += 1
        _end_epoch(model, schedule, epoch, losses, val, trainlog)
        ep = trainlog.epochs[-1]
        if best is None or ep["val_wa"] > best.wa:
            best = Checkpoint(
                epoch, ep["val_wa"], ep["val_ua"], {n: p.data.copy() for n, p in model.params.items()}
            )
    if best is not None:
        for n, p in model.params.items():
            p.data[...] = best.params[n]
    return model, best, trainlog


def random_search(supernet, train, val, n_candidates=5, rng=None, retrain_epochs=20,
                  batch_size=16, schedule=None, archs=None):
    """Train ``n_candidates`` uniformly drawn architectures; keep the best on validation WA.

    Returns ``(best_arch, best_model, trials)`` where ``trials`` lists
    ``(arch, checkpoint)`` for every candidate in draw order.
    """
    if n_candidates < 1:
        raise ValueError("random search needs at least one candidate")
    rng = rng if rng is not None else np.random.default_rng(0)
    if archs is None:
        archs = [random_architecture(supernet, rng) for _ in range(n_candidates)]
    trials, best = [], None
    for arch in archs:
        arch.param_count = count_params(supernet, arch)
        model, ckpt, _ = retrain_selected(
            supernet, arch, train, val, retrain_epochs, rng, batch_size, schedule
        )
        trials.append((arch, ckpt))
        if best is None or ckpt.wa > best[2].wa:
            best = (arch, model, ckpt)
    return best[0], best[1], trials
