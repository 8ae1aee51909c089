"""Supernet construction, mixed-operation forward rule, path masks and architecture derivation.

A search space is a plain list of layer dicts (the same structure that lives
in an experiment config), e.g.::

    [{"type": "conv", "name": "conv3", "c_out": 16, "kernels": [[5, 5], [4, 4]]},
     {"type": "pool", "window": [2, 2]},
     {"type": "sequence"},
     {"type": "attention", "name": "att", "channels": [32, 64]}]

Any layer with more than one candidate (``kernels``, ``channels`` or
``dims``) becomes a mixed layer whose output is the architecture-weighted
sum of its candidates.  Layers sharing a ``group`` share one architecture
logit vector and one mask entry.
"""

from __future__ import annotations

import copy
import itertools
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autodiff import Tensor, as_tensor, concat, default_dtype, softmax, xavier_init, zeros_param

FIRST_CONV_KERNELS = [[2, 8], [2, 7], [2, 6], [1, 9], [1, 10], [3, 5]]
MID_CONV_KERNELS = [[5, 5], [5, 4], [4, 5], [4, 4], [4, 6], [6, 4]]
HEAD_WIDTHS = [32, 48, 64, 80]
FAMILIES = ("cnn_rnn_att", "cnn_seqcap")


def _xavier(shape, rng, name, fan=None):
    if fan is None:
        return xavier_init(shape, rng, name=name)
    bound = np.sqrt(6.0 / (fan[0] + fan[1]))
    data = rng.uniform(-bound, bound, size=shape).astype(default_dtype())
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------- operations
#
# Shapes passed around below are per-sample: (C, T, F) for feature maps,
# (T, D) for sequences and (D,) for vectors.


class Conv:
    kind = "conv"

    def __init__(self, kh, kw, c_out):
        self.kh, self.kw, self.c_out = int(kh), int(kw), int(c_out)

    def describe(self):
        return f"conv {self.kh}x{self.kw} c_out={self.c_out}"

    def out_shape(self, s):
        C, T, F = s
        if self.kh > T or self.kw > F:
            raise ValueError(f"kernel {self.kh}x{self.kw} larger than input {s}")
        return (self.c_out, T - self.kh + 1, F - self.kw + 1)

    def n_params(self, s):
        return self.c_out * (s[0] * self.kh * self.kw + 1)

    def init(self, rng, s, prefix):
        return {
            f"{prefix}w": _xavier((self.c_out, s[0], self.kh, self.kw), rng, f"{prefix}w"),
            f"{prefix}b": zeros_param((self.c_out,), f"{prefix}b"),
        }

    def forward(self, p, h, prefix):
        return ops.conv2d(h, p[f"{prefix}w"], p[f"{prefix}b"], activation="relu")


class Pool:
    kind = "pool"

    def __init__(self, wh, ww):
        self.wh, self.ww = int(wh), int(ww)

    def describe(self):
        return f"maxpool {self.wh}x{self.ww}"

    def out_shape(self, s):
        C, T, F = s
        if T // self.wh == 0 or F // self.ww == 0:
            raise ValueError(f"pool {self.wh}x{self.ww} larger than input {s}")
        return (C, T // self.wh, F // self.ww)

    def n_params(self, s):
        return 0

    def init(self, rng, s, prefix):
        return {}

    def forward(self, p, h, prefix):
        return ops.maxpool2d(h, self.wh, self.ww)


class Sequence:
    """``[B, C, T, F] -> [B, T, C*F]``."""

    kind = "sequence"

    def describe(self):
        return "to-sequence"

    def out_shape(self, s):
        C, T, F = s
        return (T, C * F)

    def n_params(self, s):
        return 0

    def init(self, rng, s, prefix):
        return {}

    def forward(self, p, h, prefix):
        B, C, T, F = h.shape
        return h.transpose(0, 2, 1, 3).reshape(B, T, C * F)


class Identity:
    kind = "identity"

    def describe(self):
        return "identity"

    def out_shape(self, s):
        return tuple(s)

    def n_params(self, s):
        return 0

    def init(self, rng, s, prefix):
        return {}

    def forward(self, p, h, prefix):
        return h


class BiGRU:
    kind = "bigru"

    def __init__(self, hidden):
        self.hidden = int(hidden)

    def describe(self):
        return f"bigru hidden={self.hidden}"

    def out_shape(self, s):
        return (s[0], 2 * self.hidden)

    def n_params(self, s):
        D, H = s[1], self.hidden
        return 2 * 3 * (H * (D + H) + 2 * H)

    def init(self, rng, s, prefix):
        D, H = s[1], self.hidden
        p = {}
        for d in ("fw", "bw"):
            p[f"{prefix}{d}_w_in"] = _xavier((D, 3 * H), rng, f"{prefix}{d}_w_in", fan=(D, H))
            p[f"{prefix}{d}_w_hid"] = _xavier((H, 3 * H), rng, f"{prefix}{d}_w_hid", fan=(H, H))
            p[f"{prefix}{d}_b_in"] = zeros_param((3 * H,), f"{prefix}{d}_b_in")
            p[f"{prefix}{d}_b_hid"] = zeros_param((3 * H,), f"{prefix}{d}_b_hid")
        return p

    def forward(self, p, h, prefix):
        sub = {k[len(prefix) :]: v for k, v in p.items() if k.startswith(prefix)}
        return ops.bigru(h, sub)[0]


class Attention:
    kind = "attention"

    def __init__(self, channels, n_classes):
        self.channels, self.n_classes = int(channels), int(n_classes)

    def describe(self):
        return f"attention channels={self.channels}"

    def out_shape(self, s):
        return (self.n_classes,)

    def n_params(self, s):
        D, C, K = s[1], self.channels, self.n_classes
        return C * (D + 1) + (C + 1) + K * (C + 1)

    def init(self, rng, s, prefix):
        D, C, K = s[1], self.channels, self.n_classes
        return {
            f"{prefix}w_proj": _xavier((D, C), rng, f"{prefix}w_proj"),
            f"{prefix}b_proj": zeros_param((C,), f"{prefix}b_proj"),
            f"{prefix}w_bu": _xavier((C, 1), rng, f"{prefix}w_bu"),
            f"{prefix}b_bu": zeros_param((1,), f"{prefix}b_bu"),
            f"{prefix}w_td": _xavier((C, K), rng, f"{prefix}w_td"),
            f"{prefix}b_td": zeros_param((K,), f"{prefix}b_td"),
        }

    def forward(self, p, h, prefix):
        sub = {k[len(prefix) :]: v for k, v in p.items() if k.startswith(prefix)}
        return ops.attention_pool(h, sub)[0]


class Capsules:
    """Primary capsules, window-level routing and utterance-level routing, flattened."""

    kind = "capsule"

    def __init__(
        self,
        heads=8,
        head_channels=16,
        window_caps=8,
        window_dim=8,
        utt_caps=4,
        utt_dim=16,
        window=40,
        shift=20,
        routing_iters=3,
    ):
        self.heads, self.head_channels = int(heads), int(head_channels)
        self.window_caps, self.window_dim = int(window_caps), int(window_dim)
        self.utt_caps, self.utt_dim = int(utt_caps), int(utt_dim)
        self.window, self.shift, self.routing_iters = int(window), int(shift), int(routing_iters)

    def describe(self):
        return (
            f"capsules heads={self.heads}x{self.head_channels} "
            f"window={self.window_caps}x{self.window_dim} utt={self.utt_caps}x{self.utt_dim}"
        )

    def out_shape(self, s):
        return (self.utt_caps * self.utt_dim,)

    def _types(self, s):
        return self.head_channels * s[2]

    def n_params(self, s):
        C = s[0]
        J = self._types(s)
        return (
            self.heads * self.head_channels * (C + 1)
            + J * self.window_caps * self.window_dim * self.heads
            + self.window_caps * self.utt_caps * self.utt_dim * self.window_dim
        )

    def init(self, rng, s, prefix):
        C = s[0]
        J = self._types(s)
        nh, P = self.heads, self.head_channels
        return {
            f"{prefix}w_heads": _xavier((nh, C, P), rng, f"{prefix}w_heads", fan=(C, P)),
            f"{prefix}b_heads": zeros_param((nh * P,), f"{prefix}b_heads"),
            f"{prefix}w_window": _xavier(
                (J, self.window_caps, self.window_dim, nh),
                rng,
                f"{prefix}w_window",
                fan=(nh, self.window_dim),
            ),
            f"{prefix}w_utt": _xavier(
                (self.window_caps, self.utt_caps, self.utt_dim, self.window_dim),
                rng,
                f"{prefix}w_utt",
                fan=(self.window_dim, self.utt_dim),
            ),
        }

    def forward(self, p, h, prefix):
        sub = {k[len(prefix) :]: v for k, v in p.items() if k.startswith(prefix)}
        v = ops.capsule_stage(h, sub, self.window, self.shift, self.routing_iters)
        return v.reshape(v.shape[0], -1)


class DenseHead:
    """``dense(in -> dim, relu) -> dense(dim -> classes)``."""

    kind = "dense_head"

    def __init__(self, dim, n_classes):
        self.dim, self.n_classes = int(dim), int(n_classes)

    def describe(self):
        return f"dense_head dim={self.dim}"

    def out_shape(self, s):
        return (self.n_classes,)

    def n_params(self, s):
        D = int(np.prod(s))
        return D * self.dim + self.dim + self.dim * self.n_classes + self.n_classes

    def init(self, rng, s, prefix):
        D = int(np.prod(s))
        return {
            f"{prefix}w1": _xavier((D, self.dim), rng, f"{prefix}w1"),
            f"{prefix}b1": zeros_param((self.dim,), f"{prefix}b1"),
            f"{prefix}w2": _xavier((self.dim, self.n_classes), rng, f"{prefix}w2"),
            f"{prefix}b2": zeros_param((self.n_classes,), f"{prefix}b2"),
        }

    def forward(self, p, h, prefix):
        if h.ndim > 2:
            h = h.reshape(h.shape[0], -1)
        z = ops.dense(h, p[f"{prefix}w1"], p[f"{prefix}b1"], activation="relu")
        return ops.dense(z, p[f"{prefix}w2"], p[f"{prefix}b2"])


# ---------------------------------------------------------------- layers


@dataclass
class MixedLayer:
    """One searchable layer: ``N`` candidate ops combined by architecture weights."""

    name: str
    ops: list
    group: str
    default: int = 0
    align: tuple | None = None

    @property
    def n(self):
        return len(self.ops)

    def crop_shape(self, s):
        """Common (time, freq) size of feature-map outputs for input shape ``s``.

        ``align`` holds the largest kernel of the original candidate set, so a
        derived single-candidate layer keeps the supernet's crop.
        """
        outs = [op.out_shape(s) for op in self.ops]
        t, f = min(o[1] for o in outs), min(o[2] for o in outs)
        if self.align is not None:
            t, f = min(t, s[1] - self.align[0] + 1), min(f, s[2] - self.align[1] + 1)
            if t < 1 or f < 1:
                raise ValueError(f"input {s} too small for layer {self.name!r}")
        return t, f


@dataclass
class FixedLayer:
    name: str
    op: object


@dataclass
class ParallelLayer:
    """Branches applied to the same input, cropped to a common size and concatenated on channels."""

    name: str
    branches: list


def _candidate_ops(d, n_classes):
    t = d["type"]
    if t == "conv":
        return [Conv(kh, kw, d["c_out"]) for kh, kw in d["kernels"]]
    if t == "attention":
        return [Attention(c, n_classes) for c in d["channels"]]
    if t == "dense_head":
        return [DenseHead(c, n_classes) for c in d["dims"]]
    if t == "identity":
        return [Identity() for _ in range(int(d.get("n", 1)))]
    raise ValueError(f"layer type {t!r} has no candidate set")


def _fixed_op(d):
    t = d["type"]
    if t == "pool":
        return Pool(*d["window"])
    if t == "sequence":
        return Sequence()
    if t == "bigru":
        return BiGRU(d.get("hidden", 64))
    if t == "capsule":
        kw = {k: v for k, v in d.items() if k not in ("type", "name")}
        return Capsules(**kw)
    raise ValueError(f"unknown layer type {t!r}")


def _make_layer(d, idx, n_classes):
    name = d["name"]
    if d["type"] == "parallel":
        branches = [_make_layer(b, j, n_classes) for j, b in enumerate(d["branches"])]
        return ParallelLayer(name, branches)
    if d["type"] in ("conv", "attention", "dense_head", "identity"):
        cands = _candidate_ops(d, n_classes)
        if not cands:
            raise ValueError(f"layer {name!r} has an empty candidate set")
        descs = [c.describe() for c in cands]
        if d["type"] != "identity" and len(set(descs)) != len(descs):
            raise ValueError(f"layer {name!r} has duplicate candidates: {descs}")
        default = int(d.get("default", 0))
        if not 0 <= default < len(cands):
            raise ValueError(f"layer {name!r}: default index {default} out of range")
        align = tuple(d["align"]) if d.get("align") is not None else None
        return MixedLayer(name, cands, d["group"], default, align)
    return FixedLayer(name, _fixed_op(d))


# ---------------------------------------------------------------- supernet


@dataclass
class PathMask:
    """Per-group keep vectors plus the output scale applied in each mixed layer."""

    mode: str
    keep: dict
    scale: dict

    def kept(self, group):
        return np.flatnonzero(self.keep[group])


@dataclass
class DiscreteArch:
    choices: dict
    provenance: str = "argmax"
    param_count: int | None = None

    def key(self):
        return tuple(sorted(self.choices.items()))


class Supernet:
    """Ordered stack of fixed, parallel and mixed layers with model and architecture parameters.

    ``params`` maps unique names to Tensors (the model weights); ``alpha``
    maps each architecture group to its logit vector.
    """

    def __init__(self, space, n_freq, n_classes=4, rng=None, nominal_time=200, init=True):
        self.space = normalize_space(space)
        self.n_freq = int(n_freq)
        self.n_classes = int(n_classes)
        self.nominal_time = int(nominal_time)
        self.layers = [_make_layer(d, i, n_classes) for i, d in enumerate(self.space)]
        self.groups = {}
        for layer in self.mixed_layers():
            n = self.groups.setdefault(layer.group, layer.n)
            if n != layer.n:
                raise ValueError(f"group {layer.group!r} mixes candidate sets of different sizes")
        names = [layer.name for layer in self._all_layers()]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in search space: {names}")
        self.params = {}
        self.alpha = {
            g: Tensor(np.zeros(n, dtype=default_dtype()), requires_grad=True, name=f"alpha/{g}")
            for g, n in self.groups.items()
        }
        self._shapes = self._infer_shapes((1, self.nominal_time, self.n_freq))
        if init:
            self.reset_parameters(rng if rng is not None else np.random.default_rng(0))

    # -- structure

    def _all_layers(self):
        for layer in self.layers:
            yield layer
            if isinstance(layer, ParallelLayer):
                yield from layer.branches

    def mixed_layers(self):
        return [layer for layer in self._all_layers() if isinstance(layer, MixedLayer)]

    def _layer_out_shape(self, layer, s):
        if isinstance(layer, FixedLayer):
            return layer.op.out_shape(s)
        if isinstance(layer, ParallelLayer):
            outs = [self._layer_out_shape(b, s) for b in layer.branches]
            if any(len(o) != 3 for o in outs):
                raise ValueError(f"parallel layer {layer.name!r} needs feature-map branches")
            return (sum(o[0] for o in outs), min(o[1] for o in outs), min(o[2] for o in outs))
        outs = [op.out_shape(s) for op in layer.ops]
        ranks = {len(o) for o in outs}
        if len(ranks) != 1:
            raise ValueError(f"candidates of {layer.name!r} produce outputs of different rank")
        if len(outs[0]) == 3:
            chans = {o[0] for o in outs}
            if len(chans) != 1:
                bad = [op.describe() for op in layer.ops]
                raise ValueError(f"candidates of {layer.name!r} disagree on channels: {bad}")
            return (outs[0][0], *layer.crop_shape(s))
        if len({o for o in outs}) != 1:
            bad = [f"{op.describe()} -> {o}" for op, o in zip(layer.ops, outs)]
            raise ValueError(f"candidates of {layer.name!r} cannot be aligned: {bad}")
        return outs[0]

    def _infer_shapes(self, s):
        shapes = {}
        for layer in self.layers:
            shapes[layer.name] = s
            if isinstance(layer, ParallelLayer):
                for b in layer.branches:
                    shapes[b.name] = s
            s = self._layer_out_shape(layer, s)
        if s != (self.n_classes,):
            raise ValueError(f"search space must end in class logits, got output shape {s}")
        return shapes

    def reset_parameters(self, rng):
        self.params = {}
        for layer in self._all_layers():
            s = self._shapes[layer.name]
            if isinstance(layer, FixedLayer):
                self.params.update(layer.op.init(rng, s, f"{layer.name}/"))
            elif isinstance(layer, MixedLayer):
                for i, op in enumerate(layer.ops):
                    self.params.update(op.init(rng, s, f"{layer.name}/{i}/"))
        for a in self.alpha.values():
            a.data[:] = 0.0
            a.grad = None

    def candidate_params(self, layer, i):
        prefix = f"{layer.name}/{i}/"
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def fixed_params(self):
        mixed = tuple(f"{layer.name}/" for layer in self.mixed_layers())
        return {k: v for k, v in self.params.items() if not k.startswith(mixed)}

    def active_params(self, mask=None):
        """Model parameters that a forward pass under ``mask`` touches."""
        out = self.fixed_params()
        for layer in self.mixed_layers():
            idx = range(layer.n) if mask is None else mask.kept(layer.group)
            for i in idx:
                out.update(self.candidate_params(layer, i))
        return out

    def min_time(self):
        """Smallest input length (frames) that survives the layer stack."""
        lo, hi = 1, max(self.nominal_time, 1)
        while True:
            try:
                self._infer_shapes((1, hi, self.n_freq))
                break
            except ValueError:
                hi *= 2
        while lo < hi:
            mid = (lo + hi) // 2
            try:
                self._infer_shapes((1, mid, self.n_freq))
                hi = mid
            except ValueError:
                lo = mid + 1
        return hi

    # -- architecture weights

    def arch_weights(self):
        return {g: softmax(a) for g, a in self.alpha.items()}

    # -- evaluation

    def forward(self, x, mask=None, weights=None):
        """Logits for a batch ``x`` of spectrograms ``[B, T, F]``.

        ``mask`` selects full / sample / dropout mode (None means full);
        ``weights`` overrides the per-group architecture weights.
        """
        h = as_tensor(x)
        if h.ndim == 3:
            h = h.reshape(h.shape[0], 1, h.shape[1], h.shape[2])
        if weights is None and (mask is None or mask.mode != "sample"):
            weights = self.arch_weights()
        for layer in self.layers:
            h = self._apply(layer, h, mask, weights)
        return h

    __call__ = forward

    def _apply(self, layer, h, mask, weights):
        if isinstance(layer, FixedLayer):
            return layer.op.forward(self.params, h, f"{layer.name}/")
        if isinstance(layer, ParallelLayer):
            outs = [self._apply(b, h, mask, weights) for b in layer.branches]
            t = min(o.shape[2] for o in outs)
            f = min(o.shape[3] for o in outs)
            return concat([ops.center_crop(o, t, f) for o in outs], axis=1)
        a = None if weights is None else weights[layer.group]
        return mixed_forward(self, layer, h, a, mask)

    # -- discrete architectures

    def subnet(self, arch, copy_params=True, rng=None):
        """Discrete network keeping only the chosen candidate of each mixed layer."""
        space = restrict_space(self.space, arch)
        net = Supernet(
            space, self.n_freq, self.n_classes, rng=rng, nominal_time=self.nominal_time,
            init=not copy_params,
        )
        if copy_params:
            net.params = {}
            for k, v in self.params.items():
                nk = _map_param_name(k, self, arch)
                if nk is not None:
                    net.params[nk] = Tensor(v.data.copy(), requires_grad=True, name=nk)
        return net

    def param_shapes(self):
        return {k: v.shape for k, v in self.params.items()}


def _map_param_name(name, net, arch):
    for layer in net.mixed_layers():
        prefix = f"{layer.name}/"
        if name.startswith(prefix):
            idx, pname = name[len(prefix) :].split("/", 1)
            if int(idx) != arch.choices[layer.group]:
                return None
            return f"{layer.name}/0/{pname}"
    return name


_CANDIDATE_KEY = {"conv": "kernels", "attention": "channels", "dense_head": "dims"}


def normalize_space(space):
    """Copy of ``space`` with every layer named and every mixed layer grouped."""
    out = []
    for i, d in enumerate(space):
        d = copy.deepcopy(dict(d))
        d.setdefault("name", f"{d['type']}{i}")
        if d["type"] == "parallel":
            d["branches"] = [dict(b) for b in d["branches"]]
            for j, b in enumerate(d["branches"]):
                b.setdefault("name", f"{d['name']}_{j}")
                b.setdefault("group", b["name"])
        elif d["type"] in _CANDIDATE_KEY or d["type"] == "identity":
            d.setdefault("group", d["name"])
        out.append(d)
    return out


def _restrict(d, choices):
    d = dict(d)
    if d["type"] == "parallel":
        d["branches"] = [_restrict(b, choices) for b in d["branches"]]
    elif d["type"] in _CANDIDATE_KEY:
        key = _CANDIDATE_KEY[d["type"]]
        if d["type"] == "conv" and d.get("align") is None:
            d["align"] = [max(k[0] for k in d[key]), max(k[1] for k in d[key])]
        d[key] = [d[key][choices[d["group"]]]]
        d["default"] = 0
    elif d["type"] == "identity":
        d["n"] = 1
    return d


def restrict_space(space, arch):
    """Layer list with every mixed layer reduced to its chosen candidate."""
    return [_restrict(d, arch.choices) for d in normalize_space(space)]


# ---------------------------------------------------------------- mixed forward


def arch_softmax(alpha):
    """Stabilized softmax of a logit vector (plain numpy in, numpy out)."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.size == 0:
        raise ValueError("arch_softmax needs a non-empty logit vector")
    if not np.all(np.isfinite(alpha)):
        raise ValueError("architecture logits must be finite")
    e = np.exp(alpha - alpha.max())
    return e / e.sum()


def mixed_forward(net, layer, h, a, mask):
    """Combine the candidates of ``layer`` on input ``h``.

    full: ``sum_i a_i phi_i(h)``; sample: ``phi_chosen(h)``;
    dropout: ``N/(N-k) * sum_{kept} a_i phi_i(h)``.  Feature-map outputs are
    center-cropped to the smallest candidate's spatial size.
    """
    mode = "full" if mask is None else mask.mode
    if mode == "full":
        idx, scale = range(layer.n), 1.0
    else:
        idx, scale = mask.kept(layer.group), mask.scale[layer.group]
    if mode == "sample" and len(idx) != 1:
        raise ValueError(f"sample mask must keep exactly one op in {layer.name!r}")
    outs = {i: layer.ops[i].forward(net.params, h, f"{layer.name}/{i}/") for i in idx}
    if outs and next(iter(outs.values())).ndim == 4:
        t, f = layer.crop_shape(tuple(h.shape[1:]))
        outs = {i: ops.center_crop(o, t, f) for i, o in outs.items()}
    if mode == "sample":
        return outs[idx[0]]
    if a is None:
        raise ValueError(f"{mode} mode needs architecture weights for {layer.name!r}")
    total = None
    for i, o in outs.items():
        term = o * a[i]
        total = term if total is None else total + term
    if scale != 1.0:
        total = total * scale
    return total


# ---------------------------------------------------------------- masks


def full_mask(net):
    return PathMask(
        "full", {g: np.ones(n, dtype=bool) for g, n in net.groups.items()},
        {g: 1.0 for g in net.groups},
    )


def sample_path(net, rng):
    """Keep exactly one uniformly chosen candidate per group."""
    if not net.groups:
        raise ValueError("supernet has no mixed layers")
    keep, scale = {}, {}
    for g, n in net.groups.items():
        v = np.zeros(n, dtype=bool)
        v[rng.integers(n)] = True
        keep[g], scale[g] = v, 1.0
    return PathMask("sample", keep, scale)


def dropout_mask(net, k, rng):
    """Drop exactly ``k`` uniformly chosen candidates per group; scale the rest by ``N/(N-k)``.

    Single-candidate groups have nothing to search and are always kept.
    """
    k = int(k)
    if k < 1:
        raise ValueError("k must be >= 1")
    keep, scale = {}, {}
    for g, n in net.groups.items():
        if n == 1:
            keep[g], scale[g] = np.ones(1, dtype=bool), 1.0
            continue
        if k >= n:
            raise ValueError(f"cannot drop {k} of {n} candidates in group {g!r}")
        v = np.ones(n, dtype=bool)
        v[rng.choice(n, size=k, replace=False)] = False
        keep[g], scale[g] = v, n / (n - k)
    return PathMask("dropout", keep, scale)


def one_hot_mask(net, arch):
    keep = {}
    for g, n in net.groups.items():
        v = np.zeros(n, dtype=bool)
        v[arch.choices[g]] = True
        keep[g] = v
    return PathMask("sample", keep, {g: 1.0 for g in net.groups})


def one_hot_weights(net, arch):
    out = {}
    for g, n in net.groups.items():
        w = np.zeros(n, dtype=default_dtype())
        w[arch.choices[g]] = 1.0
        out[g] = Tensor(w)
    return out


# ---------------------------------------------------------------- derivation / counting


def derive_architecture(net):
    """Pick the highest-weighted candidate per group; ties go to the lowest index."""
    choices = {g: int(np.argmax(a.data)) for g, a in net.alpha.items()}
    arch = DiscreteArch(choices, "argmax")
    arch.param_count = count_params(net, arch)
    return arch


def default_architecture(net):
    choices = {layer.group: layer.default for layer in net.mixed_layers()}
    arch = DiscreteArch(choices, "baseline")
    arch.param_count = count_params(net, arch)
    return arch


def random_architecture(net, rng):
    choices = {g: int(rng.integers(n)) for g, n in net.groups.items()}
    arch = DiscreteArch(choices, "random")
    arch.param_count = count_params(net, arch)
    return arch


def enumerate_architectures(net):
    groups = list(net.groups)
    for combo in itertools.product(*(range(net.groups[g]) for g in groups)):
        yield DiscreteArch(dict(zip(groups, combo)), "enumerated")


def count_params(net, arch=None):
    """Closed-form parameter count; the whole supernet, or only ``arch``'s chosen candidates."""
    total = 0
    for layer in net._all_layers():
        s = net._shapes[layer.name]
        if isinstance(layer, FixedLayer):
            total += layer.op.n_params(s)
        elif isinstance(layer, MixedLayer):
            if arch is None:
                total += sum(op.n_params(s) for op in layer.ops)
            else:
                total += layer.ops[arch.choices[layer.group]].n_params(s)
    return int(total)


# ---------------------------------------------------------------- families


def family_space(family, tie_first_convs=False, kernel_order="time_freq", n_classes=4, **overrides):
    """Layer list for one of the two searchable SER systems.

    ``kernel_order='freq_time'`` swaps the axes of every kernel and pooling
    window.  Candidate sets can be replaced through ``overrides`` keyed by
    layer name (``conv1``, ``conv2``, ``conv3``, ``conv4``, ``head``).
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown model family {family!r}; choose from {FAMILIES}")

    def k(kh, kw):
        return [kh, kw] if kernel_order == "time_freq" else [kw, kh]

    if kernel_order not in ("time_freq", "freq_time"):
        raise ValueError(f"unknown kernel order {kernel_order!r}")
    first = overrides.get("conv1", FIRST_CONV_KERNELS)
    second = overrides.get("conv2", [[kw, kh] for kh, kw in first])
    mid3 = overrides.get("conv3", MID_CONV_KERNELS)
    mid4 = overrides.get("conv4", mid3)
    heads = overrides.get("head", HEAD_WIDTHS)
    head_default = heads.index(64) if 64 in heads else 0
    g1 = "conv1" if not tie_first_convs else "conv12"
    g2 = "conv2" if not tie_first_convs else "conv12"
    space = [
        {
            "type": "parallel",
            "name": "conv12",
            "branches": [
                {"type": "conv", "name": "conv1", "group": g1, "c_out": 8,
                 "kernels": [k(*x) for x in first]},
                {"type": "conv", "name": "conv2", "group": g2, "c_out": 8,
                 "kernels": [k(*x) for x in second]},
            ],
        },
        {"type": "pool", "window": k(2, 1)},
        {"type": "conv", "name": "conv3", "c_out": 16, "kernels": [k(*x) for x in mid3]},
        {"type": "pool", "window": k(2, 2)},
        {"type": "conv", "name": "conv4", "c_out": 16, "kernels": [k(*x) for x in mid4]},
        {"type": "pool", "window": k(2, 2)},
        {"type": "pool", "window": k(4, 1)},
    ]
    if family == "cnn_rnn_att":
        space += [
            {"type": "sequence"},
            {"type": "bigru", "hidden": 64},
            {"type": "attention", "name": "head", "channels": list(heads), "default": head_default},
        ]
    else:
        space += [
            {"type": "capsule", "heads": 8, "head_channels": 16, "window_caps": 8,
             "window_dim": 8, "utt_caps": 4, "utt_dim": 16, "window": 40, "shift": 20,
             "routing_iters": 3},
            {"type": "dense_head", "name": "head", "dims": list(heads), "default": head_default},
        ]
    return space


def build_supernet(space, n_freq, rng, n_classes=4, nominal_time=200):
    """Supernet for a family name or an explicit layer list."""
    if isinstance(space, str):
        space = family_space(space, n_classes=n_classes)
    if not space:
        raise ValueError("empty search space")
    return Supernet(space, n_freq, n_classes, rng=rng, nominal_time=nominal_time)


# ---------------------------------------------------------------- architecture documents


def architecture_document(net, arch):
    """Plain-text description: one tab-separated line per layer (id, op, hyperparameters, params)."""
    lines = [f"# provenance\t{arch.provenance}", f"# total_params\t{count_params(net, arch)}"]
    for layer in net._all_layers():
        s = net._shapes[layer.name]
        if isinstance(layer, ParallelLayer):
            continue
        if isinstance(layer, FixedLayer):
            op, choice = layer.op, "fixed"
        else:
            i = arch.choices[layer.group]
            op, choice = layer.ops[i], f"choice={i}/{layer.n}"
        lines.append(f"{layer.name}\t{op.kind}\t{op.describe()}; {choice}\t{op.n_params(s)}")
    return "\n".join(lines) + "\n"


def parse_architecture_document(text, net):
    """Recover a :class:`DiscreteArch` from :func:`architecture_document` output."""
    choices, prov = {}, "document"
    by_name = {layer.name: layer for layer in net.mixed_layers()}
    for line in text.splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            parts = line[1:].strip().split("\t")
            if parts[0] == "provenance" and len(parts) > 1:
                prov = parts[1]
            continue
        name, _kind, desc, _params = line.split("\t")
        if name in by_name:
            tag = desc.rsplit("choice=", 1)
            if len(tag) != 2:
                raise ValueError(f"line for mixed layer {name!r} lacks a choice tag")
            idx = int(tag[1].split("/")[0])
            choices[by_name[name].group] = idx
    missing = set(net.groups) - set(choices)
    if missing:
        raise ValueError(f"architecture document misses groups {sorted(missing)}")
    arch = DiscreteArch(choices, prov)
    arch.param_count = count_params(net, arch)
    return arch
