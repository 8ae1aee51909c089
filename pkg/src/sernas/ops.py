"""Neural operations used by the fixed and searchable layers.

Feature maps are ``[batch, channels, time, frequency]``; sequences are
``[batch, time, features]``.  Convolutions use valid padding and stride 1,
pooling is non-overlapping and drops the trailing remainder.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import (
    Tensor,
    as_tensor,
    concat,
    make_node,
    matmul,
    relu,
    sigmoid,
    softmax,
    sqrt,
    stack,
    tanh,
    tsum,
    where,
)


def conv2d(x, weight, bias=None, activation="relu"):
    """Valid 2-D convolution (cross-correlation), stride 1.

    ``weight`` is ``[c_out, c_in, kh, kw]`` with ``kh`` along time and ``kw``
    along frequency.  ReLU is applied unless ``activation`` is None.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    B, C, T, F = x.shape
    O, Ci, kh, kw = weight.shape
    if Ci != C:
        raise ValueError(f"conv2d channel mismatch: input {x.shape}, kernel {weight.shape}")
    if kh > T or kw > F:
        raise ValueError(f"conv2d kernel {weight.shape} larger than input {x.shape}")
    To, Fo = T - kh + 1, F - kw + 1
    L = To * Fo
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))  # B C To Fo kh kw
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * kh * kw, L)
    wmat = weight.data.reshape(O, -1)
    out = np.matmul(wmat, cols).reshape(B, O, To, Fo)

    def bw(g):
        g3 = g.reshape(B, O, L)
        gw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if not x.requires_grad:
            return None, gw
        gcols = np.matmul(wmat.T, g3).reshape(B, C, kh, kw, To, Fo)
        gx = np.zeros_like(x.data)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i : i + To, j : j + Fo] += gcols[:, :, i, j]
        return gx, gw

    y = make_node(out, (x, weight), bw)
    if bias is not None:
        y = y + as_tensor(bias).reshape(1, O, 1, 1)
    if activation == "relu":
        y = relu(y)
    return y


def maxpool2d(x, wh: int, ww: int):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    if wh <= 0 or ww <= 0:
        raise ValueError(f"pooling window must be positive, got {wh}x{ww}")
    x = as_tensor(x)
    B, C, T, F = x.shape
    To, Fo = T // wh, F // ww
    if To == 0 or Fo == 0:
        raise ValueError(f"pooling window {wh}x{ww} larger than input {x.shape}")
    blocks = x.data[:, :, : To * wh, : Fo * ww].reshape(B, C, To, wh, Fo, ww)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, To, Fo, wh * ww)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros((B, C, To, Fo, wh * ww), dtype=x.data.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(B, C, To, Fo, wh, ww).transpose(0, 1, 2, 4, 3, 5)
        gx = np.zeros_like(x.data)
        gx[:, :, : To * wh, : Fo * ww] = gb.reshape(B, C, To * wh, Fo * ww)
        return (gx,)

    return make_node(out, (x,), bw)


def center_crop(x, t: int, f: int):
    """Crop the last two axes of a feature map to ``t`` x ``f`` around the center."""
    x = as_tensor(x)
    T, F = x.shape[-2:]
    if t > T or f > F:
        raise ValueError(f"cannot crop {x.shape} to {t}x{f}")
    if (t, f) == (T, F):
        return x
    t0, f0 = (T - t) // 2, (F - f) // 2
    return x[:, :, t0 : t0 + t, f0 : f0 + f]


def dense(x, weight, bias=None, activation=None):
    """Affine map ``x @ weight + bias`` with ``weight`` shaped ``[in, out]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"dense shape mismatch: input {x.shape}, weight {weight.shape}")
    y = matmul(x, weight)
    if bias is not None:
        y = y + bias
    if activation == "relu":
        y = relu(y)
    elif activation not in (None, "none"):
        raise ValueError(f"unknown activation {activation!r}")
    return y


def _length_mask(lengths, B, T):
    if lengths is None:
        return None
    lengths = np.asarray(lengths)
    if lengths.shape != (B,) or np.any(lengths > T) or np.any(lengths < 1):
        raise ValueError(f"valid lengths {lengths} incompatible with {B} sequences of {T} steps")
    return np.arange(T)[None, :] < lengths[:, None]


def gru_direction(x, w_in, w_hid, b_in, b_hid, lengths=None, reverse=False):
    """Run one GRU direction over ``x`` ``[B, T, D]``.

    Gate layout along the last axis of the weights is ``[update | reset | candidate]``:

        z = sigmoid(x Wz + bz + h Uz + cz)
        r = sigmoid(x Wr + br + h Ur + cr)
        n = tanh(x Wn + bn + r * (h Un + cn))
        h' = (1 - z) * n + z * h

    Steps past a sequence's valid length carry the state unchanged.
    Returns the list of per-step states (in time order).
    """
    x = as_tensor(x)
    B, T, _ = x.shape
    H = w_hid.shape[0]
    mask = _length_mask(lengths, B, T)
    proj = matmul(x, w_in) + b_in  # B T 3H
    h = Tensor(np.zeros((B, H), dtype=x.dtype))
    states = [None] * T
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        xp = proj[:, t, :]
        hp = matmul(h, w_hid) + b_hid
        z = sigmoid(xp[:, :H] + hp[:, :H])
        r = sigmoid(xp[:, H : 2 * H] + hp[:, H : 2 * H])
        n = tanh(xp[:, 2 * H :] + r * hp[:, 2 * H :])
        h_new = (1.0 - z) * n + z * h
        if mask is not None and not mask[:, t].all():
            h_new = where(mask[:, t : t + 1], h_new, h)
        h = h_new
        states[t] = h
    return states


def bigru(x, params, lengths=None):
    """Bidirectional GRU.

    ``params`` holds ``fw_*`` and ``bw_*`` weights (see :func:`gru_direction`).
    Returns ``(outputs [B, T, 2H], fwd_final [B, H], bwd_first [B, H])``; the
    forward final state is taken at each sequence's last valid step.
    """
    x = as_tensor(x)
    if x.shape[1] == 0:
        raise ValueError("bigru needs a non-empty sequence")
    fw = gru_direction(
        x, params["fw_w_in"], params["fw_w_hid"], params["fw_b_in"], params["fw_b_hid"], lengths
    )
    bw = gru_direction(
        x,
        params["bw_w_in"],
        params["bw_w_hid"],
        params["bw_b_in"],
        params["bw_b_hid"],
        lengths,
        reverse=True,
    )
    outputs = concat([stack(fw, axis=1), stack(bw, axis=1)], axis=2)
    # carried states make the last step equal the last valid step
    return outputs, fw[-1], bw[0]


def attention_pool(x, params, lengths=None):
    """Attentional pooling with a class-agnostic bottom-up map and class-specific top-down maps.

    ``h = relu(x Wp + bp)`` projects every step to the attention width;
    the bottom-up score ``h wb + bb`` is softmaxed over valid steps, and
    ``logit_c = sum_t attn_t * (h Wtd + btd)_{t,c}``.
    """
    x = as_tensor(x)
    B, T, _ = x.shape
    mask = _length_mask(lengths, B, T)
    if mask is not None and not mask.any(axis=1).all():
        raise ValueError("attention_pool: every timestep is masked for some sequence")
    h = dense(x, params["w_proj"], params["b_proj"], activation="relu")  # B T C
    bottom_up = dense(h, params["w_bu"], params["b_bu"])  # B T 1
    attn = softmax(bottom_up.reshape(B, T), axis=1, mask=mask)  # B T
    top_down = dense(h, params["w_td"], params["b_td"])  # B T K
    logits = tsum(top_down * attn.reshape(B, T, 1), axis=1)
    return logits, attn


def squash(s, axis=-1, eps=1e-12):
    """Capsule squash ``|s|^2/(1+|s|^2) * s/|s|``, safe at ``s = 0``."""
    s = as_tensor(s)
    sq = tsum(s * s, axis=axis, keepdims=True)
    return s * sqrt(sq + eps) / (1.0 + sq)


def dynamic_routing(u_hat, iterations: int = 3, return_coupling=False):
    """Routing by agreement.

    ``u_hat`` is ``[B, n_in, n_out, dim]`` (predictions of each input capsule
    for each output capsule).  Coupling coefficients are a softmax of the
    logits over output capsules and the logits grow by ``u_hat . v``.
    """
    u_hat = as_tensor(u_hat)
    if iterations < 1:
        raise ValueError("routing needs at least one iteration")
    B, n_in, n_out, _ = u_hat.shape
    b = Tensor(np.zeros((B, n_in, n_out), dtype=u_hat.dtype))
    couplings = []
    v = None
    for it in range(iterations):
        c = softmax(b, axis=2)
        couplings.append(c.data)
        s = tsum(u_hat * c.reshape(B, n_in, n_out, 1), axis=1)  # B n_out dim
        v = squash(s)
        if it < iterations - 1:
            b = b + tsum(u_hat * v.reshape(B, 1, n_out, -1), axis=3)
    if return_coupling:
        return v, couplings
    return v


def primary_capsules(x, params):
    """Stack ``n_heads`` parallel 1x1 conv heads into capsules.

    ``x`` is ``[B, C, T, F]``; ``params['w_heads']`` is ``[n_heads, C, P]``.
    Output is ``[B, T, P*F, n_heads]``: at every time step one capsule per
    (head channel, frequency bin), the vector running across heads.
    """
    x = as_tensor(x)
    B, C, T, F = x.shape
    w = params["w_heads"]
    nh, _, P = w.shape
    xt = x.transpose(0, 2, 3, 1)  # B T F C
    caps = matmul(xt.reshape(B * T * F, C), w.transpose(1, 0, 2).reshape(C, nh * P))
    caps = caps + params["b_heads"].reshape(1, nh * P)
    caps = caps.reshape(B, T, F, nh, P).transpose(0, 1, 4, 2, 3)  # B T P F nh
    return squash(caps.reshape(B, T, P * F, nh))


def window_starts(T: int, window: int, shift: int):
    if shift < 1:
        raise ValueError("window shift must be >= 1")
    if T <= window:
        return [0]
    starts = list(range(0, T - window + 1, shift))
    return starts


def capsule_stage(x, params, window: int = 40, shift: int = 20, routing_iters: int = 3):
    """Sequential capsule stage: primary capsules, window routing, utterance routing.

    Returns utterance capsules ``[B, n_utt, utt_dim]``.  When the map is
    shorter than one window the whole map is routed as a single window.
    """
    x = as_tensor(x)
    B, C, T, F = x.shape
    prim = primary_capsules(x, params)  # B T J d_in
    w_win = params["w_window"]  # J n_win d_win d_in
    J, n_win, d_win, d_in = w_win.shape
    if prim.shape[2] != J:
        raise ValueError(f"capsule stage expects {J} primary capsule types, got {prim.shape[2]}")
    # u_hat[b,t,j,o,:] = W[j,o] @ u[b,t,j], as one batched matmul over j
    pj = prim.transpose(2, 0, 1, 3).reshape(J, B * T, d_in)
    wj = w_win.reshape(J, n_win * d_win, d_in).transpose(0, 2, 1)
    u_hat = matmul(pj, wj).reshape(J, B, T, n_win, d_win).transpose(1, 2, 0, 3, 4)
    win_caps = []
    for s0 in window_starts(T, window, shift):
        seg = u_hat[:, s0 : s0 + window]
        tw = seg.shape[1]
        win_caps.append(dynamic_routing(seg.reshape(B, tw * J, n_win, d_win), routing_iters))
    wc = stack(win_caps, axis=1)  # B nW n_win d_win
    nW = wc.shape[1]
    w_utt = params["w_utt"]  # n_win n_utt d_utt d_win
    _, n_utt, d_utt, _ = w_utt.shape
    wcj = wc.transpose(2, 0, 1, 3).reshape(n_win, B * nW, d_win)
    wu = w_utt.reshape(n_win, n_utt * d_utt, d_win).transpose(0, 2, 1)
    u2 = matmul(wcj, wu).reshape(n_win, B, nW, n_utt, d_utt).transpose(1, 2, 0, 3, 4)
    return dynamic_routing(u2.reshape(B, nW * n_win, n_utt, d_utt), routing_iters)


def softmax_xent(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"expected {B} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= K):
        raise ValueError(f"label out of range [0, {K})")
    top = logits.data.argmax(axis=1)
    z = logits.data - logits.data[np.arange(B), top][:, None]
    # the max term contributes exactly 1; log1p of the rest keeps tiny losses accurate
    rest = np.exp(z)
    rest[np.arange(B), top] = 0.0
    lse = np.log1p(rest.sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(B), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(B), labels] -= 1.0
        return (g * p / B,)

    return make_node(np.asarray(loss, dtype=logits.dtype), (logits,), bw)
