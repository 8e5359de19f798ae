"""Network building blocks over the autodiff engine: parameter store,
linear/recurrent layers, multi-head attention, positional encodings."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

MASK_NEG = -1e30


class ParamStore:
    """Named parameters with deterministic, creation-order initialization."""

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, ad.Tensor] = {}

    def add(self, name: str, shape, init: str = "xavier") -> ad.Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if init == "xavier":
            fan_in, fan_out = (shape[0], shape[-1]) if len(shape) > 1 else (shape[0], shape[0])
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            value = self.rng.uniform(-limit, limit, size=shape)
        elif init == "zeros":
            value = np.zeros(shape)
        elif init == "ones":
            value = np.ones(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        p = ad.parameter(value)
        self.params[name] = p
        return p

    def __getitem__(self, name: str) -> ad.Tensor:
        return self.params[name]

    def count(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))

    def state(self) -> dict:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state(self, state: dict):
        missing = set(self.params) ^ set(state)
        if missing:
            raise ValueError(f"parameter name mismatch: {sorted(missing)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.value.shape:
                raise ValueError(f"parameter {k}: shape {arr.shape} != {p.value.shape}")
            p.value = arr.copy()
            p.grad = None


def linear(x, w, b=None):
    out = ad.matmul(x, w)
    return out if b is None else ad.add(out, b)


def lstm_step(xproj, h, c, w_h, hidden):
    """One LSTM step; xproj is the precomputed x @ W_x + b slice.

    Gate order in the fused matrices is fixed: input, forget, cell, output.
    """
    gates = ad.add(xproj, ad.matmul(h, w_h))
    i = ad.sigmoid(gates[:, 0 * hidden:1 * hidden])
    f = ad.sigmoid(gates[:, 1 * hidden:2 * hidden])
    g = ad.tanh(gates[:, 2 * hidden:3 * hidden])
    o = ad.sigmoid(gates[:, 3 * hidden:4 * hidden])
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


def gru_step(xproj_zr, xproj_h, h, w_hzr, w_hh, hidden):
    """One GRU step; xproj_* are precomputed x projections.

    Gate order: update (z), reset (r); candidate uses the reset-scaled state.
    """
    zr = ad.sigmoid(ad.add(xproj_zr, ad.matmul(h, w_hzr)))
    z = zr[:, :hidden]
    r = zr[:, hidden:]
    cand = ad.tanh(ad.add(xproj_h, ad.matmul(ad.mul(r, h), w_hh)))
    one_minus_z = ad.sub(ad.tensor(1.0), z)
    return ad.add(ad.mul(one_minus_z, h), ad.mul(z, cand))


def _mask_state(new, old, m):
    """Freeze the state on padded steps so padding cannot leak into the
    valid region (matters for the reverse direction)."""
    if m is None:
        return new
    return ad.add(ad.mul(new, m), ad.mul(old, 1.0 - m))


def run_lstm(x, w_x, b, w_h, hidden, reverse=False, valid=None):
    """Unidirectional LSTM over x (B, T, F) -> (B, T, hidden).

    valid is an optional (B, T) 0/1 array marking real (unpadded) frames.
    """
    bsz, t_len, _ = x.shape
    xproj = ad.add(ad.matmul(x, w_x), b)
    h = ad.tensor(np.zeros((bsz, hidden)))
    c = ad.tensor(np.zeros((bsz, hidden)))
    steps = range(t_len - 1, -1, -1) if reverse else range(t_len)
    outs = [None] * t_len
    for t in steps:
        m = None if valid is None else ad.tensor(valid[:, t:t + 1])
        h_new, c_new = lstm_step(xproj[:, t, :], h, c, w_h, hidden)
        h = _mask_state(h_new, h, m)
        c = _mask_state(c_new, c, m)
        outs[t] = ad.reshape(h, (bsz, 1, hidden))
    return ad.concat(outs, axis=1)


def run_gru(x, w_xzr, b_zr, w_xh, b_h, w_hzr, w_hh, hidden, reverse=False, valid=None):
    """Unidirectional GRU over x (B, T, F) -> (B, T, hidden)."""
    bsz, t_len, _ = x.shape
    xzr = ad.add(ad.matmul(x, w_xzr), b_zr)
    xh = ad.add(ad.matmul(x, w_xh), b_h)
    h = ad.tensor(np.zeros((bsz, hidden)))
    steps = range(t_len - 1, -1, -1) if reverse else range(t_len)
    outs = [None] * t_len
    for t in steps:
        m = None if valid is None else ad.tensor(valid[:, t:t + 1])
        h_new = gru_step(xzr[:, t, :], xh[:, t, :], h, w_hzr, w_hh, hidden)
        h = _mask_state(h_new, h, m)
        outs[t] = ad.reshape(h, (bsz, 1, hidden))
    return ad.concat(outs, axis=1)


def split_heads(x, heads):
    """(B, T, d) -> (B, heads, T, d/heads)."""
    bsz, t_len, d = x.shape
    return ad.transpose(ad.reshape(x, (bsz, t_len, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x):
    """(B, heads, T, dk) -> (B, T, heads*dk)."""
    bsz, heads, t_len, dk = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (bsz, t_len, heads * dk))


def multi_head_attention(q, k, v, w_q, w_k, w_v, w_o, heads, scale, mask=None, kv=None):
    """Scaled dot-product attention with per-head projections.

    mask is an additive numpy array broadcastable to (B, heads, Tq, Tk); use
    MASK_NEG for disallowed positions. kv optionally carries pre-split key and
    value head tensors (decode-time cache). Returns (output, attention weights).
    """
    if q.shape[-1] % heads != 0:
        raise ad.ShapeError(
            f"multi_head_attention: model dim {q.shape} not divisible by {heads} heads")
    qh = split_heads(ad.matmul(q, w_q), heads)
    if kv is not None:
        kh, vh = kv
    else:
        kh = split_heads(ad.matmul(k, w_k), heads)
        vh = split_heads(ad.matmul(v, w_v), heads)
    scores = ad.mul(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), ad.tensor(scale))
    if mask is not None:
        if mask.shape[-1] != kh.shape[2] or mask.shape[-2] not in (1, qh.shape[2]):
            raise ad.ShapeError(
                f"multi_head_attention: mask shape {mask.shape} does not fit "
                f"queries {qh.shape} / keys {kh.shape}")
        scores = ad.add(scores, ad.tensor(mask))
    attn = ad.softmax(scores, axis=-1)
    out = ad.matmul(merge_heads(ad.matmul(attn, vh)), w_o)
    return out, attn


def causal_mask(t_len) -> np.ndarray:
    """Additive (T, T) mask: position i may attend only to positions <= i."""
    m = np.triu(np.full((t_len, t_len), MASK_NEG), k=1)
    return m


def key_padding_mask(lengths, t_len) -> np.ndarray:
    """Additive (B, 1, 1, T) mask hiding padded key frames."""
    lengths = np.asarray(lengths)
    cols = np.arange(t_len)
    return np.where(cols[None, :] < lengths[:, None], 0.0, MASK_NEG)[:, None, None, :]


def positional_encoding(max_pos: int, d_model: int) -> np.ndarray:
    """Sinusoids: even dims sin(pos/10000^(2i/d)), odd dims the cosine."""
    if d_model % 2 != 0:
        raise ValueError(f"positional encoding needs an even model dim, got {d_model}")
    pos = np.arange(max_pos, dtype=np.float64)[:, None]
    even = np.arange(0, d_model, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, even / d_model)
    pe = np.zeros((max_pos, d_model))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe
