"""CTC loss via the forward-backward algorithm, a brute-force path oracle,
and CTC decoders (greedy collapse, prefix beam search).

All dynamic programming runs in the log domain; "minus infinity" is the
sentinel -1e30 so that exp() underflows cleanly to zero.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

NEG = -1e30


@dataclass
class CtcResult:
    loss: float
    grad: np.ndarray        # d(loss) / d(logits), same shape as the input


@dataclass(frozen=True)
class Hypothesis:
    """One scored decoding result; labels are alphabet ids."""

    labels: tuple
    log_prob: float
    finished: bool = True


def _check_target(target, num_classes, blank_id):
    ids = tuple(int(i) for i in target)
    if not ids:
        raise ValueError("CTC target must be non-empty")
    for i in ids:
        if i == blank_id or not 0 <= i < num_classes:
            raise ValueError(f"CTC target contains non-phone label {i}")
    return ids


def _extended(target, blank_id):
    """Interleave blanks: [b, y1, b, y2, ..., yN, b]; skip transitions are
    allowed into odd slots whose label differs from the one two slots back."""
    ext = [blank_id]
    for y in target:
        ext.extend((y, blank_id))
    ext = np.array(ext, dtype=np.int64)
    skip = np.zeros(len(ext), dtype=bool)
    skip[3::2] = ext[3::2] != ext[1:-2:2]
    return ext, skip


def min_frames(target) -> int:
    """Shortest path length able to spell the target: one frame per label
    plus a separating blank between each adjacent repeated pair."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _log_softmax_rows(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def ctc_forward_backward(logits: np.ndarray, target, blank_id: int) -> CtcResult:
    """Negative log probability of the target under Eq.-style path summation,
    with the exact gradient w.r.t. the pre-softmax logits.

    Infeasible targets (too few frames) give +inf loss and a zero gradient so
    training loops can skip them.
    """
    logits = np.asarray(logits, dtype=np.float64)
    t_len, k = logits.shape
    ids = _check_target(target, k, blank_id)
    if t_len < min_frames(ids):
        return CtcResult(math.inf, np.zeros_like(logits))

    logp = _log_softmax_rows(logits)
    ext, skip = _extended(ids, blank_id)
    s_len = len(ext)
    emit = logp[:, ext]                        # T x S emission log-probs

    alpha = np.full((t_len, s_len), NEG)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate(([NEG], prev[:-1]))
        jump = np.concatenate(([NEG, NEG], prev[:-2]))
        jump = np.where(skip, jump, NEG)
        alpha[t] = np.logaddexp(np.logaddexp(stay, step), jump) + emit[t]

    log_p = np.logaddexp(alpha[-1, -1], alpha[-1, -2] if s_len > 1 else NEG)
    if log_p <= NEG / 2:
        return CtcResult(math.inf, np.zeros_like(logits))
    loss = -float(log_p)

    beta = np.full((t_len, s_len), NEG)
    beta[-1, -1] = 0.0
    if s_len > 1:
        beta[-1, -2] = 0.0
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        stay = nxt
        step = np.concatenate((nxt[1:], [NEG]))
        jump = np.concatenate((nxt[2:], [NEG, NEG]))
        jump = np.where(np.concatenate((skip[2:], [False, False])), jump, NEG)
        beta[t] = np.logaddexp(np.logaddexp(stay, step), jump)

    # state posteriors -> per-class occupancy; grad = softmax - occupancy
    occupancy = np.exp(alpha + beta - log_p)
    gamma = np.zeros_like(logits)
    for s in range(s_len):
        gamma[:, ext[s]] += occupancy[:, s]
    grad = np.exp(logp) - gamma
    return CtcResult(loss, grad)


def ctc_loss_node(logits: "ad.Tensor", target, blank_id: int):
    """Wrap the CTC loss as an autodiff node over a T x K logits tensor.

    Returns (node, feasible). Infeasible targets give a detached zero node.
    """
    result = ctc_forward_backward(logits.value, target, blank_id)
    if math.isinf(result.loss):
        return ad.tensor(0.0), False
    node = ad.custom(np.float64(result.loss),
                     [(logits, lambda g, grad=result.grad: g * grad)])
    return node, True


def collapse_path(path, blank_id) -> tuple:
    """Remove consecutive repeats, then blanks."""
    out = []
    prev = None
    for p in path:
        if p != prev and p != blank_id:
            out.append(p)
        prev = p
    return tuple(out)


def ctc_bruteforce_oracle(logits: np.ndarray, target, blank_id: int) -> float:
    """Exact loss by enumerating every length-T path and keeping those that
    collapse to the target. Only viable for K**T up to 1e7."""
    logits = np.asarray(logits, dtype=np.float64)
    t_len, k = logits.shape
    ids = _check_target(target, k, blank_id)
    if k ** t_len > 10 ** 7:
        raise ValueError(f"oracle instance too large: {k}**{t_len} paths")
    probs = np.exp(_log_softmax_rows(logits))
    total = 0.0
    for path in itertools.product(range(k), repeat=t_len):
        if collapse_path(path, blank_id) == ids:
            p = 1.0
            for t, c in enumerate(path):
                p *= probs[t, c]
            total += p
    return -math.log(total) if total > 0.0 else math.inf


def ctc_greedy_decode(logprobs: np.ndarray, blank_id: int) -> tuple:
    """Frame-wise argmax, collapse repeats, drop blanks."""
    path = np.asarray(logprobs).argmax(axis=-1)
    return collapse_path(path.tolist(), blank_id)


def _lae(a: float, b: float) -> float:
    if a < b:
        a, b = b, a
    if b <= NEG / 2:
        return a
    return a + math.log1p(math.exp(b - a))


def labelling_log_prob(logprobs: np.ndarray, labels, blank_id: int) -> float:
    """Exact log P(collapse(path) == labels) by the forward DP, for
    already-normalized frame log-posteriors. Accepts the empty labelling."""
    logprobs = np.asarray(logprobs, dtype=np.float64)
    if not labels:
        return float(logprobs[:, blank_id].sum())
    if logprobs.shape[0] < min_frames(labels):
        return NEG
    ext, skip = _extended(tuple(int(x) for x in labels), blank_id)
    emit = logprobs[:, ext]
    alpha = np.full(len(ext), NEG)
    alpha[0] = emit[0, 0]
    alpha[1] = emit[0, 1]
    for t in range(1, logprobs.shape[0]):
        step = np.concatenate(([NEG], alpha[:-1]))
        jump = np.where(skip, np.concatenate(([NEG, NEG], alpha[:-2])), NEG)
        alpha = np.logaddexp(np.logaddexp(alpha, step), jump) + emit[t]
    return float(np.logaddexp(alpha[-1], alpha[-2]))


def ctc_prefix_beam_search(logprobs: np.ndarray, blank_id: int, beam_size: int,
                           max_len: int | None = None):
    """Prefix search over collapsed labellings, maintaining per-prefix
    blank/non-blank log-mass for pruning.

    The pruning masses are lower bounds (mass flowing through pruned parents
    is lost), so the surviving prefixes plus the greedy labelling are rescored
    with the exact forward DP; the returned log_prob of every hypothesis is
    its exact labelling log-probability. Ties rank the lexicographically
    earlier prefix first. Returns Hypothesis objects, best first."""
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    logprobs = np.asarray(logprobs, dtype=np.float64)
    t_len, k = logprobs.shape
    labels = [c for c in range(k) if c != blank_id]
    beam = {(): (0.0, NEG)}               # prefix -> (blank, nonblank) mass
    for t in range(t_len):
        lp = logprobs[t]
        lp_blank = float(lp[blank_id])
        new: dict = {}

        def acc(prefix, b, nb):
            ob, onb = new.get(prefix, (NEG, NEG))
            new[prefix] = (_lae(ob, b), _lae(onb, nb))

        for prefix, (pb, pnb) in beam.items():
            total = _lae(pb, pnb)
            acc(prefix, total + lp_blank, NEG)
            if prefix:
                acc(prefix, NEG, pnb + float(lp[prefix[-1]]))
            if max_len is None or len(prefix) < max_len:
                for c in labels:
                    base = pb if prefix and c == prefix[-1] else total
                    acc(prefix + (c,), NEG, base + float(lp[c]))
        ranked = sorted(new.items(), key=lambda kv: (-_lae(*kv[1]), kv[0]))
        beam = dict(ranked[:beam_size])
    pool = set(beam)
    greedy = collapse_path(logprobs.argmax(axis=-1).tolist(), blank_id)
    if max_len is not None:
        greedy = greedy[:max_len]
    pool.add(greedy)
    scored = sorted(((p, labelling_log_prob(logprobs, p, blank_id)) for p in pool),
                    key=lambda kv: (-kv[1], kv[0]))
    return [Hypothesis(labels=pfx, log_prob=score, finished=True)
            for pfx, score in scored[:beam_size]]
