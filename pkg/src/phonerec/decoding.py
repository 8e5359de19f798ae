"""Autoregressive beam search for attention decoders, plus dispatch between
the encoder CTC branch and the attention branch of joint models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ctc import Hypothesis, ctc_prefix_beam_search
from .phones import BLANK_ID, EOS_ID, SOS_ID

MAX_LEN_WORD = 30
MAX_LEN_SENTENCE = 130


@dataclass
class DecodeConfig:
    beam_size: int = 5
    max_len: int = MAX_LEN_SENTENCE
    output_branch: str = "dec"

    def __post_init__(self):
        if self.beam_size < 1 or self.max_len < 1:
            raise ValueError("beam_size and max_len must be >= 1")
        if self.output_branch not in ("enc", "dec"):
            raise ValueError(f"unknown output branch {self.output_branch!r}")


def max_len_for_task(task: str) -> int:
    return MAX_LEN_WORD if task == "word" else MAX_LEN_SENTENCE


@dataclass
class _Beam:
    state: object
    labels: tuple          # output-vocabulary indices
    log_prob: float


def attention_beam_search(model, frames: np.ndarray, config: DecodeConfig):
    """Expand P(y_i | X, y_<i) breadth-first, keeping beam_size live
    hypotheses; eos finalizes a hypothesis, max_len truncates it (no eos
    bonus). Deterministic; no language model. Returns Hypothesis objects
    whose labels are alphabet ids (eos kept when emitted)."""
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ValueError(f"cannot decode empty feature input of shape {frames.shape}")
    if not hasattr(model, "decode_session"):
        raise ValueError(f"{model.family} has no attention decoder")
    session = model.decode_session(frames)
    invalid = sorted(session.invalid_indices)
    live = [_Beam(session.start_state(), (), 0.0)]
    finished: list[_Beam] = []

    def worst_kept_finished():
        if len(finished) < config.beam_size:
            return -np.inf
        return sorted(h.log_prob for h in finished)[-config.beam_size]

    for _ in range(config.max_len):
        last = [h.labels[-1] if h.labels else session.sos_index for h in live]
        states, logp = session.step([h.state for h in live], last)
        logp[:, invalid] = -np.inf
        candidates = []
        for b, hyp in enumerate(live):
            for c in np.argsort(-logp[b]):
                c = int(c)
                if not np.isfinite(logp[b, c]):
                    break
                candidates.append(_Beam(states[b], hyp.labels + (c,),
                                        hyp.log_prob + float(logp[b, c])))
        candidates.sort(key=lambda h: (-h.log_prob, h.labels))
        kept = candidates[:config.beam_size]
        live = []
        for hyp in kept:
            if hyp.labels[-1] == session.eos_index:
                finished.append(hyp)
            else:
                live.append(hyp)
        if not live or (finished and max(h.log_prob for h in live) <= worst_kept_finished()):
            break
    finished.extend(live)        # length-truncated hypotheses, no eos bonus
    finished.sort(key=lambda h: (-h.log_prob, h.labels))
    out = []
    for hyp in finished[:config.beam_size]:
        labels = tuple(session.vocab_ids[i] for i in hyp.labels)
        done = labels[-1] == EOS_ID if labels else False
        out.append(Hypothesis(labels=labels, log_prob=hyp.log_prob,
                              finished=done or len(labels) >= config.max_len))
    return out


def strip_specials(labels) -> tuple:
    return tuple(i for i in labels if i not in (BLANK_ID, SOS_ID, EOS_ID))


def decode_utterance(model, frames: np.ndarray, config: DecodeConfig) -> tuple:
    """Top-1 phone sequence from the requested output branch."""
    if config.output_branch == "enc":
        if not model.has_ctc_head:
            raise ValueError(f"{model.family} has no CTC head; enc branch unavailable")
        logp = model.ctc_logprobs(frames)
        hyps = ctc_prefix_beam_search(logp, BLANK_ID, config.beam_size,
                                      max_len=config.max_len)
        return tuple(hyps[0].labels)
    hyps = attention_beam_search(model, frames, config)
    return strip_specials(hyps[0].labels)


def dump_hypotheses(path, rows, alphabet):
    """rows: (utt_id, rank, log_prob, label ids). TSV, phones as symbols."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("utt_id\trank\tlog_prob\tphones\n")
        for utt_id, rank, log_prob, labels in rows:
            phones = " ".join(alphabet.symbol_of(i) for i in strip_specials(labels))
            fh.write(f"{utt_id}\t{rank}\t{log_prob:.6f}\t{phones}\n")
