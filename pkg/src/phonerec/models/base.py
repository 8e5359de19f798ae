"""Shared model machinery: parameter store glue, batch padding, the decode
session protocol used by beam search."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..layers import ParamStore


@dataclass
class PaddedBatch:
    feats: np.ndarray            # (B, Tmax, F) float64, zero padded
    lens: np.ndarray             # (B,) true frame counts
    targets: list                # per-utterance phone-id tuples (no specials)


def pad_batch(examples) -> PaddedBatch:
    """examples: list of (frames (T, F), target tuple)."""
    t_max = max(f.shape[0] for f, _ in examples)
    dim = examples[0][0].shape[1]
    feats = np.zeros((len(examples), t_max, dim))
    lens = np.zeros(len(examples), dtype=np.int64)
    targets = []
    for b, (frames, target) in enumerate(examples):
        feats[b, :frames.shape[0]] = frames
        lens[b] = frames.shape[0]
        targets.append(tuple(int(x) for x in target))
    return PaddedBatch(feats, lens, targets)


class AcousticModel:
    """Base for the three families; subclasses build their parameters in a
    fixed order so that a seed fully determines the initial weights."""

    family = "base"

    def __init__(self, config, seed: int):
        self.config = config
        self.store = ParamStore(seed)

    @property
    def params(self) -> dict:
        return self.store.params

    def parameter_count(self) -> int:
        return self.store.count()

    def state(self) -> dict:
        return self.store.state()

    def load_state(self, state: dict):
        self.store.load_state(state)

    def prepare_features(self, frames: np.ndarray) -> np.ndarray:
        """Per-utterance input transform applied before batching."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != self.config.input_dim:
            raise ValueError(
                f"{self.family}: expected T x {self.config.input_dim} features, "
                f"got {frames.shape}")
        return frames

    @property
    def has_ctc_head(self) -> bool:
        return getattr(self.config, "ctc_head", False)

    # subclass API ---------------------------------------------------------
    # batch_loss(batch, training, rng, lam, ss_rate) -> (loss node, stats)
    # decode_session(frames) -> DecodeSession (attention families)
    # ctc_logprobs(frames) -> (U, 34) log-posteriors (CTC-capable families)


class DecodeSession:
    """Per-utterance autoregressive interface consumed by beam search.

    vocab_ids maps output indices to alphabet label ids; sos is masked out by
    start_mask so hypotheses only ever contain phones or eos.
    """

    vocab_ids: tuple
    eos_index: int

    def start_state(self):
        raise NotImplementedError

    def step(self, states, last_indices):
        """Advance hypotheses; returns (new_states, logprobs (B, V))."""
        raise NotImplementedError
