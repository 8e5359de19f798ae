"""Bi-GRU encoder trained with the CTC objective.

Consecutive frame pairs are concatenated before the network (time reduction
2), one Bi-GRU input layer (120 cells per direction), four Bi-GRU hidden
layers (160 per direction) with 10% dropout on their outputs, then a linear
layer to 34 classes with log-softmax output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..ctc import ctc_loss_node
from ..layers import linear, run_gru
from ..phones import BLANK_ID
from .base import AcousticModel, PaddedBatch


@dataclass
class RnnCtcConfig:
    input_dim: int = 40
    time_reduction: int = 2
    input_bigru_cells: int = 120
    hidden_layers: int = 4
    hidden_cells_per_direction: int = 160
    dropout: float = 0.10
    output_dim: int = 34

    def __post_init__(self):
        for name in ("input_dim", "time_reduction", "input_bigru_cells",
                     "hidden_layers", "hidden_cells_per_direction", "output_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


class RnnCtcModel(AcousticModel):
    family = "rnn-ctc"

    def __init__(self, config: RnnCtcConfig = None, seed: int = 0):
        super().__init__(config or RnnCtcConfig(), seed)
        cfg = self.config
        reduced_dim = cfg.input_dim * cfg.time_reduction
        sizes = [(reduced_dim, cfg.input_bigru_cells)]
        prev_out = 2 * cfg.input_bigru_cells
        for _ in range(cfg.hidden_layers):
            sizes.append((prev_out, cfg.hidden_cells_per_direction))
            prev_out = 2 * cfg.hidden_cells_per_direction
        self._layer_sizes = sizes
        for l, (in_dim, hidden) in enumerate(sizes):
            for d in ("f", "b"):
                p = f"gru{l}_{d}"
                self.store.add(f"{p}_Wxzr", (in_dim, 2 * hidden))
                self.store.add(f"{p}_bzr", (2 * hidden,), "zeros")
                self.store.add(f"{p}_Wxh", (in_dim, hidden))
                self.store.add(f"{p}_bh", (hidden,), "zeros")
                self.store.add(f"{p}_Whzr", (hidden, 2 * hidden))
                self.store.add(f"{p}_Whh", (hidden, hidden))
        self.store.add("out_W", (prev_out, cfg.output_dim))
        self.store.add("out_b", (cfg.output_dim,), "zeros")

    def prepare_features(self, frames: np.ndarray) -> np.ndarray:
        frames = super().prepare_features(frames)
        r = self.config.time_reduction
        t_len = frames.shape[0]
        if t_len < r:
            raise ValueError(f"{self.family}: need at least {r} frames, got {t_len}")
        keep = (t_len // r) * r
        return frames[:keep].reshape(t_len // r, r * frames.shape[1])

    def _logprobs(self, feats, lens, training, rng):
        """(B, U, F') padded inputs -> (B, U, 34) log-posteriors."""
        valid = (np.arange(feats.shape[1])[None, :] < np.asarray(lens)[:, None]).astype(float)
        x = ad.tensor(feats)
        for l, (_, hidden) in enumerate(self._layer_sizes):
            p = self.store
            dirs = []
            for d, rev in (("f", False), ("b", True)):
                n = f"gru{l}_{d}"
                dirs.append(run_gru(x, p[f"{n}_Wxzr"], p[f"{n}_bzr"], p[f"{n}_Wxh"],
                                    p[f"{n}_bh"], p[f"{n}_Whzr"], p[f"{n}_Whh"],
                                    hidden, reverse=rev, valid=valid))
            x = ad.concat(dirs, axis=2)
            if l > 0:
                x = ad.dropout(x, self.config.dropout, rng, training)
        logits = linear(x, self.store["out_W"], self.store["out_b"])
        return ad.log_softmax(logits, axis=-1)

    def forward(self, frames: np.ndarray) -> np.ndarray:
        """Single-utterance frame log-posteriors (floor(T/2) x 34), eval mode."""
        prepared = self.prepare_features(frames)
        with ad.no_grad():
            out = self._logprobs(prepared[None], [prepared.shape[0]], False, None)
        return out.value[0]

    def batch_loss(self, batch: PaddedBatch, training, rng, lam=None, ss_rate=None):
        logprobs = self._logprobs(batch.feats, batch.lens, training, rng)
        nodes, tokens, skipped = [], 0, 0
        for b, target in enumerate(batch.targets):
            node, feasible = ctc_loss_node(logprobs[b, :batch.lens[b], :], target, BLANK_ID)
            if feasible:
                nodes.append(node)
                tokens += len(target)
            else:
                skipped += 1
        if not nodes:
            return ad.tensor(0.0), {"ce": 0.0, "ctc": 0.0, "tokens": 0, "ctc_skipped": skipped}
        total = nodes[0]
        for n in nodes[1:]:
            total = ad.add(total, n)
        loss = ad.mul(total, ad.tensor(1.0 / tokens))
        return loss, {"ce": 0.0, "ctc": float(loss.value), "tokens": tokens,
                      "ctc_skipped": skipped}

    @property
    def has_ctc_head(self) -> bool:
        return True     # the whole model is the CTC branch

    def ctc_logprobs(self, frames: np.ndarray) -> np.ndarray:
        return self.forward(frames)
