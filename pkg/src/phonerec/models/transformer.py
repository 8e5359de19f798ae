"""Transformer encoder-decoder over filterbank-style inputs with optional
encoder CTC head.

Post-norm residual blocks, sinusoidal positional encodings summed onto the
linear input projection / label embeddings, masked decoder self-attention,
whole-sequence teacher-forced decoding. Attention scaling uses 1/sqrt(d_model)
(the Q/K/V dim), with per-head projections of width d_model/heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..ctc import ctc_loss_node
from ..layers import (causal_mask, key_padding_mask, linear, multi_head_attention,
                      positional_encoding, split_heads)
from ..phones import BLANK_ID, EOS_ID, LABEL_SPACE, N_PHONES, SOS_ID
from .base import AcousticModel, DecodeSession, PaddedBatch


@dataclass
class TransformerConfig:
    input_dim: int = 80
    d_model: int = 256
    heads: int = 4
    encoder_layers: int = 6
    decoder_layers: int = 4
    label_space: int = LABEL_SPACE
    ffn_dim: int = 0               # 0 -> 4 * d_model
    dropout: float = 0.1
    ctc_head: bool = False

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by the head count")
        if self.d_model % 2 != 0:
            raise ValueError("d_model must be even for sinusoidal encodings")
        if self.ffn_dim == 0:
            self.ffn_dim = 4 * self.d_model
        if self.label_space != LABEL_SPACE:
            raise ValueError(f"label space must be {LABEL_SPACE} (phones+blank+sos+eos)")


class TransformerModel(AcousticModel):
    family = "transformer"

    def __init__(self, config: TransformerConfig = None, seed: int = 0):
        super().__init__(config or TransformerConfig(), seed)
        cfg = self.config
        d, f = cfg.d_model, cfg.ffn_dim
        self.scale = 1.0 / np.sqrt(cfg.d_model)
        self.store.add("in_W", (cfg.input_dim, d))
        self.store.add("in_b", (d,), "zeros")
        self.store.add("in_ln_g", (d,), "ones")
        self.store.add("in_ln_b", (d,), "zeros")
        for l in range(cfg.encoder_layers):
            self._add_attention(f"enc{l}_att", d)
            self._add_ln(f"enc{l}_ln1", d)
            self._add_ffn(f"enc{l}_ffn", d, f)
            self._add_ln(f"enc{l}_ln2", d)
        self.store.add("dec_emb", (cfg.label_space, d))
        for l in range(cfg.decoder_layers):
            self._add_attention(f"dec{l}_self", d)
            self._add_ln(f"dec{l}_ln1", d)
            self._add_attention(f"dec{l}_cross", d)
            self._add_ln(f"dec{l}_ln2", d)
            self._add_ffn(f"dec{l}_ffn", d, f)
            self._add_ln(f"dec{l}_ln3", d)
        self.store.add("out_W", (d, cfg.label_space))
        self.store.add("out_b", (cfg.label_space,), "zeros")
        if cfg.ctc_head:
            self.store.add("ctc_W", (d, N_PHONES + 1))
            self.store.add("ctc_b", (N_PHONES + 1,), "zeros")
        self._pe = positional_encoding(512, cfg.d_model)

    def _add_attention(self, prefix, d):
        for part in ("Wq", "Wk", "Wv", "Wo"):
            self.store.add(f"{prefix}_{part}", (d, d))

    def _add_ln(self, prefix, d):
        self.store.add(f"{prefix}_g", (d,), "ones")
        self.store.add(f"{prefix}_b", (d,), "zeros")

    def _add_ffn(self, prefix, d, f):
        self.store.add(f"{prefix}_W1", (d, f))
        self.store.add(f"{prefix}_b1", (f,), "zeros")
        self.store.add(f"{prefix}_W2", (f, d))
        self.store.add(f"{prefix}_b2", (d,), "zeros")

    def _pe_slice(self, n):
        while self._pe.shape[0] < n:
            self._pe = positional_encoding(2 * self._pe.shape[0], self.config.d_model)
        return self._pe[:n]

    def _attend(self, prefix, q, k, v, mask, kv=None):
        s = self.store
        return multi_head_attention(
            q, k, v, s[f"{prefix}_Wq"], s[f"{prefix}_Wk"], s[f"{prefix}_Wv"],
            s[f"{prefix}_Wo"], self.config.heads, self.scale, mask=mask, kv=kv)

    def _ffn(self, prefix, x):
        s = self.store
        inner = ad.relu(linear(x, s[f"{prefix}_W1"], s[f"{prefix}_b1"]))
        return linear(inner, s[f"{prefix}_W2"], s[f"{prefix}_b2"])

    def _ln(self, prefix, x):
        return ad.layer_norm(x, self.store[f"{prefix}_g"], self.store[f"{prefix}_b"])

    def _encode(self, feats, lens, training, rng):
        cfg = self.config
        t_len = feats.shape[1]
        x = self._ln("in_ln", linear(ad.tensor(feats), self.store["in_W"], self.store["in_b"]))
        x = ad.add(x, ad.tensor(self._pe_slice(t_len)))
        x = ad.dropout(x, cfg.dropout, rng, training)
        mask = None
        if np.any(np.asarray(lens) != t_len):
            mask = key_padding_mask(lens, t_len)
        for l in range(cfg.encoder_layers):
            a, _ = self._attend(f"enc{l}_att", x, x, x, mask)
            x = self._ln(f"enc{l}_ln1", ad.add(x, ad.dropout(a, cfg.dropout, rng, training)))
            f = self._ffn(f"enc{l}_ffn", x)
            x = self._ln(f"enc{l}_ln2", ad.add(x, ad.dropout(f, cfg.dropout, rng, training)))
        return x, mask

    def _decode(self, h, enc_mask, in_ids, training, rng, enc_kv=None):
        cfg = self.config
        l_len = in_ids.shape[1]
        y = ad.embedding(self.store["dec_emb"], in_ids)
        y = ad.add(y, ad.tensor(self._pe_slice(l_len)))
        y = ad.dropout(y, cfg.dropout, rng, training)
        cmask = causal_mask(l_len)
        attn = None
        for l in range(cfg.decoder_layers):
            a, _ = self._attend(f"dec{l}_self", y, y, y, cmask)
            y = self._ln(f"dec{l}_ln1", ad.add(y, ad.dropout(a, cfg.dropout, rng, training)))
            kv = enc_kv[l] if enc_kv is not None else None
            a, attn = self._attend(f"dec{l}_cross", y, h, h, enc_mask, kv=kv)
            y = self._ln(f"dec{l}_ln2", ad.add(y, ad.dropout(a, cfg.dropout, rng, training)))
            f = self._ffn(f"dec{l}_ffn", y)
            y = self._ln(f"dec{l}_ln3", ad.add(y, ad.dropout(f, cfg.dropout, rng, training)))
        logits = linear(y, self.store["out_W"], self.store["out_b"])
        return logits, attn

    # ---------------------------------------------------------- spec ops
    def forward(self, frames: np.ndarray, teacher_labels=None):
        """Teacher-forced utterance pass: (N x 36 decoder logits,
        U x 34 encoder CTC logits or None)."""
        if teacher_labels is None:
            raise ValueError("teacher-forced forward needs labels")
        labels = [int(x) for x in teacher_labels]
        prepared = self.prepare_features(frames)
        with ad.no_grad():
            h, _ = self._encode(prepared[None], [prepared.shape[0]], False, None)
            in_ids = np.array([[SOS_ID] + labels[:-1]], dtype=np.int64)
            logits, _ = self._decode(h, None, in_ids, False, None)
            ctc = None
            if self.config.ctc_head:
                ctc = linear(h, self.store["ctc_W"], self.store["ctc_b"]).value[0]
        return logits.value[0], ctc

    # ---------------------------------------------------------- training
    def batch_loss(self, batch: PaddedBatch, training, rng, lam=0.3, ss_rate=None):
        h, enc_mask = self._encode(batch.feats, batch.lens, training, rng)
        bsz = len(batch.targets)
        l_max = max(len(t) for t in batch.targets) + 1
        in_ids = np.full((bsz, l_max), SOS_ID, dtype=np.int64)
        out_ids = np.zeros((bsz, l_max), dtype=np.int64)
        valid = np.zeros((bsz, l_max))
        for b, t in enumerate(batch.targets):
            full = list(t) + [EOS_ID]
            in_ids[b, 1:len(t) + 1] = t
            out_ids[b, :len(full)] = full
            valid[b, :len(full)] = 1.0
        cross_mask = None
        if enc_mask is not None:
            cross_mask = enc_mask
        logits, _ = self._decode(h, cross_mask, in_ids, training, rng)
        logp = ad.log_softmax(logits, axis=-1)
        picked = ad.take_last(logp, out_ids)
        ce_tokens = float(valid.sum())
        ce = ad.mul(ad.sum_(ad.mul(picked, ad.tensor(-valid))), ad.tensor(1.0 / ce_tokens))
        stats = {"ce": float(ce.value), "ctc": 0.0, "tokens": int(ce_tokens),
                 "ctc_skipped": 0}
        if not self.config.ctc_head:
            return ce, stats
        enc_logits = linear(h, self.store["ctc_W"], self.store["ctc_b"])
        nodes, tokens, skipped = [], 0, 0
        for b, target in enumerate(batch.targets):
            node, feasible = ctc_loss_node(enc_logits[b, :batch.lens[b], :], target, BLANK_ID)
            if feasible:
                nodes.append(node)
                tokens += len(target)
            else:
                skipped += 1
        stats["ctc_skipped"] = skipped
        if not nodes:
            return ce, stats
        ctc_total = nodes[0]
        for n in nodes[1:]:
            ctc_total = ad.add(ctc_total, n)
        ctc = ad.mul(ctc_total, ad.tensor(1.0 / tokens))
        stats["ctc"] = float(ctc.value)
        joint = ad.add(ad.mul(ctc, ad.tensor(lam)), ad.mul(ce, ad.tensor(1.0 - lam)))
        return joint, stats

    # ---------------------------------------------------------- decoding
    def encode_utterance(self, frames: np.ndarray):
        prepared = self.prepare_features(frames)
        with ad.no_grad():
            h, _ = self._encode(prepared[None], [prepared.shape[0]], False, None)
        return h

    def decode_session(self, frames: np.ndarray) -> "TransformerSession":
        return TransformerSession(self, self.encode_utterance(frames))

    def ctc_logprobs(self, frames: np.ndarray) -> np.ndarray:
        if not self.config.ctc_head:
            raise ValueError(f"{self.family} model has no CTC head")
        h = self.encode_utterance(frames)
        with ad.no_grad():
            logp = ad.log_softmax(linear(h, self.store["ctc_W"], self.store["ctc_b"]),
                                  axis=-1)
        return logp.value[0]

    def attention_map(self, frames: np.ndarray, label_ids) -> np.ndarray:
        """Final-decoder-layer encoder-decoder attention (head-averaged),
        teacher-forced on the given labelling: (N, U) rows summing to 1."""
        h = self.encode_utterance(frames)
        labels = [int(x) for x in label_ids]
        in_ids = np.array([[SOS_ID] + labels[:-1]], dtype=np.int64)
        with ad.no_grad():
            _, attn = self._decode(h, None, in_ids, False, None)
        return attn.value[0].mean(axis=0)


class TransformerSession(DecodeSession):
    vocab_ids = tuple(range(LABEL_SPACE))
    sos_index = SOS_ID
    eos_index = EOS_ID
    invalid_indices = frozenset({BLANK_ID, SOS_ID})

    def __init__(self, model: TransformerModel, h):
        self.model = model
        self.h = h
        with ad.no_grad():
            self.enc_kv = []
            for l in range(model.config.decoder_layers):
                s = model.store
                kh = split_heads(ad.matmul(h, s[f"dec{l}_cross_Wk"]), model.config.heads)
                vh = split_heads(ad.matmul(h, s[f"dec{l}_cross_Wv"]), model.config.heads)
                self.enc_kv.append((kh, vh))

    def start_state(self):
        return ()                        # consumed label prefix (sos implicit)

    def step(self, states, last_indices):
        consumed = []
        for s, i in zip(states, last_indices):
            i = int(i)
            consumed.append(s if (i == SOS_ID and not s) else s + (i,))
        in_ids = np.array([(SOS_ID,) + c for c in consumed], dtype=np.int64)
        with ad.no_grad():
            logits, _ = self.model._decode(self.h, None, in_ids, False, None,
                                           enc_kv=self.enc_kv)
            logp = ad.log_softmax(logits[:, -1, :], axis=-1)
        return consumed, logp.value
