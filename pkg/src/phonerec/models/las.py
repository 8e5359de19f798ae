"""Listen-attend-spell style model: bidirectional LSTM encoder, two-layer
LSTM decoder with dot-product attention, two-layer MLP output head, optional
CTC head on the encoder.

The decoder state doubles as the attention query, so its hidden size equals
the encoder output dim (256); the MLP consumes [state; context] (512), which
is the configured attention context contract.

Output space: 33 phones + sos + eos (35 labels). sos is never predicted; it
only seeds decoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..ctc import ctc_loss_node
from ..layers import MASK_NEG, linear, lstm_step, run_lstm
from ..phones import BLANK_ID, EOS_ID, N_PHONES, SOS_ID
from .base import AcousticModel, DecodeSession, PaddedBatch

LAS_VOCAB = N_PHONES + 2           # phones + sos + eos
_SOS_OUT = N_PHONES                # output-index layout: phones, sos, eos
_EOS_OUT = N_PHONES + 1


def out_index(label_id: int) -> int:
    if 0 <= label_id < N_PHONES:
        return label_id
    if label_id == SOS_ID:
        return _SOS_OUT
    if label_id == EOS_ID:
        return _EOS_OUT
    raise ValueError(f"label {label_id} has no place in the attention vocabulary")


@dataclass
class LasConfig:
    input_dim: int = 120
    encoder_bilstm_layers: int = 3
    encoder_hidden: int = 256      # per direction; also the projected output dim
    decoder_embedding: int = 512
    attention_context_dim: int = 512
    mlp_hidden: int = 512
    dropout: float = 0.2
    scheduled_sampling_rate: float = 0.10
    ctc_head: bool = False

    def __post_init__(self):
        if not 0.0 <= self.scheduled_sampling_rate <= 1.0:
            raise ValueError("scheduled sampling rate must be in [0, 1]")
        if self.attention_context_dim != 2 * self.encoder_hidden:
            raise ValueError("attention context dim must equal dim([state; context]) "
                             f"= {2 * self.encoder_hidden}")


def dot_product_attention(query, h):
    """c = Softmax(s H^T) H for a single query vector s and encoder matrix H.

    Returns (context, weights); weights sum to 1 over the U encoder rows.
    """
    query = query if isinstance(query, ad.Tensor) else ad.tensor(query)
    h = h if isinstance(h, ad.Tensor) else ad.tensor(h)
    if query.value.ndim != 1 or h.value.ndim != 2 or query.shape[0] != h.shape[1]:
        raise ad.ShapeError(
            f"dot_product_attention: query {query.shape} does not match H {h.shape}")
    scores = ad.matmul(ad.reshape(query, (1, -1)), ad.transpose(h))
    weights = ad.softmax(scores, axis=-1)
    context = ad.reshape(ad.matmul(weights, h), (h.shape[1],))
    return context, ad.reshape(weights, (h.shape[0],))


class LasModel(AcousticModel):
    family = "las"

    def __init__(self, config: LasConfig = None, seed: int = 0):
        super().__init__(config or LasConfig(), seed)
        cfg = self.config
        hid = cfg.encoder_hidden
        in_dim = cfg.input_dim
        for l in range(cfg.encoder_bilstm_layers):
            for d in ("f", "b"):
                p = f"enc{l}_{d}"
                self.store.add(f"{p}_Wx", (in_dim, 4 * hid))
                self.store.add(f"{p}_b", (4 * hid,), "zeros")
                self.store.add(f"{p}_Wh", (hid, 4 * hid))
            in_dim = 2 * hid
        self.store.add("enc_proj_W", (2 * hid, hid))
        self.store.add("enc_proj_b", (hid,), "zeros")
        self.store.add("dec_emb", (LAS_VOCAB, cfg.decoder_embedding))
        d1_in = cfg.decoder_embedding + hid
        self.store.add("dec1_Wx", (d1_in, 4 * hid))
        self.store.add("dec1_b", (4 * hid,), "zeros")
        self.store.add("dec1_Wh", (hid, 4 * hid))
        self.store.add("dec2_Wx", (hid, 4 * hid))
        self.store.add("dec2_b", (4 * hid,), "zeros")
        self.store.add("dec2_Wh", (hid, 4 * hid))
        self.store.add("mlp_W1", (cfg.attention_context_dim, cfg.mlp_hidden))
        self.store.add("mlp_b1", (cfg.mlp_hidden,), "zeros")
        self.store.add("mlp_W2", (cfg.mlp_hidden, LAS_VOCAB))
        self.store.add("mlp_b2", (LAS_VOCAB,), "zeros")
        if cfg.ctc_head:
            self.store.add("ctc_W", (hid, N_PHONES + 1))
            self.store.add("ctc_b", (N_PHONES + 1,), "zeros")

    # ----------------------------------------------------------- encoder
    def _encode(self, feats, lens, training, rng):
        cfg = self.config
        hid = cfg.encoder_hidden
        valid = (np.arange(feats.shape[1])[None, :] < np.asarray(lens)[:, None]).astype(float)
        x = ad.tensor(feats)
        for l in range(cfg.encoder_bilstm_layers):
            dirs = []
            for d, rev in (("f", False), ("b", True)):
                p = f"enc{l}_{d}"
                dirs.append(run_lstm(x, self.store[f"{p}_Wx"], self.store[f"{p}_b"],
                                     self.store[f"{p}_Wh"], hid, reverse=rev, valid=valid))
            x = ad.concat(dirs, axis=2)
            x = ad.dropout(x, cfg.dropout, rng, training)
        h = linear(x, self.store["enc_proj_W"], self.store["enc_proj_b"])
        mask = None
        if np.any(np.asarray(lens) != feats.shape[1]):
            cols = np.arange(feats.shape[1])
            mask = np.where(cols[None, None, :] < np.asarray(lens)[:, None, None],
                            0.0, MASK_NEG)
        return h, mask                                     # (B, U, hid), (B, 1, U)

    # ------------------------------------------------------ decoder step
    def _zero_state(self, bsz):
        hid = self.config.encoder_hidden
        z = lambda: ad.tensor(np.zeros((bsz, hid)))
        return (z(), z(), z(), z())

    def _step(self, state, in_indices, context, h, enc_mask):
        """One decoder step; state is (h1, c1, h2, c2), context the previous
        attention vector (B, hid). Returns (state, context, logits, weights)."""
        if state is None:
            raise ValueError("decoder state not initialized; call _zero_state first")
        h1, c1, h2, c2 = state
        emb = ad.embedding(self.store["dec_emb"], np.asarray(in_indices, dtype=np.int64))
        x1 = ad.concat([emb, context], axis=1)
        hid = self.config.encoder_hidden
        h1, c1 = lstm_step(linear(x1, self.store["dec1_Wx"], self.store["dec1_b"]),
                           h1, c1, self.store["dec1_Wh"], hid)
        h2, c2 = lstm_step(linear(h1, self.store["dec2_Wx"], self.store["dec2_b"]),
                           h2, c2, self.store["dec2_Wh"], hid)
        q = ad.reshape(h2, (h2.shape[0], 1, hid))
        scores = ad.matmul(q, ad.transpose(h, (0, 2, 1)))
        if enc_mask is not None:
            scores = ad.add(scores, ad.tensor(enc_mask))
        weights = ad.softmax(scores, axis=-1)
        context = ad.reshape(ad.matmul(weights, h), (h2.shape[0], hid))
        mlp_in = ad.concat([h2, context], axis=1)
        hidden = ad.tanh(linear(mlp_in, self.store["mlp_W1"], self.store["mlp_b1"]))
        logits = linear(hidden, self.store["mlp_W2"], self.store["mlp_b2"])
        return (h1, c1, h2, c2), context, logits, weights

    # ---------------------------------------------------------- training
    def batch_loss(self, batch: PaddedBatch, training, rng, lam=0.2, ss_rate=0.0):
        h, enc_mask = self._encode(batch.feats, batch.lens, training, rng)
        bsz = len(batch.targets)
        l_max = max(len(t) for t in batch.targets) + 1
        out_ids = np.zeros((bsz, l_max), dtype=np.int64)
        valid = np.zeros((bsz, l_max))
        for b, t in enumerate(batch.targets):
            out_ids[b, :len(t)] = t
            out_ids[b, len(t)] = _EOS_OUT
            valid[b, :len(t) + 1] = 1.0
        state = self._zero_state(bsz)
        context = ad.tensor(np.zeros((bsz, self.config.encoder_hidden)))
        in_idx = np.full(bsz, _SOS_OUT, dtype=np.int64)
        ce_total = None
        for i in range(l_max):
            state, context, logits, _ = self._step(state, in_idx, context, h, enc_mask)
            logp = ad.log_softmax(logits, axis=-1)
            picked = ad.take_last(logp, out_ids[:, i])
            term = ad.mul(picked, ad.tensor(-valid[:, i]))
            ce_total = term if ce_total is None else ad.add(ce_total, term)
            ref_next = out_ids[:, i]
            if training and ss_rate > 0.0:
                coin = rng.random(bsz) < ss_rate
                pred = logp.value.argmax(axis=-1)
                in_idx = np.where(coin, pred, ref_next)
            else:
                in_idx = ref_next
        ce_tokens = float(valid.sum())
        ce = ad.mul(ad.sum_(ce_total), ad.tensor(1.0 / ce_tokens))
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
    def init_state(self, bsz=1):
        return self._zero_state(bsz)

    def decode_step(self, state, prev_label, prev_context, h):
        """Public single-utterance step: returns (state, context, probs (35,)).

        prev_label is an alphabet id (phone or sos); h is the U x 256 encoder
        output. The distribution is normalized over the 35-label space.
        """
        if state is None:
            raise ValueError("decoder state not initialized; use init_state()")
        h = h if isinstance(h, ad.Tensor) else ad.tensor(h)
        h3 = ad.reshape(h, (1,) + tuple(h.shape))
        ctx = prev_context if isinstance(prev_context, ad.Tensor) else ad.tensor(prev_context)
        ctx = ad.reshape(ctx, (1, -1))
        with ad.no_grad():
            state, context, logits, _ = self._step(
                state, [out_index(prev_label)], ctx, h3, None)
            probs = ad.softmax(logits, axis=-1)
        return state, ad.reshape(context, (-1,)), probs.value[0]

    def encode_utterance(self, frames: np.ndarray):
        prepared = self.prepare_features(frames)
        with ad.no_grad():
            h, _ = self._encode(prepared[None], [prepared.shape[0]], False, None)
        return h

    def decode_session(self, frames: np.ndarray) -> "LasSession":
        return LasSession(self, self.encode_utterance(frames))

    def ctc_logprobs(self, frames: np.ndarray) -> np.ndarray:
        if not self.config.ctc_head:
            raise ValueError(f"{self.family} model has no CTC head")
        h = self.encode_utterance(frames)
        with ad.no_grad():
            logits = linear(h, self.store["ctc_W"], self.store["ctc_b"])
            logp = ad.log_softmax(logits, axis=-1)
        return logp.value[0]

    def attention_map(self, frames: np.ndarray, label_ids) -> np.ndarray:
        """Teacher-forced attention weights (N x U) for a given labelling."""
        h = self.encode_utterance(frames)
        rows = []
        with ad.no_grad():
            state = self._zero_state(1)
            context = ad.tensor(np.zeros((1, self.config.encoder_hidden)))
            in_idx = [_SOS_OUT]
            for y in label_ids:
                state, context, logits, w = self._step(state, in_idx, context, h, None)
                rows.append(w.value[0, 0])
                in_idx = [out_index(y)]
        return np.stack(rows) if rows else np.zeros((0, h.shape[1]))


class LasSession(DecodeSession):
    vocab_ids = tuple(range(N_PHONES)) + (SOS_ID, EOS_ID)
    sos_index = _SOS_OUT
    eos_index = _EOS_OUT
    invalid_indices = frozenset({_SOS_OUT})

    def __init__(self, model: LasModel, h):
        self.model = model
        self.h = h                       # (1, U, hid)
        self.hid = model.config.encoder_hidden

    def start_state(self):
        z = np.zeros(self.hid)
        return (z, z, z, z, z)           # h1, c1, h2, c2, context

    def step(self, states, last_indices):
        bsz = len(states)
        stacked = [ad.tensor(np.stack([s[j] for s in states])) for j in range(4)]
        context = ad.tensor(np.stack([s[4] for s in states]))
        with ad.no_grad():
            state, context, logits, _ = self.model._step(
                tuple(stacked), np.asarray(last_indices), context, self.h, None)
            logp = ad.log_softmax(logits, axis=-1)
        h1, c1, h2, c2 = (s.value for s in state)
        ctx = context.value
        new_states = [(h1[b], c1[b], h2[b], c2[b], ctx[b]) for b in range(bsz)]
        return new_states, logp.value
