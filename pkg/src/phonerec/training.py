"""Optimizers, learning-rate schedules, the CE+CTC objective, scheduled
sampling, the fit loop with best-model selection, and whole-model transfer."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .models import build_model
from .models.base import pad_batch

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    learning_rate: float = 1e-4
    lr_schedule: str = "constant"       # constant | noam | halve_on_plateau | divide10_after_2
    warmup_steps: int = 4000
    lr_scale: float = 1.0               # multiplies the noam schedule
    d_model: int = 256
    batch_size: int = 16
    frame_budget: int = 0               # when > 0, cap B * Tmax per batch
    max_epochs: int = 50
    early_stop_patience: int = 10
    scheduled_sampling_rate: float = 0.0
    lambda_ctc: float = 0.0
    l2_rate: float = 0.0
    grad_clip: float = 5.0              # global norm; 0 disables
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.lr_scale <= 0 or self.warmup_steps <= 0:
            raise ValueError("rates must be positive")
        if self.early_stop_patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 <= self.lambda_ctc <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if not 0.0 <= self.scheduled_sampling_rate <= 1.0:
            raise ValueError("scheduled sampling rate must lie in [0, 1]")


def joint_loss(loss_ctc: float, loss_ce: float, lam: float) -> float:
    """lam * CTC + (1 - lam) * CE; an infeasible (+inf) CTC falls back to CE."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if math.isinf(loss_ctc):
        log.warning("CTC loss infeasible; skipping the CTC term for this value")
        return loss_ce
    return lam * loss_ctc + (1.0 - lam) * loss_ce


def noam_lr(step: int, d_model: int = 256, warmup: int = 4000) -> float:
    """Warm up linearly for `warmup` steps, then decay as 1/sqrt(step)."""
    if step < 1:
        raise ValueError("noam schedule is defined for steps >= 1")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def plateau_multiplier(history, mode: str) -> float:
    """Learning-rate multiplier for the latest epoch given validation losses.

    halve: x0.5 whenever the latest loss fails to beat the best before it.
    divide10_after_2: x0.1 after two consecutive non-improving epochs (the
    stagnation counter resets when the cut fires).
    """
    history = list(history)
    if not history:
        raise ValueError("plateau scheduler needs at least one epoch of history")
    if mode == "halve":
        if len(history) == 1:
            return 1.0
        return 0.5 if history[-1] >= min(history[:-1]) else 1.0
    if mode == "divide10_after_2":
        best = math.inf
        streak = 0
        latest = 1.0
        for value in history:
            latest = 1.0
            if value < best:
                best = value
                streak = 0
            else:
                streak += 1
                if streak >= 2:
                    latest = 0.1
                    streak = 0
        return latest
    raise ValueError(f"unknown plateau mode {mode!r}")


def scheduled_sampling_select(reference_label, predicted_label, rate: float,
                              rng: np.random.Generator):
    """Feed the model its own last prediction with probability `rate`."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("sampling rate must lie in [0, 1]")
    return predicted_label if rng.random() < rate else reference_label


class Adam:
    """Adam over a named parameter dict; coupled L2 is added to gradients."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = params
        self.b1, self.b2, self.eps = beta1, beta2, epsilon
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float, l2_rate: float = 0.0):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.value)
            if l2_rate:
                g = g + l2_rate * p.value
            m = self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * (g * g)
            p.value = p.value - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def clip_gradients(params: dict, max_norm: float) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def utterance_examples(model, utterances):
    """(prepared features, target ids) pairs; targets are the read phones."""
    return [(model.prepare_features(u.features.frames), tuple(u.read.ids))
            for u in utterances]


def make_batches(examples, batch_size: int, frame_budget: int = 0):
    """Length-sorted greedy packing; deterministic for fixed inputs."""
    order = sorted(range(len(examples)), key=lambda i: (examples[i][0].shape[0], i))
    batches = []
    current = []
    t_max = 0
    for i in order:
        t = examples[i][0].shape[0]
        t_new = max(t_max, t)
        over_budget = frame_budget > 0 and current and (len(current) + 1) * t_new > frame_budget
        if len(current) >= batch_size or over_budget:
            batches.append(current)
            current, t_max = [], 0
            t_new = t
        current.append(i)
        t_max = t_new
    if current:
        batches.append(current)
    return batches


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    lr: float
    seconds: float


@dataclass
class FitResult:
    best_state: dict
    best_valid: float
    best_epoch: int
    log: list = field(default_factory=list)


def write_training_log(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch\ttrain_loss\tvalid_loss\tlr\tseconds\n")
        for r in records:
            fh.write(f"{r.epoch}\t{r.train_loss:.6f}\t{r.valid_loss:.6f}"
                     f"\t{r.lr:.8g}\t{r.seconds:.2f}\n")


def evaluate_loss(model, examples, cfg: TrainConfig) -> float:
    """Token-weighted loss over a split, evaluation mode (no dropout/sampling)."""
    if not examples:
        raise ValueError("empty evaluation split")
    total, tokens = 0.0, 0
    for idx in make_batches(examples, cfg.batch_size, cfg.frame_budget):
        batch = pad_batch([examples[i] for i in idx])
        with ad.no_grad():
            loss, stats = model.batch_loss(batch, False, None, lam=cfg.lambda_ctc,
                                           ss_rate=0.0)
        total += float(loss.value) * stats["tokens"]
        tokens += stats["tokens"]
    return total / max(tokens, 1)


def fit(model, train_utterances, valid_utterances, cfg: TrainConfig,
        log_path=None) -> FitResult:
    """Train with early stopping; returns the minimum-validation checkpoint.

    Aborts with TrainingDiverged on a non-finite loss.
    """
    if not train_utterances or not valid_utterances:
        raise ValueError("fit needs non-empty train and valid splits")
    train = utterance_examples(model, train_utterances)
    valid = utterance_examples(model, valid_utterances)
    optimizer = Adam(model.params, cfg.beta1, cfg.beta2, cfg.epsilon)
    batches = make_batches(train, cfg.batch_size, cfg.frame_budget)

    result = FitResult(best_state=model.state(), best_valid=math.inf, best_epoch=0)
    valid_history = []
    lr_factor = 1.0
    global_step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.time()
        order_rng = np.random.default_rng([cfg.seed, 7, epoch])
        model_rng = np.random.default_rng([cfg.seed, 11, epoch])
        epoch_loss, epoch_tokens = 0.0, 0
        last_lr = 0.0
        for bi in order_rng.permutation(len(batches)):
            batch = pad_batch([train[i] for i in batches[bi]])
            loss, stats = model.batch_loss(
                batch, True, model_rng,
                lam=cfg.lambda_ctc, ss_rate=cfg.scheduled_sampling_rate)
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch}, batch {bi} "
                    f"(ce={stats['ce']:.4g} ctc={stats['ctc']:.4g})")
            optimizer.zero_grad()
            ad.backpropagate(loss)
            clip_gradients(model.params, cfg.grad_clip)
            global_step += 1
            if cfg.lr_schedule == "noam":
                last_lr = cfg.lr_scale * noam_lr(global_step, cfg.d_model, cfg.warmup_steps)
            else:
                last_lr = cfg.learning_rate * lr_factor
            optimizer.step(last_lr, cfg.l2_rate)
            epoch_loss += value * stats["tokens"]
            epoch_tokens += stats["tokens"]
        train_loss = epoch_loss / max(epoch_tokens, 1)
        valid_loss = evaluate_loss(model, valid, cfg)
        valid_history.append(valid_loss)
        result.log.append(EpochRecord(epoch, train_loss, valid_loss, last_lr,
                                      time.time() - t0))
        if valid_loss < result.best_valid:
            result.best_valid = valid_loss
            result.best_epoch = epoch
            result.best_state = model.state()
        if cfg.lr_schedule in ("halve_on_plateau", "divide10_after_2"):
            mode = "halve" if cfg.lr_schedule == "halve_on_plateau" else "divide10_after_2"
            lr_factor *= plateau_multiplier(valid_history, mode)
        if epoch - result.best_epoch >= cfg.early_stop_patience:
            break
    if log_path is not None:
        write_training_log(log_path, result.log)
    return result


def transfer_finetune(source_model, train_utterances, valid_utterances,
                      cfg: TrainConfig, expect_family=None, log_path=None) -> FitResult:
    """Whole-model adaptation: resume training on target-domain data with
    every parameter unfrozen. Zero epochs returns the source state bit-exact."""
    if expect_family is not None and source_model.family != expect_family:
        raise ValueError(f"checkpoint family {source_model.family!r} does not match "
                         f"requested {expect_family!r}")
    if cfg.max_epochs == 0:
        return FitResult(best_state=source_model.state(), best_valid=math.inf,
                         best_epoch=0)
    return fit(source_model, train_utterances, valid_utterances, cfg, log_path=log_path)
