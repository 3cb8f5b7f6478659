"""Training loop: Adagrad with a cosine schedule, metric recording, guards.

One train entry point serves both targets: a supernet (a path is sampled
per minibatch) and a standalone subnet.  Runs are deterministic given the
config seed: shuffling, path sampling, and updates all derive from it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from . import tensor as T
from .data import Dataset, iter_batches
from .space import Genotype, full_genotype
from .supernet import SamplingStrategy, Subnet, Supernet, sample_path

DIVERGENCE_LIMIT = 10 * math.log(2)   # abort when loss stays above this
DIVERGENCE_PATIENCE = 100


@dataclass
class TrainConfig:
    batch_size: int = 1024
    lr0: float = 0.12
    epochs: int = 1
    seed: int = 0
    log_every: int = 50
    embedding_cap: int = 500_000
    max_steps: int | None = None      # desk-scale override; None = full epochs

    def __post_init__(self):
        if not 0.0 < self.lr0 < 1.0:
            raise ValueError("lr0 must lie in (0, 1)")
        if self.embedding_cap < 1:
            raise ValueError("embedding cap must be >= 1")


class DivergenceError(RuntimeError):
    pass


def adagrad_step(w: T.Tensor, g: np.ndarray, state: np.ndarray, lr: float,
                 eps: float = 1e-10) -> T.Tensor:
    """acc += g^2; w -= lr * g / (sqrt(acc) + eps).  Updates in place."""
    state += g * g
    w.data -= lr * g / (np.sqrt(state) + eps)
    return w


def cosine_lr(step: int, total: int, lr0: float) -> float:
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total))


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)   # dicts: step, lr, train_loss, val_loss, val_auc

    def record(self, **kw):
        self.rows.append(kw)

    def final(self, key):
        for row in reversed(self.rows):
            if row.get(key) is not None:
                return row[key]
        return None


def _total_steps(dataset, cfg: TrainConfig) -> int:
    per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total = per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    return max(total, 1)


def train(target, dataset: Dataset, cfg: TrainConfig, val: Dataset | None = None,
          strategy: SamplingStrategy | None = None) -> TrainHistory:
    """Train a supernet (with per-minibatch path sampling) or a subnet.

    ``target`` is a Supernet (requires ``strategy``) or a Subnet.  Aborts
    with DivergenceError if the loss exceeds 10*ln2 for 100 consecutive
    steps.  Validation metrics are computed once at the end of training.
    """
    is_supernet = isinstance(target, Supernet)
    if is_supernet and strategy is None:
        raise ValueError("supernet training needs a sampling strategy")
    total = _total_steps(dataset, cfg)
    if is_supernet and strategy.total_steps != total:
        strategy = SamplingStrategy(strategy.kind, total, strategy.warmup_fraction)
    rng = np.random.default_rng(cfg.seed)
    params = target.parameters()
    state = {name: np.zeros_like(t.data) for name, t in params.items()}
    history = TrainHistory()
    step = 0
    bad_steps = 0
    for epoch in range(cfg.epochs):
        for batch in iter_batches(dataset, cfg.batch_size,
                                  shuffle_seed=int(rng.integers(2 ** 31))):
            if step >= total:
                break
            lr = cosine_lr(step, total, cfg.lr0)
            with T.Tape() as tape:
                if is_supernet:
                    g = sample_path(strategy, target.cfg, rng, step)
                    logits = target.forward(g, batch)
                else:
                    logits = target.forward(batch)
                loss = T.bce_with_logits(logits, batch.labels)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise DivergenceError(f"non-finite loss at step {step}")
            bad_steps = bad_steps + 1 if loss_val > DIVERGENCE_LIMIT else 0
            if bad_steps >= DIVERGENCE_PATIENCE:
                raise DivergenceError(f"loss above {DIVERGENCE_LIMIT:.2f} for "
                                      f"{DIVERGENCE_PATIENCE} consecutive steps")
            T.backward(loss, tape)
            for name, t in params.items():
                if t.grad is not None and t.grad.any():
                    adagrad_step(t, t.grad, state[name], lr)
                t.grad = None
            if step % cfg.log_every == 0:
                history.record(step=step, lr=lr, train_loss=loss_val,
                               val_loss=None, val_auc=None)
            step += 1
        _record_val(target, val, cfg, history, step, total, is_supernet)
        if step >= total:
            break
    return history


def _record_val(target, val, cfg, history, step, total, is_supernet):
    """Validation metrics once per epoch end (cheap enough at desk scale)."""
    val_loss = val_auc = None
    if val is not None and len(val):
        probs = (predict_supernet(target, full_genotype(target.cfg), val, cfg.batch_size)
                 if is_supernet else predict(target, val, cfg.batch_size))
        val_loss = metrics.log_loss(probs, val.labels)
        val_auc = metrics.auc(probs, val.labels)
    history.record(step=step, lr=cosine_lr(step, total, cfg.lr0),
                   train_loss=None, val_loss=val_loss, val_auc=val_auc)


def predict(model: Subnet, dataset: Dataset, batch_size: int = 1024,
            param_override=None) -> np.ndarray:
    chunks = []
    for batch in iter_batches(dataset, batch_size):
        logits = model.forward(batch, param_override)
        chunks.append(1.0 / (1.0 + np.exp(-np.clip(logits.data, -500, 500))))
    return np.concatenate(chunks)


def predict_supernet(net: Supernet, g: Genotype, dataset: Dataset,
                     batch_size: int = 1024) -> np.ndarray:
    chunks = []
    for batch in iter_batches(dataset, batch_size):
        logits = net.forward(g, batch)
        chunks.append(1.0 / (1.0 + np.exp(-np.clip(logits.data, -500, 500))))
    return np.concatenate(chunks)


def supernet_val_loss(net: Supernet, g: Genotype, val: Dataset,
                      batch_size: int = 1024) -> float:
    """Validation log loss of one genotype evaluated on shared weights."""
    return metrics.log_loss(predict_supernet(net, g, val, batch_size), val.labels)
