"""Lottery-ticket-style structured pruning with a learned mask MLP.

Per prunable weight matrix W [m x n], a two-layer MLP produces a soft mask
M = sigmoid(W2 @ relu(W1 @ W)) of the same shape (W1 projects the m rows
to a higher dimension h = 2m).  Training runs with M (x) W (x) keep in place
of W so gradients reach both the backbone and the mask MLP; after each
round the lowest 20% of surviving mask values are hard-zeroed, and every
round restarts from the original initialization (the lottery-ticket
convention).

Prunable matrices cover the MVM-style operator weights: FC, Sigmoid-Gating,
EFC, the Dot-Product projections, and both mergers.  Attention internals,
the logit head, embeddings, biases, and layer-norm affines are left alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Dataset
from .metrics import log_loss
from .operators import _uniform
from .supernet import Subnet
from .training import TrainConfig, predict, train

PRUNE_RATE = 0.2
PRUNABLE_SUFFIXES = (".fc.w", ".sg.w", ".efc.w", ".dp.proj_w", ".dp.bal_w",
                     ".dp.out_w", ".d2s.w", ".s2d.w")
# middle-axis matrices multiply every embedding channel
_CHANNEL_SUFFIXES = (".efc.w", ".dp.bal_w")


def prunable_names(model: Subnet):
    return tuple(name for name in model.params
                 if name.endswith(PRUNABLE_SUFFIXES) and model.params[name].data.size > 0
                 and model.params[name].data.ndim == 2)


@dataclass
class MaskState:
    """Mask MLP weights and the accumulated hard-zero pattern per matrix."""
    mlp: dict          # name -> {"w1": Tensor [h,m], "w2": Tensor [m,h]}
    keep: dict         # name -> bool ndarray [m,n]; False entries stay zero
    iteration: int = 0

    def surviving_fraction(self) -> float:
        kept = sum(int(k.sum()) for k in self.keep.values())
        total = sum(k.size for k in self.keep.values())
        return kept / total


def init_mask_state(model: Subnet, seed: int = 0, hidden_mult: int = 2) -> MaskState:
    rng = np.random.default_rng(seed)
    mlp, keep = {}, {}
    for name in prunable_names(model):
        m, _ = model.params[name].data.shape
        h = max(hidden_mult * m, 1)
        mlp[name] = {"w1": _uniform(rng, (h, m), m), "w2": _uniform(rng, (m, h), h)}
        keep[name] = np.ones(model.params[name].data.shape, dtype=bool)
    return MaskState(mlp=mlp, keep=keep)


def gen_mask(w_orig: T.Tensor, mlp: dict) -> T.Tensor:
    """M = sigmoid(W2 @ relu(W1 @ W_orig)), same shape as W_orig."""
    h, m = mlp["w1"].shape
    if m != w_orig.shape[0] or mlp["w2"].shape != (m, h):
        raise T.ShapeError(f"mask MLP {mlp['w1'].shape}/{mlp['w2'].shape} does not fit "
                           f"matrix {w_orig.shape}")
    hidden = T.relu(T.matmul(mlp["w1"], w_orig))
    return T.sigmoid(T.matmul(mlp["w2"], hidden))


def apply_mask(w_orig, mask, keep) -> T.Tensor:
    """W_masked = M (x) W with hard-zeroed entries forced to exactly 0."""
    return T.mul(T.mul(T.as_tensor(mask), T.as_tensor(w_orig)),
                 T.constant(np.asarray(keep, dtype=np.float64)))


class MaskedModel:
    """Adapter giving ``train`` a masked view of a subnet.

    ``use_mlp=False`` trains the plain backbone under the keep pattern
    (the magnitude-based baseline)."""

    def __init__(self, model: Subnet, state: MaskState, use_mlp: bool = True):
        self.model = model
        self.state = state
        self.use_mlp = use_mlp

    def parameters(self):
        params = dict(self.model.params)
        if self.use_mlp:
            for name, mlp in self.state.mlp.items():
                params[f"mask.{name}.w1"] = mlp["w1"]
                params[f"mask.{name}.w2"] = mlp["w2"]
        return params

    def overrides(self) -> dict:
        out = {}
        for name in self.state.keep:
            w = self.model.params[name]
            mask = gen_mask(w, self.state.mlp[name]) if self.use_mlp else \
                T.constant(np.ones(w.shape))
            out[name] = apply_mask(w, mask, self.state.keep[name])
        return out

    def forward(self, batch):
        return self.model.forward(batch, param_override=self.overrides())


def _masked_loss(model: MaskedModel, dataset: Dataset, batch_size: int) -> float:
    probs = predict(model.model, dataset, batch_size, param_override=model.overrides())
    return log_loss(probs, dataset.labels)


def _harden(state: MaskState, scores: dict, per_matrix: bool, rate: float):
    """Zero out the lowest-scoring surviving entries (monotone)."""
    if per_matrix:
        for name, keep in state.keep.items():
            alive = np.flatnonzero(keep.reshape(-1))
            n_zero = int(round(rate * alive.size))
            if n_zero == 0:
                continue
            vals = scores[name].reshape(-1)[alive]
            drop = alive[np.argsort(vals, kind="stable")[:n_zero]]
            flat = keep.reshape(-1)
            flat[drop] = False
    else:
        entries = []
        for name, keep in state.keep.items():
            alive = np.flatnonzero(keep.reshape(-1))
            vals = scores[name].reshape(-1)[alive]
            entries.extend((v, name, i) for v, i in zip(vals, alive))
        entries.sort(key=lambda e: e[0])
        n_zero = int(round(rate * len(entries)))
        for _, name, i in entries[:n_zero]:
            state.keep[name].reshape(-1)[i] = False
    state.iteration += 1


def _structured_flops(model: Subnet, keep: dict) -> float:
    """Per-sample FLOPs crediting only fully-zero rows/columns.

    Elementwise zeros show up as sparsity but do not reduce the count; a
    matrix's matmul term shrinks by the product of surviving row and column
    fractions.  Channel-axis matrices (EFC-style) carry a dim_s multiplier.
    """
    total = model.flops_per_sample()
    ds = model.cfg.dim_s
    for name, k in keep.items():
        m, n = k.shape
        if m == 0 or n == 0:
            continue
        rows = int((k.any(axis=1)).sum())
        cols = int((k.any(axis=0)).sum())
        mult = ds if name.endswith(_CHANNEL_SUFFIXES) else 1
        full_term = 2 * m * n * mult
        total -= full_term - 2 * rows * cols * mult
    return total


@dataclass
class PruneRow:
    iteration: int
    log_loss: float
    mflops: float
    flops_percent: float
    surviving_fraction: float


def _run_schedule(model: Subnet, data_splits, T_iters: int, budget: TrainConfig,
                  seed: int, use_mlp: bool, per_matrix: bool,
                  rate: float):
    train_ds, val_ds = data_splits
    state = init_mask_state(model, seed=seed)
    if T_iters == 0:
        return model, state, []
    theta0 = {name: t.data.copy() for name, t in model.params.items()}
    mlp0 = {name: {k: w.data.copy() for k, w in mlp.items()}
            for name, mlp in state.mlp.items()}
    base_flops = model.flops_per_sample()

    def reset():
        for name, t in model.params.items():
            t.data = theta0[name].copy()
        for name, mlp in state.mlp.items():
            for k in mlp:
                mlp[k].data = mlp0[name][k].copy()

    rows = []
    # unpruned reference: one plain training round from the original init
    reset()
    plain = MaskedModel(model, state, use_mlp=use_mlp)
    train(plain, train_ds, budget)
    rows.append(PruneRow(0, _masked_loss(plain, val_ds, budget.batch_size),
                         base_flops / 1e6, 100.0, 1.0))
    for t in range(1, T_iters + 1):
        reset()
        masked = MaskedModel(model, state, use_mlp=use_mlp)
        cfg_t = TrainConfig(batch_size=budget.batch_size, lr0=budget.lr0,
                            epochs=budget.epochs, seed=budget.seed + t,
                            max_steps=budget.max_steps, log_every=budget.log_every)
        train(masked, train_ds, cfg_t)
        if use_mlp:
            scores = {name: gen_mask(model.params[name], state.mlp[name]).data
                      for name in state.keep}
        else:
            scores = {name: np.abs(model.params[name].data) for name in state.keep}
        _harden(state, scores, per_matrix, rate)
        f = _structured_flops(model, state.keep)
        rows.append(PruneRow(t, _masked_loss(masked, val_ds, budget.batch_size),
                             f / 1e6, 100.0 * f / base_flops,
                             state.surviving_fraction()))
    return model, state, rows


def iterate_prune(model: Subnet, data_splits, T_iters: int, budget: TrainConfig,
                  seed: int = 0, per_matrix: bool = True, rate: float = PRUNE_RATE):
    """Learned-mask iterative structured pruning; returns (model, state, rows)."""
    if T_iters < 0:
        raise ValueError("T must be >= 0")
    return _run_schedule(model, data_splits, T_iters, budget, seed,
                         use_mlp=True, per_matrix=per_matrix, rate=rate)


def magnitude_prune(model: Subnet, data_splits, T_iters: int, budget: TrainConfig,
                    seed: int = 0, per_matrix: bool = True, rate: float = PRUNE_RATE):
    """Same schedule ranking by |W| instead of the learned mask."""
    if T_iters < 0:
        raise ValueError("T must be >= 0")
    return _run_schedule(model, data_splits, T_iters, budget, seed,
                         use_mlp=False, per_matrix=per_matrix, rate=rate)


def report_csv_rows(dataset_name: str, variant: str, rows):
    out = [("dataset", "variant", "T", "log_loss", "mflops", "percent")]
    for r in rows:
        out.append((dataset_name, variant, r.iteration, f"{r.log_loss:.6f}",
                    f"{r.mflops:.6f}", f"{r.flops_percent:.2f}"))
    return out
