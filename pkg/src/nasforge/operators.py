"""Building operators for choice blocks, plus parameter and FLOPs accounting.

Conventions shared by the whole package:

  * Dense tensors are [B x dim]; sparse tensors are [B x N x dim_s] stacks
    of embeddings.  All sparse embeddings share one dim_s.
  * Dimension masking zeroes entries with index >= d (last axis for dense
    outputs, middle axis for sparse outputs).
  * FC, Dot-Product, and EFC end in relu + layer norm as part of the
    operator; Sigmoid-Gating and Sum are bare value ops and get their
    layer norm from the enclosing block.  Mergers are purely linear.
  * The Dot-Product interaction is the strict upper triangle of the Gram
    matrix (diagonal excluded, the DLRM convention).  In balanced mode the
    embedding count is first projected to m = round(sqrt(2*out_dim)) rows
    (half-up rounding) by a linear embedding-count projection, and the
    flattened interaction vector is fitted (zero-pad / truncate) to a fixed
    slot count so the output projection is out_dim x out_dim.
  * FLOPs convention: 1 MAC = 2 FLOPs; sigmoid and softmax cost 5 FLOPs
    per element; plain adds/multiplies cost 1 FLOP per element.  Linear
    layers count only their MACs (bias/relu/layer-norm not counted).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

K_D2S = 2  # embeddings emitted by the dense-to-sparse merger


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def balanced_projection_count(out_dim: int) -> int:
    """Embedding count m the balanced Dot-Product projects down to."""
    return round_half_up(math.sqrt(2.0 * out_dim))


# ---------------------------------------------------------------------------
# FLOPs metering
# ---------------------------------------------------------------------------

_METER_STACK = []


class FlopMeter:
    """Accumulates per-sample FLOPs of every operator run inside the context."""

    def __init__(self):
        self.total = 0.0

    def __enter__(self):
        _METER_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _METER_STACK.pop()
        return False

    def add(self, flops: float):
        self.total += float(flops)


def _meter(flops: float):
    if _METER_STACK:
        _METER_STACK[-1].add(flops)


# ---------------------------------------------------------------------------
# weight initialization
# ---------------------------------------------------------------------------

def _uniform(rng, shape, fan_in) -> Tensor:
    if fan_in <= 0:
        return Tensor(np.zeros(shape), requires_grad=True)
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _ln_affine(d):
    return Tensor(np.ones(d), requires_grad=True), Tensor(np.zeros(d), requires_grad=True)


def init_fc(rng, dim_in, dim_out, layer_norm=True):
    w = {"w": _uniform(rng, (dim_in, dim_out), dim_in),
         "b": _uniform(rng, (dim_out,), dim_in)}
    if layer_norm:
        w["ln_g"], w["ln_b"] = _ln_affine(dim_out)
    return w


def init_sg(rng, dim_in, dim_out):
    return {"w": _uniform(rng, (dim_in, dim_out), dim_in),
            "b": _uniform(rng, (dim_out,), dim_in)}


def init_efc(rng, n_in, n_out, dim_s):
    w = {"w": _uniform(rng, (n_in, n_out), n_in),
         "b": _uniform(rng, (n_out,), n_in)}
    w["ln_g"], w["ln_b"] = _ln_affine(dim_s)
    return w


def init_dp(rng, dim_in, n_in, out_dim, dim_s, balanced, interaction_width=None):
    w = {}
    if dim_in > 0:
        w["proj_w"] = _uniform(rng, (dim_in, dim_s), dim_in)
        w["proj_b"] = _uniform(rng, (dim_s,), dim_in)
    rows = n_in
    if balanced:
        m = balanced_projection_count(out_dim if interaction_width is None else interaction_width)
        w["bal_w"] = _uniform(rng, (n_in, m), n_in)
        w["bal_b"] = _uniform(rng, (m,), n_in)
        rows = m
    rows += 1 if dim_in > 0 else 0
    pairs = rows * (rows - 1) // 2
    slots = (interaction_width or out_dim) if balanced else pairs
    w["out_w"] = _uniform(rng, (slots, out_dim), max(slots, 1))
    w["out_b"] = _uniform(rng, (out_dim,), max(slots, 1))
    w["ln_g"], w["ln_b"] = _ln_affine(out_dim)
    return w


def init_attention(rng, dim_s, hidden_mult=2):
    w = {}
    for name in ("wq", "wk", "wv", "wo"):
        w[name] = _uniform(rng, (dim_s, dim_s), dim_s)
        w["b" + name[1]] = _uniform(rng, (dim_s,), dim_s)
    w["ln1_g"], w["ln1_b"] = _ln_affine(dim_s)
    hidden = hidden_mult * dim_s
    w["ffn1_w"] = _uniform(rng, (dim_s, hidden), dim_s)
    w["ffn1_b"] = _uniform(rng, (hidden,), dim_s)
    w["ffn2_w"] = _uniform(rng, (hidden, dim_s), hidden)
    w["ffn2_b"] = _uniform(rng, (dim_s,), hidden)
    w["ln2_g"], w["ln2_b"] = _ln_affine(dim_s)
    return w


def init_d2s(rng, dim_in, dim_s, k=K_D2S):
    return {"w": _uniform(rng, (dim_in, k * dim_s), dim_in),
            "b": _uniform(rng, (k * dim_s,), dim_in)}


def init_s2d(rng, dim_s, out_dim):
    return {"w": _uniform(rng, (dim_s, out_dim), dim_s),
            "b": _uniform(rng, (out_dim,), dim_s)}


def init_head(rng, dim_in):
    return {"w": _uniform(rng, (dim_in, 1), dim_in),
            "b": _uniform(rng, (1,), dim_in)}


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------

def dim_mask(v: Tensor, d: int, axis: int = -1) -> Tensor:
    """Keep entries with index < d along ``axis``; zero the rest."""
    return T.mask_axis(v, axis, d)


def fc(x, w, active: int | None = None) -> Tensor:
    """layer_norm(relu(x W + b)); a width-0 input degenerates to the bias."""
    dim_in, dim_out = w["w"].shape
    _meter(2 * dim_in * dim_out)
    z = T.relu(T.add_vec(T.matmul(x, w["w"]), w["b"], -1))
    if active is not None and active < dim_out:
        z = T.mask_axis(z, -1, active)
    return T.layer_norm(z, w["ln_g"], w["ln_b"], active=active)


def fc_linear(x, w) -> Tensor:
    """Bare affine map (used by the head and inside mergers)."""
    dim_in, dim_out = w["w"].shape
    _meter(2 * dim_in * dim_out)
    return T.add_vec(T.matmul(x, w["w"]), w["b"], -1)


def sigmoid_gating(x1, x2, w) -> Tensor:
    """sigmoid(FC(x1)) * x2, with the narrower operand zero-padded.

    The output width equals the gating projection's output width; callers
    wanting the textbook max(d1, d2) semantics size the projection that way.
    """
    dim_in, dim_out = w["w"].shape
    _meter(2 * dim_in * dim_out + 6 * dim_out)  # matmul + sigmoid(5/elem) + mul
    gate = T.sigmoid(T.add_vec(T.matmul(x1, w["w"]), w["b"], -1))
    return T.mul(gate, T.fit_axis(x2, -1, dim_out))


def sum_merge(x1, x2) -> Tensor:
    """Pad-then-add two dense inputs to width max(d1, d2)."""
    width = max(x1.shape[-1] if hasattr(x1, "shape") else np.shape(x1)[-1],
                x2.shape[-1] if hasattr(x2, "shape") else np.shape(x2)[-1])
    _meter(width)
    return T.add(T.fit_axis(T.as_tensor(x1), -1, width), T.fit_axis(T.as_tensor(x2), -1, width))


def efc(x_s, w, active: int | None = None) -> Tensor:
    """FC along the embedding-count axis: [B,N_in,ds] -> [B,N_out,ds].

    Per-output-embedding bias, relu, layer norm over dim_s; the middle axis
    is masked to ``active`` embeddings when given.
    """
    n_in, n_out = w["w"].shape
    dim_s = T.as_tensor(x_s).shape[-1]
    _meter(2 * n_in * n_out * dim_s)
    mixed = T.transpose_last2(T.matmul(T.transpose_last2(x_s), w["w"]))  # [B,N_out,ds]
    z = T.relu(T.add_vec(mixed, w["b"], 1))
    z = T.layer_norm(z, w["ln_g"], w["ln_b"])
    if active is not None and active < n_out:
        z = T.mask_axis(z, 1, active)
    return z


def efc_linear(x_s, w) -> Tensor:
    """Embedding-count projection without activation/norm (balanced DP)."""
    n_in, n_out = w["w"].shape
    dim_s = T.as_tensor(x_s).shape[-1]
    _meter(2 * n_in * n_out * dim_s)
    mixed = T.transpose_last2(T.matmul(T.transpose_last2(x_s), w["w"]))
    return T.add_vec(mixed, w["b"], 1)


def attention(x_s, w, heads: int, key_mask=None) -> Tensor:
    """One transformer-encoder layer over the embedding stack.

    Queries, keys, and values are all ``x_s``; per-head width is dim_s/heads
    with 1/sqrt per-head scaling; post-norm residual blocks; position-wise
    FFN with hidden 2*dim_s and relu.  ``key_mask`` marks which middle-axis
    positions are real embeddings; masked keys get zero attention.
    """
    x_s = T.as_tensor(x_s)
    _, n, dim_s = x_s.shape
    if dim_s % heads != 0:
        raise T.ShapeError(f"dim_s {dim_s} not divisible by {heads} heads")
    dh = dim_s // heads
    hidden = w["ffn1_w"].shape[1]
    _meter(8 * n * dim_s * dim_s + 4 * n * n * dim_s + 5 * heads * n * n
           + 2 * n * dim_s * hidden * 2)
    q = T.add_vec(T.matmul(x_s, w["wq"]), w["bq"], -1)
    k = T.add_vec(T.matmul(x_s, w["wk"]), w["bk"], -1)
    v = T.add_vec(T.matmul(x_s, w["wv"]), w["bv"], -1)
    ctx_heads = []
    for h in range(heads):
        qs = T.slice_axis(q, -1, h * dh, (h + 1) * dh)
        ks = T.slice_axis(k, -1, h * dh, (h + 1) * dh)
        vs = T.slice_axis(v, -1, h * dh, (h + 1) * dh)
        scores = T.scale(T.batched_matmul(qs, T.transpose_last2(ks)), 1.0 / math.sqrt(dh))
        probs = T.softmax_last(scores, key_mask)
        ctx_heads.append(T.batched_matmul(probs, vs))
    ctx = T.concat(-1, ctx_heads) if heads > 1 else ctx_heads[0]
    attn_out = T.add_vec(T.matmul(ctx, w["wo"]), w["bo"], -1)
    h1 = T.layer_norm(T.add(x_s, attn_out), w["ln1_g"], w["ln1_b"])
    ffn = T.add_vec(T.matmul(T.relu(T.add_vec(T.matmul(h1, w["ffn1_w"]), w["ffn1_b"], -1)),
                             w["ffn2_w"]), w["ffn2_b"], -1)
    return T.layer_norm(T.add(h1, ffn), w["ln2_g"], w["ln2_b"])


def dot_product(x_d, x_s, w, balanced: bool, active: int | None = None) -> Tensor:
    """Pairwise-interaction operator producing a dense output.

    The dense input (when present and nonzero width) is projected to dim_s
    and stacked with the sparse embeddings; in balanced mode the embedding
    count is first linearly projected down.  The strict upper triangle of
    the per-sample Gram matrix feeds an FC (+relu +layer norm).
    """
    if x_d is None and x_s is None:
        raise T.ShapeError("dot_product needs at least one input")
    rows = []
    if x_d is not None:
        # a width-0 dense input still contributes its (bias-only) stack row
        x_d = T.as_tensor(x_d)
        dim_in, dim_s = w["proj_w"].shape
        _meter(2 * dim_in * dim_s)
        proj = T.add_vec(T.matmul(x_d, w["proj_w"]), w["proj_b"], -1)
        rows.append(T.reshape(proj, (proj.shape[0], 1, proj.shape[1])))
    if x_s is not None:
        xs = T.as_tensor(x_s)
        if balanced:
            xs = efc_linear(xs, {"w": w["bal_w"], "b": w["bal_b"]})
        rows.append(xs)
    stacked = T.concat(1, rows) if len(rows) > 1 else rows[0]
    n = stacked.shape[1]
    dim_s = stacked.shape[2]
    _meter(2 * (n * (n - 1) // 2) * dim_s)  # only the needed pairwise products
    gram = T.batched_matmul(stacked, T.transpose_last2(stacked))
    flat = T.triu_flatten(gram)
    slots, out_dim = w["out_w"].shape
    flat = T.fit_axis(flat, -1, slots)
    _meter(2 * slots * out_dim)
    z = T.relu(T.add_vec(T.matmul(flat, w["out_w"]), w["out_b"], -1))
    if active is not None and active < out_dim:
        z = T.mask_axis(z, -1, active)
    return T.layer_norm(z, w["ln_g"], w["ln_b"], active=active)


def dense_to_sparse(x_d, w, dim_s: int) -> Tensor:
    """FC to k*dim_s then reshape to [B,k,dim_s]; caller concatenates it
    onto the sparse branch output."""
    out = fc_linear(x_d, w)
    b = out.shape[0]
    k = out.shape[1] // dim_s
    return T.reshape(out, (b, k, dim_s))


def fm_vector(x_s) -> Tensor:
    """Second-order factorization-machine pooling: 0.5*((sum x)^2 - sum x^2)."""
    x_s = T.as_tensor(x_s)
    n, dim_s = x_s.shape[1], x_s.shape[2]
    _meter(4 * n * dim_s)
    s = T.sum_axis(x_s, 1)
    sq = T.sum_axis(T.mul(x_s, x_s), 1)
    return T.scale(T.sub(T.mul(s, s), sq), 0.5)


def sparse_to_dense(x_s, w) -> Tensor:
    """FM pooling followed by a linear projection; caller adds the result
    to the dense branch output."""
    return fc_linear(fm_vector(x_s), w)


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OpSpec:
    """Shape summary of one operator instance for counting formulas."""
    kind: str                      # FC, SG, SUM, DP, EFC, ATTN, D2S, S2D, HEAD
    dim_in: int = 0                # dense input width
    n_in: int = 0                  # sparse embedding count in
    out_dim: int = 0               # dense width out, or embedding count out
    dim_s: int = 0
    heads: int = 1
    interaction_width: int | None = None  # balanced-DP interaction slots
    dense_row: bool | None = None  # DP stacks a dense-projection row (None: dim_in > 0)

    def _dp_has_dense(self) -> bool:
        return self.dense_row if self.dense_row is not None else self.dim_in > 0

    def __post_init__(self):
        if self.kind in ("EFC", "ATTN") and self.n_in < 1:
            raise ValueError(f"{self.kind} needs at least one input embedding")
        if self.kind == "DP" and self.n_in < 1 and self.dim_in < 1:
            raise ValueError("DP needs a dense or a sparse input")


def param_count(spec: OpSpec, balanced: bool = False, with_bias: bool = True) -> int:
    """Trainable weight count per operator (layer-norm affine excluded).

    For the balanced Dot-Product this reproduces the linear-growth formula
    out_dim^2 + N*round(sqrt(2*out_dim)) exactly, because the interaction
    vector occupies a fixed out_dim-slot input to the output projection.
    Bias terms are included only when ``with_bias`` is set, so the bias-free
    published arithmetic stays checkable.
    """
    k = spec.kind
    bias = 0
    if k in ("FC", "SG"):
        weights = spec.dim_in * spec.out_dim
        bias = spec.out_dim
    elif k == "SUM":
        weights = 0
    elif k == "EFC":
        weights = spec.n_in * spec.out_dim
        bias = spec.out_dim
    elif k == "ATTN":
        weights = 4 * spec.dim_s * spec.dim_s + 2 * spec.dim_s * (2 * spec.dim_s)
        bias = 4 * spec.dim_s + 2 * spec.dim_s + spec.dim_s  # q,k,v,o + ffn1 + ffn2
    elif k == "DP":
        weights = 0
        has_dense = spec._dp_has_dense()
        if has_dense:
            weights += spec.dim_in * spec.dim_s
            bias += spec.dim_s
        if balanced:
            base = spec.interaction_width or spec.out_dim
            m = balanced_projection_count(base)
            weights += spec.n_in * m
            bias += m
            slots = base
        else:
            n = spec.n_in + (1 if has_dense else 0)
            slots = n * (n - 1) // 2
        weights += slots * spec.out_dim
        bias += spec.out_dim
    elif k == "D2S":
        weights = spec.dim_in * (K_D2S * spec.dim_s)
        bias = K_D2S * spec.dim_s
    elif k == "S2D":
        weights = spec.dim_s * spec.out_dim
        bias = spec.out_dim
    elif k == "HEAD":
        weights = spec.dim_in * 1
        bias = 1
    else:
        raise ValueError(f"unknown operator kind {k!r}")
    return weights + (bias if with_bias else 0)


def flops_count(spec: OpSpec, balanced: bool = False) -> float:
    """Per-sample FLOPs under the module convention (see module docstring)."""
    k = spec.kind
    if k == "FC":
        return 2 * spec.dim_in * spec.out_dim
    if k == "SG":
        return 2 * spec.dim_in * spec.out_dim + 6 * spec.out_dim
    if k == "SUM":
        return spec.out_dim
    if k == "EFC":
        return 2 * spec.n_in * spec.out_dim * spec.dim_s
    if k == "ATTN":
        n, ds, h = spec.n_in, spec.dim_s, spec.heads
        return 8 * n * ds * ds + 4 * n * n * ds + 5 * h * n * n + 2 * n * ds * (2 * ds) * 2
    if k == "DP":
        total = 0.0
        has_dense = spec._dp_has_dense()
        rows = spec.n_in
        if has_dense:
            total += 2 * spec.dim_in * spec.dim_s
        if balanced:
            base = spec.interaction_width or spec.out_dim
            m = balanced_projection_count(base)
            total += 2 * spec.n_in * m * spec.dim_s
            rows = m
            slots = base
        else:
            slots = None
        rows += 1 if has_dense else 0
        pairs = rows * (rows - 1) // 2
        total += 2 * pairs * spec.dim_s
        total += 2 * (slots if slots is not None else pairs) * spec.out_dim
        return total
    if k == "D2S":
        return 2 * spec.dim_in * (K_D2S * spec.dim_s)
    if k == "S2D":
        return 4 * spec.n_in * spec.dim_s + 2 * spec.dim_s * spec.out_dim
    if k == "HEAD":
        return 2 * spec.dim_in
    raise ValueError(f"unknown operator kind {k!r}")


def unbalanced_dp_projection_params(n_s: int, dim_d: int) -> int:
    """Published headline for the unbalanced interaction projection size:
    (N^2 / 2) * dim_d pairwise terms feeding the output projection."""
    return (n_s * n_s // 2) * dim_d


def balanced_dp_param_formula(n_s: int, dim_d: int) -> int:
    """Published linear-growth bound for the balanced Dot-Product:
    dim_d^2 + N * round(sqrt(2*dim_d)) weights (biases excluded)."""
    return dim_d * dim_d + n_s * balanced_projection_count(dim_d)
