"""Shared-weight supernet over the choice-block space.

Layout convention (what makes weight sharing work):

  * Every block's dense input is the concatenation over ALL earlier
    sources (raw first, then block 1..n-1) with unselected sources
    contributing zero segments, so the input width is fixed per block:
    num_dense + (n-1) * max_dense_dim.  The sparse input stacks raw
    embeddings plus (max_sparse_dim + k) slots per earlier block the same
    way.  Selecting a connection just un-zeroes its segment; masked
    dimensions of a source block stay zero inside its segment.
  * Dense operator outputs live at max_dense_dim and are dimension-masked
    to their sampled width before the branch-level addition; layer-norm
    statistics run over the active width only.  Sparse outputs live at
    max_sparse_dim (+k merger slots) with the embedding-count axis masked.
  * Attention ignores inactive key positions via softmax masking and its
    sampled output count selects the first active positions, so a
    standalone subnet sees the identical function.

``extract_subnet`` copies exactly the weight slices a genotype touches and
produces a compact standalone model whose forward pass matches the masked
supernet evaluation to float round-off.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from . import operators as O
from . import space as S
from . import storage
from . import tensor as T
from .data import FeatureBatch, FeatureSpec
from .space import D2S_EMBEDDINGS as K
from .tensor import Tensor


class GenotypeError(ValueError):
    """Raised when a genotype fails validation against the supernet space."""


STRATEGY_KINDS = ("single_op_single_conn", "any_op_any_conn", "single_op_any_conn")


@dataclass(frozen=True)
class SamplingStrategy:
    kind: str
    total_steps: int
    warmup_fraction: float = 0.2

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown sampling strategy {self.kind!r}")

    def full_path_probability(self, step: int) -> float:
        """Linearly decaying warm-up: 1 at step 0, 0 from warmup_fraction on."""
        horizon = self.warmup_fraction * self.total_steps
        if horizon <= 0:
            return 0.0
        return max(0.0, 1.0 - step / horizon)


def sample_path(strategy: SamplingStrategy, cfg: S.SpaceConfig, rng, step: int) -> S.Genotype:
    """Draw the training path for one minibatch.

    With the warm-up probability the literal full supernet genotype is
    returned (all operators, all connections, max dims, mergers on);
    otherwise operators/connections follow the strategy and dims, bits,
    and mergers are uniform.
    """
    if rng.random() < strategy.full_path_probability(step):
        return S.full_genotype(cfg)
    single_op = strategy.kind in ("single_op_single_conn", "single_op_any_conn")
    single_conn = strategy.kind == "single_op_single_conn"
    blocks = []
    for n in range(1, cfg.num_blocks + 1):
        if single_conn:
            conns = [int(rng.integers(n))]
        else:
            conns = S._nonempty_subset(rng, range(n))
        dense = S._sample_ops(rng, cfg.dense_ops, cfg.dense_dims, cfg.weight_bits_choices,
                              singleton=single_op)
        sparse = S._sample_ops(rng, cfg.sparse_ops, cfg.sparse_dims, cfg.weight_bits_choices,
                               singleton=single_op)
        blocks.append(S.make_block(
            conns, dense, sparse,
            d2s=cfg.allow_mergers and rng.random() < 0.5,
            s2d=cfg.allow_mergers and rng.random() < 0.5,
        ))
    return S.Genotype(blocks=tuple(blocks))


def prune_unreachable(g: S.Genotype) -> S.Genotype:
    """Mark blocks whose output never reaches the head via connections."""
    n = g.num_blocks
    used = {n}
    stack = [n]
    while stack:
        b = stack.pop()
        for src in g.blocks[b - 1].connections:
            if src != 0 and src not in used:
                used.add(src)
                stack.append(src)
    unused = tuple(i for i in range(1, n + 1) if i not in used)
    return replace(g, unused=unused)


# ---------------------------------------------------------------------------
# supernet
# ---------------------------------------------------------------------------

class Supernet:
    """Maximal-dimension weights for every operator in every block."""

    def __init__(self, cfg: S.SpaceConfig, feature_spec: FeatureSpec, seed: int = 0,
                 dp_balanced: bool = True, attn_heads: int = 2):
        if feature_spec.num_sparse < 1:
            raise ValueError("supernet needs at least one sparse feature")
        if cfg.dim_s % attn_heads != 0:
            raise ValueError(f"dim_s {cfg.dim_s} not divisible by {attn_heads} heads")
        self.cfg = cfg
        self.feature_spec = feature_spec
        self.seed = seed
        self.dp_balanced = dp_balanced
        self.attn_heads = attn_heads
        rng = np.random.default_rng(seed)
        D, Smax, ds = cfg.max_dense_dim, cfg.max_sparse_dim, cfg.dim_s
        self.params: dict[str, Tensor] = {}
        for f, vocab in enumerate(feature_spec.vocab_sizes):
            self._add(f"emb.{f}", O._uniform(rng, (vocab, ds), ds))
        self.block_weights = []
        for n in range(1, cfg.num_blocks + 1):
            din, nin = self.dense_in(n), self.sparse_in(n)
            blk = {}
            if "FC" in cfg.dense_ops:
                blk["FC"] = self._add_group(f"b{n}.fc", O.init_fc(rng, din, D))
            if "SG" in cfg.dense_ops:
                w = O.init_sg(rng, din, D)
                w["ln_g"], w["ln_b"] = O._ln_affine(D)
                blk["SG"] = self._add_group(f"b{n}.sg", w)
            if "SUM" in cfg.dense_ops:
                w = {}
                w["ln_g"], w["ln_b"] = O._ln_affine(D)
                blk["SUM"] = self._add_group(f"b{n}.sum", w)
            if "DP" in cfg.dense_ops:
                blk["DP"] = self._add_group(
                    f"b{n}.dp",
                    O.init_dp(rng, din, nin, D, ds, dp_balanced, interaction_width=D))
            if "EFC" in cfg.sparse_ops:
                blk["EFC"] = self._add_group(f"b{n}.efc", O.init_efc(rng, nin, Smax, ds))
            if "ATTN" in cfg.sparse_ops:
                blk["ATTN"] = self._add_group(f"b{n}.attn", O.init_attention(rng, ds))
            if cfg.allow_mergers:
                blk["D2S"] = self._add_group(f"b{n}.d2s", O.init_d2s(rng, D, ds))
                blk["S2D"] = self._add_group(f"b{n}.s2d", O.init_s2d(rng, ds, D))
            self.block_weights.append(blk)
        self.head = self._add_group("head", O.init_head(rng, D))

    def _add(self, name, tensor):
        self.params[name] = tensor
        return tensor

    def _add_group(self, prefix, group):
        for key, tensor in group.items():
            self._add(f"{prefix}.{key}", tensor)
        return group

    # fixed per-block input layout
    def dense_in(self, n: int) -> int:
        return self.feature_spec.num_dense + (n - 1) * self.cfg.max_dense_dim

    def sparse_in(self, n: int) -> int:
        return self.feature_spec.num_sparse + (n - 1) * (self.cfg.max_sparse_dim + K)

    def parameters(self):
        return self.params

    def checksum(self, exclude_prefixes=()) -> str:
        h = hashlib.sha256()
        for name, tensor in self.params.items():
            if any(name.startswith(p) for p in exclude_prefixes):
                continue
            h.update(name.encode())
            h.update(np.ascontiguousarray(tensor.data).tobytes())
        return h.hexdigest()

    def raw_sparse(self, ids: np.ndarray) -> Tensor:
        parts = [T.embedding_lookup(self.params[f"emb.{f}"], ids[:, f:f + 1])
                 for f in range(self.feature_spec.num_sparse)]
        return T.concat(1, parts)

    def validate(self, g: S.Genotype):
        errs = S.validate(g, self.cfg)
        if errs:
            raise GenotypeError("; ".join(errs))

    def forward(self, g: S.Genotype, batch: FeatureBatch) -> Tensor:
        """Masked evaluation of one genotype over the shared weights."""
        self.validate(g)
        cfg, fs = self.cfg, self.feature_spec
        D, Smax, ds = cfg.max_dense_dim, cfg.max_sparse_dim, cfg.dim_s
        B = batch.labels.shape[0]
        outputs = {0: (batch.dense, fs.num_dense,
                       self.raw_sparse(batch.sparse_ids),
                       np.ones(fs.num_sparse, dtype=bool))}
        for n in range(1, cfg.num_blocks + 1):
            gene = g.blocks[n - 1]
            blk = self.block_weights[n - 1]
            dparts, sparts, masks = [], [], []
            for src in range(n):
                d_t, _, s_t, s_m = outputs[src]
                if src in gene.connections:
                    dparts.append(d_t)
                    sparts.append(s_t)
                    masks.append(s_m)
                else:
                    dparts.append(T.constant(np.zeros(d_t.shape)))
                    sparts.append(T.constant(np.zeros(s_t.shape)))
                    masks.append(np.zeros(s_m.shape[0], dtype=bool))
            x_d = T.concat(1, dparts)
            x_s = T.concat(1, sparts)
            in_mask = np.concatenate(masks)
            n_active = int(in_mask.sum())

            dense_out = None
            for op, dim, _ in gene.dense:
                if op == "FC":
                    y = O.fc(x_d, blk["FC"], active=dim)
                elif op == "SG":
                    w = blk["SG"]
                    y0 = O.sigmoid_gating(x_d, x_d, w)
                    y = T.layer_norm(T.mask_axis(y0, -1, dim), w["ln_g"], w["ln_b"], active=dim)
                elif op == "SUM":
                    w = blk["SUM"]
                    xf = T.fit_axis(x_d, -1, D)
                    y = T.layer_norm(T.mask_axis(O.sum_merge(xf, xf), -1, dim),
                                     w["ln_g"], w["ln_b"], active=dim)
                else:  # DP
                    # the dense stack row exists iff the layout width is nonzero
                    y = O.dot_product(x_d if self.dense_in(n) > 0 else None, x_s, blk["DP"],
                                      balanced=self.dp_balanced, active=dim)
                dense_out = y if dense_out is None else T.add(dense_out, y)
            d_act = max(dim for _, dim, _ in gene.dense)

            sparse_out = None
            s_act = 0
            for op, dim, _ in gene.sparse:
                if op == "EFC":
                    y = O.efc(x_s, blk["EFC"], active=dim)
                    s_act = max(s_act, dim)
                else:  # ATTN
                    enc = O.attention(x_s, blk["ATTN"], self.attn_heads, key_mask=in_mask)
                    count = min(dim, n_active)
                    sel = T.gather_axis1(enc, np.flatnonzero(in_mask)[:count])
                    y = T.fit_axis(sel, 1, Smax)
                    s_act = max(s_act, count)
                sparse_out = y if sparse_out is None else T.add(sparse_out, y)

            # both mergers consume the pre-merger branch outputs
            dense_branch, sparse_branch = dense_out, sparse_out
            if gene.s2d:
                v = T.mask_axis(O.sparse_to_dense(sparse_branch, blk["S2D"]), -1, d_act)
                dense_out = T.add(dense_out, v)
            out_mask = np.zeros(Smax + K, dtype=bool)
            out_mask[:s_act] = True
            if gene.d2s:
                extra = O.dense_to_sparse(dense_branch, blk["D2S"], ds)
                sparse_out = T.concat(1, [sparse_out, extra])
                out_mask[Smax:] = True
            else:
                sparse_out = T.concat(1, [sparse_out, T.constant(np.zeros((B, K, ds)))])
            outputs[n] = (dense_out, d_act, sparse_out, out_mask)
        logits = O.fc_linear(outputs[cfg.num_blocks][0], self.head)
        return T.reshape(logits, (B,))


def build(cfg: S.SpaceConfig, feature_spec: FeatureSpec, seed: int = 0, **kwargs) -> Supernet:
    return Supernet(cfg, feature_spec, seed=seed, **kwargs)


# ---------------------------------------------------------------------------
# genotype shape plans (shared by extraction, FLOPs, and cost models)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OpPlan:
    name: str
    dim: int
    bits: int
    spec: O.OpSpec
    balanced: bool = False


@dataclass(frozen=True)
class BlockPlan:
    index: int
    sources: tuple           # selected sources, ascending
    dense_in: int            # compact dense input width
    sparse_in: int           # compact sparse embedding count
    dense_ops: tuple
    sparse_ops: tuple
    d2s: OpPlan | None
    s2d: OpPlan | None
    dense_out: int
    sparse_branch_out: int   # before the d2s slots
    sparse_out: int


@dataclass(frozen=True)
class SubnetPlan:
    blocks: tuple            # BlockPlan for used blocks, ascending
    head: OpPlan
    genotype: S.Genotype

    def all_ops(self):
        for blk in self.blocks:
            yield from blk.dense_ops
            yield from blk.sparse_ops
            if blk.d2s:
                yield blk.d2s
            if blk.s2d:
                yield blk.s2d
        yield self.head


def subnet_plan(g: S.Genotype, cfg: S.SpaceConfig, fs: FeatureSpec,
                dp_balanced: bool = True, attn_heads: int = 2) -> SubnetPlan:
    """Compact shapes a genotype induces once extracted from the supernet.

    Blocks marked unused on the genotype are skipped; accounting honors the
    markers as given (run ``prune_unreachable`` first to set them).
    """
    ds = cfg.dim_s
    act_d = {0: fs.num_dense}
    act_s = {0: fs.num_sparse}
    blocks = []
    for n in g.used_blocks():
        gene = g.blocks[n - 1]
        srcs = tuple(src for src in gene.connections)
        if any(s not in act_d for s in srcs):
            raise GenotypeError(f"block {n} references a block marked unused")
        din = sum(act_d[s] for s in srcs)
        sin = sum(act_s[s] for s in srcs)
        dense_ops, sparse_ops = [], []
        for op, dim, bits in gene.dense:
            if op == "FC":
                spec = O.OpSpec("FC", dim_in=din, out_dim=dim)
            elif op == "SG":
                spec = O.OpSpec("SG", dim_in=din, out_dim=dim)
            elif op == "SUM":
                spec = O.OpSpec("SUM", out_dim=dim)
            else:
                layout_dense = fs.num_dense + (n - 1) * cfg.max_dense_dim > 0
                spec = O.OpSpec("DP", dim_in=din, n_in=sin, out_dim=dim, dim_s=ds,
                                interaction_width=cfg.max_dense_dim if dp_balanced else None,
                                dense_row=layout_dense)
            dense_ops.append(OpPlan(op, dim, bits, spec, balanced=dp_balanced and op == "DP"))
        d_out = max(dim for _, dim, _ in gene.dense)
        s_branch = 0
        for op, dim, bits in gene.sparse:
            if op == "EFC":
                spec = O.OpSpec("EFC", n_in=sin, out_dim=dim, dim_s=ds)
                s_branch = max(s_branch, dim)
            else:
                spec = O.OpSpec("ATTN", n_in=sin, out_dim=min(dim, sin), dim_s=ds,
                                heads=attn_heads)
                s_branch = max(s_branch, min(dim, sin))
            sparse_ops.append(OpPlan(op, dim, bits, spec))
        d2s = s2d = None
        s_out = s_branch
        if gene.d2s:
            d2s = OpPlan("D2S", K, gene.dense[0][2],
                         O.OpSpec("D2S", dim_in=d_out, dim_s=ds))
            s_out += K
        if gene.s2d:
            s2d = OpPlan("S2D", d_out, gene.dense[0][2],
                         O.OpSpec("S2D", n_in=s_branch, out_dim=d_out, dim_s=ds))
        act_d[n] = d_out
        act_s[n] = s_out
        blocks.append(BlockPlan(n, srcs, din, sin, tuple(dense_ops), tuple(sparse_ops),
                                d2s, s2d, d_out, s_branch, s_out))
    head = OpPlan("HEAD", 1, 8, O.OpSpec("HEAD", dim_in=act_d[cfg.num_blocks]))
    return SubnetPlan(blocks=tuple(blocks), head=head, genotype=g)


# ---------------------------------------------------------------------------
# standalone subnet
# ---------------------------------------------------------------------------

class Subnet:
    """A standalone model carved out of the supernet (or built fresh)."""

    def __init__(self, plan: SubnetPlan, cfg: S.SpaceConfig, fs: FeatureSpec,
                 params: dict, gathers: dict, attn_heads: int):
        self.plan = plan
        self.cfg = cfg
        self.feature_spec = fs
        self.params = params            # flat name -> Tensor
        self.gathers = gathers          # constant position-map matrices per block op
        self.attn_heads = attn_heads

    def parameters(self):
        return self.params

    def head_param_names(self):
        return tuple(name for name in self.params if name.startswith("head."))

    def checksum(self, exclude_prefixes=()) -> str:
        h = hashlib.sha256()
        for name, tensor in self.params.items():
            if any(name.startswith(p) for p in exclude_prefixes):
                continue
            h.update(name.encode())
            h.update(np.ascontiguousarray(tensor.data).tobytes())
        return h.hexdigest()

    def _group(self, prefix, override=None):
        out = {}
        plen = len(prefix) + 1
        for name, tensor in self.params.items():
            if name.startswith(prefix + "."):
                key = name[plen:]
                out[key] = override.get(name, tensor) if override else tensor
        return out

    def raw_sparse(self, ids, override=None):
        parts = []
        for f in range(self.feature_spec.num_sparse):
            name = f"emb.{f}"
            table = override.get(name, self.params[name]) if override else self.params[name]
            parts.append(T.embedding_lookup(table, ids[:, f:f + 1]))
        return T.concat(1, parts)

    def forward(self, batch: FeatureBatch, param_override: dict | None = None) -> Tensor:
        ov = param_override
        ds = self.cfg.dim_s
        B = batch.labels.shape[0]
        outputs = {0: (batch.dense, self.raw_sparse(batch.sparse_ids, ov))}
        for blk in self.plan.blocks:
            n = blk.index
            x_d = T.concat(1, [outputs[s][0] for s in blk.sources])
            x_s = T.concat(1, [outputs[s][1] for s in blk.sources])
            dense_out = None
            for op in blk.dense_ops:
                w = self._group(f"b{n}.{op.name.lower()}", ov)
                if op.name == "FC":
                    y = O.fc(x_d, w)
                elif op.name == "SG":
                    xp = T.matmul(x_d, self.gathers[(n, "SG")])
                    y = T.layer_norm(O.sigmoid_gating(x_d, xp, w), w["ln_g"], w["ln_b"])
                elif op.name == "SUM":
                    xp = T.matmul(x_d, self.gathers[(n, "SUM")])
                    y = T.layer_norm(O.sum_merge(xp, xp), w["ln_g"], w["ln_b"])
                else:
                    y = O.dot_product(x_d if "proj_w" in w else None, x_s, w,
                                      balanced=op.balanced)
                y = T.fit_axis(y, -1, blk.dense_out)
                dense_out = y if dense_out is None else T.add(dense_out, y)
            sparse_out = None
            for op in blk.sparse_ops:
                w = self._group(f"b{n}.{op.name.lower()}", ov)
                if op.name == "EFC":
                    y = O.efc(x_s, w)
                else:
                    enc = O.attention(x_s, w, self.attn_heads)
                    y = T.slice_axis(enc, 1, 0, op.spec.out_dim)
                y = T.fit_axis(y, 1, blk.sparse_branch_out)
                sparse_out = y if sparse_out is None else T.add(sparse_out, y)
            dense_branch, sparse_branch = dense_out, sparse_out
            if blk.s2d:
                v = O.sparse_to_dense(sparse_branch, self._group(f"b{n}.s2d", ov))
                dense_out = T.add(dense_out, T.fit_axis(v, -1, blk.dense_out))
            if blk.d2s:
                extra = O.dense_to_sparse(dense_branch, self._group(f"b{n}.d2s", ov), ds)
                sparse_out = T.concat(1, [sparse_out, extra])
            outputs[n] = (dense_out, sparse_out)
        last = self.plan.blocks[-1].index if self.plan.blocks else 0
        logits = O.fc_linear(outputs[last][0], self._group("head", ov))
        return T.reshape(logits, (B,))

    def flops_per_sample(self) -> float:
        return sum(O.flops_count(op.spec, balanced=op.balanced) for op in self.plan.all_ops())

    def op_param_count(self, with_bias: bool = True) -> int:
        return sum(O.param_count(op.spec, balanced=op.balanced, with_bias=with_bias)
                   for op in self.plan.all_ops())


def _dense_positions(net: Supernet, srcs, act_d):
    """Supernet dense-input positions of each compact input element."""
    fs, D = net.feature_spec, net.cfg.max_dense_dim
    pos = []
    for src in srcs:
        base = 0 if src == 0 else fs.num_dense + (src - 1) * D
        width = act_d[src]
        pos.extend(range(base, base + width))
    return np.asarray(pos, dtype=np.int64)


def _sparse_positions(net: Supernet, srcs, act_masks):
    fs = net.feature_spec
    stride = net.cfg.max_sparse_dim + K
    pos = []
    for src in srcs:
        base = 0 if src == 0 else fs.num_sparse + (src - 1) * stride
        pos.extend(base + p for p in np.flatnonzero(act_masks[src]))
    return np.asarray(pos, dtype=np.int64)


def _position_matrix(positions, width):
    """0/1 matrix mapping compact elements onto layout positions < width."""
    P = np.zeros((positions.shape[0], width))
    for i, p in enumerate(positions):
        if p < width:
            P[i, p] = 1.0
    return T.constant(P)


def extract_subnet(net: Supernet, g: S.Genotype) -> Subnet:
    """Copy exactly the weight slices used by ``g`` into a standalone model."""
    net.validate(g)
    cfg, fs = net.cfg, net.feature_spec
    plan = subnet_plan(g, cfg, fs, dp_balanced=net.dp_balanced, attn_heads=net.attn_heads)
    params: dict[str, Tensor] = {}
    gathers: dict = {}

    def put(name, array):
        params[name] = Tensor(np.array(array, dtype=np.float64), requires_grad=True)

    for f in range(fs.num_sparse):
        put(f"emb.{f}", net.params[f"emb.{f}"].data)

    act_d = {0: fs.num_dense}
    act_masks = {0: np.ones(fs.num_sparse, dtype=bool)}
    for blk in plan.blocks:
        n = blk.index
        gene = plan.genotype.blocks[n - 1]
        drows = _dense_positions(net, blk.sources, act_d)
        srows = _sparse_positions(net, blk.sources, act_masks)
        sup = net.block_weights[n - 1]
        for op in blk.dense_ops:
            dim = op.dim
            if op.name == "FC":
                w = sup["FC"]
                put(f"b{n}.fc.w", w["w"].data[drows][:, :dim])
                put(f"b{n}.fc.b", w["b"].data[:dim])
                put(f"b{n}.fc.ln_g", w["ln_g"].data[:dim])
                put(f"b{n}.fc.ln_b", w["ln_b"].data[:dim])
            elif op.name == "SG":
                w = sup["SG"]
                put(f"b{n}.sg.w", w["w"].data[drows][:, :dim])
                put(f"b{n}.sg.b", w["b"].data[:dim])
                put(f"b{n}.sg.ln_g", w["ln_g"].data[:dim])
                put(f"b{n}.sg.ln_b", w["ln_b"].data[:dim])
                gathers[(n, "SG")] = _position_matrix(drows, dim)
            elif op.name == "SUM":
                w = sup["SUM"]
                put(f"b{n}.sum.ln_g", w["ln_g"].data[:dim])
                put(f"b{n}.sum.ln_b", w["ln_b"].data[:dim])
                gathers[(n, "SUM")] = _position_matrix(drows, dim)
            else:
                w = sup["DP"]
                has_dense = net.dense_in(n) > 0
                if has_dense:
                    put(f"b{n}.dp.proj_w", w["proj_w"].data[drows])
                    put(f"b{n}.dp.proj_b", w["proj_b"].data)
                if net.dp_balanced:
                    put(f"b{n}.dp.bal_w", w["bal_w"].data[srows])
                    put(f"b{n}.dp.bal_b", w["bal_b"].data)
                    put(f"b{n}.dp.out_w", w["out_w"].data[:, :dim])
                else:
                    # map compact interaction pairs onto supernet pair rows
                    n_sup = net.sparse_in(n) + (1 if has_dense else 0)
                    stack_map = ([0] if has_dense else []) + \
                        [int(p) + (1 if has_dense else 0) for p in srows]
                    pair_index = np.zeros((n_sup, n_sup), dtype=np.int64)
                    iu = np.triu_indices(n_sup, k=1)
                    pair_index[iu] = np.arange(iu[0].shape[0])
                    n_c = len(stack_map)
                    rows = []
                    for a in range(n_c):
                        for b in range(a + 1, n_c):
                            sa, sb = stack_map[a], stack_map[b]
                            rows.append(pair_index[min(sa, sb), max(sa, sb)])
                    put(f"b{n}.dp.out_w", w["out_w"].data[np.asarray(rows)][:, :dim])
                put(f"b{n}.dp.out_b", w["out_b"].data[:dim])
                put(f"b{n}.dp.ln_g", w["ln_g"].data[:dim])
                put(f"b{n}.dp.ln_b", w["ln_b"].data[:dim])
        for op in blk.sparse_ops:
            if op.name == "EFC":
                w = sup["EFC"]
                put(f"b{n}.efc.w", w["w"].data[srows][:, :op.dim])
                put(f"b{n}.efc.b", w["b"].data[:op.dim])
                put(f"b{n}.efc.ln_g", w["ln_g"].data)
                put(f"b{n}.efc.ln_b", w["ln_b"].data)
            else:
                for key, tensor in sup["ATTN"].items():
                    put(f"b{n}.attn.{key}", tensor.data)
        if blk.d2s:
            put(f"b{n}.d2s.w", sup["D2S"]["w"].data[:blk.dense_out])
            put(f"b{n}.d2s.b", sup["D2S"]["b"].data)
        if blk.s2d:
            put(f"b{n}.s2d.w", sup["S2D"]["w"].data[:, :blk.dense_out])
            put(f"b{n}.s2d.b", sup["S2D"]["b"].data[:blk.dense_out])
        act_d[n] = blk.dense_out
        # supernet-side mask for position bookkeeping of later blocks
        sup_mask = np.zeros(cfg.max_sparse_dim + K, dtype=bool)
        sup_mask[:blk.sparse_branch_out] = True
        if blk.d2s:
            sup_mask[cfg.max_sparse_dim:] = True
        act_masks[n] = sup_mask
    last = plan.blocks[-1].index if plan.blocks else 0
    put("head.w", net.head["w"].data[:act_d[last]])
    put("head.b", net.head["b"].data)
    return Subnet(plan, cfg, fs, params, gathers, net.attn_heads)


def finetune_head(model: Subnet, dataset, steps: int = 500, lr: float = 0.02,
                  batch_size: int = 256, seed: int = 0) -> Subnet:
    """Adagrad updates on the final FC only; all other weights untouched."""
    from .training import adagrad_step  # local import to avoid a cycle
    from .data import iter_batches
    head_names = model.head_param_names()
    state = {name: np.zeros_like(model.params[name].data) for name in head_names}
    done = 0
    epoch = 0
    while done < steps:
        for batch in iter_batches(dataset, batch_size, shuffle_seed=seed + epoch):
            if done >= steps:
                break
            with T.Tape() as tape:
                for name in head_names:
                    tape.watch(model.params[name])
                loss = T.bce_with_logits(model.forward(batch), batch.labels)
            T.backward(loss, tape)
            for name in head_names:
                t = model.params[name]
                adagrad_step(t, t.grad, state[name], lr)
            done += 1
        epoch += 1
    return model


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_supernet(net: Supernet, path):
    meta = {
        "cfg": {
            "num_blocks": net.cfg.num_blocks,
            "dense_ops": list(net.cfg.dense_ops),
            "sparse_ops": list(net.cfg.sparse_ops),
            "dense_dims": list(net.cfg.dense_dims),
            "sparse_dims": list(net.cfg.sparse_dims),
            "allow_mergers": net.cfg.allow_mergers,
            "weight_bits_choices": list(net.cfg.weight_bits_choices),
            "dim_s": net.cfg.dim_s,
        },
        "feature_spec": {"num_dense": net.feature_spec.num_dense,
                         "vocab_sizes": list(net.feature_spec.vocab_sizes)},
        "seed": net.seed,
        "dp_balanced": net.dp_balanced,
        "attn_heads": net.attn_heads,
    }
    storage.save_blob(path, "supernet", meta,
                      {name: t.data for name, t in net.params.items()})


def load_supernet(path) -> Supernet:
    meta, arrays = storage.load_blob(path, expect_kind="supernet")
    cfg_meta = dict(meta["cfg"])
    for key in ("dense_ops", "sparse_ops", "dense_dims", "sparse_dims", "weight_bits_choices"):
        cfg_meta[key] = tuple(cfg_meta[key])
    cfg = S.SpaceConfig(**cfg_meta)
    fs = FeatureSpec(meta["feature_spec"]["num_dense"],
                     tuple(meta["feature_spec"]["vocab_sizes"]))
    net = Supernet(cfg, fs, seed=meta["seed"], dp_balanced=meta["dp_balanced"],
                   attn_heads=meta["attn_heads"])
    for name, arr in arrays.items():
        if net.params[name].data.shape != arr.shape:
            raise ValueError(f"checkpoint shape mismatch for {name}")
        net.params[name].data = arr
    return net
