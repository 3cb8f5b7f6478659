"""Parametric ReRAM-crossbar cost model and quantization co-search.

Mapping rules: matrix-vector products (FC, EFC, the mergers, the head,
attention projections, and the projections inside the Dot-Product) map
onto crossbars; pairwise interaction products, factorization-machine
pooling, softmax, and gating arithmetic run on a digital unit.

Crossbar accounting per weight matrix [fan_in x fan_out]:
  cells_per_weight = ceil(weight_bits / cell_bits)
  row_tiles  = ceil(fan_in / rows),  col_tiles = ceil(fan_out * cpw / cols)
  input_bit_passes = ceil(act_bits / dac_bits)        (bit-serial input)
Tiles operate in parallel; sequential cost is bit passes times the number
of input vectors the matrix processes per sample.  Digital MAC counts are
the operator FLOPs formulas divided by two.

All constants are configuration, not calibrated silicon numbers; the
model is meant for ratio and monotonicity studies, with documented units
(ns, pJ, um^2).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import space as S
from .data import FeatureSpec
from .operators import OpSpec, balanced_projection_count, flops_count, param_count
from .supernet import SubnetPlan, Supernet, extract_subnet, subnet_plan
from .space import D2S_EMBEDDINGS as K_D2S


@dataclass(frozen=True)
class HwConfig:
    rows: int = 128
    cols: int = 128
    cell_bits: int = 2
    dac_bits: int = 1
    adc_bits: int = 8
    cycle_ns: float = 100.0          # one crossbar pass
    xbar_pass_pj: float = 20.0       # per active crossbar per pass
    xbar_area_um2: float = 625.0
    ns_per_mac: float = 0.5
    pj_per_mac: float = 0.1
    digital_area_um2: float = 50_000.0
    buffer_pj_per_elem: float = 0.01

    def __post_init__(self):
        values = asdict(self)
        if any(v <= 0 for v in values.values()):
            raise ValueError("all hardware constants must be positive")
        if self.cell_bits > 8:
            raise ValueError("cell_bits must be <= 8")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "HwConfig":
        return HwConfig(**json.loads(text))


@dataclass(frozen=True)
class QuantSpec:
    weight_bits: int = 8
    act_bits: int = 8

    def __post_init__(self):
        if not 2 <= self.weight_bits <= 16 or not 2 <= self.act_bits <= 16:
            raise ValueError("quantization bits must lie in [2, 16]")


def quantize(w: np.ndarray, bits: int):
    """Symmetric uniform quantization; returns (dequantized values, scale)."""
    if not 2 <= bits <= 16:
        raise ValueError("bits must lie in [2, 16]")
    w = np.asarray(w, dtype=np.float64)
    peak = float(np.max(np.abs(w))) if w.size else 0.0
    if peak == 0.0:
        return w.copy(), 0.0
    scale = peak / (2 ** (bits - 1) - 1)
    return np.round(w / scale) * scale, scale


@dataclass(frozen=True)
class CrossbarTile:
    label: str
    fan_in: int
    fan_out: int
    row_tiles: int
    col_tiles: int
    crossbar_count: int
    input_bit_passes: int
    vec_ops: int                     # input vectors per sample


@dataclass(frozen=True)
class TilePlan:
    op_label: str
    tiles: tuple
    digital_macs: float
    buffer_elems: float


def _tile(label, fan_in, fan_out, vec_ops, q: QuantSpec, hw: HwConfig):
    if fan_in == 0 or fan_out == 0:
        return None
    cpw = math.ceil(q.weight_bits / hw.cell_bits)
    row_tiles = math.ceil(fan_in / hw.rows)
    col_tiles = math.ceil(fan_out * cpw / hw.cols)
    return CrossbarTile(label, fan_in, fan_out, row_tiles, col_tiles,
                        row_tiles * col_tiles, math.ceil(q.act_bits / hw.dac_bits),
                        vec_ops)


def map_to_crossbars(spec: OpSpec, q: QuantSpec, hw: HwConfig,
                     balanced: bool = False) -> TilePlan:
    """Tile one operator onto crossbars plus a digital MAC count."""
    k = spec.kind
    mats, digital = [], 0.0
    if k in ("FC", "HEAD"):
        mats.append(("w", spec.dim_in, spec.out_dim if k == "FC" else 1, 1))
    elif k == "SG":
        mats.append(("gate", spec.dim_in, spec.out_dim, 1))
        digital = 3.0 * spec.out_dim             # sigmoid (5) + multiply (1), /2
    elif k == "SUM":
        digital = spec.out_dim / 2.0
    elif k == "EFC":
        mats.append(("w", spec.n_in, spec.out_dim, spec.dim_s))
    elif k == "ATTN":
        n, ds = spec.n_in, spec.dim_s
        for name in ("wq", "wk", "wv", "wo"):
            mats.append((name, ds, ds, n))
        mats.append(("ffn1", ds, 2 * ds, n))
        mats.append(("ffn2", 2 * ds, ds, n))
        digital = (4.0 * n * n * ds + 5.0 * spec.heads * n * n) / 2.0
    elif k == "DP":
        has_dense = spec._dp_has_dense()
        rows = spec.n_in
        if has_dense:
            mats.append(("proj", spec.dim_in, spec.dim_s, 1))
        if balanced:
            base = spec.interaction_width or spec.out_dim
            m = balanced_projection_count(base)
            mats.append(("bal", spec.n_in, m, spec.dim_s))
            rows = m
            slots = base
        rows += 1 if has_dense else 0
        pairs = rows * (rows - 1) // 2
        digital = float(pairs * spec.dim_s)
        mats.append(("out", (slots if balanced else pairs), spec.out_dim, 1))
    elif k == "D2S":
        mats.append(("w", spec.dim_in, K_D2S * spec.dim_s, 1))
    elif k == "S2D":
        mats.append(("w", spec.dim_s, spec.out_dim, 1))
        digital = 2.0 * spec.n_in * spec.dim_s   # FM pooling, FLOPs / 2
    else:
        raise ValueError(f"unknown operator kind {k!r}")
    tiles = []
    buffer_elems = 0.0
    for label, fan_in, fan_out, vec in mats:
        tile = _tile(label, fan_in, fan_out, vec, q, hw)
        if tile is not None:
            tiles.append(tile)
            buffer_elems += (fan_in + fan_out) * vec
    return TilePlan(k, tuple(tiles), digital, buffer_elems)


@dataclass
class CostReport:
    latency_ns: float
    energy_pj: float
    area_um2: float
    mflops: float
    op_params: int

    def to_json_obj(self):
        return {"latency_ns": self.latency_ns, "energy_pj": self.energy_pj,
                "area_um2": self.area_um2, "mflops": self.mflops,
                "op_params": self.op_params}


def _plan_latency(plan: TilePlan, hw: HwConfig) -> float:
    xbar = sum(t.input_bit_passes * t.vec_ops for t in plan.tiles) * hw.cycle_ns
    return xbar + plan.digital_macs * hw.ns_per_mac


def _plan_energy(plan: TilePlan, hw: HwConfig) -> float:
    xbar = sum(t.crossbar_count * t.input_bit_passes * t.vec_ops for t in plan.tiles)
    return (xbar * hw.xbar_pass_pj + plan.digital_macs * hw.pj_per_mac
            + plan.buffer_elems * hw.buffer_pj_per_elem)


def _plan_area(plan: TilePlan, hw: HwConfig) -> float:
    return sum(t.crossbar_count for t in plan.tiles) * hw.xbar_area_um2


def cost(g: S.Genotype, cfg: S.SpaceConfig, fs: FeatureSpec, hw: HwConfig,
         act_bits: int = 8, dp_balanced: bool = True, attn_heads: int = 2) -> CostReport:
    """Latency/energy/area of one genotype under the mapping rules.

    Blocks on a dependency path serialize; independent blocks overlap, so
    block-level latency follows the longest path through the connection
    DAG.  Operators inside a block run on disjoint arrays concurrently;
    mergers serialize after the branch they consume.  Energy and area are
    additive.  Per-operator weight bits come from the genotype; activation
    bits are a global setting.
    """
    plan = subnet_plan(g, cfg, fs, dp_balanced=dp_balanced, attn_heads=attn_heads)
    energy = area = 0.0
    done = {0: 0.0}
    for blk in plan.blocks:
        branch_lat = 0.0
        merger_lat = 0.0
        for op in list(blk.dense_ops) + list(blk.sparse_ops):
            tp = map_to_crossbars(op.spec, QuantSpec(op.bits, act_bits), hw,
                                  balanced=op.balanced)
            branch_lat = max(branch_lat, _plan_latency(tp, hw))
            energy += _plan_energy(tp, hw)
            area += _plan_area(tp, hw)
        for op in (blk.d2s, blk.s2d):
            if op is None:
                continue
            tp = map_to_crossbars(op.spec, QuantSpec(op.bits, act_bits), hw,
                                  balanced=False)
            merger_lat = max(merger_lat, _plan_latency(tp, hw))
            energy += _plan_energy(tp, hw)
            area += _plan_area(tp, hw)
        ready = max(done.get(src, 0.0) for src in blk.sources)
        done[blk.index] = ready + branch_lat + merger_lat
    head_plan = map_to_crossbars(plan.head.spec, QuantSpec(plan.head.bits, act_bits), hw)
    latency = done[plan.blocks[-1].index if plan.blocks else 0] + _plan_latency(head_plan, hw)
    energy += _plan_energy(head_plan, hw)
    area += _plan_area(head_plan, hw) + hw.digital_area_um2
    total_flops = sum(flops_count(op.spec, balanced=op.balanced) for op in plan.all_ops())
    total_params = sum(param_count(op.spec, balanced=op.balanced) for op in plan.all_ops())
    return CostReport(latency_ns=latency, energy_pj=energy, area_um2=area,
                      mflops=total_flops / 1e6, op_params=total_params)


# ---------------------------------------------------------------------------
# quantized evaluation and co-search
# ---------------------------------------------------------------------------

QUANTIZABLE_SUFFIXES = (".fc.w", ".sg.w", ".efc.w", ".dp.proj_w", ".dp.bal_w",
                        ".dp.out_w", ".d2s.w", ".s2d.w", ".attn.wq", ".attn.wk",
                        ".attn.wv", ".attn.wo", ".attn.ffn1_w", ".attn.ffn2_w",
                        "head.w")


def quantized_val_loss(net: Supernet, g: S.Genotype, val, batch_size: int = 1024) -> float:
    """Validation log loss with each operator's weights fake-quantized to its
    genotype bit-width (dequantized values, evaluation only)."""
    from .metrics import log_loss
    from .training import predict
    sub = extract_subnet(net, g)
    bits_of = {}
    for n, blk in enumerate(g.blocks, start=1):
        for op, _, bits in blk.dense:
            bits_of[f"b{n}.{op.lower()}."] = bits
        for op, _, bits in blk.sparse:
            bits_of[f"b{n}.{op.lower()}."] = bits
        if blk.dense:
            bits_of[f"b{n}.d2s."] = blk.dense[0][2]
            bits_of[f"b{n}.s2d."] = blk.dense[0][2]
    for name, tensor in sub.params.items():
        if not name.endswith(QUANTIZABLE_SUFFIXES):
            continue
        bits = 8
        for prefix, b in bits_of.items():
            if name.startswith(prefix):
                bits = b
                break
        tensor.data, _ = quantize(tensor.data, bits)
    return log_loss(predict(sub, val, batch_size), val.labels)


def pareto_front(points):
    """Indices of non-dominated rows of (loss, latency, energy) tuples."""
    pts = np.asarray(points, dtype=np.float64)
    keep = []
    for i, p in enumerate(pts):
        dominated = np.any(np.all(pts <= p, axis=1) & np.any(pts < p, axis=1))
        if not dominated:
            keep.append(i)
    return keep


def cosearch(net: Supernet, space: S.SpaceConfig, val, evo_cfg, hw: HwConfig,
             alpha: float = 1.0, beta: float = 0.2, act_bits: int = 8,
             batch_size: int = 1024, workers: int = 1):
    """Evolution with fitness alpha * quantized-val-loss + beta * latency ratio.

    Returns (history, annotations, pareto_indices) where annotations map
    record_id -> {loss, latency_ns, energy_pj}.
    """
    from .evolution import evolve
    ref = cost(S.full_genotype(space), space, net.feature_spec, hw,
               act_bits=act_bits, dp_balanced=net.dp_balanced,
               attn_heads=net.attn_heads).latency_ns
    cache = {}

    def measure(g):
        key = S.serialize(g)
        if key not in cache:
            loss = (quantized_val_loss(net, g, val, batch_size) if alpha != 0.0 else 0.0)
            c = cost(g, space, net.feature_spec, hw, act_bits=act_bits,
                     dp_balanced=net.dp_balanced, attn_heads=net.attn_heads)
            cache[key] = (loss, c)
        return cache[key]

    def fitness(g):
        loss, c = measure(g)
        return alpha * loss + beta * (c.latency_ns / ref)

    history = evolve(fitness, evo_cfg, space, workers=workers)
    annotations = {}
    points = []
    for rec in history:
        loss, c = measure(rec.genotype)
        annotations[rec.record_id] = {"loss": loss, "latency_ns": c.latency_ns,
                                      "energy_pj": c.energy_pj}
        points.append((loss, c.latency_ns, c.energy_pj))
    pareto = pareto_front(points)
    return history, annotations, pareto
