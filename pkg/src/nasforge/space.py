"""Genotype space for choice-block recommender architectures.

A genotype is a stack of N choice blocks.  Each block selects a nonempty
subset of connection sources (0 = raw features, j = block j), nonempty
dense and sparse operator subsets with a per-operator output dimension and
weight bit-width, and two independent merger flags.  Connection source 0
carries both the raw dense and raw sparse features.

Bit-width genes are carried by every genotype but only matter when the
hardware co-design evaluation is enabled; plain quality search ignores
them (default 8).
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, replace

DENSE_OP_NAMES = ("FC", "SG", "SUM", "DP")
SPARSE_OP_NAMES = ("EFC", "ATTN")

# Embeddings appended to a block's sparse output by the dense-to-sparse merger.
D2S_EMBEDDINGS = 2


class ParseError(ValueError):
    """Raised when genotype text cannot be decoded."""


@dataclass(frozen=True)
class SpaceConfig:
    num_blocks: int = 7
    dense_ops: tuple = DENSE_OP_NAMES
    sparse_ops: tuple = SPARSE_OP_NAMES
    dense_dims: tuple = (16, 32, 64, 128, 256, 512, 768, 1024)
    sparse_dims: tuple = (16, 32, 48, 64)
    allow_mergers: bool = True
    weight_bits_choices: tuple = (4, 8)
    dim_s: int = 16

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be positive")
        if not self.dense_ops or not self.sparse_ops:
            raise ValueError("dense_ops and sparse_ops must be nonempty")
        for op in self.dense_ops:
            if op not in DENSE_OP_NAMES:
                raise ValueError(f"unknown dense operator {op!r}")
        for op in self.sparse_ops:
            if op not in SPARSE_OP_NAMES:
                raise ValueError(f"unknown sparse operator {op!r}")
        for dims in (self.dense_dims, self.sparse_dims):
            if not dims or any(b <= a for a, b in zip(dims, dims[1:])):
                raise ValueError("dimension lists must be strictly increasing and nonempty")
        if any(b < 2 or b > 16 for b in self.weight_bits_choices):
            raise ValueError("weight bit choices must lie in [2, 16]")

    @property
    def max_dense_dim(self) -> int:
        return max(self.dense_dims)

    @property
    def max_sparse_dim(self) -> int:
        return max(self.sparse_dims)


def full_space(num_blocks: int = 7, **overrides) -> SpaceConfig:
    """All operators and mergers enabled (the aggressive preset)."""
    return SpaceConfig(num_blocks=num_blocks, **overrides)


def small_space(num_blocks: int = 7, **overrides) -> SpaceConfig:
    """FC + Dot-Product dense, EFC sparse; connectivity unrestricted."""
    overrides.setdefault("dense_ops", ("FC", "DP"))
    overrides.setdefault("sparse_ops", ("EFC",))
    return SpaceConfig(num_blocks=num_blocks, **overrides)


@dataclass(frozen=True)
class BlockGene:
    connections: tuple            # sorted source ids; 0 = raw
    dense: tuple                  # ((op, dim, bits), ...) in canonical op order
    sparse: tuple
    d2s: bool
    s2d: bool

    def dense_ops(self):
        return tuple(op for op, _, _ in self.dense)

    def sparse_ops(self):
        return tuple(op for op, _, _ in self.sparse)

    def dense_dim_of(self, op):
        return dict((o, d) for o, d, _ in self.dense)[op]

    def sparse_dim_of(self, op):
        return dict((o, d) for o, d, _ in self.sparse)[op]


@dataclass(frozen=True)
class Genotype:
    blocks: tuple
    unused: tuple = ()            # 1-based block ids marked by reachability pruning

    @property
    def num_blocks(self):
        return len(self.blocks)

    def used_blocks(self):
        return tuple(i for i in range(1, self.num_blocks + 1) if i not in self.unused)


def _canonical_ops(entries, op_order):
    order = {op: i for i, op in enumerate(op_order)}
    return tuple(sorted(entries, key=lambda e: order[e[0]]))


def make_block(connections, dense, sparse, d2s=False, s2d=False) -> BlockGene:
    return BlockGene(
        connections=tuple(sorted(set(int(c) for c in connections))),
        dense=_canonical_ops(tuple((o, int(d), int(b)) for o, d, b in dense), DENSE_OP_NAMES),
        sparse=_canonical_ops(tuple((o, int(d), int(b)) for o, d, b in sparse), SPARSE_OP_NAMES),
        d2s=bool(d2s),
        s2d=bool(s2d),
    )


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def validate(g: Genotype, cfg: SpaceConfig):
    """Return a list of violation strings; empty means the genotype is valid."""
    errs = []
    if g.num_blocks != cfg.num_blocks:
        errs.append(f"expected {cfg.num_blocks} blocks, got {g.num_blocks}")
        return errs
    for n, blk in enumerate(g.blocks, start=1):
        where = f"block {n}"
        if not blk.connections:
            errs.append(f"{where}: connection set empty")
        for src in blk.connections:
            if not 0 <= src < n:
                errs.append(f"{where}: forward connection to source {src}")
        if n == 1 and blk.connections != (0,):
            errs.append(f"{where}: first block must connect to raw inputs only")
        if not blk.dense:
            errs.append(f"{where}: dense branch empty")
        if not blk.sparse:
            errs.append(f"{where}: sparse branch empty")
        for label, entries, ops, dims in (
            ("dense", blk.dense, cfg.dense_ops, cfg.dense_dims),
            ("sparse", blk.sparse, cfg.sparse_ops, cfg.sparse_dims),
        ):
            seen = set()
            for op, dim, bits in entries:
                if op in seen:
                    errs.append(f"{where}: duplicate {label} operator {op}")
                seen.add(op)
                if op not in ops:
                    errs.append(f"{where}: {label} operator {op} outside the space")
                if dim not in dims:
                    errs.append(f"{where}: {label} dim {dim} of {op} not in {dims}")
                if bits not in cfg.weight_bits_choices:
                    errs.append(f"{where}: bits {bits} of {op} not in {cfg.weight_bits_choices}")
        if not cfg.allow_mergers and (blk.d2s or blk.s2d):
            errs.append(f"{where}: mergers disabled in this space")
    for b in g.unused:
        if not 1 <= b <= g.num_blocks:
            errs.append(f"unused marker {b} out of range")
    # every block eventually traces back to raw inputs
    if not errs:
        reach_raw = {0}
        for n, blk in enumerate(g.blocks, start=1):
            if any(src in reach_raw for src in blk.connections):
                reach_raw.add(n)
        if cfg.num_blocks not in reach_raw:
            errs.append("no connection path from raw inputs to the last block")
    return errs


# ---------------------------------------------------------------------------
# sampling and mutation
# ---------------------------------------------------------------------------

def _nonempty_subset(rng, items):
    while True:
        picked = [it for it in items if rng.random() < 0.5]
        if picked:
            return picked


def _sample_ops(rng, ops, dims, bits_choices, singleton=False):
    chosen = [ops[rng.integers(len(ops))]] if singleton else _nonempty_subset(rng, ops)
    return tuple(
        (op, int(dims[rng.integers(len(dims))]), int(bits_choices[rng.integers(len(bits_choices))]))
        for op in chosen
    )


def random_block(cfg: SpaceConfig, rng, n: int) -> BlockGene:
    sources = list(range(n))  # 0..n-1
    return make_block(
        connections=_nonempty_subset(rng, sources),
        dense=_sample_ops(rng, cfg.dense_ops, cfg.dense_dims, cfg.weight_bits_choices),
        sparse=_sample_ops(rng, cfg.sparse_ops, cfg.sparse_dims, cfg.weight_bits_choices),
        d2s=cfg.allow_mergers and rng.random() < 0.5,
        s2d=cfg.allow_mergers and rng.random() < 0.5,
    )


def random_genotype(cfg: SpaceConfig, rng) -> Genotype:
    """Uniform draw: nonempty connection/operator subsets, independent dims,
    bits, and merger flags."""
    g = Genotype(blocks=tuple(random_block(cfg, rng, n) for n in range(1, cfg.num_blocks + 1)))
    errs = validate(g, cfg)
    assert not errs, errs
    return g


MUTATION_ACTIONS = (
    "dense_dim", "sparse_dim", "dense_ops", "sparse_ops", "connections", "mergers",
)


def mutate(g: Genotype, cfg: SpaceConfig, rng) -> Genotype:
    """Apply one uniformly chosen action to one uniformly chosen block.

    Actions: resample one dense-op dimension, one sparse-op dimension, the
    dense operator subset, the sparse operator subset, the connection
    subset, or the merger flags.  Resampling the operator subset keeps the
    dims/bits of operators that stay selected and draws fresh genes for
    newcomers, so the chain can both grow and shrink subsets.
    """
    n = int(rng.integers(cfg.num_blocks)) + 1
    action = MUTATION_ACTIONS[rng.integers(len(MUTATION_ACTIONS))]
    blk = g.blocks[n - 1]

    def resample_dim(entries, dims):
        i = int(rng.integers(len(entries)))
        op, _, bits = entries[i]
        new = list(entries)
        new[i] = (op, int(dims[rng.integers(len(dims))]), bits)
        return tuple(new)

    def resample_subset(entries, ops, dims):
        kept = {op: (dim, bits) for op, dim, bits in entries}
        chosen = _nonempty_subset(rng, ops)
        out = []
        for op in chosen:
            if op in kept:
                dim, bits = kept[op]
            else:
                dim = int(dims[rng.integers(len(dims))])
                bits = int(cfg.weight_bits_choices[rng.integers(len(cfg.weight_bits_choices))])
            out.append((op, dim, bits))
        return tuple(out)

    if action == "dense_dim":
        blk = replace(blk, dense=resample_dim(blk.dense, cfg.dense_dims))
    elif action == "sparse_dim":
        blk = replace(blk, sparse=resample_dim(blk.sparse, cfg.sparse_dims))
    elif action == "dense_ops":
        blk = replace(blk, dense=_canonical_ops(
            resample_subset(blk.dense, cfg.dense_ops, cfg.dense_dims), DENSE_OP_NAMES))
    elif action == "sparse_ops":
        blk = replace(blk, sparse=_canonical_ops(
            resample_subset(blk.sparse, cfg.sparse_ops, cfg.sparse_dims), SPARSE_OP_NAMES))
    elif action == "connections":
        blk = replace(blk, connections=tuple(sorted(_nonempty_subset(rng, range(n)))))
    else:  # mergers
        if cfg.allow_mergers:
            blk = replace(blk, d2s=rng.random() < 0.5, s2d=rng.random() < 0.5)
    blocks = list(g.blocks)
    blocks[n - 1] = blk
    child = Genotype(blocks=tuple(blocks))
    errs = validate(child, cfg)
    assert not errs, errs
    return child


# ---------------------------------------------------------------------------
# counting
# ---------------------------------------------------------------------------

def operator_subset_count(cfg: SpaceConfig) -> int:
    """Per-block count of (dense subset x sparse subset) operator choices."""
    return (2 ** len(cfg.dense_ops) - 1) * (2 ** len(cfg.sparse_ops) - 1)


def space_cardinality(cfg: SpaceConfig) -> int:
    """Distinct genotypes under this module's counting convention.

    Per block n: each dense (sparse) operator is absent or present with one
    of |dims| dimensions, minus the all-absent assignment; merger flags
    contribute a factor 4 when enabled; connections contribute 2^n - 1
    nonempty subsets of the n available sources.  Bit-width genes are not
    counted (they belong to the co-design space).
    """
    dense = (1 + len(cfg.dense_dims)) ** len(cfg.dense_ops) - 1
    sparse = (1 + len(cfg.sparse_dims)) ** len(cfg.sparse_ops) - 1
    mergers = 4 if cfg.allow_mergers else 1
    total = 1
    for n in range(1, cfg.num_blocks + 1):
        total *= dense * sparse * mergers * (2 ** n - 1)
    return total


def _subsets(items):
    items = list(items)
    for mask in range(1, 2 ** len(items)):
        yield [it for i, it in enumerate(items) if mask >> i & 1]


def enumerate_genotypes(cfg: SpaceConfig, limit: int = 1_000_000):
    """Yield every distinct genotype exactly once (tiny spaces only).

    Bits are fixed to the largest available choice so the stream matches
    the cardinality convention above.
    """
    if space_cardinality(cfg) > limit:
        raise ValueError(f"space too large to enumerate (> {limit})")
    bits = max(cfg.weight_bits_choices)

    def op_assignments(ops, dims):
        for subset in _subsets(ops):
            def rec(i):
                if i == len(subset):
                    yield []
                    return
                for d in dims:
                    for rest in rec(i + 1):
                        yield [(subset[i], d, bits)] + rest
            yield from (tuple(a) for a in rec(0))

    def block_choices(n):
        merger_opts = [(False, False)]
        if cfg.allow_mergers:
            merger_opts = [(a, b) for a in (False, True) for b in (False, True)]
        for conns in _subsets(range(n)):
            for dense in op_assignments(cfg.dense_ops, cfg.dense_dims):
                for sparse in op_assignments(cfg.sparse_ops, cfg.sparse_dims):
                    for d2s, s2d in merger_opts:
                        yield make_block(conns, dense, sparse, d2s, s2d)

    def rec_blocks(n, acc):
        if n > cfg.num_blocks:
            yield Genotype(blocks=tuple(acc))
            return
        for blk in block_choices(n):
            yield from rec_blocks(n + 1, acc + [blk])

    yield from rec_blocks(1, [])


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def to_json_obj(g: Genotype) -> dict:
    obj = {
        "blocks": [
            {
                "connections": list(blk.connections),
                "dense": [{"op": o, "dim": d, "bits": b} for o, d, b in blk.dense],
                "sparse": [{"op": o, "dim": d, "bits": b} for o, d, b in blk.sparse],
                "d2s": blk.d2s,
                "s2d": blk.s2d,
            }
            for blk in g.blocks
        ]
    }
    if g.unused:
        obj["unused"] = list(g.unused)
    return obj


def serialize(g: Genotype) -> str:
    return json.dumps(to_json_obj(g), indent=2) + "\n"


def _parse_ops(entries, known, where):
    if not isinstance(entries, list):
        raise ParseError(f"{where}: expected a list of operator entries")
    out = []
    for e in entries:
        if not isinstance(e, dict) or not {"op", "dim", "bits"} <= set(e):
            raise ParseError(f"{where}: operator entry needs op/dim/bits keys")
        if e["op"] not in known:
            raise ParseError(f"{where}: unknown operator name {e['op']!r}")
        try:
            out.append((e["op"], int(e["dim"]), int(e["bits"])))
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{where}: non-integer dim or bits") from exc
    return out


def deserialize(text: str) -> Genotype:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(obj, dict) or "blocks" not in obj:
        raise ParseError("top level must be an object with a 'blocks' key")
    blocks = []
    for i, raw in enumerate(obj["blocks"], start=1):
        where = f"block {i}"
        if not isinstance(raw, dict):
            raise ParseError(f"{where}: expected an object")
        missing = {"connections", "dense", "sparse", "d2s", "s2d"} - set(raw)
        if missing:
            raise ParseError(f"{where}: missing keys {sorted(missing)}")
        try:
            conns = [int(c) for c in raw["connections"]]
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{where}: connections must be integers") from exc
        blocks.append(make_block(
            conns,
            _parse_ops(raw["dense"], DENSE_OP_NAMES, where),
            _parse_ops(raw["sparse"], SPARSE_OP_NAMES, where),
            raw["d2s"], raw["s2d"],
        ))
    unused = tuple(int(u) for u in obj.get("unused", []))
    return Genotype(blocks=tuple(blocks), unused=unused)


# ---------------------------------------------------------------------------
# visualization
# ---------------------------------------------------------------------------

def to_dot(g: Genotype) -> str:
    """Render the genotype as a DOT digraph; pruned blocks drawn dashed."""
    buf = io.StringIO()
    buf.write("digraph genotype {\n  rankdir=LR;\n")
    buf.write('  raw [label="raw features", shape=box];\n')
    for n, blk in enumerate(g.blocks, start=1):
        dense = "+".join(f"{o}({d})" for o, d, _ in blk.dense)
        sparse = "+".join(f"{o}({d})" for o, d, _ in blk.sparse)
        mergers = "".join(s for s, on in (("d2s ", blk.d2s), ("s2d", blk.s2d)) if on).strip()
        label = f"block {n}\\n{dense} | {sparse}"
        if mergers:
            label += f"\\n[{mergers}]"
        style = ', style="dashed"' if n in g.unused else ""
        buf.write(f'  b{n} [label="{label}", shape=box{style}];\n')
    for n, blk in enumerate(g.blocks, start=1):
        for src in blk.connections:
            src_name = "raw" if src == 0 else f"b{src}"
            buf.write(f"  {src_name} -> b{n};\n")
    buf.write(f"  b{g.num_blocks} -> head;\n")
    buf.write('  head [label="FC head", shape=ellipse];\n')
    buf.write("}\n")
    return buf.getvalue()


def full_genotype(cfg: SpaceConfig) -> Genotype:
    """The maximal genotype: all sources, all operators at max dims, mergers on."""
    bits = max(cfg.weight_bits_choices)
    blocks = []
    for n in range(1, cfg.num_blocks + 1):
        blocks.append(make_block(
            connections=range(n),
            dense=[(op, cfg.max_dense_dim, bits) for op in cfg.dense_ops],
            sparse=[(op, cfg.max_sparse_dim, bits) for op in cfg.sparse_ops],
            d2s=cfg.allow_mergers,
            s2d=cfg.allow_mergers,
        ))
    return Genotype(blocks=tuple(blocks))
