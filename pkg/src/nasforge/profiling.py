"""FLOPs profiling of genotypes from closed-form per-operator formulas.

The per-sample count sums the operator formulas in ``operators`` over the
blocks that actually reach the head (unused blocks contribute nothing),
using the compact shapes a standalone extraction would have.  Embedding
lookups are not counted, matching common practice for CTR models.
"""

from __future__ import annotations

from . import space as S
from .data import FeatureSpec
from .operators import flops_count, param_count
from .supernet import subnet_plan


def flops(g: S.Genotype, cfg: S.SpaceConfig, feature_spec: FeatureSpec,
          dp_balanced: bool = True, attn_heads: int = 2) -> float:
    """Per-sample FLOPs of a genotype, honoring its unused-block markers."""
    plan = subnet_plan(g, cfg, feature_spec, dp_balanced=dp_balanced, attn_heads=attn_heads)
    return sum(flops_count(op.spec, balanced=op.balanced) for op in plan.all_ops())


def mflops(g, cfg, feature_spec, **kwargs) -> float:
    return flops(g, cfg, feature_spec, **kwargs) / 1e6


def op_params(g: S.Genotype, cfg: S.SpaceConfig, feature_spec: FeatureSpec,
              dp_balanced: bool = True, attn_heads: int = 2,
              with_bias: bool = True) -> int:
    """Operator weight count at the genotype's sampled dims (embeddings and
    layer-norm affine excluded)."""
    plan = subnet_plan(g, cfg, feature_spec, dp_balanced=dp_balanced, attn_heads=attn_heads)
    return sum(param_count(op.spec, balanced=op.balanced, with_bias=with_bias)
               for op in plan.all_ops())
