"""Weight-sharing architecture search for CTR recommender models.

Subpackages cover the full loop: a float64 autodiff tensor core, the
searchable genotype space, building operators, the shared-weight supernet,
training and metrics, regularized evolution, supernet ranking fidelity,
lottery-ticket pruning, and a parametric in-memory-computing cost model.
"""

__version__ = "0.1.0"
