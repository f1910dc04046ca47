"""Temporal-decay preference optimisation lab."""

from ._core import (
    bound_sweep,
    decay_weights,
    effective_horizon,
    pair_loss,
    run,
    suboptimality_bound,
    suboptimality_report,
)

__all__ = [
    "bound_sweep",
    "decay_weights",
    "effective_horizon",
    "pair_loss",
    "run",
    "suboptimality_bound",
    "suboptimality_report",
]
