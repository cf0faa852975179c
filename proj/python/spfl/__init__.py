"""Federated-learning poisoning workbench bindings."""

from ._core import (
    Network,
    __version__,
    beta_schedule,
    canonical_attacks,
    coordinate_median,
    fedavg,
    geometric_median,
    kd_loss,
    lie_craft,
    mpa_scale,
    rlr_aggregate,
    run_config,
    softened,
    softmax,
    synth_digits,
    task_loss,
)

__all__ = [
    "Network",
    "__version__",
    "beta_schedule",
    "canonical_attacks",
    "coordinate_median",
    "fedavg",
    "geometric_median",
    "kd_loss",
    "lie_craft",
    "mpa_scale",
    "rlr_aggregate",
    "run_config",
    "softened",
    "softmax",
    "synth_digits",
    "task_loss",
]
