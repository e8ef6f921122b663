"""Residual networks with template-matching blocks."""

from ._core import (
    CheckpointError,
    DataError,
    DivergenceError,
    Model,
    brute_force_vertices,
    default_config,
    entropy,
    evaluate,
    jacobian_entropy,
    kmeans,
    run_checks,
    solve_entropy,
    solve_exact,
    solve_perturbed,
    synth_dataset,
    train,
)

__all__ = [
    "CheckpointError",
    "DataError",
    "DivergenceError",
    "Model",
    "brute_force_vertices",
    "default_config",
    "entropy",
    "evaluate",
    "jacobian_entropy",
    "kmeans",
    "run_checks",
    "solve_entropy",
    "solve_exact",
    "solve_perturbed",
    "synth_dataset",
    "train",
]
