"""Synthetic compositional-generalization benchmark for merging methods."""

from mergelab.bench.scaling import SampleChain, ScalingRow, sample_chains, scaling_experiment
from mergelab.bench.scenario import (
    Constituent,
    Scenario,
    cell_score,
    evaluate,
    generate_scenario,
    held_in_cells,
    train_constituent,
    train_multitask,
)
from mergelab.bench.sweep import SWEEP_GRID, GridAxis, SweepPoint, SweepResult, sweep

__all__ = [
    "Constituent",
    "GridAxis",
    "SWEEP_GRID",
    "SampleChain",
    "ScalingRow",
    "Scenario",
    "SweepPoint",
    "SweepResult",
    "cell_score",
    "evaluate",
    "generate_scenario",
    "held_in_cells",
    "sample_chains",
    "scaling_experiment",
    "sweep",
    "train_constituent",
    "train_multitask",
]
