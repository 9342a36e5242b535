"""Hyperparameter grids and validation-based selection."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from mergelab.bench.scenario import Cell, Constituent, Scenario, evaluate
from mergelab.merge import merge_models


def _steps(start: float, stop: float, step: float, digits: int = 1) -> tuple[float, ...]:
    n = round((stop - start) / step)
    return tuple(round(start + i * step, digits) for i in range(n + 1))


@dataclass(frozen=True)
class GridAxis:
    param: str
    values: tuple
    step: float

    def index(self, value) -> int:
        """Table index of a grid value: value / step (lambda 0.3 -> 3, N 50 -> 5)."""
        return round(value / self.step)


# Grid index reported for methods without hyperparameters.
NO_HPARAM_INDEX = 5

SWEEP_GRID: dict[str, GridAxis | None] = {
    "average": None,
    "slerp": None,
    "fisher": None,
    "task_arithmetic": GridAxis("lam", _steps(0.1, 1.0, 0.1), 0.1),
    "dare": GridAxis("p", _steps(0.0, 0.9, 0.1), 0.1),
    "ties": GridAxis("lam", _steps(0.1, 1.0, 0.1), 0.1),
    "regmean": GridAxis("lam_offdiag", _steps(0.0, 1.0, 0.1), 0.1),
    "mats": GridAxis("n_iter", tuple(range(10, 101, 10)), 10),
}

# Methods whose sweep starts from the best Task Arithmetic lambda.
REUSES_TA_LAMBDA = frozenset({"dare", "mats"})

REFERENCE_METHODS = ("pretrained", "multitask")


@dataclass
class SweepPoint:
    index: int
    value: object
    val_heldin: float
    test_heldin: float
    test_generalization: float


@dataclass
class SweepResult:
    method: str
    param: str | None
    curve: list[SweepPoint]
    best_index: int
    fixed: dict = field(default_factory=dict)

    @property
    def best(self) -> SweepPoint:
        return next(pt for pt in self.curve if pt.index == self.best_index)

    @property
    def best_params(self) -> dict:
        params = dict(self.fixed)
        if self.param is not None:
            params[self.param] = self.best.value
        return params


def merge_constituents(
    method: str, scenario: Scenario, constituents: Sequence[Constituent], seed: int = 0, **hparams
):
    models = [c.params for c in constituents]
    base = scenario.base_model()
    stats = [c.statistics for c in constituents]
    if method == "slerp" and len(models) > 2:
        method = "mlerp"
    needs_base = method in ("task_arithmetic", "dare", "ties", "mats")
    needs_stats = method in ("fisher", "regmean", "mats", "ties")
    extra = {"seed": seed} if method == "dare" else {}
    return merge_models(
        method,
        models,
        base=base if needs_base else None,
        statistics=stats if needs_stats else None,
        **extra,
        **hparams,
    )


def _score(model, scenario: Scenario, heldin: list[Cell], gen: list[Cell]) -> tuple[float, float, float]:
    return (
        evaluate(model, scenario, heldin, "val"),
        evaluate(model, scenario, heldin, "test"),
        evaluate(model, scenario, gen, "test") if gen else float("nan"),
    )


def sweep(
    method: str,
    scenario: Scenario,
    constituents: Sequence[Constituent],
    grid: dict[str, GridAxis | None] = SWEEP_GRID,
    *,
    ta_lambda: float | None = None,
    seed: int = 0,
    generalization: list[Cell] | None = None,
) -> SweepResult:
    """Merge at every grid point and select by held-in validation score.

    Ties go to the lowest grid index. DARE and MaTS take lambda from a Task
    Arithmetic sweep (run here unless ``ta_lambda`` is given).
    """
    if method not in grid:
        raise ValueError(f"no sweep grid for method {method!r}")
    heldin = [c.cell for c in constituents]
    gen = scenario.applicable_generalization(heldin) if generalization is None else generalization
    fixed = {}
    if method in REUSES_TA_LAMBDA:
        if ta_lambda is None:
            ta = sweep("task_arithmetic", scenario, constituents, grid, seed=seed, generalization=gen)
            ta_lambda = ta.best.value
        fixed["lam"] = ta_lambda
    axis = grid[method]
    if axis is None:
        model = merge_constituents(method, scenario, constituents, seed=seed)
        point = SweepPoint(NO_HPARAM_INDEX, None, *_score(model, scenario, heldin, gen))
        return SweepResult(method, None, [point], NO_HPARAM_INDEX, fixed)
    curve = []
    for value in axis.values:
        model = merge_constituents(method, scenario, constituents, seed=seed, **fixed, **{axis.param: value})
        curve.append(SweepPoint(axis.index(value), value, *_score(model, scenario, heldin, gen)))
    best = max(curve, key=lambda pt: (pt.val_heldin, -pt.index))
    return SweepResult(method, axis.param, curve, best.index, fixed)


def reference_scores(
    method: str, scenario: Scenario, heldin: list[Cell], gen: list[Cell], multitask=None
) -> tuple[float, float]:
    if method == "pretrained":
        model = scenario.base_model()
    elif method == "multitask":
        if multitask is None:
            raise ValueError("multitask reference needs a trained multitask model")
        model = multitask
    else:
        raise ValueError(f"unknown reference {method!r}")
    _, held, general = _score(model, scenario, heldin, gen)
    return held, general
