"""Scaling the number of merged models with nested task samples."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from mergelab import rng
from mergelab.bench.scenario import Cell, Constituent, Scenario, train_constituent, train_multitask
from mergelab.bench.sweep import REFERENCE_METHODS, SWEEP_GRID, reference_scores, sweep

DEFAULT_REPEATS = 10


@dataclass
class SampleChain:
    """Nested samples S_2 ⊂ S_3 ⊂ ... of held-in cell indices."""

    order: list[int]  # S_m is the first m entries

    def sample(self, m: int) -> list[int]:
        if not 1 <= m <= len(self.order):
            raise ValueError(f"chain has no sample of size {m}")
        return self.order[:m]


def sample_chains(n_items: int, max_m: int, repeats: int, seed: int) -> list[SampleChain]:
    """Independent chains; each grows by one new item per step."""
    if max_m > n_items:
        raise ValueError(f"cannot sample {max_m} of {n_items} tasks")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    chains = []
    for r in range(repeats):
        gen = rng.stream(seed, f"chain/{r}")
        order: list[int] = []
        pool = list(range(n_items))
        for _ in range(max_m):
            pick = pool.pop(int(gen.integers(len(pool))))
            order.append(pick)
        chains.append(SampleChain(order))
    return chains


@dataclass
class ScalingRow:
    M: int
    method: str
    heldin_mean: float
    generalization_mean: float
    n_chains: int


def _run_chain(chain, m_values, methods, scenario, constituents, multitask, seed):
    results = {}
    for m in m_values:
        members = [constituents[i] for i in chain.sample(m)]
        heldin = [c.cell for c in members]
        gen = scenario.applicable_generalization(heldin)
        ta_lambda = None
        for method in methods:
            if method in REFERENCE_METHODS:
                results[(m, method)] = reference_scores(method, scenario, heldin, gen, multitask)
                continue
            res = sweep(method, scenario, members, SWEEP_GRID, ta_lambda=ta_lambda, seed=seed, generalization=gen)
            if method == "task_arithmetic":
                ta_lambda = res.best.value
            results[(m, method)] = (res.best.test_heldin, res.best.test_generalization)
    return results


def scaling_experiment(
    scenario: Scenario,
    methods: Sequence[str],
    m_range: Sequence[int],
    repeats: int = DEFAULT_REPEATS,
    *,
    seed: int = 0,
    alpha: float = 1e-2,
    constituents: Sequence[Constituent] | None = None,
    threads: int = 1,
) -> list[ScalingRow]:
    """Mean held-in / generalization score per (M, method) over ``repeats`` chains.

    Each chain is swept independently at every M (DARE and MaTS reuse the
    chain's Task Arithmetic lambda when it is swept first, and run their own
    Task Arithmetic sweep otherwise).
    """
    m_values = sorted(set(int(m) for m in m_range))
    if not m_values or m_values[0] < 2:
        raise ValueError("M values must be >= 2")
    for method in methods:
        if method not in SWEEP_GRID and method not in REFERENCE_METHODS:
            raise ValueError(f"unknown method {method!r}")
    if constituents is None:
        constituents = [train_constituent(scenario, cell, alpha) for cell in scenario.held_in]
    if m_values[-1] > len(constituents):
        raise ValueError(f"M={m_values[-1]} exceeds the {len(constituents)} available tasks")
    # TA first so later methods can reuse its lambda within a chain
    ordered = sorted(methods, key=lambda m: (m != "task_arithmetic"))
    multitask = train_multitask(scenario, alpha) if "multitask" in methods else None
    chains = sample_chains(len(constituents), m_values[-1], repeats, rng.child_seed(seed, "chains"))
    args = (m_values, ordered, scenario, constituents, multitask, seed)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_chain = list(pool.map(lambda ch: _run_chain(ch, *args), chains))
    else:
        per_chain = [_run_chain(ch, *args) for ch in chains]
    rows = []
    for m in m_values:
        for method in methods:
            held = [res[(m, method)][0] for res in per_chain]
            gen = [res[(m, method)][1] for res in per_chain]
            gen = [g for g in gen if not math.isnan(g)]
            rows.append(
                ScalingRow(m, method, float(np.mean(held)), float(np.mean(gen)) if gen else float("nan"), len(chains))
            )
    return rows
