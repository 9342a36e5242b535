"""Model-level merging drivers.

A ``MergePlan`` turns a method and its hyperparameters into a per-block
function. Methods that need whole-model quantities (SLERP's angle, MLERP's
norms, TIES' trim masks) compute them in pre-passes over the same block
source before any output block is produced. Pre-pass partial sums are kept
per tensor and reduced in name order, so results do not depend on the order
in which blocks are visited.

Two block sources exist: ``StreamingSource`` reads one tensor per container
at a time, ``MemorySource`` wraps already-loaded tensor maps. Both feed the
same plan, which is what makes streamed and in-memory merges bit-identical.
"""

from __future__ import annotations

import logging
import math
import os
import shutil
import tempfile
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from mergelab import cost_model
from mergelab.checkpoint import Container, ContainerWriter, TensorMap, as_tensor_map, check_aligned, stream_blocks, write_container
from mergelab.merge import kernels
from mergelab.merge.recipe import (
    NEEDS_BASE,
    NEEDS_STATISTICS,
    MergeRecipe,
    MissingPrerequisiteError,
    RecipeError,
)

log = logging.getLogger(__name__)

FISHER = "fisher/"
GRAM = "gram/"
TRIM = "trim/"


@dataclass
class Block:
    name: str
    models: list[np.ndarray]
    base: np.ndarray | None = None
    # per constituent: statistic kind ("fisher", "gram", "trim") -> array
    stats: list[dict[str, np.ndarray]] = field(default_factory=list)


class MemorySource:
    """Block source over tensor maps that are already in memory."""

    def __init__(
        self,
        models: Sequence[Mapping[str, np.ndarray]],
        base: Mapping[str, np.ndarray] | None = None,
        statistics: Sequence[Mapping[str, np.ndarray]] | None = None,
    ):
        if not models:
            raise ValueError("need at least one model")
        maps = list(models) + ([base] if base is not None else [])
        check_aligned([{n: np.shape(v) for n, v in m.items()} for m in maps])
        self.models = [as_tensor_map(m) for m in models]
        self.base = as_tensor_map(base) if base is not None else None
        self.statistics = [as_tensor_map(s) for s in statistics] if statistics is not None else None
        self.shapes = {n: tuple(np.shape(self.models[0][n])) for n in sorted(self.models[0])}
        self.n_models = len(self.models)
        self._trim: list[dict[str, np.ndarray]] | None = None

    @property
    def names(self) -> list[str]:
        return list(self.shapes)

    def has_stat(self, i: int, key: str) -> bool:
        return self.statistics is not None and key in self.statistics[i]

    def _stat(self, i: int, key: str) -> np.ndarray:
        return self.statistics[i][key]

    def model_blocks(self, i: int) -> Iterator[tuple[str, np.ndarray, np.ndarray | None]]:
        for name in self.names:
            yield name, self.models[i][name], None if self.base is None else self.base[name]

    def set_trim(self, masks: list[dict[str, np.ndarray]]) -> None:
        self._trim = masks

    def blocks(self, kinds: Mapping[str, set[str] | None] = {}, order: Sequence[str] | None = None) -> Iterator[Block]:
        for name in order or self.names:
            stats = []
            for i in range(self.n_models):
                entry = {}
                for kind, only in kinds.items():
                    if only is not None and name not in only:
                        continue
                    if kind == "trim" and self._trim is not None:
                        entry[kind] = self._trim[i][name]
                    else:
                        entry[kind] = self._stat(i, f"{kind}/{name}")
                stats.append(entry)
            yield Block(
                name,
                [m[name] for m in self.models],
                None if self.base is None else self.base[name],
                stats,
            )

    def close(self) -> None:
        pass


class StreamingSource:
    """Block source that reads one tensor per container at a time."""

    def __init__(self, constituents: Sequence[str], base: str | None = None, statistics: Sequence[str] | None = None):
        self.paths = [str(p) for p in constituents]
        self.base_path = str(base) if base else None
        self.stat_paths = [str(p) for p in statistics] if statistics else None
        handles = [Container(p) for p in self._all_paths()]
        try:
            check_aligned([h.shapes for h in handles], [str(h.path) for h in handles])
            self.shapes = dict(handles[0].shapes)
        finally:
            for h in handles:
                h.close()
        self.stat_names: list[set[str]] | None = None
        if self.stat_paths:
            self.stat_names = []
            for p in self.stat_paths:
                with Container(p) as c:
                    self.stat_names.append(set(c.names))
        self.n_models = len(self.paths)
        self._trim_paths: list[str] | None = None
        self._tmpdir: str | None = None

    def _all_paths(self) -> list[str]:
        return self.paths + ([self.base_path] if self.base_path else [])

    @property
    def names(self) -> list[str]:
        return list(self.shapes)

    def has_stat(self, i: int, key: str) -> bool:
        return self.stat_names is not None and key in self.stat_names[i]

    def model_blocks(self, i: int) -> Iterator[tuple[str, np.ndarray, np.ndarray | None]]:
        paths = [self.paths[i]] + ([self.base_path] if self.base_path else [])
        for name, tensors in stream_blocks(paths):
            yield name, tensors[0], tensors[1] if self.base_path else None

    def set_trim(self, masks: list[dict[str, np.ndarray]]) -> None:
        self._tmpdir = tempfile.mkdtemp(prefix="mergelab-trim-")
        self._trim_paths = []
        for i, m in enumerate(masks):
            path = os.path.join(self._tmpdir, f"trim{i}.ckpt")
            write_container(m, path)
            self._trim_paths.append(path)

    def _stat_handles(self, kinds) -> list[Container | None]:
        handles: list[Container | None] = []
        need_stats = any(k != "trim" or self._trim_paths is None for k in kinds)
        for i in range(self.n_models):
            handles.append(Container(self.stat_paths[i]) if need_stats and self.stat_paths else None)
        return handles

    def blocks(self, kinds: Mapping[str, set[str] | None] = {}, order: Sequence[str] | None = None) -> Iterator[Block]:
        stat_handles = self._stat_handles(kinds) if kinds else []
        trim_handles = [Container(p) for p in self._trim_paths] if "trim" in kinds and self._trim_paths else None
        try:
            if order is None:
                tensors_iter: Iterable = stream_blocks(self._all_paths())
            else:
                tensors_iter = self._by_name(order)
            for name, tensors in tensors_iter:
                stats = []
                for i in range(self.n_models):
                    entry = {}
                    for kind, only in kinds.items():
                        if only is not None and name not in only:
                            continue
                        if kind == "trim" and trim_handles is not None:
                            entry[kind] = trim_handles[i].read(name)
                        else:
                            entry[kind] = stat_handles[i].read(f"{kind}/{name}")
                    stats.append(entry)
                models = tensors[: self.n_models]
                base = tensors[self.n_models] if self.base_path else None
                yield Block(name, models, base, stats)
        finally:
            for h in stat_handles + (trim_handles or []):
                if h is not None:
                    h.close()

    def _by_name(self, order: Sequence[str]) -> Iterator[tuple[str, list[np.ndarray]]]:
        handles = [Container(p) for p in self._all_paths()]
        try:
            for name in order:
                yield name, [h.read(name) for h in handles]
        finally:
            for h in handles:
                h.close()

    def close(self) -> None:
        if self._tmpdir:
            shutil.rmtree(self._tmpdir, ignore_errors=True)
            self._tmpdir = None


def _ordered_sum(partials: Mapping[str, float]) -> float:
    total = 0.0
    for name in sorted(partials):
        total += partials[name]
    return total


class MergePlan:
    """A method with fixed hyperparameters, ready to merge block by block."""

    def __init__(
        self,
        method: str,
        n_models: int,
        *,
        lam: float = 1.0,
        p: float = 0.0,
        k_fraction: float = 0.2,
        lam_offdiag: float = 1.0,
        n_iter: int | None = None,
        seed: int = 0,
        slerp_t: float = 0.5,
        linear_layer_names: Sequence[str] | None = None,
    ):
        self.method = method
        self.n_models = n_models
        self.lam = lam
        self.p = p
        self.k_fraction = k_fraction
        self.lam_offdiag = lam_offdiag
        self.n_iter = n_iter
        self.seed = seed
        self.slerp_t = slerp_t
        self.linear_layer_names = None if linear_layer_names is None else list(linear_layer_names)
        self._global: dict[str, object] = {}
        self.cg_results: dict[str, object] = {}

    @classmethod
    def from_recipe(cls, recipe: MergeRecipe) -> "MergePlan":
        return cls(
            recipe.effective_method,
            len(recipe.constituents),
            lam=recipe.lam,
            p=recipe.p,
            k_fraction=recipe.k_fraction,
            lam_offdiag=recipe.lam_offdiag,
            n_iter=recipe.n_iter,
            seed=recipe.seed,
            slerp_t=recipe.slerp_t,
            linear_layer_names=recipe.linear_layer_names,
        )

    # -- which statistics each block needs --------------------------------

    def stat_kinds(self) -> dict[str, set[str] | None]:
        if self.method == "fisher":
            return {"fisher": None}
        if self.method in ("regmean", "mats"):
            return {"gram": set(self.linear_layer_names or ())}
        if self.method == "ties":
            return {"trim": None}
        return {}

    # -- pre-passes --------------------------------------------------------

    def prepare(self, source) -> None:
        method = self.method
        if method in NEEDS_BASE and getattr(source, "base", None) is None and getattr(source, "base_path", None) is None:
            raise MissingPrerequisiteError(f"{method}: base model required")
        if method == "fisher":
            self._require_stats(source, FISHER, source.names)
        elif method in ("regmean", "mats"):
            self._resolve_linear_layers(source)
            self._require_stats(source, GRAM, self.linear_layer_names)
        elif method == "ties":
            self._prepare_trim(source)
        elif method == "slerp":
            self._prepare_slerp(source)
        elif method == "mlerp":
            self._prepare_mlerp(source)

    def _require_stats(self, source, prefix: str, names: Iterable[str]) -> None:
        for i in range(source.n_models):
            for name in names:
                if not source.has_stat(i, prefix + name):
                    raise MissingPrerequisiteError(
                        f"{self.method}: statistics required: constituent {i} has no {prefix + name!r}"
                    )

    def _resolve_linear_layers(self, source) -> None:
        if self.linear_layer_names is None:
            self.linear_layer_names = [n for n in source.names if source.has_stat(0, GRAM + n)]
            if not self.linear_layer_names:
                raise MissingPrerequisiteError(f"{self.method}: statistics required: no 'gram/<tensor>' entries found")
        for name in self.linear_layer_names:
            if name not in source.shapes:
                raise RecipeError(f"linear layer {name!r} is not a tensor of the model")
            if len(source.shapes[name]) != 2:
                raise RecipeError(f"linear layer {name!r} must be 2-D, has shape {list(source.shapes[name])}")

    def _prepare_trim(self, source) -> None:
        if all(source.has_stat(i, TRIM + n) for i in range(source.n_models) for n in source.names):
            return
        masks = []
        for i in range(source.n_models):
            tv = {name: kernels.compute_task_vector(m, b) for name, m, b in source.model_blocks(i)}
            masks.append(kernels.compute_trim_statistic(tv, self.k_fraction))
        source.set_trim(masks)

    def _prepare_slerp(self, source) -> None:
        dots, na, nb = {}, {}, {}
        for block in source.blocks():
            a = np.asarray(block.models[0], dtype=np.float64).ravel()
            b = np.asarray(block.models[1], dtype=np.float64).ravel()
            dots[block.name] = float(a @ b)
            na[block.name] = float(a @ a)
            nb[block.name] = float(b @ b)
        self._global["slerp"] = kernels.slerp_coefficients(
            _ordered_sum(dots), math.sqrt(_ordered_sum(na)), math.sqrt(_ordered_sum(nb)), self.slerp_t
        )

    def _prepare_mlerp(self, source) -> None:
        sq: list[dict[str, float]] = [{} for _ in range(source.n_models)]
        for block in source.blocks():
            for i, m in enumerate(block.models):
                x = np.asarray(m, dtype=np.float64).ravel()
                sq[i][block.name] = float(x @ x)
        norms = [math.sqrt(_ordered_sum(s)) for s in sq]
        if min(norms) == 0.0:
            raise ValueError("mlerp needs models with nonzero norm")
        avg_sq = {}
        for block in source.blocks():
            avg = kernels.mlerp_average(block.models, norms).ravel()
            avg_sq[block.name] = float(avg @ avg)
        self._global["mlerp"] = (norms, kernels.mlerp_scale(norms, math.sqrt(_ordered_sum(avg_sq))))

    # -- per-block merge ---------------------------------------------------

    def _task_vectors(self, block: Block) -> list[np.ndarray]:
        return [kernels.compute_task_vector(m, block.base) for m in block.models]

    def merge_block(self, block: Block) -> np.ndarray:
        method = self.method
        if method == "average":
            return kernels.merge_average(block.models)
        if method == "slerp":
            wa, wb = self._global["slerp"]
            a = np.asarray(block.models[0], dtype=np.float64)
            b = np.asarray(block.models[1], dtype=np.float64)
            return (wa * a + wb * b).astype(np.float32)
        if method == "mlerp":
            norms, scale = self._global["mlerp"]
            return (kernels.mlerp_average(block.models, norms) * scale).astype(np.float32)
        if method == "task_arithmetic":
            return kernels.merge_task_arithmetic(block.base, self._task_vectors(block), self.lam)
        if method == "dare":
            tvs = [
                kernels.dare_block(block.name, i, tv, self.p, self.seed)
                for i, tv in enumerate(self._task_vectors(block))
            ]
            return kernels.merge_task_arithmetic(block.base, tvs, self.lam)
        if method == "ties":
            trimmed = [tv * s["trim"] for tv, s in zip(self._task_vectors(block), block.stats)]
            return kernels.merge_ties(block.base, trimmed, self.lam)
        if method == "fisher":
            return kernels.merge_fisher(block.models, [s["fisher"] for s in block.stats])
        if method in ("regmean", "mats"):
            if block.name not in set(self.linear_layer_names or ()):
                return kernels.merge_average(block.models)
            grams = [s["gram"] for s in block.stats]
            if method == "regmean":
                return kernels.merge_regmean(block.models, grams, self.lam_offdiag)
            init = kernels.merge_task_arithmetic(block.base, self._task_vectors(block), self.lam)
            merged, res = kernels.merge_mats(block.models, grams, self.n_iter, init, self.lam_offdiag)
            self.cg_results[block.name] = res
            return merged
        raise ValueError(f"unknown method {method!r}")


def merged_blocks(
    plan: MergePlan, source, threads: int = 1, order: Sequence[str] | None = None
) -> Iterator[tuple[str, np.ndarray]]:
    """Yield ``(name, merged)`` in source order; ``threads`` > 1 merges a window of blocks concurrently."""
    blocks = source.blocks(plan.stat_kinds(), order)
    if threads <= 1:
        for block in blocks:
            yield block.name, plan.merge_block(block)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        window: deque = deque()
        for block in blocks:
            window.append((block.name, pool.submit(plan.merge_block, block)))
            if len(window) >= 2 * threads:
                name, fut = window.popleft()
                yield name, fut.result()
        while window:
            name, fut = window.popleft()
            yield name, fut.result()


def _hparams(kwargs: dict) -> dict:
    allowed = {"lam", "p", "k_fraction", "lam_offdiag", "n_iter", "seed", "slerp_t", "linear_layer_names"}
    unknown = set(kwargs) - allowed
    if unknown:
        raise TypeError(f"unknown hyperparameter(s): {', '.join(sorted(unknown))}")
    return kwargs


def merge_models(
    method: str,
    models: Sequence[Mapping[str, np.ndarray]],
    base: Mapping[str, np.ndarray] | None = None,
    statistics: Sequence[Mapping[str, np.ndarray]] | None = None,
    *,
    threads: int = 1,
    order: Sequence[str] | None = None,
    **hparams,
) -> TensorMap:
    """Merge in-memory tensor maps; same plan and kernels as ``run_merge``."""
    hp = _hparams(hparams)
    recipe = MergeRecipe(
        method,
        [f"<memory:{i}>" for i in range(len(models))],
        base="<memory:base>" if base is not None else None,
        statistics=[f"<memory:stats{i}>" for i in range(len(models))] if statistics is not None else None,
        **hp,
    )
    recipe.validate()
    method = recipe.effective_method
    if method in NEEDS_BASE and base is None:
        raise MissingPrerequisiteError(f"{method}: base model required")
    if method in NEEDS_STATISTICS and statistics is None:
        raise MissingPrerequisiteError(f"{method}: statistics required")
    source = MemorySource(models, base, statistics)
    plan = MergePlan.from_recipe(recipe)
    try:
        plan.prepare(source)
        out = dict(merged_blocks(plan, source, threads, order))
    finally:
        source.close()
    return {name: out[name] for name in sorted(out)}


def prepare_streaming(recipe: MergeRecipe) -> tuple[MergePlan, StreamingSource]:
    recipe.validate()
    recipe.check_prerequisites()
    method = recipe.effective_method
    use_stats = method in NEEDS_STATISTICS or method == "ties"
    source = StreamingSource(
        recipe.constituents,
        recipe.base if method in NEEDS_BASE else None,
        recipe.statistics if use_stats else None,
    )
    plan = MergePlan.from_recipe(recipe)
    try:
        plan.prepare(source)
    except Exception:
        source.close()
        raise
    return plan, source


def run_merge(
    recipe: MergeRecipe,
    out: str | os.PathLike | None = None,
    *,
    threads: int = 1,
    strict: bool = False,
    order: Sequence[str] | None = None,
    cost_path: str | os.PathLike | None = None,
) -> Path:
    """Stream the recipe's containers through its method and write the result.

    A cost report (JSON) is written next to the output as ``<out>.cost.json``
    unless ``cost_path`` says otherwise.
    """
    out = out or recipe.output
    if out is None:
        raise RecipeError("no output path given")
    out = Path(out)
    plan, source = prepare_streaming(recipe)
    try:
        if order is None:
            with ContainerWriter(out, source.shapes, strict=strict) as writer:
                for name, merged in merged_blocks(plan, source, threads):
                    writer.write(name, merged)
        else:
            write_container(dict(merged_blocks(plan, source, threads, order)), out, strict=strict)
    finally:
        source.close()
    report = cost_model.cost_report(
        plan.method,
        source.shapes,
        source.n_models,
        N=recipe.n_iter,
        k_fraction=recipe.k_fraction,
        linear_layer_names=plan.linear_layer_names,
    )
    cost_path = Path(cost_path) if cost_path else out.with_name(out.name + ".cost.json")
    cost_path.write_text(report.to_json(), encoding="utf-8")
    log.info("merged %d tensors with %s -> %s (%d merging FLOPs)", len(source.shapes), plan.method, out, report.total_merging_flops)
    return out
