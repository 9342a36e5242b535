"""Analytic FLOPs for merging one d x k linear layer, plus a timing harness.

Counting rules: a reduction across M models costs (M-1)dk, an elementwise op
costs dk (Mdk when applied to every model), and a parallel sum over n values
costs ceil(log2 n). Statistics costs assume one matmul forward and three
backward per token.

These are the per-layer formulas only; they are not meant to reproduce the
absolute per-experiment FLOPs figures of any particular model family.
"""

from __future__ import annotations

import csv
import io
import json
import math
import statistics as pystats
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

METHODS = ("average", "slerp", "mlerp", "task_arithmetic", "dare", "ties", "fisher", "regmean", "mats")

# Display names and row order of the method comparison table.
TABLE_ROWS = (
    ("average", "Average"),
    ("task_arithmetic", "Task Arith."),
    ("dare", "DARE"),
    ("ties", "TIES"),
    ("fisher", "Fisher"),
    ("regmean", "RegMean"),
    ("mats", "MaTS"),
    ("slerp", "SLERP"),
    ("mlerp", "MLERP"),
)

CSV_COLUMNS = ("method", "merging_flops", "statistics_flops")


class MissingDimensionError(ValueError):
    pass


@dataclass(frozen=True)
class LayerDims:
    d: int
    k: int
    M: int
    N: int | None = None
    K: int | None = None
    T: int | None = None

    def __post_init__(self):
        for name in ("d", "k", "M", "N", "K", "T"):
            v = getattr(self, name)
            if v is not None and (not isinstance(v, int) or v < 1):
                raise ValueError(f"{name} must be a positive integer, got {v!r}")


def clog2(n: int) -> int:
    """ceil(log2 n) for n >= 1: the depth of a parallel reduction."""
    if n < 1:
        raise ValueError("log of a non-positive count")
    return (n - 1).bit_length()


def _need(dims: LayerDims, method: str, *names: str) -> None:
    missing = [n for n in names if getattr(dims, n) is None]
    if missing:
        raise MissingDimensionError(f"{method} needs dimension(s) {', '.join(missing)}")


def _method(method: str) -> str:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    return method


def merging_flops(method: str, dims: LayerDims) -> int:
    m = _method(method)
    d, k, M = dims.d, dims.k, dims.M
    dk = d * k
    if m == "average":
        return M * dk
    if m == "task_arithmetic":
        return (2 * M + 1) * dk
    if m == "dare":
        return (6 * M + 1) * dk
    if m == "ties":
        return (4 * M + 1) * dk
    if m == "fisher":
        return (3 * M - 1) * dk
    if m == "regmean":
        return (M + 2) * d * dk + (3 * M - 2) * dk
    if m == "mats":
        _need(dims, m, "N")
        N = dims.N
        return (M + N) * d * dk + (2 * M + 5 * N - 2) * dk
    if m == "slerp":
        return (5 * M - 2) * dk + (M + 1) * clog2(dk)
    # mlerp
    return (2 * M + 3) * dk + (M + 1) * clog2(dk) + clog2(M)


def statistics_flops(method: str, dims: LayerDims) -> int:
    """Once-per-model statistics cost; 0 for methods without statistics."""
    m = _method(method)
    d, k, M = dims.d, dims.k, dims.M
    if m == "ties":
        _need(dims, m, "K")
        return M * dims.K * d * k + M * d * k * clog2(dims.K)
    if m in ("fisher", "mats"):
        _need(dims, m, "T")
        return 4 * M * dims.T * d * d * k
    if m == "regmean":
        _need(dims, m, "T")
        return M * dims.T * d * d * k
    return 0


@dataclass
class LayerCost:
    name: str
    d: int
    k: int
    merging_flops: int
    statistics_flops: int | None
    time_mean: float | None = None
    time_std: float | None = None


@dataclass
class CostReport:
    method: str
    layers: list[LayerCost] = field(default_factory=list)
    repeats: int | None = None

    @property
    def total_merging_flops(self) -> int:
        return sum(layer.merging_flops for layer in self.layers)

    @property
    def total_statistics_flops(self) -> int | None:
        if any(layer.statistics_flops is None for layer in self.layers):
            return None
        return sum(layer.statistics_flops for layer in self.layers)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "total_merging_flops": self.total_merging_flops,
            "total_statistics_flops": self.total_statistics_flops,
            "repeats": self.repeats,
            "layers": [asdict(layer) for layer in self.layers],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("layer", "d", "k", "merging_flops", "statistics_flops", "time_mean_s", "time_std_s"))
        for layer in self.layers:
            w.writerow(
                (
                    layer.name,
                    layer.d,
                    layer.k,
                    layer.merging_flops,
                    "" if layer.statistics_flops is None else layer.statistics_flops,
                    "" if layer.time_mean is None else repr(layer.time_mean),
                    "" if layer.time_std is None else repr(layer.time_std),
                )
            )
        return buf.getvalue()


def layer_dims_of(shape: Sequence[int]) -> tuple[int, int]:
    """Treat a 2-D tensor as d x k and anything else as a 1 x n row."""
    if len(shape) == 2:
        return int(shape[0]), int(shape[1])
    return 1, math.prod(shape)


def cost_report(
    method: str,
    shapes: Mapping[str, Sequence[int]],
    M: int,
    *,
    N: int | None = None,
    k_fraction: float | None = None,
    T: int | None = None,
    linear_layer_names: Sequence[str] | None = None,
) -> CostReport:
    """Per-tensor costs for merging a whole manifest.

    RegMean and MaTS only solve for linear layers; every other tensor is
    charged as a simple average. Statistics are left as ``None`` when the
    token count ``T`` (or the retained count for TIES) is unknown.
    """
    _method(method)
    if method == "slerp" and M > 2:
        method = "mlerp"
    linear = set(linear_layer_names or ())
    report = CostReport(method)
    for name in sorted(shapes):
        d, k = layer_dims_of(shapes[name])
        layer_method = method
        if method in ("regmean", "mats") and name not in linear:
            layer_method = "average"
        K = None
        if layer_method == "ties" and k_fraction is not None:
            from mergelab.merge.kernels import trim_count

            K = max(1, trim_count(k_fraction, d * k))
        dims = LayerDims(d, k, M, N=N, K=K, T=T)
        try:
            stats = statistics_flops(layer_method, dims)
        except MissingDimensionError:
            stats = None
        report.layers.append(LayerCost(name, d, k, merging_flops(layer_method, dims), stats))
    return report


def cost_table(dims: LayerDims) -> list[tuple[str, int, int | None]]:
    """One row per method (SLERP and MLERP included) at fixed dims."""
    rows = []
    for method, _label in TABLE_ROWS:
        try:
            merge = merging_flops(method, dims)
        except MissingDimensionError:
            merge = None
        try:
            stats = statistics_flops(method, dims)
        except MissingDimensionError:
            stats = None
        rows.append((method, merge, stats))
    return rows


def cost_table_csv(dims: LayerDims) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for method, merge, stats in cost_table(dims):
        w.writerow((method, "" if merge is None else merge, "" if stats is None else stats))
    return buf.getvalue()


def time_merge(recipe, repeats: int = 5) -> CostReport:
    """Wall-clock each per-block merge ``repeats`` times.

    Global pre-passes (norms, dot products, trim masks) run once up front and
    are not timed; only the per-block kernel is. BLAS is pinned to one thread
    and blocks are timed one after the other.
    """
    from threadpoolctl import threadpool_limits

    from mergelab.merge.driver import prepare_streaming

    if repeats < 2:
        raise ValueError("repeats must be >= 2 to report a standard deviation")
    with threadpool_limits(limits=1):
        plan, source = prepare_streaming(recipe)
        report = cost_report(
            plan.method,
            source.shapes,
            source.n_models,
            N=recipe.n_iter,
            k_fraction=recipe.k_fraction,
            linear_layer_names=plan.linear_layer_names,
        )
        by_name = {layer.name: layer for layer in report.layers}
        reference = None
        for block in source.blocks(plan.stat_kinds()):
            samples = []
            for _ in range(repeats):
                start = time.perf_counter()
                out = plan.merge_block(block)
                samples.append(time.perf_counter() - start)
                if reference is None:
                    reference = out
                elif out.tobytes() != reference.tobytes():
                    raise RuntimeError(f"non-deterministic merge output for {block.name!r}")
            reference = None
            layer = by_name[block.name]
            layer.time_mean = pystats.fmean(samples)
            layer.time_std = pystats.stdev(samples)
    report.repeats = repeats
    return report
