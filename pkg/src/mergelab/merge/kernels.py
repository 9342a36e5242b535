"""Per-block merging kernels.

Every function here works on plain arrays for one parameter block (or a
flattened model, for the interpolation methods) and is pure. Arithmetic is
carried out in float64 and results are returned as float32.
"""

from __future__ import annotations

import logging
import math
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg

from mergelab import rng
from mergelab.merge.cg import NegativeCurvatureError, conjugate_gradient

log = logging.getLogger(__name__)

FISHER_EPS = 1e-12
SLERP_EPS = 1e-6
RIDGE_SCALE = 1e-8


def _f64(blocks: Sequence[np.ndarray]) -> list[np.ndarray]:
    if not blocks:
        raise ValueError("need at least one tensor")
    shape = np.shape(blocks[0])
    out = []
    for b in blocks:
        if np.shape(b) != shape:
            raise ValueError(f"shape mismatch: {list(np.shape(b))} vs {list(shape)}")
        out.append(np.asarray(b, dtype=np.float64))
    return out


def _f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32)


def _sum(arrays: Sequence[np.ndarray]) -> np.ndarray:
    # left-to-right in constituent order; every kernel reduces the same way
    total = arrays[0].copy()
    for a in arrays[1:]:
        total += a
    return total


def merge_average(blocks: Sequence[np.ndarray]) -> np.ndarray:
    xs = _f64(blocks)
    return _f32(_sum(xs) / len(xs))


# -- interpolation ---------------------------------------------------------


def slerp_coefficients(dot: float, norm_a: float, norm_b: float, t: float) -> tuple[float, float]:
    """Weights ``(w_a, w_b)`` with ``slerp = w_a * a + w_b * b``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0, 1], got {t}")
    if norm_a == 0.0 or norm_b == 0.0:
        raise ValueError("slerp needs inputs with nonzero norm")
    cos = min(1.0, max(-1.0, dot / (norm_a * norm_b)))
    omega = math.acos(cos)
    sin_omega = math.sin(omega)
    if sin_omega < SLERP_EPS:
        return 1.0 - t, t
    return math.sin((1.0 - t) * omega) / sin_omega, math.sin(t * omega) / sin_omega


def merge_slerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    """Spherical interpolation between two flattened models."""
    a64, b64 = _f64([a, b])
    wa, wb = slerp_coefficients(float(a64.ravel() @ b64.ravel()), float(np.linalg.norm(a64)), float(np.linalg.norm(b64)), t)
    return _f32(wa * a64 + wb * b64)


def mlerp_average(blocks: Sequence[np.ndarray], norms: Sequence[float]) -> np.ndarray:
    """Mean of the unit-normalized blocks, float64 (before renormalization)."""
    xs = _f64(blocks)
    return _sum([x / n for x, n in zip(xs, norms)]) / len(xs)


def mlerp_scale(norms: Sequence[float], average_norm: float) -> float:
    if average_norm == 0.0:
        raise ValueError("mlerp: the normalized models average to zero (anti-parallel inputs)")
    return max(norms) / average_norm


def merge_mlerp(models: Sequence[np.ndarray]) -> np.ndarray:
    """Norm-preserving average of M > 2 flattened models."""
    if len(models) < 3:
        raise ValueError("mlerp merges more than two models; use slerp for two")
    xs = _f64(models)
    norms = [float(np.linalg.norm(x)) for x in xs]
    if min(norms) == 0.0:
        raise ValueError("mlerp needs models with nonzero norm")
    avg = mlerp_average(xs, norms)
    return _f32(avg * mlerp_scale(norms, float(np.linalg.norm(avg))))


# -- task vectors ----------------------------------------------------------


def compute_task_vector(model: np.ndarray, base: np.ndarray) -> np.ndarray:
    m, b = _f64([model, base])
    return m - b


def check_scale(lam: float) -> None:
    if not lam > 0:
        raise ValueError(f"lambda must be > 0, got {lam}")


def merge_task_arithmetic(base: np.ndarray, task_vectors: Sequence[np.ndarray], lam: float) -> np.ndarray:
    check_scale(lam)
    b, *tvs = _f64([base, *task_vectors])
    if not tvs:
        raise ValueError("need at least one task vector")
    return _f32(b + lam * _sum(tvs))


def check_dropout(p: float) -> None:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")


def apply_dare(tv: np.ndarray, p: float, gen: np.random.Generator) -> np.ndarray:
    """Drop each entry with probability ``p`` and rescale survivors by 1/(1-p)."""
    check_dropout(p)
    tv = np.asarray(tv, dtype=np.float64)
    u = gen.random(tv.shape)
    return np.where(u < p, 0.0, tv / (1.0 - p))


def dare_block(name: str, index: int, tv: np.ndarray, p: float, seed: int) -> np.ndarray:
    return apply_dare(tv, p, rng.stream(seed, name, index))


# -- TIES ------------------------------------------------------------------


def trim_count(k_fraction: float, total: int) -> int:
    if not 0.0 < k_fraction <= 1.0:
        raise ValueError(f"k_fraction must be in (0, 1], got {k_fraction}")
    # round first so that e.g. 0.1 * 30 counts as 3, not 4
    return min(total, math.ceil(round(k_fraction * total, 9)))


def compute_trim_statistic(task_vector: Mapping[str, np.ndarray], k_fraction: float) -> dict[str, np.ndarray]:
    """Keep-masks (1.0 = keep) for the top ``ceil(k * n)`` magnitudes model-wide.

    Ties at the threshold go to the entry that comes first in (tensor name,
    flat index) order.
    """
    names = sorted(task_vector)
    flat = np.concatenate([np.abs(np.asarray(task_vector[n], dtype=np.float64)).ravel() for n in names])
    keep = trim_count(k_fraction, flat.size)
    order = np.argsort(-flat, kind="stable")
    mask = np.zeros(flat.size, dtype=np.float32)
    mask[order[:keep]] = 1.0
    out = {}
    start = 0
    for n in names:
        shape = np.shape(task_vector[n])
        size = math.prod(shape)
        out[n] = mask[start : start + size].reshape(shape)
        start += size
    return out


def ties_merged_vector(trimmed: Sequence[np.ndarray]) -> np.ndarray:
    """Elect signs and take the disjoint mean over one parameter block."""
    tvs = _f64(trimmed)
    stacked = np.stack(tvs)
    signs = np.sign(stacked)
    elected = np.sign(_sum(tvs))
    majority = np.sign(elected.sum())
    elected[elected == 0] = majority if majority != 0 else 1.0
    agree = signs == elected
    count = agree.sum(axis=0)
    total = _sum(list(np.where(agree, stacked, 0.0)))
    return np.where(count > 0, total / np.maximum(count, 1), 0.0)


def merge_ties(base: np.ndarray, trimmed: Sequence[np.ndarray], lam: float) -> np.ndarray:
    check_scale(lam)
    if not trimmed:
        raise ValueError("TIES needs at least one constituent")
    b = np.asarray(base, dtype=np.float64)
    merged = ties_merged_vector(trimmed)
    if merged.shape != b.shape:
        raise ValueError(f"shape mismatch: {list(merged.shape)} vs base {list(b.shape)}")
    return _f32(b + lam * merged)


# -- Fisher ----------------------------------------------------------------


def merge_fisher(models: Sequence[np.ndarray], fishers: Sequence[np.ndarray]) -> np.ndarray:
    """Fisher-weighted mean; entries with (near) zero total Fisher are averaged."""
    if len(models) != len(fishers):
        raise ValueError("need one Fisher per model")
    xs = _f64(models)
    fs = _f64(fishers)
    if fs[0].shape != xs[0].shape:
        raise ValueError("Fisher and parameter shapes differ")
    if any((f < 0).any() for f in fs):
        raise ValueError("negative Fisher entry")
    weighted = _sum([f * x for f, x in zip(fs, xs)])
    denom = _sum(fs)
    plain = _sum(xs) / len(xs)
    safe = denom >= FISHER_EPS
    return _f32(np.where(safe, weighted / np.where(safe, denom, 1.0), plain))


# -- RegMean / MaTS --------------------------------------------------------


def scale_offdiagonal(gram: np.ndarray, lam_offdiag: float) -> np.ndarray:
    g = np.asarray(gram, dtype=np.float64)
    diag = np.diag(np.diag(g))
    return diag + lam_offdiag * (g - diag)


def check_gram(gram: np.ndarray, d: int) -> None:
    g = np.asarray(gram, dtype=np.float64)
    if g.shape != (d, d):
        raise ValueError(f"gram shape {list(g.shape)} does not match input dim {d}")
    scale = max(np.abs(g).max(), 1e-30)
    if np.abs(g - g.T).max() >= 1e-6 * scale:
        raise ValueError("gram matrix is not symmetric")


def normal_equations(
    weights: Sequence[np.ndarray], grams: Sequence[np.ndarray], lam_offdiag: float
) -> tuple[np.ndarray, np.ndarray]:
    """``A = sum G~_i`` and ``B = sum G~_i W_i`` in float64."""
    if len(weights) != len(grams) or not weights:
        raise ValueError("need one gram matrix per weight matrix")
    ws = _f64(weights)
    if ws[0].ndim != 2:
        raise ValueError("linear-layer weights must be 2-D (d x k)")
    d = ws[0].shape[0]
    gs = []
    for g in grams:
        check_gram(g, d)
        gs.append(scale_offdiagonal(g, lam_offdiag))
    return _sum(gs), _sum([g @ w for g, w in zip(gs, ws)])


def solve_normal_equations(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    try:
        factor = scipy.linalg.cho_factor(A, lower=True, check_finite=True)
    except np.linalg.LinAlgError:
        d = A.shape[0]
        trace = float(np.trace(A))
        if trace <= 0:
            raise ValueError("gram matrices sum to zero; nothing to solve") from None
        factor = scipy.linalg.cho_factor(A + RIDGE_SCALE * trace / d * np.eye(d), lower=True)
    return scipy.linalg.cho_solve(factor, B)


def merge_regmean(weights: Sequence[np.ndarray], grams: Sequence[np.ndarray], lam_offdiag: float) -> np.ndarray:
    A, B = normal_equations(weights, grams, lam_offdiag)
    return _f32(solve_normal_equations(A, B))


def merge_mats(
    weights: Sequence[np.ndarray],
    grams: Sequence[np.ndarray],
    n_iter: int,
    init: np.ndarray,
    lam_offdiag: float = 1.0,
):
    """``n_iter`` CG iterations on the RegMean system, started at ``init``.

    Returns ``(merged, CGResult)``. A non-positive-definite system stops the
    iteration early; the last iterate is returned and the result is flagged.
    """
    if n_iter < 0:
        raise ValueError("number of CG iterations must be non-negative")
    A, B = normal_equations(weights, grams, lam_offdiag)
    try:
        res = conjugate_gradient(A, B, np.asarray(init, dtype=np.float64), max_iter=n_iter)
    except NegativeCurvatureError as exc:
        log.warning("MaTS: %s; keeping the last iterate", exc)
        res = exc.result
    return _f32(res.x), res
