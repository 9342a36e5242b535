"""Linear conjugate gradient for symmetric positive (semi)definite systems.

Matrix form: ``A X = B`` with ``X`` of shape (d, k). Columns are independent
CG runs that share the matrix-vector products, so every column keeps its own
step sizes and its own convergence flag.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NegativeCurvatureError(ArithmeticError):
    """The system matrix is not positive definite along a search direction."""

    def __init__(self, message: str, result: "CGResult"):
        super().__init__(message)
        self.result = result


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual_norms: list[float] = field(default_factory=list)
    converged: bool = False
    negative_curvature: bool = False


def conjugate_gradient(
    A: np.ndarray,
    B: np.ndarray,
    X0: np.ndarray | None = None,
    max_iter: int | None = None,
    rtol: float = 1e-10,
    callback=None,
) -> CGResult:
    """Run at most ``max_iter`` CG iterations on ``A X = B`` from ``X0``.

    A column stops once its residual norm is at most ``rtol * ||b_col||``.
    ``callback(iteration, X)`` is called after every iteration, which is how
    the tests track the A-norm error.

    Raises NegativeCurvatureError (carrying the last iterate) if some active
    column sees ``p^T A p <= 0``.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    vector = B.ndim == 1
    if vector:
        B = B[:, None]
    d = A.shape[0]
    if A.shape != (d, d) or B.shape[0] != d:
        raise ValueError(f"dimension mismatch: A {A.shape}, B {B.shape}")
    X = np.zeros_like(B) if X0 is None else np.array(X0, dtype=np.float64).reshape(B.shape)
    if max_iter is None:
        max_iter = d
    if max_iter < 0:
        raise ValueError("max_iter must be non-negative")

    def _out(x):
        return x[:, 0] if vector else x

    R = B - A @ X
    thresh = rtol * np.linalg.norm(B, axis=0)
    rr = np.einsum("ij,ij->j", R, R)
    active = np.sqrt(rr) > thresh
    P = R.copy()
    history = [float(np.linalg.norm(R))]
    it = 0
    while it < max_iter and active.any():
        AP = A @ P
        pAp = np.einsum("ij,ij->j", P, AP)
        bad = active & (pAp <= 0)
        if bad.any():
            res = CGResult(_out(X), it, history, False, True)
            raise NegativeCurvatureError(
                f"non-positive curvature p'Ap={pAp[bad].min():.3e} at iteration {it}", res
            )
        alpha = np.where(active, rr / np.where(active, pAp, 1.0), 0.0)
        X += P * alpha
        R -= AP * alpha
        rr_new = np.einsum("ij,ij->j", R, R)
        beta = np.where(active, rr_new / np.where(rr > 0, rr, 1.0), 0.0)
        P = R + P * beta
        rr = rr_new
        it += 1
        active &= np.sqrt(rr) > thresh
        history.append(float(np.linalg.norm(R)))
        if callback is not None:
            callback(it, _out(X))
    return CGResult(_out(X), it, history, not active.any())
