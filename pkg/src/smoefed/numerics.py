"""Dense linear algebra kernels: matmul, softmax, top-k selection, an
in-repo one-sided Jacobi SVD, and Adam optimizer steps.

All matrices are 2-D float64 numpy arrays in row-major order. Operations
are pure: optimizer steps return a new state instead of mutating.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError, NumericError

SVD_TOL = 1e-10
SVD_MAX_SWEEPS = 100


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got ndim={m.ndim}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul shape mismatch: {a.shape} x {b.shape}"
        )
    return a @ b


def softmax(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        raise DomainError("softmax of an empty vector")
    if not np.all(np.isfinite(v)):
        raise DomainError("softmax input must be finite")
    shifted = v - v.max()
    e = np.exp(shifted)
    return e / e.sum()


def topk_indices(v: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest entries, ties broken toward the lowest
    index, returned sorted ascending."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if not 1 <= k <= v.size:
        raise DomainError(f"k={k} out of range for vector of length {v.size}")
    # Stable argsort on -v keeps the lowest index first among ties.
    order = np.argsort(-v, kind="stable")[:k]
    return sorted(int(i) for i in order)


@dataclass
class SvdResult:
    u: np.ndarray
    singular_values: np.ndarray
    vt: np.ndarray


def _orthonormal_completion(u: np.ndarray, start: int) -> np.ndarray:
    """Fill columns start.. of u with vectors orthonormal to the rest
    (modified Gram-Schmidt against unit-vector candidates)."""
    m, q = u.shape
    col = start
    for cand in range(m):
        if col >= q:
            break
        v = np.zeros(m)
        v[cand] = 1.0
        v -= u[:, :col] @ (u[:, :col].T @ v)
        nrm = np.linalg.norm(v)
        if nrm > 1e-8:
            u[:, col] = v / nrm
            col += 1
    return u


def svd(m: np.ndarray, tol: float = SVD_TOL, max_sweeps: int = SVD_MAX_SWEEPS) -> SvdResult:
    """Thin SVD via one-sided Jacobi rotations.

    Returns u (rows x q), singular values sorted non-increasing, and vt
    (q x cols) with q = min(rows, cols).
    """
    m = as_matrix(m)
    if m.shape[0] < m.shape[1]:
        res = svd(m.T, tol=tol, max_sweeps=max_sweeps)
        return SvdResult(u=res.vt.T, singular_values=res.singular_values, vt=res.u.T)

    g = m.copy()
    rows, cols = g.shape
    v = np.eye(cols)
    scale = np.linalg.norm(g)
    if scale == 0.0:
        return SvdResult(
            u=_orthonormal_completion(np.zeros((rows, cols)), 0),
            singular_values=np.zeros(cols),
            vt=np.eye(cols),
        )

    converged = False
    for _ in range(max_sweeps):
        rotated = False
        for p in range(cols - 1):
            for q in range(p + 1, cols):
                app = g[:, p] @ g[:, p]
                aqq = g[:, q] @ g[:, q]
                apq = g[:, p] @ g[:, q]
                if abs(apq) <= tol * np.sqrt(app * aqq) or apq == 0.0:
                    continue
                rotated = True
                zeta = (aqq - app) / (2.0 * apq)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                if zeta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                gp = g[:, p].copy()
                g[:, p] = c * gp - s * g[:, q]
                g[:, q] = s * gp + c * g[:, q]
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
        if not rotated:
            converged = True
            break
    if not converged:
        raise NumericError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")

    sigma = np.linalg.norm(g, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    g = g[:, order]
    v = v[:, order]

    u = np.zeros((rows, cols))
    tiny = tol * max(sigma[0], 1.0)
    n_good = 0
    for j in range(cols):
        if sigma[j] > tiny:
            u[:, j] = g[:, j] / sigma[j]
            n_good = j + 1
        else:
            sigma[j] = 0.0 if sigma[j] <= tiny else sigma[j]
    u = _orthonormal_completion(u, n_good)
    return SvdResult(u=u, singular_values=sigma, vt=v.T)


def svd_truncate(m: np.ndarray, rank: int) -> tuple[np.ndarray, np.ndarray]:
    """Best rank-`rank` Frobenius approximation of m, returned as a
    factor pair (L, R) with L = U_r diag(s_r) and R = V_r^T."""
    m = as_matrix(m)
    if not 1 <= rank <= min(m.shape):
        raise DomainError(f"rank={rank} out of range for shape {m.shape}")
    res = svd(m)
    left = res.u[:, :rank] * res.singular_values[:rank]
    right = res.vt[:rank, :]
    return left, right


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 1.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: np.ndarray, lr: float = 1.5e-4, beta1: float = 0.9,
                  beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        p = np.asarray(param, dtype=np.float64)
        return cls(
            first_moment=np.zeros_like(p),
            second_moment=np.zeros_like(p),
            step_count=0,
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(param: np.ndarray, grad: np.ndarray,
              state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One Adam update with bias correction; returns (new_param, new_state)."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape or param.shape != state.first_moment.shape:
        raise DimensionError(
            f"adam_step shape mismatch: param {param.shape}, grad {grad.shape}, "
            f"state {state.first_moment.shape}"
        )
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_param = param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(
        first_moment=m, second_moment=v, step_count=t,
        lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps,
    )
    return new_param, new_state
