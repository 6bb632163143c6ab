"""Closest-orthogonal reprojection of square weight matrices.

A square matrix W is factored as W = QR by Householder reflections, the
signs of R's diagonal are collected into S = diag(sign(diag(R))) with
sign(0) mapped to +1, and the replacement weight is U = QS. U satisfies
U^T U = S^T Q^T Q S = S^T S = I, so the projected weight preserves
Euclidean norms and distances exactly (up to roundoff). For nonsingular
W this U is the unique Q factor of the positive-diagonal QR convention.

Everything here is pure-function numpy on float64 matrices; gradients
never flow through the projection (it overwrites weights between
optimizer steps).
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .numerics import ContractError, ShapeError

UNITARY_TOL = 1e-9


class QRResult(NamedTuple):
    q: np.ndarray
    r: np.ndarray


class SignMatrix(NamedTuple):
    diag: np.ndarray


def qr_decompose(w: np.ndarray) -> QRResult:
    """Householder QR of a square matrix: w = q @ r, r upper triangular.

    Rank deficiency is fine; a zero (sub)column just skips its reflection
    and leaves a zero on the diagonal of r.
    """
    a = np.array(w, dtype=np.float64, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"qr_decompose expects a square matrix, got {a.shape}")
    n = a.shape[0]
    q = np.eye(n)
    for k in range(n - 1):
        x = a[k:, k]
        norm_x = np.linalg.norm(x)
        if norm_x == 0.0:
            continue
        # Reflect x onto -sign(x0)*|x|*e1; the sign choice avoids cancellation.
        alpha = -norm_x if x[0] >= 0.0 else norm_x
        v = x.copy()
        v[0] -= alpha
        v_norm = np.linalg.norm(v)
        if v_norm < np.finfo(np.float64).tiny:
            continue
        v /= v_norm
        a[k:, k:] -= 2.0 * np.outer(v, v @ a[k:, k:])
        q[:, k:] -= 2.0 * np.outer(q[:, k:] @ v, v)
        a[k + 1:, k] = 0.0
    return QRResult(q, a)


def sign_correct(r: np.ndarray) -> SignMatrix:
    """Signs of r's diagonal as +-1 entries; sign(0) is +1."""
    d = np.diagonal(np.asarray(r, dtype=np.float64))
    return SignMatrix(np.where(d >= 0.0, 1.0, -1.0))


def project_unitary(w: np.ndarray) -> np.ndarray:
    """Replace w with the orthogonal matrix q @ diag(sign(diag(r)))."""
    q, r = qr_decompose(w)
    s = sign_correct(r)
    return q * s.diag[None, :]


def unitarity_residual(u: np.ndarray) -> float:
    """max |u^T u - I|, the working definition of 'how orthogonal'."""
    u = np.asarray(u, dtype=np.float64)
    gram = u.T @ u
    return float(np.max(np.abs(gram - np.eye(u.shape[0]))))


def check_norm_preservation(u: np.ndarray, x: np.ndarray,
                            x_pert: np.ndarray) -> float:
    """| ||u(x - x')|| - ||x - x'|| | for an orthogonality-checked u."""
    u = np.asarray(u, dtype=np.float64)
    gram = u.T @ u
    dev = np.abs(gram - np.eye(u.shape[0]))
    worst = np.unravel_index(np.argmax(dev), dev.shape)
    if dev[worst] >= UNITARY_TOL:
        i, j = int(worst[0]), int(worst[1])
        raise ContractError(
            f"matrix is not unitary: |u^T u - I| = {dev[worst]:.3e} "
            f"at entry ({i}, {j})")
    x = np.asarray(x, dtype=np.float64)
    x_pert = np.asarray(x_pert, dtype=np.float64)
    diff = x - x_pert
    return float(abs(np.linalg.norm(u @ x - u @ x_pert) - np.linalg.norm(diff)))
