"""Dense linear-algebra primitives on subspaces.

Everything here is a pure function of its inputs. Subspaces are represented by
a basis matrix of shape ``(d, r)``; the projection operator
``P = U (U^T U)^{-1} U^T`` is the basis-free object that all distances are
measured through.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, IllConditioned, RankDeficient

RANK_TOL = 1e-10
COND_LIMIT = 1e12


@dataclass(frozen=True)
class SubspaceBasis:
    """A ``d x r`` basis with full column rank.

    ``orthonormal`` is set by :func:`orthonormalize` and lets downstream code
    skip Gram solves.
    """

    columns: np.ndarray
    orthonormal: bool = field(default=False, compare=False)

    def __post_init__(self):
        cols = np.asarray(self.columns, dtype=float)
        if cols.ndim == 1:
            cols = cols[:, None]
        if cols.ndim != 2 or cols.shape[1] < 1 or cols.shape[0] < cols.shape[1]:
            raise DimensionMismatch(f"basis must be d x r with d >= r >= 1, got {cols.shape}")
        object.__setattr__(self, "columns", cols)

    @property
    def rank(self) -> int:
        return self.columns.shape[1]

    @property
    def dim(self) -> int:
        return self.columns.shape[0]


@dataclass(frozen=True)
class ObservedColumn:
    """One data column with a boolean observation mask (True = observed)."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        mask = np.asarray(self.mask, dtype=bool).ravel()
        if values.shape != mask.shape:
            raise DimensionMismatch("values and mask must have the same length")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def full(cls, values) -> "ObservedColumn":
        values = np.asarray(values, dtype=float).ravel()
        return cls(values, np.ones(values.shape, dtype=bool))

    @property
    def observed_count(self) -> int:
        return int(self.mask.sum())

    @property
    def observed(self) -> np.ndarray:
        return self.values[self.mask]


def _as_columns(U) -> tuple[np.ndarray, bool]:
    if isinstance(U, SubspaceBasis):
        return U.columns, U.orthonormal
    return np.atleast_2d(np.asarray(U, dtype=float).T).T, False


def orthonormalize(B) -> SubspaceBasis:
    """Orthonormal basis for the column space of ``B`` via thin QR.

    Column signs are fixed so that the triangular factor has a positive
    diagonal, which makes the result a deterministic function of ``B``.

    Raises
    ------
    RankDeficient
        If the smallest diagonal magnitude of the triangular factor is below
        ``1e-10`` times the largest.
    """
    B, _ = _as_columns(B)
    d, r = B.shape
    if d < r:
        raise DimensionMismatch(f"need d >= r, got {B.shape}")
    Q, R = np.linalg.qr(B)
    diag = np.abs(np.diag(R))
    if diag.max() == 0.0 or diag.min() < RANK_TOL * diag.max():
        raise RankDeficient(f"numerical rank below {r}")
    signs = np.sign(np.diag(R))
    return SubspaceBasis(Q * signs, orthonormal=True)


def projector(U) -> np.ndarray:
    """Projection matrix onto ``span(U)``."""
    cols, ortho = _as_columns(U)
    if ortho:
        return cols @ cols.T
    return cols @ np.linalg.solve(cols.T @ cols, cols.T)


def restricted_fit(x_obs: np.ndarray, U_obs: np.ndarray, gram_reg=None, orthonormal=False, ridge=0.0):
    """Least-squares fit of ``x_obs`` by the columns of ``U_obs``.

    Returns ``(residual, coeffs, value, regularized)``. ``value`` is the
    minimized ridge objective ``|residual|^2 + eps |coeffs|^2`` where ``eps``
    is ``ridge`` plus, if the Gram matrix is flagged ill-conditioned (fewer
    rows than columns, or condition estimate above ``1e12``), ``gram_reg``.
    Reporting the ridge objective keeps the value consistent with the gradient
    ``-2 residual coeffs^T`` (envelope theorem).

    With ``ridge == 0`` and ``gram_reg=None`` an ill-conditioned Gram raises
    :class:`IllConditioned`.
    """
    ell, r = U_obs.shape
    if orthonormal and ridge == 0:
        coeffs = U_obs.T @ x_obs
        resid = x_obs - U_obs @ coeffs
        return resid, coeffs, float(resid @ resid), False
    G = U_obs.T @ U_obs
    eps = ridge
    bad = False
    if ridge == 0:
        bad = ell < r or not np.isfinite(cond := np.linalg.cond(G)) or cond > COND_LIMIT
        if bad:
            if gram_reg is None:
                raise IllConditioned(f"restricted Gram ill-conditioned (rows={ell}, rank={r})")
            eps = gram_reg
    if eps:
        G = G + eps * np.eye(r)
    coeffs = np.linalg.solve(G, U_obs.T @ x_obs)
    resid = x_obs - U_obs @ coeffs
    value = float(resid @ resid)
    if eps:
        value += eps * float(coeffs @ coeffs)
    return resid, coeffs, value, bad


def point_residual(x: ObservedColumn, U, gram_reg=None) -> float:
    """Norm of the residual of ``x`` projected onto ``span(U)`` on x's observed rows."""
    if not isinstance(x, ObservedColumn):
        x = ObservedColumn.full(x)
    cols, ortho = _as_columns(U)
    if cols.shape[0] != x.values.shape[0]:
        raise DimensionMismatch("column and basis have different ambient dimension")
    if x.observed_count == 0:
        raise IllConditioned("column has no observed entries")
    full = x.observed_count == x.values.shape[0]
    resid, _, _, _ = restricted_fit(x.observed, cols[x.mask], gram_reg, orthonormal=ortho and full)
    return float(np.linalg.norm(resid))


def subspace_distance(Ui, Uj) -> float:
    """Projection-operator distance ``|P_i - P_j|_F`` between two subspaces.

    Evaluated as ``|(I - P_j) U_i|_F^2 + |(I - P_i) U_j|_F^2`` on orthonormal
    bases, which avoids the cancellation in ``r_i + r_j - 2 tr(P_i P_j)`` when
    the subspaces nearly coincide.
    """
    A, ortho_a = _as_columns(Ui)
    B, ortho_b = _as_columns(Uj)
    if A.shape[0] != B.shape[0]:
        raise DimensionMismatch(f"ambient dimensions differ: {A.shape[0]} vs {B.shape[0]}")
    if not ortho_a:
        A = orthonormalize(A).columns
    if not ortho_b:
        B = orthonormalize(B).columns
    C = A.T @ B
    sq = np.sum((B - A @ C) ** 2) + np.sum((A - B @ C.T) ** 2)
    return float(np.sqrt(sq))


def distances_to(U: np.ndarray, others: np.ndarray) -> np.ndarray:
    """Distances from one orthonormal ``(d, r)`` basis to a stack ``(m, d, r)``."""
    OtU = np.matmul(others.transpose(0, 2, 1), U)  # U_m^T U, shape (m, t, s)
    off_u = others - U @ OtU.transpose(0, 2, 1)
    off_o = U - others @ OtU
    sq = np.sum(off_u**2, axis=(1, 2)) + np.sum(off_o**2, axis=(1, 2))
    return np.sqrt(sq)


def pairwise_distances(bases: np.ndarray) -> np.ndarray:
    """Symmetric matrix of all pairwise distances for a stack ``(n, d, r)`` of orthonormal bases."""
    n = bases.shape[0]
    D = np.zeros((n, n))
    for i in range(n - 1):
        D[i, i + 1 :] = distances_to(bases[i], bases[i + 1 :])
    return D + D.T
