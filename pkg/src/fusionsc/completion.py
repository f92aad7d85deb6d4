"""Per-cluster subspace estimates by basis averaging, and column completion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ObservedMatrix
from .errors import DimensionMismatch, EmptyCluster, LengthMismatch
from .metrics import ObservedColumn, SubspaceBasis, _as_columns, restricted_fit
from .solver import as_basis_stack
from .spectral import ClusterAssignment


@dataclass
class ClusterModel:
    assignment: ClusterAssignment
    cluster_bases: list  # K SubspaceBasis
    coefficients: np.ndarray  # (n, r)
    completed: np.ndarray  # hard variant: every entry replaced by the model
    completed_soft: np.ndarray  # observed entries kept
    ill_conditioned: np.ndarray  # per-column flag, ridge used (fewer than r rows, or near-singular)

    @property
    def K(self) -> int:
        return self.assignment.K


def average_bases(bases, assignment, r: int) -> list[SubspaceBasis]:
    """Top-``r`` left singular vectors of each cluster's concatenated member bases."""
    B = as_basis_stack(bases)
    labels = np.asarray(getattr(assignment, "labels", assignment))
    K = getattr(assignment, "K", int(labels.max()) + 1)
    if labels.size != B.shape[0]:
        raise LengthMismatch("assignment and bases differ in length")
    out = []
    for k in range(K):
        members = np.flatnonzero(labels == k)
        if members.size == 0:
            raise EmptyCluster(f"cluster {k} has no members")
        W = np.concatenate(list(B[members]), axis=1)
        if W.shape[1] < r:
            raise DimensionMismatch(f"cluster {k} spans fewer than r={r} columns")
        Uk, _, _ = np.linalg.svd(W, full_matrices=False)
        out.append(SubspaceBasis(Uk[:, :r], orthonormal=True))
    return out


def coefficients(x: ObservedColumn, Uhat, gram_reg=1e-10) -> tuple[np.ndarray, bool]:
    """Least-squares coefficients of ``x`` on the observed rows of ``Uhat``.

    Returns ``(theta, ill_conditioned)``; the flag marks columns that needed
    the ridge (usually fewer than ``r`` observed rows).
    """
    if not isinstance(x, ObservedColumn):
        x = ObservedColumn.full(x)
    cols, ortho = _as_columns(Uhat)
    if x.observed_count == 0:
        return np.zeros(cols.shape[1]), True
    full = x.observed_count == x.values.size
    _, theta, _, bad = restricted_fit(x.observed, cols[x.mask], gram_reg, orthonormal=ortho and full)
    return theta, bad


def complete(X, assignment, bases, r: int, gram_reg=1e-10, cluster_bases=None) -> ClusterModel:
    """Fill every column with ``Uhat_k theta_i`` for its cluster ``k``.

    ``cluster_bases`` may be given to skip the averaging step (e.g. to
    re-complete with an existing model).
    """
    if not isinstance(X, ObservedMatrix):
        X = ObservedMatrix.from_dense(X)
    labels_arr = np.asarray(getattr(assignment, "labels", assignment)).ravel()
    if labels_arr.size != X.n:
        raise LengthMismatch(f"{labels_arr.size} labels for {X.n} columns")
    if not isinstance(assignment, ClusterAssignment):
        assignment = ClusterAssignment(labels_arr, int(labels_arr.max()) + 1)
    if cluster_bases is None:
        cluster_bases = average_bases(bases, assignment, r)
    theta = np.zeros((X.n, r))
    hard = np.zeros(X.shape)
    flags = np.zeros(X.n, dtype=bool)
    for i in range(X.n):
        Uk = cluster_bases[assignment.labels[i]]
        theta[i], flags[i] = coefficients(X.column(i), Uk, gram_reg)
        hard[:, i] = Uk.columns @ theta[i]
    soft = np.where(X.mask, X.values, hard)
    return ClusterModel(assignment, cluster_bases, theta, hard, soft, flags)
