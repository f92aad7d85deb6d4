"""Labels from fused bases: similarity 1/rho, normalized Laplacian embedding, k-means."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import Degenerate
from .metrics import pairwise_distances
from .solver import as_basis_stack


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray
    K: int
    wcss: float = float("nan")

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=int).ravel()
        object.__setattr__(self, "labels", labels)
        if labels.size and (labels.min() < 0 or labels.max() >= self.K):
            raise ValueError("labels must lie in [0, K)")

    @classmethod
    def compact(cls, labels, wcss=float("nan")) -> "ClusterAssignment":
        """Relabel arbitrary integer labels to ``0..K-1`` in order of first appearance."""
        labels = np.asarray(labels).ravel()
        _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
        order = np.argsort(np.argsort(first))
        return cls(order[inverse], len(first), wcss)

    @property
    def n(self) -> int:
        return self.labels.size


def similarity(bases, eps_sim: float = 1e-8, distances=None) -> np.ndarray:
    """``S_ij = 1 / (rho(U_i, U_j) + eps_sim)`` off the diagonal, zero on it."""
    D = pairwise_distances(as_basis_stack(bases)) if distances is None else np.asarray(distances)
    S = 1.0 / (D + eps_sim)
    np.fill_diagonal(S, 0.0)
    return 0.5 * (S + S.T)


def laplacian(S: np.ndarray) -> np.ndarray:
    """Symmetric normalized Laplacian ``I - D^{-1/2} S D^{-1/2}``; isolated vertices keep a unit diagonal."""
    deg = S.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    L = np.eye(S.shape[0]) - inv_sqrt[:, None] * S * inv_sqrt[None, :]
    return 0.5 * (L + L.T)


def spectral_embed(S: np.ndarray, K: int, return_eigenvalues: bool = False):
    """Rows of the ``K`` bottom Laplacian eigenvectors, each scaled to unit norm.

    An all-zero row of ``S`` (isolated vertex) triggers a :class:`Degenerate`
    warning; that vertex is an extra connected component and the embedding is
    still returned.
    """
    S = np.asarray(S, dtype=float)
    n = S.shape[0]
    if not 1 <= K <= n:
        raise ValueError(f"K must lie in [1, {n}]")
    if np.any(~S.any(axis=1)) and n > 1:
        warnings.warn(Degenerate("similarity matrix has an isolated vertex"), stacklevel=2)
    evals, evecs = np.linalg.eigh(laplacian(S))
    V = evecs[:, :K]
    norms = np.linalg.norm(V, axis=1)
    V = np.divide(V, norms[:, None], out=np.zeros_like(V), where=norms[:, None] > 0)
    if return_eigenvalues:
        return V, evals
    return V


def _kmeanspp(points, K, rng):
    n = points.shape[0]
    centers = [points[rng.integers(n)]]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(points[idx])
        d2 = np.minimum(d2, np.sum((points - points[idx]) ** 2, axis=1))
    return np.array(centers)


def _lloyd(points, centers, max_iter, tol):
    for _ in range(max_iter):
        dist = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = dist.argmin(axis=1)
        new = centers.copy()
        for k in range(centers.shape[0]):
            members = labels == k
            if members.any():
                new[k] = points[members].mean(axis=0)
            else:
                # reseed at the point farthest from its current centre
                far = dist[np.arange(points.shape[0]), labels].argmax()
                new[k] = points[far]
                labels[far] = k
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift <= tol:
            break
    dist = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = dist.argmin(axis=1)
    return labels, float(dist[np.arange(points.shape[0]), labels].sum())


def kmeans(points, K: int, restarts: int = 10, seed: int = 0, max_iter: int = 100,
           tol: float = 1e-9) -> ClusterAssignment:
    """Lloyd's algorithm with k-means++ seeding; best of ``restarts`` by WCSS.

    Ties in WCSS go to the earliest restart.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    n = points.shape[0]
    if not 1 <= K <= n:
        raise ValueError(f"need 1 <= K <= n, got K={K}, n={n}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        labels, wcss = _lloyd(points, _kmeanspp(points, K, rng), max_iter, tol)
        if best is None or wcss < best[1]:
            best = (labels, wcss)
    labels, wcss = best
    # empty clusters cannot survive the final assignment when K <= number of distinct points;
    # compact so that every id in [0, K) is used
    return ClusterAssignment.compact(labels, wcss)


def cluster(bases, K: int, eps_sim: float = 1e-8, restarts: int = 10, seed: int = 0,
            distances=None) -> ClusterAssignment:
    """Spectral clustering of the subspaces into ``K`` groups."""
    B = None if distances is not None else as_basis_stack(bases)
    n = distances.shape[0] if distances is not None else B.shape[0]
    if K == 1 or n == 1:
        return ClusterAssignment(np.zeros(n, dtype=int), 1)
    S = similarity(B, eps_sim, distances=distances)
    V = spectral_embed(S, K)
    return kmeans(V, K, restarts=restarts, seed=seed)


def zero_fill_baseline(X, K: int, restarts: int = 10, seed: int = 0) -> ClusterAssignment:
    """Reference clustering that ignores the mask.

    Missing entries are set to 0, columns are scaled to unit norm, and the
    absolute inner products ``|x_i^T x_j|`` are fed to the same spectral step.
    """
    Z = np.asarray(X.zero_filled() if hasattr(X, "zero_filled") else X, dtype=float)
    norms = np.linalg.norm(Z, axis=0)
    Z = np.divide(Z, norms, out=np.zeros_like(Z), where=norms > 0)
    S = np.abs(Z.T @ Z)
    np.fill_diagonal(S, 0.0)
    if K == 1:
        return ClusterAssignment(np.zeros(Z.shape[1], dtype=int), 1)
    return kmeans(spectral_embed(S, K), K, restarts=restarts, seed=seed)
