"""Lambda sweeps, fused-cluster counting, AIC-style scoring and the clusterpath record."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .completion import ClusterModel, complete
from .data import ObservedMatrix, load_matrix, save_matrix
from .errors import AllFailed, DegenerateRSS, FSCError
from .metrics import pairwise_distances
from .solver import FusionConfig, as_basis_stack, solve
from .spectral import ClusterAssignment

log = logging.getLogger(__name__)


def default_eps_fuse(r: int) -> float:
    return 1e-3 * math.sqrt(2 * r)


def fused_components(bases=None, eps_fuse=None, distances=None) -> tuple[int, np.ndarray]:
    """Connected components of the graph with edges where ``rho < eps_fuse``."""
    if distances is None:
        B = as_basis_stack(bases)
        D = pairwise_distances(B)
        r = B.shape[2]
    else:
        D = np.asarray(distances, dtype=float)
        r = None
    if eps_fuse is None:
        if r is None:
            raise ValueError("eps_fuse is required with a distance matrix")
        eps_fuse = default_eps_fuse(r)
    adj = D < eps_fuse
    np.fill_diagonal(adj, False)
    return connected_components(csr_matrix(adj), directed=False)


def count_clusters(bases=None, eps_fuse=None, distances=None) -> int:
    """Number of groups of fused subspaces (default ``eps_fuse = 1e-3 sqrt(2r)``)."""
    return int(fused_components(bases, eps_fuse, distances)[0])


def goodness_of_fit(X, model: ClusterModel) -> float:
    """``m ln(RSS / m) + 2 dof`` on the observed entries, lower is better.

    ``dof = K r (d - r) + n r``. Raises :class:`DegenerateRSS` when the fit
    is exact to rounding (RSS below ``1e-24`` times the observed energy).
    """
    if not isinstance(X, ObservedMatrix):
        X = ObservedMatrix.from_dense(X)
    d, n = X.shape
    r = model.coefficients.shape[1]
    m = int(X.mask.sum())
    diff = np.where(X.mask, X.values - model.completed, 0.0)
    rss = float(np.sum(diff**2))
    energy = float(np.sum(np.where(X.mask, X.values, 0.0) ** 2))
    if m == 0 or rss <= 1e-24 * max(energy, 1e-300):
        raise DegenerateRSS(f"residual sum of squares is zero (RSS={rss:.3g})")
    dof = model.K * r * (d - r) + n * r
    return m * math.log(rss / m) + 2.0 * dof


@dataclass
class PathPoint:
    lam: float
    K: int | None
    objective: float | None
    fit_score: float | None
    distances: np.ndarray | None = None
    labels: np.ndarray | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class ClusterpathRecord:
    points: list = field(default_factory=list)
    rank: int | None = None

    @property
    def lambda_grid(self) -> list[float]:
        return [p.lam for p in self.points]

    @property
    def counts(self) -> list:
        return [p.K for p in self.points]

    def save(self, out_dir) -> Path:
        """Write ``clusterpath.json`` plus one distance snapshot DSV per grid point."""
        out = Path(out_dir)
        (out / "snapshots").mkdir(parents=True, exist_ok=True)
        rows = []
        for idx, p in enumerate(self.points):
            entry = {"lambda": p.lam, "K": p.K, "objective": p.objective,
                     "fit_score": _json_float(p.fit_score), "snapshot_path": None}
            if p.distances is not None:
                rel = f"snapshots/rho_{idx:03d}.csv"
                save_matrix(out / rel, p.distances)
                entry["snapshot_path"] = rel
            if p.error is not None:
                entry["error"] = p.error
            rows.append(entry)
        path = out / "clusterpath.json"
        path.write_text(json.dumps(rows, indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "ClusterpathRecord":
        path = Path(path)
        rows = json.loads(path.read_text())
        points = []
        for row in rows:
            D = None
            if row.get("snapshot_path"):
                D = np.array(load_matrix(path.parent / row["snapshot_path"]).values)
            points.append(PathPoint(row["lambda"], row["K"], row["objective"],
                                    _float_from_json(row["fit_score"]), D, error=row.get("error")))
        return cls(points)


def _json_float(v):
    # JSON has no infinities; the -inf degenerate-fit marker is stored as a string
    if v is None or math.isfinite(v):
        return v
    return "-inf" if v < 0 else "inf"


def _float_from_json(v):
    return float(v) if isinstance(v, str) else v


def lambda_sweep(X, grid, config: FusionConfig, eps_fuse=None,
                 warm_start: bool = True) -> ClusterpathRecord:
    """Solve at every ``lam`` in ``grid`` (sorted ascending), warm-starting each from the last.

    ``K(lam)`` is the number of fused components. Each point is completed with
    that partition and scored with :func:`goodness_of_fit`; an exact fit is
    scored ``-inf``. A grid point whose solve fails is recorded with its error
    message and the sweep moves on, restarting cold.
    """
    if not isinstance(X, ObservedMatrix):
        X = ObservedMatrix.from_dense(X)
    lams = sorted(float(v) for v in grid)
    if not lams:
        raise ValueError("empty lambda grid")
    if any(b <= a for a, b in zip(lams, lams[1:])):
        raise ValueError("lambda grid must not contain duplicates")
    eps = default_eps_fuse(config.rank) if eps_fuse is None else eps_fuse
    record = ClusterpathRecord(rank=config.rank)
    init = None
    for lam in lams:
        try:
            state = solve(X, replace(config, lam=lam), init=init)
        except (FSCError, np.linalg.LinAlgError) as exc:
            log.warning("lambda=%g failed: %s", lam, exc)
            record.points.append(PathPoint(lam, None, None, None, error=f"{type(exc).__name__}: {exc}"))
            init = None
            continue
        D = pairwise_distances(state.bases)
        K, labels = fused_components(distances=D, eps_fuse=eps)
        try:
            model = complete(X, ClusterAssignment(labels, K), state.bases, config.rank, config.gram_reg)
            score = goodness_of_fit(X, model)
        except DegenerateRSS:
            score = -math.inf
        record.points.append(PathPoint(lam, int(K), state.objective, score, D, labels))
        if warm_start:
            init = state.bases
    return record


def select_model(record: ClusterpathRecord) -> tuple[float, int]:
    """Grid point with the lowest fit score; ties go to smaller K, then smaller lambda.

    Exact fits (score ``-inf``, typically ``lam`` near 0 with one subspace per
    point) are only eligible when nothing else is.
    """
    good = [p for p in record.points if p.ok and p.fit_score is not None]
    if not good:
        raise AllFailed("no grid point succeeded")
    finite = [p for p in good if math.isfinite(p.fit_score)]
    good = finite or good
    best = min(good, key=lambda p: (p.fit_score, p.K, p.lam))
    return best.lam, best.K


def rank_search(X, grid, config: FusionConfig, ranks, **kwargs) -> dict:
    """Run :func:`lambda_sweep` for each candidate rank, without pruning the data between ranks."""
    return {r: lambda_sweep(X, grid, replace(config, rank=r), **kwargs) for r in ranks}
