"""Fusion objective and its coordinate gradient descent solver.

Each data column ``x_i`` gets its own orthonormal basis ``U_i``. The solver
minimizes

    sum_i rho^2(x_i^O, U_i^O) + (lam / 2) sum_i sum_j w_ij rho(U_i, U_j)

where ``rho(x^O, U^O)`` is the least-squares residual on the observed rows of
column ``i`` and ``rho(U_i, U_j)`` is the projection-operator distance. The
weights are ``sqrt(r d) * exp(-gamma rho^2(U_i, U_j))`` on a symmetric
k-nearest-neighbour mask and zero elsewhere. The mask is frozen between
refreshes while the Gaussian kernel is evaluated on the current bases, so the
gradient differentiates through it.
"""

from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import ObservedMatrix
from .errors import DimensionMismatch, IllConditioned, RankDeficient, ZeroColumn
from .metrics import (
    ObservedColumn,
    SubspaceBasis,
    _as_columns,
    distances_to,
    orthonormalize,
    pairwise_distances,
    restricted_fit,
)

log = logging.getLogger(__name__)

FUSED_RHO = 1e-12


class FSCWarning(UserWarning):
    pass


@dataclass(frozen=True)
class FusionConfig:
    """Solver parameters.

    ``lam`` is the fusion strength, ``gamma`` the kernel sharpness and ``knn``
    the neighbour count. ``parallel`` switches from Gauss-Seidel sweeps to
    Jacobi sweeps whose gradients are evaluated concurrently.
    """

    lam: float = 1e-2
    gamma: float = 0.0
    knn: int = 5
    rank: int = 5
    step: float = 1e-2
    backtrack: float = 0.5
    max_backtracks: int = 60
    max_sweeps: int = 200
    rel_tol: float = 1e-6
    nn_refresh: int = 1
    seed: int = 0
    gram_reg: float = 1e-10
    parallel: bool = False
    threads: int | None = None
    gn_scaling: bool = False
    kernel: str = "live"
    ridge: float = 0.0

    def __post_init__(self):
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lam and gamma must be nonnegative")
        if self.knn < 1 or self.rank < 1:
            raise ValueError("knn and rank must be positive")
        if not self.step > 0 or not self.rel_tol > 0:
            raise ValueError("step and rel_tol must be positive")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack must lie in (0, 1)")
        if self.max_sweeps < 1 or self.nn_refresh < 1 or self.max_backtracks < 0:
            raise ValueError("max_sweeps and nn_refresh must be positive")
        if self.gram_reg < 0 or self.ridge < 0:
            raise ValueError("gram_reg and ridge must be nonnegative")
        if self.kernel not in ("live", "frozen"):
            raise ValueError("kernel must be 'live' or 'frozen'")


@dataclass
class WeightMatrix:
    values: np.ndarray
    neighbor_mask: np.ndarray


@dataclass
class SolverState:
    bases: np.ndarray  # (n, d, r), orthonormal columns
    weights: WeightMatrix
    objective: float
    sweep: int
    grad_norm: float
    converged: bool = False
    trace: list = field(default_factory=list)
    epochs: list = field(default_factory=lambda: [0])
    grad_norms: list = field(default_factory=list)
    sweep_objectives: list = field(default_factory=list)
    skipped: int = 0

    @property
    def n(self) -> int:
        return self.bases.shape[0]

    def basis(self, i: int) -> SubspaceBasis:
        return SubspaceBasis(self.bases[i], orthonormal=True)

    def trace_segments(self) -> list[list[float]]:
        """The objective trace split at neighbour-mask changes."""
        bounds = list(self.epochs) + [len(self.trace)]
        return [self.trace[a:b] for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def as_basis_stack(bases) -> np.ndarray:
    """Stack a sequence of bases (or an ``(n, d, r)`` array) into an orthonormal array."""
    if isinstance(bases, np.ndarray) and bases.ndim == 3:
        return bases
    cols = []
    for U in bases:
        B, ortho = _as_columns(U)
        cols.append(B if ortho else orthonormalize(B).columns)
    return np.stack(cols)


def _check_matrix(X) -> ObservedMatrix:
    if isinstance(X, ObservedMatrix):
        return X
    return ObservedMatrix.from_dense(X)


def init_bases(X, r: int, seed: int = 0) -> np.ndarray:
    """Per-column starting bases: ``x_i`` (zero-filled) plus ``r - 1`` Gaussian vectors.

    Every column consumes one ``d x r`` Gaussian draw, so the random stream
    does not depend on the data. Columns with no usable observed entries get
    the full Gaussian draw and a :class:`FSCWarning`.
    """
    X = _check_matrix(X)
    d, n = X.shape
    if not 1 <= r <= d:
        raise DimensionMismatch(f"need 1 <= r <= d, got r={r}, d={d}")
    rng = np.random.default_rng(seed)
    filled = X.zero_filled()
    out = np.empty((n, d, r))
    for i in range(n):
        g = rng.standard_normal((d, r))
        x = filled[:, i]
        if not np.any(x):
            warnings.warn(f"column {i}: {ZeroColumn.__name__}, using a Gaussian basis", FSCWarning)
            B = g
        else:
            B = np.column_stack([x, g[:, : r - 1]])
        try:
            out[i] = orthonormalize(B).columns
        except RankDeficient:
            out[i] = orthonormalize(g).columns
    return out


def knn_mask(D: np.ndarray, knn: int) -> np.ndarray:
    """Symmetric mask: j among the ``knn`` nearest of i, or i among those of j."""
    n = D.shape[0]
    if not 1 <= knn <= n - 1:
        raise ValueError(f"knn must lie in [1, n-1] = [1, {n - 1}], got {knn}")
    mask = np.zeros((n, n), dtype=bool)
    for i in range(n):
        row = D[i].copy()
        row[i] = np.inf
        nearest = np.argsort(row, kind="stable")[:knn]
        mask[i, nearest] = True
    return mask | mask.T


def kernel_weights(D: np.ndarray, neighbor_mask: np.ndarray, gamma: float, r: int, d: int) -> WeightMatrix:
    values = np.where(neighbor_mask, np.sqrt(r * d) * np.exp(-gamma * D**2), 0.0)
    np.fill_diagonal(values, 0.0)
    return WeightMatrix(values, neighbor_mask.copy())


def compute_weights(bases, gamma: float, knn: int, r: int, d: int) -> WeightMatrix:
    B = as_basis_stack(bases)
    D = pairwise_distances(B)
    return kernel_weights(D, knn_mask(D, knn), gamma, r, d)


def _residual_value(xo: np.ndarray, Uo: np.ndarray, gram_reg, ridge) -> float:
    if xo.size == 0:
        return 0.0
    return restricted_fit(xo, Uo, gram_reg, ridge=ridge)[2]


def residual_term(X, bases, gram_reg=1e-10, ridge=0.0) -> np.ndarray:
    """Per-column squared residuals on observed rows (ridge objectives if ``ridge > 0``)."""
    X = _check_matrix(X)
    B = as_basis_stack(bases)
    return np.array([_residual_value(X.values[X.mask[:, i], i], B[i][X.mask[:, i]], gram_reg, ridge)
                     for i in range(X.n)])


def objective(X, bases, weights: WeightMatrix, lam: float, gram_reg=1e-10, ridge=0.0) -> float:
    """Fusion objective with the given (fixed) weight values."""
    X = _check_matrix(X)
    B = as_basis_stack(bases)
    if B.shape[0] != X.n or B.shape[1] != X.d:
        raise DimensionMismatch(f"bases {B.shape} do not match data {X.shape}")
    value = float(residual_term(X, B, gram_reg, ridge).sum())
    if lam > 0 and X.n > 1:
        D = pairwise_distances(B)
        value += 0.5 * lam * float(np.sum(weights.values * D))
    return value


def live_objective(X, bases, neighbor_mask, config: FusionConfig) -> float:
    """Objective with kernel weights evaluated at ``bases`` on a frozen mask."""
    B = as_basis_stack(bases)
    D = pairwise_distances(B)
    W = kernel_weights(D, neighbor_mask, config.gamma, B.shape[2], B.shape[1])
    return objective(X, B, W, config.lam, config.gram_reg, config.ridge)


def residual_gradient(x: ObservedColumn, U, gram_reg=1e-10, ridge=0.0) -> np.ndarray:
    """Gradient of ``rho^2(x^O, U^O)`` with respect to ``U``.

    On observed rows this is ``-2 e a^T`` with coefficients ``a`` and residual
    ``e`` of the restricted least-squares fit, i.e.
    ``-2 x x^T U G^{-1} + 2 U G^{-1} U^T x x^T U G^{-1}`` with ``G = U^{OT} U^O``.
    Unobserved rows are zero. The same ``-2 e a^T`` form is exact for the
    ridge objective, with ``a`` the ridge coefficients.
    """
    if not isinstance(x, ObservedColumn):
        x = ObservedColumn.full(x)
    cols, _ = _as_columns(U)
    if cols.shape[0] != x.values.shape[0]:
        raise DimensionMismatch("column and basis have different ambient dimension")
    grad = np.zeros_like(cols)
    if x.observed_count == 0:
        return grad
    resid, coeffs, _, _ = restricted_fit(x.observed, cols[x.mask], gram_reg, ridge=ridge)
    grad[x.mask] = -2.0 * np.outer(resid, coeffs)
    return grad


def fusion_gradient(Ui, Uj) -> np.ndarray:
    """``(P_i - I) P_j U_i (U_i^T U_i)^{-1}``; the gradient of ``rho^2(U_i, U_j)`` is four times this."""
    A, ortho_a = _as_columns(Ui)
    B, ortho_b = _as_columns(Uj)
    if A.shape[0] != B.shape[0]:
        raise DimensionMismatch("ambient dimensions differ")
    if ortho_b:
        PjA = B @ (B.T @ A)
    else:
        PjA = B @ np.linalg.solve(B.T @ B, B.T @ A)
    if ortho_a:
        return A @ (A.T @ PjA) - PjA
    G = A.T @ A
    M = A @ np.linalg.solve(G, A.T @ PjA) - PjA
    return np.linalg.solve(G, M.T).T


def _fusion_coefficients(rho: np.ndarray, lam: float, gamma: float, scale: float) -> np.ndarray:
    # d/dU of lam * w(rho) * rho with w = scale * exp(-gamma rho^2), via d rho = 2 grad''/rho
    live = rho >= FUSED_RHO
    coef = np.zeros_like(rho)
    r2 = rho[live] ** 2
    coef[live] = 2.0 * lam * scale * np.exp(-gamma * r2) * (1.0 - 2.0 * gamma * r2) / rho[live]
    return coef


def full_gradient(i: int, state: SolverState, X, config: FusionConfig) -> np.ndarray:
    """Gradient of the objective with respect to ``U_i`` (other bases fixed).

    Pairs with ``rho < 1e-12`` contribute zero, a valid subgradient choice of
    the distance term at a fused pair.
    """
    X = _check_matrix(X)
    B = state.bases
    if not 0 <= i < B.shape[0]:
        raise IndexError(i)
    grad = residual_gradient(X.column(i), SubspaceBasis(B[i], orthonormal=True),
                             config.gram_reg, config.ridge)
    if config.lam == 0:
        return grad
    nbrs = np.flatnonzero(state.weights.neighbor_mask[i])
    nbrs = nbrs[nbrs != i]
    if nbrs.size == 0:
        return grad
    U = B[i]
    rho = distances_to(U, B[nbrs])
    coef = _fusion_coefficients(rho, config.lam, config.gamma, np.sqrt(B.shape[2] * B.shape[1]))
    for c, j in zip(coef, nbrs):
        if c != 0.0:
            grad = grad + c * fusion_gradient(SubspaceBasis(U, orthonormal=True),
                                              SubspaceBasis(B[j], orthonormal=True))
    return grad


class _Problem:
    """Column data and cached per-coordinate evaluations for one solve.

    ``W`` holds frozen weight values in ``kernel="frozen"`` mode and is None
    when the kernel is evaluated live.
    """

    def __init__(self, X: ObservedMatrix, config: FusionConfig):
        self.X = X
        self.cfg = config
        self.d, self.n = X.shape
        self.r = config.rank
        self.scale = np.sqrt(self.r * self.d)
        self.obs = [np.flatnonzero(X.mask[:, i]) for i in range(self.n)]
        self.xo = [X.values[idx, i] for i, idx in enumerate(self.obs)]
        self.energy = float(sum(v @ v for v in self.xo))
        self.W = None

    def residual_and_grad(self, i: int, U: np.ndarray):
        idx = self.obs[i]
        grad = np.zeros_like(U)
        if idx.size == 0:
            return 0.0, grad, None
        full = idx.size == self.d
        resid, coeffs, value, _ = restricted_fit(self.xo[i], U[idx], self.cfg.gram_reg, full, self.cfg.ridge)
        grad[idx] = -2.0 * np.outer(resid, coeffs)
        return value, grad, coeffs

    def residual(self, i: int, U: np.ndarray) -> float:
        idx = self.obs[i]
        if idx.size == 0:
            return 0.0
        return restricted_fit(self.xo[i], U[idx], self.cfg.gram_reg, idx.size == self.d, self.cfg.ridge)[2]

    def _weights(self, i, nbrs, rho):
        if self.W is not None:
            return self.W[i, nbrs]
        return self.scale * np.exp(-self.cfg.gamma * rho**2)

    def fusion_local(self, i: int, U: np.ndarray, nbrs: np.ndarray, others: np.ndarray):
        """``lam * sum_j w_ij rho_ij`` over the neighbours of coordinate ``i``."""
        if nbrs.size == 0 or self.cfg.lam == 0:
            return 0.0, np.zeros(0)
        rho = distances_to(U, others)
        return self.cfg.lam * float(self._weights(i, nbrs, rho) @ rho), rho

    def coordinate(self, i: int, U: np.ndarray, nbrs: np.ndarray, others: np.ndarray):
        """Local objective, gradient and fit coefficients for coordinate ``i``."""
        res, grad, coeffs = self.residual_and_grad(i, U)
        fus, rho = self.fusion_local(i, U, nbrs, others)
        if rho.size:
            if self.W is None:
                coef = _fusion_coefficients(rho, self.cfg.lam, self.cfg.gamma, self.scale)
            else:
                coef = np.zeros_like(rho)
                live = rho >= FUSED_RHO
                coef[live] = 2.0 * self.cfg.lam * self.W[i, nbrs[live]] / rho[live]
            if np.any(coef):
                C = np.matmul(others.transpose(0, 2, 1), U) * coef[:, None, None]
                A = np.matmul(others, C).sum(axis=0)  # sum_j c_j P_j U_i
                grad = grad + (U @ (U.T @ A) - A)
        return res + fus, grad, coeffs

    def step(self, i: int, U: np.ndarray, grad: np.ndarray, coeffs, t: float) -> np.ndarray:
        """Trial point ``U - t * grad``, with the Gauss-Newton cap on the coefficient direction.

        The residual's curvature is about ``2 |a|^2`` along ``grad a a^T / |a|^2``
        (``a`` the fit coefficients), so that component's step is capped at
        ``1 / (2 |a|^2)`` while the rest of the gradient takes the full step.
        """
        if not self.cfg.gn_scaling or coeffs is None:
            return U - t * grad
        aa = float(coeffs @ coeffs)
        t_cap = 0.5 / aa if aa > 0 else t
        if t <= t_cap:
            return U - t * grad
        idx = self.obs[i]
        along = np.zeros_like(grad)
        along[idx] = np.outer(grad[idx] @ coeffs, coeffs) / aa
        return U - t * (grad - along) - t_cap * along

    def weight_matrix(self, B: np.ndarray, mask: np.ndarray, D=None) -> np.ndarray:
        if self.W is not None:
            return self.W
        D = pairwise_distances(B) if D is None else D
        return kernel_weights(D, mask, self.cfg.gamma, self.r, self.d).values

    def total(self, B: np.ndarray, mask: np.ndarray) -> float:
        res = sum(self.residual(i, B[i]) for i in range(self.n))
        if self.cfg.lam == 0 or self.n < 2:
            return float(res)
        D = pairwise_distances(B)
        return float(res + 0.5 * self.cfg.lam * np.sum(self.weight_matrix(B, mask, D) * D))


def _qr(M: np.ndarray) -> np.ndarray | None:
    try:
        return orthonormalize(M).columns
    except RankDeficient:
        return None


def _sweep_gauss_seidel(prob: _Problem, B, nbrs, state: SolverState, obj: float) -> tuple[float, float]:
    cfg = prob.cfg
    gmax = 0.0
    for i in range(prob.n):
        others = B[nbrs[i]]
        f_old, g, coeffs = prob.coordinate(i, B[i], nbrs[i], others)
        gnorm = float(np.linalg.norm(g))
        gmax = max(gmax, gnorm)
        if gnorm == 0.0:
            continue
        t = cfg.step
        for _ in range(cfg.max_backtracks + 1):
            cand = _qr(prob.step(i, B[i], g, coeffs, t))
            if cand is not None:
                f_new = prob.residual(i, cand) + prob.fusion_local(i, cand, nbrs[i], others)[0]
                if f_new <= f_old:
                    B[i] = cand
                    obj = obj + (f_new - f_old)
                    state.trace.append(obj)
                    break
            t *= cfg.backtrack
        else:
            state.skipped += 1
    return obj, gmax


def _sweep_jacobi(prob: _Problem, B, nbrs, mask, state: SolverState, obj: float) -> tuple[float, float]:
    cfg = prob.cfg
    snapshot = B.copy()

    def grad(i):
        return prob.coordinate(i, snapshot[i], nbrs[i], snapshot[nbrs[i]])

    workers = cfg.threads or int(os.environ.get("FSC_THREADS", "0")) or os.cpu_count() or 1
    with ThreadPoolExecutor(max_workers=workers) as pool:
        grads = list(pool.map(grad, range(prob.n)))
    gmax = max(float(np.linalg.norm(g[1])) for g in grads)
    if gmax == 0.0:
        return obj, gmax
    t = cfg.step
    for _ in range(cfg.max_backtracks + 1):
        cand = [_qr(prob.step(i, snapshot[i], grads[i][1], grads[i][2], t)) for i in range(prob.n)]
        if all(c is not None for c in cand):
            cand = np.stack(cand)
            f_new = prob.total(cand, mask)
            if f_new <= obj:
                B[:] = cand
                obj = f_new
                state.trace.append(obj)
                break
        t *= cfg.backtrack
    else:
        state.skipped += prob.n
    return obj, gmax


def solve(X, config: FusionConfig, init=None, neighbor_mask=None, callback=None) -> SolverState:
    """Minimize the fusion objective by coordinate gradient descent.

    Sweeps visit coordinates in ascending order (Jacobi updates instead when
    ``config.parallel``). Each step backtracks from ``config.step`` until the
    objective does not increase, skipping the coordinate after
    ``max_backtracks`` shrinks, and re-orthonormalizes the accepted basis.
    The neighbour mask is rebuilt from current distances every
    ``nn_refresh`` sweeps; the objective trace restarts (a new entry in
    ``state.epochs``) only when the rebuilt mask differs.

    ``init`` optionally supplies starting bases (for warm starts).
    ``neighbor_mask`` fixes the neighbour graph for the whole run instead
    (e.g. the same-label pairs when labels are known); it is never refreshed.
    ``callback(sweep, bases, objective)`` is called after every sweep with a
    read-only view of the bases.
    """
    X = _check_matrix(X)
    d, n = X.shape
    cfg = config
    if n < 2:
        raise DimensionMismatch("solve needs at least two columns")
    if not 1 <= cfg.rank <= d:
        raise DimensionMismatch(f"need 1 <= rank <= d, got rank={cfg.rank}, d={d}")
    if cfg.knn > n - 1:
        cfg = replace(cfg, knn=n - 1)
        log.info("knn clipped to n-1=%d", n - 1)
    if init is None:
        B = init_bases(X, cfg.rank, cfg.seed)
    else:
        B = np.array(as_basis_stack(init), dtype=float)
        if B.shape != (n, d, cfg.rank):
            raise DimensionMismatch(f"init bases {B.shape} do not match {(n, d, cfg.rank)}")
    prob = _Problem(X, cfg)
    D = pairwise_distances(B)
    fixed = neighbor_mask is not None
    if fixed:
        mask = np.array(neighbor_mask, dtype=bool)
        if mask.shape != (n, n) or not np.array_equal(mask, mask.T):
            raise DimensionMismatch("neighbor_mask must be a symmetric n x n boolean matrix")
        np.fill_diagonal(mask, False)
    else:
        mask = knn_mask(D, cfg.knn)
    if cfg.kernel == "frozen":
        prob.W = kernel_weights(D, mask, cfg.gamma, cfg.rank, d).values
    obj = prob.total(B, mask)
    state = SolverState(B, WeightMatrix(np.zeros((n, n)), mask), obj, 0, np.inf)
    state.trace.append(obj)
    floor = 1e-12 * max(prob.energy, 1.0)

    for sweep in range(1, cfg.max_sweeps + 1):
        if not fixed and sweep > 1 and (sweep - 1) % cfg.nn_refresh == 0:
            D = pairwise_distances(B)
            new_mask = knn_mask(D, cfg.knn)
            changed = not np.array_equal(new_mask, mask)
            if cfg.kernel == "frozen":
                new_W = kernel_weights(D, new_mask, cfg.gamma, cfg.rank, d).values
                changed = changed or not np.array_equal(new_W, prob.W)
                prob.W = new_W
            if changed:
                mask = new_mask
                obj = prob.total(B, mask)
                state.epochs.append(len(state.trace))
                state.trace.append(obj)
        nbrs = [np.flatnonzero(mask[i]) for i in range(n)]
        start = obj
        if cfg.parallel:
            obj, gmax = _sweep_jacobi(prob, B, nbrs, mask, state, obj)
        else:
            obj, gmax = _sweep_gauss_seidel(prob, B, nbrs, state, obj)
        state.grad_norms.append(gmax)
        state.sweep_objectives.append(obj)
        state.sweep = sweep
        if callback is not None:
            view = B.view()
            view.setflags(write=False)
            callback(sweep, view, obj)
        if abs(start - obj) <= cfg.rel_tol * max(abs(start), floor):
            state.converged = True
            break

    if prob.W is not None:
        state.weights = WeightMatrix(prob.W.copy(), mask.copy())
    else:
        state.weights = kernel_weights(pairwise_distances(B), mask, cfg.gamma, cfg.rank, d)
    state.objective = objective(X, B, state.weights, cfg.lam, cfg.gram_reg, cfg.ridge)
    state.grad_norm = state.grad_norms[-1] if state.grad_norms else 0.0
    if not state.converged:
        log.info("not converged after %d sweeps", state.sweep)
    return state
