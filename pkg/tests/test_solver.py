import numpy as np
import pytest

from fusionsc.data import ObservedMatrix, SyntheticSpec, generate_synthetic
from fusionsc.errors import DimensionMismatch
from fusionsc.metrics import ObservedColumn, SubspaceBasis, orthonormalize, pairwise_distances, point_residual
from fusionsc.solver import (
    FSCWarning,
    FusionConfig,
    SolverState,
    WeightMatrix,
    compute_weights,
    full_gradient,
    fusion_gradient,
    init_bases,
    kernel_weights,
    knn_mask,
    live_objective,
    objective,
    residual_gradient,
    residual_term,
    solve,
)
from oracles import (
    brute_knn_mask,
    central_difference,
    deleted_rows_residual,
    dense_projector,
    direct_objective,
    kernel_objective,
    projector_distance,
    random_orthonormal,
)


def small_instance(p=0.0, seed=0, d=10, K=2, r=2, n_k=3, sigma=0.0):
    return generate_synthetic(SyntheticSpec(d=d, K=K, r=r, n_k=n_k, p=p, sigma=sigma, seed=seed))


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def assert_descent(state):
    for seg in state.trace_segments():
        assert all(b <= a for a, b in zip(seg, seg[1:]))


# initialization

def test_init_contains_full_columns():
    X = small_instance(d=20, r=3).observed
    B = init_bases(X, 3, seed=1)
    for i in range(X.n):
        assert point_residual(X.values[:, i], SubspaceBasis(B[i], True)) < 1e-9
        assert np.linalg.norm(B[i].T @ B[i] - np.eye(3)) < 1e-10


def test_init_is_deterministic():
    X = small_instance(p=0.3).observed
    assert np.array_equal(init_bases(X, 2, 5), init_bases(X, 2, 5))


def test_init_zero_filled_column_lies_in_basis():
    X = small_instance(p=0.4, d=15).observed
    B = init_bases(X, 2, 0)
    for i in range(X.n):
        assert point_residual(X.zero_filled()[:, i], SubspaceBasis(B[i], True)) < 1e-9


def test_init_unobserved_column_warns():
    vals = np.ones((6, 3))
    mask = np.ones((6, 3), dtype=bool)
    mask[:, 1] = False
    with pytest.warns(FSCWarning):
        B = init_bases(ObservedMatrix(vals, mask), 2, 0)
    assert np.linalg.norm(B[1].T @ B[1] - np.eye(2)) < 1e-10


def test_init_distances_match_random_subspace_sampling():
    # unstructured data, so each initial subspace is a uniformly random 5-plane
    rng = np.random.default_rng(3)
    X = ObservedMatrix.from_dense(rng.standard_normal((100, 40)))
    D = pairwise_distances(init_bases(X, 5, seed=7))
    got = D[np.triu_indices(40, 1)].mean()
    samples = [projector_distance(rng.standard_normal((100, 5)), rng.standard_normal((100, 5))) for _ in range(1000)]
    assert abs(got - np.mean(samples)) < 5 * np.std(samples) / np.sqrt(100)


# weights

def test_uniform_weights_when_gamma_zero(rng):
    bases = np.stack([random_orthonormal(rng, 8, 2) for _ in range(6)])
    W = compute_weights(bases, 0.0, 2, 2, 8)
    assert np.all(W.values[W.neighbor_mask] == np.sqrt(16))
    assert np.all(W.values[~W.neighbor_mask] == 0)


def test_full_neighbourhood(rng):
    bases = np.stack([random_orthonormal(rng, 8, 2) for _ in range(5)])
    W = compute_weights(bases, 0.3, 4, 2, 8)
    assert np.array_equal(W.neighbor_mask, ~np.eye(5, dtype=bool))


def test_knn_hand_table_matches_brute_force():
    D = np.array([[0, 1, 4, 5], [1, 0, 2, 6], [4, 2, 0, 3], [5, 6, 3, 0]], dtype=float)
    expected = brute_knn_mask(D, 1)
    assert np.array_equal(knn_mask(D, 1), expected)
    # 0-1 mutual, 2 picks 1, 3 picks 2: the "or vice versa" rule adds 1-2 and 2-3
    assert expected[1, 2] and expected[2, 3] and not expected[0, 3]


def test_knn_random_matches_brute_force(rng):
    for _ in range(20):
        A = rng.random((9, 9))
        D = A + A.T
        np.fill_diagonal(D, 0)
        k = int(rng.integers(1, 8))
        assert np.array_equal(knn_mask(D, k), brute_knn_mask(D, k))


def test_weight_bound_and_symmetry(rng):
    bases = np.stack([random_orthonormal(rng, 10, 3) for _ in range(7)])
    W = compute_weights(bases, 0.5, 3, 3, 10)
    assert np.all(W.values <= np.sqrt(30))
    assert np.array_equal(W.values, W.values.T)
    assert np.all(np.diag(W.values) == 0)


# objective

def test_objective_zero_at_initialization():
    X = small_instance().observed
    B = init_bases(X, 2, 0)
    W = compute_weights(B, 0.0, 3, 2, X.d)
    assert objective(X, B, W, 0.0) < 1e-8


def test_objective_single_point(rng):
    x = rng.standard_normal((5, 1))
    U = random_orthonormal(rng, 5, 2)[None]
    W = WeightMatrix(np.zeros((1, 1)), np.zeros((1, 1), dtype=bool))
    assert objective(ObservedMatrix.from_dense(x), U, W, 3.0) == pytest.approx(
        deleted_rows_residual(x[:, 0], U[0], np.ones(5, bool)) ** 2)


def test_objective_matches_direct_evaluation(rng):
    X = small_instance(p=0.3, d=8, n_k=3, seed=4).observed
    bases = np.stack([random_orthonormal(rng, 8, 2) for _ in range(X.n)])
    W = compute_weights(bases, 0.4, 2, 2, 8)
    ref = direct_objective(X.values, X.mask, bases, W.values, 0.7)
    assert abs(objective(X, bases, W, 0.7) - ref) / ref < 1e-10


def test_objective_dimension_check(rng):
    X = small_instance().observed
    B = np.stack([random_orthonormal(rng, 9, 2) for _ in range(X.n)])
    with pytest.raises(DimensionMismatch):
        objective(X, B, compute_weights(B, 0, 2, 2, 9), 1.0)


# gradients

def test_residual_gradient_zero_in_span(rng):
    U = orthonormalize(rng.standard_normal((7, 3)))
    x = U.columns @ rng.standard_normal(3)
    assert np.abs(residual_gradient(x, U)).max() < 1e-9


def test_residual_gradient_unobserved_rows_exactly_zero(rng):
    mask = rng.random(10) < 0.6
    mask[:4] = True
    g = residual_gradient(ObservedColumn(rng.standard_normal(10), mask), rng.standard_normal((10, 3)))
    assert np.all(g[~mask] == 0.0)


def test_residual_gradient_matches_finite_differences(rng):
    mask = np.ones(10, dtype=bool)
    mask[rng.choice(10, 3, replace=False)] = False
    x = rng.standard_normal(10)
    U = rng.standard_normal((10, 3))
    fd = central_difference(lambda V: deleted_rows_residual(x, V, mask) ** 2, U)
    assert rel_err(residual_gradient(ObservedColumn(x, mask), U), fd) < 1e-5


def test_residual_gradient_printed_form_on_orthonormal_restriction(rng):
    # with orthonormal U^O the -2 e a^T form equals -2 x x^T U + 2 U U^T x x^T U
    U = orthonormalize(rng.standard_normal((6, 2))).columns
    x = rng.standard_normal(6)
    printed = -2 * np.outer(x, x) @ U + 2 * U @ U.T @ np.outer(x, x) @ U
    assert np.allclose(residual_gradient(x, SubspaceBasis(U, True)), printed, atol=1e-12)


def test_ridge_residual_gradient_matches_finite_differences(rng):
    from fusionsc.metrics import restricted_fit

    mask = rng.random(9) < 0.7
    mask[:3] = True
    x = rng.standard_normal(9)
    U = rng.standard_normal((9, 3))
    fd = central_difference(lambda V: restricted_fit(x[mask], V[mask], ridge=0.2)[2], U)
    assert rel_err(residual_gradient(ObservedColumn(x, mask), U, ridge=0.2), fd) < 1e-5


def test_fusion_gradient_vanishes_on_equal_spans(rng):
    U = rng.standard_normal((6, 2))
    assert np.abs(fusion_gradient(U, U @ np.array([[1.0, 2.0], [0.0, 1.0]]))).max() < 1e-9


def test_fusion_gradient_vanishes_on_orthogonal_axes():
    assert np.allclose(fusion_gradient(np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]])), 0.0)


def test_fusion_gradient_is_quarter_of_distance_gradient(rng):
    Ui, Uj = rng.standard_normal((8, 2)), rng.standard_normal((8, 2))
    fd = central_difference(lambda V: projector_distance(V, Uj) ** 2, Ui)
    assert rel_err(4 * fusion_gradient(Ui, Uj), fd) < 1e-5


def _state(bases, mask):
    n = bases.shape[0]
    return SolverState(bases, WeightMatrix(np.zeros((n, n)), mask), 0.0, 0, 0.0)


@pytest.mark.parametrize("p,lam,gamma", [(0.3, 0.5, 0.3), (0.0, 0.5, 0.0), (0.3, 0.5, 0.0), (0.0, 0.5, 0.3)])
def test_full_gradient_matches_finite_differences(p, lam, gamma):
    rng = np.random.default_rng(17)
    X = small_instance(p=p, d=10, n_k=3, seed=5).observed
    B = np.stack([random_orthonormal(rng, 10, 2) for _ in range(X.n)])
    mask = knn_mask(pairwise_distances(B), 5)
    cfg = FusionConfig(lam=lam, gamma=gamma, knn=5, rank=2)
    for i in (0, 4):
        def f(V):
            Bs = list(B)
            Bs[i] = V
            return kernel_objective(X.values, X.mask, Bs, mask, lam, gamma)

        fd = central_difference(f, B[i])
        assert rel_err(full_gradient(i, _state(B, mask), X, cfg), fd) < 1e-5


def test_full_gradient_without_fusion_is_residual_gradient(rng):
    X = small_instance(p=0.2).observed
    B = np.stack([random_orthonormal(rng, 10, 2) for _ in range(X.n)])
    st = _state(B, knn_mask(pairwise_distances(B), 3))
    g = full_gradient(2, st, X, FusionConfig(lam=0.0, knn=3, rank=2))
    assert np.array_equal(g, residual_gradient(X.column(2), SubspaceBasis(B[2], True), 1e-10))


def test_full_gradient_all_fused_is_residual_gradient(rng):
    X = small_instance(p=0.2).observed
    U = random_orthonormal(rng, 10, 2)
    B = np.stack([U] * X.n)
    st = _state(B, ~np.eye(X.n, dtype=bool))
    g = full_gradient(1, st, X, FusionConfig(lam=2.0, gamma=0.3, knn=5, rank=2))
    assert np.allclose(g, residual_gradient(X.column(1), SubspaceBasis(U, True), 1e-10), atol=1e-9)


def test_live_objective_matches_kernel_oracle(rng):
    X = small_instance(p=0.3).observed
    B = np.stack([random_orthonormal(rng, 10, 2) for _ in range(X.n)])
    mask = knn_mask(pairwise_distances(B), 2)
    cfg = FusionConfig(lam=0.5, gamma=0.3, knn=2, rank=2)
    ref = kernel_objective(X.values, X.mask, list(B), mask, 0.5, 0.3)
    assert abs(live_objective(X, B, mask, cfg) - ref) / ref < 1e-10


# solve

def test_no_fusion_full_data_is_optimal_at_start():
    X = small_instance(d=20, r=3).observed
    st = solve(X, FusionConfig(lam=0.0, rank=3, knn=3))
    assert st.sweep <= 2 and st.converged
    assert st.objective < 1e-12


def test_identical_columns_fuse():
    x = np.random.default_rng(2).standard_normal((6, 1))
    X = ObservedMatrix.from_dense(np.hstack([x, x]))
    st = solve(X, FusionConfig(lam=1e3, rank=2, knn=1, max_sweeps=300))
    assert pairwise_distances(st.bases)[0, 1] < 1e-3
    assert_descent(st)


@pytest.fixture(scope="module")
def default_run():
    inst = generate_synthetic(SyntheticSpec(seed=0))
    seen = []
    st = solve(inst.observed, FusionConfig(lam=1e-2, knn=10, rank=5, max_sweeps=15),
               callback=lambda s, B, obj: seen.append(np.abs(np.einsum("nda,ndb->nab", B, B) - np.eye(5)).max()))
    return inst, st, seen


def test_default_instance_descent_and_recomputation(default_run):
    inst, st, seen = default_run
    assert_descent(st)
    assert max(seen) < 1e-8
    ref = objective(inst.observed, st.bases, st.weights, 1e-2)
    assert abs(st.objective - ref) <= 1e-8 * abs(ref)


def test_default_instance_residuals_stay_small(default_run):
    inst, st, _ = default_run
    res = np.sqrt(residual_term(inst.observed, st.bases))
    scale = np.linalg.norm(inst.full_matrix, axis=0)
    assert np.all(res < 1e-2 * scale)


def test_weights_stay_on_mask_and_bounded(default_run):
    _, st, _ = default_run
    W = st.weights
    assert np.all(W.values[~W.neighbor_mask] == 0)
    assert W.values.max() <= np.sqrt(500)


def test_knn_is_clipped_to_n_minus_one():
    X = small_instance(n_k=2).observed
    st = solve(X, FusionConfig(knn=50, rank=2, max_sweeps=3))
    assert st.weights.neighbor_mask.sum(axis=1).max() == X.n - 1


def test_descent_with_missing_data_and_kernel():
    X = small_instance(p=0.3, d=12, n_k=4, seed=8).observed
    for kernel in ("live", "frozen"):
        st = solve(X, FusionConfig(lam=0.3, gamma=0.3, rank=2, knn=3, max_sweeps=25, kernel=kernel))
        assert_descent(st)


def test_gauss_newton_cap_keeps_descent():
    X = small_instance(p=0.3, d=12, n_k=4, seed=9).observed
    st = solve(X, FusionConfig(lam=0.1, rank=2, knn=3, max_sweeps=25, step=1.0, gn_scaling=True, ridge=1e-3))
    assert_descent(st)
    assert abs(st.objective - objective(X, st.bases, st.weights, 0.1, ridge=1e-3)) < 1e-8 * st.objective


def test_parallel_mode_is_deterministic_and_descends():
    X = small_instance(p=0.2, d=12, n_k=4, seed=10).observed
    one = solve(X, FusionConfig(lam=0.2, rank=2, knn=3, max_sweeps=10, parallel=True, threads=1))
    many = solve(X, FusionConfig(lam=0.2, rank=2, knn=3, max_sweeps=10, parallel=True, threads=4))
    assert np.array_equal(one.bases, many.bases)
    assert_descent(one)


def test_fixed_neighbour_mask_is_kept():
    X = small_instance(d=12, n_k=4, seed=11).observed
    labels = np.repeat([0, 1], 4)
    mask = labels[:, None] == labels[None, :]
    st = solve(X, FusionConfig(lam=0.5, rank=2, max_sweeps=10), neighbor_mask=mask)
    assert np.array_equal(st.weights.neighbor_mask, mask & ~np.eye(8, dtype=bool))
    assert st.epochs == [0]


def test_warm_start_shape_check():
    X = small_instance().observed
    with pytest.raises(DimensionMismatch):
        solve(X, FusionConfig(rank=2), init=np.zeros((X.n, X.d, 3)))


def test_solve_input_checks():
    with pytest.raises(DimensionMismatch):
        solve(np.ones((4, 1)), FusionConfig(rank=1))
    with pytest.raises(DimensionMismatch):
        solve(np.ones((3, 4)), FusionConfig(rank=4, knn=2))


def test_config_validation():
    with pytest.raises(ValueError):
        FusionConfig(step=0)
    with pytest.raises(ValueError):
        FusionConfig(backtrack=1.0)
    with pytest.raises(ValueError):
        FusionConfig(kernel="other")
    with pytest.raises(ValueError):
        FusionConfig(lam=-1)


def test_converged_run_stops_on_relative_change():
    X = small_instance(d=10, n_k=3, seed=12).observed
    cfg = FusionConfig(lam=0.05, rank=2, knn=3, max_sweeps=400, step=1.0, gn_scaling=True)
    st = solve(X, cfg)
    assert st.converged and st.sweep < cfg.max_sweeps
    a, b = st.trace[-2], st.trace[-1]
    assert abs(a - b) <= cfg.rel_tol * max(abs(a), 1e-12)
    assert np.isfinite(st.grad_norm) and st.grad_norm == st.grad_norms[-1]
