"""Command-line entry point: ``fsc gen|cluster|complete|sweep|eval|gradcheck``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .completion import complete
from .data import (
    SyntheticSpec,
    clustering_error,
    generate_synthetic,
    load_labels,
    load_matrix,
    save_labels,
    save_matrix,
    write_instance,
)
from .errors import (
    AllFailed,
    DegenerateRSS,
    DimensionMismatch,
    EmptyCluster,
    IllConditioned,
    LengthMismatch,
    ParseError,
    RankDeficient,
)
from .metrics import ObservedColumn, SubspaceBasis, orthonormalize, pairwise_distances, point_residual, subspace_distance
from .modelselect import count_clusters, default_eps_fuse, goodness_of_fit, lambda_sweep, select_model
from .solver import FusionConfig, SolverState, WeightMatrix, full_gradient, knn_mask, solve
from .spectral import ClusterAssignment, cluster

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_ERRORS = (ParseError, LengthMismatch, DimensionMismatch, EmptyCluster, OSError)
NUMERIC_ERRORS = (IllConditioned, RankDeficient, AllFailed, DegenerateRSS, np.linalg.LinAlgError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _solver_flags(p, rank_required=False):
    g = p.add_argument_group("solver")
    g.add_argument("--lambda", dest="lam", type=float, default=1e-2)
    g.add_argument("--gamma", type=float, default=0.0)
    g.add_argument("--knn", type=int, default=5)
    g.add_argument("--rank", type=int, required=rank_required, default=None if rank_required else 5)
    g.add_argument("--step", type=float, default=1e-2)
    g.add_argument("--max-sweeps", type=int, default=200)
    g.add_argument("--tol", type=float, default=1e-6)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--nn-refresh", type=int, default=1)
    g.add_argument("--ridge", type=float, default=0.0)
    g.add_argument("--kernel", choices=("live", "frozen"), default="live")
    g.add_argument("--gn", action="store_true", help="cap the step along the fit-coefficient direction")
    g.add_argument("--parallel", action="store_true")


def _config(args) -> FusionConfig:
    return FusionConfig(lam=args.lam, gamma=args.gamma, knn=args.knn, rank=args.rank, step=args.step,
                        max_sweeps=args.max_sweeps, rel_tol=args.tol, seed=args.seed,
                        nn_refresh=args.nn_refresh, ridge=args.ridge, kernel=args.kernel,
                        gn_scaling=args.gn, parallel=args.parallel)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fsc", description="Fusion subspace clustering.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write a synthetic union-of-subspaces bundle")
    p.add_argument("--d", type=int, default=100)
    p.add_argument("--K", type=int, default=4)
    p.add_argument("--rank", type=int, default=5)
    p.add_argument("--nk", type=int, default=20)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--p", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("cluster", help="solve and cluster a matrix file")
    p.add_argument("input")
    _solver_flags(p, rank_required=True)
    p.add_argument("--K", type=int, default=None, help="number of clusters (default: count fused groups)")
    p.add_argument("--eps-sim", type=float, default=1e-8)
    p.add_argument("--eps-fuse", type=float, default=None)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--truth", default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("complete", help="estimate cluster subspaces and fill missing entries")
    p.add_argument("input")
    p.add_argument("labels")
    _solver_flags(p, rank_required=True)
    p.add_argument("--full", default=None, help="complete matrix, to report the hidden-entry error")
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="clusterpath over a lambda grid")
    p.add_argument("input")
    _solver_flags(p)
    p.add_argument("--grid", required=True, help="comma list, or log:LO:HI:COUNT")
    p.add_argument("--eps-fuse", type=float, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="clustering error between two label files")
    p.add_argument("pred")
    p.add_argument("truth")

    p = sub.add_parser("gradcheck", help="finite-difference check of the assembled gradient")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    return parser


def parse_grid(text: str) -> list[float]:
    try:
        if text.startswith("log:"):
            lo, hi, count = text[4:].split(":")
            count = int(count)
            if count < 1 or float(lo) <= 0 or float(hi) < float(lo):
                raise ValueError
            return [float(v) for v in np.geomspace(float(lo), float(hi), count)]
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad grid {text!r}") from None
    if not values or any(v < 0 for v in values):
        raise UsageError(f"bad grid {text!r}")
    return values


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _meta(out: Path, command: str, args, **extra) -> None:
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    _write_json(out / "meta.json", {"command": command, "args": resolved, **extra})


def cmd_gen(args) -> int:
    spec = SyntheticSpec(d=args.d, K=args.K, r=args.rank, n_k=args.nk, sigma=args.sigma, p=args.p, seed=args.seed)
    inst = generate_synthetic(spec)
    out = write_instance(args.out, inst)
    print(f"wrote {out}: d={spec.d} n={spec.n} K={spec.K} r={spec.r} "
          f"observed fraction {inst.observed.observed_fraction:.4f}")
    return EXIT_OK


def cmd_cluster(args) -> int:
    X = load_matrix(args.input)
    cfg = _config(args)
    t0 = time.perf_counter()
    state = solve(X, cfg)
    D = pairwise_distances(state.bases)
    eps_fuse = default_eps_fuse(cfg.rank) if args.eps_fuse is None else args.eps_fuse
    fused = count_clusters(distances=D, eps_fuse=eps_fuse)
    K = fused if args.K is None else args.K
    if not 1 <= K <= X.n:
        raise UsageError(f"--K must lie in [1, {X.n}]")
    labels = cluster(state.bases, K, args.eps_sim, args.restarts, args.seed, distances=D)
    wall = time.perf_counter() - t0

    out = Path(args.out)
    (out / "bases").mkdir(parents=True, exist_ok=True)
    save_labels(out / "labels.csv", labels.labels)
    for i in range(X.n):
        save_matrix(out / "bases" / f"basis_{i:04d}.csv", state.bases[i])
    report = {"objective": state.objective, "trace": state.trace, "epochs": state.epochs,
              "sweeps": state.sweep, "converged": state.converged, "grad_norm": state.grad_norm,
              "wall_time": wall, "fused_clusters": fused, "K": K, "skipped_steps": state.skipped}
    if args.truth:
        truth = load_labels(args.truth)
        report["clustering_error"] = clustering_error(labels, truth)
    _write_json(out / "report.json", report)
    _meta(out, "cluster", args, config=asdict(cfg))
    print(f"{fused} fused clusters, labelled with K={K}; objective {state.objective:.6g} after {state.sweep} sweeps")
    if "clustering_error" in report:
        print(f"clustering error {report['clustering_error']:.4f}")
    return EXIT_OK


def same_label_mask(labels) -> np.ndarray:
    labels = np.asarray(labels)
    mask = labels[:, None] == labels[None, :]
    np.fill_diagonal(mask, False)
    return mask


def cmd_complete(args) -> int:
    X = load_matrix(args.input)
    labels = load_labels(args.labels)
    if labels.size != X.n:
        raise LengthMismatch(f"{labels.size} labels for {X.n} columns")
    assignment = ClusterAssignment.compact(labels)
    cfg = _config(args)
    state = solve(X, cfg, neighbor_mask=same_label_mask(assignment.labels))
    model = complete(X, assignment, state.bases, cfg.rank, cfg.gram_reg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_matrix(out / "X_hat.csv", model.completed)
    save_matrix(out / "X_hat_soft.csv", model.completed_soft)
    save_labels(out / "quality.csv", model.ill_conditioned.astype(int))
    report = {"K": model.K, "ill_conditioned_columns": int(model.ill_conditioned.sum()),
              "objective": state.objective, "sweeps": state.sweep}
    try:
        report["fit_score"] = goodness_of_fit(X, model)
    except DegenerateRSS:
        report["fit_score"] = "-inf"
    if args.full:
        full = np.asarray(load_matrix(args.full).values)
        if full.shape != X.shape:
            raise DimensionMismatch("full matrix does not match the observed matrix")
        hidden = ~X.mask
        denom = np.linalg.norm(full[hidden])
        err = float(np.linalg.norm((model.completed - full)[hidden]) / denom) if denom > 0 else 0.0
        report["hidden_relative_error"] = err
        print(f"hidden-entry relative error {err:.4e}")
    _write_json(out / "report.json", report)
    _meta(out, "complete", args, config=asdict(cfg))
    print(f"completed {X.n} columns in {model.K} clusters; {report['ill_conditioned_columns']} ill-conditioned")
    return EXIT_OK


def cmd_sweep(args) -> int:
    X = load_matrix(args.input)
    grid = parse_grid(args.grid)
    cfg = _config(args)
    record = lambda_sweep(X, grid, cfg, eps_fuse=args.eps_fuse)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    record.save(out)
    _meta(out, "sweep", args, config=asdict(cfg), grid=sorted(grid))
    for p in record.points:
        status = f"K={p.K} score={p.fit_score:.6g}" if p.ok else f"failed ({p.error})"
        print(f"lambda={p.lam:.4g}  {status}")
    if not any(p.ok for p in record.points):
        print("every grid point failed", file=sys.stderr)
        return EXIT_NUMERIC
    lam, K = select_model(record)
    print(f"selected lambda={lam:.4g} K={K}")
    return EXIT_OK


def cmd_eval(args) -> int:
    err = clustering_error(load_labels(args.pred), load_labels(args.truth))
    print(f"{err:.4f}")
    return EXIT_OK


def _general_objective(X, bases, mask, cfg: FusionConfig) -> float:
    # reference evaluation through generic Gram solves, valid for non-orthonormal bases
    n = X.n
    total = 0.0
    for i in range(n):
        x = ObservedColumn(X.values[:, i], X.mask[:, i])
        if x.observed_count:
            total += point_residual(x, SubspaceBasis(bases[i]), cfg.gram_reg) ** 2
    scale = np.sqrt(cfg.rank * X.d)
    for i in range(n):
        for j in range(n):
            if mask[i, j]:
                rho = subspace_distance(SubspaceBasis(bases[i]), SubspaceBasis(bases[j]))
                total += 0.5 * cfg.lam * scale * np.exp(-cfg.gamma * rho**2) * rho
    return total


def gradient_check(trials: int = 20, seed: int = 0, h: float = 1e-6) -> list[float]:
    """Relative errors of :func:`full_gradient` against central differences, one per trial.

    Instances have d=10, n=6, r=2 with ``p``, ``lam`` and ``gamma`` cycling
    through {0, 0.3}, {0, 0.5} and {0, 0.3}; bases are random orthonormal.
    """
    rng = np.random.default_rng(seed)
    errors = []
    d, n, r = 10, 6, 2
    for t in range(trials):
        p, lam, gamma = (0.0, 0.3)[t % 2], (0.0, 0.5)[(t // 2) % 2], (0.0, 0.3)[(t // 4) % 2]
        X = generate_synthetic(SyntheticSpec(d=d, K=2, r=r, n_k=3, p=p, seed=int(rng.integers(2**31)))).observed
        B = np.stack([orthonormalize(rng.standard_normal((d, r))).columns for _ in range(n)])
        cfg = FusionConfig(lam=lam, gamma=gamma, knn=5, rank=r)
        mask = knn_mask(pairwise_distances(B), cfg.knn)
        state = SolverState(B, WeightMatrix(np.zeros((n, n)), mask), 0.0, 0, 0.0)
        i = int(rng.integers(n))
        g = full_gradient(i, state, X, cfg)
        fd = np.zeros_like(g)
        for a in range(d):
            for b in range(r):
                Bp, Bm = B.copy(), B.copy()
                Bp[i, a, b] += h
                Bm[i, a, b] -= h
                fd[a, b] = (_general_objective(X, Bp, mask, cfg) - _general_objective(X, Bm, mask, cfg)) / (2 * h)
        errors.append(float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-8)))
    return errors


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be positive")
    errors = gradient_check(args.trials, args.seed)
    worst = max(errors)
    print(f"{len(errors)} trials, max relative error {worst:.3e}")
    return EXIT_OK if worst <= 1e-4 else EXIT_NUMERIC


COMMANDS = {"gen": cmd_gen, "cluster": cmd_cluster, "complete": cmd_complete, "sweep": cmd_sweep,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"fsc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"fsc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        if isinstance(exc, DATA_ERRORS):
            print(f"fsc: data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"fsc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"fsc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NUMERIC_ERRORS as exc:
        print(f"fsc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
