"""Synthetic union-of-subspaces data, masking, matrix files, clustering error."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DimensionMismatch, LengthMismatch, ParseError
from .metrics import ObservedColumn, SubspaceBasis, orthonormalize


@dataclass(frozen=True)
class ObservedMatrix:
    """A ``d x n`` matrix observed on the True entries of ``mask``.

    Values at unobserved positions are carried along but never read.
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float, ndmin=2)
        mask = np.array(self.mask, dtype=bool, ndmin=2)
        if values.shape != mask.shape:
            raise DimensionMismatch(f"values {values.shape} and mask {mask.shape} differ")
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def from_dense(cls, X, mask=None) -> "ObservedMatrix":
        """Wrap a dense array; NaNs are treated as missing unless ``mask`` is given."""
        X = np.array(X, dtype=float, ndmin=2)
        if mask is None:
            mask = ~np.isnan(X)
        return cls(X, mask)

    @property
    def shape(self):
        return self.values.shape

    @property
    def d(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def observed_fraction(self) -> float:
        return float(self.mask.mean())

    def column(self, i: int) -> ObservedColumn:
        return ObservedColumn(self.values[:, i], self.mask[:, i])

    def zero_filled(self) -> np.ndarray:
        return np.where(self.mask, self.values, 0.0)

    def with_nans(self) -> np.ndarray:
        return np.where(self.mask, self.values, np.nan)


@dataclass(frozen=True)
class SyntheticSpec:
    d: int = 100
    K: int = 4
    r: int = 5
    n_k: int = 20
    sigma: float = 0.0
    p: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("d", "K", "r", "n_k"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.r > self.d:
            raise ValueError("r must not exceed d")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if not 0.0 <= self.p < 1.0:
            raise ValueError("p must lie in [0, 1)")

    @property
    def n(self) -> int:
        return self.K * self.n_k


@dataclass(frozen=True)
class SyntheticInstance:
    spec: SyntheticSpec
    full_matrix: np.ndarray
    observed: ObservedMatrix
    true_labels: np.ndarray
    true_bases: list  # raw Gaussian d x r matrices, as used for generation
    true_coeffs: list

    @property
    def signal(self) -> np.ndarray:
        """Noiseless ``[U_1 T_1 ... U_K T_K]``."""
        return np.hstack([U @ T for U, T in zip(self.true_bases, self.true_coeffs)])

    def orthonormal_bases(self) -> list[SubspaceBasis]:
        return [orthonormalize(U) for U in self.true_bases]


def sample_mask(d: int, n: int, p: float, seed) -> np.ndarray:
    """i.i.d. Bernoulli(1 - p) observation mask of shape ``(d, n)``."""
    if not 0.0 <= p < 1.0:
        raise ValueError("p must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    draws = rng.random((d, n))
    return draws >= p


def generate_synthetic(spec: SyntheticSpec) -> SyntheticInstance:
    """Draw a union-of-subspaces instance.

    Bases and coefficients are i.i.d. standard normal, noise is
    ``sigma * N(0, 1)`` (so changing only ``sigma`` rescales the same noise
    draw), and each entry is observed independently with probability
    ``1 - p``. Data and mask use independent child streams of ``spec.seed``.
    """
    data_seq, mask_seq = np.random.SeedSequence(spec.seed).spawn(2)
    rng = np.random.default_rng(data_seq)
    bases, coeffs = [], []
    for _ in range(spec.K):
        bases.append(rng.standard_normal((spec.d, spec.r)))
        coeffs.append(rng.standard_normal((spec.r, spec.n_k)))
    signal = np.hstack([U @ T for U, T in zip(bases, coeffs)])
    full = signal + spec.sigma * rng.standard_normal(signal.shape)
    mask = sample_mask(spec.d, spec.n, spec.p, mask_seq)
    labels = np.repeat(np.arange(spec.K), spec.n_k)
    return SyntheticInstance(spec, full, ObservedMatrix(full, mask), labels, bases, coeffs)


# Matrix files: one row per matrix row, missing entries as NaN or empty fields.

def _format_value(v: float) -> str:
    return "NaN" if math.isnan(v) else repr(float(v))


def save_matrix(path, M, delimiter: str = ",") -> None:
    """Write an :class:`ObservedMatrix` (unobserved as ``NaN``) or a dense array."""
    data = M.with_nans() if isinstance(M, ObservedMatrix) else np.array(M, dtype=float, ndmin=2)
    if data.ndim == 1:
        data = data[:, None]
    lines = [delimiter.join(_format_value(v) for v in row) for row in data]
    Path(path).write_text("\n".join(lines) + "\n")


def _is_header(fields) -> bool:
    for f in fields:
        f = f.strip()
        if not f:
            continue
        try:
            float(f)
        except ValueError:
            return True
    return False


def load_matrix(path, delimiter=None) -> ObservedMatrix:
    """Parse a delimiter-separated matrix file into an :class:`ObservedMatrix`.

    The delimiter is sniffed from the first data line (comma, tab, semicolon,
    whitespace) unless given. A single leading non-numeric line is skipped.
    """
    text = Path(path).read_text()
    raw_lines = text.splitlines()
    lines = [(no, ln) for no, ln in enumerate(raw_lines, start=1) if ln.strip()]
    if not lines:
        raise ParseError("empty matrix file", line=1)
    if delimiter is None:
        sample = lines[0][1] if len(lines) == 1 else lines[1][1]
        delimiter = next((c for c in (",", "\t", ";") if c in sample), None)

    def split(ln):
        return ln.split(delimiter) if delimiter is not None else ln.split()

    if _is_header(split(lines[0][1])):
        lines = lines[1:]
        if not lines:
            raise ParseError("file has a header but no data", line=2)
    rows, width = [], None
    for no, ln in lines:
        fields = split(ln)
        if width is None:
            width = len(fields)
        elif len(fields) != width:
            raise ParseError(f"expected {width} fields, found {len(fields)}", line=no)
        row = []
        for col, f in enumerate(fields, start=1):
            f = f.strip()
            if f == "" or f.lower() == "nan":
                row.append(math.nan)
                continue
            try:
                row.append(float(f))
            except ValueError:
                raise ParseError(f"cannot parse {f!r} as a number", line=no, column=col) from None
        rows.append(row)
    return ObservedMatrix.from_dense(np.array(rows, dtype=float))


def save_labels(path, labels) -> None:
    Path(path).write_text("".join(f"{int(k)}\n" for k in np.asarray(labels).ravel()))


def load_labels(path) -> np.ndarray:
    out = []
    for no, ln in enumerate(Path(path).read_text().splitlines(), start=1):
        ln = ln.strip()
        if not ln:
            continue
        try:
            out.append(int(float(ln.split(",")[0])))
        except ValueError:
            if no == 1 and not out:
                continue  # header
            raise ParseError(f"bad label {ln!r}", line=no) from None
    return np.asarray(out, dtype=int)


def write_instance(out_dir, instance: SyntheticInstance) -> Path:
    """Write the ``X_full.csv``, ``X_obs.csv``, ``labels.csv``, ``meta.json`` bundle."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_matrix(out / "X_full.csv", instance.full_matrix)
    save_matrix(out / "X_obs.csv", instance.observed)
    save_labels(out / "labels.csv", instance.true_labels)
    meta = {"spec": asdict(instance.spec), "n": instance.spec.n,
            "observed_fraction": instance.observed.observed_fraction}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def clustering_error(pred, truth) -> float:
    """Fraction of misclassified points under the best label bijection.

    Solved as an assignment problem on the confusion matrix; when the two
    labelings have different numbers of clusters, points in unmatched
    clusters all count as errors.
    """
    pred = np.asarray(getattr(pred, "labels", pred)).ravel()
    truth = np.asarray(getattr(truth, "labels", truth)).ravel()
    if pred.shape != truth.shape:
        raise LengthMismatch(f"label lengths differ: {pred.size} vs {truth.size}")
    if pred.size == 0:
        return 0.0
    _, p_idx = np.unique(pred, return_inverse=True)
    _, t_idx = np.unique(truth, return_inverse=True)
    confusion = np.zeros((p_idx.max() + 1, t_idx.max() + 1), dtype=int)
    np.add.at(confusion, (p_idx, t_idx), 1)
    rows, cols = linear_sum_assignment(confusion, maximize=True)
    matched = confusion[rows, cols].sum()
    return float(pred.size - matched) / pred.size
