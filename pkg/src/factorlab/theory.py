"""Exact algebraic constructions used as oracles for the learned models.

* three exact factorizations ``Lambda = U^T G`` of the log-likelihood matrix
  (output side, parent side, and the per-factor cheaper of the two);
* a log-likelihood matrix of rank <= 3 that admits no useful factorization;
* the exact predictor for factorization-compatible embeddings, which inverts
  the stacked embedding, rebuilds the parent one-hots and reads log tables.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .datagen import PROB_FLOOR, DenseConditional, GroundTruth, ground_truth_for, make_rng
from .factorization import (
    Factorization,
    complexity_of,
    enumerate_factorizations,
    generate_parents_fixed,
    members,
)

RANK_RTOL = 1e-8


class Mode(str, enum.Enum):
    OUTPUT_SIDE = "OUTPUT_SIDE"
    PARENT_SIDE = "PARENT_SIDE"
    MIXED = "MIXED"


class RankDeficientEmbedding(ValueError):
    pass


@dataclass(frozen=True)
class LogitFactorization:
    u_matrix: np.ndarray  # (d', M)
    g_matrix: np.ndarray  # (d', N)
    mode: Mode

    @property
    def dim(self) -> int:
        return self.u_matrix.shape[0]

    def reconstruct(self) -> np.ndarray:
        return self.u_matrix.T @ self.g_matrix


def _one_hot_rows(idx: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n, idx.size))
    out[idx, np.arange(idx.size)] = 1.0
    return out


def build_logit_factorization(gt: GroundTruth, mode=Mode.MIXED) -> LogitFactorization:
    mode = Mode(mode)
    f = gt.factorization
    yc = f.output_coords()
    us, gs = [], []
    for j, table in enumerate(gt.tables):
        npa, q = table.shape
        logt = np.log(np.maximum(table, PROB_FLOOR))
        pa = f.parent_index(j)
        yj = yc[:, j]
        parent_side = mode is Mode.PARENT_SIDE or (mode is Mode.MIXED and npa < q)
        if parent_side:
            gs.append(_one_hot_rows(pa, npa))
            us.append(logt[:, yj])
        else:
            gs.append(logt[pa].T)
            us.append(_one_hot_rows(yj, q))
    return LogitFactorization(np.vstack(us), np.vstack(gs), mode)


def numerical_rank(mat: np.ndarray, rtol: float = RANK_RTOL) -> int:
    s = np.linalg.svd(mat, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int((s > rtol * s[0]).sum())


def max_abs_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).max())


def column_constant_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max-abs error after removing the best per-column additive constant."""
    diff = a - b
    mid = 0.5 * (diff.max(axis=0) + diff.min(axis=0))
    return float(np.abs(diff - mid).max())


def build_counterexample(t, v) -> np.ndarray:
    """``(M+1, N)`` log-likelihood matrix: row 0 is ``log t``, row m is ``log(1-t) + log v_m``."""
    t = np.asarray(t, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(t <= 0) or np.any(t >= 1):
        raise ValueError("every t_i must lie in (0, 1)")
    if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-12:
        raise ValueError("v must be a probability vector")
    top = np.log(t)[None, :]
    rest = np.log1p(-t)[None, :] + np.log(np.maximum(v, PROB_FLOOR))[:, None]
    return np.vstack([top, rest])


def counterexample_conditional(t, v) -> DenseConditional:
    return DenseConditional(np.exp(build_counterexample(t, v)).T)


@dataclass
class FceExactPredictor:
    """``x -> softmax(U^T Xi(T e_x))`` with ``T`` a left inverse of the stacked embedding."""

    factorization: Factorization
    left_inverse: np.ndarray  # (P, d)
    u_matrix: np.ndarray  # (P_bar, M)

    def recover_digits(self, e: np.ndarray) -> np.ndarray:
        """Factor digits from embeddings (rows of ``e``) via the left inverse."""
        bits = np.atleast_2d(e) @ self.left_inverse.T
        digits, start = [], 0
        for p in self.factorization.input_shape.sizes:
            digits.append(bits[:, start:start + p].argmax(axis=1))
            start += p
        return np.stack(digits, axis=1)

    def parent_features(self, digits: np.ndarray) -> np.ndarray:
        """The map from factor digits to the stacked one-hot encodings of each ``pa_j``."""
        f = self.factorization
        sizes = f.input_shape.sizes
        cols = []
        for j in range(f.ell):
            idx = np.zeros(digits.shape[0], dtype=np.int64)
            for i in f.parents[j]:
                idx = idx * sizes[i] + digits[:, i]
            cols.append(_one_hot_rows(idx, f.parent_cardinality(j)).T)
        return np.hstack(cols)

    def logits(self, e: np.ndarray) -> np.ndarray:
        return self.parent_features(self.recover_digits(e)) @ self.u_matrix

    def __call__(self, e: np.ndarray) -> np.ndarray:
        z = self.logits(e)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)


def build_fce_exact_predictor(gt: GroundTruth, fce) -> FceExactPredictor:
    """Exact predictor for a factorization-compatible embedding.

    ``fce`` is an :class:`~factorlab.nn.FceEmbedding` or a list of ``(d, p_i)``
    matrices.
    """
    mats = fce.matrices if hasattr(fce, "matrices") else list(fce)
    stacked = np.hstack(mats)
    d, P = stacked.shape
    if d < P:
        raise RankDeficientEmbedding(
            f"embedding dimension d={d} is below the number of factor values P={P}; "
            "the stacked embedding cannot have full column rank"
        )
    s = np.linalg.svd(stacked, compute_uv=False)
    if s[-1] <= RANK_RTOL * s[0]:
        raise RankDeficientEmbedding(
            f"stacked embedding is rank deficient: smallest singular value {s[-1]:.3e} "
            f"<= {RANK_RTOL:g} x largest {s[0]:.3e}"
        )
    left_inverse, *_ = scipy.linalg.lstsq(stacked, np.eye(d), lapack_driver="gelsy")
    f = gt.factorization
    yc = f.output_coords()
    blocks = []
    for j, table in enumerate(gt.tables):
        logt = np.log(np.maximum(table, PROB_FLOOR))
        blocks.append(logt[:, yc[:, j]])
    return FceExactPredictor(f, left_inverse, np.vstack(blocks))


# --- verification suite -------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def random_small_factorization(rng: np.random.Generator, max_n: int = 256) -> Factorization:
    """Random factorization with ``N, M <= max_n`` built from factors in {2, 3, 4}."""

    def shape():
        while True:
            sizes = tuple(int(s) for s in rng.choice([2, 3, 4], size=rng.integers(1, 5)))
            if np.prod(sizes) <= max_n:
                return sizes

    xs, ys = shape(), shape()
    degree = int(rng.integers(0, len(xs) + 1))
    parents = generate_parents_fixed(len(xs), len(ys), degree, rng)
    xperm = tuple(rng.permutation(int(np.prod(xs))).tolist())
    yperm = tuple(rng.permutation(int(np.prod(ys))).tolist())
    return Factorization(xs, ys, parents, xperm, yperm)


def run_verification(n_configs: int = 50, max_n: int = 256, seed: int = 0,
                     inject_fault: str | None = None) -> list[CheckResult]:
    """Exactness of the constructions, rank bounds, counterexample, FCE predictor.

    ``inject_fault="table"`` perturbs one conditional table after the
    factorizations are built, which must make the reconstruction check fail.
    """
    rng = make_rng(seed, 0)
    results = []

    worst, rank_ok = 0.0, True
    for _ in range(n_configs):
        f = random_small_factorization(rng, max_n)
        gt = ground_truth_for(f, float(rng.choice([1e-3, 0.1, 1.0])), rng)
        facs = [build_logit_factorization(gt, m) for m in Mode]
        if inject_fault == "table":
            tables = list(gt.tables)
            tables[0] = tables[0].copy()
            tables[0][0] = np.roll(tables[0][0], 1) if tables[0].shape[1] > 1 else tables[0][0]
            tables[0][0, 0] += 0.25
            gt = GroundTruth(f, tuple(tables))
        lam = gt.log_likelihood_matrix()
        for fac in facs:
            worst = max(worst, max_abs_error(fac.reconstruct(), lam))
        if numerical_rank(lam) > complexity_of(f).ac_value:
            rank_ok = False
    results.append(CheckResult("logit-factorization-exact", worst < 1e-9, f"max abs error {worst:.3e}"))
    results.append(CheckResult("rank-at-most-ac", rank_ok, "numerical rank <= sum_j min(|pa_j|, q_j)"))

    t = rng.uniform(0.05, 0.95, size=4)
    v = rng.dirichlet(np.ones(3))
    lam = build_counterexample(t, v)
    rank = numerical_rank(lam)
    results.append(CheckResult("counterexample-rank", rank <= 3, f"rank {rank}"))
    found = members(counterexample_conditional(t, v), enumerate_factorizations(4, 4), tol=1e-6)
    only_trivial = bool(found) and all(m.is_trivial_equivalent() for m in found)
    results.append(CheckResult(
        "counterexample-no-factorization", only_trivial,
        f"{len(found)} exact factorizations, all trivial: {only_trivial}",
    ))

    f = Factorization((2, 3, 2), (4, 3), ((0, 1), (2,)))
    gt = ground_truth_for(f, 0.1, rng)
    mats = [rng.standard_normal((8, p)) for p in f.input_shape.sizes]
    pred = build_fce_exact_predictor(gt, mats)
    e = sum(m.T[f.input_coords()[:, i]] for i, m in enumerate(mats))
    err = float(np.abs(pred(e) - gt.conditional_matrix()).max())
    results.append(CheckResult("fce-exact-predictor", err < 1e-8, f"max abs error {err:.3e}"))
    return results
