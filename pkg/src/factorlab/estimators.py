"""Density estimators on ``X x Y``: histogram, per-factorization, and selection.

The selection estimator scans candidate factorizations in increasing order of
the score ``ell^2 (ln ell + max_j |pa_j| q_j)`` and returns the first whose
factored estimate lies within ``omega / 2`` (total variation) of the
unstructured estimate.  Candidates inducing the same structure give identical
estimates, so they are deduplicated once per candidate stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .factorization import (
    EnumerationLimits,
    Factorization,
    _fiber_key,
    conditional_tables,
    enumerate_factorizations,
    expand_tables,
    sc_score,
    trivial_factorization,
)

DEFAULT_OMEGA = 0.25


def total_variation(p, q) -> float:
    """Halved L1 distance between two distributions of equal support size."""
    p = np.asarray(p, dtype=float).ravel()
    q = np.asarray(q, dtype=float).ravel()
    if p.shape != q.shape:
        raise ValueError(f"support size mismatch: {p.size} vs {q.size}")
    return 0.5 * float(np.abs(p - q).sum())


def _as_arrays(samples) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(samples, tuple) and len(samples) == 2 and np.ndim(samples[0]) == 1:
        xs, ys = samples
    else:
        arr = np.asarray(samples, dtype=np.int64).reshape(-1, 2)
        xs, ys = arr[:, 0], arr[:, 1]
    return np.asarray(xs, dtype=np.int64), np.asarray(ys, dtype=np.int64)


@dataclass(frozen=True)
class EmpiricalJoint:
    counts: np.ndarray  # (M, N)
    n: int

    def __post_init__(self):
        if int(self.counts.sum()) != self.n:
            raise ValueError("counts must sum to n")

    def joint_matrix(self) -> np.ndarray:
        """Normalized ``p_hat(x, y)`` as an ``(N, M)`` array (inputs along rows)."""
        return self.counts.T / self.n

    def conditional_joint(self) -> np.ndarray:
        """Conditional histogram with a uniform input marginal; unseen inputs are uniform."""
        c = self.counts.T.astype(float)
        tot = c.sum(axis=1, keepdims=True)
        cond = np.where(tot > 0, c / np.where(tot > 0, tot, 1.0), 1.0 / c.shape[1])
        return cond / c.shape[0]


def histogram_estimate(samples, N: int, M: int) -> EmpiricalJoint:
    xs, ys = _as_arrays(samples)
    if xs.size == 0:
        raise ValueError("histogram estimate needs at least one sample")
    if xs.min() < 0 or xs.max() >= N or ys.min() < 0 or ys.max() >= M:
        raise ValueError("sample outside the support")
    counts = np.bincount(ys * N + xs, minlength=N * M).reshape(M, N)
    return EmpiricalJoint(counts, int(xs.size))


@dataclass(frozen=True)
class FactoredEstimate:
    factorization: Factorization
    cond_tables: tuple[np.ndarray, ...]
    undefined: tuple[np.ndarray, ...]

    def joint_matrix(self) -> np.ndarray:
        """``(1/N) prod_j p_hat(y_j | pa_j)`` as an ``(N, M)`` array."""
        return expand_tables(self.cond_tables, self.factorization)


def factored_estimate(samples, f: Factorization) -> FactoredEstimate:
    emp = samples if isinstance(samples, EmpiricalJoint) else histogram_estimate(
        samples, f.n_inputs, f.n_outputs)
    tables, undefined = conditional_tables(emp.counts.T.astype(float), f)
    return FactoredEstimate(f, tuple(tables), tuple(undefined))


class CandidatePool:
    """Deduplicated, score-sorted candidates with shared per-factor pieces.

    A piece is the pair (partition of ``Y`` by ``y_j``, partition of ``X`` by
    ``pa_j``).  Its expanded conditional table is computed once per sample set
    and reused by every candidate containing it.
    """

    def __init__(self, candidates, N: int, M: int):
        best: dict[tuple, tuple] = {}
        for f in candidates:
            if f.n_inputs != N or f.n_outputs != M:
                raise ValueError("candidate does not match the support sizes")
            rank = (sc_score(f), f.canonical_key())
            key = f.structure_key()
            if key not in best or rank < best[key][0]:
                best[key] = (rank, f)
        if not best:
            raise ValueError("empty candidate stream")
        triv = trivial_factorization(N, M)
        best.setdefault(triv.structure_key(), ((sc_score(triv), triv.canonical_key()), triv))
        ordered = sorted(best.values(), key=lambda item: item[0])
        self.N, self.M = N, M
        self.factorizations = [f for _, f in ordered]
        self.scores = np.array([r[0] for r, _ in ordered])

        piece_ids: dict[tuple, tuple] = {}
        rows = []
        for f in self.factorizations:
            ids = []
            for j in range(f.ell):
                key = (_fiber_key(f.output_shape, f.output_perm, (j,)),
                       _fiber_key(f.input_shape, f.input_perm, f.parents[j]))
                ids.append(piece_ids.setdefault(key, len(piece_ids)))
            rows.append(ids)
        n_pieces = len(piece_ids)
        amax = max(max(a) for _, a in piece_ids) + 1
        bmax = max(max(b) for b, _ in piece_ids) + 1
        # one-hot encodings of every piece, padded to common widths
        self._a = np.zeros((n_pieces, N, amax))
        self._b = np.zeros((n_pieces, M, bmax))
        self._nb = np.ones(n_pieces)
        for (b, a), p in piece_ids.items():
            self._a[p, np.arange(N), a] = 1.0
            self._b[p, np.arange(M), b] = 1.0
            self._nb[p] = max(b) + 1
        self._b_valid = self._b.sum(axis=1) > 0  # (P, bmax)
        width = max(len(r) for r in rows)
        # padding index points at an all-ones piece
        self._members = np.full((len(rows), width), n_pieces, dtype=np.int64)
        for i, r in enumerate(rows):
            self._members[i, :len(r)] = r

    def __len__(self) -> int:
        return len(self.factorizations)

    def piece_tables(self, emp: EmpiricalJoint) -> np.ndarray:
        """``(P + 1, N, M)`` expanded conditionals, last slot all ones."""
        counts = emp.counts.T.astype(float)
        agg = np.einsum("pna,nm,pmb->pab", self._a, counts, self._b, optimize=True)
        tot = agg.sum(axis=2, keepdims=True)
        uniform = self._b_valid[:, None, :] / self._nb[:, None, None]
        cond = np.where(tot > 0, agg / np.where(tot > 0, tot, 1.0), uniform)
        out = np.ones((len(self._nb) + 1, self.N, self.M))
        out[:-1] = np.einsum("pna,pab,pmb->pnm", self._a, cond, self._b, optimize=True)
        return out

    def estimates(self, emp: EmpiricalJoint, rows: slice = slice(None)) -> np.ndarray:
        """``(C, N, M)`` factored estimates for every candidate (or a slice of them)."""
        return self._products(self.piece_tables(emp), rows)

    def _products(self, pieces: np.ndarray, rows: slice) -> np.ndarray:
        members = self._members[rows]
        est = pieces[members[:, 0]]
        for c in range(1, members.shape[1]):
            est *= pieces[members[:, c]]
        return est / self.N

    def feasibility(self, emp: EmpiricalJoint) -> np.ndarray:
        """``tv(p_hat_F, p_hat_trivial)`` for every candidate."""
        ref = emp.conditional_joint()
        return 0.5 * np.abs(self.estimates(emp) - ref).sum(axis=(1, 2))

    def select(self, emp: EmpiricalJoint, omega: float, chunk: int = 512) -> int:
        """Index of the lowest-score candidate within ``omega / 2`` of the reference."""
        pieces = self.piece_tables(emp)
        ref = emp.conditional_joint()
        for start in range(0, len(self), chunk):
            est = self._products(pieces, slice(start, start + chunk))
            tv = 0.5 * np.abs(est - ref).sum(axis=(1, 2))
            hit = np.flatnonzero(tv <= omega / 2 + 1e-12)
            if hit.size:
                return start + int(hit[0])
        raise AssertionError("the trivial candidate is always feasible")


def resolve_omega(omega, N: int, M: int, n: int) -> float:
    """``omega`` as given, or ``sqrt(N M / n)`` for ``"auto"``."""
    if omega == "auto":
        return math.sqrt(N * M / n)
    omega = float(omega)
    if not omega > 0:
        raise ValueError("omega must be > 0")
    return omega


def select_factorization(samples, omega, candidates, N: int, M: int):
    """Selected factorization and its factored estimate.

    ``candidates`` is an iterable of factorizations or a :class:`CandidatePool`.
    The trivial factorization is always added, so some candidate is feasible.
    """
    pool = candidates if isinstance(candidates, CandidatePool) else CandidatePool(candidates, N, M)
    emp = samples if isinstance(samples, EmpiricalJoint) else histogram_estimate(samples, N, M)
    idx = pool.select(emp, resolve_omega(omega, N, M, emp.n))
    f = pool.factorizations[idx]
    return f, factored_estimate(emp, f)


@lru_cache(maxsize=8)
def candidate_pool(N: int, M: int, mode: str = "full", allow_big: bool = False) -> CandidatePool:
    limits = EnumerationLimits(allow_big=allow_big)
    return CandidatePool(enumerate_factorizations(N, M, mode=mode, limits=limits), N, M)


def theorem3_estimator(samples, omega, N: int, M: int, limits: EnumerationLimits | None = None,
                       mode: str = "full") -> FactoredEstimate:
    """Factored estimate at the factorization chosen by :func:`select_factorization`."""
    limits = limits or EnumerationLimits()
    if limits.max_candidates != EnumerationLimits().max_candidates:
        pool = CandidatePool(enumerate_factorizations(N, M, mode=mode, limits=limits), N, M)
    else:
        pool = candidate_pool(N, M, mode, limits.allow_big)
    return select_factorization(samples, omega, pool, N, M)[1]


def candidate_report(samples, omega, pool: CandidatePool, truth: np.ndarray | None = None):
    """Per-candidate rows ``(id, feasibility_tv, score, feasible, tv_to_truth)``."""
    emp = samples if isinstance(samples, EmpiricalJoint) else histogram_estimate(samples, pool.N, pool.M)
    w = resolve_omega(omega, pool.N, pool.M, emp.n)
    est = pool.estimates(emp)
    feas = 0.5 * np.abs(est - emp.conditional_joint()).sum(axis=(1, 2))
    to_truth = None if truth is None else 0.5 * np.abs(est - truth).sum(axis=(1, 2))
    rows = []
    for i in range(len(pool)):
        rows.append({
            "candidate": i,
            "factorization": pool.factorizations[i].to_json(),
            "feasibility_tv": float(feas[i]),
            "score": float(pool.scores[i]),
            "feasible": bool(feas[i] <= w / 2 + 1e-12),
            "tv_to_truth": None if to_truth is None else float(to_truth[i]),
        })
    return rows


def input_partition(f: Factorization) -> tuple[int, ...]:
    """Canonical partition of ``X`` into inputs that ``f`` cannot tell apart."""
    labels = np.zeros(f.n_inputs, dtype=np.int64)
    for j in range(f.ell):
        labels = labels * f.parent_cardinality(j) + f.parent_index(j)
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first))
    return tuple(rank[inverse].tolist())
