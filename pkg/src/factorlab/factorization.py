"""Factorizations of finite token spaces and their complexity functionals.

A factorization describes an input space of ``N`` tokens as a product of
small factors ``(p_1, ..., p_k)``, an output space of ``M`` tokens as a
product ``(q_1, ..., q_l)``, and for every output factor ``j`` the subset
``I_j`` of input factors it depends on (its parents).  Token ids are mapped to
mixed-radix coordinates through optional permutations, so the coordinate
systems are hidden from anything that only sees token ids.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator, Sequence

import numpy as np

# Guards for full enumeration (all coordinate systems of both spaces).
FULL_MAX_INPUTS = 8
FULL_MAX_OUTPUTS = 4


class InvalidConfiguration(ValueError):
    """Raised when parameters describe an impossible structure."""


class EnumerationOverflow(RuntimeError):
    """Raised when a candidate enumeration would exceed its budget."""


@dataclass(frozen=True)
class FactorShape:
    """Ordered factor cardinalities of one token space."""

    sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        if not sizes:
            raise InvalidConfiguration("a shape needs at least one factor")
        if len(sizes) == 1:
            if sizes[0] < 1:
                raise InvalidConfiguration(f"invalid trivial shape {sizes}")
        elif min(sizes) < 2:
            raise InvalidConfiguration(f"factor sizes must be >= 2, got {sizes}")

    @property
    def size(self) -> int:
        return math.prod(self.sizes)

    def __len__(self):
        return len(self.sizes)

    def __iter__(self):
        return iter(self.sizes)


def _as_shape(shape) -> FactorShape:
    return shape if isinstance(shape, FactorShape) else FactorShape(tuple(shape))


def mixed_radix_encode(digits: Sequence[int], shape) -> int:
    """Most-significant-first mixed-radix encoding of ``digits``."""
    shape = _as_shape(shape)
    if len(digits) != len(shape.sizes):
        raise ValueError(f"expected {len(shape.sizes)} digits, got {len(digits)}")
    value = 0
    for d, s in zip(digits, shape.sizes):
        if not 0 <= d < s:
            raise ValueError(f"digit {d} out of range for factor of size {s}")
        value = value * s + int(d)
    return value


def mixed_radix_decode(value: int, shape) -> tuple[int, ...]:
    shape = _as_shape(shape)
    if not 0 <= value < shape.size:
        raise ValueError(f"value {value} out of range for shape {shape.sizes}")
    digits = []
    for s in reversed(shape.sizes):
        value, d = divmod(value, s)
        digits.append(d)
    return tuple(reversed(digits))


def decode_all(shape) -> np.ndarray:
    """Digits of every index ``0..size-1`` as a ``(size, len(shape))`` array."""
    shape = _as_shape(shape)
    return np.stack(np.unravel_index(np.arange(shape.size), shape.sizes), axis=1)


@dataclass(frozen=True)
class ComplexityReport:
    """Complexity values of one factorization.

    ``ac_value`` is the sum over output factors of ``min(|pa_j|, q_j)``, the
    embedding dimension sufficient for an exact bilinear softmax.
    ``sc_value`` is ``l**2 * (log l + max_j |pa_j| * q_j)`` with the natural
    logarithm, the sample-complexity driver.
    """

    ac_value: int
    sc_value: float
    parent_cardinalities: tuple[int, ...]


@dataclass(frozen=True)
class Factorization:
    input_shape: FactorShape
    output_shape: FactorShape
    parents: tuple[tuple[int, ...], ...]
    input_perm: tuple[int, ...] | None = None
    output_perm: tuple[int, ...] | None = None
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", _as_shape(self.input_shape))
        object.__setattr__(self, "output_shape", _as_shape(self.output_shape))
        k = len(self.input_shape)
        parents = tuple(tuple(sorted(int(i) for i in p)) for p in self.parents)
        if len(parents) != len(self.output_shape):
            raise InvalidConfiguration(
                f"{len(self.output_shape)} output factors but {len(parents)} parent sets"
            )
        for p in parents:
            if len(set(p)) != len(p) or any(not 0 <= i < k for i in p):
                raise InvalidConfiguration(f"parent set {p} is not a subset of range({k})")
        object.__setattr__(self, "parents", parents)
        for name, n in (("input_perm", self.input_shape.size), ("output_perm", self.output_shape.size)):
            perm = getattr(self, name)
            if perm is None:
                continue
            perm = tuple(int(v) for v in perm)
            if sorted(perm) != list(range(n)):
                raise InvalidConfiguration(f"{name} is not a permutation of range({n})")
            object.__setattr__(self, name, None if perm == tuple(range(n)) else perm)

    @property
    def n_inputs(self) -> int:
        return self.input_shape.size

    @property
    def n_outputs(self) -> int:
        return self.output_shape.size

    @property
    def k(self) -> int:
        return len(self.input_shape)

    @property
    def ell(self) -> int:
        return len(self.output_shape)

    def parent_cardinality(self, j: int) -> int:
        return math.prod(self.input_shape.sizes[i] for i in self.parents[j])

    def input_coords(self) -> np.ndarray:
        """``(N, k)`` digits of every input token."""
        if "xc" not in self._cache:
            digits = decode_all(self.input_shape)
            if self.input_perm is not None:
                digits = digits[np.asarray(self.input_perm)]
            self._cache["xc"] = digits
        return self._cache["xc"]

    def output_coords(self) -> np.ndarray:
        """``(M, l)`` digits of every output token."""
        if "yc" not in self._cache:
            digits = decode_all(self.output_shape)
            if self.output_perm is not None:
                digits = digits[np.asarray(self.output_perm)]
            self._cache["yc"] = digits
        return self._cache["yc"]

    def output_token(self, digits: np.ndarray) -> np.ndarray:
        """Token ids for rows of output digits (inverse of ``output_coords``)."""
        idx = np.ravel_multi_index(tuple(np.asarray(digits).T), self.output_shape.sizes)
        if self.output_perm is None:
            return idx
        if "yinv" not in self._cache:
            self._cache["yinv"] = np.argsort(np.asarray(self.output_perm))
        return self._cache["yinv"][idx]

    def parent_index(self, j: int) -> np.ndarray:
        """Index of the parent value ``pa_j(x)`` for every input token."""
        key = ("pa", j)
        if key not in self._cache:
            coords = self.input_coords()
            sizes = self.input_shape.sizes
            idx = np.zeros(self.n_inputs, dtype=np.int64)
            for i in self.parents[j]:
                idx = idx * sizes[i] + coords[:, i]
            self._cache[key] = idx
        return self._cache[key]

    def is_trivial_equivalent(self) -> bool:
        """True when the structure carries no independence at all."""
        return self.ell == 1 and self.parent_cardinality(0) == self.n_inputs

    def canonical_key(self) -> tuple:
        ident_x = tuple(range(self.n_inputs))
        ident_y = tuple(range(self.n_outputs))
        return (
            self.input_shape.sizes,
            self.output_shape.sizes,
            self.input_perm or ident_x,
            self.output_perm or ident_y,
            self.parents,
        )

    def structure_key(self) -> tuple:
        """Invariant shared by factorizations that induce the same ``p_F``.

        Two factorizations with the same output coordinate system and the same
        partition of inputs by parent value for every output factor give
        identical projections and identical complexity values.
        """
        if "skey" not in self._cache:
            blocks = []
            for j in range(self.ell):
                blocks.append((
                    self.output_shape.sizes[j],
                    _fiber_key(self.output_shape, self.output_perm, (j,)),
                    _fiber_key(self.input_shape, self.input_perm, self.parents[j]),
                ))
            self._cache["skey"] = tuple(sorted(blocks))
        return self._cache["skey"]

    def to_dict(self) -> dict:
        out = {
            "input_shape": list(self.input_shape.sizes),
            "output_shape": list(self.output_shape.sizes),
            "parents": [list(p) for p in self.parents],
        }
        if self.input_perm is not None:
            out["input_perm"] = list(self.input_perm)
        if self.output_perm is not None:
            out["output_perm"] = list(self.output_perm)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "Factorization":
        allowed = {"input_shape", "output_shape", "parents", "input_perm", "output_perm"}
        unknown = set(data) - allowed
        if unknown:
            raise InvalidConfiguration(f"unknown factorization keys: {sorted(unknown)}")
        return cls(
            FactorShape(tuple(data["input_shape"])),
            FactorShape(tuple(data["output_shape"])),
            tuple(tuple(p) for p in data["parents"]),
            tuple(data["input_perm"]) if data.get("input_perm") is not None else None,
            tuple(data["output_perm"]) if data.get("output_perm") is not None else None,
        )

    @classmethod
    def from_json(cls, text: str) -> "Factorization":
        return cls.from_dict(json.loads(text))


def trivial_factorization(n_x: int, n_y: int) -> Factorization:
    return Factorization(FactorShape((n_x,)), FactorShape((n_y,)), ((0,),))


@lru_cache(maxsize=None)
def _fiber_key(shape: FactorShape, perm, subset) -> tuple[int, ...]:
    """Canonical labeling of the partition of tokens by their digits on ``subset``."""
    digits = decode_all(shape)
    if perm is not None:
        digits = digits[np.asarray(perm)]
    idx = np.zeros(shape.size, dtype=np.int64)
    for i in subset:
        idx = idx * shape.sizes[i] + digits[:, i]
    return _first_occurrence(idx)


def _first_occurrence(labels: np.ndarray) -> tuple[int, ...]:
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first))
    return tuple(rank[inverse].tolist())


# --- random parent sets ------------------------------------------------------


def generate_parents_fixed(k: int, ell: int, degree: int, rng: np.random.Generator):
    """Each output factor gets ``degree`` distinct parents drawn uniformly."""
    if not 0 <= degree <= k:
        raise InvalidConfiguration(f"degree must lie in [0, {k}], got {degree}")
    return tuple(
        tuple(sorted(int(i) for i in rng.choice(k, size=degree, replace=False)))
        for _ in range(ell)
    )


def generate_parents_bernoulli(k: int, ell: int, beta: float, rng: np.random.Generator):
    """Each edge (input factor, output factor) is present with probability ``beta``."""
    if not 0.0 <= beta <= 1.0:
        raise InvalidConfiguration(f"beta must lie in [0, 1], got {beta}")
    edges = rng.random((ell, k)) < beta
    return tuple(tuple(int(i) for i in np.flatnonzero(row)) for row in edges)


# --- complexity ----------------------------------------------------------------


def complexity_of(f: Factorization) -> ComplexityReport:
    pa = tuple(f.parent_cardinality(j) for j in range(f.ell))
    q = f.output_shape.sizes
    ac = sum(min(a, b) for a, b in zip(pa, q))
    ell = f.ell
    sc = ell**2 * (math.log(ell) + max(a * b for a, b in zip(pa, q)))
    return ComplexityReport(ac_value=ac, sc_value=float(sc), parent_cardinalities=pa)


def sc_score(f: Factorization) -> float:
    return complexity_of(f).sc_value


# --- enumeration -----------------------------------------------------------------


def enumerate_factor_shapes(n: int) -> list[FactorShape]:
    """All multisets of factors >= 2 with product ``n`` (plus ``[n]``), sorted."""
    if n < 1:
        raise ValueError("n must be >= 1")

    def parts(m, smallest):
        if m == 1:
            yield ()
            return
        for f in range(smallest, m + 1):
            if m % f == 0:
                for rest in parts(m // f, f):
                    yield (f,) + rest

    found = {tuple(p) for p in parts(n, 2)} if n > 1 else set()
    found.add((n,))
    return [FactorShape(s) for s in sorted(found, key=lambda s: (len(s), s))]


def count_coordinate_systems(shape: FactorShape) -> int:
    """Bijections onto ``shape`` modulo value relabeling and equal-factor swaps."""
    n = shape.size
    denom = 1
    for s in shape.sizes:
        denom *= math.factorial(s)
    for s in set(shape.sizes):
        denom *= math.factorial(shape.sizes.count(s))
    return math.factorial(n) // denom


@lru_cache(maxsize=None)
def coordinate_systems(shape: FactorShape) -> tuple[tuple[int, ...] | None, ...]:
    """One permutation per coordinate system of ``shape`` (lexicographically first).

    Brute force over all ``n!`` permutations; only used at small ``n``.
    """
    n = shape.size
    if len(shape) == 1:
        return (None,)
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    digits = decode_all(shape)
    codes = []
    for i, s in enumerate(shape.sizes):
        labels = digits[perms, i]
        canon = _first_occurrence_rows(labels, s)
        codes.append(canon @ (s ** np.arange(n - 1, -1, -1, dtype=np.int64)))
    codes = np.stack(codes, axis=1)
    # equal-size factors are interchangeable: sort their codes within each row
    for s in set(shape.sizes):
        cols = [i for i, t in enumerate(shape.sizes) if t == s]
        if len(cols) > 1:
            codes[:, cols] = np.sort(codes[:, cols], axis=1)
    _, first = np.unique(codes, axis=0, return_index=True)
    return tuple(tuple(perms[i].tolist()) for i in sorted(first))


def _first_occurrence_rows(labels: np.ndarray, n_values: int) -> np.ndarray:
    """Relabel each row so values are numbered by order of first appearance."""
    rows = labels.shape[0]
    first_pos = np.empty((rows, n_values), dtype=np.int64)
    for v in range(n_values):
        first_pos[:, v] = np.argmax(labels == v, axis=1)
    rank = np.argsort(np.argsort(first_pos, axis=1), axis=1)
    return np.take_along_axis(rank, labels, axis=1)


@dataclass(frozen=True)
class EnumerationLimits:
    max_candidates: int = 2_000_000
    allow_big: bool = False


def count_factorizations(n_x: int, n_y: int, mode: str = "full") -> int:
    total = 0
    for sx, sy in _shape_pairs(n_x, n_y, mode):
        cx = count_coordinate_systems(sx) if mode == "full" else 1
        cy = count_coordinate_systems(sy) if mode == "full" else 1
        total += cx * cy * 2 ** (len(sx) * len(sy))
    return total


def _shape_pairs(n_x, n_y, mode):
    xs = enumerate_factor_shapes(n_x)
    ys = enumerate_factor_shapes(n_y)
    if mode == "known":
        xs = [FactorShape(p) for s in xs for p in sorted(set(itertools.permutations(s.sizes)))]
        ys = [FactorShape(p) for s in ys for p in sorted(set(itertools.permutations(s.sizes)))]
    return [(sx, sy) for sx in xs for sy in ys]


def enumerate_factorizations(
    n_x: int, n_y: int, mode: str = "full", limits: EnumerationLimits | None = None
) -> Iterator[Factorization]:
    """Stream candidate factorizations of an ``n_x`` by ``n_y`` problem.

    ``mode="full"`` covers every coordinate system of both spaces (up to
    relabeling within factors) and every parent assignment.  ``mode="known"``
    keeps token ids as coordinates (identity permutations) and enumerates
    ordered shapes and parent sets only.
    """
    limits = limits or EnumerationLimits()
    if mode not in ("full", "known"):
        raise ValueError(f"unknown enumeration mode {mode!r}")
    if mode == "full" and not limits.allow_big and (n_x > FULL_MAX_INPUTS or n_y > FULL_MAX_OUTPUTS):
        raise EnumerationOverflow(
            f"full enumeration is limited to n_x <= {FULL_MAX_INPUTS} and n_y <= "
            f"{FULL_MAX_OUTPUTS} (got {n_x}, {n_y}); use mode='known' or allow_big"
        )
    total = count_factorizations(n_x, n_y, mode)
    if total > limits.max_candidates:
        raise EnumerationOverflow(
            f"{mode} enumeration of {n_x}x{n_y} has {total} candidates, over the budget of "
            f"{limits.max_candidates}; use mode='known' or raise max_candidates"
        )
    return _generate(n_x, n_y, mode)


def _generate(n_x, n_y, mode):
    for sx, sy in _shape_pairs(n_x, n_y, mode):
        px = coordinate_systems(sx) if mode == "full" else (None,)
        py = coordinate_systems(sy) if mode == "full" else (None,)
        subsets = [
            c for r in range(len(sx) + 1) for c in itertools.combinations(range(len(sx)), r)
        ]
        for permx in px:
            for permy in py:
                for parents in itertools.product(subsets, repeat=len(sy)):
                    yield Factorization(sx, sy, parents, permx, permy)


# --- projections and exact minimization ------------------------------------------


def conditional_tables(joint: np.ndarray, f: Factorization):
    """Per-factor conditional tables ``p(y_j | pa_j)`` estimated from a joint.

    ``joint`` is an ``(N, M)`` array of (possibly unnormalized) masses.  Rows of
    parent values with zero mass are returned as uniform and flagged in the
    second return value.
    """
    yc = f.output_coords()
    tables, undefined = [], []
    for j in range(f.ell):
        q = f.output_shape.sizes[j]
        npa = f.parent_cardinality(j)
        # mass per (x, y_j), then aggregated over parent fibers
        by_yj = np.zeros((joint.shape[0], q))
        for v in range(q):
            by_yj[:, v] = joint[:, yc[:, j] == v].sum(axis=1)
        counts = np.zeros((npa, q))
        np.add.at(counts, f.parent_index(j), by_yj)
        totals = counts.sum(axis=1, keepdims=True)
        empty = totals[:, 0] <= 0
        safe = np.where(totals > 0, totals, 1.0)
        table = np.where(empty[:, None], 1.0 / q, counts / safe)
        tables.append(table)
        undefined.append(empty)
    return tables, undefined


def expand_tables(tables, f: Factorization, marginal: np.ndarray | None = None) -> np.ndarray:
    """Joint ``marginal(x) * prod_j table_j[pa_j(x), y_j]`` as an ``(N, M)`` array."""
    yc = f.output_coords()
    out = np.ones((f.n_inputs, f.n_outputs))
    for j, table in enumerate(tables):
        out *= table[f.parent_index(j)][:, yc[:, j]]
    if marginal is None:
        marginal = np.full(f.n_inputs, 1.0 / f.n_inputs)
    return out * marginal[:, None]


def project(joint: np.ndarray, f: Factorization) -> np.ndarray:
    """The projection ``p_F`` of a joint distribution onto factorization ``f``."""
    tables, _ = conditional_tables(joint, f)
    return expand_tables(tables, f, joint.sum(axis=1))


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def minimize_complexity(gt, candidates, which: str = "AC", tol: float = 1e-10):
    """Smallest complexity among candidates under which ``gt`` factors exactly.

    ``gt`` is anything exposing ``joint_matrix()``.  Membership is decided by
    ``tv(p_F, p) <= tol``.  Ties go to the smallest canonical key.
    """
    if which not in ("AC", "SC"):
        raise ValueError("which must be 'AC' or 'SC'")
    joint = gt.joint_matrix()
    best, best_rank = None, None
    seen_any = False
    for f in candidates:
        seen_any = True
        report = complexity_of(f)
        value = report.ac_value if which == "AC" else report.sc_value
        if best_rank is not None and value > best_rank[0]:
            continue
        if tv_distance(project(joint, f), joint) > tol:
            continue
        rank = (value, f.canonical_key())
        if best_rank is None or rank < best_rank:
            best, best_rank = f, rank
    if not seen_any:
        raise ValueError("empty candidate stream")
    if best is None:
        raise ValueError("no candidate factorizes the distribution")
    return best, best_rank[0]


def members(gt, candidates, tol: float = 1e-10) -> list[Factorization]:
    """All candidates under which ``gt`` factors exactly (up to ``tol``)."""
    joint = gt.joint_matrix()
    return [f for f in candidates if tv_distance(project(joint, f), joint) <= tol]
