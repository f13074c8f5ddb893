"""Ground-truth conditional distributions with hidden factorial structure."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .factorization import (
    FactorShape,
    Factorization,
    InvalidConfiguration,
    generate_parents_bernoulli,
    generate_parents_fixed,
)

PROB_FLOOR = 1e-300
LOG_FLOOR = math.log(PROB_FLOOR)
# largest N*M we agree to materialize as a dense matrix
MATERIALIZE_LIMIT = 1 << 26
RNG_ALGORITHM = "numpy.PCG64(SeedSequence)"


class MaterializationError(MemoryError):
    pass


def make_rng(*seed_parts: int) -> np.random.Generator:
    """PCG64 generator whose state hashes all ``seed_parts`` (e.g. master seed, run)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(s) for s in seed_parts])))


# --- Gamma / Dirichlet --------------------------------------------------------------


def _marsaglia_tsang(shape: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Gamma(shape, 1) draws for shape >= 1 by Marsaglia and Tsang's squeeze method."""
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    out = np.empty(size)
    pending = np.arange(size)
    while pending.size:
        x = rng.standard_normal(pending.size)
        v = (1.0 + c * x) ** 3
        u = rng.random(pending.size)
        with np.errstate(invalid="ignore", divide="ignore"):
            ok = (v > 0) & (np.log(u) < 0.5 * x * x + d - d * v + d * np.log(v))
        out[pending[ok]] = d * v[ok]
        pending = pending[~ok]
    return out


def log_gamma_variates(alpha: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Logarithms of ``size`` Gamma(alpha, 1) draws.

    For ``alpha < 1`` a Gamma(alpha + 1) draw is multiplied by ``U**(1/alpha)``;
    the product is kept in log space since at ``alpha = 1e-3`` it routinely
    falls below the smallest positive double.
    """
    if not alpha > 0:
        raise InvalidConfiguration(f"alpha must be > 0, got {alpha}")
    if alpha >= 1.0:
        return np.log(_marsaglia_tsang(alpha, size, rng))
    boosted = _marsaglia_tsang(alpha + 1.0, size, rng)
    u = rng.random(size)
    # U == 0 has probability 2**-53 per draw; nudge it to the smallest double
    u = np.maximum(u, np.nextafter(0.0, 1.0))
    return np.log(boosted) + np.log(u) / alpha


def sample_dirichlet(alpha: float, dim: int, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Symmetric Dirichlet(alpha, ..., alpha) vector of length ``dim`` (or ``n`` rows)."""
    if dim < 1:
        raise InvalidConfiguration("dim must be >= 1")
    rows = 1 if n is None else n
    logs = log_gamma_variates(alpha, rows * dim, rng).reshape(rows, dim)
    logs -= logs.max(axis=1, keepdims=True)
    w = np.exp(logs)
    w /= w.sum(axis=1, keepdims=True)
    return w[0] if n is None else w


# --- ground truth -------------------------------------------------------------------


class _ConditionalMixin:
    """Shared helpers for objects exposing ``conditional_matrix``."""

    def joint_matrix(self) -> np.ndarray:
        return self.conditional_matrix() / self.n_inputs

    def log_likelihood_matrix(self) -> np.ndarray:
        """``Lambda[y, x] = log p(y | x)`` as an ``(M, N)`` array."""
        _check_size(self.n_inputs, self.n_outputs)
        return self.log_conditional_matrix().T

    def entropy(self) -> np.ndarray:
        """Entropy (nats) of ``p(. | x)`` for every input token."""
        p = self.conditional_matrix()
        return -(p * self.log_conditional_matrix()).sum(axis=1)


def _check_size(n, m):
    if n * m > MATERIALIZE_LIMIT:
        raise MaterializationError(
            f"refusing to materialize a {n}x{m} matrix ({n * m} entries > {MATERIALIZE_LIMIT})"
        )


@dataclass(frozen=True)
class GroundTruth(_ConditionalMixin):
    """Conditional tables ``p(y_j | pa_j)`` plus a uniform marginal on inputs.

    ``tables[j]`` has shape ``(|pa_j|, q_j)``; row ``z`` is indexed by the
    mixed-radix encoding of the parent digits in increasing factor order.
    """

    factorization: Factorization
    tables: tuple[np.ndarray, ...]
    seed: int | None = None
    alpha: float | None = None

    @property
    def n_inputs(self) -> int:
        return self.factorization.n_inputs

    @property
    def n_outputs(self) -> int:
        return self.factorization.n_outputs

    def conditional(self, x: int) -> np.ndarray:
        return self.conditional_rows(np.array([x]))[0]

    def conditional_rows(self, xs) -> np.ndarray:
        f = self.factorization
        xs = np.asarray(xs, dtype=np.int64)
        yc = f.output_coords()
        out = np.ones((xs.size, f.n_outputs))
        for j, table in enumerate(self.tables):
            out *= table[f.parent_index(j)[xs]][:, yc[:, j]]
        return out

    def conditional_matrix(self) -> np.ndarray:
        _check_size(self.n_inputs, self.n_outputs)
        return self.conditional_rows(np.arange(self.n_inputs))

    def log_conditional_rows(self, xs) -> np.ndarray:
        """Sum of per-factor floored log-probabilities (exact wherever nothing underflows)."""
        f = self.factorization
        xs = np.asarray(xs, dtype=np.int64)
        yc = f.output_coords()
        out = np.zeros((xs.size, f.n_outputs))
        for j, table in enumerate(self.tables):
            logt = np.log(np.maximum(table, PROB_FLOOR))
            out += logt[f.parent_index(j)[xs]][:, yc[:, j]]
        return out

    def log_conditional_matrix(self) -> np.ndarray:
        _check_size(self.n_inputs, self.n_outputs)
        return self.log_conditional_rows(np.arange(self.n_inputs))

    def log_prob_pairs(self, xs, ys) -> np.ndarray:
        """``log p(y_b | x_b)`` for paired arrays, without forming full rows."""
        f = self.factorization
        xs = np.asarray(xs, dtype=np.int64)
        yd = f.output_coords()[np.asarray(ys, dtype=np.int64)]
        out = np.zeros(xs.size)
        for j, table in enumerate(self.tables):
            out += np.log(np.maximum(table[f.parent_index(j)[xs], yd[:, j]], PROB_FLOOR))
        return out

    def sample_pairs(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """``n`` i.i.d. pairs: uniform ``x``, then every ``y_j`` by inverse CDF."""
        f = self.factorization
        xs = rng.integers(0, f.n_inputs, size=n)
        digits = np.empty((n, f.ell), dtype=np.int64)
        for j, table in enumerate(self.tables):
            cdf = np.cumsum(table[f.parent_index(j)[xs]], axis=1)
            u = rng.random(n)[:, None]
            digits[:, j] = np.minimum((cdf <= u).sum(axis=1), table.shape[1] - 1)
        return xs, f.output_token(digits)

    def sample_pair(self, rng: np.random.Generator) -> tuple[int, int]:
        x, y = self.sample_pairs(1, rng)
        return int(x[0]), int(y[0])

    def to_dict(self) -> dict:
        return {
            "factorization": self.factorization.to_dict(),
            "tables": [t.tolist() for t in self.tables],
            "seed": self.seed,
            "alpha": self.alpha,
            "rng": RNG_ALGORITHM,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GroundTruth":
        return cls(
            Factorization.from_dict(data["factorization"]),
            tuple(np.asarray(t, dtype=float) for t in data["tables"]),
            data.get("seed"),
            data.get("alpha"),
        )

    def save(self, path, config: dict | None = None) -> None:
        payload = self.to_dict()
        if config is not None:
            payload["config"] = config
        Path(path).write_text(json.dumps(payload, sort_keys=True))

    @classmethod
    def load(cls, path) -> "GroundTruth":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class DenseConditional(_ConditionalMixin):
    """An arbitrary conditional ``p(y | x)`` given as an ``(N, M)`` matrix."""

    matrix: np.ndarray

    @property
    def n_inputs(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.matrix.shape[1]

    def conditional(self, x: int) -> np.ndarray:
        return self.matrix[x].copy()

    def conditional_rows(self, xs) -> np.ndarray:
        return self.matrix[np.asarray(xs, dtype=np.int64)]

    def conditional_matrix(self) -> np.ndarray:
        return self.matrix.copy()

    def log_conditional_matrix(self) -> np.ndarray:
        return np.log(np.maximum(self.matrix, PROB_FLOOR))

    def log_conditional_rows(self, xs) -> np.ndarray:
        return np.log(np.maximum(self.conditional_rows(xs), PROB_FLOOR))

    def log_prob_pairs(self, xs, ys) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.int64)
        return np.log(np.maximum(self.matrix[xs, np.asarray(ys, dtype=np.int64)], PROB_FLOOR))

    def sample_pairs(self, n: int, rng: np.random.Generator):
        xs = rng.integers(0, self.n_inputs, size=n)
        cdf = np.cumsum(self.matrix[xs], axis=1)
        u = rng.random(n)[:, None]
        ys = np.minimum((cdf <= u).sum(axis=1), self.n_outputs - 1)
        return xs, ys


def build_ground_truth(data, rng: np.random.Generator, seed: int | None = None) -> GroundTruth:
    """Sample a factorized conditional distribution from a data config.

    ``data`` needs ``input_factors``, ``output_factors``, ``alpha``, exactly one
    of ``degree`` / ``beta`` and optionally ``shuffle_tokens``.
    """
    xs = FactorShape(tuple(data.input_factors))
    ys = FactorShape(tuple(data.output_factors))
    k, ell = len(xs), len(ys)
    if data.degree is not None:
        parents = generate_parents_fixed(k, ell, data.degree, rng)
    else:
        parents = generate_parents_bernoulli(k, ell, data.beta, rng)
    xperm = yperm = None
    if getattr(data, "shuffle_tokens", False):
        xperm = tuple(rng.permutation(xs.size).tolist())
        yperm = tuple(rng.permutation(ys.size).tolist())
    f = Factorization(xs, ys, parents, xperm, yperm)
    return ground_truth_for(f, data.alpha, rng, seed=seed)


def ground_truth_for(f: Factorization, alpha: float, rng: np.random.Generator, seed=None) -> GroundTruth:
    """Dirichlet tables for a fixed factorization."""
    tables = tuple(
        sample_dirichlet(alpha, f.output_shape.sizes[j], rng, n=f.parent_cardinality(j))
        for j in range(f.ell)
    )
    return GroundTruth(f, tables, seed, alpha)


@dataclass(frozen=True)
class DataSplit:
    observed: np.ndarray
    gamma: float
    n_inputs: int

    @property
    def unobserved(self) -> np.ndarray:
        mask = np.ones(self.n_inputs, dtype=bool)
        mask[self.observed] = False
        return np.flatnonzero(mask)


def observed_count(n: int, gamma: float) -> int:
    return int(math.floor(gamma * n + 0.5))


def split_observed(n: int, gamma: float, rng: np.random.Generator) -> DataSplit:
    if not 0.0 < gamma <= 1.0:
        raise InvalidConfiguration(f"gamma must lie in (0, 1], got {gamma}")
    size = observed_count(n, gamma)
    if size == 0:
        raise InvalidConfiguration(f"gamma={gamma} leaves no observed inputs out of {n}")
    observed = np.sort(rng.choice(n, size=size, replace=False))
    return DataSplit(observed, gamma, n)


def save_lambda_csv(gt, path) -> None:
    np.savetxt(path, gt.log_likelihood_matrix(), delimiter=",", fmt="%.17g")
