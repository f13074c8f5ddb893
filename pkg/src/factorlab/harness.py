"""Training regimes, sweeps, multi-seed aggregation and metric I/O.

Epoch conventions: one fresh i.i.d. batch (single pass), one full-batch step
on the population loss over all inputs (compression), one full-batch step on
the observed inputs (generalization).  Cumulative FLOPs are always
``training_flops(inputs_per_epoch, epoch)``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

from .config import TrainConfig
from .datagen import RNG_ALGORITHM, build_ground_truth, make_rng, observed_count, split_observed
from .estimators import candidate_pool, histogram_estimate, select_factorization, total_variation
from .flops import FlopModel, epochs_for_budget, training_flops
from .nn import (
    empirical_value_and_grad,
    init_model,
    loss_empirical,
    population_value_and_grad,
)
from .optim import AdamState, adam_step, schedule

CSV_HEADER = ("run_id", "seed", "epoch", "flops", "lr", "loss_train",
              "loss_population", "loss_unobserved", "wall_ms")
EXACT_POPULATION_LIMIT = 1 << 22  # N*M above which single-pass uses an evaluation batch
GEOMETRIC_RATIO = 1.3

# RNG substreams per (master_seed, seed)
_DATA, _SPLIT, _INIT, _BATCH, _EVAL = range(5)


@dataclass(frozen=True)
class MetricRow:
    run_id: str
    seed: int
    epoch: int
    flops: int
    lr: float | None = None
    loss_train: float | None = None
    loss_population: float | None = None
    loss_unobserved: float | None = None
    wall_ms: float | None = None

    def csv_fields(self) -> list[str]:
        return [_fmt(getattr(self, name)) for name in CSV_HEADER]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def eval_epochs(T: int) -> list[int]:
    """Every epoch below 100, then roughly geometric (x1.3), always ending at ``T``."""
    out = list(range(min(T, 99) + 1))
    e = 100.0
    while e < T:
        if int(e) > out[-1]:
            out.append(int(e))
        e *= GEOMETRIC_RATIO
    if out[-1] != T:
        out.append(T)
    return out


def run_id_for(cfg: TrainConfig, seed: int) -> str:
    digest = hashlib.sha256(cfg.to_json().encode()).hexdigest()[:10]
    return f"{cfg.regime}-{digest}-s{seed}"


def ground_truth_for_seed(cfg: TrainConfig, seed: int):
    return build_ground_truth(cfg.data, make_rng(cfg.master_seed, seed, _DATA), seed=seed)


def sample_rng(cfg: TrainConfig, seed: int):
    """Generator for training samples of ``seed`` (shared by batches and estimators)."""
    return make_rng(cfg.master_seed, seed, _BATCH)


def _model_for(cfg: TrainConfig, gt, seed: int):
    m = cfg.model
    return init_model(gt.n_inputs, gt.n_outputs, m.d, m.h, m.L, make_rng(cfg.master_seed, seed, _INIT),
                      embedding_mode=m.embedding_mode, factorization=gt.factorization,
                      fce_std=m.fce_std, train_output=m.train_output_embedding)


def _flop_model(cfg: TrainConfig, gt) -> FlopModel:
    return FlopModel(cfg.model.L, cfg.model.d, cfg.model.h, gt.n_outputs)


class _Recorder:
    def __init__(self, cfg, seed, fm, inputs_per_epoch):
        self.run_id = run_id_for(cfg, seed)
        self.seed = seed
        self.fm = fm
        self.inputs = inputs_per_epoch
        self.wall = cfg.record_wall_time
        self.start = time.perf_counter()

    def row(self, epoch, lr, **losses) -> MetricRow:
        wall = (time.perf_counter() - self.start) * 1e3 if self.wall else None
        return MetricRow(self.run_id, self.seed, epoch, training_flops(self.fm, self.inputs, epoch),
                         lr, wall_ms=wall, **losses)


def _check(cfg: TrainConfig, regime: str):
    if cfg.regime != regime:
        raise ValueError(f"config regime is {cfg.regime!r}, expected {regime!r}")


def run_single_pass(cfg: TrainConfig, gt=None, seed: int | None = None) -> Iterator[MetricRow]:
    """One fresh batch per epoch; excess cross-entropy on the batch is the training loss.

    ``loss_train`` is the excess loss of the latest batch measured before its
    update (empty at epoch 0).  ``loss_population`` is exact when ``N*M`` is
    small enough, otherwise the excess loss on an independent batch.
    """
    _check(cfg, "single_pass")
    seed = cfg.seeds[0] if seed is None else seed
    gt = gt if gt is not None else ground_truth_for_seed(cfg, seed)
    model = _model_for(cfg, gt, seed)
    T, B = cfg.optim.epochs, cfg.batch_size
    lr = schedule(cfg.optim.scheduler, cfg.optim.eta, T, cfg.optim.lr_floor)
    rec = _Recorder(cfg, seed, _flop_model(cfg, gt), B)
    batch_rng = make_rng(cfg.master_seed, seed, _BATCH)
    eval_rng = make_rng(cfg.master_seed, seed, _EVAL)
    exact = gt.n_inputs * gt.n_outputs <= EXACT_POPULATION_LIMIT
    if exact:
        support = np.arange(gt.n_inputs)
        targets, logs = gt.conditional_matrix(), gt.log_conditional_matrix()
        neg_entropy = np.einsum("ij,ij->i", targets, logs)
    else:
        ex, ey = gt.sample_pairs(B, eval_rng)
    evals = set(eval_epochs(T))
    state = AdamState()
    last_train = None
    ws: dict = {}
    for t in range(T + 1):
        if t in evals:
            if exact:
                pop, _ = population_value_and_grad(model, support, targets, logs,
                                                   neg_entropy=neg_entropy, workspace=ws)
            else:
                pop = loss_empirical(model, ex, ey, gt)
            yield rec.row(t, lr(t), loss_train=last_train, loss_population=pop)
        if t == T:
            break
        xs, ys = gt.sample_pairs(B, batch_rng)
        nll, grads = empirical_value_and_grad(model, xs, ys)
        last_train = nll + float(gt.log_prob_pairs(xs, ys).mean())
        adam_step(model.trainable(), grads, state, lr(t))


def run_compression(cfg: TrainConfig, gt=None, seed: int | None = None,
                    stop_below: float | None = None) -> Iterator[MetricRow]:
    """Full-batch training on the population loss over every input.

    With ``stop_below`` the run ends (emitting a final row) at the first epoch
    whose population loss is below the threshold.
    """
    _check(cfg, "compression")
    seed = cfg.seeds[0] if seed is None else seed
    gt = gt if gt is not None else ground_truth_for_seed(cfg, seed)
    model = _model_for(cfg, gt, seed)
    T = cfg.optim.epochs
    lr = schedule(cfg.optim.scheduler, cfg.optim.eta, T, cfg.optim.lr_floor)
    rec = _Recorder(cfg, seed, _flop_model(cfg, gt), gt.n_inputs)
    support = np.arange(gt.n_inputs)
    targets, logs = gt.conditional_matrix(), gt.log_conditional_matrix()
    neg_entropy = np.einsum("ij,ij->i", targets, logs)
    evals = set(eval_epochs(T))
    state = AdamState()
    ws: dict = {}
    for t in range(T + 1):
        value, grads = population_value_and_grad(model, support, targets, logs,
                                                  neg_entropy=neg_entropy, workspace=ws)
        stop = stop_below is not None and value < stop_below
        if t in evals or stop:
            yield rec.row(t, lr(t), loss_train=value, loss_population=value)
        if t == T or stop:
            break
        adam_step(model.trainable(), grads, state, lr(t))


class ObservedTargets:
    """Conditional rows for the observed inputs only, read once up front."""

    def __init__(self, gt, observed: np.ndarray):
        self.xs = np.asarray(observed, dtype=np.int64)
        self.probs = gt.conditional_rows(self.xs)
        self.logs = gt.log_conditional_rows(self.xs)
        self.neg_entropy = np.einsum("ij,ij->i", self.probs, self.logs)


def _mean_kl(model, xs, probs, logs) -> float:
    return population_value_and_grad(model, xs, probs, logs)[0]


def run_generalization(cfg: TrainConfig, gt=None, seed: int | None = None) -> Iterator[MetricRow]:
    """Train on the observed inputs with a fixed factorization-compatible embedding.

    The ground truth is queried for unobserved inputs only while evaluating,
    never while computing a training step.
    """
    _check(cfg, "generalization")
    seed = cfg.seeds[0] if seed is None else seed
    gt = gt if gt is not None else ground_truth_for_seed(cfg, seed)
    split = split_observed(gt.n_inputs, cfg.gamma, make_rng(cfg.master_seed, seed, _SPLIT))
    model = _model_for(cfg, gt, seed)
    T = cfg.optim.epochs
    lr = schedule(cfg.optim.scheduler, cfg.optim.eta, T, cfg.optim.lr_floor)
    train = ObservedTargets(gt, split.observed)
    rec = _Recorder(cfg, seed, _flop_model(cfg, gt), train.xs.size)
    unobs = split.unobserved
    evals = set(eval_epochs(T))
    state = AdamState()
    ws: dict = {}
    for t in range(T + 1):
        value, grads = population_value_and_grad(model, train.xs, train.probs, train.logs,
                                                  neg_entropy=train.neg_entropy, workspace=ws)
        if t in evals:
            yield rec.row(t, lr(t), loss_train=value, **_evaluate(model, gt, train, unobs))
        if t == T:
            break
        adam_step(model.trainable(), grads, state, lr(t))


def _evaluate(model, gt, train: ObservedTargets, unobs: np.ndarray) -> dict:
    if unobs.size == 0:
        return {"loss_population": _mean_kl(model, train.xs, train.probs, train.logs),
                "loss_unobserved": None}
    u = _mean_kl(model, unobs, gt.conditional_rows(unobs), gt.log_conditional_rows(unobs))
    o = _mean_kl(model, train.xs, train.probs, train.logs)
    n = gt.n_inputs
    return {"loss_population": (o * train.xs.size + u * unobs.size) / n, "loss_unobserved": u}


REGIMES: dict[str, Callable] = {
    "single_pass": run_single_pass,
    "compression": run_compression,
    "generalization": run_generalization,
}


def run_experiment(cfg: TrainConfig, workers: int = 1) -> list[MetricRow]:
    """All seeds of ``cfg``; rows ordered by seed then epoch regardless of ``workers``."""
    runner = REGIMES[cfg.regime]

    def one(seed):
        return list(runner(cfg, seed=seed))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(one, cfg.seeds))
    else:
        per_seed = [one(s) for s in cfg.seeds]
    return [row for rows in per_seed for row in rows]


# --- isoflop sweep ---------------------------------------------------------------------


@dataclass(frozen=True)
class IsoflopRow:
    budget: int
    gamma: float
    epochs: int
    seed: int
    flops: int
    loss_population: float | None
    loss_unobserved: float | None
    feasible: bool


ISOFLOP_HEADER = tuple(f.name for f in fields(IsoflopRow))


def isoflop_sweep(cfg: TrainConfig, flop_budgets: Iterable[int], gamma_grid: Iterable[float],
                  seeds: Iterable[int] | None = None) -> list[IsoflopRow]:
    """For each budget ``F`` and ``gamma``, train ``T = floor(F / epoch cost)`` epochs."""
    _check(cfg, "generalization")
    seeds = list(cfg.seeds if seeds is None else seeds)
    out = []
    for budget in flop_budgets:
        for gamma in gamma_grid:
            for seed in seeds:
                gt = ground_truth_for_seed(cfg, seed)
                fm = _flop_model(cfg, gt)
                inputs = observed_count(gt.n_inputs, gamma)
                T = epochs_for_budget(fm, budget, inputs) if inputs else 0
                if T == 0:
                    out.append(IsoflopRow(int(budget), float(gamma), 0, seed, 0, None, None, False))
                    continue
                run_cfg = cfg.replace(gamma=float(gamma), **{"optim.epochs": T})
                last = list(run_generalization(run_cfg, gt, seed))[-1]
                out.append(IsoflopRow(int(budget), float(gamma), T, seed, last.flops,
                                      last.loss_population, last.loss_unobserved, True))
    return out


# --- aggregation -----------------------------------------------------------------------


def _get(row, key):
    return row[key] if isinstance(row, dict) else getattr(row, key)


def aggregate(rows, group_keys: Iterable[str], value_key: str) -> list[dict]:
    """Mean, median, q10 and q90 of ``value_key`` per group, groups in sorted order.

    Rows whose value is missing are skipped.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("nothing to aggregate")
    group_keys = tuple(group_keys)
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        v = _get(r, value_key)
        if v is None or v == "":
            continue
        groups.setdefault(tuple(_get(r, k) for k in group_keys), []).append(float(v))
    out = []
    for key in sorted(groups, key=_sort_key):
        vals = np.array(groups[key])
        summary = dict(zip(group_keys, key))
        summary.update(count=int(vals.size), mean=float(vals.mean()), median=float(np.median(vals)),
                       q10=float(np.quantile(vals, 0.1)), q90=float(np.quantile(vals, 0.9)))
        out.append(summary)
    return out


def _sort_key(key: tuple):
    return tuple((0, v, "") if isinstance(v, (int, float)) else (1, 0, str(v)) for v in key)


def final_rows(rows: Iterable[MetricRow]) -> list[MetricRow]:
    """Last row of every run, in first-appearance order."""
    last: dict[str, MetricRow] = {}
    for r in rows:
        last[r.run_id] = r
    return list(last.values())


# --- metric files ----------------------------------------------------------------------


def write_metrics_csv(rows: Iterable[MetricRow], path, cfg: TrainConfig | None = None) -> None:
    """CSV with the fixed header; provenance goes to a ``<path>.meta.json`` sidecar."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow(r.csv_fields())
    if cfg is not None:
        meta = {"config": cfg.to_dict(), "master_seed": cfg.master_seed, "rng": RNG_ALGORITHM}
        Path(str(path) + ".meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def write_table_csv(rows: Iterable, path, header: Iterable[str]) -> None:
    header = tuple(header)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(_get(r, k)) for k in header])


def read_csv(path) -> list[dict]:
    """Rows as dicts; numeric-looking fields become numbers, empty fields ``None``."""
    with Path(path).open(newline="") as fh:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _parse(text: str):
    if text == "":
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


# --- estimator experiments -------------------------------------------------------------


def first_passage_n(tv_at: Callable[[int], float], target: float, n_max: int) -> int:
    """Smallest prefix length with ``tv_at(n) <= target``, found by bisection.

    Assumes the error is (roughly) decreasing in ``n``; returns ``n_max`` if
    even the full stream misses the target.
    """
    if tv_at(n_max) > target:
        return n_max
    if tv_at(1) <= target:
        return 1
    lo, hi = 1, n_max  # tv_at(lo) misses, tv_at(hi) hits
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if tv_at(mid) <= target:
            hi = mid
        else:
            lo = mid
    return hi


@dataclass(frozen=True)
class EstimatorRow:
    seed: int
    n: int
    omega: str
    tv_histogram: float
    tv_selected: float
    selected: str


ESTIMATOR_HEADER = tuple(f.name for f in fields(EstimatorRow))


def estimator_comparison(gt_factory: Callable[[int], object], ns: Iterable[int], seeds: Iterable[int],
                         omega="auto", master_seed: int = 0, mode: str = "full") -> list[EstimatorRow]:
    """TV to the truth of the histogram and the selection estimator on shared samples.

    ``gt_factory(seed)`` returns the ground truth; samples for each ``n`` are
    prefixes of one stream per seed.
    """
    ns = sorted(int(n) for n in ns)
    out = []
    for seed in seeds:
        gt = gt_factory(seed)
        N, M = gt.n_inputs, gt.n_outputs
        pool = candidate_pool(N, M, mode)
        truth = gt.joint_matrix()
        xs, ys = gt.sample_pairs(ns[-1], make_rng(master_seed, seed, _BATCH))
        for n in ns:
            emp = histogram_estimate((xs[:n], ys[:n]), N, M)
            f, est = select_factorization(emp, omega, pool, N, M)
            out.append(EstimatorRow(seed, n, str(omega), total_variation(emp.joint_matrix(), truth),
                                    total_variation(est.joint_matrix(), truth), f.to_json()))
    return out


def sample_complexity(gt_factory: Callable[[int], object], seeds: Iterable[int], target: float = 0.1,
                      omega="auto", n_max: int = 1 << 16, master_seed: int = 0,
                      mode: str = "full") -> list[tuple[int, int, int]]:
    """``(seed, n_histogram, n_selected)``: samples needed to reach ``tv <= target``."""
    out = []
    for seed in seeds:
        gt = gt_factory(seed)
        N, M = gt.n_inputs, gt.n_outputs
        pool = candidate_pool(N, M, mode)
        truth = gt.joint_matrix()
        xs, ys = gt.sample_pairs(n_max, make_rng(master_seed, seed, _BATCH))

        def tv_hist(n):
            return total_variation(histogram_estimate((xs[:n], ys[:n]), N, M).joint_matrix(), truth)

        def tv_sel(n):
            est = select_factorization((xs[:n], ys[:n]), omega, pool, N, M)[1]
            return total_variation(est.joint_matrix(), truth)

        out.append((seed, first_passage_n(tv_hist, target, n_max), first_passage_n(tv_sel, target, n_max)))
    return out


def omega_sensitivity(gt_factory, omegas, n: int, seeds, master_seed: int = 0) -> list[dict]:
    """Mean TV of the selection estimator for each ``omega`` at a fixed ``n``."""
    rows = []
    for omega in omegas:
        res = estimator_comparison(gt_factory, [n], seeds, omega, master_seed)
        rows.append({"omega": str(omega), "n": n,
                     "tv_selected": float(np.mean([r.tv_selected for r in res])),
                     "tv_histogram": float(np.mean([r.tv_histogram for r in res]))})
    return rows


def log_uniform_gap(gt) -> float:
    """Excess loss of the uniform predictor: ``log M - mean_x H(p(.|x))``."""
    return math.log(gt.n_outputs) - float(gt.entropy().mean())
