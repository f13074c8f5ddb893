"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
Criteria 4 to 6 train many networks; the whole file takes about half an hour
on one CPU core.
"""

import json
import time

import numpy as np
import pytest
from scipy import stats

from factorlab.cli import main
from factorlab.config import DataConfig, TrainConfig
from factorlab.datagen import build_ground_truth, ground_truth_for, make_rng, observed_count
from factorlab.factorization import (
    Factorization,
    complexity_of,
    enumerate_factorizations,
    generate_parents_fixed,
    members,
)
from factorlab.flops import FlopModel, epoch_cost, forward_flops_per_input, training_flops
from factorlab.harness import (
    ESTIMATOR_HEADER,
    ISOFLOP_HEADER,
    estimator_comparison,
    final_rows,
    ground_truth_for_seed,
    isoflop_sweep,
    run_compression,
    run_experiment,
    run_generalization,
    sample_complexity,
    write_metrics_csv,
    write_table_csv,
)
from factorlab.nn import backward, forward, init_model, kl_rows
from factorlab.theory import (
    Mode,
    build_counterexample,
    build_logit_factorization,
    counterexample_conditional,
    max_abs_error,
    numerical_rank,
    random_small_factorization,
)

pytestmark = pytest.mark.acceptance


def test_criterion_1_logit_factorization_exact(criterion):
    start = time.perf_counter()
    rng = make_rng(2024, 1)
    worst, rank_ok, dims = 0.0, True, []
    for _ in range(50):
        f = random_small_factorization(rng, 256)
        assert f.n_inputs <= 256 and f.n_outputs <= 256
        gt = ground_truth_for(f, float(rng.choice([1e-3, 0.1, 1.0])), rng)
        lam = gt.log_likelihood_matrix()
        for mode in Mode:
            worst = max(worst, max_abs_error(build_logit_factorization(gt, mode).reconstruct(), lam))
        ac = complexity_of(f).ac_value
        rank_ok &= numerical_rank(lam) <= ac
        dims.append(ac)
    elapsed = time.perf_counter() - start
    ok = worst < 1e-9 and rank_ok and elapsed < 60
    criterion(1, ok, f"max abs error {worst:.2e}, rank <= ac on all 50: {rank_ok}, {elapsed:.1f}s")
    assert ok


def test_criterion_2_complexity_values(criterion):
    start = time.perf_counter()
    rng = make_rng(2024, 2)
    default = Factorization((2,) * 12, (8,) * 4, generate_parents_fixed(12, 4, 2, rng))
    degree3 = Factorization((2,) * 12, (8,) * 4, generate_parents_fixed(12, 4, 3, rng))
    sixes = Factorization((6,) * 4, (8,) * 3, generate_parents_fixed(4, 3, 1, rng))
    values = [complexity_of(f).ac_value for f in (default, degree3, sixes)]
    # the default config builds the same structure through the data pipeline
    from_config = complexity_of(build_ground_truth(DataConfig(), rng).factorization).ac_value
    elapsed = time.perf_counter() - start
    ok = values == [16, 32, 18] and from_config == 16 and elapsed < 1
    criterion(2, ok, f"values {values}, default pipeline {from_config}, {elapsed * 1e3:.0f}ms")
    assert ok


def _fd_max_relative_error(mode, n_coords, rng, floor):
    f = Factorization((2, 2, 2), (2, 4), ((0,), (1, 2)))
    gt = ground_truth_for(f, 0.5, rng)
    model = init_model(8, 8, 8, 16, 2, rng, mode, f)
    xs = np.arange(8)
    targets, logs = gt.conditional_matrix(), gt.log_conditional_matrix()

    def loss():
        return float(kl_rows(targets, logs, forward(model, xs).log_probs).mean())

    grads = backward(model, forward(model, xs, unique_inputs=True), targets)
    params = model.trainable()
    names = sorted(params)
    sizes = np.array([params[n].size for n in names], dtype=float)
    worst = 0.0
    for _ in range(n_coords):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        t = params[name]
        idx = tuple(int(rng.integers(s)) for s in t.shape)
        old = t[idx]
        t[idx] = old + 1e-5
        up = loss()
        t[idx] = old - 1e-5
        down = loss()
        t[idx] = old
        fd, an = (up - down) / 2e-5, grads[name][idx]
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), floor))
    return worst


def test_criterion_3_gradients(criterion):
    start = time.perf_counter()
    # gradients below 1e-5 are compared in absolute terms: there the central
    # difference is dominated by float64 roundoff of the loss
    errs = {m: _fd_max_relative_error(m, 200, make_rng(2024, 3, i), 1e-5)
            for i, m in enumerate(("learned", "fce"))}
    raw = {m: _fd_max_relative_error(m, 200, make_rng(2024, 3, i), 1e-300)
           for i, m in enumerate(("learned", "fce"))}
    elapsed = time.perf_counter() - start
    ok = max(errs.values()) < 1e-5 and elapsed < 30
    detail = ", ".join(f"{m} {errs[m]:.1e} (no floor {raw[m]:.1e})" for m in errs)
    criterion(3, ok, f"{detail}, {elapsed:.1f}s")
    assert ok


def _compression_cfg(d):
    return TrainConfig(regime="compression").replace(**{
        "data.input_factors": [2] * 8, "data.output_factors": [8, 8, 4], "data.degree": 2,
        "model.d": d, "model.h": 2 * d, "optim.epochs": 100_000, "optim.scheduler": "custom_log",
        "seeds": list(range(10)),
    })


def _best_loss(rows):
    return min(r.loss_population for r in rows)


def test_criterion_4_compression_saturation(criterion):
    start = time.perf_counter()
    wide, narrow = _compression_cfg(16), _compression_cfg(6)
    chi = {complexity_of(ground_truth_for_seed(wide, s).factorization).ac_value for s in wide.seeds}
    # both widths are compared on the best loss reached within T epochs
    narrow_med = float(np.median([_best_loss(run_compression(narrow, seed=s)) for s in narrow.seeds]))
    # d=16 may stop once below everything the comparison needs: later epochs can
    # only lower its best loss
    stop = min(1e-4, narrow_med / 10)
    wide_rows = [list(run_compression(wide, seed=s, stop_below=stop)) for s in wide.seeds]
    wide_med = float(np.median([_best_loss(rows) for rows in wide_rows]))
    last = max(rows[-1].epoch for rows in wide_rows)
    elapsed = time.perf_counter() - start
    ok = chi == {12} and wide_med < 1e-4 and narrow_med >= 10 * wide_med and elapsed < 1800
    criterion(4, ok, f"chi {sorted(chi)}, d=16 median best {wide_med:.2e} (runs end by epoch {last}), "
                     f"d=6 median best {narrow_med:.2e}, ratio {narrow_med / wide_med:.1f}, "
                     f"{elapsed / 60:.1f} min")
    assert ok


def test_criterion_5_single_pass_ordering(criterion):
    start = time.perf_counter()
    chis, means = [], []
    for factors in ([2] * 8, [4] * 4, [16] * 2):
        cfg = TrainConfig().replace(**{
            "data.input_factors": factors, "data.output_factors": [4] * 4, "data.degree": 2,
            "optim.epochs": 200, "batch_size": 1024, "seeds": list(range(20)),
        })
        rows = final_rows(run_experiment(cfg))
        sc = {complexity_of(ground_truth_for_seed(cfg, s).factorization).sc_value for s in cfg.seeds}
        assert len(sc) == 1
        chis.append(sc.pop())
        means.append(float(np.mean([r.loss_population for r in rows])))
    tau = stats.kendalltau(chis, means).statistic
    strictly = chis[0] < chis[1] < chis[2] and means[0] < means[1] < means[2]
    elapsed = time.perf_counter() - start
    ok = strictly and tau == 1.0 and elapsed < 900
    criterion(5, ok, f"chi {[round(c, 1) for c in chis]}, mean final loss "
                     f"{[round(m, 4) for m in means]}, tau {tau}, {elapsed / 60:.1f} min")
    assert ok


def test_criterion_6_generalization_extremes(criterion):
    start = time.perf_counter()
    finals, ratios = {}, {}
    for beta in (0.0, 1.0):
        cfg = TrainConfig(regime="generalization").replace(**{
            "data.input_factors": [2] * 8, "data.output_factors": [4] * 4, "data.degree": None,
            "data.beta": beta, "model.d": 32, "model.h": 64, "optim.epochs": 2000,
        })
        f, r = [], []
        for s in range(10):
            rows = list(run_generalization(cfg, seed=s))
            f.append(rows[-1].loss_unobserved)
            r.append(rows[-1].loss_unobserved / rows[0].loss_unobserved)
        finals[beta], ratios[beta] = np.array(f), np.array(r)
    elapsed = time.perf_counter() - start
    ok = bool(np.all(finals[0.0] < 1e-3) and np.all(ratios[1.0] > 0.5) and elapsed < 1200)
    criterion(6, ok, f"beta=0 max final {finals[0.0].max():.1e}, beta=1 min final/initial "
                     f"{ratios[1.0].min():.2f}, {elapsed / 60:.1f} min")
    assert ok


def _estimator_gt(seed):
    rng = make_rng(7, seed)
    f = Factorization((2, 2, 2), (2, 2), generate_parents_fixed(3, 2, 1, rng))
    return ground_truth_for(f, 0.1, rng)


def test_criterion_7_estimator_separation(criterion):
    start = time.perf_counter()
    seeds = range(100)
    rows = estimator_comparison(_estimator_gt, [100, 1000, 10_000], seeds, omega="auto")
    mean_sel = {n: np.mean([r.tv_selected for r in rows if r.n == n]) for n in (100, 1000, 10_000)}
    mean_hist = {n: np.mean([r.tv_histogram for r in rows if r.n == n]) for n in (100, 1000, 10_000)}
    passage = sample_complexity(_estimator_gt, seeds, target=0.1, omega="auto")
    med_hist = float(np.median([p[1] for p in passage]))
    med_sel = float(np.median([p[2] for p in passage]))
    elapsed = time.perf_counter() - start
    ok = all(mean_sel[n] <= mean_hist[n] for n in mean_sel) and med_sel <= 0.5 * med_hist and elapsed < 300
    tvs = ", ".join(f"n={n}: {mean_sel[n]:.3f} vs {mean_hist[n]:.3f}" for n in mean_sel)
    criterion(7, ok, f"mean TV selected vs histogram {tvs}; median n to TV 0.1: {med_sel:g} vs "
                     f"{med_hist:g}, {elapsed:.0f}s")
    assert ok


def test_criterion_8_counterexample(criterion):
    start = time.perf_counter()
    ranks, only_trivial = [], True
    candidates = list(enumerate_factorizations(4, 4))
    for s in range(5):
        rng = make_rng(2024, 8, s)
        t, v = rng.uniform(0.05, 0.95, 4), rng.dirichlet(np.ones(3))
        ranks.append(numerical_rank(build_counterexample(t, v)))
        found = members(counterexample_conditional(t, v), candidates, tol=1e-6)
        only_trivial &= bool(found) and all(f.is_trivial_equivalent() for f in found)
    elapsed = time.perf_counter() - start
    ok = max(ranks) <= 3 and only_trivial and elapsed < 60
    criterion(8, ok, f"ranks {ranks}, only trivial factorizations: {only_trivial}, {elapsed:.1f}s")
    assert ok


def test_criterion_9_flop_model(criterion):
    start = time.perf_counter()
    fm = FlopModel(1, 64, 128, 4096)
    forward_ok = forward_flops_per_input(fm) == 573_440
    rng = make_rng(2024, 9)
    linear_ok = all(
        training_flops(fm, i, e) == 3 * 573_440 * i * e
        for i, e in zip(rng.integers(1, 5000, 20).tolist(), rng.integers(0, 10**6, 20).tolist())
    )
    cfg = TrainConfig(regime="generalization").replace(**{
        "data.input_factors": [2] * 6, "data.output_factors": [4] * 3, "model.d": 8, "model.h": 16,
    })
    small = FlopModel(1, 8, 16, 64)
    budgets, gammas = [10**6, 2 * 10**6], [0.25, 0.5, 1.0]
    iso_ok = True
    for row in isoflop_sweep(cfg, budgets, gammas):
        inputs = observed_count(64, row.gamma)
        cost = epoch_cost(small, inputs)
        iso_ok &= row.flops == 3 * forward_flops_per_input(small) * inputs * row.epochs
        iso_ok &= row.flops <= row.budget < row.flops + cost
    elapsed = time.perf_counter() - start
    ok = forward_ok and linear_ok and iso_ok and elapsed < 1
    criterion(9, ok, f"forward 573440: {forward_ok}, exact 3x linearity: {linear_ok}, "
                     f"isoflop accounting: {iso_ok}, {elapsed * 1e3:.0f}ms")
    assert ok


def _run_everything(tmp):
    """Every experiment type through the library and the command line; returns output files."""
    tmp.mkdir()
    small = {"data.input_factors": [2] * 6, "data.output_factors": [4] * 3, "model.d": 8, "model.h": 16,
             "optim.epochs": 30, "seeds": [0, 1]}
    paths = []
    for regime in ("single_pass", "compression", "generalization"):
        extra = {"batch_size": 64} if regime == "single_pass" else {}
        cfg = TrainConfig(regime=regime).replace(**small, **extra)
        p = tmp / f"{regime}.csv"
        write_metrics_csv(run_experiment(cfg), p, cfg)
        paths += [p, tmp / f"{regime}.csv.meta.json"]
    gen = TrainConfig(regime="generalization").replace(**small)
    p = tmp / "iso.csv"
    write_table_csv(isoflop_sweep(gen, [10**6], [0.5, 1.0]), p, ISOFLOP_HEADER)
    paths.append(p)
    p = tmp / "est.csv"
    write_table_csv(estimator_comparison(_estimator_gt, [50, 500], [0, 1]), p, ESTIMATOR_HEADER)
    paths.append(p)

    cfg_path = tmp / "cli.json"
    cfg_path.write_text(json.dumps({"data": {"input_factors": [2] * 6, "output_factors": [4] * 3},
                                    "model": {"d": 8, "h": 16}, "optim": {"epochs": 30},
                                    "batch_size": 64, "seeds": [0, 1]}))
    csv_path, svg_path = tmp / "cli.csv", tmp / "cli.svg"
    assert main(["train", "--config", str(cfg_path), "--out", str(csv_path)]) == 0
    assert main(["plot", "--csv", str(csv_path), "--x", "flops", "--group", "seed", "--loglog",
                 "--out", str(svg_path)]) == 0
    svg2 = tmp / "regimes.svg"
    assert main(["plot", "--csv", *(str(tmp / f"{r}.csv") for r in ("single_pass", "compression")),
                 "--out", str(svg2)]) == 0
    return paths + [csv_path, tmp / "cli.csv.meta.json", svg_path, svg2]


def test_criterion_10_determinism(criterion, tmp_path, capsys):
    first = _run_everything(tmp_path / "a")
    second = _run_everything(tmp_path / "b")
    identical = [a.read_bytes() == b.read_bytes() for a, b in zip(first, second)]
    capsys.readouterr()
    ok = all(identical) and len(identical) == 12
    criterion(10, ok, f"{sum(identical)}/{len(identical)} CSV, JSON and SVG outputs byte-identical")
    assert ok
