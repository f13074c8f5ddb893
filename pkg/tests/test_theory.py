import numpy as np
import pytest

from factorlab.config import DataConfig
from factorlab.datagen import build_ground_truth, ground_truth_for, make_rng
from factorlab.factorization import Factorization, complexity_of, enumerate_factorizations, members
from factorlab.theory import (
    Mode,
    RankDeficientEmbedding,
    build_counterexample,
    build_fce_exact_predictor,
    build_logit_factorization,
    column_constant_error,
    counterexample_conditional,
    max_abs_error,
    numerical_rank,
    random_small_factorization,
    run_verification,
)


def test_identity_chain():
    gt = build_ground_truth(DataConfig((2,), (2,), 1, None, 1.0), make_rng(0))
    fac = build_logit_factorization(gt, Mode.MIXED)
    assert fac.dim == 2
    assert max_abs_error(fac.reconstruct(), gt.log_likelihood_matrix()) < 1e-12


def test_default_small_config_dims():
    gt = build_ground_truth(DataConfig((2,) * 6, (4,) * 3, 2, None, 0.1), make_rng(1))
    lam = gt.log_likelihood_matrix()
    dims = {m: build_logit_factorization(gt, m) for m in Mode}
    assert dims[Mode.MIXED].dim == 12
    assert dims[Mode.OUTPUT_SIDE].dim == 12
    assert dims[Mode.PARENT_SIDE].dim == 12
    for fac in dims.values():
        assert max_abs_error(fac.reconstruct(), lam) < 1e-9


def test_mixed_picks_parent_side_when_smaller():
    f = Factorization((2,) * 6, (8,) * 4, ((0, 1), (2, 3), (4, 5), (0, 5)))
    gt = ground_truth_for(f, 0.1, make_rng(2))
    assert build_logit_factorization(gt, Mode.MIXED).dim == 16
    assert build_logit_factorization(gt, Mode.OUTPUT_SIDE).dim == 32
    assert build_logit_factorization(gt, Mode.PARENT_SIDE).dim == 16


@pytest.mark.parametrize("seed", range(20))
def test_random_configs_exact_and_rank_bounded(seed):
    rng = make_rng(3, seed)
    f = random_small_factorization(rng, 256)
    gt = ground_truth_for(f, 0.3, rng)
    lam = gt.log_likelihood_matrix()
    facs = {m: build_logit_factorization(gt, m) for m in Mode}
    for fac in facs.values():
        assert max_abs_error(fac.reconstruct(), lam) < 1e-9
    rep = complexity_of(f)
    assert facs[Mode.MIXED].dim == rep.ac_value
    assert facs[Mode.OUTPUT_SIDE].dim == sum(f.output_shape.sizes)
    assert facs[Mode.PARENT_SIDE].dim == sum(rep.parent_cardinalities)
    assert facs[Mode.MIXED].dim <= min(facs[Mode.OUTPUT_SIDE].dim, facs[Mode.PARENT_SIDE].dim)
    assert numerical_rank(lam) <= rep.ac_value


def test_column_constant_error_ignores_shifts():
    rng = make_rng(4)
    a = rng.standard_normal((5, 3))
    b = a + np.array([1.0, -2.0, 0.5])
    assert column_constant_error(a, b) < 1e-12
    assert max_abs_error(a, b) == pytest.approx(2.0)


def test_counterexample_column():
    lam = build_counterexample([0.3, 0.6], [0.4, 0.6])
    assert lam.shape == (3, 2)
    col = np.exp(lam[:, 0])
    np.testing.assert_allclose(col, [0.3, 0.28, 0.42], atol=1e-15)
    np.testing.assert_allclose(np.exp(lam).sum(axis=0), 1.0, atol=1e-12)


def test_counterexample_rank():
    for s in range(10):
        rng = make_rng(5, s)
        lam = build_counterexample(rng.uniform(0.01, 0.99, 30), rng.dirichlet(np.ones(12)))
        assert numerical_rank(lam) <= 3


def test_counterexample_rejects_bad_inputs():
    with pytest.raises(ValueError):
        build_counterexample([0.0, 0.5], [0.5, 0.5])
    with pytest.raises(ValueError):
        build_counterexample([0.2, 0.5], [0.5, 0.6])


def test_counterexample_only_trivial_factorizations():
    rng = make_rng(6)
    cond = counterexample_conditional(rng.uniform(0.05, 0.95, 4), rng.dirichlet(np.ones(3)))
    found = members(cond, enumerate_factorizations(4, 4), tol=1e-6)
    assert found
    assert all(f.is_trivial_equivalent() for f in found)


def _fce_matrices(f, d, rng):
    return [rng.standard_normal((d, p)) for p in f.input_shape.sizes]


def _embed_all(f, mats):
    xc = f.input_coords()
    return sum(m.T[xc[:, i]] for i, m in enumerate(mats))


def test_fce_predictor_single_factor():
    f = Factorization((5,), (3,), ((0,),))
    gt = ground_truth_for(f, 0.5, make_rng(7))
    mats = _fce_matrices(f, 6, make_rng(8))
    pred = build_fce_exact_predictor(gt, mats)
    e = _embed_all(f, mats)
    np.testing.assert_array_equal(pred.recover_digits(e)[:, 0], np.arange(5))
    np.testing.assert_array_equal(pred.parent_features(pred.recover_digits(e)), np.eye(5))
    np.testing.assert_allclose(pred(e), gt.conditional_matrix(), atol=1e-12)


def test_fce_predictor_two_factors():
    f = Factorization((2, 2), (2,), ((0, 1),))
    gt = ground_truth_for(f, 0.5, make_rng(9))
    mats = _fce_matrices(f, 4, make_rng(10))
    pred = build_fce_exact_predictor(gt, mats)
    e = _embed_all(f, mats)
    # four one-hot bits map to the four parent-pair indicators
    np.testing.assert_array_equal(pred.parent_features(pred.recover_digits(e)), np.eye(4))
    np.testing.assert_allclose(pred(e), gt.conditional_matrix(), atol=1e-12)


def test_fce_predictor_rejects_small_dimension():
    f = Factorization((2, 3), (2,), ((0, 1),))
    gt = ground_truth_for(f, 0.5, make_rng(11))
    with pytest.raises(RankDeficientEmbedding, match="P=5"):
        build_fce_exact_predictor(gt, _fce_matrices(f, 4, make_rng(12)))
    mats = _fce_matrices(f, 6, make_rng(13))
    mats[1][:, 2] = mats[1][:, 0]
    with pytest.raises(RankDeficientEmbedding, match="rank deficient"):
        build_fce_exact_predictor(gt, mats)


def test_run_verification_passes():
    results = run_verification(n_configs=10)
    assert [r.name for r in results] == [
        "logit-factorization-exact", "rank-at-most-ac", "counterexample-rank",
        "counterexample-no-factorization", "fce-exact-predictor",
    ]
    assert all(r.passed for r in results), results


def test_run_verification_detects_fault():
    results = run_verification(n_configs=5, inject_fault="table")
    failed = {r.name for r in results if not r.passed}
    assert "logit-factorization-exact" in failed
