import warnings

import numpy as np
import pytest
import scipy.optimize
from hypothesis import given, settings
from hypothesis import strategies as st

from lsocv.correlation import (
    CorrelationModel,
    ar1,
    banded_lag1,
    binned_lag_correlations,
    build_blocks,
    compound_symmetry,
    correlation_matrix,
    estimate_ar1_rho,
    estimate_cs_rho,
    estimate_exponential_params,
    estimate_unstructured,
    exponential_nugget,
    exponential_nugget_correlation,
    independence,
    solve_block,
    unstructured,
    working_block,
)
from lsocv.data import LongitudinalDataset, Subject
from lsocv.errors import ConfigError, EstimationError, NearSingularError


def test_independence_block_is_identity():
    b = working_block(independence(), 5)
    assert np.array_equal(b.matrix, np.eye(5))
    assert b.is_spd


def test_compound_symmetry_entries():
    b = working_block(compound_symmetry(0.8), 5)
    W = b.matrix
    assert np.allclose(np.diag(W), 1.0)
    off = W[~np.eye(5, dtype=bool)]
    assert np.allclose(off, 0.8)


def test_exponential_nugget_lag_one_value():
    # alpha + (1 - alpha) * exp(-theta), frozen from direct evaluation
    val = exponential_nugget_correlation(1.0, 0.40, 0.75)
    assert val == pytest.approx(0.6834199316446088, abs=1e-15)
    b = working_block(exponential_nugget(0.40, 0.75), np.array([0.0, 1.0, 3.5]))
    assert b.matrix[0, 1] == pytest.approx(0.6834199316446088, abs=1e-15)
    assert b.matrix[0, 2] == pytest.approx(0.40 + 0.60 * np.exp(-0.75 * 3.5))
    assert np.allclose(np.diag(b.matrix), 1.0)


@settings(max_examples=50, deadline=None)
@given(rho=st.floats(min_value=-0.95, max_value=0.95), n=st.integers(min_value=1, max_value=8))
def test_ar1_entries_exact(rho, n):
    W = correlation_matrix(ar1(rho), n)
    for j in range(n):
        for k in range(n):
            power = 1.0
            for _ in range(abs(j - k)):
                power *= rho
            assert W[j, k] == power


@settings(max_examples=40, deadline=None)
@given(
    structure=st.sampled_from(["ind", "cs", "ar1"]),
    rho=st.floats(min_value=0.0, max_value=0.9),
    n=st.integers(min_value=2, max_value=7),
)
def test_blocks_unit_diagonal_and_cholesky(structure, rho, n):
    model = CorrelationModel(structure, rho=rho if structure != "ind" else None)
    b = working_block(model, n)
    assert np.allclose(np.diag(b.matrix), 1.0)
    np.linalg.cholesky(b.matrix)  # raises if not PD
    assert b.is_spd


def test_working_block_deterministic():
    m = exponential_nugget(0.3, 1.2)
    t = np.array([0.0, 0.7, 1.9, 2.2])
    b1, b2 = working_block(m, t), working_block(m, t)
    assert b1.matrix.tobytes() == b2.matrix.tobytes()


def test_parameter_validation():
    with pytest.raises(ConfigError):
        CorrelationModel("cs")
    with pytest.raises(ConfigError):
        ar1(1.0)
    with pytest.raises(ConfigError):
        exponential_nugget(0.0, 1.0)
    with pytest.raises(ConfigError):
        exponential_nugget(0.5, -1.0)
    with pytest.raises(ConfigError):
        unstructured([[1.0, 0.5], [0.4, 1.0]])  # asymmetric
    with pytest.raises(ConfigError):
        CorrelationModel("nope")
    # cs lower bound depends on block size
    with pytest.raises(ConfigError):
        correlation_matrix(compound_symmetry(-0.5), 5)


def test_near_singular_guard():
    with pytest.raises(NearSingularError):
        working_block(compound_symmetry(1 - 1e-13), 4)
    # duplicate times make the exponential-nugget block singular
    with pytest.raises(NearSingularError):
        working_block(exponential_nugget(0.4, 0.75), np.array([1.0, 1.0, 2.0]))


def test_banded_lag1_indefinite_but_usable():
    # 1 +/- sqrt(3) rho eigenvalue range: indefinite at rho = 0.8, n = 5
    b = working_block(banded_lag1(0.8), 5)
    assert not b.is_spd
    rhs = np.arange(5.0)
    x = b.solve(rhs)
    assert np.allclose(b.matrix @ x, rhs, atol=1e-10)
    assert b.logabsdet == pytest.approx(np.log(abs(np.linalg.det(b.matrix))))


def test_solve_block_identity_and_residuals():
    b = working_block(independence(), 4)
    B = np.arange(12.0).reshape(4, 3)
    assert np.array_equal(solve_block(b, B), B)

    rng = np.random.default_rng(7)
    M = rng.normal(size=(4, 4))
    spd = M @ M.T + 4 * np.eye(4)
    d = np.sqrt(np.diag(spd))
    spd = spd / np.outer(d, d)
    blk = type(b)(spd)
    X = blk.solve(np.eye(4))
    assert np.max(np.abs(spd @ X - np.eye(4))) < 1e-10

    cs = working_block(compound_symmetry(0.8), 3)
    x = cs.solve(np.ones(3))
    assert np.max(np.abs(cs.matrix @ x - 1.0)) < 1e-12


def test_build_blocks_shares_identical_structures():
    data = LongitudinalDataset([
        Subject(y=np.zeros(4)), Subject(y=np.zeros(4)), Subject(y=np.zeros(3)),
    ])
    blocks = build_blocks(compound_symmetry(0.5), data)
    assert blocks[0] is blocks[1]
    assert blocks[0] is not blocks[2]
    assert blocks[2].n == 3


def test_unstructured_requires_common_cluster_size():
    data = LongitudinalDataset([Subject(y=np.zeros(3)), Subject(y=np.zeros(4))])
    M = np.eye(3)
    with pytest.raises(ConfigError):
        build_blocks(unstructured(M), data)


def test_correlation_json_round_trip():
    for m in (independence(), compound_symmetry(0.8), ar1(-0.2),
              exponential_nugget(0.4, 0.75), unstructured(np.eye(3))):
        again = CorrelationModel.from_json(m.to_json())
        assert again == m
    with pytest.raises(ConfigError):
        CorrelationModel.from_json({"structure": "cs", "rho": 0.5, "bogus": 1})


# ---------------------------------------------------------------------------
# plug-in estimation
# ---------------------------------------------------------------------------


def _nugget_residuals(alpha, theta, n=400, n_i=8, seed=0):
    rng = np.random.default_rng(seed)
    resids, times = [], []
    for _ in range(n):
        t = np.sort(rng.uniform(0.0, 4.0, size=n_i))
        lag = np.abs(t[:, None] - t[None, :])
        R = exponential_nugget_correlation(lag, alpha, theta)
        np.fill_diagonal(R, 1.0)
        resids.append(np.linalg.cholesky(R) @ rng.standard_normal(n_i))
        times.append(t)
    return resids, times


def test_exponential_recovery_from_synthetic_residuals():
    resids, times = _nugget_residuals(0.4, 0.75)
    a, th = estimate_exponential_params(resids, times)
    assert abs(a - 0.4) < 0.05
    assert abs(th - 0.75) < 0.05 * 0.75 / 0.05  # theta is less identified; keep it sane
    assert abs(th - 0.75) < 0.3


def test_iid_residuals_hit_alpha_boundary():
    rng = np.random.default_rng(3)
    resids = [rng.standard_normal(6) for _ in range(500)]
    times = [np.arange(6.0) for _ in range(500)]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        a, _ = estimate_exponential_params(resids, times)
    assert a < 0.02
    assert any("boundary" in str(w.message) for w in caught)


def test_two_bin_fit_matches_algebraic_solution():
    # three equally spaced observations produce exactly two lag bins
    rng = np.random.default_rng(11)
    R = exponential_nugget_correlation(np.abs(np.subtract.outer(np.arange(3.0), np.arange(3.0))),
                                       0.4, 0.75)
    np.fill_diagonal(R, 1.0)
    L = np.linalg.cholesky(R)
    resids = [L @ rng.standard_normal(3) for _ in range(4000)]
    times = [np.arange(3.0)] * 4000
    centers, corrs, counts = binned_lag_correlations(resids, times)
    assert len(centers) == 2
    u1, u2 = centers
    c1, c2 = corrs

    # algebraic oracle: alpha(theta) from bin 1 substituted into bin 2
    def gap(theta):
        a = (c1 - np.exp(-theta * u1)) / (1.0 - np.exp(-theta * u1))
        return a + (1.0 - a) * np.exp(-theta * u2) - c2

    theta_star = scipy.optimize.brentq(gap, 1e-4, 20.0)
    alpha_star = (c1 - np.exp(-theta_star * u1)) / (1.0 - np.exp(-theta_star * u1))
    a, th = estimate_exponential_params(resids, times)
    assert a == pytest.approx(alpha_star, abs=1e-4)
    assert th == pytest.approx(theta_star, rel=1e-3)


def test_estimation_underdetermined_single_bin():
    resids = [np.array([1.0, -0.5])] * 10
    times = [np.array([0.0, 1.0])] * 10
    with pytest.raises(EstimationError):
        estimate_exponential_params(resids, times)


def test_moment_estimators_recover_truth():
    rng = np.random.default_rng(5)
    n, n_i = 3000, 5
    R_cs = correlation_matrix(compound_symmetry(0.5), n_i)
    L = np.linalg.cholesky(R_cs)
    resids = [L @ rng.standard_normal(n_i) for _ in range(n)]
    assert estimate_cs_rho(resids) == pytest.approx(0.5, abs=0.03)

    R_ar = correlation_matrix(ar1(0.6), n_i)
    L = np.linalg.cholesky(R_ar)
    resids = [L @ rng.standard_normal(n_i) for _ in range(n)]
    assert estimate_ar1_rho(resids) == pytest.approx(0.6, abs=0.03)

    R_un = np.eye(3)
    R_un[0, 1] = R_un[1, 0] = 0.8
    R_un[1, 2] = R_un[2, 1] = 0.8
    R_un[0, 2] = R_un[2, 0] = 0.3
    L = np.linalg.cholesky(R_un)
    resids = [L @ rng.standard_normal(3) for _ in range(n)]
    est = estimate_unstructured(resids)
    assert np.max(np.abs(est - R_un)) < 0.05
