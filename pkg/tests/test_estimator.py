import numpy as np
import pytest

from lsocv.basis import BasisSpec, DesignAssembly, TermColumns, TermSpec, assemble_design
from lsocv.correlation import ar1, compound_symmetry, correlation_matrix, independence
from lsocv.data import LongitudinalDataset, Subject
from lsocv.errors import ConfigError
from lsocv.estimator import (
    PenalizedFitter,
    bootstrap_ci,
    fit,
    leverage_diagnostics,
)


def make_dataset(n=5, n_i=3, seed=0, names=("x1",)):
    rng = np.random.default_rng(seed)
    subs = []
    for _ in range(n):
        covs = {nm: rng.uniform(-1, 1, n_i) for nm in names}
        subs.append(Subject(y=rng.normal(size=n_i), covariates=covs))
    return LongitudinalDataset(subs)


def raw_assembly(X, row_sizes, penalties=()):
    """Assembly wrapper around an explicit matrix, for oracle-style tests."""
    terms = [TermColumns(TermSpec("linear", "x"), 0, X.shape[1])]
    return DesignAssembly(X=np.asarray(X, float), terms=terms,
                          penalties=list(penalties), row_sizes=list(row_sizes))


def dense_w(model, sizes):
    import scipy.linalg

    return scipy.linalg.block_diag(*[correlation_matrix(model, k) for k in sizes])


def dense_hat(X, W, penalties, lam):
    H = X.T @ np.linalg.solve(W, X)
    for lk, Sk in zip(np.atleast_1d(lam), penalties):
        H = H + lk * Sk
    return X @ np.linalg.solve(H, X.T @ np.linalg.solve(W, np.eye(W.shape[0])))


def test_square_design_interpolates():
    rng = np.random.default_rng(1)
    n, n_i = 3, 2
    X = rng.normal(size=(n * n_i, n * n_i))
    y = rng.normal(size=n * n_i)
    data = LongitudinalDataset([
        Subject(y=y[i * n_i:(i + 1) * n_i]) for i in range(n)
    ])
    res = fit(data, raw_assembly(X, [n_i] * n), independence(), [])
    assert np.allclose(res.beta, np.linalg.solve(X, y), atol=1e-8)
    assert np.allclose(res.fitted, y, atol=1e-8)
    for A_ii in res.hat_blocks:
        assert np.allclose(A_ii, np.eye(n_i), atol=1e-7)


def test_huge_lambda_gives_weighted_straight_line():
    rng = np.random.default_rng(2)
    n, n_i = 12, 4
    subs = []
    for _ in range(n):
        x = rng.uniform(-2, 2, n_i)
        subs.append(Subject(y=np.sin(x) + 0.1 * rng.normal(size=n_i),
                            covariates={"x": x}))
    data = LongitudinalDataset(subs)
    spec = BasisSpec(order=4, interior_knots=6, domain=(-2.0, 2.0), penalty_order=2)
    asm = assemble_design(data, [TermSpec("smooth", "x", spec)])
    model = compound_symmetry(0.5)
    res = fit(data, asm, model, [1e8])

    # oracle: dense weighted regression on (1, x)
    D = np.column_stack([np.ones(data.N), data.covariate_column("x")])
    W = dense_w(model, data.sizes)
    Winv = np.linalg.inv(W)
    beta_line = np.linalg.solve(D.T @ Winv @ D, D.T @ Winv @ data.y)
    assert np.max(np.abs(res.fitted - D @ beta_line)) < 1e-4


def test_beta_matches_dense_quadratic_minimizer():
    # independent oracle: augmented least squares on [W^{-1/2} X; sqrt(lam) L]
    rng = np.random.default_rng(3)
    n, n_i, p = 5, 3, 6
    X = rng.normal(size=(n * n_i, p))
    y = rng.normal(size=n * n_i)
    M = rng.normal(size=(p, p))
    S = M @ M.T
    data = LongitudinalDataset([Subject(y=y[i * n_i:(i + 1) * n_i]) for i in range(n)])
    model = ar1(0.6)
    lam = 0.73
    res = fit(data, raw_assembly(X, [n_i] * n, [S]), model, [lam])

    W = dense_w(model, data.sizes)
    vals, vecs = np.linalg.eigh(W)
    W_isqrt = vecs @ np.diag(vals**-0.5) @ vecs.T
    vals_s, vecs_s = np.linalg.eigh(S)
    L = (vecs_s * np.sqrt(np.maximum(vals_s, 0))).T
    A_aug = np.vstack([W_isqrt @ X, np.sqrt(lam) * L])
    b_aug = np.concatenate([W_isqrt @ y, np.zeros(p)])
    beta_oracle = np.linalg.lstsq(A_aug, b_aug, rcond=None)[0]
    assert np.max(np.abs(res.beta - beta_oracle)) < 1e-9


def test_hat_identity_against_dense_matrix():
    rng = np.random.default_rng(4)
    n, n_i, p = 6, 4, 7
    X = rng.normal(size=(n * n_i, p))
    y = rng.normal(size=n * n_i)
    M = rng.normal(size=(p, p))
    S = M @ M.T
    data = LongitudinalDataset([Subject(y=y[i * n_i:(i + 1) * n_i]) for i in range(n)])
    model = compound_symmetry(0.4)
    res = fit(data, raw_assembly(X, [n_i] * n, [S]), model, [0.3])

    W = dense_w(model, data.sizes)
    A = dense_hat(X, W, [S], [0.3])
    assert np.max(np.abs(res.fitted - A @ y)) < 1e-9
    for i, A_ii in enumerate(res.hat_blocks):
        sl = slice(i * n_i, (i + 1) * n_i)
        assert np.max(np.abs(A_ii - A[sl, sl])) < 1e-9
    assert res.trace_A == pytest.approx(np.trace(A), abs=1e-9)


def test_leverages_nonnegative_and_sum_to_trace():
    rng = np.random.default_rng(5)
    for trial in range(5):
        n, n_i, p = 6, 3, 5
        X = rng.normal(size=(n * n_i, p))
        y = rng.normal(size=n * n_i)
        data = LongitudinalDataset([Subject(y=y[i * n_i:(i + 1) * n_i]) for i in range(n)])
        res = fit(data, raw_assembly(X, [n_i] * n), ar1(0.5), [])
        lev = res.leverages()
        assert np.all(lev >= -1e-10)
        assert lev.sum() == pytest.approx(res.trace_A, abs=1e-10)


def test_trace_monotone_in_each_lambda():
    rng = np.random.default_rng(6)
    data = make_dataset(n=10, n_i=4, seed=6, names=("x1", "x2"))
    spec = BasisSpec(order=4, interior_knots=4, domain=(-1.0, 1.0), penalty_order=2)
    asm = assemble_design(data, [TermSpec("smooth", "x1", spec),
                                 TermSpec("smooth", "x2", spec)])
    fitter = PenalizedFitter(data, asm, compound_symmetry(0.3))
    grid = np.logspace(-4, 4, 9)
    for k in range(2):
        prev = np.inf
        for lv in grid:
            lam = np.array([0.1, 0.1])
            lam[k] = lv
            tr = fitter.fit(lam).trace_A
            assert tr <= prev + 1e-9
            prev = tr


def test_fit_invariant_to_subject_order():
    data = make_dataset(n=7, n_i=3, seed=7)
    spec = BasisSpec(order=4, interior_knots=3, domain=(-1.0, 1.0), penalty_order=2)
    terms = [TermSpec("smooth", "x1", spec)]
    asm = assemble_design(data, terms)
    res = fit(data, asm, compound_symmetry(0.4), [0.5])

    perm = [3, 0, 6, 1, 5, 2, 4]
    data_p = data.subset(perm)
    asm_p = assemble_design(data_p, terms)
    res_p = fit(data_p, asm_p, compound_symmetry(0.4), [0.5])
    reordered = np.concatenate([res.fitted[asm.subject_rows(i)] for i in perm])
    assert np.allclose(res_p.fitted, reordered, atol=1e-9)


def test_error_paths():
    data = make_dataset()
    spec = BasisSpec(order=4, interior_knots=3, domain=(-1.0, 1.0), penalty_order=2)
    asm = assemble_design(data, [TermSpec("smooth", "x1", spec)])
    with pytest.raises(ConfigError):
        fit(data, asm, independence(), [-1.0])
    with pytest.raises(ConfigError):
        fit(data, asm, independence(), [1.0, 2.0])


def test_rank_deficient_design_triggers_ridge_flag():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(6, 8))  # p > N: normal matrix singular at lambda 0
    data = LongitudinalDataset([Subject(y=rng.normal(size=3)) for _ in range(2)])
    res = fit(data, raw_assembly(X, [3, 3]), independence(), [])
    assert res.ridged


# ---------------------------------------------------------------------------
# leverage diagnostics
# ---------------------------------------------------------------------------


def test_identical_designs_have_equal_leverage():
    rng = np.random.default_rng(9)
    n_i = 4
    x = rng.uniform(-1, 1, n_i)
    subs = [Subject(y=rng.normal(size=n_i), covariates={"x1": x.copy()}) for _ in range(8)]
    data = LongitudinalDataset(subs)
    spec = BasisSpec(order=4, interior_knots=2, domain=(-1.0, 1.0), penalty_order=2)
    asm = assemble_design(data, [TermSpec("smooth", "x1", spec)])
    res = fit(data, asm, compound_symmetry(0.5), [1.0])
    rep = leverage_diagnostics(res)
    assert np.allclose(rep.per_subject, rep.mean, atol=1e-10)
    assert rep.max_ratio == pytest.approx(1.0, abs=1e-9)
    assert not rep.dominant


def test_unbalanced_design_reports_ratio():
    rng = np.random.default_rng(10)
    subs = [Subject(y=rng.normal(size=20), covariates={"x1": rng.uniform(-1, 1, 20)})]
    for _ in range(9):
        subs.append(Subject(y=rng.normal(size=2), covariates={"x1": rng.uniform(-1, 1, 2)}))
    data = LongitudinalDataset(subs)
    spec = BasisSpec(order=4, interior_knots=2, domain=(-1.0, 1.0), penalty_order=2)
    asm = assemble_design(data, [TermSpec("smooth", "x1", spec)])
    rep = leverage_diagnostics(fit(data, asm, independence(), [0.01]))
    assert rep.max_ratio > 1.0
    assert rep.per_subject[0] == rep.per_subject.max()


# ---------------------------------------------------------------------------
# cluster bootstrap
# ---------------------------------------------------------------------------


def _spline_space_dataset(n=10, n_i=4, seed=11):
    """Noiseless data whose truth lies exactly in the (uncentered) span."""
    rng = np.random.default_rng(seed)
    spec = BasisSpec(order=4, interior_knots=3, domain=(-1.0, 1.0), penalty_order=2)
    subs = []
    for _ in range(n):
        x = rng.uniform(-1, 1, n_i)
        subs.append(Subject(y=np.zeros(n_i), covariates={"x1": x}))
    data = LongitudinalDataset(subs)
    from lsocv.basis import basis_matrix

    coef = rng.normal(size=spec.n_basis)
    for s in data.subjects:
        s.y = basis_matrix(spec, s.covariates["x1"]) @ coef
    return data, spec


def test_bootstrap_zero_noise_zero_width():
    data, spec = _spline_space_dataset()
    asm = assemble_design(data, [TermSpec("smooth", "x1", spec)])
    out = bootstrap_ci(data, asm, independence(), [0.0], n_boot=25, seed=1)
    for w in out.widths.values():
        assert np.max(np.abs(w)) < 1e-8


def test_bootstrap_width_is_quantile_gap():
    data = make_dataset(n=12, n_i=4, seed=12)
    spec = BasisSpec(order=4, interior_knots=3, domain=(-1.0, 1.0), penalty_order=2)
    asm = assemble_design(data, [TermSpec("smooth", "x1", spec)])
    out = bootstrap_ci(data, asm, independence(), [0.5], n_boot=40, level=0.95, seed=2)
    label = next(iter(out.widths))
    M = out.curves[label]
    assert np.allclose(out.widths[label],
                       np.quantile(M, 0.975, axis=0) - np.quantile(M, 0.025, axis=0))


@pytest.mark.slow
def test_bootstrap_width_shrinks_with_more_subjects():
    spec = BasisSpec(order=4, interior_knots=3, domain=(-2.0, 2.0), penalty_order=2)

    def median_width(n, seed):
        rng = np.random.default_rng(seed)
        subs = []
        for _ in range(n):
            x = rng.uniform(-2, 2, 3)
            subs.append(Subject(y=np.sin(x) + rng.normal(size=3), covariates={"x1": x}))
        data = LongitudinalDataset(subs)
        asm = assemble_design(data, [TermSpec("smooth", "x1", spec)])
        out = bootstrap_ci(data, asm, independence(), [1.0], n_boot=60, seed=seed)
        return np.median(next(iter(out.widths.values())))

    wins = sum(median_width(30, s) > median_width(120, s + 100) for s in range(3))
    assert wins >= 2


def test_bootstrap_validates_inputs():
    data, spec = _spline_space_dataset()
    asm = assemble_design(data, [TermSpec("smooth", "x1", spec)])
    with pytest.raises(ConfigError):
        bootstrap_ci(data, asm, independence(), [0.0], n_boot=1)
    with pytest.raises(ConfigError):
        bootstrap_ci(data, asm, independence(), [0.0], n_boot=10, level=1.5)
