import numpy as np
import pytest

from lsocv.basis import BasisSpec, TermSpec, assemble_design
from lsocv.correlation import compound_symmetry, independence
from lsocv.errors import ConfigError
from lsocv.estimator import PenalizedFitter
from lsocv.optimizer import (
    OptimizerConfig,
    StarObjective,
    default_eta0,
    grid_search,
    gradient_fd,
    hessian_fd,
    log_grid,
    minimize_v_star,
    optimize_lambda,
)
from lsocv.simulation import SimScenario, default_terms, gen_dataset


def sim_instance(n=30, seed=0, two_terms=True, knots=6):
    scen = SimScenario(n=n, n_i=4, sigma=1.0, correlation=compound_symmetry(0.6),
                       covariate_design="both_obs", seed=seed)
    data, mu, sig = gen_dataset(scen, 0)
    terms = default_terms(knots=knots)
    if not two_terms:
        terms = terms[1:]
    asm = assemble_design(data, terms)
    model = compound_symmetry(0.6)
    return data, asm, model


def test_gradient_matches_finite_differences():
    data, asm, model = sim_instance(seed=1)
    fitter = PenalizedFitter(data, asm, model)
    obj = StarObjective(fitter)
    rng = np.random.default_rng(2)
    for _ in range(5):
        eta = rng.uniform(-3, 3, size=2)
        _, g, _, _ = obj.value_grad_hess(eta, need_hess=False)
        gfd = gradient_fd(fitter, eta, step=1e-5)
        assert np.max(np.abs(g - gfd)) / max(np.max(np.abs(gfd)), 1e-12) < 1e-5


def test_hessian_matches_finite_differences():
    data, asm, model = sim_instance(seed=3)
    fitter = PenalizedFitter(data, asm, model)
    obj = StarObjective(fitter)
    rng = np.random.default_rng(4)
    for _ in range(3):
        eta = rng.uniform(-2, 2, size=2)
        _, _, h, _ = obj.value_grad_hess(eta)
        hfd = hessian_fd(fitter, eta, step=1e-4)
        assert np.max(np.abs(h - hfd)) / max(np.max(np.abs(hfd)), 1e-12) < 1e-5


def test_restart_at_optimum_stays_put():
    data, asm, model = sim_instance(seed=5, two_terms=False)
    first = optimize_lambda(data, asm, model)
    assert first.trace.termination in ("gradient", "boundary")
    cfg = OptimizerConfig(eta0=first.eta.copy())
    second = optimize_lambda(data, asm, model, cfg)
    assert len(second.trace.rows) - 1 <= 2
    assert np.max(np.abs(second.eta - first.eta)) < 1e-3


def test_accepted_steps_strictly_decrease():
    data, asm, model = sim_instance(seed=6)
    out = optimize_lambda(data, asm, model)
    vals = out.trace.values()
    assert np.all(np.diff(vals) < 1e-12)


def test_newton_agrees_with_grid_oracle_single_lambda():
    data, asm, model = sim_instance(n=40, seed=7, two_terms=False, knots=10)
    fitter = PenalizedFitter(data, asm, model)
    opt = optimize_lambda(data, asm, model, fitter=fitter)
    grid = log_grid(1e-4, 1e4, 61)
    gres = grid_search(data, asm, model, [grid], fitter=fitter)
    cell = np.log(grid[1]) - np.log(grid[0])
    if opt.trace.boundary_hit:
        # boundary solutions compare against the grid edge
        assert gres.indices[0] in (0, 60)
    else:
        assert abs(np.log(opt.lam[0]) - np.log(gres.lam[0])) <= cell + 1e-9


def test_penalty_rescaling_leaves_fit_invariant():
    data, asm, model = sim_instance(seed=8, two_terms=False)
    out1 = optimize_lambda(data, asm, model)

    c = 37.5
    asm_scaled = type(asm)(X=asm.X, terms=asm.terms,
                           penalties=[c * asm.penalties[0]], row_sizes=asm.row_sizes)
    cfg = OptimizerConfig(eta0=out1.eta - np.log(c))
    out2 = optimize_lambda(data, asm_scaled, model, cfg)
    assert np.max(np.abs(out1.fit.fitted - out2.fit.fitted)) < 1e-6


def test_grid_search_corner_cases():
    data, asm, model = sim_instance(seed=9, two_terms=False)
    res = grid_search(data, asm, model, [[0.25]])
    assert res.lam[0] == 0.25 and res.indices == (0,)
    with pytest.raises(ConfigError):
        grid_search(data, asm, model, [np.ones(11)], max_points=10)
    with pytest.raises(ConfigError):
        grid_search(data, asm, model, [[]])
    with pytest.raises(ConfigError):
        grid_search(data, asm, model, [[1.0], [1.0]])


def test_grid_search_two_dims_matches_newton_cell():
    data, asm, model = sim_instance(n=50, seed=10)
    fitter = PenalizedFitter(data, asm, model)
    opt = optimize_lambda(data, asm, model, fitter=fitter)
    axis = log_grid(1e-3, 1e3, 21)
    gres = grid_search(data, asm, model, [axis, axis], fitter=fitter)
    cell = np.log(axis[1]) - np.log(axis[0])
    for d in range(2):
        if not opt.trace.boundary_hit:
            assert abs(opt.eta[d] - np.log(gres.lam[d])) <= cell + 1e-9


def test_exact_flag_grid_close_to_star_grid():
    data, asm, model = sim_instance(n=60, seed=11, two_terms=False, knots=8)
    fitter = PenalizedFitter(data, asm, model)
    axis = log_grid(1e-3, 1e3, 25)
    g_star = grid_search(data, asm, model, [axis], fitter=fitter)
    g_exact = grid_search(data, asm, model, [axis], use_exact=True, fitter=fitter)
    assert abs(g_star.indices[0] - g_exact.indices[0]) <= 1


def test_default_start_is_finite_and_balanced():
    data, asm, model = sim_instance(seed=12)
    fitter = PenalizedFitter(data, asm, model)
    eta0 = default_eta0(fitter)
    assert eta0.shape == (2,)
    assert np.all(np.isfinite(eta0))
    lam0 = np.exp(eta0)
    t = [lam0[k] * np.trace(asm.penalties[k]) for k in range(2)]
    assert t[0] == pytest.approx(t[1], rel=1e-9)


def test_trace_rows_exportable():
    data, asm, model = sim_instance(seed=13, two_terms=False)
    out = optimize_lambda(data, asm, model)
    header, body = out.trace.as_rows()
    assert header[0] == "iteration" and "value" in header
    assert len(body) == len(out.trace.rows)
    assert all(len(r) == len(header) for r in body)


def test_minimize_v_star_runs_and_improves():
    data, asm, model = sim_instance(n=40, seed=14)
    fitter = PenalizedFitter(data, asm, model)
    from lsocv.criteria import v_star

    start_val = v_star(fitter.fit(np.exp(default_eta0(fitter))))
    out = minimize_v_star(fitter)
    assert out.value <= start_val + 1e-12


def test_max_iter_flagged():
    data, asm, model = sim_instance(seed=15)
    cfg = OptimizerConfig(max_iter=1, eta0=np.array([5.0, -5.0]))
    out = optimize_lambda(data, asm, model, cfg)
    assert out.trace.termination in ("max_iter", "gradient", "boundary")
