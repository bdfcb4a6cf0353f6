import math
import warnings

import numpy as np
import pytest

from msfilter.averaged_model import AveragedModel, TensorGrid, load_averaged_model, save_averaged_model
from msfilter.cell_problem import (AveragingParams, PoissonParams, StationaryParams,
                                   averaged_coefficients, check_assumptions, check_centering,
                                   default_probes, estimate_stationary, semigroup_mc, solve_poisson)
from msfilter.errors import ErgodicityWarning, GridEscape, PSDViolation, TruncationWarning
from msfilter.registry import ou_decay, ou_linear, z_free, z_free_average
from msfilter import rng as rngmod
from msfilter.sde_core import ModelFlags

from conftest import scalar_model

E_COS = math.exp(-0.5)


@pytest.fixture(scope="module")
def ou_stat():
    return estimate_stationary(ou_linear(), [0.0], StationaryParams(n_samples=8000), seed=1)


def test_stationary_ou_moments(ou_stat):
    z = ou_stat.samples[:, 0]
    n = len(z)
    assert abs(z.mean()) < 3 * z.std(ddof=1) / math.sqrt(n)
    var_se = math.sqrt(np.var((z - z.mean()) ** 2, ddof=1) / n)
    assert abs(z.var(ddof=1) - 1.0) < 3 * var_se
    assert ou_stat.ess > 100


def test_stationary_cosine_average(ou_stat):
    mean, se = ou_stat.average(np.cos(ou_stat.samples[:, 0]))
    assert abs(mean - E_COS) < 3 * se


def test_stationary_shifted_mean():
    model = scalar_model(f=lambda x, z: -(z - x))
    stat = estimate_stationary(model, [1.3], StationaryParams(n_samples=4000), seed=2)
    mean, se = stat.average(stat.samples[:, 0])
    assert abs(mean - 1.3) < 3 * se


def test_short_burn_in_warns():
    with pytest.warns(ErgodicityWarning):
        estimate_stationary(ou_linear(), [0.0], StationaryParams(burn_in=0.05, n_samples=1000),
                            seed=0)


def test_semigroup_at_zero_is_exact():
    mean, se = semigroup_mc(ou_linear(), [0.0], lambda z: np.cos(z[:, 0]), 0.0, [0.4], 100, 0)
    assert mean == math.cos(0.4) and se == 0.0


def test_semigroup_reaches_stationary_average():
    mean, se = semigroup_mc(ou_linear(), [0.0], lambda z: np.cos(z[:, 0]), 10.0,
                            np.array([[-1.5], [2.5]]), 20000, seed=4, dt=0.01)
    assert np.all(np.abs(mean - E_COS) < 3 * se)


def test_zero_intermediate_drift_gives_zero_solution():
    sol = solve_poisson(z_free(), [0.0], PoissonParams(t_max=2.0, n_paths=200), seed=0)
    np.testing.assert_array_equal(sol.evaluate(np.array([[-1.0], [0.5]])), 0.0)


def test_poisson_solution_centered():
    model = ou_linear(c=1.0)
    sol = solve_poisson(model, [0.0], PoissonParams(dt=0.02, n_paths=1000, t_max=10.0), seed=3)
    zs = sol.stationary.samples[:100]
    u, se = sol.evaluate(zs, return_stderr=True)
    # average of u over stationary draws; u is affine in z so the spread is that of z
    assert abs(u.mean()) < 3 * (u.std(ddof=1) / math.sqrt(len(u)) + se.mean())


def test_truncation_warning():
    sol = solve_poisson(ou_linear(c=1.0), [0.0], PoissonParams(t_max=0.2, n_paths=2000), seed=0)
    with pytest.warns(TruncationWarning):
        sol.evaluate(np.array([2.0]))


def test_poisson_requires_centered_declaration():
    model = scalar_model(b_I=lambda x, z: np.ones_like(x), flags=ModelFlags(b_I_centered=False))
    with pytest.raises(ValueError):
        solve_poisson(model, [0.0])


@pytest.mark.parametrize("b_I, centered", [
    (lambda x, z: z, True),
    (lambda x, z: z * np.exp(-z * z), True),
    (lambda x, z: np.ones_like(z), False),
])
def test_centering_check(ou_stat, b_I, centered):
    model = scalar_model(b_I=b_I)
    res = check_centering(model, [0.0], ou_stat)
    assert res.centered is centered
    if not centered:
        assert res.residual[0] == pytest.approx(1.0)


def test_assumption_report():
    rng = rngmod.stream(0, "probes")
    model = ou_linear()
    rep = check_assumptions(model, default_probes(model, [[0.0]], rng))
    assert rep.hf_ok and rep.hf_margin == pytest.approx(1.0)
    assert rep.lam == pytest.approx(2.0) and rep.Lam == pytest.approx(2.0) and rep.hg_ok
    unstable = scalar_model(f=lambda x, z: z)
    bad = check_assumptions(unstable, default_probes(unstable, [[0.0]], rng))
    assert not bad.hf_ok and "VIOLATED" in bad.lines()[0]


GRID = TensorGrid.uniform([-1.0], [1.0], [3])


def test_z_independent_model_averages_to_itself():
    model = z_free()
    avg = averaged_coefficients(model, GRID, AveragingParams(), seed=0)
    ref = z_free_average(GRID)
    for name in ("bbar", "abar", "hbar", "sigbar", "btilde", "atilde"):
        np.testing.assert_allclose(getattr(avg, name), getattr(ref, name), atol=1e-12)


def test_cosine_sensor_average():
    model = scalar_model(h=lambda x, z: np.cos(z), alpha=0.0, gamma=1.0,
                         flags=ModelFlags(b_I_zero=True))
    stat_params = StationaryParams(n_samples=8000)
    avg = averaged_coefficients(model, GRID, AveragingParams(stationary=stat_params), seed=1)
    sd = math.sqrt((1 + math.exp(-2)) / 2 - math.exp(-1)) / math.sqrt(8000)
    np.testing.assert_array_less(np.abs(avg.hbar - E_COS), 3 * sd)


@pytest.fixture(scope="module")
def linear_average():
    params = AveragingParams(stationary=StationaryParams(n_samples=2000),
                             poisson=PoissonParams(dt=0.02))
    return averaged_coefficients(ou_linear(c=1.0), TensorGrid.uniform([-1.0], [1.0], [2]),
                                 params, seed=2), params


def test_linear_intermediate_drift_coefficients(linear_average):
    avg, _ = linear_average
    np.testing.assert_array_less(np.abs(avg.atilde[:, 0, 0] - 2.0), 3 * avg.stderr["atilde"][:, 0, 0])
    np.testing.assert_allclose(avg.btilde, 0.0, atol=1e-9)


def test_averaged_structure(linear_average):
    avg, _ = linear_average
    np.testing.assert_array_equal(avg.atilde, np.swapaxes(avg.atilde, 1, 2))
    np.testing.assert_allclose(avg.sqrt_atilde @ np.swapaxes(avg.sqrt_atilde, 1, 2), avg.atilde,
                               atol=1e-8)
    gap = avg.gap()
    np.testing.assert_allclose(avg.sqrt_gap @ np.swapaxes(avg.sqrt_gap, 1, 2), gap, atol=1e-8)
    assert np.all(np.linalg.eigvalsh(gap) > -1e-12)


def test_averaging_stable_under_longer_burn_in_and_horizon(linear_average):
    avg, params = linear_average
    model = ou_linear(c=1.0)
    grid = avg.grid
    longer = AveragingParams(
        stationary=StationaryParams(n_samples=2000, burn_in=20.0),
        poisson=PoissonParams(dt=0.02, mixing_multiple=40.0,
                              stationary=StationaryParams(n_samples=2000, burn_in=20.0)))
    other = averaged_coefficients(model, grid, longer, seed=2)
    se = np.hypot(avg.stderr["atilde"], other.stderr["atilde"])
    np.testing.assert_array_less(np.abs(avg.atilde - other.atilde), 3 * se)


def test_psd_violation_raised():
    params = AveragingParams(stationary=StationaryParams(n_samples=500), psd_tol=-1.0)
    with pytest.raises(PSDViolation):
        averaged_coefficients(z_free(), GRID, params, seed=0)


def test_averaged_model_json_roundtrip(tmp_path, linear_average):
    avg, _ = linear_average
    path = tmp_path / "avg.json"
    save_averaged_model(avg, path, provenance={"seed": 2})
    back = load_averaged_model(path)
    for name in ("bbar", "btilde", "abar", "atilde", "hbar", "sigbar", "sqrt_atilde", "sqrt_gap"):
        np.testing.assert_array_equal(getattr(back, name), getattr(avg, name))
    np.testing.assert_array_equal(back.stderr["atilde"], avg.stderr["atilde"])
    assert '"avgmodel-v1"' in path.read_text()


def test_interpolation_and_grid_escape():
    grid = TensorGrid.uniform([-2.0], [2.0], [5])
    avg = AveragedModel.from_functions(
        grid, bbar=lambda x: 2.0 * x, abar=lambda x: np.ones((len(x), 1, 1)),
        hbar=lambda x: x, sigbar=lambda x: np.full((len(x), 1, 1), 0.5),
        alpha_w=np.array([[0.6]]), gamma_w=np.array([[0.8]]))
    drift, _, sg, _, hb = avg.coefficients(np.array([[0.25], [-1.5], [2.5]]))
    np.testing.assert_allclose(drift[:, 0], [0.5, -3.0, 4.0])
    np.testing.assert_allclose(sg[:, 0, 0], math.sqrt(0.75))
    with pytest.raises(GridEscape):
        avg.coefficients(np.array([[3.5]]))


def test_ou_decay_registry_facts():
    model = ou_decay()
    x = np.array([[0.7]])
    stat = estimate_stationary(model, x[0], StationaryParams(n_samples=4000), seed=6)
    z = stat.samples[:, 0]
    assert abs(z.mean()) < 3 * z.std(ddof=1) / math.sqrt(len(z))
    assert check_centering(model, x[0], stat).centered
    rng = rngmod.stream(0, "decay-probes")
    xs, zs = rng.normal(0, 3, (500, 1)), rng.normal(0, 3, (500, 1))
    h = model.h(xs, zs)
    assert np.all(np.abs(h) <= 2.0)
    np.testing.assert_array_equal(h, model.h(xs, np.zeros_like(zs)))
    np.testing.assert_allclose(model.b(xs, zs), -4.0 * xs)
