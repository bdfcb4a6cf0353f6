import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from msfilter import rng as rngmod
from msfilter.averaged_model import TensorGrid
from msfilter.errors import (CovarianceBlowup, GridEscape, StepTooCoarse, WeightCollapse,
                             ZeroMass)
from msfilter.filters import (LinearSpec, ParticleEnsemble, ResamplePolicy, kalman_bucy,
                              linear_spec_from_averaged, linear_spec_from_model, normalize,
                              particle_filter_averaged, particle_filter_full,
                              read_ensemble_dump, systematic_resample, write_ensemble_dump,
                              write_filter_csv)
from msfilter.registry import ou_linear, ou_linear_average, z_free, z_free_average
from msfilter.sde_core import (ObservationPath, brownian_observation, simulate_ensemble,
                               simulate_multiscale)

from conftest import scalar_model


def test_normalize_uniform_unchanged():
    ens = ParticleEnsemble.from_weights(np.arange(4.0)[:, None], np.zeros(4))
    np.testing.assert_allclose(normalize(ens).weights(), 0.25, rtol=0, atol=1e-16)


def test_normalize_two_to_one():
    ens = ParticleEnsemble.from_weights(np.zeros((2, 1)), np.array([math.log(2.0), -np.inf]))
    w = normalize(ens).weights()
    assert w[0] == 1.0 and w[1] == 0.0
    assert ens.total_mass == pytest.approx(1.0)


@settings(max_examples=100, deadline=None)
@given(arrays(float, st.integers(1, 50), elements=st.floats(-700, 700)))
def test_normalized_weights_sum_to_one(logw):
    ens = ParticleEnsemble.from_weights(np.zeros((len(logw), 1)), logw)
    w = normalize(ens).weights()
    assert abs(math.fsum(w) - 1.0) < 4 * len(w) * np.finfo(float).eps
    assert normalize(ens).log_mass == ens.log_mass


def test_zero_mass():
    ens = ParticleEnsemble(np.zeros((3, 1)), np.full(3, -np.inf), 0.0, -np.inf)
    with pytest.raises(ZeroMass):
        normalize(ens)


def test_systematic_resample_counts():
    w = np.array([0.5, 0.25, 0.125, 0.125])
    idx = systematic_resample(w, rngmod.stream(0, "r"))
    counts = np.bincount(idx, minlength=4)
    assert np.all(np.abs(counts - 4 * w) < 1)


def _obs(eps, T, seed, d=1):
    return brownian_observation(d, 0.1 * eps ** 2, T, seed)


def test_zero_sensor_keeps_weights_zero():
    model = scalar_model(b_I=lambda x, z: 0.3 * z)
    path = particle_filter_full(model, 0.5, _obs(0.5, 0.5, 1), 200, seed=2)
    assert np.all(path.log_weights == 0.0)
    assert np.all(path.log_mass == 0.0)


def test_kallianpur_striebel_and_marginal_consistency():
    model = ou_linear()
    path = particle_filter_full(model, 0.5, _obs(0.5, 1.0, 3), 300, seed=4, keep_fast=True)
    rng = rngmod.stream(0, "phi")
    coef = rng.standard_normal((10, 3))
    for i in (0, len(path) // 2, len(path) - 1):
        ens = path.ensemble(i)
        vals = np.tanh(coef[:, :1] * ens.states[:, 0] + coef[:, 1:2] * ens.states[:, 1] + coef[:, 2:])
        pi = normalize(ens).pi(vals)
        np.testing.assert_allclose(pi, ens.rho(vals) / ens.rho(np.ones(ens.size)), rtol=1e-12)
        slow = ens.marginal(1)
        assert slow.total_mass == ens.total_mass
        assert slow.states.shape == (300, 1)
    marg = path.marginal()
    np.testing.assert_array_equal(marg.log_mass, path.log_mass)


def test_correlated_propagation_matches_signal_law():
    """With h = 0 one particle per run, over independent reference paths, has the signal law."""
    eps, T, runs = 0.5, 0.5, 300
    model = scalar_model(b_I=lambda x, z: 0.8 * z, alpha=0.8, gamma=0.6, sigma=0.7)
    ends = []
    for r in range(runs):
        obs = _obs(eps, T, rngmod.derive_seed(1, "y", r))
        path = particle_filter_full(model, eps, obs, 1, seed=rngmod.derive_seed(1, "pf", r))
        ends.append(path.states[-1, 0, 0])
    _, X, _ = simulate_ensemble(model, eps, 0.1 * eps ** 2, T, runs, seed=5)
    res = stats.permutation_test((np.array(ends), X[-1, :, 0]),
                                 lambda a, b: stats.energy_distance(a, b),
                                 n_resamples=999, alternative="greater",
                                 random_state=np.random.default_rng(0))
    assert res.pvalue > 0.01


def test_step_rule_enforced():
    with pytest.raises(StepTooCoarse):
        particle_filter_full(ou_linear(), 0.1, brownian_observation(1, 0.01, 0.1, 0), 10)


def test_weight_collapse_detected():
    model = ou_linear(gain=1e4)
    obs = simulate_multiscale(model, 0.5, 0.025, 1.0, seed=1).observation
    with pytest.raises(WeightCollapse):
        particle_filter_full(model, 0.5, obs, 20, ResamplePolicy(method="never",
                                                                 collapse_patience=3), seed=0)


def test_kalman_lyapunov_fixed_point():
    spec = LinearSpec(A=[[-1.0]], Sigma=[[1.0]], H=[[0.0]], alpha=[[0.0]], gamma=[[1.0]],
                      m0=[0.0], P0=[[0.0]])
    dt = 1e-3
    path = kalman_bucy(spec, brownian_observation(1, dt, 15.0, 0))
    # discrete fixed point 1 / (2 - dt)
    assert path.covs[-1, 0, 0] == pytest.approx(0.5, abs=1e-3)


def test_kalman_riccati_fixed_point():
    spec = LinearSpec(A=[[-1.0]], Sigma=[[1.0]], H=[[1.0]], alpha=[[0.0]], gamma=[[1.0]],
                      m0=[0.0], P0=[[1.0]])
    path = kalman_bucy(spec, brownian_observation(1, 1e-3, 15.0, 1))
    assert path.covs[-1, 0, 0] == pytest.approx(math.sqrt(2) - 1, abs=1e-3)


def test_kalman_deterministic_case():
    spec = LinearSpec(A=[[-0.7]], Sigma=[[0.0]], H=[[0.0]], alpha=[[0.0]], gamma=[[1.0]],
                      m0=[2.0], P0=[[0.0]])
    dt = 0.01
    path = kalman_bucy(spec, brownian_observation(1, dt, 1.0, 2))
    assert np.all(path.covs == 0.0)
    k = np.arange(len(path))
    np.testing.assert_allclose(path.means[:, 0], 2.0 * (1 - 0.7 * dt) ** k, rtol=1e-12)
    assert path.means[-1, 0] == pytest.approx(2.0 * math.exp(-0.7), rel=5e-3)


def test_kalman_covariance_blowup():
    spec = LinearSpec(A=[[1e200]], Sigma=[[1.0]], H=[[1.0]], alpha=[[0.0]], gamma=[[1.0]],
                      m0=[0.0], P0=[[1.0]])
    with pytest.raises(CovarianceBlowup):
        kalman_bucy(spec, brownian_observation(1, 0.01, 1.0, 0))


def _mean_error(model, eps, N, reps, seed):
    spec = linear_spec_from_model(model, eps)
    errs = []
    for r in range(reps):
        obs = simulate_multiscale(model, eps, 0.1 * eps ** 2, 1.0,
                                  rngmod.derive_seed(seed, "truth", r)).observation
        kb = kalman_bucy(spec, obs)
        _, mean, _, _ = particle_filter_full(model, eps, obs, N,
                                             seed=rngmod.derive_seed(seed, N, r)).summary()
        errs.append(np.mean((mean[1:, 0] - kb.means[1:, 0]) ** 2))
    return math.sqrt(np.mean(errs))


def test_oracle_error_rate():
    model = ou_linear()
    Ns = np.array([250, 1000, 4000])
    rmse = np.array([_mean_error(model, 0.5, N, 30, 21) for N in Ns])
    slope = np.polyfit(np.log(Ns), np.log(rmse), 1)[0]
    assert -0.65 <= slope <= -0.35


def test_averaged_filter_identity_for_z_free_model():
    model = z_free()
    avg = z_free_average(TensorGrid.uniform([-4.0], [4.0], [81]))
    diffs, spread = [], []
    for r in range(12):
        obs = simulate_multiscale(model, 0.5, 0.025, 1.0, rngmod.derive_seed(3, r)).observation
        _, mf, vf, _ = particle_filter_full(model, 0.5, obs, 1000, seed=rngmod.derive_seed(4, r)).summary()
        _, ma, va, _ = particle_filter_averaged(avg, obs, 1000, model,
                                                seed=rngmod.derive_seed(5, r)).summary()
        diffs.append(mf[-1, 0] - ma[-1, 0])
        spread.append(vf[-1, 0] - va[-1, 0])
    for d in (np.array(diffs), np.array(spread)):
        assert abs(d.mean()) < 3 * d.std(ddof=1) / math.sqrt(len(d))


def test_averaged_filter_matches_averaged_oracle():
    model = ou_linear()
    avg = ou_linear_average(TensorGrid.uniform([-5.0], [5.0], [11]))
    spec = linear_spec_from_averaged(avg, model.init.mean_x, model.init.cov_x)
    N = 2000
    hits = 0
    for r in range(10):
        obs = simulate_multiscale(model, 0.25, 0.1 * 0.25 ** 2, 1.0, rngmod.derive_seed(6, r)).observation
        kb = kalman_bucy(spec, obs)
        _, ma, _, _ = particle_filter_averaged(avg, obs, N, model, seed=rngmod.derive_seed(7, r)).summary()
        hits += abs(ma[-1, 0] - kb.means[-1, 0]) < 3 * math.sqrt(kb.covs[-1, 0, 0] / N)
    assert hits >= 9


def test_zero_averaged_sensor_keeps_weights_uniform():
    avg = z_free_average(TensorGrid.uniform([-4.0], [4.0], [9]), gain=0.0)
    path = particle_filter_averaged(avg, _obs(0.5, 0.5, 2), 100, z_free(), seed=0)
    assert np.all(path.log_weights == 0.0)


def test_grid_escape_in_averaged_filter():
    avg = z_free_average(TensorGrid.uniform([-0.1], [0.1], [3]), sigma=3.0)
    avg.escape_margin = 0.0
    with pytest.raises(GridEscape):
        particle_filter_averaged(avg, _obs(0.5, 1.0, 0), 100, z_free(var_x0=4.0), seed=0)


def test_filter_outputs(tmp_path):
    model = ou_linear()
    path = particle_filter_full(model, 0.5, _obs(0.5, 0.2, 0), 50, seed=0)
    csv_path = tmp_path / "f.csv"
    write_filter_csv(path, csv_path, comments=["seed=0"])
    lines = csv_path.read_text().splitlines()
    assert lines[1] == "t,mass,mean_1,var_1,ess"
    assert len(lines) == 2 + len(path)
    dump = tmp_path / "f.pf"
    write_ensemble_dump(path, dump, {"seed": 0})
    raw = dump.read_bytes()
    assert raw[4:5] == b"{" and b'"version": "pf-v1"' in raw[:200]
    back = read_ensemble_dump(dump)
    np.testing.assert_array_equal(back.states, path.states)
    np.testing.assert_array_equal(back.log_weights, path.log_weights)
    np.testing.assert_array_equal(back.log_mass, path.log_mass)
    np.testing.assert_array_equal(back.times, path.times)
