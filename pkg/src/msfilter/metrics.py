"""Dictionary-based bounded-Lipschitz distances and the eps-sweep experiment."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import rng as rngmod
from .errors import GridMismatch, MsFilterError
from .filters import MeasurePath, ParticleEnsemble

log = logging.getLogger(__name__)

GAUSSIAN, SIGMOID, CONSTANT = 0, 1, 2


@dataclass(frozen=True)
class TestDictionary:
    """Seeded family of test functions with values in [0, 1] and Lipschitz constant <= 1.

    Members are Gaussian bumps ``a exp(-|x - c|^2 / (2 s^2))`` with
    ``a = min(1, s sqrt(e))``, sigmoids ``a (1 + tanh(<u, x - c> / s)) / 2`` with
    unit ``u`` and ``a = min(1, 2 s)``, and the constant 1 (always the last member).
    Nonnegative members keep the distance between probability measures in [0, 1].
    """

    __test__ = False

    kinds: np.ndarray
    centers: np.ndarray
    directions: np.ndarray
    scales: np.ndarray
    amplitudes: np.ndarray
    seed: int

    @property
    def size(self) -> int:
        return len(self.kinds)

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Values ``(J, N)`` of every member at points ``x`` of shape ``(N, m)``."""
        x = np.asarray(x, float).reshape(-1, self.dim)
        out = np.empty((self.size, x.shape[0]))
        g = self.kinds == GAUSSIAN
        if np.any(g):
            diff = x[None, :, :] - self.centers[g][:, None, :]
            r2 = np.einsum("jnm,jnm->jn", diff, diff)
            s = self.scales[g][:, None]
            out[g] = self.amplitudes[g][:, None] * np.exp(-r2 / (2 * s * s))
        sg = self.kinds == SIGMOID
        if np.any(sg):
            proj = x @ self.directions[sg].T - np.einsum("jm,jm->j", self.centers[sg],
                                                         self.directions[sg])
            t = np.tanh(proj.T / self.scales[sg][:, None])
            out[sg] = self.amplitudes[sg][:, None] * 0.5 * (1.0 + t)
        out[self.kinds == CONSTANT] = 1.0
        return out

    def check(self, probes: np.ndarray) -> tuple:
        """Empirical (sup norm, Lipschitz constant) over a probe set ``(N, m)``."""
        vals = self.evaluate(probes)
        sup = float(np.max(np.abs(vals)))
        p = np.asarray(probes, float).reshape(-1, self.dim)
        dist = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)
        mask = dist > 0
        lip = 0.0
        for row in vals:
            lip = max(lip, float(np.max(np.abs(row[:, None] - row[None, :])[mask] / dist[mask])))
        return sup, lip


def make_dictionary(dim: int, size: int = 64, seed: int = 0, center_range: float = 3.0,
                    scale_range=(0.25, 2.0)) -> TestDictionary:
    if size < 32:
        raise ValueError("dictionary size must be at least 32")
    rng = rngmod.stream(seed, "dictionary")
    k = size - 1
    kinds = np.array([GAUSSIAN, SIGMOID] * (k // 2) + [GAUSSIAN] * (k % 2) + [CONSTANT])
    centers = rng.uniform(-center_range, center_range, (size, dim))
    dirs = rng.standard_normal((size, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    lo, hi = scale_range
    scales = np.exp(rng.uniform(math.log(lo), math.log(hi), size))
    amps = np.where(kinds == GAUSSIAN, np.minimum(1.0, scales * math.sqrt(math.e)),
                    np.minimum(1.0, 2.0 * scales))
    amps[kinds == CONSTANT] = 1.0
    return TestDictionary(kinds=kinds, centers=centers, directions=dirs, scales=scales,
                          amplitudes=amps, seed=seed)


@dataclass
class SignedMeasure:
    """``mu - nu`` kept as its positive and negative atoms."""

    pos_states: np.ndarray
    pos_weights: np.ndarray
    neg_states: np.ndarray
    neg_weights: np.ndarray

    @classmethod
    def difference(cls, mu: ParticleEnsemble, nu: ParticleEnsemble,
                   normalized: bool = True) -> "SignedMeasure":
        return cls(mu.states, _weights(mu, normalized), nu.states, _weights(nu, normalized))

    def integrate(self, dictionary: TestDictionary) -> np.ndarray:
        return (dictionary.evaluate(self.pos_states) @ self.pos_weights
                - dictionary.evaluate(self.neg_states) @ self.neg_weights)


def _weights(ens: ParticleEnsemble, normalized: bool) -> np.ndarray:
    w = ens.weights()
    return w if normalized else ens.total_mass * w


def dictionary_sup(signed: SignedMeasure, dictionary: TestDictionary) -> float:
    return float(np.max(np.abs(signed.integrate(dictionary))))


def bl_distance(mu: ParticleEnsemble, nu: ParticleEnsemble, dictionary: TestDictionary,
                normalized: bool = True) -> float:
    """``max_phi |mu(phi) - nu(phi)|`` over the dictionary.

    With ``normalized=False`` the unnormalized measures (weights times total
    mass) are compared.
    """
    return dictionary_sup(SignedMeasure.difference(mu, nu, normalized), dictionary)


def _integrals(path: MeasurePath, dictionary: TestDictionary, normalized: bool) -> np.ndarray:
    """Dictionary integrals ``(T, J)`` along a particle path's slow marginal."""
    w = path.normalized_weights()
    if not normalized:
        w = w * np.exp(path.log_mass)[:, None]
    m = path.slow_dim
    return np.stack([dictionary.evaluate(path.states[i, :, :m]) @ w[i]
                     for i in range(len(path.times))])


def _check_grid(p: MeasurePath, q: MeasurePath):
    if len(p.times) != len(q.times) or not np.array_equal(p.times, q.times):
        raise GridMismatch("measure paths are on different time grids")


def path_distance(p: MeasurePath, q: MeasurePath, dictionary: TestDictionary) -> float:
    """``1 ^ max_t bl_distance(p_t, q_t)`` over the shared time grid (normalized measures)."""
    _check_grid(p, q)
    diff = np.abs(_integrals(p, dictionary, True) - _integrals(q, dictionary, True))
    return min(1.0, float(np.max(diff)))


def unnormalized_distance(p: MeasurePath, q: MeasurePath, dictionary: TestDictionary) -> float:
    """``max_t max_phi |rho_t(phi) - rho'_t(phi)|``; no cap, the masses are unbounded."""
    _check_grid(p, q)
    diff = np.abs(_integrals(p, dictionary, False) - _integrals(q, dictionary, False))
    return float(np.max(diff))


def mean_stderr(values: Sequence[float]) -> tuple:
    """Order-independent mean and standard error (exactly rounded sums)."""
    vals = [float(v) for v in values]
    n = len(vals)
    if n == 0:
        return float("nan"), float("nan")
    mean = math.fsum(vals) / n
    if n == 1:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in vals) / (n - 1)
    return mean, math.sqrt(var / n)


@dataclass
class ConvergenceReport:
    eps_list: list
    mean_dnorm: list
    se_dnorm: list
    mean_dunnorm: list
    se_dunnorm: list
    R: int
    failures: list
    runtime: float = 0.0
    dnorm: list = field(default_factory=list)
    dunnorm: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    dictionary_seed: int = 0
    config: dict = field(default_factory=dict)

    @classmethod
    def aggregate(cls, eps_list, results, R, **extra) -> "ConvergenceReport":
        """``results[i]`` is the list of per-replication outcomes for ``eps_list[i]``:
        ``(dnorm, dunnorm)`` tuples, or a string describing a failure."""
        rep = cls(eps_list=list(eps_list), mean_dnorm=[], se_dnorm=[], mean_dunnorm=[],
                  se_dunnorm=[], R=R, failures=[], **extra)
        for outcomes in results:
            ok = [o for o in outcomes if not isinstance(o, str)]
            dn = [o[0] for o in ok]
            du = [o[1] for o in ok]
            for vals, mean_l, se_l in ((dn, rep.mean_dnorm, rep.se_dnorm),
                                       (du, rep.mean_dunnorm, rep.se_dunnorm)):
                mean, se = mean_stderr(vals)
                mean_l.append(mean)
                se_l.append(se)
            rep.failures.append(len(outcomes) - len(ok))
            rep.dnorm.append(dn)
            rep.dunnorm.append(du)
            rep.errors.append([o for o in outcomes if isinstance(o, str)])
        return rep

    def rows(self):
        for i, eps in enumerate(self.eps_list):
            yield (eps, self.mean_dnorm[i], self.se_dnorm[i], self.mean_dunnorm[i],
                   self.se_dunnorm[i], self.R, self.failures[i])

    def write_csv(self, path, comments=()) -> None:
        with open(path, "w", newline="") as fh:
            for line in comments:
                fh.write(f"# {line}\n")
            fh.write("eps,mean_dnorm,se_dnorm,mean_dunnorm,se_dunnorm,R,failures\n")
            for row in self.rows():
                fh.write(",".join("%.17g" % v for v in row[:5]) + f",{row[5]},{row[6]}\n")

    def to_json(self) -> str:
        doc = {k: getattr(self, k) for k in ("eps_list", "mean_dnorm", "se_dnorm", "mean_dunnorm",
                                              "se_dunnorm", "R", "failures", "runtime", "dnorm",
                                              "dunnorm", "errors", "dictionary_seed", "config")}
        return json.dumps(doc, indent=1, sort_keys=True)


def build_averaged(cfg, model=None):
    """Averaged model for a config: loaded from file, closed form, or Monte Carlo."""
    from .averaged_model import load_averaged_model
    from .cell_problem import averaged_coefficients
    from .registry import get_entry
    if cfg.averaged_model:
        return load_averaged_model(cfg.averaged_model)
    if cfg.averaging == "analytic":
        avg = get_entry(cfg.model).analytic_average(cfg.grid(), **cfg.model_params)
        avg.escape_margin = cfg.escape_margin
        return avg
    model = model or cfg.build_model()
    return averaged_coefficients(model, cfg.grid(), cfg.averaging_params(),
                                 rngmod.derive_seed(cfg.seed, "averaging"),
                                 escape_margin=cfg.escape_margin)


def replication(cfg, eps_index: int, rep: int, avg, model=None, dictionary=None) -> tuple:
    """One truth/observation draw at ``cfg.eps_list[eps_index]`` with both filters on that path.

    Returns ``(D_norm, D_unnorm)``.
    """
    from .filters import particle_filter_averaged, particle_filter_full
    from .sde_core import simulate_multiscale
    model = model or cfg.build_model()
    dictionary = dictionary or make_dictionary(model.m, cfg.dictionary_size, cfg.dictionary_seed)
    eps = cfg.eps_list[eps_index]
    seed = rngmod.derive_seed(cfg.seed, "eps", eps_index, "rep", rep)
    bundle = simulate_multiscale(model, eps, cfg.dt_for(eps), cfg.T, rngmod.derive_seed(seed, "truth"),
                                 dt_rule=cfg.dt_rule)
    obs = bundle.observation
    policy = cfg.resample_policy()
    full = particle_filter_full(model, eps, obs, cfg.N, policy, rngmod.derive_seed(seed, "full"),
                                dt_rule=cfg.dt_rule).marginal()
    red = particle_filter_averaged(avg, obs, cfg.N, model, policy,
                                   rngmod.derive_seed(seed, "averaged"))
    return path_distance(full, red, dictionary), unnormalized_distance(full, red, dictionary)


def _guarded_replication(cfg, eps_index, rep, avg):
    try:
        return replication(cfg, eps_index, rep, avg)
    except MsFilterError as exc:
        return f"{type(exc).__name__}: {exc}"


def convergence_experiment(cfg, workers: int = 1, avg=None) -> ConvergenceReport:
    """Run the eps sweep of an ExperimentConfig and aggregate D_norm and D_unnorm.

    Library errors inside a replication are recorded as failures; the sweep
    continues.  Results are placed by (eps, replication) index, so the
    report does not depend on ``workers``.
    """
    start = time.perf_counter()
    if avg is None:
        avg = build_averaged(cfg)
    jobs = [(i, r) for i in range(len(cfg.eps_list)) for r in range(cfg.R)]
    outcomes = {}
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {job: pool.submit(_guarded_replication, cfg, job[0], job[1], avg)
                       for job in jobs}
            for job, fut in futures.items():
                outcomes[job] = fut.result()
    else:
        for job in jobs:
            outcomes[job] = _guarded_replication(cfg, job[0], job[1], avg)
            log.debug("eps=%g rep=%d -> %s", cfg.eps_list[job[0]], job[1], outcomes[job])
    results = [[outcomes[(i, r)] for r in range(cfg.R)] for i in range(len(cfg.eps_list))]
    return ConvergenceReport.aggregate(cfg.eps_list, results, cfg.R,
                                       runtime=time.perf_counter() - start,
                                       dictionary_seed=cfg.dictionary_seed, config=cfg.echo())
