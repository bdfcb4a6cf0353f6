"""Weighted-particle filters for the multiscale and the averaged problem, plus a Kalman-Bucy oracle.

Both particle filters work under the reference measure in which the
whitened observation Y is a standard Brownian motion.  The signal noise
correlated with Y is split as ``dW = alpha_w* (dY - h dt) + C dN``, so each
particle is propagated with the exact conditional law of its noise given the
observation increment, and the Girsanov weight accrues
``<h, dY> - |h|^2 dt / 2``.  Weights stay unnormalized (log domain), so every
ensemble represents the unnormalized filter rho; normalizing gives pi.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from . import rng as rngmod
from .averaged_model import AveragedModel
from .errors import CovarianceBlowup, WeightCollapse, ZeroMass
from .sde_core import (DEFAULT_DT_RULE, BLOWUP_NORM, GaussianInit, MultiscaleModel,
                       ObservationPath, _bmv, _guard, check_step, psd_sqrt)


@dataclass
class ParticleEnsemble:
    """N weighted states representing rho_t (or pi_t once normalized).

    ``log_weights`` are the log Girsanov weights, so that
    ``rho_t(phi) ~ mean_i exp(log_weights_i) phi(x_i)``.  After normalization the
    weights sum to one and ``log_mass`` keeps log rho_t(1).
    """

    states: np.ndarray
    log_weights: np.ndarray
    t: float
    log_mass: float
    normalized: bool = False

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim == 1:
            self.states = self.states[:, None]
        self.log_weights = np.asarray(self.log_weights, dtype=float)
        if self.states.shape[0] < 1 or self.states.shape[0] != self.log_weights.shape[0]:
            raise ValueError("ensemble needs N >= 1 states and one log weight per state")

    @classmethod
    def from_weights(cls, states, log_weights, t=0.0) -> "ParticleEnsemble":
        lw = np.asarray(log_weights, dtype=float)
        return cls(states, lw, t, float(logsumexp(lw) - math.log(lw.size)))

    @property
    def size(self) -> int:
        return self.states.shape[0]

    @property
    def total_mass(self) -> float:
        return math.exp(self.log_mass)

    def weights(self) -> np.ndarray:
        lse = logsumexp(self.log_weights)
        if not np.isfinite(lse):
            raise ZeroMass("all particle weights vanished")
        return np.exp(self.log_weights - lse)

    def ess(self) -> float:
        w = self.weights()
        return float(1.0 / np.sum(w * w))

    def pi(self, values) -> np.ndarray:
        """Normalized integral; ``values`` has the particle axis last."""
        return np.asarray(values, float) @ self.weights()

    def rho(self, values) -> np.ndarray:
        return self.total_mass * self.pi(values)

    def marginal(self, m: int) -> "ParticleEnsemble":
        return ParticleEnsemble(self.states[:, :m].copy(), self.log_weights.copy(), self.t,
                                self.log_mass, self.normalized)


def normalize(ens: ParticleEnsemble) -> ParticleEnsemble:
    """Scale weights to sum to one; the total mass is kept as metadata."""
    lse = logsumexp(ens.log_weights)
    if not np.isfinite(lse):
        raise ZeroMass("all particle weights vanished")
    return ParticleEnsemble(ens.states.copy(), ens.log_weights - lse, ens.t, ens.log_mass, True)


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = weights.size
    positions = (rng.uniform() + np.arange(n)) / n
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions, side="right")


@dataclass
class ResamplePolicy:
    threshold: float = 0.5
    method: str = "systematic"
    collapse_patience: int = 10

    def __post_init__(self):
        if self.method not in ("systematic", "never"):
            raise ValueError(f"unknown resampling method {self.method!r}")


@dataclass
class MeasurePath:
    """Filter output on a time grid.

    Particle kinds store ``states`` ``(T, N, dim)``, ``log_weights`` ``(T, N)`` and
    ``log_mass`` ``(T,)``; the kalman kind stores ``means`` and ``covs``.
    """

    times: np.ndarray
    kind: str
    slow_dim: int
    states: Optional[np.ndarray] = None
    log_weights: Optional[np.ndarray] = None
    log_mass: Optional[np.ndarray] = None
    means: Optional[np.ndarray] = None
    covs: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.times)

    def ensemble(self, i: int) -> ParticleEnsemble:
        if self.states is None:
            raise TypeError("a Gaussian measure path has no particle ensembles")
        return ParticleEnsemble(self.states[i], self.log_weights[i], float(self.times[i]),
                                float(self.log_mass[i]))

    def marginal(self) -> "MeasurePath":
        m = self.slow_dim
        if self.states is None:
            return MeasurePath(self.times, self.kind, m, means=self.means[:, :m],
                               covs=self.covs[:, :m, :m], meta=dict(self.meta))
        return MeasurePath(self.times, self.kind, m, states=self.states[:, :, :m],
                           log_weights=self.log_weights, log_mass=self.log_mass,
                           meta=dict(self.meta))

    def normalized_weights(self) -> np.ndarray:
        lw = self.log_weights
        return np.exp(lw - logsumexp(lw, axis=1, keepdims=True))

    def summary(self):
        """Per-time (mass, mean, var, ess) of the slow marginal."""
        m = self.slow_dim
        if self.states is None:
            var = np.diagonal(self.covs, axis1=1, axis2=2)[:, :m]
            nan = np.full(len(self.times), np.nan)
            return nan, self.means[:, :m], var, nan
        w = self.normalized_weights()
        x = self.states[:, :, :m]
        mean = np.einsum("tn,tnm->tm", w, x)
        var = np.einsum("tn,tnm->tm", w, (x - mean[:, None, :]) ** 2)
        ess = 1.0 / np.sum(w * w, axis=1)
        return np.exp(self.log_mass), mean, var, ess


def _resolve_policy(resample) -> ResamplePolicy:
    if resample is None:
        return ResamplePolicy()
    if isinstance(resample, ResamplePolicy):
        return resample
    if resample in ("never", False):
        return ResamplePolicy(method="never")
    raise ValueError(f"bad resample policy {resample!r}")


class _WeightTracker:
    """Log-domain weight bookkeeping shared by both particle filters."""

    def __init__(self, n, policy: ResamplePolicy, rng):
        self.n = n
        self.policy = policy
        self.rng = rng
        self.lw = np.zeros(n)
        self.log_mass = 0.0
        self.collapsed = 0

    def update(self, h, dy, dt):
        self.lw += h @ dy - 0.5 * np.sum(h * h, axis=1) * dt
        lse = logsumexp(self.lw)
        if not np.isfinite(lse):
            raise ZeroMass("all particle weights vanished")
        self.log_mass = float(lse - math.log(self.n))
        return np.exp(self.lw - lse)

    def maybe_resample(self, w):
        if w.max() > 1 - 1e-9 and self.n > 1:
            self.collapsed += 1
            if self.collapsed >= self.policy.collapse_patience:
                raise WeightCollapse("one particle has carried all the weight for "
                                     f"{self.collapsed} consecutive steps; increase N")
        else:
            self.collapsed = 0
        if self.policy.method == "never":
            return None
        if 1.0 / np.sum(w * w) >= self.policy.threshold * self.n:
            return None
        idx = systematic_resample(w, self.rng)
        self.lw = np.full(self.n, self.log_mass)
        return idx


def particle_filter_full(model: MultiscaleModel, eps: float, obs: ObservationPath,
                         n_particles: int, resample=None, seed: int = 0, *,
                         dt_rule: float = DEFAULT_DT_RULE, keep_fast: bool = False,
                         blowup: float = BLOWUP_NORM) -> MeasurePath:
    """Particle approximation of rho^eps and pi^eps driven by the whitened path ``obs``.

    The recorded states are the slow components (plus the fast ones when
    ``keep_fast``), one ensemble per observation time.
    """
    policy = _resolve_policy(resample)
    times = np.asarray(obs.times, float)
    dts = np.diff(times)
    check_step(float(dts.max()), eps, dt_rule)
    dY = np.diff(np.asarray(obs.Y, float).reshape(len(times), model.d), axis=0)
    N = int(n_particles)
    prop = rngmod.stream(seed, "pf-full", "particles")
    tracker = _WeightTracker(N, policy, rngmod.stream(seed, "pf-full", "resample"))
    x, z = model.sample_init(rngmod.stream(seed, "pf-full", "init"), N)
    proj, C = model.noise.proj, model.noise.C
    dim = model.m + (model.n if keep_fast else 0)
    states = np.empty((len(times), N, dim))
    logw = np.empty((len(times), N))
    logm = np.empty(len(times))

    def record(i):
        states[i, :, :model.m] = x
        if keep_fast:
            states[i, :, model.m:] = z
        logw[i] = tracker.lw
        logm[i] = tracker.log_mass

    record(0)
    for k, dt in enumerate(dts):
        sq = math.sqrt(dt)
        h = model.h_white(x, z)
        w = tracker.update(h, dY[k], dt)
        dW = (dY[k] - h * dt) @ proj.T + prop.standard_normal((N, model.w)) @ C.T * sq
        dV = prop.standard_normal((N, model.v)) * sq
        x_new = x + (model.b(x, z) + model.b_I(x, z) / eps) * dt + _bmv(model.sigma(x, z), dW)
        z = z + model.f(x, z) * (dt / eps ** 2) + _bmv(model.g(x, z), dV) / eps
        x = x_new
        _guard(x, z, limit=blowup)
        idx = tracker.maybe_resample(w)
        if idx is not None:
            x, z = x[idx], z[idx]
        record(k + 1)
    return MeasurePath(times, "full", model.m, states=states, log_weights=logw, log_mass=logm,
                       meta={"eps": eps, "seed": seed, "N": N})


def _slow_init(init):
    if isinstance(init, MultiscaleModel):
        return lambda rng, n: init.sample_init(rng, n)[0]

    def draw(rng, n):
        out = init(rng, n)
        return out[0] if isinstance(out, tuple) else out
    return draw


def particle_filter_averaged(avg: AveragedModel, obs: ObservationPath, n_particles: int,
                             init, resample=None, seed: int = 0, *,
                             blowup: float = BLOWUP_NORM) -> MeasurePath:
    """Particle approximation of rho^0 and pi^0 on the same observation path.

    Particles follow ``dX = (bbar + btilde) dt + atilde^1/2 dW~ + (abar - sigbar sigbar*)^1/2 dW^
    + sigbar dW``; only the ``sigbar`` channel is conditioned on ``dY``.
    ``init`` is the model (its slow initial marginal is used) or a sampler
    ``(rng, N) -> (N, m)``.
    """
    policy = _resolve_policy(resample)
    times = np.asarray(obs.times, float)
    dts = np.diff(times)
    m, d, w_dim = avg.m, avg.d, avg.w
    dY = np.diff(np.asarray(obs.Y, float).reshape(len(times), d), axis=0)
    N = int(n_particles)
    prop = rngmod.stream(seed, "pf-avg", "particles")
    tracker = _WeightTracker(N, policy, rngmod.stream(seed, "pf-avg", "resample"))
    x = np.asarray(_slow_init(init)(rngmod.stream(seed, "pf-avg", "init"), N), float).reshape(N, m)
    proj = avg.alpha_w.T
    C = psd_sqrt(np.eye(w_dim) - avg.alpha_w.T @ avg.alpha_w)
    states = np.empty((len(times), N, m))
    logw = np.empty((len(times), N))
    logm = np.empty(len(times))
    states[0], logw[0], logm[0] = x, tracker.lw, tracker.log_mass
    for k, dt in enumerate(dts):
        sq = math.sqrt(dt)
        drift, sa, sg, sb, hb = avg.coefficients(x)
        wts = tracker.update(hb, dY[k], dt)
        dWt = prop.standard_normal((N, m)) * sq
        dWh = prop.standard_normal((N, m)) * sq
        dW = (dY[k] - hb * dt) @ proj.T + prop.standard_normal((N, w_dim)) @ C.T * sq
        x = x + drift * dt + _bmv(sa, dWt) + _bmv(sg, dWh) + _bmv(sb, dW)
        _guard(x, limit=blowup)
        idx = tracker.maybe_resample(wts)
        if idx is not None:
            x = x[idx]
        states[k + 1], logw[k + 1], logm[k + 1] = x, tracker.lw, tracker.log_mass
    return MeasurePath(times, "averaged", m, states=states, log_weights=logw, log_mass=logm,
                       meta={"seed": seed, "N": N})


@dataclass
class LinearSpec:
    """``dX = (A X + a) dt + Sigma dN``, ``dY = (H X + c) dt + alpha dN + gamma dU``."""

    A: np.ndarray
    Sigma: np.ndarray
    H: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    m0: np.ndarray
    P0: np.ndarray
    a: Optional[np.ndarray] = None
    c: Optional[np.ndarray] = None
    slow_dim: Optional[int] = None

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, float))
        p = self.A.shape[0]
        self.Sigma = np.asarray(self.Sigma, float).reshape(p, -1)
        q = self.Sigma.shape[1]
        self.H = np.asarray(self.H, float).reshape(-1, p)
        d = self.H.shape[0]
        self.alpha = np.asarray(self.alpha, float).reshape(d, q)
        self.gamma = np.asarray(self.gamma, float).reshape(d, -1)
        self.m0 = np.asarray(self.m0, float).reshape(p)
        self.P0 = np.asarray(self.P0, float).reshape(p, p)
        self.a = np.zeros(p) if self.a is None else np.asarray(self.a, float).reshape(p)
        self.c = np.zeros(d) if self.c is None else np.asarray(self.c, float).reshape(d)
        if self.slow_dim is None:
            self.slow_dim = p


def kalman_bucy(spec: LinearSpec, obs: ObservationPath, tol: float = 1e-8) -> MeasurePath:
    """Correlated-noise Kalman-Bucy filter on the observation grid.

    Each step is the exact Kalman recursion for the Euler-discretized linear
    system, i.e. ``dm = (A m + a) dt + (P H* + Sigma alpha*)(dY - (H m + c) dt)``
    and ``dP = (AP + PA* + Sigma Sigma* - (PH* + Sigma alpha*)(PH* + Sigma alpha*)*) dt``
    up to O(dt^2) per step.
    """
    times = np.asarray(obs.times, float)
    p = spec.A.shape[0]
    d = spec.H.shape[0]
    dY = np.diff(np.asarray(obs.Y, float).reshape(len(times), d), axis=0)
    I = np.eye(p)
    Q0 = spec.Sigma @ spec.Sigma.T
    R0 = spec.alpha @ spec.alpha.T + spec.gamma @ spec.gamma.T
    S0 = spec.Sigma @ spec.alpha.T
    means = np.empty((len(times), p))
    covs = np.empty((len(times), p, p))
    mean, P = spec.m0.copy(), spec.P0.copy()
    means[0], covs[0] = mean, P
    # overflow is reported through CovarianceBlowup below
    with np.errstate(over="ignore", invalid="ignore"):
        for k, dt in enumerate(np.diff(times)):
            F = I + spec.A * dt
            Hd = spec.H * dt
            Sk = Hd @ P @ Hd.T + R0 * dt
            G = np.linalg.solve(Sk.T, (F @ P @ Hd.T + S0 * dt).T).T
            innov = dY[k] - (spec.H @ mean + spec.c) * dt
            mean = F @ mean + spec.a * dt + G @ innov
            P = F @ P @ F.T + Q0 * dt - G @ Sk @ G.T
            scale = 1.0 + float(np.max(np.abs(P)))
            if (not np.all(np.isfinite(P)) or np.max(np.abs(P - P.T)) > tol * scale
                    or np.min(np.linalg.eigvalsh(0.5 * (P + P.T))) < -tol * scale):
                raise CovarianceBlowup(f"covariance lost symmetry/PSD at t={times[k + 1]:g}")
            P = 0.5 * (P + P.T)
            means[k + 1], covs[k + 1] = mean, P
    return MeasurePath(times, "kalman", spec.slow_dim, means=means, covs=covs)


def _affine(fn, dim_in, base):
    """Slope matrix and offset of an affine vector map, by unit differences."""
    f0 = np.asarray(fn(base[None, :]), float)[0]
    cols = []
    for j in range(dim_in):
        e = base.copy()
        e[j] += 1.0
        cols.append(np.asarray(fn(e[None, :]), float)[0] - f0)
    slope = np.stack(cols, axis=-1)
    return slope, f0 - slope @ base


def linear_spec_from_model(model: MultiscaleModel, eps: float) -> LinearSpec:
    """Joint (x, z) linear-Gaussian system of a model flagged linear_gaussian."""
    if not model.flags.linear_gaussian:
        raise ValueError(f"model {model.name!r} is not flagged linear-Gaussian")
    if not isinstance(model.init, GaussianInit):
        raise ValueError("a Gaussian initial law is required for the Kalman oracle")
    m, n = model.m, model.n
    split = lambda s: (s[:, :m], s[:, m:])

    def drift(s):
        x, z = split(s)
        return np.hstack([model.b(x, z) + model.b_I(x, z) / eps, model.f(x, z) / eps ** 2])

    A, a = _affine(drift, m + n, np.zeros(m + n))
    H, c = _affine(lambda s: model.h_white(*split(s)), m + n, np.zeros(m + n))
    zero_x, zero_z = np.zeros((1, m)), np.zeros((1, n))
    Sigma = np.zeros((m + n, model.w + model.v))
    Sigma[:m, :model.w] = model.sigma(zero_x, zero_z)[0]
    Sigma[m:, model.w:] = model.g(zero_x, zero_z)[0] / eps
    alpha = np.hstack([model.alpha_w, np.zeros((model.d, model.v))])
    init = model.init
    m0 = np.concatenate([np.atleast_1d(init.mean_x), np.atleast_1d(init.mean_z)]).astype(float)
    P0 = np.zeros((m + n, m + n))
    P0[:m, :m] = np.atleast_2d(init.cov_x)
    P0[m:, m:] = np.atleast_2d(init.cov_z)
    return LinearSpec(A=A, a=a, Sigma=Sigma, H=H, c=c, alpha=alpha, gamma=model.gamma_w,
                      m0=m0, P0=P0, slow_dim=m)


def linear_spec_from_averaged(avg: AveragedModel, m0, P0, at=None) -> LinearSpec:
    """Linear-Gaussian system of an averaged model with affine drift/sensor and constant dispersion."""
    m = avg.m
    base = np.zeros(m) if at is None else np.asarray(at, float)
    A, a = _affine(lambda x: avg.coefficients(x)[0], m, base)
    H, c = _affine(lambda x: avg.coefficients(x)[4], m, base)
    _, sa, sg, sb, _ = avg.coefficients(base[None, :])
    Sigma = np.hstack([sa[0], sg[0], sb[0]])
    alpha = np.hstack([np.zeros((avg.d, 2 * m)), avg.alpha_w])
    return LinearSpec(A=A, a=a, Sigma=Sigma, H=H, c=c, alpha=alpha, gamma=avg.gamma_w,
                      m0=m0, P0=P0, slow_dim=m)


def filter_csv_header(m: int) -> list:
    return (["t", "mass"] + [f"mean_{i + 1}" for i in range(m)]
            + [f"var_{i + 1}" for i in range(m)] + ["ess"])


def write_filter_csv(mpath: MeasurePath, path, comments=()) -> None:
    mass, mean, var, ess = mpath.summary()
    with open(path, "w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        fh.write(",".join(filter_csv_header(mpath.slow_dim)) + "\n")
        for i, t in enumerate(mpath.times):
            row = [t, mass[i], *mean[i], *var[i], ess[i]]
            fh.write(",".join("%.17g" % v for v in row) + "\n")


DUMP_VERSION = "pf-v1"
_REC = struct.Struct("<ddII")


def _write_record(fh, payload: bytes) -> None:
    fh.write(struct.pack("<I", len(payload)))
    fh.write(payload)


def write_ensemble_dump(mpath: MeasurePath, path, meta: Optional[dict] = None) -> None:
    """Length-prefixed binary dump: a JSON header record, then one record per time."""
    if mpath.states is None:
        raise TypeError("only particle paths can be dumped")
    T, N, dim = mpath.states.shape
    header = {"version": DUMP_VERSION, "kind": mpath.kind, "slow_dim": mpath.slow_dim,
              "dim": dim, "N": N, "steps": T, "meta": meta or {}}
    with open(path, "wb") as fh:
        _write_record(fh, json.dumps(header, sort_keys=True).encode())
        for i in range(T):
            payload = (_REC.pack(float(mpath.times[i]), float(mpath.log_mass[i]), N, dim)
                       + np.ascontiguousarray(mpath.states[i], "<f8").tobytes()
                       + np.ascontiguousarray(mpath.log_weights[i], "<f8").tobytes())
            _write_record(fh, payload)


def read_ensemble_dump(path) -> MeasurePath:
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0
    records = []
    while pos < len(data):
        (length,) = struct.unpack_from("<I", data, pos)
        pos += 4
        records.append(data[pos:pos + length])
        pos += length
    header = json.loads(records[0])
    if header.get("version") != DUMP_VERSION:
        raise ValueError(f"unsupported dump version {header.get('version')!r}")
    times, logm, states, logw = [], [], [], []
    for rec in records[1:]:
        t, lm, N, dim = _REC.unpack_from(rec, 0)
        off = _REC.size
        st = np.frombuffer(rec, "<f8", N * dim, off).reshape(N, dim)
        lw = np.frombuffer(rec, "<f8", N, off + 8 * N * dim)
        times.append(t); logm.append(lm); states.append(st); logw.append(lw)
    return MeasurePath(np.array(times), header["kind"], header["slow_dim"],
                       states=np.array(states), log_weights=np.array(logw),
                       log_mass=np.array(logm), meta=header.get("meta", {}))
