"""Frozen-fast ergodic averages, the cell (Poisson) problem and averaged coefficients.

Everything here works on the frozen fast process
``dZ = f(x, Z) dt + g(x, Z) dV`` with the slow state ``x`` held fixed and the
time scale 1/eps**2 removed.  The Poisson solution
``u(x, .) = G_F^{-1}(-b_I)(x, .)`` is represented through the semigroup
integral ``u(x, z) = int_0^inf T_s(b_I)(z) ds``; the additive constant is fixed
by centering u under the stationary law.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import rng as rngmod
from .averaged_model import AveragedModel, TensorGrid
from .errors import ErgodicityWarning, PSDViolation, TruncationWarning
from .sde_core import MultiscaleModel, _bmv, min_eig, psd_sqrt


@dataclass
class StationaryParams:
    dt: float = 0.01
    burn_in: float = 10.0
    n_samples: int = 4000
    acf_window: float = 10.0
    acf_lag: float = 0.1
    ess_floor: float = 100.0


@dataclass
class StationaryEstimate:
    """Independent draws approximating the stationary law mu_inf(x), one per chain."""

    x: np.ndarray
    samples: np.ndarray
    burn_in: float
    n_samples: int
    dt: float
    ess: float
    mixing_time: float
    tau: np.ndarray

    def average(self, values: np.ndarray):
        """Sample mean of per-sample ``values`` and its ESS-based standard error."""
        values = np.asarray(values, dtype=float)
        mean = values.mean(axis=0)
        sd = values.std(axis=0, ddof=1) if len(values) > 1 else np.zeros_like(mean)
        return mean, sd / math.sqrt(max(1.0, min(self.ess, len(values))))


def _tile_x(x, k):
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return np.broadcast_to(x, (k, x.shape[1]))


def _frozen_step(model, xb, z, dt, dV):
    return z + model.f(xb, z) * dt + _bmv(model.g(xb, z), dV)


def _autocorr(series: np.ndarray, max_lag: Optional[int] = None) -> np.ndarray:
    """Pooled autocorrelation of ``series`` with shape (length, chains, p)."""
    L = series.shape[0]
    centered = series - series.mean(axis=(0, 1), keepdims=True)
    nfft = 1 << (2 * L - 1).bit_length()
    spec = np.fft.rfft(centered, n=nfft, axis=0)
    acov = np.fft.irfft(spec * np.conj(spec), n=nfft, axis=0)[:L]
    acov = acov.mean(axis=1) / L
    var = acov[0]
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = acov / var
    if max_lag is not None:
        rho = rho[:max_lag]
    return rho


def integrated_autocorr_time(series: np.ndarray) -> np.ndarray:
    """Integrated autocorrelation time in lags, ``1 + 2 sum rho_k`` up to the first negative lag.

    ``series`` has shape (length, chains, p); returns one value per component
    (NaN for a constant component).
    """
    rho = _autocorr(series)
    out = np.empty(rho.shape[1])
    for j in range(rho.shape[1]):
        r = rho[:, j]
        if not np.isfinite(r[0]):
            out[j] = np.nan
            continue
        neg = np.nonzero(r[1:] < 0)[0]
        stop = neg[0] + 1 if neg.size else len(r)
        out[j] = 1.0 + 2.0 * float(np.sum(r[1:stop]))
    return out


def estimate_stationary(model: MultiscaleModel, x, params: Optional[StationaryParams] = None,
                        seed: int = 0) -> StationaryEstimate:
    """Sample mu_inf(x) with independent Euler chains of the frozen fast process.

    Each chain starts at the origin and contributes its state after
    ``burn_in`` time units.  The chains then continue for ``acf_window`` time
    units to estimate the integrated autocorrelation of b_I (the mixing time)
    and of Z.  Identical seeds give common random numbers across different ``x``.
    """
    p = params or StationaryParams()
    x = np.asarray(x, dtype=float).reshape(model.m)
    C = max(2, int(p.n_samples))
    rng = rngmod.stream(seed, "stationary")
    xb = _tile_x(x, C)
    z = np.zeros((C, model.n))
    sq = math.sqrt(p.dt)
    for _ in range(int(math.ceil(p.burn_in / p.dt))):
        z = _frozen_step(model, xb, z, p.dt, rng.standard_normal((C, model.v)) * sq)
    samples = z.copy()
    every = max(1, int(round(p.acf_lag / p.dt)))
    L = max(3, int(math.ceil(p.acf_window / (every * p.dt))) + 1)
    zs = np.empty((L, C, model.n))
    zs[0] = z
    for j in range(1, L):
        for _ in range(every):
            z = _frozen_step(model, xb, z, p.dt, rng.standard_normal((C, model.v)) * sq)
        zs[j] = z
    lag = every * p.dt
    tau_z = integrated_autocorr_time(zs)
    bI = np.asarray(model.b_I(np.broadcast_to(x, (L * C, model.m)), zs.reshape(-1, model.n)))
    tau_b = integrated_autocorr_time(bI.reshape(L, C, model.m))
    finite = tau_b[np.isfinite(tau_b)]
    # one-sided integrated correlation in time units: lag * (1/2 + sum rho_k)
    mixing = float(lag * 0.5 * np.max(finite)) if finite.size else float("nan")
    tau_max = float(np.nanmax(tau_z)) * lag if np.any(np.isfinite(tau_z)) else 0.0
    ess = float(C)
    if tau_max * 5 > p.burn_in:
        # burn-in shorter than a few correlation times: draws not yet stationary
        ess = C * p.burn_in / (5 * tau_max)
    if ess < p.ess_floor:
        warnings.warn(f"stationary ESS {ess:.1f} below floor {p.ess_floor:g} at x={x}",
                      ErgodicityWarning, stacklevel=2)
    return StationaryEstimate(x=x, samples=samples, burn_in=p.burn_in, n_samples=C, dt=p.dt,
                              ess=ess, mixing_time=mixing, tau=tau_z * lag)


def semigroup_mc(model: MultiscaleModel, x, phi: Callable, t, z, n_paths: int, seed: int,
                 dt: float = 2e-3):
    """Monte Carlo estimate of ``T_t(phi)(z) = E[phi(Z_t) | Z_0 = z]`` for the frozen process.

    ``t`` may be a scalar or an increasing sequence of times and ``z`` a single
    point of shape ``(n,)`` or a batch ``(k, n)``.  All start points share the
    same Brownian increments.  Returns ``(mean, stderr)`` shaped
    ``(len(t), k)`` for array input and squeezed for scalar input.
    """
    scalar_t = np.ndim(t) == 0
    times = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(times < 0) or np.any(np.diff(times) < 0):
        raise ValueError("times must be nonnegative and increasing")
    z = np.asarray(z, dtype=float)
    single_z = z.ndim == 1
    starts = z.reshape(-1, model.n)
    k, P = starts.shape[0], int(n_paths)
    x = np.asarray(x, dtype=float).reshape(model.m)
    means = np.empty((times.size, k))
    errs = np.empty((times.size, k))
    rng = rngmod.stream(seed, "semigroup")
    Z = np.repeat(starts[:, None, :], P, axis=1).reshape(k * P, model.n)
    xb = _tile_x(x, k * P)
    now = 0.0
    for i, target in enumerate(times):
        while target - now > 1e-12:
            h = min(dt, target - now)
            dV = rng.standard_normal((P, model.v)) * math.sqrt(h)
            dV = np.broadcast_to(dV, (k, P, model.v)).reshape(k * P, model.v)
            Z = _frozen_step(model, xb, Z, h, dV)
            now += h
        if target == 0:
            means[i] = np.asarray(phi(starts), dtype=float).reshape(k)
            errs[i] = 0.0
            continue
        vals = np.asarray(phi(Z), dtype=float).reshape(k, P)
        means[i] = vals.mean(axis=1)
        errs[i] = vals.std(axis=1, ddof=1) / math.sqrt(P)
    if scalar_t:
        means, errs = means[0], errs[0]
    if single_z:
        means, errs = means[..., 0], errs[..., 0]
    if np.ndim(means) == 0:
        return float(means), float(errs)
    return means, errs


def _integrate_series(model, xs: np.ndarray, z0: np.ndarray, rng: np.random.Generator,
                      t_max: float, dt: float):
    """Trapezoidal ``int_0^t_max b_I(x_s, Z_r) dr`` along synchronously coupled paths.

    ``xs`` is ``(S, m)`` and ``z0`` is ``(S, P, n)``: S series (one frozen slow
    state each) over P noise paths that are shared by all series.  Returns the
    integral and the final integrand, both ``(S, P, m)``.
    """
    S, P, n = z0.shape
    m = model.m
    xb = np.repeat(np.asarray(xs, float)[:, None, :], P, axis=1).reshape(S * P, m)
    Z = z0.reshape(S * P, n).copy()
    steps = max(1, int(math.ceil(t_max / dt - 1e-9)))
    h = t_max / steps
    sq = math.sqrt(h)
    cur = np.asarray(model.b_I(xb, Z), float)
    acc = 0.5 * cur
    for i in range(steps):
        dV = rng.standard_normal((P, model.v)) * sq
        dV = np.broadcast_to(dV, (S, P, model.v)).reshape(S * P, model.v)
        Z = _frozen_step(model, xb, Z, h, dV)
        cur = np.asarray(model.b_I(xb, Z), float)
        acc += cur if i < steps - 1 else 0.5 * cur
    return (acc * h).reshape(S, P, m), cur.reshape(S, P, m)


@dataclass
class PoissonParams:
    t_max: Optional[float] = None
    dt: float = 0.01
    n_paths: int = 10000
    delta_x: Optional[float] = None
    tail_tol: float = 1e-3
    mixing_multiple: float = 20.0
    t_max_bounds: tuple = (1.0, 500.0)
    stationary: StationaryParams = field(default_factory=StationaryParams)


def choose_t_max(stat: StationaryEstimate, params: PoissonParams) -> float:
    if params.t_max is not None:
        return float(params.t_max)
    lo, hi = params.t_max_bounds
    if not np.isfinite(stat.mixing_time) or stat.mixing_time <= 0:
        return float(lo)
    return float(np.clip(params.mixing_multiple * stat.mixing_time, lo, hi))


@dataclass
class CellProblemSolution:
    """Pointwise Monte Carlo evaluator of the centered Poisson solution at slow state ``x``.

    ``u(z)`` is estimated as the mean over coupled path pairs of
    ``int_0^t_max [b_I(Z^z_s) - b_I(Z^zeta_s)] ds`` with ``zeta`` drawn from the
    stationary estimate, i.e. the raw semigroup integral minus its stationary
    average.  The same seed is reused on every call, so evaluations at
    different points (and at shifted slow states) use common random numbers.
    """

    model: MultiscaleModel
    x: np.ndarray
    t_max: float
    dt: float
    mc_paths: int
    delta_x: float
    seed: int
    stationary: StationaryEstimate
    params: PoissonParams
    _shifted: dict = field(default_factory=dict, repr=False)

    def _refs(self, stat: StationaryEstimate, n_paths: int) -> np.ndarray:
        idx = rngmod.stream(self.seed, "poisson-refs").integers(0, len(stat.samples), n_paths)
        return stat.samples[idx]

    def _stationary_at(self, x) -> StationaryEstimate:
        key = tuple(np.round(np.asarray(x, float), 15))
        if key not in self._shifted:
            self._shifted[key] = estimate_stationary(self.model, x, self.params.stationary,
                                                     self.seed)
        return self._shifted[key]

    def _run(self, xs, stats, z, n_paths):
        z = np.atleast_2d(np.asarray(z, float)).reshape(-1, self.model.n)
        k, P = z.shape[0], int(n_paths)
        series_x, starts = [], []
        for xv, st in zip(xs, stats):
            refs = self._refs(st, P)
            for zi in z:
                series_x.append(xv)
                starts.append(np.broadcast_to(zi, (P, self.model.n)))
            series_x.append(xv)
            starts.append(refs)
        rng = rngmod.stream(self.seed, "poisson-noise")
        integ, last = _integrate_series(self.model, np.array(series_x), np.stack(starts), rng,
                                        self.t_max, self.dt)
        integ = integ.reshape(len(xs), k + 1, P, self.model.m)
        last = last.reshape(len(xs), k + 1, P, self.model.m)
        diff = integ[:, :k] - integ[:, k:k + 1]
        tail = last[:, :k] - last[:, k:k + 1]
        return diff, tail

    def _check_tail(self, tail):
        mean = tail.mean(axis=-2)
        se = tail.std(axis=-2, ddof=1) / math.sqrt(tail.shape[-2]) if tail.shape[-2] > 1 else 0 * mean
        if np.any((np.abs(mean) > self.params.tail_tol) & (np.abs(mean) > 3 * se)):
            warnings.warn(f"semigroup tail at t_max={self.t_max:g} exceeds tolerance "
                          f"({float(np.max(np.abs(mean))):.3g})", TruncationWarning, stacklevel=3)

    def evaluate(self, z, n_paths: Optional[int] = None, return_stderr: bool = False):
        """u(x, z) for one point ``(n,)`` or a batch ``(k, n)``; values have shape ``(.., m)``."""
        P = int(n_paths or self.mc_paths)
        diff, tail = self._run([self.x], [self.stationary], z, P)
        self._check_tail(tail)
        u = diff[0].mean(axis=1)
        se = diff[0].std(axis=1, ddof=1) / math.sqrt(P)
        if np.asarray(z).ndim == 1:
            u, se = u[0], se[0]
        return (u, se) if return_stderr else u

    def evaluate_dx(self, z, n_paths: Optional[int] = None):
        """Central-difference Jacobian ``d u_i / d x_j`` at ``z``; shape ``(.., m, m)``."""
        P = int(n_paths or self.mc_paths)
        m = self.model.m
        xs, stats = [], []
        for j in range(m):
            for sgn in (1.0, -1.0):
                xv = self.x.copy()
                xv[j] += sgn * self.delta_x
                xs.append(xv)
                stats.append(self._stationary_at(xv))
        diff, _ = self._run(xs, stats, z, P)
        u = diff.mean(axis=2)  # (2m, k, m)
        jac = np.stack([(u[2 * j] - u[2 * j + 1]) / (2 * self.delta_x) for j in range(m)], axis=-1)
        return jac[0] if np.asarray(z).ndim == 1 else jac


def solve_poisson(model: MultiscaleModel, x, params: Optional[PoissonParams] = None,
                  seed: int = 0, stationary: Optional[StationaryEstimate] = None
                  ) -> CellProblemSolution:
    """Set up the centered solution of ``G_F u = -b_I`` at the frozen slow state ``x``."""
    params = params or PoissonParams()
    x = np.asarray(x, dtype=float).reshape(model.m)
    if not model.flags.b_I_centered:
        raise ValueError("the cell problem requires b_I centered under mu_inf(x)")
    stat = stationary if stationary is not None else estimate_stationary(
        model, x, params.stationary, seed)
    t_max = choose_t_max(stat, params)
    delta = params.delta_x if params.delta_x is not None else 1e-3 * (1.0 + float(np.linalg.norm(x)))
    return CellProblemSolution(model=model, x=x, t_max=t_max, dt=params.dt,
                               mc_paths=int(params.n_paths), delta_x=delta, seed=seed,
                               stationary=stat, params=params)


def generator_residual(sol: CellProblemSolution, z_probes, h: float = 0.05,
                       n_paths: Optional[int] = None) -> np.ndarray:
    """``G_F u + b_I`` at the probes, with u differentiated by central differences in z."""
    model = sol.model
    n = model.n
    zp = np.atleast_2d(np.asarray(z_probes, float)).reshape(-1, n)
    k = zp.shape[0]
    eye = np.eye(n) * h
    offsets = [np.zeros(n)]
    for i in range(n):
        offsets += [eye[i], -eye[i]]
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    for i, j in pairs:
        offsets += [eye[i] + eye[j], eye[i] - eye[j], -eye[i] + eye[j], -eye[i] - eye[j]]
    offsets = np.array(offsets)
    pts = (zp[:, None, :] + offsets[None]).reshape(-1, n)
    u = np.asarray(sol.evaluate(pts, n_paths=n_paths)).reshape(k, len(offsets), model.m)
    grad = np.empty((k, n, model.m))
    hess = np.empty((k, n, n, model.m))
    for i in range(n):
        up, dn = u[:, 1 + 2 * i], u[:, 2 + 2 * i]
        grad[:, i] = (up - dn) / (2 * h)
        hess[:, i, i] = (up - 2 * u[:, 0] + dn) / h ** 2
    base = 1 + 2 * n
    for q, (i, j) in enumerate(pairs):
        a, b, c, d = (u[:, base + 4 * q + r] for r in range(4))
        hess[:, i, j] = hess[:, j, i] = (a - b - c + d) / (4 * h ** 2)
    xb = _tile_x(sol.x, k)
    fz = np.asarray(model.f(xb, zp), float)
    gz = np.asarray(model.g(xb, zp), float)
    diff = gz @ np.swapaxes(gz, -1, -2)
    gen = np.einsum("ki,kim->km", fz, grad) + 0.5 * np.einsum("kij,kijm->km", diff, hess)
    return gen + np.asarray(model.b_I(xb, zp), float)


@dataclass
class CenteringCheck:
    residual: np.ndarray
    stderr: np.ndarray

    @property
    def centered(self) -> bool:
        return bool(np.all(np.abs(self.residual) <= 3 * self.stderr + 1e-15))


def check_centering(model: MultiscaleModel, x, stat: StationaryEstimate) -> CenteringCheck:
    """Stationary average of ``b_I(x, .)``; centered when within 3 standard errors of zero."""
    x = np.asarray(x, dtype=float).reshape(model.m)
    vals = model.b_I(_tile_x(x, len(stat.samples)), stat.samples)
    mean, se = stat.average(vals)
    return CenteringCheck(residual=np.asarray(mean), stderr=np.asarray(se))


@dataclass
class AssumptionReport:
    hf_exponent: float
    hf_margin: float
    hf_ok: bool
    hf_probes: int
    lam: float
    Lam: float
    hg_ok: bool

    def lines(self) -> list:
        return [
            f"H_f margin (alpha={self.hf_exponent:g}, {self.hf_probes} probes): "
            f"{self.hf_margin:.6g} -> {'ok' if self.hf_ok else 'VIOLATED'}",
            f"H_g eigenvalues of gg*: lambda={self.lam:.6g} Lambda={self.Lam:.6g} -> "
            f"{'ok' if self.hg_ok else 'VIOLATED'}",
        ]


def default_probes(model: MultiscaleModel, xs, rng: np.random.Generator,
                   n_far: int = 32, n_near: int = 32, radius: float = 10.0) -> np.ndarray:
    """Probe points (x, z) stacked as rows: far-out z on a sphere plus standard normal z."""
    xs = np.atleast_2d(np.asarray(xs, float)).reshape(-1, model.m)
    dirs = rng.standard_normal((n_far, model.n))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    z = np.vstack([radius * dirs, rng.standard_normal((n_near, model.n))])
    xi = xs[rng.integers(0, len(xs), len(z))]
    return np.hstack([xi, z])


def check_assumptions(model: MultiscaleModel, probes, alpha: float = 2.0,
                      radius: float = 1.0) -> AssumptionReport:
    """Probe the recurrence (H_f) and uniform ellipticity (H_g) conditions; advisory only.

    The H_f margin is the minimum of ``-<f(x,z), z> / |z|**alpha`` over probes
    with ``|z| > radius``; H_g reports the eigenvalue range of ``g g*``.
    """
    probes = np.atleast_2d(np.asarray(probes, float))
    x, z = probes[:, :model.m], probes[:, model.m:]
    fz = np.asarray(model.f(x, z), float)
    norm = np.linalg.norm(z, axis=1)
    far = norm > radius
    if np.any(far):
        margins = -np.sum(fz[far] * z[far], axis=1) / norm[far] ** alpha
        margin = float(np.min(margins))
    else:
        margin = float("nan")
    g = np.asarray(model.g(x, z), float)
    eig = np.linalg.eigvalsh(g @ np.swapaxes(g, -1, -2))
    lam, Lam = float(np.min(eig)), float(np.max(eig))
    return AssumptionReport(hf_exponent=alpha, hf_margin=margin,
                            hf_ok=bool(np.isfinite(margin) and margin > 0),
                            hf_probes=int(np.sum(far)), lam=lam, Lam=Lam, hg_ok=lam > 0)


@dataclass
class AveragingParams:
    stationary: StationaryParams = field(default_factory=StationaryParams)
    poisson: PoissonParams = field(default_factory=PoissonParams)
    inner_paths: int = 4
    psd_tol: float = 1e-8


def _node_coefficients(model: MultiscaleModel, x: np.ndarray, params: AveragingParams, seed: int):
    stat = estimate_stationary(model, x, params.stationary, seed)
    zs = stat.samples
    M = len(zs)
    xb = _tile_x(x, M)
    sig = np.asarray(model.sigma(xb, zs), float)
    out = {
        "bbar": stat.average(np.asarray(model.b(xb, zs), float))[0],
        "abar": (sig @ np.swapaxes(sig, -1, -2)).mean(axis=0),
        "hbar": stat.average(np.asarray(model.h_white(xb, zs), float))[0],
        "sigbar": sig.mean(axis=0),
    }
    m = model.m
    se = {}
    if model.flags.b_I_zero:
        out["btilde"] = np.zeros(m)
        out["atilde"] = np.zeros((m, m))
        se["btilde"], se["atilde"] = np.zeros(m), np.zeros((m, m))
        out["t_max"] = 0.0
        return out, se, stat
    pp = params.poisson
    t_max = choose_t_max(stat, pp)
    delta = pp.delta_x if pp.delta_x is not None else 1e-3 * (1.0 + float(np.linalg.norm(x)))
    Pi = max(1, int(params.inner_paths))
    perm_rng = rngmod.stream(seed, "averaging-refs")
    ref_idx = np.concatenate([perm_rng.permutation(M) for _ in range(Pi)])
    start_idx = np.tile(np.arange(M), Pi)
    xs = [x]
    stats = [stat]
    for j in range(m):
        for sgn in (1.0, -1.0):
            xv = x.copy()
            xv[j] += sgn * delta
            xs.append(xv)
            stats.append(estimate_stationary(model, xv, params.stationary, seed))
    series_x, starts = [], []
    for xv, st in zip(xs, stats):
        series_x += [xv, xv]
        starts += [zs[start_idx], st.samples[ref_idx]]
    rng = rngmod.stream(seed, "averaging-noise")
    integ, _ = _integrate_series(model, np.array(series_x), np.stack(starts), rng, t_max, pp.dt)
    # u at each sample z_j, averaged over inner paths: (len(xs), M, m)
    u = (integ[0::2] - integ[1::2]).reshape(len(xs), Pi, M, m).mean(axis=1)
    bI = np.asarray(model.b_I(xb, zs), float)
    cross = bI[:, :, None] * u[0][:, None, :]
    contrib_a = cross + np.swapaxes(cross, 1, 2)
    jac = np.stack([(u[1 + 2 * j] - u[2 + 2 * j]) / (2 * delta) for j in range(m)], axis=-1)
    contrib_b = np.einsum("kij,kj->ki", jac, bI)
    at, at_se = stat.average(contrib_a)
    bt, bt_se = stat.average(contrib_b)
    out["atilde"] = 0.5 * (at + at.T)
    out["btilde"] = bt
    out["t_max"] = t_max
    se["atilde"], se["btilde"] = at_se, bt_se
    return out, se, stat


def averaged_coefficients(model: MultiscaleModel, grid: TensorGrid,
                          params: Optional[AveragingParams] = None, seed: int = 0,
                          escape_margin: Optional[float] = None) -> AveragedModel:
    """Tabulate bbar, abar, hbar, sigbar, btilde and atilde on every grid node.

    Raises PSDViolation if ``abar - sigbar sigbar*`` has an eigenvalue below
    ``-psd_tol`` (relative) at some node.
    """
    params = params or AveragingParams()
    nodes = grid.nodes
    keys = ("bbar", "btilde", "abar", "atilde", "hbar", "sigbar")
    cols = {k: [] for k in keys}
    errs = {"btilde": [], "atilde": []}
    t_maxes, ess = [], []
    for i, x in enumerate(nodes):
        out, se, stat = _node_coefficients(model, x, params, rngmod.derive_seed(seed, "node", i))
        gap = out["abar"] - out["sigbar"] @ out["sigbar"].T
        scale = max(1.0, float(np.max(np.abs(out["abar"]))))
        if min_eig(gap) < -params.psd_tol * scale:
            raise PSDViolation(f"abar - sigbar sigbar* is indefinite at x={x}")
        for k in keys:
            cols[k].append(np.asarray(out[k], float))
        for k in errs:
            errs[k].append(np.asarray(se[k], float))
        t_maxes.append(out["t_max"])
        ess.append(stat.ess)
    arr = {k: np.array(v) for k, v in cols.items()}
    gap = arr["abar"] - arr["sigbar"] @ np.swapaxes(arr["sigbar"], -1, -2)
    meta = {"t_max": [float(t) for t in t_maxes], "ess": [float(e) for e in ess],
            "model": model.name}
    return AveragedModel(grid=grid, sqrt_atilde=psd_sqrt(arr["atilde"]), sqrt_gap=psd_sqrt(gap),
                         alpha_w=model.alpha_w.copy(), gamma_w=model.gamma_w.copy(),
                         stderr={k: np.array(v) for k, v in errs.items()}, meta=meta,
                         escape_margin=escape_margin, **arr)
