"""Multiscale signal/observation models and their Euler-Maruyama simulation.

Coefficient functions are vectorized over a leading batch axis: given slow
states ``x`` of shape ``(k, m)`` and fast states ``z`` of shape ``(k, n)`` they
return ``b, b_I -> (k, m)``, ``sigma -> (k, m, w)``, ``f -> (k, n)``,
``g -> (k, n, v)`` and ``h -> (k, d)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from . import rng as rngmod
from .errors import (FactorizationFailure, NonPositiveDefinite,
                     NumericalBlowup, StepTooCoarse)

DEFAULT_DT_RULE = 0.1
BLOWUP_NORM = 1e8


def psd_sqrt(a: np.ndarray) -> np.ndarray:
    """Symmetric square root of a (stack of) PSD matrices.

    Negative eigenvalues, which Monte Carlo noise makes routine for nearly
    singular matrices, are clipped to zero.
    """
    a = np.asarray(a, dtype=float)
    sym = 0.5 * (a + np.swapaxes(a, -1, -2))
    vals, vecs = np.linalg.eigh(sym)
    root = np.sqrt(np.clip(vals, 0.0, None))
    return (vecs * root[..., None, :]) @ np.swapaxes(vecs, -1, -2)


def min_eig(a: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return math.inf
    return float(np.min(np.linalg.eigvalsh(0.5 * (a + np.swapaxes(a, -1, -2)))))


@dataclass(frozen=True)
class Correlation:
    """Cholesky whitening of the observation noise."""

    K: np.ndarray
    kappa: np.ndarray
    kappa_inv: np.ndarray
    alpha_w: np.ndarray
    gamma_w: np.ndarray


@dataclass(frozen=True)
class NoiseDecomposition:
    """W = proj @ B + C @ N with N independent of the whitened noise B."""

    proj: np.ndarray
    C: np.ndarray


def build_correlation(alpha, gamma, floor: float = 1e-12) -> Correlation:
    """Factor ``K = alpha alpha* + gamma gamma*`` as ``kappa kappa*``.

    Raises NonPositiveDefinite when either K or gamma gamma* has an
    eigenvalue below ``floor`` (relative to the matrix scale).
    """
    alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
    gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
    if alpha.shape[0] != gamma.shape[0]:
        raise ValueError("alpha and gamma must have the same number of rows")
    d = alpha.shape[0]
    gg = gamma @ gamma.T
    K = alpha @ alpha.T + gg
    scale = max(1.0, float(np.max(np.abs(K))) if K.size else 1.0)
    if min_eig(K) <= floor * scale:
        raise NonPositiveDefinite("alpha alpha* + gamma gamma* is not positive definite")
    if min_eig(gg) <= floor * scale:
        raise NonPositiveDefinite("gamma gamma* is not positive definite")
    kappa = np.linalg.cholesky(K)
    kappa_inv = solve_triangular(kappa, np.eye(d), lower=True)
    return Correlation(K=K, kappa=kappa, kappa_inv=kappa_inv,
                       alpha_w=kappa_inv @ alpha, gamma_w=kappa_inv @ gamma)


def decompose_noise(corr: Correlation, tol: float = 1e-10) -> NoiseDecomposition:
    alpha_w = corr.alpha_w
    w = alpha_w.shape[1]
    resid = np.eye(w) - alpha_w.T @ alpha_w
    if min_eig(resid) < -tol:
        raise FactorizationFailure("I - alpha_w* alpha_w has a negative eigenvalue")
    return NoiseDecomposition(proj=alpha_w.T.copy(), C=psd_sqrt(resid))


@dataclass(frozen=True)
class GaussianInit:
    """Independent Gaussian initial law for (X0, Z0); zero covariance gives a point mass."""

    mean_x: np.ndarray
    cov_x: np.ndarray
    mean_z: np.ndarray
    cov_z: np.ndarray

    def __call__(self, rng: np.random.Generator, size: int):
        mx = np.asarray(self.mean_x, float)
        mz = np.asarray(self.mean_z, float)
        lx = psd_sqrt(np.atleast_2d(self.cov_x))
        lz = psd_sqrt(np.atleast_2d(self.cov_z))
        x = mx + rng.standard_normal((size, mx.size)) @ lx.T
        z = mz + rng.standard_normal((size, mz.size)) @ lz.T
        return x, z

    def sample_x(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self(rng, size)[0]


@dataclass
class ModelFlags:
    b_I_centered: bool = True
    b_I_zero: bool = False
    h_bounded: bool = False
    linear_gaussian: bool = False


@dataclass
class MultiscaleModel:
    """One slow/fast filtering problem.

    The observation model is whitened at construction: downstream code uses
    ``h_white``, ``alpha_w`` and ``gamma_w`` so that the observation noise has
    identity covariance.
    """

    m: int
    n: int
    w: int
    v: int
    u: int
    d: int
    b: Callable
    b_I: Callable
    sigma: Callable
    f: Callable
    g: Callable
    h: Callable
    alpha: np.ndarray
    gamma: np.ndarray
    init: Callable
    flags: ModelFlags = field(default_factory=ModelFlags)
    name: str = ""
    correlation: Correlation = field(init=False, repr=False)
    noise: NoiseDecomposition = field(init=False, repr=False)

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(self.d, self.w)
        self.gamma = np.asarray(self.gamma, dtype=float).reshape(self.d, self.u)
        self.correlation = build_correlation(self.alpha, self.gamma)
        self.noise = decompose_noise(self.correlation)

    @property
    def alpha_w(self) -> np.ndarray:
        return self.correlation.alpha_w

    @property
    def gamma_w(self) -> np.ndarray:
        return self.correlation.gamma_w

    def h_white(self, x, z):
        return self.h(x, z) @ self.correlation.kappa_inv.T

    def sample_init(self, rng: np.random.Generator, size: int):
        x, z = self.init(rng, size)
        return (np.asarray(x, float).reshape(size, self.m),
                np.asarray(z, float).reshape(size, self.n))


def check_affine(model: MultiscaleModel, rng: np.random.Generator,
                 n_probes: int = 20, scale: float = 3.0) -> float:
    """Largest deviation from affinity of any coefficient along random chords.

    Zero (to rounding) for linear-Gaussian models.
    """
    worst = 0.0
    names = ("b", "b_I", "sigma", "f", "g", "h")
    for _ in range(n_probes):
        p = scale * rng.standard_normal((2, model.m + model.n))
        lam = rng.uniform()
        mid = lam * p[0] + (1 - lam) * p[1]
        pts = np.stack([p[0], p[1], mid])
        x, z = pts[:, :model.m], pts[:, model.m:]
        for name in names:
            vals = np.asarray(getattr(model, name)(x, z), float)
            dev = vals[2] - (lam * vals[0] + (1 - lam) * vals[1])
            ref = 1.0 + float(np.max(np.abs(vals)))
            worst = max(worst, float(np.max(np.abs(dev), initial=0.0)) / ref)
    return worst


@dataclass(frozen=True)
class ObservationPath:
    times: np.ndarray
    Y: np.ndarray

    @property
    def dY(self) -> np.ndarray:
        return np.diff(self.Y, axis=0)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])


@dataclass
class PathBundle:
    times: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    Y: np.ndarray
    eps: float
    seed: int
    dW: Optional[np.ndarray] = None
    dB: Optional[np.ndarray] = None

    @property
    def observation(self) -> ObservationPath:
        return ObservationPath(self.times, self.Y)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])


def time_grid(dt: float, T: float) -> np.ndarray:
    """Uniform grid on [0, T] with step at most ``dt``."""
    if not T > 0:
        raise ValueError("T must be positive")
    if not dt > 0:
        raise ValueError("dt must be positive")
    n = max(1, int(math.ceil(T / dt - 1e-9)))
    return np.linspace(0.0, T, n + 1)


def check_step(dt: float, eps: float, dt_rule: float = DEFAULT_DT_RULE) -> None:
    if not 0 < eps <= 1:
        raise ValueError(f"eps must lie in (0, 1], got {eps}")
    if dt > dt_rule * eps ** 2 * (1 + 1e-9):
        raise StepTooCoarse(f"dt={dt:g} exceeds {dt_rule:g} * eps^2 = {dt_rule * eps ** 2:g}")


def _guard(*arrays, limit=BLOWUP_NORM):
    for a in arrays:
        if not np.all(np.isfinite(a)) or (a.size and np.max(np.abs(a)) > limit):
            raise NumericalBlowup("state norm exceeded the blowup guard")


def _bmv(mat, vec):
    """Batched matrix-vector product (k, p, q) @ (k, q) -> (k, p)."""
    if mat.shape[-1] == 1:
        return mat[:, :, 0] * vec
    return np.einsum("kpq,kq->kp", mat, vec)


def euler_step(model: MultiscaleModel, eps: float, dt: float, x, z, dW, dV):
    """One Euler-Maruyama step of the coupled signal; returns the new (x, z)."""
    drift_x = model.b(x, z) + model.b_I(x, z) / eps
    x_new = x + drift_x * dt + _bmv(model.sigma(x, z), dW)
    z_new = z + model.f(x, z) * (dt / eps ** 2) + _bmv(model.g(x, z), dV) / eps
    return x_new, z_new


def simulate_multiscale(model: MultiscaleModel, eps: float, dt: float, T: float,
                        seed: int, *, dt_rule: float = DEFAULT_DT_RULE,
                        blowup: float = BLOWUP_NORM) -> PathBundle:
    """Simulate one path of (X, Z) and of the whitened observation Y.

    The slow state and the observation share the same W increments, which
    produces the signal/observation correlation.
    """
    check_step(dt, eps, dt_rule)
    times = time_grid(dt, T)
    h = float(times[1] - times[0])
    K = len(times) - 1
    sq = math.sqrt(h)
    dW = rngmod.stream(seed, "signal-W").standard_normal((K, model.w)) * sq
    dV = rngmod.stream(seed, "fast-V").standard_normal((K, model.v)) * sq
    dU = rngmod.stream(seed, "obs-U").standard_normal((K, model.u)) * sq
    dB = dW @ model.alpha_w.T + dU @ model.gamma_w.T
    x, z = model.sample_init(rngmod.stream(seed, "init"), 1)
    X = np.empty((K + 1, model.m))
    Z = np.empty((K + 1, model.n))
    Y = np.zeros((K + 1, model.d))
    X[0], Z[0] = x[0], z[0]
    for k in range(K):
        dy = model.h_white(x, z)[0] * h + dB[k]
        x, z = euler_step(model, eps, h, x, z, dW[k:k + 1], dV[k:k + 1])
        _guard(x, z, limit=blowup)
        X[k + 1], Z[k + 1] = x[0], z[0]
        Y[k + 1] = Y[k] + dy
    return PathBundle(times=times, X=X, Z=Z, Y=Y, eps=eps, seed=seed, dW=dW, dB=dB)


def simulate_ensemble(model: MultiscaleModel, eps: float, dt: float, T: float,
                      n_paths: int, seed: int, *, dt_rule: float = DEFAULT_DT_RULE,
                      blowup: float = BLOWUP_NORM):
    """Simulate ``n_paths`` independent signal paths at once.

    Returns ``(times, X, Z)`` with ``X`` of shape ``(len(times), n_paths, m)``.
    Observations are not generated.
    """
    check_step(dt, eps, dt_rule)
    times = time_grid(dt, T)
    h = float(times[1] - times[0])
    sq = math.sqrt(h)
    noise = rngmod.stream(seed, "ensemble-noise")
    x, z = model.sample_init(rngmod.stream(seed, "ensemble-init"), n_paths)
    X = np.empty((len(times), n_paths, model.m))
    Z = np.empty((len(times), n_paths, model.n))
    X[0], Z[0] = x, z
    for k in range(len(times) - 1):
        dW = noise.standard_normal((n_paths, model.w)) * sq
        dV = noise.standard_normal((n_paths, model.v)) * sq
        x, z = euler_step(model, eps, h, x, z, dW, dV)
        _guard(x, z, limit=blowup)
        X[k + 1], Z[k + 1] = x, z
    return times, X, Z


def brownian_observation(d: int, dt: float, T: float, seed: int) -> ObservationPath:
    """A standard d-dimensional Brownian path, i.e. Y under the reference measure."""
    times = time_grid(dt, T)
    h = float(times[1] - times[0])
    inc = rngmod.stream(seed, "reference-Y").standard_normal((len(times) - 1, d)) * math.sqrt(h)
    Y = np.vstack([np.zeros((1, d)), np.cumsum(inc, axis=0)])
    return ObservationPath(times, Y)


def path_header(m: int, n: int, d: int) -> list:
    return (["t"] + [f"X{i + 1}" for i in range(m)] + [f"Z{i + 1}" for i in range(n)]
            + [f"Y{i + 1}" for i in range(d)])


def write_path_csv(bundle: PathBundle, path, comments: Sequence[str] = ()) -> None:
    m, n, d = bundle.X.shape[1], bundle.Z.shape[1], bundle.Y.shape[1]
    with open(path, "w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        fh.write(",".join(path_header(m, n, d)) + "\n")
        rows = np.hstack([bundle.times[:, None], bundle.X, bundle.Z, bundle.Y])
        for row in rows:
            fh.write(",".join("%.17g" % v for v in row) + "\n")


def read_path_csv(path):
    """Read a path CSV back into ``(times, X, Z, Y)`` arrays."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    data = np.array([[float(v) for v in row] for row in reader])
    cols = {c[0] for c in header[1:]}
    assert cols <= {"X", "Z", "Y"}
    idx = {k: [i for i, c in enumerate(header) if c.startswith(k) and c != "t"] for k in "XZY"}
    return data[:, 0], data[:, idx["X"]], data[:, idx["Z"]], data[:, idx["Y"]]
