"""Named test problems with their known analytic facts."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .averaged_model import AveragedModel, TensorGrid
from .sde_core import GaussianInit, ModelFlags, MultiscaleModel

SQRT2 = math.sqrt(2.0)


class _ScalarOU:
    """Shared pieces of the scalar registry models: f = -z, g = sqrt(2), so mu_inf = N(0, 1)."""

    def __init__(self, decay=1.0, sigma=0.5):
        self.decay = float(decay)
        self.sig = float(sigma)

    def b(self, x, z):
        return -self.decay * x

    def sigma(self, x, z):
        return np.broadcast_to(self.sig, (len(x), 1, 1))

    def f(self, x, z):
        return -z

    def g(self, x, z):
        return np.broadcast_to(SQRT2, (len(z), 1, 1))


class OULinear(_ScalarOU):
    def __init__(self, c=0.5, decay=1.0, sigma=0.5, gain=1.0):
        super().__init__(decay, sigma)
        self.c = float(c)
        self.gain = float(gain)

    def b_I(self, x, z):
        return self.c * z

    def h(self, x, z):
        return self.gain * x


class OUDecay(_ScalarOU):
    def __init__(self, c0=6.0, decay=4.0, sigma=0.5, gain=2.0, fast_gain=0.0):
        super().__init__(decay, sigma)
        self.c0 = float(c0)
        self.gain = float(gain)
        self.fast_gain = float(fast_gain)

    def b_I(self, x, z):
        return self.c0 * (1.0 + 0.5 * np.cos(x)) * z * np.exp(-z * z)

    def h(self, x, z):
        return self.gain * np.tanh(x) + self.fast_gain * np.cos(z)


class ZFree(_ScalarOU):
    def __init__(self, decay=1.0, sigma=0.5, gain=1.0):
        super().__init__(decay, sigma)
        self.gain = float(gain)

    def b_I(self, x, z):
        return np.zeros_like(x)

    def h(self, x, z):
        return self.gain * np.tanh(x)


def _scalar_model(name, coeffs, alpha, gamma, var_x0, flags) -> MultiscaleModel:
    init = GaussianInit(np.zeros(1), np.array([[var_x0]]), np.zeros(1), np.eye(1))
    return MultiscaleModel(m=1, n=1, w=1, v=1, u=1, d=1, b=coeffs.b, b_I=coeffs.b_I,
                           sigma=coeffs.sigma, f=coeffs.f, g=coeffs.g, h=coeffs.h,
                           alpha=np.array([[alpha]]), gamma=np.array([[gamma]]), init=init,
                           flags=flags, name=name)


def ou_linear(c=0.5, decay=1.0, sigma=0.5, gain=1.0, alpha=0.5, gamma=1.0, var_x0=0.5):
    return _scalar_model("ou-linear", OULinear(c, decay, sigma, gain), alpha, gamma, var_x0,
                         ModelFlags(b_I_centered=True, linear_gaussian=True))


def ou_decay(c0=6.0, decay=4.0, sigma=0.5, gain=2.0, fast_gain=0.0, alpha=0.5, gamma=1.0,
             var_x0=0.5):
    return _scalar_model("ou-decay", OUDecay(c0, decay, sigma, gain, fast_gain), alpha, gamma,
                         var_x0, ModelFlags(b_I_centered=True, h_bounded=True))


def z_free(decay=1.0, sigma=0.5, gain=1.0, alpha=0.5, gamma=1.0, var_x0=0.5):
    return _scalar_model("z-free", ZFree(decay, sigma, gain), alpha, gamma, var_x0,
                         ModelFlags(b_I_centered=True, b_I_zero=True, h_bounded=True))


def ou_linear_average(grid: TensorGrid, c=0.5, decay=1.0, sigma=0.5, gain=1.0, alpha=0.5,
                      gamma=1.0, **_) -> AveragedModel:
    """Closed-form averaged model of ou-linear: u = c z, atilde = 2 c^2, btilde = 0."""
    model = ou_linear(c=c, decay=decay, sigma=sigma, gain=gain, alpha=alpha, gamma=gamma)
    kinv = model.correlation.kappa_inv[0, 0]
    return AveragedModel.from_functions(
        grid,
        bbar=lambda x: -decay * x,
        abar=lambda x: np.full((len(x), 1, 1), sigma ** 2),
        hbar=lambda x: kinv * gain * x,
        sigbar=lambda x: np.full((len(x), 1, 1), sigma),
        atilde=lambda x: np.full((len(x), 1, 1), 2.0 * c * c),
        alpha_w=model.alpha_w, gamma_w=model.gamma_w, meta={"model": "ou-linear"})


def z_free_average(grid: TensorGrid, decay=1.0, sigma=0.5, gain=1.0, alpha=0.5, gamma=1.0,
                   **_) -> AveragedModel:
    """Averaging leaves a model without fast dependence unchanged."""
    model = z_free(decay=decay, sigma=sigma, gain=gain, alpha=alpha, gamma=gamma)
    kinv = model.correlation.kappa_inv[0, 0]
    return AveragedModel.from_functions(
        grid,
        bbar=lambda x: -decay * x,
        abar=lambda x: np.full((len(x), 1, 1), sigma ** 2),
        hbar=lambda x: kinv * gain * np.tanh(x),
        sigbar=lambda x: np.full((len(x), 1, 1), sigma),
        alpha_w=model.alpha_w, gamma_w=model.gamma_w, meta={"model": "z-free"})


@dataclass(frozen=True)
class ModelRegistryEntry:
    name: str
    constructor: Callable[..., MultiscaleModel]
    facts: dict
    hypotheses: str
    oracle: bool = False
    analytic_average: Optional[Callable[..., AveragedModel]] = None

    def build(self, **params) -> MultiscaleModel:
        return self.constructor(**params)


REGISTRY = {
    "ou-linear": ModelRegistryEntry(
        name="ou-linear",
        constructor=ou_linear,
        facts={
            "stationary_law": "N(0, 1) for Z at every x",
            "cell_solution": "u(x, z) = c z",
            "averaged": "bbar = -decay x, abar = sigma^2, sigbar = sigma, hbar = kappa^-1 gain x, "
                        "btilde = 0, atilde = 2 c^2",
            "kalman": "joint (x, z) system is linear-Gaussian",
        },
        hypotheses="H_f holds with margin 1 (alpha=2), H_g with lambda = Lambda = 2, b_I centered; "
                   "b_I = c z grows linearly, so the polynomial decay hypothesis on b_I fails. "
                   "Included because the Kalman-Bucy oracle is exact.",
        oracle=True,
        analytic_average=ou_linear_average,
    ),
    "ou-decay": ModelRegistryEntry(
        name="ou-decay",
        constructor=ou_decay,
        facts={
            "stationary_law": "N(0, 1) for Z at every x",
            "centering": "b_I(x, .) is odd in z, so its N(0, 1) average is 0",
            "bounded_sensor": "|h| <= gain + fast_gain; the default sensor reads x only",
            "slow_drift": "-decay * x; the default decay 4 keeps the slow law concentrated",
        },
        hypotheses="H_f margin 1 (alpha=2), H_g with lambda = Lambda = 2, b_I centered and "
                   "decaying like exp(-z^2), h bounded.",
    ),
    "z-free": ModelRegistryEntry(
        name="z-free",
        constructor=z_free,
        facts={"averaged": "identical to the original slow dynamics; no fast corrections"},
        hypotheses="b_I = 0; averaging is the identity.",
        analytic_average=z_free_average,
    ),
}


def get_entry(name: str) -> ModelRegistryEntry:
    try:
        return REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; known: {', '.join(sorted(REGISTRY))}") from None


def build_model(name: str, **params) -> MultiscaleModel:
    return get_entry(name).build(**params)
