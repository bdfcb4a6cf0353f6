"""Tabulated homogenized coefficients and their JSON representation."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import GridEscape
from .sde_core import psd_sqrt

VERSION = "avgmodel-v1"

NODE_FIELDS = ("bbar", "btilde", "abar", "atilde", "hbar", "sigbar",
               "sqrt_atilde", "sqrt_gap")


@dataclass(frozen=True)
class TensorGrid:
    """Tensor-product grid over the slow state space; nodes are enumerated in C order."""

    axes: tuple

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        for a in axes:
            if a.ndim != 1 or a.size < 2 or np.any(np.diff(a) <= 0):
                raise ValueError("grid axes must be strictly increasing with >= 2 points")
        object.__setattr__(self, "axes", axes)

    @classmethod
    def uniform(cls, lower, upper, points) -> "TensorGrid":
        lower, upper, points = (np.atleast_1d(v) for v in (lower, upper, points))
        return cls(tuple(np.linspace(lo, hi, int(p)) for lo, hi, p in zip(lower, upper, points)))

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple:
        return tuple(a.size for a in self.axes)

    @property
    def nodes(self) -> np.ndarray:
        return np.array(list(itertools.product(*self.axes)), dtype=float).reshape(-1, self.dim)

    @property
    def lower(self) -> np.ndarray:
        return np.array([a[0] for a in self.axes])

    @property
    def upper(self) -> np.ndarray:
        return np.array([a[-1] for a in self.axes])


@dataclass
class AveragedModel:
    """Homogenized coefficients at every node of ``grid``.

    Node arrays have a leading axis over the flattened grid: ``bbar`` and
    ``btilde`` are ``(G, m)``, ``abar``/``atilde``/``sqrt_*`` are ``(G, m, m)``,
    ``hbar`` is ``(G, d)`` (whitened) and ``sigbar`` is ``(G, m, w)``.
    Queries between nodes are multilinear; outside the grid they clamp to the
    boundary, and a query farther than ``escape_margin`` outside raises.
    """

    grid: TensorGrid
    bbar: np.ndarray
    btilde: np.ndarray
    abar: np.ndarray
    atilde: np.ndarray
    hbar: np.ndarray
    sigbar: np.ndarray
    sqrt_atilde: np.ndarray
    sqrt_gap: np.ndarray
    alpha_w: np.ndarray
    gamma_w: np.ndarray
    stderr: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    escape_margin: Optional[float] = None
    _interp: Optional[RegularGridInterpolator] = field(default=None, init=False, repr=False)

    @property
    def m(self) -> int:
        return self.bbar.shape[1]

    @property
    def d(self) -> int:
        return self.hbar.shape[1]

    @property
    def w(self) -> int:
        return self.sigbar.shape[2]

    def gap(self) -> np.ndarray:
        return self.abar - self.sigbar @ np.swapaxes(self.sigbar, -1, -2)

    def _packed(self):
        G = self.bbar.shape[0]
        parts = [self.bbar + self.btilde, self.sqrt_atilde.reshape(G, -1),
                 self.sqrt_gap.reshape(G, -1), self.sigbar.reshape(G, -1), self.hbar]
        return np.hstack(parts)

    def _interpolator(self) -> RegularGridInterpolator:
        if self._interp is None:
            packed = self._packed()
            values = packed.reshape(self.grid.shape + (packed.shape[1],))
            self._interp = RegularGridInterpolator(self.grid.axes, values, method="linear",
                                                   bounds_error=False, fill_value=None)
        return self._interp

    def margin(self) -> np.ndarray:
        if self.escape_margin is not None:
            return np.full(self.grid.dim, float(self.escape_margin))
        return 0.25 * (self.grid.upper - self.grid.lower)

    def coefficients(self, x: np.ndarray):
        """Interpolated (drift, sqrt_atilde, sqrt_gap, sigbar, hbar) at slow states ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        lo, hi = self.grid.lower, self.grid.upper
        mg = self.margin()
        if np.any(x < lo - mg) or np.any(x > hi + mg):
            raise GridEscape("slow state left the tabulated grid beyond the escape margin")
        vals = self._interpolator()(np.clip(x, lo, hi))
        m, w, d = self.m, self.w, self.d
        k = x.shape[0]
        i = 0
        drift = vals[:, i:i + m]; i += m
        sa = vals[:, i:i + m * m].reshape(k, m, m); i += m * m
        sg = vals[:, i:i + m * m].reshape(k, m, m); i += m * m
        sb = vals[:, i:i + m * w].reshape(k, m, w); i += m * w
        hb = vals[:, i:i + d]
        return drift, sa, sg, sb, hb

    @classmethod
    def from_functions(cls, grid: TensorGrid, *, bbar: Callable, abar: Callable,
                       hbar: Callable, sigbar: Callable, alpha_w, gamma_w,
                       btilde: Optional[Callable] = None,
                       atilde: Optional[Callable] = None, meta=None) -> "AveragedModel":
        """Tabulate closed-form averaged coefficients (vectorized callables of x)."""
        x = grid.nodes
        G, m = x.shape
        bb = np.asarray(bbar(x), float).reshape(G, m)
        ab = np.asarray(abar(x), float).reshape(G, m, m)
        sb = np.asarray(sigbar(x), float).reshape(G, m, -1)
        hb = np.asarray(hbar(x), float).reshape(G, -1)
        bt = np.zeros_like(bb) if btilde is None else np.asarray(btilde(x), float).reshape(G, m)
        at = np.zeros_like(ab) if atilde is None else np.asarray(atilde(x), float).reshape(G, m, m)
        gap = ab - sb @ np.swapaxes(sb, -1, -2)
        return cls(grid=grid, bbar=bb, btilde=bt, abar=ab, atilde=at, hbar=hb, sigbar=sb,
                   sqrt_atilde=psd_sqrt(at), sqrt_gap=psd_sqrt(gap),
                   alpha_w=np.asarray(alpha_w, float), gamma_w=np.asarray(gamma_w, float),
                   meta=dict(meta or {}))

    def to_json(self, provenance: Optional[dict] = None) -> str:
        G = self.bbar.shape[0]
        doc = {
            "version": VERSION,
            "grid": {"axes": [a.tolist() for a in self.grid.axes]},
            "dims": {"m": self.m, "d": self.d, "w": self.w, "u": int(self.gamma_w.shape[1])},
            "alpha_w": self.alpha_w.ravel().tolist(),
            "gamma_w": self.gamma_w.ravel().tolist(),
            "nodes": {name: getattr(self, name).reshape(G, -1).tolist() for name in NODE_FIELDS},
            "stderr": {k: np.asarray(v).reshape(G, -1).tolist() for k, v in self.stderr.items()},
            "meta": self.meta,
        }
        if provenance is not None:
            doc["provenance"] = provenance
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AveragedModel":
        doc = json.loads(text)
        if doc.get("version") != VERSION:
            raise ValueError(f"unsupported averaged model version {doc.get('version')!r}")
        grid = TensorGrid(tuple(np.array(a) for a in doc["grid"]["axes"]))
        dims = doc["dims"]
        m, d, w, u = dims["m"], dims["d"], dims["w"], dims["u"]
        shapes = {"bbar": (m,), "btilde": (m,), "abar": (m, m), "atilde": (m, m),
                  "hbar": (d,), "sigbar": (m, w), "sqrt_atilde": (m, m), "sqrt_gap": (m, m)}
        arrays = {k: np.array(doc["nodes"][k], float).reshape((-1,) + shapes[k]) for k in NODE_FIELDS}
        stderr = {}
        for k, v in doc.get("stderr", {}).items():
            arr = np.array(v, float)
            stderr[k] = arr.reshape((-1,) + shapes[k]) if k in shapes else arr
        return cls(grid=grid, alpha_w=np.array(doc["alpha_w"], float).reshape(d, w),
                   gamma_w=np.array(doc["gamma_w"], float).reshape(d, u),
                   stderr=stderr, meta=doc.get("meta", {}), **arrays)


def save_averaged_model(avg: AveragedModel, path, provenance: Optional[dict] = None) -> None:
    with open(path, "w") as fh:
        fh.write(avg.to_json(provenance))
        fh.write("\n")


def load_averaged_model(path) -> AveragedModel:
    with open(path) as fh:
        return AveragedModel.from_json(fh.read())
