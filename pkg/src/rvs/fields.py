"""Rays, analytic 1D test fields and per-ray discretized density grids."""

from __future__ import annotations

import enum
import math
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

__all__ = [
    "Mode",
    "RayInterval",
    "RayDensityGrid",
    "ScalarField1D",
    "RayRadiance",
    "discretize",
    "foggy_field",
    "wall_field",
    "field_from_dict",
    "sinusoid_radiance",
    "rgb_sinusoid_radiance",
    "constant_radiance",
    "tabulated_radiance",
]


class Mode(str, enum.Enum):
    """Piecewise approximation of density inside a grid bin."""

    CONSTANT = "constant"
    LINEAR = "linear"


@dataclass(frozen=True)
class RayInterval:
    t_near: float
    t_far: float

    def __post_init__(self):
        if not (math.isfinite(self.t_near) and math.isfinite(self.t_far)):
            raise ValueError(f"ray bounds must be finite, got [{self.t_near}, {self.t_far}]")
        if not self.t_near < self.t_far:
            raise ValueError(f"t_near must be < t_far, got [{self.t_near}, {self.t_far}]")

    @property
    def length(self) -> float:
        return self.t_far - self.t_near


@dataclass(frozen=True, eq=False)
class RayDensityGrid:
    """Density samples along one ray.

    ``values`` has one entry per bin (``Mode.CONSTANT``, evaluated at an in-bin
    point) or one entry per knot (``Mode.LINEAR``).
    """

    knots: np.ndarray
    values: np.ndarray
    mode: Mode = Mode.CONSTANT

    def __post_init__(self):
        knots = np.array(self.knots, dtype=np.float64)
        values = np.array(self.values, dtype=np.float64)
        mode = Mode(self.mode)
        if knots.ndim != 1 or knots.size < 2:
            raise ValueError("need at least two knots (m >= 1)")
        if not np.all(np.isfinite(knots)):
            raise ValueError("knots must be finite")
        if not np.all(np.diff(knots) > 0):
            raise ValueError("knots must be strictly increasing")
        m = knots.size - 1
        expected = m if mode is Mode.CONSTANT else m + 1
        if values.shape != (expected,):
            raise ValueError(
                f"{mode.value} mode with m={m} bins needs {expected} density values, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("density values must be finite")
        if np.any(values < 0):
            raise ValueError("density values must be nonnegative")
        knots.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mode", mode)

    @property
    def m(self) -> int:
        return self.knots.size - 1

    @property
    def n_params(self) -> int:
        return self.values.size

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.knots)

    @property
    def interval(self) -> RayInterval:
        return RayInterval(float(self.knots[0]), float(self.knots[-1]))

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.knots[:-1] + self.knots[1:])

    def with_values(self, values) -> "RayDensityGrid":
        return RayDensityGrid(self.knots, values, self.mode)


# -- analytic fields --------------------------------------------------------

_FIELD_KINDS = ("ConstantFog", "StepWall", "GaussianBump", "Tabulated", "Composite")


@dataclass(frozen=True, eq=False)
class ScalarField1D:
    """Analytic or tabulated scalar function of the ray parameter.

    Kinds and their parameters:

    * ``ConstantFog``: ``level``
    * ``StepWall``: ``center``, ``width``, ``amplitude`` (box of the given width)
    * ``GaussianBump``: ``center``, ``width`` (standard deviation), ``amplitude``
    * ``Tabulated``: ``knots``, ``values`` (linear interpolation, clamped ends)
    * ``Composite``: ``components``, a list of other field definitions, summed
    """

    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _FIELD_KINDS:
            raise ValueError(f"unknown field kind {self.kind!r}; expected one of {_FIELD_KINDS}")
        p = dict(self.params)
        if self.kind == "ConstantFog":
            p.setdefault("level", 0.8)
        elif self.kind in ("StepWall", "GaussianBump"):
            for name in ("center", "width", "amplitude"):
                if name not in p:
                    raise ValueError(f"{self.kind} needs parameter {name!r}")
            if p["width"] <= 0:
                raise ValueError("width must be positive")
        elif self.kind == "Tabulated":
            knots = np.asarray(p.get("knots"), dtype=np.float64)
            values = np.asarray(p.get("values"), dtype=np.float64)
            if knots.ndim != 1 or knots.shape != values.shape or knots.size < 1:
                raise ValueError("Tabulated needs equal-length 1D knots and values")
            if np.any(np.diff(knots) <= 0):
                raise ValueError("Tabulated knots must be strictly increasing")
            p["knots"], p["values"] = knots, values
        elif self.kind == "Composite":
            comps = [c if isinstance(c, ScalarField1D) else field_from_dict(c) for c in p.get("components", [])]
            if not comps:
                raise ValueError("Composite needs at least one component")
            p["components"] = tuple(comps)
        object.__setattr__(self, "params", p)

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        p = self.params
        if self.kind == "ConstantFog":
            return np.full_like(t, float(p["level"]))
        if self.kind == "StepWall":
            half = 0.5 * p["width"]
            inside = np.abs(t - p["center"]) <= half
            return np.where(inside, float(p["amplitude"]), 0.0)
        if self.kind == "GaussianBump":
            z = (t - p["center"]) / p["width"]
            return p["amplitude"] * np.exp(-0.5 * z * z)
        if self.kind == "Tabulated":
            return np.interp(t, p["knots"], p["values"])
        return sum(c(t) for c in p["components"])

    def to_dict(self) -> dict:
        p = {}
        for key, val in self.params.items():
            if key == "components":
                p[key] = [c.to_dict() for c in val]
            elif isinstance(val, np.ndarray):
                p[key] = val.tolist()
            else:
                p[key] = val
        return {"kind": self.kind, "params": p}


def field_from_dict(spec: Mapping[str, Any]) -> ScalarField1D:
    """Build a field from its JSON form ``{"kind": ..., "params": {...}}``."""
    if not isinstance(spec, Mapping) or "kind" not in spec:
        raise ValueError("field definition must be an object with a 'kind' key")
    return ScalarField1D(spec["kind"], dict(spec.get("params", {})))


def foggy_field(level: float = 0.8) -> ScalarField1D:
    """Semi-transparent medium filling the whole ray."""
    return ScalarField1D("ConstantFog", {"level": level})


def wall_field(
    interval: RayInterval = RayInterval(0.0, 1.0),
    center: float | None = None,
    rel_width: float = 0.01,
    depth: float = 6.0,
) -> ScalarField1D:
    """Narrow Gaussian bump holding ``depth`` units of optical depth.

    The default depth 6 gives a total opacity of about 0.9975.
    """
    if center is None:
        center = 0.5 * (interval.t_near + interval.t_far)
    width = rel_width * interval.length
    amplitude = depth / (width * math.sqrt(2.0 * math.pi))
    return ScalarField1D("GaussianBump", {"center": center, "width": width, "amplitude": amplitude})


def discretize(field: Callable, interval: RayInterval, m: int, mode: Mode | str = Mode.CONSTANT) -> RayDensityGrid:
    """Sample ``field`` on a uniform ``m``-bin grid.

    Constant mode evaluates bin midpoints, linear mode evaluates knots.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    mode = Mode(mode)
    knots = np.linspace(interval.t_near, interval.t_far, m + 1)
    where = 0.5 * (knots[:-1] + knots[1:]) if mode is Mode.CONSTANT else knots
    values = np.asarray(field(where), dtype=np.float64)
    bad = ~np.isfinite(values)
    if np.any(bad):
        raise ValueError(f"field is not finite at t={float(where[np.argmax(bad)])!r}")
    return RayDensityGrid(knots, values, mode)


# -- radiance ---------------------------------------------------------------


class RayRadiance:
    """Radiance along a ray with a thread-safe query counter.

    ``evaluator`` maps an array of ray positions of shape ``(n,)`` to either
    ``(n,)`` (scalar radiance) or ``(n, C)`` values in ``[0, 1]``.  An optional
    ``derivative`` with the same output shape gives ``dc/dt``; otherwise the
    estimators fall back to central differences.  Only calls through
    ``__call__`` are counted.
    """

    def __init__(self, evaluator: Callable, derivative: Callable | None = None, name: str = "radiance"):
        self._evaluator = evaluator
        self.derivative = derivative
        self.name = name
        self._count = 0
        self._lock = threading.Lock()

    @property
    def query_counter(self) -> int:
        return self._count

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        out = np.asarray(self._evaluator(t), dtype=np.float64)
        with self._lock:
            self._count += int(t.size)
        return out

    def evaluate_uncounted(self, t) -> np.ndarray:
        return np.asarray(self._evaluator(np.asarray(t, dtype=np.float64)), dtype=np.float64)

    def __repr__(self):
        return f"RayRadiance({self.name!r}, queries={self._count})"


def sinusoid_radiance(offset=0.5, amplitude=0.4, frequency=1.0, phase=0.0) -> RayRadiance:
    """Scalar radiance ``offset + amplitude * sin(2 pi f t + phase)``."""
    if offset - abs(amplitude) < 0 or offset + abs(amplitude) > 1:
        raise ValueError("sinusoid radiance must stay within [0, 1]")
    w = 2.0 * math.pi * frequency

    def c(t):
        return offset + amplitude * np.sin(w * t + phase)

    def dc(t):
        return amplitude * w * np.cos(w * t + phase)

    return RayRadiance(c, dc, name=f"sinusoid(o={offset}, a={amplitude}, f={frequency})")


def rgb_sinusoid_radiance(
    offsets=(0.5, 0.5, 0.5),
    amplitudes=(0.4, 0.3, 0.2),
    frequencies=(1.0, 2.0, 3.0),
    phases=(0.0, 1.0, 2.0),
) -> RayRadiance:
    """Three independent sinusoid channels, one per color."""
    o, a, f, p = (np.asarray(x, dtype=np.float64) for x in (offsets, amplitudes, frequencies, phases))
    if np.any(o - np.abs(a) < 0) or np.any(o + np.abs(a) > 1):
        raise ValueError("sinusoid radiance must stay within [0, 1]")
    w = 2.0 * np.pi * f

    def c(t):
        return o + a * np.sin(np.multiply.outer(t, w) + p)

    def dc(t):
        return a * w * np.cos(np.multiply.outer(t, w) + p)

    return RayRadiance(c, dc, name="rgb_sinusoid")


def constant_radiance(value) -> RayRadiance:
    value = np.asarray(value, dtype=np.float64)

    def c(t):
        return np.broadcast_to(value, np.shape(t) + value.shape).copy()

    def dc(t):
        return np.zeros(np.shape(t) + value.shape)

    return RayRadiance(c, dc, name=f"constant({value.tolist()})")


def tabulated_radiance(knots, values) -> RayRadiance:
    """Piecewise linear radiance through ``values`` (shape ``(n,)`` or ``(n, C)``)."""
    knots = np.asarray(knots, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    slopes = np.diff(values, axis=0) / np.diff(knots).reshape((-1,) + (1,) * (values.ndim - 1))

    def c(t):
        if values.ndim == 1:
            return np.interp(t, knots, values)
        return np.stack([np.interp(t, knots, values[:, j]) for j in range(values.shape[1])], axis=-1)

    def dc(t):
        idx = np.clip(np.searchsorted(knots, t, side="right") - 1, 0, knots.size - 2)
        return slopes[idx]

    return RayRadiance(c, dc, name="tabulated")
