"""Finite-difference checks of every analytic density gradient.

Each check case is a small random ray grid plus the fixed inputs of one
operation (optical depth targets, uniforms or a seed).  Cases are plain JSON
so a failing one can be written out and replayed exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimators import quadrature, reparam_mc, stratified_iw, uniform_mc
from .fields import Mode, RayDensityGrid, rgb_sinusoid_radiance
from .opacity import build_profile
from .sampler import (
    UniformScheme,
    invert_bisect,
    invert_constant,
    invert_linear,
    invert_nerf_cdf,
    rvs_sample,
)

__all__ = [
    "OPERATIONS",
    "GradCase",
    "random_case",
    "evaluate_case",
    "implicit_gap",
    "run_suite",
    "rel_error",
    "FD_STEP",
]

FD_STEP = 1e-6
# floor on |fd| in the relative error, so tiny gradients are compared absolutely
REL_FLOOR = 1e-5
# bracket width that makes bisection run all of its iterations
_TIGHT = 1e-300
_K = 4

OPERATIONS = (
    "invert_constant",
    "invert_linear",
    "invert_bisect",
    "invert_nerf_cdf",
    "rvs_sample",
    "reparam_mc",
    "stratified_iw",
    "uniform_mc",
    "quadrature",
)


@dataclass(frozen=True)
class GradCase:
    operation: str
    mode: str
    knots: list
    values: list
    inputs: list
    seed: int = 0
    step: float = FD_STEP

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "GradCase":
        return cls(d["operation"], d["mode"], list(d["knots"]), list(d["values"]), list(d["inputs"]), int(d.get("seed", 0)), float(d["step"]))

    def grid(self, values=None) -> RayDensityGrid:
        return RayDensityGrid(np.asarray(self.knots), np.asarray(self.values if values is None else values), Mode(self.mode))


def rel_error(analytic, fd) -> float:
    analytic, fd = np.asarray(analytic), np.asarray(fd)
    return float(np.max(np.abs(analytic - fd) / np.maximum(np.abs(fd), REL_FLOOR)))


def random_case(operation: str, rng: np.random.Generator, seed: int = 0) -> GradCase:
    """Random grid with 1 to 12 bins and densities in ``[0.1, 3]``."""
    if operation not in OPERATIONS:
        raise ValueError(f"unknown operation {operation!r}")
    if operation in ("invert_constant", "quadrature"):
        mode = Mode.CONSTANT
    elif operation == "invert_linear":
        mode = Mode.LINEAR
    else:
        mode = Mode.CONSTANT if rng.random() < 0.5 else Mode.LINEAR
    m = int(rng.integers(1, 13))
    t0 = float(rng.uniform(-1.0, 1.0))
    length = float(rng.uniform(0.5, 3.0))
    cuts = np.sort(rng.uniform(0.0, 1.0, m - 1))
    knots = t0 + length * np.concatenate([[0.0], cuts, [1.0]])
    if np.any(np.diff(knots) <= 1e-9):
        knots = np.linspace(t0, t0 + length, m + 1)
    P = m if mode is Mode.CONSTANT else m + 1
    values = rng.uniform(0.1, 3.0, P)
    profile = build_profile(RayDensityGrid(knots, values, mode))
    if operation in ("invert_constant", "invert_linear", "invert_bisect"):
        inputs = rng.uniform(0.0, profile.total_depth, _K)
    elif operation == "invert_nerf_cdf":
        inputs = rng.uniform(0.0, profile.total_opacity, _K)
    elif operation in ("rvs_sample", "reparam_mc"):
        inputs = rng.uniform(0.0, 1.0, _K)
    elif operation in ("stratified_iw", "uniform_mc"):
        inputs = np.array([float(_K)])
    else:
        inputs = np.array([0.0])
    return GradCase(operation, mode.value, knots.tolist(), values.tolist(), inputs.tolist(), int(rng.integers(0, 2**31)))


def _function(case: GradCase):
    """``values -> (output, analytic jacobian)`` for the case's operation."""
    x = np.asarray(case.inputs)
    radiance = rgb_sinusoid_radiance()
    op = case.operation

    def f(values, want_grad=True):
        profile = build_profile(case.grid(values))
        if op == "invert_constant":
            return invert_constant(profile, x)
        if op == "invert_linear":
            return invert_linear(profile, x)
        if op == "invert_bisect":
            return invert_bisect(profile, x, tol=_TIGHT)
        if op == "invert_nerf_cdf":
            return invert_nerf_cdf(profile, x, return_grad=True)
        if op == "rvs_sample":
            b = rvs_sample(profile, UniformScheme(k=x.size), "rvs", jacobian=want_grad, uniforms=x)
            return b.positions, b.jacobian
        if op == "reparam_mc":
            e = reparam_mc(profile, radiance, UniformScheme(k=x.size), "rvs", uniforms=x)
            return e.value, e.grad_density
        if op == "stratified_iw":
            e = stratified_iw(profile, radiance, int(x[0]), seed=case.seed)
            return e.value, e.grad_density
        if op == "uniform_mc":
            e = uniform_mc(profile, radiance, int(x[0]), seed=case.seed)
            return e.value, e.grad_density
        e = quadrature(case.grid(values), radiance)
        return e.value, e.grad_density

    return f


def evaluate_case(case: GradCase):
    """Analytic jacobian, central-difference jacobian and their relative error.

    Jacobians are returned with one column per density parameter.
    """
    f = _function(case)
    values = np.asarray(case.values, dtype=np.float64)
    _, analytic = f(values)
    analytic = np.atleast_2d(np.asarray(analytic))
    fd = np.empty_like(analytic)
    h = case.step
    for p in range(values.size):
        up, down = values.copy(), values.copy()
        up[p] += h
        down[p] -= h
        fd[:, p] = (np.atleast_1d(f(up, False)[0]) - np.atleast_1d(f(down, False)[0])) / (2.0 * h)
    return analytic, fd, rel_error(analytic, fd)


def implicit_gap(case: GradCase) -> float:
    """Closed-form versus implicit-function sample jacobian for ``case.inputs`` as uniforms."""
    profile = build_profile(case.grid())
    u = np.asarray(case.inputs)
    explicit = rvs_sample(profile, UniformScheme(k=u.size), "rvs", uniforms=u).jacobian
    implicit = rvs_sample(profile, UniformScheme(k=u.size), "bisect", uniforms=u, bisect_tol=_TIGHT).jacobian
    return rel_error(explicit, implicit)


def run_suite(cases: int = 200, seed: int = 0, operations=OPERATIONS):
    """Run ``cases`` random cases per operation plus the implicit comparison.

    Returns ``(errors, gaps, worst)``: the max error per operation, the max
    explicit/implicit gap per mode, and the worst case per key.
    """
    errors, gaps, worst = {}, {}, {}
    for oi, op in enumerate(operations):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(oi,)))
        best = (-1.0, None)
        for _ in range(cases):
            case = random_case(op, rng, seed)
            err = evaluate_case(case)[2]
            if err > best[0]:
                best = (err, case)
        errors[op], worst[f"max_rel_err.{op}"] = best
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(len(OPERATIONS),)))
    for mode in ("constant", "linear"):
        best = (-1.0, None)
        for _ in range(cases):
            case = random_case("rvs_sample", rng, seed)
            case = GradCase("implicit_gap", mode, case.knots, _resize(case.values, mode, len(case.knots)), case.inputs, case.seed)
            err = implicit_gap(case)
            if err > best[0]:
                best = (err, case)
        gaps[mode], worst[f"implicit_gap.{mode}"] = best
    return errors, gaps, worst


def _resize(values, mode, n_knots):
    n = n_knots - 1 if mode == "constant" else n_knots
    values = list(values)
    return (values + values[-1:])[:n]
