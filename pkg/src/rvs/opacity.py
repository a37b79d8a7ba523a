"""Optical depth integrals, the opacity function and the inverse-sampling target.

Optical depth ``I(t)`` is the integral of the piecewise density from
``t_near`` to ``t``: a sum of rectangles in constant mode and of trapezoids in
linear mode.  Opacity is ``F(t) = 1 - exp(-I(t))`` and the total opacity
``y_f = F(t_far)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import Mode, RayDensityGrid

__all__ = [
    "OpacityProfile",
    "build_profile",
    "eval_opacity",
    "depth_at",
    "depth_grad",
    "density_at",
    "density_grad",
    "prefix_grad",
    "prefix_grad_rows",
    "total_depth_grad",
    "total_opacity_grad",
    "stable_target",
    "stable_target_ddepth",
    "locate_bin",
    "TAU_SWITCH",
    "DEPTH_CAP",
]

# below this optical depth the logsumexp form has no significant digits left
TAU_SWITCH = 1e-8
# exp(-80) is far below double epsilon; y_f is computed from min(depth, DEPTH_CAP)
DEPTH_CAP = 80.0


@dataclass(frozen=True, eq=False)
class OpacityProfile:
    grid: RayDensityGrid
    prefix_integrals: np.ndarray
    total_depth: float
    total_opacity: float

    @property
    def mode(self) -> Mode:
        return self.grid.mode

    @property
    def knots(self) -> np.ndarray:
        return self.grid.knots

    @property
    def values(self) -> np.ndarray:
        return self.grid.values

    @property
    def n_params(self) -> int:
        return self.grid.n_params

    @property
    def t_near(self) -> float:
        return float(self.grid.knots[0])

    @property
    def t_far(self) -> float:
        return float(self.grid.knots[-1])


def build_profile(grid: RayDensityGrid) -> OpacityProfile:
    widths = grid.widths
    if grid.mode is Mode.CONSTANT:
        bins = grid.values * widths
    else:
        bins = 0.5 * (grid.values[:-1] + grid.values[1:]) * widths
    prefix = np.concatenate([[0.0], np.cumsum(bins)])
    prefix.setflags(write=False)
    depth = float(prefix[-1])
    return OpacityProfile(grid, prefix, depth, float(-np.expm1(-min(depth, DEPTH_CAP))))


def locate_bin(edges: np.ndarray, x, side: str = "right") -> np.ndarray:
    """Index ``i`` of the bin ``[edges[i], edges[i+1]]`` holding ``x``.

    ``side="left"`` sends values sitting exactly on an edge to the bin on the
    left of it.
    """
    idx = np.searchsorted(edges, x, side=side) - 1
    return np.clip(idx, 0, edges.size - 2)


def _check_t(profile: OpacityProfile, t: np.ndarray):
    if np.any(t < profile.t_near) or np.any(t > profile.t_far) or np.any(np.isnan(t)):
        raise ValueError(f"t outside ray interval [{profile.t_near}, {profile.t_far}]")


def depth_at(profile: OpacityProfile, t) -> np.ndarray:
    """Optical depth ``I(t)``, exact at knots and clamped to the bin's range."""
    t = np.asarray(t, dtype=np.float64)
    _check_t(profile, t)
    knots, sig, pre = profile.knots, profile.values, profile.prefix_integrals
    i = locate_bin(knots, t)
    dt = t - knots[i]
    if profile.mode is Mode.CONSTANT:
        inc = sig[i] * dt
    else:
        width = knots[i + 1] - knots[i]
        sig_t = sig[i] + (sig[i + 1] - sig[i]) * (dt / width)
        inc = 0.5 * dt * (sig[i] + sig_t)
    out = np.clip(pre[i] + inc, pre[i], pre[i + 1])
    return np.where(t >= knots[-1], pre[-1], out)


def eval_opacity(profile: OpacityProfile, t) -> np.ndarray:
    """Opacity ``F(t) = 1 - exp(-I(t))``; raises for ``t`` off the ray."""
    return -np.expm1(-depth_at(profile, t))


def density_at(profile: OpacityProfile, t) -> np.ndarray:
    """Piecewise density at ``t`` (right-continuous at interior knots)."""
    t = np.asarray(t, dtype=np.float64)
    knots, sig = profile.knots, profile.values
    i = locate_bin(knots, t)
    if profile.mode is Mode.CONSTANT:
        return sig[i]
    w = (t - knots[i]) / (knots[i + 1] - knots[i])
    return sig[i] * (1.0 - w) + sig[i + 1] * w


def density_grad(profile: OpacityProfile, t) -> np.ndarray:
    """``d sigma(t) / d values`` as an ``(n, P)`` array."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    knots = profile.knots
    i = locate_bin(knots, t)
    out = np.zeros((t.size, profile.n_params))
    rows = np.arange(t.size)
    if profile.mode is Mode.CONSTANT:
        out[rows, i] = 1.0
    else:
        w = (t - knots[i]) / (knots[i + 1] - knots[i])
        out[rows, i] = 1.0 - w
        out[rows, i + 1] += w
    return out


def prefix_grad_rows(widths: np.ndarray, mode: Mode, idx: np.ndarray) -> np.ndarray:
    """Batched ``d prefix[idx] / d values`` for ``R`` rays.

    ``widths`` has shape ``(R, m)`` and ``idx`` shape ``(R, n)``; the result
    has shape ``(R, n, P)``.
    """
    R, m = widths.shape
    idx = idx[:, :, None]
    if mode is Mode.CONSTANT:
        j = np.arange(m)
        return np.where(j < idx, widths[:, None, :], 0.0)
    j = np.arange(m + 1)
    half = 0.5 * widths
    zero = np.zeros((R, 1))
    left = np.concatenate([half, zero], axis=1)[:, None, :]  # knot j as left end of bin j
    right = np.concatenate([zero, half], axis=1)[:, None, :]  # knot j as right end of bin j-1
    return np.where(j < idx, left, 0.0) + np.where(j <= idx, right, 0.0)


def prefix_grad(profile: OpacityProfile, idx) -> np.ndarray:
    """``d prefix_integrals[idx] / d values`` as an ``(n, P)`` array."""
    idx = np.atleast_1d(np.asarray(idx))
    return prefix_grad_rows(profile.grid.widths[None, :], profile.mode, idx[None, :])[0]


def depth_grad(profile: OpacityProfile, t) -> np.ndarray:
    """``d I(t) / d values`` at fixed ``t`` as an ``(n, P)`` array."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    knots = profile.knots
    i = locate_bin(knots, t)
    out = prefix_grad(profile, i)
    dt = t - knots[i]
    rows = np.arange(t.size)
    if profile.mode is Mode.CONSTANT:
        out[rows, i] += dt
    else:
        width = knots[i + 1] - knots[i]
        # I = pre_i + s_i*dt + (s_{i+1} - s_i) * dt^2 / (2 width)
        q = 0.5 * dt * dt / width
        out[rows, i] += dt - q
        out[rows, i + 1] += q
    return out


def total_depth_grad(profile: OpacityProfile) -> np.ndarray:
    return prefix_grad(profile, [profile.grid.m])[0]


def total_opacity_grad(profile: OpacityProfile) -> np.ndarray:
    """``d y_f / d values``; the depth cap passes the gradient through."""
    return np.exp(-min(profile.total_depth, DEPTH_CAP)) * total_depth_grad(profile)


def _check_target_args(total_depth, u):
    if np.any(np.isnan(u)) or np.any(u < 0) or np.any(u > 1):
        raise ValueError("u must lie in [0, 1]")
    if np.any(np.isnan(total_depth)) or np.any(total_depth < 0):
        raise ValueError("total_depth must be nonnegative")


def stable_target(total_depth, u):
    """Optical depth ``y = -log(1 - y_f u)`` reached by a uniform ``u``.

    Evaluated as ``-logaddexp(log(1 - u), log(u) - depth)``, switching to the
    first-order value ``u * depth`` for depths below ``TAU_SWITCH``.
    """
    d = np.asarray(total_depth, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    _check_target_args(d, u)
    with np.errstate(divide="ignore"):
        lse = -np.logaddexp(np.log1p(-u), np.log(u) - d)
    y = np.where(d < TAU_SWITCH, u * d, lse)
    y = np.clip(y, 0.0, d)
    return y[()] if y.ndim == 0 else y


def stable_target_ddepth(total_depth, u):
    """``dy / d depth = u e^{-d} / (1 - y_f u)``, evaluated as ``exp(log u - d + y)``."""
    d = np.asarray(total_depth, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    y = stable_target(d, u)
    with np.errstate(divide="ignore"):
        g = np.exp(np.log(u) - d + y)
    g = np.where(d < TAU_SWITCH, u, g)
    return g[()] if g.ndim == 0 else g
