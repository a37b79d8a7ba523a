"""Differentiable inverse-opacity sampling along a ray.

Three ways of turning uniforms into ray positions are provided:

* ``"rvs"``: solve ``I(t) = -log(1 - y_f u)`` in closed form (linear equation
  for constant density bins, quadratic for linear bins);
* ``"nerf"``: interpolate ``t`` linearly against the opacity values at the
  knots, as the classic hierarchical NeRF sampler does;
* ``"bisect"``: bisection on ``I(t)`` with gradients from the implicit
  function theorem.

Every inverse also returns ``dt/dsigma`` for all density parameters.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .fields import Mode
from .opacity import (
    DEPTH_CAP,
    OpacityProfile,
    density_at,
    depth_at,
    depth_grad,
    locate_bin,
    prefix_grad_rows,
    stable_target,
    stable_target_ddepth,
    total_depth_grad,
)

__all__ = [
    "Scheme",
    "SamplingMode",
    "UniformScheme",
    "SampleBatch",
    "DegenerateGradientError",
    "draw_uniforms",
    "invert_constant",
    "invert_linear",
    "invert_nerf_cdf",
    "invert_bisect",
    "rvs_sample",
    "sample_positions",
    "sample_rays",
    "EPS_DENOM",
    "EPS_SQRT",
]

EPS_DENOM = 1e-10
EPS_SQRT = 1e-24
BISECT_MAX_ITER = 60
BISECT_REL_TOL = 1e-12
# implicit gradients need sigma(t) bounded away from zero
EPS_IMPLICIT = 1e-10


class Scheme(str, enum.Enum):
    IID = "iid"
    STRATIFIED = "stratified"


class SamplingMode(str, enum.Enum):
    RVS = "rvs"
    NERF = "nerf"
    BISECT = "bisect"


class DegenerateGradientError(ArithmeticError):
    """The implicit gradient is undefined because ``sigma(t)`` vanishes."""


@dataclass(frozen=True)
class UniformScheme:
    """How the ``k`` uniforms of one estimate are drawn.

    Stratified draws put ``v_i`` in ``[(i-1)/D, i/D]`` with ``D = k + 1`` by
    default (leaving ``[k/(k+1), 1]`` uncovered) or ``D = k`` when
    ``strata_denominator="k"``.
    """

    kind: Scheme = Scheme.IID
    k: int = 1
    rng_seed: int = 0
    strata_denominator: str = "k_plus_1"

    def __post_init__(self):
        object.__setattr__(self, "kind", Scheme(self.kind))
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.strata_denominator not in ("k_plus_1", "k"):
            raise ValueError("strata_denominator must be 'k_plus_1' or 'k'")


def draw_uniforms(scheme: UniformScheme, trials: int | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw ``k`` uniforms, or a ``(trials, k)`` block of independent sets."""
    if rng is None:
        rng = np.random.default_rng(scheme.rng_seed)
    shape = (scheme.k,) if trials is None else (trials, scheme.k)
    u = rng.random(shape)
    if scheme.kind is Scheme.IID:
        return u
    denom = scheme.k + 1 if scheme.strata_denominator == "k_plus_1" else scheme.k
    return (np.arange(scheme.k) + u) / denom


@dataclass(frozen=True, eq=False)
class SampleBatch:
    positions: np.ndarray
    uniforms: np.ndarray
    jacobian: np.ndarray | None
    mode_used: SamplingMode

    @property
    def k(self) -> int:
        return self.positions.size


# -- closed-form inverses, vectorized over R rays ---------------------------
#
# The cores take per-ray arrays of shape (R, .) and targets of shape (R, n).
# They return t (R, n), dt/dsigma at fixed target (R, n, P) and dt/dtarget.


def _check_y(profile: OpacityProfile, y: np.ndarray):
    if np.any(np.isnan(y)) or np.any(y < 0) or np.any(y > profile.total_depth):
        raise ValueError(f"optical depth target outside [0, {profile.total_depth}]")


def _locate_rows(edges: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Bin index per row; values on an edge go to the bin on its left."""
    if edges.shape[0] == 1:
        return locate_bin(edges[0], x[0], side="left")[None, :]
    idx = np.sum(edges[:, None, :] < x[:, :, None], axis=-1) - 1
    return np.clip(idx, 0, edges.shape[1] - 2)


def _take(a, i):
    return np.take_along_axis(a, i, axis=1)


def _scatter_index(i):
    R, n = i.shape
    return np.arange(R)[:, None], np.arange(n)[None, :], i


def _invert_constant(knots, sig, pre, y, with_grad):
    i = _locate_rows(pre, y)
    lo, hi = _take(knots, i), _take(knots, i + 1)
    den = _take(sig, i) + EPS_DENOM
    rest = y - _take(pre, i)
    t = np.clip(lo + rest / den, lo, hi)
    if not with_grad:
        return t, None, None
    dt_dy = 1.0 / den
    grad = -prefix_grad_rows(np.diff(knots, axis=1), Mode.CONSTANT, i) * dt_dy[..., None]
    grad[_scatter_index(i)] -= rest / (den * den)
    return t, grad, dt_dy


def _invert_linear(knots, sig, pre, y, with_grad):
    i = _locate_rows(pre, y)
    lo, hi = _take(knots, i), _take(knots, i + 1)
    width = hi - lo
    s_lo = _take(sig, i)
    a = 0.5 * (_take(sig, i + 1) - s_lo)
    b = s_lo * width
    c = np.maximum(y - _take(pre, i), 0.0) * width
    s = np.sqrt(np.maximum(b * b + 4.0 * a * c, 0.0) + EPS_SQRT)
    q = b + s
    t = np.clip(lo + 2.0 * c / q, lo, hi)
    if not with_grad:
        return t, None, None
    k = 2.0 * c / (q * q)
    d_dc = 2.0 / q - k * (2.0 * a / s)
    d_da = -k * (2.0 * c / s)
    d_db = -k * (1.0 + b / s)
    dt_dy = d_dc * width
    grad = -prefix_grad_rows(np.diff(knots, axis=1), Mode.LINEAR, i) * dt_dy[..., None]
    rr, nn, _ = _scatter_index(i)
    grad[rr, nn, i] += -0.5 * d_da + width * d_db
    grad[rr, nn, i + 1] += 0.5 * d_da
    return t, grad, dt_dy


def _invert_nerf(knots, pre, mode, rhs, with_grad):
    opac = -np.expm1(-pre)
    i = _locate_rows(opac, rhs)
    lo, hi = _take(knots, i), _take(knots, i + 1)
    f_lo, f_hi = _take(opac, i), _take(opac, i + 1)
    den = f_hi - f_lo
    flat = den <= 0
    safe = np.where(flat, 1.0, den)
    frac = np.where(flat, 0.0, (rhs - f_lo) / safe)
    t = np.clip(lo + (hi - lo) * frac, lo, hi)
    if not with_grad:
        return t, None, None
    width = hi - lo
    d_lo = np.where(flat, 0.0, width * (rhs - f_hi) / (safe * safe)) * (1.0 - f_lo)
    d_hi = np.where(flat, 0.0, -width * (rhs - f_lo) / (safe * safe)) * (1.0 - f_hi)
    widths = np.diff(knots, axis=1)
    grad = d_lo[..., None] * prefix_grad_rows(widths, mode, i) + d_hi[..., None] * prefix_grad_rows(widths, mode, i + 1)
    dt_drhs = np.where(flat, 0.0, width / safe)
    return t, grad, dt_drhs


def _invert_bisect(profile: OpacityProfile, y: np.ndarray, tol: float, with_grad: bool, dy_dsigma=None):
    lo = np.full(y.shape, profile.t_near)
    hi = np.full(y.shape, profile.t_far)
    for _ in range(BISECT_MAX_ITER):
        if np.all(hi - lo < tol):
            break
        mid = 0.5 * (lo + hi)
        below = depth_at(profile, mid) < y
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    t = 0.5 * (lo + hi)
    if not with_grad:
        return t, None, None
    sig_t = density_at(profile, t)
    if np.any(sig_t < EPS_IMPLICIT):
        bad = float(t[np.argmax(sig_t < EPS_IMPLICIT)])
        raise DegenerateGradientError(f"density vanishes at the solution t={bad!r}; implicit gradient undefined")
    num = -depth_grad(profile, t)
    if dy_dsigma is not None:
        num += np.asarray(dy_dsigma, dtype=np.float64)
    return t, num / sig_t[:, None], 1.0 / sig_t


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return x.ndim == 0, np.atleast_1d(x).ravel()


def _rows(profile: OpacityProfile):
    return profile.knots[None, :], profile.values[None, :], profile.prefix_integrals[None, :]


def _finish(scalar, t, grad):
    if scalar:
        return float(t[0]), grad[0]
    return t, grad


def invert_constant(profile: OpacityProfile, y):
    """Solve ``I_0(t) = y`` for a constant-mode profile.

    Returns ``(t, dt/dsigma)`` with ``y`` held fixed.  Accepts a scalar or an
    array of targets; arrays give ``t`` of shape ``(n,)`` and a gradient of
    shape ``(n, P)``.
    """
    if profile.mode is not Mode.CONSTANT:
        raise ValueError("invert_constant needs a constant-mode profile")
    scalar, yy = _as_batch(y)
    _check_y(profile, yy)
    t, grad, _ = _invert_constant(*_rows(profile), yy[None, :], True)
    return _finish(scalar, t[0], grad[0])


def invert_linear(profile: OpacityProfile, y):
    """Solve the per-bin quadratic ``I_1(t) = y`` for a linear-mode profile.

    The root is taken in the cancellation-free form ``2c / (b + sqrt(b^2 + 4ac))``
    with ``c = (y - I(t_i)) * width``, which stays finite as the bin's
    density slope ``a`` goes to zero.
    """
    if profile.mode is not Mode.LINEAR:
        raise ValueError("invert_linear needs a linear-mode profile")
    scalar, yy = _as_batch(y)
    _check_y(profile, yy)
    t, grad, _ = _invert_linear(*_rows(profile), yy[None, :], True)
    return _finish(scalar, t[0], grad[0])


def invert_nerf_cdf(profile: OpacityProfile, rhs, return_grad: bool = False):
    """Interpolate ``t`` against knot opacities at opacity level ``rhs``."""
    scalar, rr = _as_batch(rhs)
    if np.any(np.isnan(rr)) or np.any(rr < 0) or np.any(rr > profile.total_opacity):
        raise ValueError(f"opacity level outside [0, {profile.total_opacity}]")
    t, grad, _ = _invert_nerf(profile.knots[None, :], profile.prefix_integrals[None, :], profile.mode, rr[None, :], return_grad)
    if not return_grad:
        return float(t[0, 0]) if scalar else t[0]
    return _finish(scalar, t[0], grad[0])


def invert_bisect(profile: OpacityProfile, y, tol: float | None = None, dy_dsigma=None, return_grad: bool = True):
    """Bisection inverse of ``I(t) = y`` with implicit gradients.

    ``dt/dsigma = (dy/dsigma - dI(t)/dsigma) / sigma(t)``; ``dy_dsigma``
    defaults to zero (a fixed target).  With ``return_grad=False`` only ``t``
    is returned, which also works where the density at the solution is zero.
    """
    if tol is None:
        tol = BISECT_REL_TOL * (profile.t_far - profile.t_near)
    if tol <= 0:
        raise ValueError("tol must be positive")
    scalar, yy = _as_batch(y)
    _check_y(profile, yy)
    t, grad, _ = _invert_bisect(profile, yy, tol, return_grad, dy_dsigma)
    if not return_grad:
        return float(t[0]) if scalar else t
    return _finish(scalar, t, grad)


_CLOSED_FORM = {Mode.CONSTANT: _invert_constant, Mode.LINEAR: _invert_linear}


def _sample_rows(knots, sig, pre, mode, u, sampling, jacobian):
    """Closed-form or knot-interpolated samples for ``R`` rays at once.

    ``u`` has shape ``(R, k)``.  Rays with zero optical depth map the
    uniforms linearly onto the ray and get a zero jacobian.
    """
    R, P = sig.shape
    depth = pre[:, -1:]
    yf = -np.expm1(-np.minimum(depth, DEPTH_CAP))
    empty = depth[:, 0] == 0.0
    if sampling is SamplingMode.NERF:
        rhs = np.minimum(yf * u, yf)
        t, g, dt_dx = _invert_nerf(knots, pre, mode, rhs, jacobian)
        dx_dd = u * np.exp(-np.minimum(depth, DEPTH_CAP))
    else:
        y = stable_target(depth, u)
        t, g, dt_dx = _CLOSED_FORM[mode](knots, sig, pre, y, jacobian)
        dx_dd = stable_target_ddepth(depth, u)
    if np.any(empty):
        lin = knots[:, :1] + u * (knots[:, -1:] - knots[:, :1])
        t = np.where(empty[:, None], lin, t)
    if not jacobian:
        return t, None
    d_total = prefix_grad_rows(np.diff(knots, axis=1), mode, np.full((R, 1), knots.shape[1] - 1))[:, 0, :]
    g = g + (dt_dx * dx_dd)[..., None] * d_total[:, None, :]
    g[empty] = 0.0
    return t, g


def sample_rays(knots, values, mode: Mode | str, u, sampling: SamplingMode | str = SamplingMode.RVS, jacobian: bool = True):
    """Samples for a batch of rays, each with its own grid of the same size.

    ``knots`` is ``(R, m+1)``, ``values`` is ``(R, P)`` and ``u`` is ``(R, k)``.
    Returns positions ``(R, k)`` and, if requested, the jacobian
    ``dt/dsigma`` of shape ``(R, k, P)`` (total derivative, as in
    :func:`rvs_sample`).  Bisection is not available here.
    """
    mode = Mode(mode)
    sampling = SamplingMode(sampling)
    if sampling is SamplingMode.BISECT:
        raise ValueError("sample_rays supports 'rvs' and 'nerf' only")
    knots = np.asarray(knots, dtype=np.float64)
    sig = np.asarray(values, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    widths = np.diff(knots, axis=1)
    if mode is Mode.CONSTANT:
        bins = sig * widths
    else:
        bins = 0.5 * (sig[:, :-1] + sig[:, 1:]) * widths
    pre = np.concatenate([np.zeros((knots.shape[0], 1)), np.cumsum(bins, axis=1)], axis=1)
    return _sample_rows(knots, sig, pre, mode, u, sampling, jacobian)


def sample_positions(profile: OpacityProfile, u, sampling: SamplingMode | str = SamplingMode.RVS) -> np.ndarray:
    """Ray positions for uniforms of any shape, without gradients."""
    sampling = SamplingMode(sampling)
    u = np.asarray(u, dtype=np.float64)
    flat = u.ravel()[None, :]
    if sampling is SamplingMode.BISECT and profile.total_opacity > 0.0:
        y = stable_target(profile.total_depth, flat[0])
        tol = BISECT_REL_TOL * (profile.t_far - profile.t_near)
        t, _, _ = _invert_bisect(profile, y, tol, False)
        return t.reshape(u.shape)
    knots, sig, pre = _rows(profile)
    t, _ = _sample_rows(knots, sig, pre, profile.mode, flat, sampling if sampling is SamplingMode.NERF else SamplingMode.RVS, False)
    return t.reshape(u.shape)


def rvs_sample(
    profile: OpacityProfile,
    scheme: UniformScheme,
    sampling: SamplingMode | str = SamplingMode.RVS,
    jacobian: bool = True,
    uniforms=None,
    bisect_tol: float | None = None,
) -> SampleBatch:
    """Draw ``k`` ray samples ``F^{-1}(y_f u_i)`` and their jacobian.

    The jacobian holds total derivatives ``dt_i/dsigma_p``: the direct term of
    the inverse plus the path through the target, whose value depends on the
    total optical depth.  A fully transparent ray maps uniforms linearly onto
    the ray and has a zero jacobian.  Pass ``uniforms`` to reuse a fixed set
    (common random numbers).  ``bisect_tol`` overrides the default bracket
    width for ``sampling="bisect"``.
    """
    sampling = SamplingMode(sampling)
    u = draw_uniforms(scheme) if uniforms is None else np.asarray(uniforms, dtype=np.float64).ravel()
    if sampling is not SamplingMode.BISECT or profile.total_opacity == 0.0:
        knots, sig, pre = _rows(profile)
        t, g = _sample_rows(knots, sig, pre, profile.mode, u[None, :], sampling, jacobian)
        return SampleBatch(t[0], u, None if g is None else g[0], sampling)
    y = stable_target(profile.total_depth, u)
    dy_dsigma = None
    if jacobian:
        dy_dsigma = stable_target_ddepth(profile.total_depth, u)[:, None] * total_depth_grad(profile)[None, :]
    tol = BISECT_REL_TOL * (profile.t_far - profile.t_near) if bisect_tol is None else bisect_tol
    t, g, _ = _invert_bisect(profile, y, tol, jacobian, dy_dsigma)
    return SampleBatch(t, u, g, sampling)
