"""Expected-radiance estimators along one ray, with density gradients.

Estimators return a :class:`RadianceEstimate` whose ``grad_density`` holds
``d value / d sigma_p`` for every density parameter of the ray's grid (one
row per color channel for RGB radiance).

The ``*_batch`` functions evaluate many independent trials at once without
gradients; the benchmark harness and the statistical tests use them.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .fields import Mode, RayDensityGrid, RayRadiance
from .opacity import (
    OpacityProfile,
    density_at,
    density_grad,
    depth_at,
    depth_grad,
    total_opacity_grad,
)
from .sampler import SampleBatch, SamplingMode, UniformScheme, rvs_sample, sample_positions

__all__ = [
    "EstimatorKind",
    "RadianceEstimate",
    "quadrature_weights",
    "quadrature",
    "plain_mc",
    "reparam_mc",
    "stratified_iw",
    "uniform_mc",
    "two_sample_loss",
    "reparam_mc_batch",
    "importance_weighted_batch",
    "radiance_derivative",
    "H_C_REL",
]

# central-difference step for dc/dt, relative to the ray length
H_C_REL = 1e-5


class EstimatorKind(str, enum.Enum):
    QUADRATURE = "Quadrature"
    PLAIN_MC = "PlainMC"
    REPARAM_MC = "ReparamMC"
    STRATIFIED_IW = "StratifiedIW"
    UNIFORM_MC = "PlainUniformMC"


@dataclass(frozen=True, eq=False)
class RadianceEstimate:
    value: np.ndarray
    grad_density: np.ndarray | None
    radiance_queries: int
    estimator_kind: EstimatorKind
    # where radiance was queried and the weight of each query in ``value``
    positions: np.ndarray | None = None
    weights: np.ndarray | None = None


def radiance_derivative(radiance: RayRadiance, t: np.ndarray, t_near: float, t_far: float) -> np.ndarray:
    """``dc/dt`` from the radiance's own derivative, else central differences.

    Near the ray ends the stencil is clipped to the interval (one-sided).
    """
    if radiance.derivative is not None:
        return np.asarray(radiance.derivative(t), dtype=np.float64)
    h = H_C_REL * (t_far - t_near)
    hi = np.minimum(t + h, t_far)
    lo = np.maximum(t - h, t_near)
    diff = radiance.evaluate_uncounted(hi) - radiance.evaluate_uncounted(lo)
    span = hi - lo
    return diff / (span if diff.ndim == span.ndim else span[..., None])


# -- quadrature ---------------------------------------------------------------


def quadrature_weights(grid: RayDensityGrid) -> np.ndarray:
    """Weights ``(1 - exp(-sigma_i delta_i)) exp(-sum_{j<i} sigma_j delta_j)``.

    Per-bin depths are taken as differences of the prefix sums so that the
    weights telescope to ``1 - exp(-total depth)`` in floating point as well.
    """
    if grid.mode is not Mode.CONSTANT:
        raise ValueError("quadrature needs a constant-mode grid")
    prefix = np.concatenate([[0.0], np.cumsum(grid.values * grid.widths)])
    return -np.expm1(-np.diff(prefix)) * np.exp(-prefix[:-1])


def quadrature(grid: RayDensityGrid, radiance: RayRadiance) -> RadianceEstimate:
    """Classic emission-absorption quadrature with radiance at bin midpoints."""
    w = quadrature_weights(grid)
    t_hat = grid.midpoints
    c = radiance(t_hat)
    value = np.tensordot(w, c, axes=(0, 0))
    widths = grid.widths
    prefix = np.concatenate([[0.0], np.cumsum(grid.values * widths)])
    trans_next = np.exp(-prefix[1:])
    wc = w[:, None] * c[:, None] if c.ndim == 1 else w[:, None] * c
    after = np.cumsum(wc[::-1], axis=0)[::-1]
    after = np.concatenate([after[1:], np.zeros_like(after[:1])])  # sum over i > j
    cc = c[:, None] if c.ndim == 1 else c
    grad = widths[:, None] * (trans_next[:, None] * cc - after)
    grad = grad[:, 0] if c.ndim == 1 else grad.T
    return RadianceEstimate(value, grad, int(t_hat.size), EstimatorKind.QUADRATURE, t_hat, w)


# -- Monte Carlo along the opacity -------------------------------------------


def plain_mc(profile: OpacityProfile, radiance: RayRadiance, samples: SampleBatch) -> RadianceEstimate:
    """``(y_f / k) sum_i c(t_i)`` for samples drawn from the ray distribution.

    The gradient treats both ``y_f`` and the sample positions as functions of
    the densities; it is ``None`` if the batch carries no jacobian.
    """
    return _mc_estimate(profile, radiance, samples, EstimatorKind.PLAIN_MC)


def _mc_estimate(profile, radiance, samples, kind):
    k = samples.k
    if k == 0:
        raise ValueError("need at least one sample")
    t = samples.positions
    c = radiance(t)
    yf = profile.total_opacity
    mean_c = c.mean(axis=0)
    value = yf * mean_c
    grad = None
    if samples.jacobian is not None:
        dyf = total_opacity_grad(profile)
        dc = radiance_derivative(radiance, t, profile.t_near, profile.t_far)
        if c.ndim == 1:
            grad = mean_c * dyf + (yf / k) * (dc @ samples.jacobian)
        else:
            grad = np.outer(mean_c, dyf) + (yf / k) * (dc.T @ samples.jacobian)
    return RadianceEstimate(value, grad, k, kind, t, np.full(k, yf / k))


def reparam_mc(
    profile: OpacityProfile,
    radiance: RayRadiance,
    scheme: UniformScheme,
    sampling: SamplingMode | str = SamplingMode.RVS,
    uniforms=None,
) -> RadianceEstimate:
    """Reparameterized estimate ``(y_f/k) sum_i c(F^{-1}(y_f u_i))``."""
    samples = rvs_sample(profile, scheme, sampling, jacobian=True, uniforms=uniforms)
    return _mc_estimate(profile, radiance, samples, EstimatorKind.REPARAM_MC)


def reparam_mc_batch(
    profile: OpacityProfile,
    radiance: RayRadiance,
    u: np.ndarray,
    sampling: SamplingMode | str = SamplingMode.RVS,
) -> np.ndarray:
    """Values of the reparameterized estimate for a ``(trials, k)`` block of uniforms."""
    t = sample_positions(profile, u, sampling)
    c = radiance(t.ravel())
    c = c.reshape(t.shape) if c.ndim == 1 else c.reshape(t.shape + c.shape[1:])
    return profile.total_opacity * c.mean(axis=1)


# -- importance-weighted baselines with uniform ray samples ------------------


def importance_weighted_batch(profile: OpacityProfile, radiance: RayRadiance, tau: np.ndarray, widths) -> np.ndarray:
    """``sum_i widths_i c(tau_i) dF/dt(tau_i)`` for each row of ``tau``."""
    flat = tau.ravel()
    rate = np.exp(-depth_at(profile, flat)) * density_at(profile, flat)
    c = radiance(flat)
    wts = (np.broadcast_to(widths, tau.shape).ravel() * rate).reshape(tau.shape)
    if c.ndim == 1:
        return np.sum(wts * c.reshape(tau.shape), axis=1)
    return np.einsum("tk,tkc->tc", wts, c.reshape(tau.shape + (-1,)))


def _iw_positions(profile, k, rng, stratified):
    t0, t1 = profile.t_near, profile.t_far
    if stratified:
        edges = np.linspace(t0, t1, k + 1)
        width = np.diff(edges)
        return edges[:-1] + width * rng.random(k), width
    return t0 + (t1 - t0) * rng.random(k), np.full(k, (t1 - t0) / k)


def _iw_estimate(profile, radiance, k, seed, stratified, kind):
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tau, width = _iw_positions(profile, k, rng, stratified)
    trans = np.exp(-depth_at(profile, tau))
    sig = density_at(profile, tau)
    wts = width * trans * sig
    c = radiance(tau)
    value = np.tensordot(wts, c, axes=(0, 0))
    # d(trans * sigma) = trans * (d sigma - sigma * dI)
    d_rate = trans[:, None] * (density_grad(profile, tau) - sig[:, None] * depth_grad(profile, tau))
    d_rate *= width[:, None]
    grad = c @ d_rate if c.ndim == 1 else c.T @ d_rate
    return RadianceEstimate(value, grad, k, kind, tau, wts)


def stratified_iw(profile: OpacityProfile, radiance: RayRadiance, k: int, seed=None) -> RadianceEstimate:
    """Importance-weighted estimate with one uniform sample per ray bin.

    ``sum_i (t_i - t_{i-1}) c(tau_i) dF/dt(tau_i)`` over a uniform ``k``-bin
    grid, with ``dF/dt = (1 - F) sigma`` from the piecewise approximation.
    """
    return _iw_estimate(profile, radiance, k, seed, True, EstimatorKind.STRATIFIED_IW)


def uniform_mc(profile: OpacityProfile, radiance: RayRadiance, k: int, seed=None) -> RadianceEstimate:
    """Same weighting as :func:`stratified_iw` with i.i.d. uniform ray positions."""
    return _iw_estimate(profile, radiance, k, seed, False, EstimatorKind.UNIFORM_MC)


# -- losses -------------------------------------------------------------------


def two_sample_loss(est1: RadianceEstimate, est2: RadianceEstimate, target):
    """``sum_c (C1 - C_gt)(C2 - C_gt)`` and its density gradient.

    With independent estimates this is unbiased for the squared error of the
    expected color.
    """
    target = np.asarray(target, dtype=np.float64)
    r1 = np.asarray(est1.value) - target
    r2 = np.asarray(est2.value) - target
    loss = float(np.sum(r1 * r2))
    g1 = np.asarray(est1.grad_density)
    g2 = np.asarray(est2.grad_density)
    if r1.ndim == 0:
        grad = r2 * g1 + r1 * g2
    else:
        grad = r2 @ g1 + r1 @ g2
    return loss, grad
