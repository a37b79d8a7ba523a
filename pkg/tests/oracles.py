"""Reference computations written independently of the package internals.

These are deliberately naive: plain loops or direct formulas, with no shared
code paths with ``rvs``.
"""

import numpy as np

from rvs.fields import Mode, RayDensityGrid


def random_grid(rng, mode, m_lo=1, m_hi=16, dens_lo=0.05, dens_hi=4.0, zero_frac=0.0):
    """Random non-uniform grid on a random interval."""
    mode = Mode(mode)
    m = int(rng.integers(m_lo, m_hi + 1))
    t0 = rng.uniform(-2.0, 2.0)
    widths = rng.uniform(0.05, 1.0, m)
    knots = t0 + np.concatenate([[0.0], np.cumsum(widths)])
    n = m if mode is Mode.CONSTANT else m + 1
    values = rng.uniform(dens_lo, dens_hi, n)
    if zero_frac:
        values[rng.random(n) < zero_frac] = 0.0
    return RayDensityGrid(knots, values, mode)


def depth_oracle(knots, values, mode, t):
    """Optical depth from ``knots[0]`` to ``t`` by summing exact per-bin integrals."""
    knots = np.asarray(knots, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    out = np.zeros_like(t)
    for j in range(knots.size - 1):
        a, b = knots[j], knots[j + 1]
        s = np.clip(t - a, 0.0, b - a)
        if Mode(mode) is Mode.CONSTANT:
            out += values[j] * s
        else:
            slope = (values[j + 1] - values[j]) / (b - a)
            out += values[j] * s + 0.5 * slope * s * s
    return out


def central_fd(f, x, h):
    """Central-difference jacobian of ``f`` (array output) at ``x``; one column per input."""
    x = np.asarray(x, dtype=np.float64)
    f0 = np.atleast_1d(np.asarray(f(x), dtype=np.float64))
    jac = np.empty(f0.shape + (x.size,))
    for p in range(x.size):
        up, dn = x.copy(), x.copy()
        up[p] += h
        dn[p] -= h
        jac[..., p] = (np.atleast_1d(f(up)) - np.atleast_1d(f(dn))) / (2.0 * h)
    return jac


def rel_err(analytic, reference, floor=1e-5):
    analytic = np.asarray(analytic)
    reference = np.asarray(reference)
    return float(np.max(np.abs(analytic - reference) / np.maximum(np.abs(reference), floor)))


def midpoint_truth(field, radiance_fn, t_near, t_far, m):
    """Expected radiance against a piecewise constant density sampled at bin midpoints.

    Returns ``(value, knots, sigma)`` with ``value`` shaped like one radiance value; the same grid can then be used as the
    density profile of an estimator so that both sides share one density.
    """
    knots = np.linspace(t_near, t_far, m + 1)
    mids = 0.5 * (knots[:-1] + knots[1:])
    sigma = np.asarray(field(mids), dtype=np.float64)
    depth = np.concatenate([[0.0], np.cumsum(sigma * np.diff(knots))])
    trans = np.exp(-depth)
    w = trans[:-1] - trans[1:]
    return np.tensordot(w, np.asarray(radiance_fn(mids), dtype=np.float64), axes=1), knots, sigma


def random_mode(rng):
    return (Mode.CONSTANT, Mode.LINEAR)[int(rng.integers(2))]
