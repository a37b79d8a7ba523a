"""Small end-to-end optimization problems driven by reparameterized sampling.

Two settings are covered:

* :func:`fit_ray` fits the densities and colors of a single ray to a target
  color, using the reparameterized estimator (or the two-sample loss) as the
  rendering inside the loss.
* :class:`HierarchicalToy` is a 1D proposal/fine pipeline.  A coarse
  proposal density places fine points along each ray.  The fine model is
  rendered by quadrature on the partition those points induce.  The proposal
  has no loss of its own: it learns only through the derivative of the sample
  positions with respect to its densities.

Both models live on tables of knots with softplus-activated densities and
per-knot RGB radiance, updated with a hand-written Adam optimizer.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .estimators import quadrature, reparam_mc
from .fields import (
    Mode,
    RayDensityGrid,
    RayInterval,
    RayRadiance,
    ScalarField1D,
    tabulated_radiance,
)
from .opacity import build_profile, density_at
from .sampler import SamplingMode, Scheme, UniformScheme, draw_uniforms, sample_rays

__all__ = [
    "Adam",
    "TrainableRayModel",
    "DivergenceError",
    "fit_ray",
    "render_expected",
    "FinePointPolicy",
    "HierarchicalScene",
    "HierarchicalToy",
    "RenderResult",
    "RayBatch",
    "wall_sample_fraction",
    "wall_recon_scene",
    "bump_recon_scene",
    "ground_truth_colors",
    "make_toy",
    "render_rays",
    "hierarchical_step",
    "train_hierarchical",
    "evaluate_mse",
    "softplus",
    "softplus_inverse",
]

DIVERGENCE_FACTOR = 1e3
DIVERGENCE_FLOOR = 1e-8


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    """Pre-activation giving density ``y > 0``."""
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


class DivergenceError(RuntimeError):
    def __init__(self, step: int, loss: float, initial: float):
        super().__init__(
            f"training diverged at step {step}: loss {loss:.6g} exceeds "
            f"{DIVERGENCE_FACTOR:g} x initial loss {initial:.6g}"
        )
        self.step = step
        self.loss = loss
        self.initial = initial


class Adam:
    """Adam with bias correction; updates parameter arrays in place."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            g = grads[name]
            m, v = self.moments.get(name, (np.zeros_like(p), np.zeros_like(p)))
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self.moments[name] = (m, v)
            m_hat = m / (1.0 - b1**self.t)
            v_hat = v / (1.0 - b2**self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(eq=False)
class TrainableRayModel:
    """Density and RGB radiance tables on a shared set of knots.

    Densities are ``density_gain * softplus(density_params)``: one per bin in
    constant mode, one per knot in linear mode.  The gain sets how far one
    optimizer step can move a density.  ``radiance_table`` has one RGB row per knot
    and is clamped to ``[0, 1]`` whenever it is read.
    """

    knots: np.ndarray
    density_params: np.ndarray
    radiance_table: np.ndarray | None = None
    mode: Mode = Mode.CONSTANT
    lr: float = 5e-3
    density_gain: float = 1.0
    step_count: int = 0
    optimizer: Adam = field(init=False, repr=False)

    def __post_init__(self):
        self.knots = np.array(self.knots, dtype=np.float64)
        self.density_params = np.array(self.density_params, dtype=np.float64)
        self.mode = Mode(self.mode)
        if not self.density_gain > 0:
            raise ValueError("density_gain must be positive")
        expected = self.knots.size - 1 if self.mode is Mode.CONSTANT else self.knots.size
        if self.density_params.shape != (expected,):
            raise ValueError(f"{self.mode.value} model with {self.knots.size} knots needs {expected} density params")
        if self.radiance_table is not None:
            self.radiance_table = np.array(self.radiance_table, dtype=np.float64)
            if self.radiance_table.ndim != 2 or self.radiance_table.shape[0] != self.knots.size:
                raise ValueError("radiance_table must have one row per knot")
        self.optimizer = Adam(self.lr)

    @classmethod
    def uniform(
        cls,
        interval: RayInterval,
        n_knots: int,
        density: float,
        color=(0.5, 0.5, 0.5),
        mode=Mode.CONSTANT,
        lr=5e-3,
        with_radiance=True,
        density_gain=1.0,
    ):
        mode = Mode(mode)
        knots = np.linspace(interval.t_near, interval.t_far, n_knots)
        n = n_knots - 1 if mode is Mode.CONSTANT else n_knots
        params = np.full(n, float(softplus_inverse(density / density_gain)) if density > 0 else -30.0)
        table = np.tile(np.asarray(color, dtype=np.float64), (n_knots, 1)) if with_radiance else None
        return cls(knots, params, table, mode, lr, density_gain)

    def densities(self) -> np.ndarray:
        return self.density_gain * softplus(self.density_params)

    def density_scale(self) -> np.ndarray:
        """``d density / d density_params``."""
        return self.density_gain * expit(self.density_params)

    def colors(self) -> np.ndarray:
        return np.clip(self.radiance_table, 0.0, 1.0)

    def grid(self) -> RayDensityGrid:
        return RayDensityGrid(self.knots, self.densities(), self.mode)

    def radiance(self) -> RayRadiance:
        return tabulated_radiance(self.knots, self.colors())

    def apply_gradients(self, density_grad: np.ndarray, table_grad: np.ndarray | None = None):
        params = {"density": self.density_params}
        grads = {"density": density_grad * self.density_scale()}
        if self.radiance_table is not None and table_grad is not None:
            params["radiance"] = self.radiance_table
            grads["radiance"] = table_grad
        self.optimizer.step(params, grads)
        if self.radiance_table is not None:
            # projected step: the clamped read would otherwise give no gradient
            # back from outside [0, 1]
            np.clip(self.radiance_table, 0.0, 1.0, out=self.radiance_table)
        self.step_count += 1

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "step_count": self.step_count,
            "knots": self.knots.tolist(),
            "densities": self.densities().tolist(),
            "radiance": None if self.radiance_table is None else self.colors().tolist(),
        }


# -- hat-function interpolation on a uniform knot table ----------------------


def _hat(knots: np.ndarray, x: np.ndarray):
    """Left knot index and fractional position of ``x`` on uniform ``knots``."""
    h = knots[1] - knots[0]
    s = (x - knots[0]) / h
    i = np.clip(np.floor(s).astype(np.int64), 0, knots.size - 2)
    return i, s - i, h


def _interp(values: np.ndarray, i: np.ndarray, f: np.ndarray):
    lo, hi = values[i], values[i + 1]
    ff = f if values.ndim == 1 else f[..., None]
    return lo + (hi - lo) * ff


def _scatter(i: np.ndarray, f: np.ndarray, g: np.ndarray, size: int) -> np.ndarray:
    """Adjoint of :func:`_interp` for scalar tables."""
    i, f, g = i.ravel(), f.ravel(), g.ravel()
    return np.bincount(i, g * (1.0 - f), minlength=size) + np.bincount(i + 1, g * f, minlength=size)


def _table_grad(knots: np.ndarray, t: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``sum_i weights_i * d c(t_i) / d table`` for a piecewise-linear table.

    Works for non-uniform knots; ``weights`` has shape ``(n,)``.
    """
    i = np.clip(np.searchsorted(knots, t, side="right") - 1, 0, knots.size - 2)
    f = (t - knots[i]) / (knots[i + 1] - knots[i])
    return _scatter(i, f, weights, knots.size)


# -- single-ray fitting -----------------------------------------------------


def render_expected(model: TrainableRayModel, sub: int = 64) -> np.ndarray:
    """Expected color of the model's own ray distribution.

    Each bin is split into ``sub`` pieces of constant density, which makes
    the quadrature converge to the integral of radiance against the model's
    opacity.
    """
    profile = build_profile(model.grid())
    fine_knots = np.concatenate(
        [np.linspace(a, b, sub, endpoint=False) for a, b in zip(model.knots[:-1], model.knots[1:])] + [model.knots[-1:]]
    )
    mids = 0.5 * (fine_knots[:-1] + fine_knots[1:])
    grid = RayDensityGrid(fine_knots, density_at(profile, mids), Mode.CONSTANT)
    return np.asarray(quadrature(grid, model.radiance()).value)


def _estimate_with_table_grad(model, scheme, sampling, u):
    profile = build_profile(model.grid())
    est = reparam_mc(profile, model.radiance(), scheme, sampling, uniforms=u)
    k = est.positions.size
    base = _table_grad(model.knots, est.positions, np.full(k, profile.total_opacity / k))
    return est, base


def fit_ray(
    target,
    model: TrainableRayModel,
    k: int = 32,
    steps: int = 500,
    lr: float | None = None,
    loss: str = "mse",
    seed: int = 0,
    scheme: Scheme | str = Scheme.STRATIFIED,
    sampling: SamplingMode | str = SamplingMode.RVS,
    strata_denominator: str = "k",
) -> np.ndarray:
    """Fit ``model`` so that its rendered color matches ``target``.

    ``loss="mse"`` uses one reparameterized estimate per step;
    ``loss="two_sample"`` uses the product of two independent residuals,
    whose expectation is the squared error of the expected color.  Both are
    averaged over channels.  Returns the per-step loss.  Raises
    :class:`DivergenceError` if the loss exceeds ``1e3`` times the first one.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if loss not in ("mse", "two_sample"):
        raise ValueError(f"unknown loss {loss!r}")
    if model.radiance_table is None:
        raise ValueError("fit_ray needs a model with a radiance table")
    if lr is not None:
        model.optimizer.lr = lr
    target = np.asarray(target, dtype=np.float64)
    n_ch = target.size
    rng = np.random.default_rng(seed)
    uscheme = UniformScheme(Scheme(scheme), k, strata_denominator=strata_denominator)
    trace = np.empty(steps)
    initial = None
    for step in range(steps):
        u1 = draw_uniforms(uscheme, rng=rng)
        e1, b1 = _estimate_with_table_grad(model, uscheme, sampling, u1)
        r1 = e1.value - target
        if loss == "mse":
            value = float(np.mean(r1 * r1))
            g_c = 2.0 * r1 / n_ch
            g_density = g_c @ e1.grad_density
            g_table = np.outer(b1, g_c)
        else:
            u2 = draw_uniforms(uscheme, rng=rng)
            e2, b2 = _estimate_with_table_grad(model, uscheme, sampling, u2)
            r2 = e2.value - target
            value = float(np.mean(r1 * r2))
            g_density = (r2 @ e1.grad_density + r1 @ e2.grad_density) / n_ch
            g_table = (np.outer(b1, r2) + np.outer(b2, r1)) / n_ch
        trace[step] = value
        if initial is None:
            initial = max(abs(value), DIVERGENCE_FLOOR)
        if not np.isfinite(value) or abs(value) > DIVERGENCE_FACTOR * initial:
            raise DivergenceError(step, value, initial)
        model.apply_gradients(g_density, g_table)
    return trace


# -- hierarchical proposal / fine toy ----------------------------------------


class FinePointPolicy(str, enum.Enum):
    SAMPLES_ONLY = "SamplesOnly"
    UNION_WITH_GRID = "UnionWithGrid"


@dataclass(frozen=True, eq=False)
class RayBatch:
    """Rays of a 1D world: world position ``origins + directions * t``."""

    origins: np.ndarray
    directions: np.ndarray

    def __post_init__(self):
        o = np.atleast_1d(np.asarray(self.origins, dtype=np.float64))
        d = np.broadcast_to(np.asarray(self.directions, dtype=np.float64), o.shape).copy()
        if not np.all(np.abs(d) == 1.0):
            raise ValueError("directions must be +1 or -1")
        object.__setattr__(self, "origins", o)
        object.__setattr__(self, "directions", d)

    def __len__(self):
        return self.origins.size

    def __getitem__(self, idx) -> "RayBatch":
        return RayBatch(self.origins[idx], self.directions[idx])

    def world(self, t: np.ndarray) -> np.ndarray:
        """World positions for ray parameters ``t`` of shape ``(R, n)``."""
        return self.origins[:, None] + self.directions[:, None] * t


@dataclass(frozen=True, eq=False)
class HierarchicalScene:
    """World-space density and RGB radiance crossed by rays of fixed length.

    Ray origins are drawn from ``origin_range`` and each ray travels left or
    right with equal probability.  Opposite rays leaving the same point see
    different colors, so a model cannot explain the data by painting radiance
    on a uniform medium; it has to recover the geometry.
    """

    name: str
    density: ScalarField1D
    radiance: RayRadiance
    world: RayInterval
    ray_length: float
    origin_range: tuple[float, float]

    def __post_init__(self):
        lo, hi = self.origin_range
        L = self.ray_length
        if lo > hi or lo - L < self.world.t_near or hi + L > self.world.t_far:
            raise ValueError("rays in both directions must stay inside the world interval")

    def eval_rays(self, n: int = 64) -> RayBatch:
        """Evenly spaced origins, alternating directions."""
        return RayBatch(np.linspace(*self.origin_range, n), np.where(np.arange(n) % 2 == 0, 1.0, -1.0))

    def random_rays(self, rng: np.random.Generator, n: int = 64) -> RayBatch:
        o = rng.uniform(*self.origin_range, n)
        return RayBatch(o, np.where(rng.random(n) < 0.5, 1.0, -1.0))


def _world_rgb(offsets=(0.5, 0.5, 0.5), amplitudes=(0.4, 0.35, 0.3), frequencies=(0.5, 0.8, 1.1), phases=(0.0, 1.0, 2.0)):
    o, a, f, p = (np.asarray(x, dtype=np.float64) for x in (offsets, amplitudes, frequencies, phases))
    w = 2.0 * np.pi * f

    def c(x):
        return o + a * np.sin(np.multiply.outer(x, w) + p)

    def dc(x):
        return a * w * np.cos(np.multiply.outer(x, w) + p)

    return RayRadiance(c, dc, name="world_rgb")


def wall_recon_scene(wall_width: float = 0.02, depth: float = 6.0, fog: float = 0.1) -> HierarchicalScene:
    """Opaque Gaussian wall at world position 1.5 in light fog.

    The world is ``[0, 3]``; rays of length 1 start in ``[1, 2]``, so about
    half of them cross the wall and the rest only see fog.
    """
    amp = depth / (wall_width * np.sqrt(2.0 * np.pi))
    density = ScalarField1D(
        "Composite",
        {
            "components": [
                {"kind": "GaussianBump", "params": {"center": 1.5, "width": wall_width, "amplitude": amp}},
                {"kind": "ConstantFog", "params": {"level": fog}},
            ]
        },
    )
    return HierarchicalScene("Wall", density, _world_rgb(), RayInterval(0.0, 3.0), 1.0, (1.0, 2.0))


def bump_recon_scene() -> HierarchicalScene:
    """Two soft bumps of moderate depth; no surface dominates the color."""
    density = ScalarField1D(
        "Composite",
        {
            "components": [
                {"kind": "GaussianBump", "params": {"center": 1.3, "width": 0.05, "amplitude": 8.0}},
                {"kind": "GaussianBump", "params": {"center": 1.8, "width": 0.1, "amplitude": 5.0}},
                {"kind": "ConstantFog", "params": {"level": 0.2}},
            ]
        },
    )
    return HierarchicalScene("Bumps", density, _world_rgb(), RayInterval(0.0, 3.0), 1.0, (1.0, 2.0))


WALL_CENTER = 1.5


def ground_truth_colors(scene: HierarchicalScene, rays: RayBatch, m: int = 10_000) -> np.ndarray:
    """Quadrature colors with ``m`` midpoint bins per ray, shape ``(R, 3)``."""
    delta = scene.ray_length / m
    mids = (np.arange(m) + 0.5) * delta
    out = []
    for idx in np.array_split(np.arange(len(rays)), max(1, len(rays) // 64)):
        x = rays[idx].world(np.broadcast_to(mids, (idx.size, m)))
        pre = np.concatenate([np.zeros((idx.size, 1)), np.cumsum(scene.density(x) * delta, axis=1)], axis=1)
        w = -np.expm1(-np.diff(pre, axis=1)) * np.exp(-pre[:, :-1])
        c = scene.radiance.evaluate_uncounted(x)
        out.append(np.einsum("rb,rbc->rc", w, c))
    return np.concatenate(out)


@dataclass(eq=False)
class HierarchicalToy:
    """Proposal and fine models over world space, queried along rays.

    Each ray evaluates the proposal at ``n_proposal`` evenly spaced knots,
    forming a linear-mode grid from which ``n_fine`` samples are drawn.
    ``sampling="nerf"`` swaps the closed-form inverse for knot-opacity
    interpolation.  ``detach_samples`` drops the sample jacobian, which
    leaves the proposal with no gradient at all.
    """

    proposal: TrainableRayModel
    fine: TrainableRayModel
    n_proposal: int
    n_fine: int
    ray_length: float
    fine_point_policy: FinePointPolicy = FinePointPolicy.SAMPLES_ONLY
    sampling: SamplingMode = SamplingMode.RVS
    detach_samples: bool = False
    scheme: Scheme = Scheme.STRATIFIED

    def __post_init__(self):
        if self.n_proposal < 2 or self.n_fine < 1:
            raise ValueError("need n_proposal >= 2 knots and n_fine >= 1 samples")
        self.fine_point_policy = FinePointPolicy(self.fine_point_policy)
        self.sampling = SamplingMode(self.sampling)
        self.scheme = Scheme(self.scheme)
        if self.sampling is SamplingMode.BISECT:
            raise ValueError("the hierarchical toy samples with 'rvs' or 'nerf'")
        if self.proposal.mode is not Mode.LINEAR or self.fine.mode is not Mode.LINEAR:
            raise ValueError("proposal and fine models interpolate densities between knots (linear mode)")
        if self.fine.radiance_table is None:
            raise ValueError("the fine model needs a radiance table")
        for model in (self.proposal, self.fine):
            if not np.allclose(np.diff(model.knots), model.knots[1] - model.knots[0]):
                raise ValueError("world tables need evenly spaced knots")

    @property
    def n_points(self) -> int:
        extra = self.n_proposal if self.fine_point_policy is FinePointPolicy.UNION_WITH_GRID else 0
        return self.n_fine + extra

    def draw_uniforms(self, n_rays: int, rng: np.random.Generator) -> np.ndarray:
        return draw_uniforms(UniformScheme(self.scheme, self.n_fine, strata_denominator="k"), trials=n_rays, rng=rng)


def make_toy(
    scene: HierarchicalScene,
    n_proposal: int = 8,
    n_fine: int = 8,
    proposal_knots: int = 65,
    fine_knots: int = 257,
    sampling: SamplingMode | str = SamplingMode.RVS,
    policy: FinePointPolicy | str = FinePointPolicy.SAMPLES_ONLY,
    detach_samples: bool = False,
    proposal_lr: float = 5e-2,
    fine_lr: float = 2e-2,
    init_density: float = 1.0,
    proposal_gain: float = 1.0,
    fine_gain: float = 20.0,
) -> HierarchicalToy:
    """Toy with a coarse proposal and few fine samples.

    Both models start from uniform density ``init_density`` over the scene's
    world interval and mid-gray radiance.  The fine model's gain lets it reach
    wall-like densities of order 100 within a few thousand steps.
    """
    proposal = TrainableRayModel.uniform(
        scene.world, proposal_knots, init_density, mode=Mode.LINEAR, lr=proposal_lr, with_radiance=False, density_gain=proposal_gain
    )
    fine = TrainableRayModel.uniform(scene.world, fine_knots, init_density, mode=Mode.LINEAR, lr=fine_lr, density_gain=fine_gain)
    return HierarchicalToy(proposal, fine, n_proposal, n_fine, scene.ray_length, policy, sampling, detach_samples)


@dataclass(frozen=True, eq=False)
class RenderResult:
    colors: np.ndarray  # (R, 3)
    points: np.ndarray  # (R, n) world positions of the fine points, sorted along each ray
    sample_positions: np.ndarray  # (R, n_fine) world positions drawn from the proposal
    proposal_grad: np.ndarray | None = None  # d <cotangent, colors> / d proposal.density_params
    fine_density_grad: np.ndarray | None = None
    fine_table_grad: np.ndarray | None = None


def render_rays(toy: HierarchicalToy, rays: RayBatch, u, cotangent=None) -> RenderResult:
    """Render rays through the proposal/fine pipeline.

    ``u`` holds ``(R, n_fine)`` uniforms.  With ``cotangent`` of shape
    ``(R, 3)`` the gradients of ``sum(cotangent * colors)`` with respect to the
    model parameters are returned as well.
    """
    R = len(rays)
    Np = toy.n_proposal
    knots = np.broadcast_to(np.linspace(0.0, toy.ray_length, Np), (R, Np)).copy()
    dirs = rays.directions[:, None]

    # proposal grid along each ray
    prop = toy.proposal
    pi, pf, _ = _hat(prop.knots, rays.world(knots))
    sig_p = _interp(prop.densities(), pi, pf)
    want_grad = cotangent is not None
    t, J = sample_rays(knots, sig_p, Mode.LINEAR, u, toy.sampling, jacobian=want_grad and not toy.detach_samples)
    if want_grad and J is None:
        J = np.zeros(t.shape + (Np,))
    n_s = t.shape[1]
    t_all = np.concatenate([t, knots], axis=1) if toy.fine_point_policy is FinePointPolicy.UNION_WITH_GRID else t
    order = np.argsort(t_all, axis=1, kind="stable")
    e = np.take_along_axis(t_all, order, axis=1)

    # fine quadrature on the induced partition
    fine = toy.fine
    delta = np.diff(e, axis=1)
    mid = 0.5 * (e[:, :-1] + e[:, 1:])
    fi, ff, fh = _hat(fine.knots, rays.world(mid))
    dens = fine.densities()
    cols = fine.colors()
    sig = _interp(dens, fi, ff)
    c = _interp(cols, fi, ff)
    pre = np.concatenate([np.zeros((R, 1)), np.cumsum(sig * delta, axis=1)], axis=1)
    w = -np.expm1(-np.diff(pre, axis=1)) * np.exp(-pre[:, :-1])
    colors = np.einsum("rb,rbc->rc", w, c)
    samples_world = rays.world(t)
    if not want_grad:
        return RenderResult(colors, rays.world(e), samples_world)

    cot = np.asarray(cotangent, dtype=np.float64)
    s = np.einsum("rc,rbc->rb", cot, c)
    after = np.cumsum((w * s)[:, ::-1], axis=1)[:, ::-1]
    after = np.concatenate([after[:, 1:], np.zeros((R, 1))], axis=1)
    G = np.exp(-pre[:, 1:]) * s - after  # d/d(sigma_b delta_b)
    g_sig = delta * G
    g_c = w[:, :, None] * cot[:, None, :]
    # midpoint values move with the ray parameter at rate direction * slope
    sig_slope = dirs * (dens[fi + 1] - dens[fi]) / fh
    c_slope = dirs[..., None] * (cols[fi + 1] - cols[fi]) / fh
    g_mid = g_sig * sig_slope + np.einsum("rbc,rbc->rb", g_c, c_slope)
    g_delta = sig * G
    g_e = np.zeros_like(e)
    g_e[:, :-1] += 0.5 * g_mid - g_delta
    g_e[:, 1:] += 0.5 * g_mid + g_delta

    fine_density_grad = _scatter(fi, ff, g_sig, dens.size)
    fine_table_grad = np.stack([_scatter(fi, ff, g_c[..., j], dens.size) for j in range(cols.shape[1])], axis=1)

    g_all = np.empty_like(g_e)
    np.put_along_axis(g_all, order, g_e, axis=1)
    g_sig_p = np.einsum("rk,rkp->rp", g_all[:, :n_s], J)
    proposal_grad = _scatter(pi, pf, g_sig_p, prop.knots.size)
    return RenderResult(colors, rays.world(e), samples_world, proposal_grad, fine_density_grad, fine_table_grad)


def hierarchical_step(toy: HierarchicalToy, rays: RayBatch, targets, rng: np.random.Generator) -> float:
    """One Adam step on the batch MSE; returns the loss before the update."""
    targets = np.asarray(targets, dtype=np.float64)
    u = toy.draw_uniforms(len(rays), rng)
    colors = render_rays(toy, rays, u).colors
    resid = colors - targets
    loss = float(np.mean(resid * resid))
    res = render_rays(toy, rays, u, cotangent=2.0 * resid / resid.size)
    toy.fine.apply_gradients(res.fine_density_grad, res.fine_table_grad)
    toy.proposal.apply_gradients(res.proposal_grad)
    return loss


def train_hierarchical(
    toy: HierarchicalToy,
    scene: HierarchicalScene,
    steps: int = 2000,
    batch: int = 64,
    seed: int = 0,
    pool_size: int = 1024,
    gt_m: int = 10_000,
    lr_decay: float = 1.0,
) -> np.ndarray:
    """Train on random batches of rays; returns the per-step loss.

    Rays come from a pool of ``pool_size`` random rays whose ground-truth
    colors are computed once up front.  With ``lr_decay < 1`` both learning
    rates decay exponentially to that fraction of their initial value.  Raises :class:`DivergenceError` when
    the loss exceeds ``1e3`` times the first step's loss.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(seed)
    pool = scene.random_rays(rng, pool_size)
    pool_targets = ground_truth_colors(scene, pool, gt_m)
    trace = np.empty(steps)
    initial = None
    for step in range(steps):
        scale = lr_decay ** (step / steps)
        toy.proposal.optimizer.lr = toy.proposal.lr * scale
        toy.fine.optimizer.lr = toy.fine.lr * scale
        pick = rng.integers(0, pool_size, batch)
        loss = hierarchical_step(toy, pool[pick], pool_targets[pick], rng)
        trace[step] = loss
        if initial is None:
            initial = max(loss, DIVERGENCE_FLOOR)
        if not np.isfinite(loss) or loss > DIVERGENCE_FACTOR * initial:
            raise DivergenceError(step, loss, initial)
    return trace


def evaluate_mse(toy: HierarchicalToy, scene: HierarchicalScene, n_rays: int = 64, passes: int = 8, seed: int = 12345, gt_m: int = 10_000) -> float:
    """Mean squared color error over evenly spaced rays and fresh samples."""
    rng = np.random.default_rng(seed)
    rays = scene.eval_rays(n_rays)
    targets = ground_truth_colors(scene, rays, gt_m)
    errs = []
    for _ in range(passes):
        colors = render_rays(toy, rays, toy.draw_uniforms(n_rays, rng)).colors
        errs.append(np.mean((colors - targets) ** 2))
    return float(np.mean(errs))


def wall_sample_fraction(toy: HierarchicalToy, scene: HierarchicalScene, center: float = WALL_CENTER, radius: float = 0.06, n_rays: int = 64, seed: int = 1) -> float:
    """Share of proposal samples within ``radius`` of ``center``, over rays that cross it."""
    rays = scene.eval_rays(n_rays)
    far = rays.origins + rays.directions * scene.ray_length
    crossing = (np.minimum(rays.origins, far) < center) & (np.maximum(rays.origins, far) > center)
    rays = rays[crossing]
    res = render_rays(toy, rays, toy.draw_uniforms(len(rays), np.random.default_rng(seed)))
    return float(np.mean(np.abs(res.sample_positions - center) <= radius))
