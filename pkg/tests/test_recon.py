import numpy as np
import pytest
from scipy import stats
from scipy.integrate import cumulative_trapezoid

from rvs import recon
from rvs.fields import Mode, RayInterval
from rvs.sampler import SamplingMode


def fit_problem(seed, mode):
    """A random known model, its expected color, and a perturbed start."""
    rng = np.random.default_rng(seed)
    truth = recon.TrainableRayModel.uniform(RayInterval(0.0, 1.0), 17, 1.0, mode=mode)
    truth.density_params[:] = recon.softplus_inverse(rng.uniform(0.2, 3.0, truth.density_params.size))
    truth.radiance_table[:] = rng.uniform(0.1, 0.9, truth.radiance_table.shape)
    start = recon.TrainableRayModel(
        truth.knots,
        truth.density_params + rng.normal(0.0, 0.6, truth.density_params.size),
        np.clip(truth.radiance_table + rng.normal(0.0, 0.25, truth.radiance_table.shape), 0.0, 1.0),
        mode,
    )
    return recon.render_expected(truth), start


# -- building blocks -------------------------------------------------------------


def test_softplus_round_trip_and_stability():
    y = np.array([1e-8, 1e-3, 0.5, 3.0, 50.0])
    np.testing.assert_allclose(recon.softplus(recon.softplus_inverse(y)), y, rtol=1e-10)
    assert np.isfinite(recon.softplus(np.array([-800.0, 800.0]))).all()


def test_adam_minimizes_quadratic():
    x = np.array([3.0, -2.0])
    opt = recon.Adam(0.1)
    for _ in range(500):
        opt.step({"x": x}, {"x": 2.0 * x})
    assert np.all(np.abs(x) < 1e-2)


def test_model_validation_and_reads():
    with pytest.raises(ValueError):
        recon.TrainableRayModel([0.0, 1.0], [0.0, 0.0])
    with pytest.raises(ValueError):
        recon.TrainableRayModel([0.0, 1.0], [0.0], np.zeros((3, 3)))
    with pytest.raises(ValueError):
        recon.TrainableRayModel([0.0, 1.0], [0.0], density_gain=0.0)
    m = recon.TrainableRayModel([0.0, 0.5, 1.0], [-50.0, 3.0], [[-1.0, 0.5, 2.0]] * 3)
    assert np.all(m.densities() >= 0)
    c = m.colors()
    assert c.min() >= 0 and c.max() <= 1


def test_projected_step_keeps_radiance_in_range():
    m = recon.TrainableRayModel.uniform(RayInterval(0, 1), 5, 1.0, color=(0.99, 0.01, 0.5), lr=0.5)
    for _ in range(5):
        m.apply_gradients(np.zeros(4), np.tile([-1.0, 1.0, 0.0], (5, 1)))
    assert m.radiance_table.min() >= 0 and m.radiance_table.max() <= 1
    np.testing.assert_array_equal(m.radiance_table[:, 0], 1.0)
    np.testing.assert_array_equal(m.radiance_table[:, 1], 0.0)
    assert m.step_count == 5


def test_render_expected_matches_integral():
    m = recon.TrainableRayModel.uniform(RayInterval(0, 1), 5, 1.0, mode="linear")
    m.density_params[:] = recon.softplus_inverse(np.array([0.5, 2.0, 4.0, 1.0, 0.2]))
    m.radiance_table[:] = np.linspace(0.1, 0.9, 15).reshape(5, 3)
    t = np.linspace(0, 1, 400_001)
    sig = np.interp(t, m.knots, m.densities())
    trans = np.exp(-cumulative_trapezoid(sig, t, initial=0.0))
    c = np.stack([np.interp(t, m.knots, m.colors()[:, j]) for j in range(3)], axis=1)
    ref = np.trapezoid((sig * trans)[:, None] * c, t, axis=0)
    np.testing.assert_allclose(recon.render_expected(m, sub=256), ref, atol=1e-6)


# -- single-ray fitting ---------------------------------------------------------------


@pytest.mark.parametrize("mode", ["constant", "linear"])
def test_fit_ray_recovers_known_model(mode):
    for seed in range(3):
        target, model = fit_problem(seed, Mode(mode))
        trace = recon.fit_ray(target, model, k=32, steps=500, loss="mse", seed=seed)
        blocks = trace.reshape(10, 50).mean(axis=1)
        # smoothed over windows of 50 steps the loss goes down: a strong
        # downward rank trend and a clear overall drop
        assert stats.kendalltau(np.arange(10), blocks).statistic <= -0.6
        assert blocks[-1] < blocks[0] / 4
        assert np.max(np.abs(recon.render_expected(model) - target)) < 1e-2


def test_fit_ray_two_sample_also_converges():
    for mode in ("constant", "linear"):
        target, model = fit_problem(7, Mode(mode))
        recon.fit_ray(target, model, k=32, steps=500, loss="two_sample", seed=7)
        assert np.max(np.abs(recon.render_expected(model) - target)) < 1e-2


def test_fit_ray_zero_density_black_target():
    m = recon.TrainableRayModel.uniform(RayInterval(0, 1), 9, 0.0)
    trace = recon.fit_ray(np.zeros(3), m, k=16, steps=200, seed=0)
    assert np.max(np.abs(trace)) < 1e-20
    assert np.max(m.densities()) < 1e-10


def test_fit_ray_semi_transparent_mse_and_two_sample():
    target = np.array([0.2, 0.35, 0.1])
    for loss in ("mse", "two_sample"):
        m = recon.TrainableRayModel.uniform(RayInterval(0, 1), 17, 0.3)
        recon.fit_ray(target, m, k=32, steps=800, lr=2e-2, loss=loss, seed=0)
        assert np.max(np.abs(recon.render_expected(m) - target)) < 2e-2


def test_fit_ray_divergence():
    m = recon.TrainableRayModel.uniform(RayInterval(0, 1), 9, 1.0)
    target = recon.render_expected(m)
    with pytest.raises(recon.DivergenceError) as err:
        recon.fit_ray(target, m, k=32, steps=200, lr=5.0, seed=0)
    assert err.value.loss > recon.DIVERGENCE_FACTOR * err.value.initial


def test_fit_ray_validation():
    m = recon.TrainableRayModel.uniform(RayInterval(0, 1), 3, 1.0)
    with pytest.raises(ValueError):
        recon.fit_ray(np.zeros(3), m, steps=0)
    with pytest.raises(ValueError):
        recon.fit_ray(np.zeros(3), m, loss="l1")
    bare = recon.TrainableRayModel.uniform(RayInterval(0, 1), 3, 1.0, with_radiance=False)
    with pytest.raises(ValueError):
        recon.fit_ray(np.zeros(3), bare)


def test_fit_ray_deterministic():
    traces = []
    for _ in range(2):
        target, model = fit_problem(3, Mode.LINEAR)
        traces.append(recon.fit_ray(target, model, k=8, steps=50, loss="two_sample", seed=4))
    assert traces[0].tobytes() == traces[1].tobytes()


# -- hierarchical toy -----------------------------------------------------------


@pytest.fixture
def scene():
    return recon.wall_recon_scene()


def random_toy(scene, seed=0, **kw):
    toy = recon.make_toy(scene, **kw)
    rng = np.random.default_rng(seed)
    toy.proposal.density_params += rng.normal(0, 1.0, toy.proposal.density_params.size)
    toy.fine.density_params += rng.normal(0, 0.1, toy.fine.density_params.size)
    toy.fine.radiance_table[:] = rng.uniform(0.1, 0.9, toy.fine.radiance_table.shape)
    return toy


def test_scene_validation():
    with pytest.raises(ValueError):
        recon.HierarchicalScene("bad", recon.wall_recon_scene().density, recon.wall_recon_scene().radiance, RayInterval(0, 3), 1.0, (0.5, 2.0))
    with pytest.raises(ValueError):
        recon.RayBatch([0.0], [0.5])


def test_toy_validation(scene):
    with pytest.raises(ValueError):
        recon.make_toy(scene, sampling="bisect")
    with pytest.raises(ValueError):
        recon.make_toy(scene, n_proposal=1)
    with pytest.raises(ValueError):
        recon.make_toy(scene, n_fine=0)


def test_ground_truth_matches_independent_integral(scene):
    rays = scene.eval_rays(6)
    got = recon.ground_truth_colors(scene, rays, m=10_000)
    t = np.linspace(0, scene.ray_length, 400_001)
    for r in range(6):
        x = rays.origins[r] + rays.directions[r] * t
        sig = scene.density(x)
        trans = np.exp(-cumulative_trapezoid(sig, t, initial=0.0))
        ref = np.trapezoid((sig * trans)[:, None] * scene.radiance.evaluate_uncounted(x), t, axis=0)
        np.testing.assert_allclose(got[r], ref, atol=1e-4)


@pytest.mark.parametrize("sampling", ["rvs", "nerf"])
@pytest.mark.parametrize("policy", ["SamplesOnly", "UnionWithGrid"])
def test_render_gradients_directional(scene, sampling, policy):
    toy = random_toy(scene, sampling=sampling, policy=policy)
    rays = scene.eval_rays(16)
    u = toy.draw_uniforms(16, np.random.default_rng(1))
    cot = np.random.default_rng(2).normal(size=(16, 3))
    res = recon.render_rays(toy, rays, u, cotangent=cot)

    def objective():
        return float(np.sum(cot * recon.render_rays(toy, rays, u).colors))

    delta = 1e-4
    rng = np.random.default_rng(3)
    for params, grad, scale in (
        (toy.proposal.density_params, res.proposal_grad * toy.proposal.density_scale(), 1.0),
        (toy.fine.density_params, res.fine_density_grad * toy.fine.density_scale(), 1.0),
        (toy.fine.radiance_table, res.fine_table_grad, 0.01),
    ):
        v = rng.normal(size=params.shape)
        base = params.copy()
        params[...] = base + scale * delta * v
        up = objective()
        params[...] = base - scale * delta * v
        dn = objective()
        params[...] = base
        fd = (up - dn) / (2 * scale * delta)
        predicted = float(np.sum(grad * v))
        assert abs(predicted - fd) <= 1e-3 * max(abs(fd), 1e-6)


def test_detached_samples_give_exactly_zero_proposal_gradient(scene):
    toy = random_toy(scene, detach_samples=True)
    rays = scene.eval_rays(16)
    res = recon.render_rays(toy, rays, toy.draw_uniforms(16, np.random.default_rng(0)), cotangent=np.ones((16, 3)))
    assert np.all(res.proposal_grad == 0.0)
    assert np.any(res.fine_density_grad != 0.0)
    before = toy.proposal.density_params.copy()
    fine_before = toy.fine.density_params.copy()
    recon.train_hierarchical(toy, scene, steps=20, pool_size=128, gt_m=2000)
    assert toy.proposal.density_params.tobytes() == before.tobytes()
    assert toy.fine.density_params.tobytes() != fine_before.tobytes()


def test_uniform_proposal_reduces_to_analytic_stratified_samples(scene):
    sigma0 = 0.7
    toy = recon.make_toy(scene, init_density=sigma0)
    rays = scene.eval_rays(8)
    u = toy.draw_uniforms(8, np.random.default_rng(0))
    res = recon.render_rays(toy, rays, u)
    L = scene.ray_length
    t = -np.log1p(-(-np.expm1(-sigma0 * L)) * u) / sigma0
    np.testing.assert_allclose(res.sample_positions, rays.world(t), atol=1e-12)
    # independent fine quadrature on the partition those samples induce
    dens, cols = toy.fine.densities(), toy.fine.colors()
    for r in range(8):
        e = t[r]
        mid = rays.origins[r] + rays.directions[r] * 0.5 * (e[:-1] + e[1:])
        sig = np.interp(mid, toy.fine.knots, dens)
        c = np.stack([np.interp(mid, toy.fine.knots, cols[:, j]) for j in range(3)], axis=1)
        depth = np.concatenate([[0.0], np.cumsum(sig * np.diff(e))])
        w = np.exp(-depth[:-1]) - np.exp(-depth[1:])
        np.testing.assert_allclose(res.colors[r], w @ c, atol=1e-14)


def test_union_policy_adds_grid_points(scene):
    toy = recon.make_toy(scene, policy="UnionWithGrid", n_proposal=8, n_fine=8)
    assert toy.n_points == 16
    rays = scene.eval_rays(4)
    res = recon.render_rays(toy, rays, toy.draw_uniforms(4, np.random.default_rng(0)))
    assert res.points.shape == (4, 16)
    grid = rays.world(np.broadcast_to(np.linspace(0, scene.ray_length, 8), (4, 8)))
    for r in range(4):
        assert np.all(np.isin(grid[r], res.points[r]))


def test_nerf_sampling_changes_sample_positions(scene):
    a = random_toy(scene, sampling="rvs")
    b = random_toy(scene, sampling="nerf")
    rays = scene.eval_rays(8)
    u = a.draw_uniforms(8, np.random.default_rng(0))
    pa = recon.render_rays(a, rays, u).sample_positions
    pb = recon.render_rays(b, rays, u).sample_positions
    assert np.max(np.abs(pa - pb)) > 1e-4
    assert b.sampling is SamplingMode.NERF


def test_training_deterministic(scene):
    traces = []
    for _ in range(2):
        toy = recon.make_toy(scene)
        traces.append(recon.train_hierarchical(toy, scene, steps=30, pool_size=128, gt_m=2000, seed=5))
    assert traces[0].tobytes() == traces[1].tobytes()


def test_wall_sample_fraction_counts_crossing_rays_only(scene):
    toy = recon.make_toy(scene)
    frac = recon.wall_sample_fraction(toy, scene)
    # uniform proposal of density 1: samples spread over the whole ray
    assert 0.0 < frac < 0.3


@pytest.mark.slow
def test_trained_proposal_localizes_wall_samples(scene):
    # 32 proposal knots per ray resolve the 0.02-wide wall; with the default
    # 8 the localization stays near 40%
    fracs = []
    for seed in (0, 1):
        toy = recon.make_toy(scene, n_proposal=32)
        recon.train_hierarchical(toy, scene, steps=4000, seed=seed)
        fracs.append(recon.wall_sample_fraction(toy, scene))
    assert np.mean(fracs) >= 0.8, fracs
