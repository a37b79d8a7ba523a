"""Variance study: estimator spread against sample count on fixed scenes.

Every (scene, estimator, k) cell gets its own random stream derived from the
study seed, so results do not depend on the number of workers or the order in
which cells finish.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .estimators import importance_weighted_batch, reparam_mc_batch
from .fields import (
    Mode,
    RayInterval,
    RayRadiance,
    ScalarField1D,
    discretize,
    foggy_field,
    sinusoid_radiance,
    wall_field,
)
from .opacity import OpacityProfile, build_profile
from .sampler import Scheme, UniformScheme, draw_uniforms

__all__ = [
    "Scene",
    "VarianceRow",
    "ESTIMATORS",
    "DEFAULT_KS",
    "default_scenes",
    "foggy_scene",
    "wall_scene",
    "estimator_trials",
    "variance_study",
]

ESTIMATORS = ("ReparamMC-iid", "ReparamMC-stratified", "StratifiedIW", "PlainUniformMC")
DEFAULT_KS = tuple(2**i for i in range(9))
# upper bound on positions evaluated at once inside one cell
_CHUNK = 1 << 20


@dataclass(frozen=True, eq=False)
class Scene:
    name: str
    field: ScalarField1D
    radiance: RayRadiance
    interval: RayInterval = RayInterval(0.0, 1.0)
    m: int = 2048

    def profile(self) -> OpacityProfile:
        return build_profile(discretize(self.field, self.interval, self.m, Mode.CONSTANT))


def foggy_scene(m: int = 2048) -> Scene:
    # near-flat radiance: the weighting of the uniform baselines, not the
    # color, is what separates the estimators in fog
    return Scene("Foggy", foggy_field(0.8), sinusoid_radiance(0.5, 0.0033, 1.0), m=m)


def wall_scene(m: int = 2048) -> Scene:
    return Scene("Wall", wall_field(), sinusoid_radiance(0.5, 0.45, 4.0), m=m)


def default_scenes(m: int = 2048) -> list[Scene]:
    return [foggy_scene(m), wall_scene(m)]


@dataclass(frozen=True)
class VarianceRow:
    field: str
    estimator: str
    scheme: str
    k: int
    trials: int
    mean: float
    variance: float
    stderr: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _scheme_of(estimator: str) -> str:
    return "iid" if estimator in ("ReparamMC-iid", "PlainUniformMC") else "stratified"


def estimator_trials(
    profile: OpacityProfile,
    radiance: RayRadiance,
    estimator: str,
    k: int,
    trials: int,
    rng: np.random.Generator,
    strata_denominator: str = "k",
) -> np.ndarray:
    """Independent values of one estimator; scalar radiance gives shape ``(trials,)``."""
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}; expected one of {ESTIMATORS}")
    per_chunk = max(1, _CHUNK // k)
    out = []
    for start in range(0, trials, per_chunk):
        n = min(per_chunk, trials - start)
        if estimator.startswith("ReparamMC"):
            scheme = UniformScheme(Scheme(_scheme_of(estimator)), k, strata_denominator=strata_denominator)
            u = draw_uniforms(scheme, trials=n, rng=rng)
            out.append(reparam_mc_batch(profile, radiance, u))
            continue
        t0, t1 = profile.t_near, profile.t_far
        if estimator == "StratifiedIW":
            edges = np.linspace(t0, t1, k + 1)
            widths = np.diff(edges)
            tau = edges[:-1] + widths * rng.random((n, k))
        else:
            tau = t0 + (t1 - t0) * rng.random((n, k))
            widths = np.full(k, (t1 - t0) / k)
        out.append(importance_weighted_batch(profile, radiance, tau, widths))
    return np.concatenate(out)


def _cell(args):
    scene_idx, est_idx, k_idx, scene, profile, estimator, k, trials, seed, denom = args
    ss = np.random.SeedSequence(seed, spawn_key=(scene_idx, est_idx, k_idx))
    vals = estimator_trials(profile, scene.radiance, estimator, k, trials, np.random.default_rng(ss), denom)
    var = float(np.var(vals, ddof=1)) if trials > 1 else float("nan")
    return VarianceRow(
        field=scene.name,
        estimator=estimator,
        scheme=_scheme_of(estimator),
        k=int(k),
        trials=int(trials),
        mean=float(np.mean(vals)),
        variance=var,
        stderr=float(np.sqrt(var / trials)) if trials > 1 else float("nan"),
    )


def variance_study(
    scenes: list[Scene] | None = None,
    ks=DEFAULT_KS,
    trials: int = 10_000,
    seed: int = 0,
    estimators=ESTIMATORS,
    strata_denominator: str = "k",
    workers: int = 1,
) -> list[VarianceRow]:
    """Empirical mean and variance of each estimator for each ``k``.

    Rows come back ordered by scene, then estimator, then ``k``.  Radiance
    must be scalar.
    """
    if trials < 2:
        raise ValueError("trials must be >= 2 to estimate a variance")
    if any(int(k) < 1 for k in ks):
        raise ValueError("every k must be >= 1")
    scenes = default_scenes() if scenes is None else scenes
    tasks = []
    for si, scene in enumerate(scenes):
        profile = scene.profile()
        for ei, est in enumerate(estimators):
            for ki, k in enumerate(ks):
                tasks.append((si, ei, ki, scene, profile, est, int(k), trials, seed, strata_denominator))
    if workers <= 1:
        return [_cell(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_cell, tasks))
