"""Reparameterized volume sampling along rays.

Differentiable inverse-transform sampling from piecewise density grids,
Monte Carlo estimators of expected ray radiance, and the harness that checks
their bias, variance and gradients.
"""

from .estimators import (
    EstimatorKind,
    RadianceEstimate,
    plain_mc,
    quadrature,
    quadrature_weights,
    reparam_mc,
    stratified_iw,
    two_sample_loss,
    uniform_mc,
)
from .fields import (
    Mode,
    RayDensityGrid,
    RayInterval,
    RayRadiance,
    ScalarField1D,
    constant_radiance,
    discretize,
    field_from_dict,
    foggy_field,
    rgb_sinusoid_radiance,
    sinusoid_radiance,
    tabulated_radiance,
    wall_field,
)
from .opacity import OpacityProfile, build_profile, eval_opacity, stable_target
from .sampler import (
    SamplingMode,
    Scheme,
    UniformScheme,
    invert_bisect,
    invert_constant,
    invert_linear,
    invert_nerf_cdf,
    rvs_sample,
    sample_rays,
)

__version__ = "0.1.0"

__all__ = [
    "EstimatorKind",
    "RadianceEstimate",
    "plain_mc",
    "quadrature",
    "quadrature_weights",
    "reparam_mc",
    "stratified_iw",
    "two_sample_loss",
    "uniform_mc",
    "Mode",
    "RayDensityGrid",
    "RayInterval",
    "RayRadiance",
    "ScalarField1D",
    "constant_radiance",
    "discretize",
    "field_from_dict",
    "foggy_field",
    "rgb_sinusoid_radiance",
    "sinusoid_radiance",
    "tabulated_radiance",
    "wall_field",
    "OpacityProfile",
    "build_profile",
    "eval_opacity",
    "stable_target",
    "SamplingMode",
    "Scheme",
    "UniformScheme",
    "invert_bisect",
    "invert_constant",
    "invert_linear",
    "invert_nerf_cdf",
    "rvs_sample",
    "sample_rays",
]
