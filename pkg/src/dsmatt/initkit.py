"""Weight initialization policies.

``glorot``    U(-g, g) with g = sqrt(6 / (d_in + d_out)).
``ds_init``   the same bound shrunk by alpha / sqrt(l) for a layer at depth l.
``fixed_sigma`` zero-mean Gaussian with a fixed standard deviation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .numcore import Rng, Tensor, normal, uniform

POLICIES = ("glorot", "ds_init", "fixed_sigma")


@dataclass(frozen=True)
class InitSpec:
    policy: str
    d_in: int
    d_out: int
    layer_depth: int = 1
    alpha: float = 1.0
    sigma: float = 0.02

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown init policy {self.policy!r}; expected one of {POLICIES}")
        if self.d_in < 1 or self.d_out < 1:
            raise ValueError(f"fan sizes must be positive, got d_in={self.d_in}, d_out={self.d_out}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.layer_depth < 1:
            raise ValueError(f"layer depth is 1-based, got {self.layer_depth}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.d_in, self.d_out)


def glorot_bound(d_in: int, d_out: int) -> float:
    return math.sqrt(6.0 / (d_in + d_out))


def ds_init_bound(d_in: int, d_out: int, layer_depth: int, alpha: float = 1.0) -> float:
    if layer_depth < 1:
        raise ValueError(f"layer depth is 1-based, got {layer_depth}")
    return glorot_bound(d_in, d_out) * alpha / math.sqrt(layer_depth)


def sampling_bound(spec: InitSpec) -> float:
    """Half-width of the uniform range (or the std for ``fixed_sigma``)."""
    if spec.policy == "glorot":
        return glorot_bound(spec.d_in, spec.d_out)
    if spec.policy == "ds_init":
        return ds_init_bound(spec.d_in, spec.d_out, spec.layer_depth, spec.alpha)
    return spec.sigma


def target_variance(spec: InitSpec) -> float:
    b = sampling_bound(spec)
    return b * b if spec.policy == "fixed_sigma" else b * b / 3.0


def glorot_sample(rng: Rng, spec: InitSpec) -> Tensor:
    g = glorot_bound(spec.d_in, spec.d_out)
    return uniform(rng, -g, g, spec.shape)


def ds_init_sample(rng: Rng, spec: InitSpec) -> Tensor:
    if spec.policy != "ds_init":
        raise ValueError(f"ds_init_sample called with policy {spec.policy!r}")
    b = ds_init_bound(spec.d_in, spec.d_out, spec.layer_depth, spec.alpha)
    if b == 0.0:
        # alpha = 0 collapses the interval; the only admissible draw is zero
        return Tensor(0.0 * rng.uniform(-1.0, 1.0, spec.shape))
    return uniform(rng, -b, b, spec.shape)


def fixed_sigma_sample(rng: Rng, spec: InitSpec) -> Tensor:
    if not spec.sigma > 0:
        raise ValueError(f"sigma must be positive, got {spec.sigma}")
    return normal(rng, spec.sigma, spec.shape)


def sample(rng: Rng, spec: InitSpec) -> Tensor:
    if spec.policy == "glorot":
        return glorot_sample(rng, spec)
    if spec.policy == "ds_init":
        return ds_init_sample(rng, spec)
    return fixed_sigma_sample(rng, spec)
