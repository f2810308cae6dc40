"""Distributions produced by network heads.

Log-densities and KL divergences return one value per batch row; batch
averaging happens in the bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ShapeError, SupportError

PROB_EPS = 1e-7
VAR_FLOOR = 1e-6
LOG_2PI = math.log(2 * math.pi)


@dataclass
class DiagGaussian:
    mean: Tensor
    var: Tensor

    def __post_init__(self):
        if self.mean.shape != self.var.shape:
            raise ShapeError(f"mean {self.mean.shape} and variance {self.var.shape} differ")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        eps = rng.standard_normal(self.mean.shape).astype(self.mean.dtype)
        return self.mean.data + np.sqrt(self.var.data) * eps


@dataclass
class Bernoulli:
    mean: Tensor

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        u = rng.random(self.mean.shape)
        return (u < self.mean.data).astype(self.mean.dtype)


@dataclass
class Categorical:
    mean: Tensor

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        p = self.mean.data.astype(np.float64)
        u = rng.random((p.shape[0], 1))
        k = (np.cumsum(p, axis=-1) < u * p.sum(axis=-1, keepdims=True)).sum(axis=-1)
        k = np.minimum(k, p.shape[-1] - 1)
        return np.eye(p.shape[-1], dtype=self.mean.dtype)[k]


@dataclass
class FixedVarGaussian:
    """Gaussian emission with variance pinned to 1."""

    mean: Tensor

    @property
    def var(self) -> Tensor:
        return Tensor(np.ones_like(self.mean.data))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        eps = rng.standard_normal(self.mean.shape).astype(self.mean.dtype)
        return self.mean.data + eps


@dataclass
class StdNormal:
    dim: int

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.standard_normal((n, self.dim)).astype(dc.default_dtype())


def _check_value(dist_mean: Tensor, value: np.ndarray) -> None:
    if value.shape != dist_mean.shape:
        raise ShapeError(f"value shape {value.shape} != event shape {dist_mean.shape}")


def log_prob(dist, value) -> Tensor:
    """Per-row log-density of ``value`` (a constant array or tensor)."""
    v = value.data if isinstance(value, Tensor) else np.asarray(value)
    if isinstance(dist, Bernoulli):
        _check_value(dist.mean, v)
        if not np.all((v == 0) | (v == 1)):
            raise SupportError("Bernoulli values must be 0 or 1")
        mu = dc.clip(dist.mean, PROB_EPS, 1 - PROB_EPS)
        v = v.astype(mu.dtype)
        ll = dc.mul(v, dc.log(mu)) + dc.mul(1 - v, dc.log(1 - mu))
        return dc.sum(ll, axis=-1)
    if isinstance(dist, Categorical):
        _check_value(dist.mean, v)
        if not (np.all((v == 0) | (v == 1)) and np.all(v.sum(axis=-1) == 1)):
            raise SupportError("Categorical values must be one-hot rows")
        mu = dc.clip(dist.mean, PROB_EPS, 1 - PROB_EPS)
        return dc.sum(dc.mul(v.astype(mu.dtype), dc.log(mu)), axis=-1)
    if isinstance(dist, FixedVarGaussian):
        _check_value(dist.mean, v)
        d = dist.mean.shape[-1]
        sq = dc.sum(dc.square(dc.sub(value, dist.mean)), axis=-1)
        return dc.scale(sq, -0.5) + (-0.5 * d * LOG_2PI)
    if isinstance(dist, DiagGaussian):
        _check_value(dist.mean, v)
        d = dist.mean.shape[-1]
        sq = dc.div(dc.square(dc.sub(value, dist.mean)), dist.var)
        inner = dc.sum(sq + dc.log(dist.var), axis=-1)
        return dc.scale(inner, -0.5) + (-0.5 * d * LOG_2PI)
    if isinstance(dist, StdNormal):
        if v.shape[-1] != dist.dim:
            raise ShapeError(f"value dim {v.shape[-1]} != {dist.dim}")
        return dc.scale(dc.sum(dc.square(value), axis=-1), -0.5) + (-0.5 * dist.dim * LOG_2PI)
    raise TypeError(f"unsupported distribution {type(dist).__name__}")


def rsample(dist: DiagGaussian, eps) -> Tensor:
    """Reparameterized draw ``mean + sqrt(var) * eps``; ``eps`` is data."""
    e = eps.data if isinstance(eps, Tensor) else np.asarray(eps, dtype=dist.mean.dtype)
    if e.shape != dist.mean.shape:
        raise ShapeError(f"noise shape {e.shape} != {dist.mean.shape}")
    return dc.add(dist.mean, dc.mul(dc.sqrt(dist.var), e))


def kl_to_std_normal(q: DiagGaussian) -> Tensor:
    """KL(q || N(0, I)) per row."""
    per_dim = dc.square(q.mean) + q.var - 1.0 - dc.log(q.var)
    # each coordinate's term is a KL itself; relu only removes rounding below zero
    return dc.scale(dc.sum(dc.relu(per_dim), axis=-1), 0.5)


def kl_diag_gaussians(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) per row for diagonal Gaussians."""
    if q.mean.shape != p.mean.shape:
        raise ShapeError(f"KL between shapes {q.mean.shape} and {p.mean.shape}")
    ratio = dc.div(q.var + dc.square(q.mean - p.mean), p.var)
    per_dim = dc.log(p.var) - dc.log(q.var) + ratio - 1.0
    return dc.scale(dc.sum(dc.relu(per_dim), axis=-1), 0.5)
