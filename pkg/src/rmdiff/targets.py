"""Target distributions and exact draws of the forward marginal.

The forward marginal at noise level ``tau`` is
``X_tau = sqrt(1 - tau) * X_0 + sqrt(tau) * Z`` with ``Z`` standard normal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import ndtr


class TargetError(ValueError):
    pass


@dataclass(frozen=True)
class DiagonalGaussianTarget:
    """Zero-mean Gaussian with diagonal covariance ``diag(variances)``.

    Zero entries are allowed and give degenerate (point-mass) coordinates.
    """

    variances: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.variances, dtype=float).reshape(-1)
        if np.any(~np.isfinite(v)) or np.any(v < 0):
            raise TargetError("variances must be finite and non-negative")
        v.setflags(write=False)
        object.__setattr__(self, "variances", v)

    @property
    def d(self) -> int:
        return self.variances.size

    def to_config(self) -> dict:
        return {"type": "diag_gaussian", "variances": self.variances.tolist()}


@dataclass(frozen=True)
class GmmTarget:
    """Isotropic Gaussian mixture ``sum_h w_h N(mu_h, sigma2 I)``."""

    weights: np.ndarray
    means: np.ndarray
    sigma2: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        if mu.shape[0] != w.size:
            raise TargetError(f"{w.size} weights but {mu.shape[0]} means")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise TargetError("weights must be non-negative and sum to 1")
        if not self.sigma2 >= 0:
            raise TargetError("sigma2 must be non-negative")
        for a in (w, mu):
            a.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "sigma2", float(self.sigma2))

    @property
    def H(self) -> int:
        return self.weights.size

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def to_config(self) -> dict:
        return {
            "type": "gmm",
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "sigma2": self.sigma2,
        }


Target = Union[DiagonalGaussianTarget, GmmTarget]


def target_from_config(cfg: dict) -> Target:
    kind = cfg.get("type")
    if kind == "diag_gaussian":
        return DiagonalGaussianTarget(np.asarray(cfg["variances"], dtype=float))
    if kind == "gmm":
        return GmmTarget(
            np.asarray(cfg["weights"], dtype=float),
            np.asarray(cfg["means"], dtype=float),
            float(cfg["sigma2"]),
        )
    raise TargetError(f"unknown target type {kind!r}")


def sample_x0(target: Target, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Exact draw(s) from the target; shape ``(d,)`` or ``(size, d)``."""
    n = 1 if size is None else size
    if isinstance(target, DiagonalGaussianTarget):
        x = rng.standard_normal((n, target.d)) * np.sqrt(target.variances)
    else:
        comp = rng.choice(target.H, size=n, p=target.weights)
        x = target.means[comp] + math.sqrt(target.sigma2) * rng.standard_normal((n, target.d))
    return x[0] if size is None else x


@dataclass(frozen=True)
class ForwardSample:
    x0: np.ndarray
    x_tau: np.ndarray
    tau: float


def sample_x_tau(target: Target, tau: float, rng: np.random.Generator, size: int | None = None) -> ForwardSample:
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    x0 = sample_x0(target, rng, size)
    z = rng.standard_normal(x0.shape)
    x_tau = math.sqrt(1.0 - tau) * x0 + math.sqrt(tau) * z
    return ForwardSample(x0, x_tau, float(tau))


def second_moment(target: Target) -> float:
    """Analytic ``E||X_0||^2``."""
    if isinstance(target, DiagonalGaussianTarget):
        return float(target.variances.sum())
    norms = np.sum(target.means**2, axis=1)
    return float(np.dot(target.weights, norms + target.d * target.sigma2))


def check_second_moment(target: Target, T: int, c_R: float = 10.0) -> bool:
    """True when ``E||X_0||^2 < T**c_R``."""
    return second_moment(target) < float(T) ** c_R


def gmm_marginal_cdf(target: GmmTarget, tau: float, coordinate: int, value):
    """CDF of coordinate ``coordinate`` of ``X_tau``; vectorized over ``value``."""
    value = np.asarray(value, dtype=float)
    loc = math.sqrt(1.0 - tau) * target.means[:, coordinate]
    var = (1.0 - tau) * target.sigma2 + tau
    v = value[..., None]
    if var == 0.0:
        comp = (v >= loc).astype(float)
    else:
        comp = ndtr((v - loc) / math.sqrt(var))
    return comp @ target.weights


def gmm_marginal_pdf(target: GmmTarget, tau: float, coordinate: int, value):
    value = np.asarray(value, dtype=float)
    loc = math.sqrt(1.0 - tau) * target.means[:, coordinate]
    var = (1.0 - tau) * target.sigma2 + tau
    z = (value[..., None] - loc) ** 2 / (2 * var)
    return (np.exp(-z) / math.sqrt(2 * math.pi * var)) @ target.weights
