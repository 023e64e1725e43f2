"""Exact law of the sampler output for diagonal Gaussian targets.

With an affine score every iterate is an affine function of the round's
starting point plus independent Gaussian noise, so the output law is a
product Gaussian computed coordinatewise in O(d) per step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from rmdiff.sampler import injection_coefficients, round_coefficients
from rmdiff.schedule import Schedule, ScheduleParams, build_schedule
from rmdiff.scores import PerturbationSpec, ScoreError
from rmdiff.targets import DiagonalGaussianTarget


@dataclass(frozen=True)
class DiagGaussianLaw:
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.variances) < 0):
            raise ValueError("variances must be non-negative")


@dataclass(frozen=True)
class AffineCoeffs:
    """``Y_{k,n} = mult[n] * Y_k + offset[n]`` within one round."""

    mult: np.ndarray
    offset: np.ndarray


def _affine_score(target: DiagonalGaussianTarget, tau: float, comp: float, spec: PerturbationSpec, zero_score: bool):
    """Return ``(A, B)`` with ``s(tau, x) = A * x + B`` coordinatewise."""
    d = target.d
    if zero_score:
        return np.zeros(d), np.zeros(d)
    var = comp * target.variances + tau
    if np.any(var == 0):
        raise ScoreError("degenerate score: zero marginal variance at tau=0")
    A = -1.0 / var
    B = np.zeros(d)
    if spec.kind == "linear_scale":
        A = (1.0 + spec.scale) * A
    elif spec.kind == "constant_shift":
        B = np.broadcast_to(np.asarray(spec.shift, dtype=float), (d,)).copy()
    elif spec.kind == "iid_noise":
        raise ValueError("iid_noise perturbations break Gaussianity; use Monte Carlo")
    return A, B


def round_affine(
    schedule: Schedule,
    k: int,
    target: DiagonalGaussianTarget,
    perturbation: PerturbationSpec | None = None,
    zero_score: bool = False,
) -> AffineCoeffs:
    """Coefficients ``(a_{k,n}, b_{k,n})`` for ``n = 0..N``, shape ``(N+1, d)``."""
    spec = perturbation or PerturbationSpec()
    c = round_coefficients(schedule, k)
    N, d = c.N, target.d
    mult = np.empty((N + 1, d))
    offset = np.empty((N + 1, d))
    mult[0], offset[0] = 1.0, 0.0
    base_a = 1.0 / c.sqrt_comp[0] * np.ones(d)
    base_b = np.zeros(d)
    for n in range(1, N + 1):
        tau = c.taus[n - 1]
        A, B = _affine_score(target, tau, 1.0 - tau, spec, zero_score)
        ga = c.score_weight[n - 1] * A * mult[n - 1]
        gb = c.score_weight[n - 1] * (A * offset[n - 1] + B)
        base_a = base_a + ga * c.gaps[n - 1]
        base_b = base_b + gb * c.gaps[n - 1]
        mult[n] = (base_a + ga * c.trail[n]) * c.sqrt_comp[n]
        offset[n] = (base_b + gb * c.trail[n]) * c.sqrt_comp[n]
    return AffineCoeffs(mult, offset)


def propagate(
    schedule: Schedule,
    target: DiagonalGaussianTarget,
    perturbation: PerturbationSpec | None = None,
    zero_score: bool = False,
    initial: DiagGaussianLaw | None = None,
    round_hook=None,
) -> DiagGaussianLaw:
    """Law of ``Y_K`` starting from ``Y_0 ~ N(0, I)``.

    ``round_hook(k, coeffs) -> coeffs`` may replace a round's coefficients
    (used to test the re-noising step in isolation).
    """
    d = target.d
    law = initial or DiagGaussianLaw(np.zeros(d), np.ones(d))
    mean, var = law.means.astype(float), law.variances.astype(float)
    for k in range(schedule.K):
        coeffs = round_affine(schedule, k, target, perturbation, zero_score)
        if round_hook is not None:
            coeffs = round_hook(k, coeffs)
        a, b = coeffs.mult[-1], coeffs.offset[-1]
        scale, std = injection_coefficients(schedule, k)
        mean = scale * (a * mean + b)
        var = scale**2 * a**2 * var + std**2
    return DiagGaussianLaw(mean, var)


def reference_law(schedule: Schedule, target: DiagonalGaussianTarget) -> DiagGaussianLaw:
    """Law of ``X_{tau(K,0)}``."""
    tau = schedule.tau(schedule.K, 0)
    comp = schedule.one_minus_tau(schedule.K, 0)
    return DiagGaussianLaw(np.zeros(target.d), comp * target.variances + tau)


def kl_diag_gaussian(p: DiagGaussianLaw, q: DiagGaussianLaw) -> float:
    """``KL(p || q)`` for product Gaussians; ``inf`` if ``p`` is degenerate where ``q`` is not."""
    m, v = np.asarray(p.means, float), np.asarray(p.variances, float)
    mu, w = np.asarray(q.means, float), np.asarray(q.variances, float)
    if np.any(w <= 0):
        raise ValueError("second law must have positive variances")
    if np.any(v == 0):
        return math.inf
    x = (v - w) / w
    r = v / w
    # log1p form near r = 1; the plain form keeps log(r) finite when r underflows 1 - eps
    near = np.abs(x) < 0.5
    var_term = np.where(near, x - np.log1p(np.where(near, x, 0.0)), r - 1.0 - np.log(r))
    terms = 0.5 * (var_term + (m - mu) ** 2 / w)
    return float(math.fsum(terms))


@dataclass
class ExactKlResult:
    kl: float
    kl_reverse: float
    schedule: Schedule
    law: DiagGaussianLaw
    reference: DiagGaussianLaw


def exact_kl_run(
    params: ScheduleParams,
    target: DiagonalGaussianTarget,
    perturbation: PerturbationSpec | None = None,
    zero_score: bool = False,
    schedule: Schedule | None = None,
) -> ExactKlResult:
    """Draw the schedule, propagate and return ``KL(q_K || law of Y_K)``."""
    schedule = schedule or build_schedule(params)
    law = propagate(schedule, target, perturbation, zero_score)
    ref = reference_law(schedule, target)
    return ExactKlResult(
        kl=kl_diag_gaussian(ref, law),
        kl_reverse=kl_diag_gaussian(law, ref),
        schedule=schedule,
        law=law,
        reference=ref,
    )
