"""Exact score oracles, perturbed estimates and a Lipschitz estimator.

Oracles are indexed by the continuous noise level ``tau`` and accept a single
point of shape ``(d,)`` or a batch of shape ``(n, d)``. A batched call counts
as one evaluation.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from rmdiff.rng import stream
from rmdiff.targets import DiagonalGaussianTarget, GmmTarget, Target, sample_x_tau

PERTURB_STREAM = 3


class ScoreError(ValueError):
    pass


class ScoreOracle:
    """Base class: ``oracle(tau, x, step=None) -> score``.

    Subclasses implement :meth:`evaluate`. ``step`` is a logical call index
    used by randomized perturbations; exact oracles ignore it.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.eval_count = 0

    def __call__(self, tau: float, x: np.ndarray, step: int | None = None) -> np.ndarray:
        with self._lock:
            self.eval_count += 1
            if step is None:
                step = self.eval_count - 1
        return self.evaluate(tau, np.asarray(x, dtype=float), step)

    def evaluate(self, tau: float, x: np.ndarray, step: int) -> np.ndarray:
        raise NotImplementedError

    def reset_count(self) -> None:
        with self._lock:
            self.eval_count = 0


class ZeroScore(ScoreOracle):
    def evaluate(self, tau, x, step):
        return np.zeros_like(x)


class GaussianScore(ScoreOracle):
    """Score of the forward marginal of a diagonal Gaussian target."""

    def __init__(self, target: DiagonalGaussianTarget):
        super().__init__()
        self.target = target

    def marginal_variances(self, tau: float) -> np.ndarray:
        return (1.0 - tau) * self.target.variances + tau

    def evaluate(self, tau, x, step):
        return gaussian_score(self.target, tau, x)


def gaussian_score(target: DiagonalGaussianTarget, tau: float, x: np.ndarray) -> np.ndarray:
    """``-x_i / ((1 - tau) sigma_i^2 + tau)`` coordinatewise."""
    var = (1.0 - tau) * target.variances + tau
    if np.any(var == 0):
        raise ScoreError("degenerate score: zero marginal variance at tau=0")
    return -np.asarray(x, dtype=float) / var


@dataclass
class GmmPosterior:
    log_weights: np.ndarray
    sigma_tau2: float

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)


def _gmm_sigma_tau2(target: GmmTarget, tau: float) -> float:
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    s2 = (1.0 - tau) * target.sigma2 + tau
    if s2 <= 0:
        raise ScoreError("GMM score undefined at tau=0 with sigma2=0")
    return s2


def gmm_posterior(target: GmmTarget, tau: float, x: np.ndarray) -> GmmPosterior:
    """Posterior component weights of ``X_0``'s component given ``X_tau = x``.

    ``log_weights`` has shape ``(..., H)`` and is normalized with logsumexp.
    """
    s2 = _gmm_sigma_tau2(target, tau)
    x = np.asarray(x, dtype=float)
    diff = x[..., None, :] - math.sqrt(1.0 - tau) * target.means
    with np.errstate(divide="ignore"):
        logits = np.log(target.weights) - np.sum(diff**2, axis=-1) / (2.0 * s2)
    lse = logsumexp(logits, axis=-1, keepdims=True)
    if np.any(~np.isfinite(lse)):
        raise ScoreError("all mixture weights vanish")
    return GmmPosterior(logits - lse, s2)


def gmm_score(target: GmmTarget, tau: float, x: np.ndarray) -> np.ndarray:
    """``-sum_h pi_h(x) (x - sqrt(1-tau) mu_h) / sigma_tau^2``."""
    post = gmm_posterior(target, tau, x)
    x = np.asarray(x, dtype=float)
    diff = x[..., None, :] - math.sqrt(1.0 - tau) * target.means
    return -np.einsum("...h,...hd->...d", post.weights, diff) / post.sigma_tau2


def gmm_jacobian(target: GmmTarget, tau: float, x: np.ndarray) -> np.ndarray:
    """Jacobian of :func:`gmm_score`, shape ``(..., d, d)``.

    Uses the posterior covariance of the component means, which is the
    x-dependent Hessian of the log marginal density.
    """
    post = gmm_posterior(target, tau, x)
    pi = post.weights
    mu = target.means
    m = pi @ mu
    centered = mu - m[..., None, :]
    cov = np.einsum("...h,...hi,...hj->...ij", pi, centered, centered)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    eye = np.eye(target.d)
    s2 = post.sigma_tau2
    return (-eye + ((1.0 - tau) / s2) * cov) / s2


class GmmScore(ScoreOracle):
    def __init__(self, target: GmmTarget):
        super().__init__()
        self.target = target

    def evaluate(self, tau, x, step):
        return gmm_score(self.target, tau, x)


def exact_oracle(target: Target) -> ScoreOracle:
    if isinstance(target, DiagonalGaussianTarget):
        return GaussianScore(target)
    return GmmScore(target)


@dataclass(frozen=True)
class PerturbationSpec:
    """Score error model.

    ``kind`` is one of ``none``, ``constant_shift`` (add ``shift``),
    ``linear_scale`` (multiply by ``1 + scale``) or ``iid_noise`` (add a
    vector of norm ``eps`` in a direction keyed by ``(seed, step)``).
    """

    kind: str = "none"
    shift: tuple[float, ...] | None = None
    scale: float = 0.0
    eps: float = 0.0
    seed: int = 0

    KINDS = ("none", "constant_shift", "linear_scale", "iid_noise")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.kind == "constant_shift" and self.shift is None:
            raise ValueError("constant_shift needs a shift vector")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")

    @classmethod
    def from_config(cls, cfg: dict | None) -> "PerturbationSpec":
        if not cfg:
            return cls()
        cfg = dict(cfg)
        if cfg.get("shift") is not None:
            cfg["shift"] = tuple(float(v) for v in cfg["shift"])
        return cls(**cfg)

    def to_config(self) -> dict:
        return {
            "kind": self.kind,
            "shift": None if self.shift is None else list(self.shift),
            "scale": self.scale,
            "eps": self.eps,
            "seed": self.seed,
        }


class PerturbedScore(ScoreOracle):
    """Wraps an oracle and records the exact error of every call.

    ``epsilon_score`` is the root mean of the per-call squared error norms
    (averaged over the batch within a call).
    """

    def __init__(self, base: ScoreOracle, spec: PerturbationSpec):
        super().__init__()
        self.base = base
        self.spec = spec
        self._sq_errors: dict[int, float] = {}

    def evaluate(self, tau, x, step):
        exact = self.base.evaluate(tau, x, step)
        spec = self.spec
        if spec.kind == "none":
            err = np.zeros_like(exact)
        elif spec.kind == "constant_shift":
            err = np.broadcast_to(np.asarray(spec.shift, dtype=float), exact.shape)
        elif spec.kind == "linear_scale":
            err = spec.scale * exact
        else:
            u = stream(spec.seed, PERTURB_STREAM, step).standard_normal(exact.shape)
            u /= np.linalg.norm(u, axis=-1, keepdims=True)
            err = spec.eps * u
        sq = float(np.mean(np.sum(np.atleast_2d(err) ** 2, axis=-1)))
        with self._lock:
            self._sq_errors[step] = sq
        return exact + err

    @property
    def squared_errors(self) -> list[float]:
        return [self._sq_errors[k] for k in sorted(self._sq_errors)]

    @property
    def epsilon_score(self) -> float:
        errs = self.squared_errors
        return math.sqrt(math.fsum(errs) / len(errs)) if errs else 0.0


def perturb(oracle: ScoreOracle, spec: PerturbationSpec) -> ScoreOracle:
    return PerturbedScore(oracle, spec)


@dataclass
class LipschitzEstimate:
    L_hat: float
    quantile: float
    samples: int
    radius_rule: str
    ratios: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)


def lipschitz_estimate(
    oracle: ScoreOracle,
    target: Target,
    tau: float,
    trial_count: int,
    rng: np.random.Generator,
    T: int = 256,
    C: float = 1.0,
    passes: int = 2,
) -> LipschitzEstimate:
    """Monte Carlo estimate of the local Lipschitz constant of ``tau * s_tau``.

    Pairs ``(x, x + r u)`` with ``x ~ X_tau``, ``u`` uniform on the sphere and
    ``r ~ Uniform(0, R]``, ``R = C sqrt(d tau log T) / L``. Starting from
    ``L = 1`` the radius is recomputed from the estimate ``passes - 1`` times.
    The reported value is the ``1 - (T+d)^-4`` quantile of the ratios, which is
    the observed maximum unless the trial count is astronomically large.
    """
    if trial_count <= 0:
        raise ValueError("trial_count must be positive")
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    d = target.d
    q = 1.0 - 1.0 / float(T + d) ** 4
    L = 1.0
    L_hat = 0.0
    ratios = np.empty(0)
    for _ in range(passes):
        R = C * math.sqrt(d * tau * math.log(T)) / L
        x = sample_x_tau(target, tau, rng, size=trial_count).x_tau
        u = rng.standard_normal((trial_count, d))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        r = R * (1.0 - rng.random(trial_count))
        xp = x + r[:, None] * u
        ds = oracle(tau, xp) - oracle(tau, x)
        ratios = tau * np.linalg.norm(ds, axis=1) / np.linalg.norm(xp - x, axis=1)
        L_hat = float(np.quantile(ratios, q, method="inverted_cdf"))
        # a vanishing estimate must not blow up the next radius
        L = max(L_hat, 1e-12)
    return LipschitzEstimate(
        L_hat=L_hat,
        quantile=q,
        samples=trial_count,
        radius_rule=f"R = {C:g} * sqrt(d * tau * log T) / L, {passes} passes from L=1",
        ratios=ratios,
    )
