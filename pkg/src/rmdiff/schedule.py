"""Randomized time grid for the midpoint sampler.

The anchor grid ``hat_alpha[t]`` grows logistically from ``T**-c0`` as ``t``
decreases; each realized ``bar_alpha[t]`` is a uniform draw inside
``(hat_alpha[t], hat_alpha[t-1])``. All quantities are stored together with
their complements (``1 - value``) computed multiplicatively, so that gaps near
both ends of the unit interval keep full relative precision.

Index conventions follow the sampler: for round ``k`` and step ``n``,
``tau(k, n) = 1 - bar_alpha[T - k*N/2 - n + 1]`` and
``hat_tau(k, n) = 1 - hat_alpha[T - k*N/2 - n]``.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from rmdiff.rng import stream

logger = logging.getLogger(__name__)

SCHEDULE_STREAM = 1


class ScheduleError(ValueError):
    """Raised for inconsistent parameters or a schedule that leaves (0, 1)."""


@dataclass(frozen=True)
class ScheduleParams:
    """Parameters of the randomized schedule.

    Attributes:
        T: iteration budget; a full run makes ``2*T`` score evaluations.
        K: number of rounds; must divide ``2*T`` with an even quotient.
        c0: endpoint exponent, ``hat_alpha[T+1] = T**-c0``.
        c1: per-step growth constant.
        seed: seed for the uniform draws.
    """

    T: int
    K: int
    c0: float = 2.0
    c1: float = 16.0
    seed: int = 0
    min_ratio: float = 5.0

    def __post_init__(self):
        if self.T < 2 or self.K < 1:
            raise ScheduleError(f"need T >= 2 and K >= 1, got T={self.T}, K={self.K}")
        if (2 * self.T) % self.K:
            raise ScheduleError(f"K={self.K} does not divide 2T={2 * self.T}")
        if self.N % 2:
            raise ScheduleError(f"N = 2T/K = {self.N} must be even")
        if self.c0 <= 0 or self.c1 <= 0:
            raise ScheduleError("c0 and c1 must be positive")
        if self.c1 < self.min_ratio * self.c0:
            raise ScheduleError(
                f"c1/c0 = {self.c1 / self.c0:.3g} is below the required ratio {self.min_ratio}"
            )
        if self.T < 4 * self.c1 * self.N * math.log(self.T):
            logger.debug(
                "T=%d is below 4*c1*N*log(T)=%.1f; ratio bounds may not hold",
                self.T,
                4 * self.c1 * self.N * math.log(self.T),
            )

    @property
    def N(self) -> int:
        return 2 * self.T // self.K

    @property
    def step(self) -> float:
        """Logistic growth rate ``c1 * log(T) / T``."""
        return self.c1 * math.log(self.T) / self.T


def snap_T(T: int, K: int) -> int:
    """Return the iteration budget nearest to ``T`` for which ``2T/K`` is even.

    ``N = 2T/K`` is rounded to the nearest even integer (at least 2), and the
    returned budget is ``K*N/2``.
    """
    N = max(2, 2 * int(round(T / K)))
    return K * N // 2


@dataclass(frozen=True)
class Anchors:
    """Deterministic anchor grid over ``t in [-N/2, T+1]``.

    ``width[j]`` is ``hat_alpha[t-1] - hat_alpha[t]`` for ``t = j - N/2``; the
    entry at ``t = -N/2`` has no left neighbour and is NaN.
    """

    params: ScheduleParams
    hat_alpha: np.ndarray
    hat_comp: np.ndarray
    width: np.ndarray

    @property
    def t_min(self) -> int:
        return -self.params.N // 2

    def index(self, t: int) -> int:
        return t - self.t_min


def build_anchors(params: ScheduleParams) -> Anchors:
    """Run the downward recursion ``a[t-1] = a[t] + c1 a[t](1-a[t]) log(T)/T``."""
    T, N = params.T, params.N
    h = params.step
    size = T + 1 + N // 2 + 1
    a = np.empty(size)
    b = np.empty(size)
    w = np.full(size, np.nan)
    a[-1] = float(T) ** (-params.c0)
    b[-1] = -math.expm1(-params.c0 * math.log(T))
    try:
        with np.errstate(over="raise", invalid="raise"):
            for j in range(size - 1, 0, -1):
                at, bt = a[j], b[j]
                w[j] = h * at * bt
                an = at * (1.0 + h * bt)
                bn = bt * (1.0 - h * at)
                # the smaller side carries the precision; derive the other from it
                if an < bn:
                    a[j - 1], b[j - 1] = an, 1.0 - an
                else:
                    a[j - 1], b[j - 1] = 1.0 - bn, bn
    except FloatingPointError as exc:
        raise ScheduleError(f"anchor recursion overflowed: c1*log(T)/T = {h:.4g} is too large") from exc
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ScheduleError("non-finite anchor value; c1*log(T)/T is too large")
    # a == 1.0 is representable rounding once b < eps; b keeps the value
    if np.any(a <= 0) or np.any(b <= 0):
        raise ScheduleError(
            f"anchor left (0, 1): c1*log(T)/T = {h:.4g} is too large for this T"
        )
    return Anchors(params, a, b, w)


@dataclass(frozen=True)
class Schedule:
    """Realized randomized schedule.

    ``bar_alpha`` and ``bar_comp`` are defined for ``t in [-N/2+1, T+1]``; the
    slot for ``t = -N/2`` holds NaN so that the arrays share the anchor index.
    """

    anchors: Anchors
    draws: np.ndarray
    bar_alpha: np.ndarray
    bar_comp: np.ndarray
    seed: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def params(self) -> ScheduleParams:
        return self.anchors.params

    @property
    def T(self) -> int:
        return self.params.T

    @property
    def K(self) -> int:
        return self.params.K

    @property
    def N(self) -> int:
        return self.params.N

    @property
    def hat_alpha(self) -> np.ndarray:
        return self.anchors.hat_alpha

    @property
    def hat_comp(self) -> np.ndarray:
        return self.anchors.hat_comp

    @property
    def t_min(self) -> int:
        return self.anchors.t_min

    def _t(self, k: int, n: int) -> int:
        return self.T - k * self.N // 2 - n + 1

    def _j(self, t: int) -> int:
        j = t - self.t_min
        if j < 0 or j >= self.hat_alpha.size:
            raise IndexError(f"schedule index t={t} out of range")
        return j

    def tau(self, k: int, n: int) -> float:
        return float(self.bar_comp[self._j(self._t(k, n))])

    def one_minus_tau(self, k: int, n: int) -> float:
        return float(self.bar_alpha[self._j(self._t(k, n))])

    def hat_tau(self, k: int, n: int) -> float:
        return float(self.hat_comp[self._j(self._t(k, n) - 1)])

    def one_minus_hat_tau(self, k: int, n: int) -> float:
        return float(self.hat_alpha[self._j(self._t(k, n) - 1)])

    def first_gap(self, k: int) -> float:
        """``tau(k,0) - hat_tau(k,0)``."""
        j = self._j(self._t(k, 0))
        return float((1.0 - self.draws[j]) * self.anchors.width[j])

    def full_gap(self, k: int, i: int) -> float:
        """``hat_tau(k,i-1) - hat_tau(k,i)``."""
        return float(self.anchors.width[self._j(self._t(k, i))])

    def trail_gap(self, k: int, n: int) -> float:
        """``hat_tau(k,n-1) - tau(k,n)``."""
        j = self._j(self._t(k, n))
        return float(self.draws[j] * self.anchors.width[j])

    def bar_diff(self, t_lo: int, t_hi: int) -> float:
        """``bar_alpha[t_lo] - bar_alpha[t_hi]`` for ``t_lo <= t_hi``, summed from widths."""
        if t_lo > t_hi:
            return -self.bar_diff(t_hi, t_lo)
        if t_lo == t_hi:
            return 0.0
        jl, jh = self._j(t_lo), self._j(t_hi)
        w, u = self.anchors.width, self.draws
        inner = float(np.sum(w[jl + 1 : jh]))
        return float(u[jl] * w[jl]) + inner + float((1.0 - u[jh]) * w[jh])

    def injection_gap(self, k: int) -> float:
        """``tau(k+1,0) - tau(k,N)``."""
        return self.bar_diff(self._t(k, self.N), self._t(k + 1, 0))

    def round_taus(self, k: int) -> np.ndarray:
        """View of ``tau(k, n)`` for ``n = 0..N`` (descending)."""
        j0 = self._j(self._t(k, 0))
        return self.bar_comp[j0 - self.N : j0 + 1][::-1]

    def with_draws(self, draws: np.ndarray) -> "Schedule":
        return realize(self.anchors, draws, seed=self.seed)


def realize(anchors: Anchors, draws: np.ndarray, seed: int = 0) -> Schedule:
    """Place each ``bar_alpha[t]`` at fraction ``draws[t]`` of its anchor interval."""
    draws = np.asarray(draws, dtype=float)
    if draws.shape != anchors.hat_alpha.shape:
        raise ValueError("draws must match the anchor grid")
    a, b, w = anchors.hat_alpha, anchors.hat_comp, anchors.width
    bar_alpha = np.full_like(a, np.nan)
    bar_comp = np.full_like(a, np.nan)
    bar_alpha[1:] = a[1:] + draws[1:] * w[1:]
    bar_comp[1:] = b[1:] - draws[1:] * w[1:]
    for arr in (bar_alpha, bar_comp, draws):
        arr.setflags(write=False)
    return Schedule(anchors, draws, bar_alpha, bar_comp, seed=seed)


def draw_schedule(anchors: Anchors, seed: int | None = None) -> Schedule:
    """Draw ``bar_alpha[t] ~ Uniform(hat_alpha[t], hat_alpha[t-1])`` for every t.

    Draw for index ``t`` is the ``(t + N/2)``-th output of a counter-based
    stream keyed by the seed, so it does not depend on evaluation order.
    """
    seed = anchors.params.seed if seed is None else seed
    draws = stream(seed, SCHEDULE_STREAM).random(anchors.hat_alpha.size)
    draws[0] = np.nan
    return realize(anchors, draws, seed=seed)


def build_schedule(params: ScheduleParams) -> Schedule:
    return draw_schedule(build_anchors(params), params.seed)


@dataclass
class ScheduleReport:
    """Outcome of the schedule identity and endpoint checks."""

    T: int
    K: int
    c0: float
    c1: float
    start_gap: float
    start_bound: float
    end_tau: float
    end_bound: float
    identity_max_rel_residual: float
    ratio_tau: float
    ratio_comp: float
    ratio_bound_applies: bool
    failed: list[str]

    @property
    def passed(self) -> bool:
        return not self.failed

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["passed"] = self.passed
        return d


def verify_schedule(schedule: Schedule, identity_tol: float = 1e-12) -> ScheduleReport:
    """Check the endpoint bounds, the anchor identity and the per-round ratio bounds.

    The ratio bounds are only enforced when ``T >= 4 c1 N log T``; otherwise
    they are reported but not counted as failures.
    """
    p = schedule.params
    T, K, N = p.T, p.K, p.N
    h = p.step
    failed = []

    start_gap = schedule.one_minus_tau(0, 0)
    start_bound = 2.0 / T**p.c0
    if not start_gap <= start_bound:
        failed.append("start_gap")
    end_tau = schedule.tau(K, 0)
    end_bound = 1.0 / T**p.c0
    if not end_tau <= end_bound:
        failed.append("end_tau")

    # identity over every anchor step covered by some round
    a, b = schedule.hat_alpha, schedule.hat_comp
    worst = 0.0
    for j in range(1, a.size):
        # hat_tau(k,n-1) = b[j], hat_tau(k,n) = b[j-1]
        if a[j] < 0.5:
            diff = a[j - 1] - a[j]
        else:
            diff = b[j] - b[j - 1]
        ratio = diff / (b[j] * a[j])
        worst = max(worst, abs(ratio - h) / h)
    if not worst <= identity_tol:
        failed.append("anchor_identity")

    ratio_tau = 0.0
    ratio_comp = 0.0
    for k in range(K):
        lo = schedule.hat_tau(k, N)
        hi = schedule.hat_tau(k, -1)
        ratio_tau = max(ratio_tau, hi / lo)
        ratio_comp = max(ratio_comp, schedule.one_minus_hat_tau(k, N) / schedule.one_minus_hat_tau(k, -1))
    applies = T >= 4 * p.c1 * N * math.log(T)
    if applies and not (ratio_tau <= math.e and ratio_comp <= math.e):
        failed.append("ratio_bounds")

    return ScheduleReport(
        T=T,
        K=K,
        c0=p.c0,
        c1=p.c1,
        start_gap=start_gap,
        start_bound=start_bound,
        end_tau=end_tau,
        end_bound=end_bound,
        identity_max_rel_residual=worst,
        ratio_tau=ratio_tau,
        ratio_comp=ratio_comp,
        ratio_bound_applies=applies,
        failed=failed,
    )
