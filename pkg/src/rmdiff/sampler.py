"""Sequential randomized-midpoint sampler for the probability-flow ODE.

In the rescaled coordinate ``u = y / sqrt(1 - tau)`` the flow reads
``du/dtau = -s_tau(y) / (2 (1 - tau)^{3/2})``. Each round integrates it from
``tau(k, 0)`` down to ``tau(k, N)``; the score evaluated at the random point
``tau(k, i)`` stands in for the whole anchor interval around it. Rounds are
joined by a Gaussian re-noising step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from rmdiff.rng import stream
from rmdiff.schedule import Schedule
from rmdiff.scores import ScoreOracle

INIT_STREAM = 10
NOISE_STREAM = 11


class DivergedError(FloatingPointError):
    def __init__(self, k: int, n: int):
        super().__init__(f"non-finite iterate at round {k}, step {n}")
        self.k = k
        self.n = n


@dataclass(frozen=True)
class RoundCoefficients:
    """Scalar weights of one round, indexed by step ``n = 0..N``.

    ``score_weight[i]`` is ``1 / (2 (1 - tau_i)^{3/2})``; ``gaps[i]`` is the
    width of the full anchor interval assigned to the score at step ``i``
    (``gaps[0]`` is the leading partial ``tau_0 - hat_tau_0``);
    ``trail[n]`` is ``hat_tau_{n-1} - tau_n``.
    """

    k: int
    taus: np.ndarray
    sqrt_comp: np.ndarray
    score_weight: np.ndarray
    gaps: np.ndarray
    trail: np.ndarray

    @property
    def N(self) -> int:
        return self.taus.size - 1


def round_coefficients(schedule: Schedule, k: int) -> RoundCoefficients:
    key = ("round", k)
    cached = schedule._cache.get(key)
    if cached is not None:
        return cached
    N = schedule.N
    comp = np.array([schedule.one_minus_tau(k, n) for n in range(N + 1)])
    taus = np.array([schedule.tau(k, n) for n in range(N + 1)])
    gaps = np.empty(N)
    gaps[0] = schedule.first_gap(k)
    for i in range(1, N):
        gaps[i] = schedule.full_gap(k, i)
    trail = np.full(N + 1, np.nan)
    for n in range(1, N + 1):
        trail[n] = schedule.trail_gap(k, n)
    coeffs = RoundCoefficients(
        k=k,
        taus=taus,
        sqrt_comp=np.sqrt(comp),
        score_weight=0.5 / comp[:N] ** 1.5,
        gaps=gaps,
        trail=trail,
    )
    schedule._cache[key] = coeffs
    return coeffs


def init(d: int, seed: int = 0, n_samples: int | None = None) -> np.ndarray:
    """Draw ``Y_0 ~ N(0, I_d)``; shape ``(d,)`` or ``(n_samples, d)``."""
    rng = stream(seed, INIT_STREAM)
    shape = (d,) if n_samples is None else (n_samples, d)
    return rng.standard_normal(shape)


def _check(y: np.ndarray, k: int, n: int) -> None:
    if not np.all(np.isfinite(y)):
        raise DivergedError(k, n)


def run_round(
    k: int,
    y_k: np.ndarray,
    schedule: Schedule,
    oracle: ScoreOracle,
    keep: bool = False,
):
    """Integrate round ``k`` from ``Y_k``; returns ``Y_{k,N}``.

    With ``keep=True`` returns the list ``[Y_{k,0}, ..., Y_{k,N}]`` instead.
    One oracle call per step, at ``(tau(k, n-1), Y_{k,n-1})``.
    """
    c = round_coefficients(schedule, k)
    N = c.N
    y = np.asarray(y_k, dtype=float)
    _check(y, k, 0)
    path = [y] if keep else None
    base = y / c.sqrt_comp[0]
    for n in range(1, N + 1):
        g = oracle(c.taus[n - 1], y, step=k * N + n - 1) * c.score_weight[n - 1]
        base = base + g * c.gaps[n - 1]
        y = (base + g * c.trail[n]) * c.sqrt_comp[n]
        _check(y, k, n)
        if keep:
            path.append(y)
    return path if keep else y


def direct_round_value(c: RoundCoefficients, scores: list[np.ndarray], y_k: np.ndarray, n: int) -> np.ndarray:
    """Recompute ``Y_{k,n}`` from the full sum given the scores at ``Y_{k,0..n-1}``."""
    if n == 0:
        return np.asarray(y_k, dtype=float)
    total = y_k / c.sqrt_comp[0]
    for i in range(n):
        total = total + scores[i] * c.score_weight[i] * c.gaps[i]
    total = total + scores[n - 1] * c.score_weight[n - 1] * c.trail[n]
    return total * c.sqrt_comp[n]


def injection_coefficients(schedule: Schedule, k: int) -> tuple[float, float]:
    """``(scale, std)`` of the re-noising map between rounds ``k`` and ``k+1``."""
    comp_end = schedule.one_minus_tau(k, schedule.N)
    comp_next = schedule.one_minus_tau(k + 1, 0)
    scale = math.sqrt(comp_next / comp_end)
    std = math.sqrt(schedule.injection_gap(k) / comp_end)
    return scale, std


def inject_noise(
    k: int,
    y_kN: np.ndarray,
    schedule: Schedule,
    rng: np.random.Generator,
    noise_scale: float = 1.0,
) -> np.ndarray:
    scale, std = injection_coefficients(schedule, k)
    z = rng.standard_normal(np.shape(y_kN))
    return scale * y_kN + (noise_scale * std) * z


@dataclass
class Trajectory:
    y_rounds: list[np.ndarray]
    score_evals: int
    schedule: Schedule
    seed: int
    steps: list[list[np.ndarray]] | None = field(default=None, repr=False)
    parallel_rounds: int | None = None

    @property
    def y_final(self) -> np.ndarray:
        return self.y_rounds[-1]


def noise_stream(seed: int, k: int) -> np.random.Generator:
    return stream(seed, NOISE_STREAM, k)


def run(
    schedule: Schedule,
    oracle: ScoreOracle,
    d: int,
    seed: int = 0,
    n_samples: int | None = None,
    y0: np.ndarray | None = None,
    keep_trajectory: bool = False,
    noise_scale: float = 1.0,
) -> Trajectory:
    """Full K-round run; ``Y_0`` is drawn from ``seed`` unless given."""
    y = init(d, seed, n_samples) if y0 is None else np.asarray(y0, dtype=float)
    start = oracle.eval_count
    rounds = [y]
    steps = [] if keep_trajectory else None
    for k in range(schedule.K):
        out = run_round(k, y, schedule, oracle, keep=keep_trajectory)
        if keep_trajectory:
            steps.append(out)
            out = out[-1]
        y = inject_noise(k, out, schedule, noise_stream(seed, k), noise_scale)
        rounds.append(y)
    return Trajectory(rounds, oracle.eval_count - start, schedule, seed, steps)
