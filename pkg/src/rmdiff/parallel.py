"""Picard-style parallel variant of the midpoint sampler.

Each round keeps ``N`` iterate slots. Sweep ``m`` recomputes every slot from
the scores of sweep ``m - 1``; after ``m`` sweeps the first ``m`` slots agree
exactly with the sequential values. Scores inside a sweep are independent and
may be evaluated on a thread pool; accumulation order is fixed, so the output
does not depend on the worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from rmdiff.sampler import (
    DivergedError,
    Trajectory,
    init,
    inject_noise,
    noise_stream,
    round_coefficients,
    run_round,
)
from rmdiff.schedule import Schedule
from rmdiff.scores import ScoreOracle


@dataclass(frozen=True)
class ParallelConfig:
    M: int
    workers: int = 1

    def __post_init__(self):
        if self.M < 1 or self.workers < 1:
            raise ValueError("M and workers must be positive")


def default_depth(T: int) -> int:
    return max(1, math.ceil(math.log2(T)))


def _sweep_scores(oracle, c, slots, k, pool):
    N = c.N
    args = [(c.taus[i], slots[i], k * N + i) for i in range(N)]
    if pool is None:
        return [oracle(t, y, step=s) for t, y, s in args]
    return list(pool.map(lambda a: oracle(a[0], a[1], step=a[2]), args))


def run_parallel_round(
    k: int,
    y_k: np.ndarray,
    schedule: Schedule,
    oracle: ScoreOracle,
    M: int,
    workers: int = 1,
    history: list | None = None,
) -> np.ndarray:
    """``M`` sweeps over round ``k``; returns slot ``N`` of the last sweep.

    If ``history`` is a list, the slot arrays ``[Y_{m,k,0..N}]`` of every sweep
    ``m = 0..M`` are appended to it.
    """
    c = round_coefficients(schedule, k)
    N = c.N
    y_k = np.asarray(y_k, dtype=float)
    u0 = y_k / c.sqrt_comp[0]
    slots = [y_k] + [u0 * c.sqrt_comp[n] for n in range(1, N + 1)]
    if history is not None:
        history.append(slots)
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for _ in range(M):
            scores = _sweep_scores(oracle, c, slots, k, pool)
            new = [y_k]
            base = u0
            for n in range(1, N + 1):
                g = scores[n - 1] * c.score_weight[n - 1]
                base = base + g * c.gaps[n - 1]
                y = (base + g * c.trail[n]) * c.sqrt_comp[n]
                if not np.all(np.isfinite(y)):
                    raise DivergedError(k, n)
                new.append(y)
            slots = new
            if history is not None:
                history.append(slots)
    finally:
        if pool is not None:
            pool.shutdown()
    return slots[N]


def run_parallel(
    schedule: Schedule,
    oracle: ScoreOracle,
    d: int,
    config: ParallelConfig,
    seed: int = 0,
    n_samples: int | None = None,
    y0: np.ndarray | None = None,
) -> Trajectory:
    y = init(d, seed, n_samples) if y0 is None else np.asarray(y0, dtype=float)
    start = oracle.eval_count
    rounds = [y]
    for k in range(schedule.K):
        out = run_parallel_round(k, y, schedule, oracle, config.M, config.workers)
        y = inject_noise(k, out, schedule, noise_stream(seed, k))
        rounds.append(y)
    traj = Trajectory(rounds, oracle.eval_count - start, schedule, seed)
    traj.parallel_rounds = config.M * schedule.K
    return traj


def sweep_discrepancies(
    schedule: Schedule,
    oracle: ScoreOracle,
    d: int,
    M_max: int,
    seed: int = 0,
    n_samples: int | None = None,
) -> np.ndarray:
    """Relative sup-slot discrepancy to the sequential round, per sweep count.

    For every round ``k`` the parallel round is started from the sequential
    ``Y_k``. Entry ``m - 1`` is
    ``max_k max_n ||Y_{m,k,n} - Y_{k,n}|| / max_n ||Y_{k,n}||`` where the norms
    are taken in the rescaled coordinate ``y / sqrt(1 - tau)``.
    """
    y = init(d, seed, n_samples)
    out = np.zeros(M_max)
    for k in range(schedule.K):
        c = round_coefficients(schedule, k)
        seq = run_round(k, y, schedule, oracle, keep=True)
        seq_u = [s / c.sqrt_comp[n] for n, s in enumerate(seq)]
        scale = max(float(np.max(np.linalg.norm(np.atleast_2d(s), axis=-1))) for s in seq_u)
        hist: list = []
        run_parallel_round(k, y, schedule, oracle, M_max, history=hist)
        for m in range(1, M_max + 1):
            worst = 0.0
            for n in range(c.N + 1):
                diff = (hist[m][n] - seq[n]) / c.sqrt_comp[n]
                worst = max(worst, float(np.max(np.linalg.norm(np.atleast_2d(diff), axis=-1))))
            out[m - 1] = max(out[m - 1], worst / scale)
        y = inject_noise(k, seq[-1], schedule, noise_stream(seed, k))
    return out

