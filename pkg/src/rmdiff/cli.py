"""Command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 a quantitative check
failed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from rmdiff import diagnostics
from rmdiff.config import ConfigError, ExperimentConfig, uniform_variances, rate_config
from rmdiff.parallel import ParallelConfig, default_depth, run_parallel, sweep_discrepancies
from rmdiff.sampler import run
from rmdiff.schedule import ScheduleError, ScheduleParams, build_schedule, verify_schedule
from rmdiff.scores import (
    GaussianScore,
    exact_oracle,
    gmm_jacobian,
    gmm_posterior,
    lipschitz_estimate,
    perturb,
)
from rmdiff.targets import DiagonalGaussianTarget, GmmTarget, check_second_moment

logger = logging.getLogger("rmdiff")

EXIT_OK, EXIT_USAGE, EXIT_CHECK = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(text: str, path: Path | None) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)


def _csv_text(header: list[str], rows, cfg: ExperimentConfig | None = None, seed: int | None = None) -> str:
    buf = io.StringIO()
    if cfg is not None:
        buf.write(f"# config={cfg.canonical_json()}\n")
        buf.write(f"# config_hash={cfg.config_hash}\n")
    if seed is not None:
        buf.write(f"# seed={seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def _json_text(payload: dict, cfg: ExperimentConfig | None = None) -> str:
    if cfg is not None:
        payload = {"config": cfg.resolved(), "config_hash": cfg.config_hash, **payload}
    return json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


def _load_config(args, fallback=None) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = ExperimentConfig.load(args.config)
    elif fallback is not None:
        cfg = fallback()
    else:
        raise UsageError("--config is required")
    overrides = {}
    for name in ("seed", "reps", "out", "T", "T_grid", "K", "c0", "c1", "n_samples"):
        val = getattr(args, name, None)
        if val is not None:
            overrides[name] = val
    if overrides:
        cfg = ExperimentConfig(**{**cfg.to_dict(), **overrides})
    return cfg


def _out(args, cfg: ExperimentConfig | None, name: str) -> Path | None:
    if getattr(args, "out", None):
        return Path(args.out)
    return cfg.out_path(name) if cfg is not None else None


# ---- schedule -----------------------------------------------------------------


def cmd_schedule(args) -> int:
    params = ScheduleParams(args.T, args.K, args.c0, args.c1, seed=args.seed or 0, min_ratio=args.min_ratio)
    schedule = build_schedule(params)
    out = Path(args.out) if args.out else None
    if args.action == "dump":
        rows = [
            (t, float(schedule.hat_alpha[j]), float(schedule.bar_alpha[j]))
            for j, t in enumerate(range(schedule.t_min, params.T + 2))
        ]
        _emit(_csv_text(["t", "hat_alpha", "bar_alpha"], rows), out)
        return EXIT_OK
    report = verify_schedule(schedule)
    _emit(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", out)
    return EXIT_OK if report.passed else EXIT_CHECK


# ---- sampling -----------------------------------------------------------------


def _parse_parallel(spec: str | None, cfg: ExperimentConfig, T: int) -> int | None:
    if spec is None:
        return cfg.M if cfg.mode == "parallel" else None
    text = spec.split("=", 1)[1] if "=" in spec else spec
    if text in ("", "auto"):
        return default_depth(T)
    try:
        return int(text)
    except ValueError as exc:
        raise UsageError(f"bad --parallel value {spec!r}") from exc


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    target = cfg.target_obj()
    params = cfg.schedule_params()
    if not check_second_moment(target, params.T, cfg.c_R):
        logger.warning("target second moment exceeds T^c_R")
    schedule = build_schedule(params)
    oracle = exact_oracle(target)
    spec = cfg.perturbation_spec()
    if spec.kind != "none":
        oracle = perturb(oracle, spec)
    M = _parse_parallel(args.parallel, cfg, params.T)
    workers = args.workers or cfg.workers
    n = cfg.n_samples
    t0 = time.perf_counter()
    if M is None:
        traj = run(schedule, oracle, target.d, seed=cfg.seed, n_samples=n, keep_trajectory=bool(args.keep_trajectory))
        expected = 2 * params.T
    else:
        traj = run_parallel(schedule, oracle, target.d, ParallelConfig(M, workers), seed=cfg.seed, n_samples=n)
        expected = M * params.K * params.N
    logger.info("sample run took %.1f ms", 1e3 * (time.perf_counter() - t0))
    y = traj.y_final
    payload = {
        "seed": cfg.seed,
        "T": params.T,
        "K": params.K,
        "N": params.N,
        "score_evals": traj.score_evals,
        "parallel_rounds": traj.parallel_rounds,
        "tau_final": schedule.tau(params.K, 0),
        "n_samples": n,
        "mean": y.mean(axis=0),
        "variance": y.var(axis=0),
    }
    if n == 1:
        payload["y_final"] = y[0]
    if hasattr(oracle, "epsilon_score"):
        payload["epsilon_score"] = oracle.epsilon_score
    if args.keep_trajectory and traj.steps is not None:
        rows = []
        for k, path in enumerate(traj.steps):
            for step, yk in enumerate(path):
                rows.append([k, step, schedule.tau(k, step), *np.atleast_2d(yk)[0].tolist()])
        header = ["k", "n", "tau", *[f"y_{i}" for i in range(target.d)]]
        Path(args.keep_trajectory).write_text(_csv_text(header, rows, cfg, cfg.seed))
    _emit(_json_text(payload, cfg), _out(args, cfg, "sample.json"))
    return EXIT_OK if traj.score_evals == expected else EXIT_CHECK


def cmd_parallel_compare(args) -> int:
    cfg = _load_config(args)
    target = cfg.target_obj()
    params = cfg.schedule_params()
    schedule = build_schedule(params)
    M_max = args.M_max if args.M_max is not None else params.N
    disc = sweep_discrepancies(schedule, exact_oracle(target), target.d, M_max, seed=cfg.seed, n_samples=cfg.n_samples)
    rows = [(m + 1, float(v)) for m, v in enumerate(disc)]
    _emit(_csv_text(["m", "max_slot_discrepancy"], rows, cfg, cfg.seed), _out(args, cfg, "parallel_compare.csv"))
    if M_max >= params.N and disc[-1] != 0.0:
        return EXIT_CHECK
    return EXIT_OK


# ---- exact KL ---------------------------------------------------------------------


def _diag_target(cfg: ExperimentConfig) -> DiagonalGaussianTarget:
    target = cfg.target_obj()
    if not isinstance(target, DiagonalGaussianTarget):
        raise UsageError("this command needs a diag_gaussian target")
    return target


def _executor(jobs: int):
    return ProcessPoolExecutor(jobs) if jobs and jobs > 1 else None


def cmd_exact_kl(args) -> int:
    cfg = _load_config(args, rate_config)
    target = _diag_target(cfg)
    ex = _executor(args.jobs)
    try:
        rows = diagnostics.kl_sweep(
            target, cfg.T_grid, cfg.K, cfg.c0, cfg.c1, cfg.reps, cfg.seed, cfg.snap, cfg.perturbation_spec(), ex
        )
    finally:
        if ex is not None:
            ex.shutdown()
    header = ["T", "K", "N", "c0", "c1", "seed", "kl", "logT"]
    out_rows = [[r.T, r.K, r.N, r.c0, r.c1, r.seed, r.kl, r.logT] for r in rows]
    if cfg.reps > 1:
        stats = {p.T: p for p in diagnostics.aggregate(rows)}
        header += ["kl_mean", "kl_std"]
        for out_row, r in zip(out_rows, rows):
            p = stats[r.T]
            out_row += [p.value, p.std_err * math.sqrt(p.reps)]
    _emit(_csv_text(header, out_rows, cfg), _out(args, cfg, "exact_kl.csv"))
    return EXIT_OK


def cmd_rate(args) -> int:
    cfg = _load_config(args, rate_config)
    if len(cfg.T_grid) < 3:
        raise UsageError("rate fit needs a T grid with at least 3 values")
    target = _diag_target(cfg)
    ex = _executor(args.jobs)
    try:
        rows = diagnostics.kl_sweep(target, cfg.T_grid, cfg.K, cfg.c0, cfg.c1, cfg.reps, cfg.seed, cfg.snap, executor=ex)
    finally:
        if ex is not None:
            ex.shutdown()
    points = diagnostics.aggregate(rows)
    fit = diagnostics.rate_fit(points, args.model)
    lo, hi = args.band
    in_band = lo <= fit.slope <= hi
    out = _out(args, cfg, "rate.csv")
    csv_rows = [(p.T, p.reps, p.value, p.std_err) for p in points]
    _emit(_csv_text(["T", "reps", "kl_mean", "kl_stderr"], csv_rows, cfg), out)
    report = {**fit.to_dict(), "band": [lo, hi], "in_band": in_band}
    fit_path = Path(args.fit_out) if args.fit_out else (out.with_suffix(".fit.json") if out else None)
    if fit_path is None:
        sys.stdout.write(_json_text(report, cfg))
    else:
        fit_path.write_text(_json_text(report, cfg))
    return EXIT_OK if in_band else EXIT_CHECK


def cmd_eps(args) -> int:
    cfg = _load_config(args, rate_config)
    target = _diag_target(cfg)
    rows = diagnostics.eps_sweep(target, cfg.schedule_params(), args.eps)
    _emit(
        _csv_text(["eps", "kl", "delta_kl"], [(r.eps, r.kl, r.delta_kl) for r in rows], cfg, cfg.seed),
        _out(args, cfg, "eps_sweep.csv"),
    )
    deltas = [r.delta_kl for r in rows]
    return EXIT_OK if all(b >= a - 1e-15 for a, b in zip(deltas, deltas[1:])) else EXIT_CHECK


# ---- scores -------------------------------------------------------------------------


def _demo_target(kind: str, d: int, H: int, seed: int):
    rng = np.random.default_rng(seed)
    if kind == "gaussian":
        v = uniform_variances(d, d, seed)
        v[0] = 0.0
        return DiagonalGaussianTarget(v)
    mu = rng.standard_normal((H, d))
    mu *= math.sqrt(d) / np.linalg.norm(mu, axis=1, keepdims=True)
    return GmmTarget(np.full(H, 1.0 / H), mu, 0.0)


def cmd_lipschitz(args) -> int:
    if args.config:
        cfg = _load_config(args)
        target = cfg.target_obj()
        seed, T = cfg.seed, cfg.effective_T()
        cfg_out = cfg
    else:
        if not args.target:
            raise UsageError("give --config or --target")
        seed = args.seed or 0
        target = _demo_target(args.target, args.d, args.H, seed)
        T, cfg_out = args.T or 256, None
    oracle = exact_oracle(target)
    rng = np.random.default_rng(seed)
    results = []
    for tau in args.tau:
        est = lipschitz_estimate(oracle, target, tau, args.trials, rng, T=T, C=args.C)
        results.append({"tau": tau, "L_hat": est.L_hat, "quantile": est.quantile, "samples": est.samples})
    L_max = max(r["L_hat"] for r in results)
    if isinstance(target, DiagonalGaussianTarget):
        bound = 1.0 + 1e-9
    else:
        bound = 10.0 * math.log(target.H * (T + target.d))
    payload = {"target": target.to_config(), "T": T, "estimates": results, "L_hat_max": L_max, "bound": bound}
    _emit(_json_text(payload, cfg_out), Path(args.out) if args.out else None)
    return EXIT_OK if L_max <= bound else EXIT_CHECK


def cmd_score_probe(args) -> int:
    cfg = _load_config(args)
    target = cfg.target_obj()
    try:
        x = np.asarray(json.loads(args.x), dtype=float)
    except (json.JSONDecodeError, ValueError) as exc:
        raise UsageError(f"--x must be a JSON array: {exc}") from exc
    if x.shape != (target.d,):
        raise UsageError(f"--x must have length {target.d}")
    oracle = exact_oracle(target)
    score = oracle(args.tau, x)
    if isinstance(target, GmmTarget):
        jac = gmm_jacobian(target, args.tau, x)
        post = gmm_posterior(target, args.tau, x).weights
    else:
        jac = np.diag(-1.0 / GaussianScore(target).marginal_variances(args.tau))
        post = None
    payload = {
        "tau": args.tau,
        "x": x,
        "score": score,
        "jacobian_spectral_norm": float(np.linalg.norm(jac, 2)),
        "posterior_weights": post,
    }
    _emit(_json_text(payload, cfg), _out(args, cfg, "score_probe.json"))
    return EXIT_OK


def cmd_ks(args) -> int:
    cfg = _load_config(args)
    target = cfg.target_obj()
    if not isinstance(target, GmmTarget):
        raise UsageError("ks-check needs a gmm target")
    params = cfg.schedule_params()
    schedule = build_schedule(params)
    traj = run(schedule, exact_oracle(target), target.d, seed=cfg.seed, n_samples=cfg.n_samples)
    tau = schedule.tau(params.K, 0)
    stats = [diagnostics.ks_check(traj.y_final[:, i], target, tau, i) for i in range(target.d)]
    payload = {"tau": tau, "n_samples": cfg.n_samples, "ks": stats, "threshold": args.threshold}
    _emit(_json_text(payload, cfg), _out(args, cfg, "ks_check.json"))
    return EXIT_OK if max(stats) < args.threshold else EXIT_CHECK


# ---- parser -------------------------------------------------------------------------


def _common(p, config=True):
    if config:
        p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--out", help="output file (default: stdout or $RMDIFF_OUT_DIR)")


def _sched_flags(p, required=False):
    p.add_argument("--T", type=int, required=required)
    p.add_argument("--K", type=int, required=required)
    p.add_argument("--c0", type=float, default=None if not required else 2.0)
    p.add_argument("--c1", type=float, default=None if not required else 16.0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rmdiff", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("schedule", help="dump or verify a schedule")
    p.add_argument("action", choices=["dump", "verify"])
    _sched_flags(p, required=True)
    p.add_argument("--min-ratio", dest="min_ratio", type=float, default=5.0, help="smallest accepted c1/c0")
    _common(p, config=False)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("sample", help="run the sampler")
    p.add_argument("action", choices=["run"])
    _common(p)
    _sched_flags(p)
    p.add_argument("--n-samples", dest="n_samples", type=int)
    p.add_argument("--parallel", metavar="M=<m>", help="use the parallel sampler with depth m")
    p.add_argument("--workers", type=int)
    p.add_argument("--keep-trajectory", metavar="CSV", help="write per-step iterates of sample 0")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("parallel-compare", help="per-sweep discrepancy of the parallel sampler")
    _common(p)
    _sched_flags(p)
    p.add_argument("--M-max", dest="M_max", type=int)
    p.add_argument("--n-samples", dest="n_samples", type=int)
    p.set_defaults(func=cmd_parallel_compare)

    p = sub.add_parser("exact-kl", help="closed-form KL sweep for Gaussian targets")
    p.add_argument("action", choices=["sweep"])
    _common(p)
    p.add_argument("--T-grid", dest="T_grid", type=int, nargs="+")
    p.add_argument("--K", type=int)
    p.add_argument("--c0", type=float)
    p.add_argument("--c1", type=float)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_exact_kl)

    p = sub.add_parser("rate", help="KL sweep plus log-log rate fit")
    _common(p)
    p.add_argument("--T-grid", dest="T_grid", type=int, nargs="+")
    p.add_argument("--K", type=int)
    p.add_argument("--c0", type=float)
    p.add_argument("--c1", type=float)
    p.add_argument("--model", choices=diagnostics.RATE_MODELS, default="plain")
    p.add_argument("--band", type=float, nargs=2, default=None, metavar=("LO", "HI"))
    p.add_argument("--fit-out", dest="fit_out")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_rate)

    p = sub.add_parser("eps-sweep", help="KL under constant score shifts")
    _common(p)
    _sched_flags(p)
    p.add_argument("--eps", type=float, nargs="+", default=[0.0, 0.01, 0.02, 0.04])
    p.set_defaults(func=cmd_eps)

    p = sub.add_parser("lipschitz", help="estimate the local Lipschitz constant")
    _common(p)
    p.add_argument("--target", choices=["gaussian", "gmm"])
    p.add_argument("--T", type=int)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--H", type=int, default=8)
    p.add_argument("--tau", type=float, nargs="+", default=[0.1, 0.5, 0.9])
    p.add_argument("--trials", type=int, default=4000)
    p.add_argument("--C", type=float, default=1.0)
    p.set_defaults(func=cmd_lipschitz)

    p = sub.add_parser("score", help="evaluate the exact score")
    p.add_argument("action", choices=["probe"])
    _common(p)
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--x", required=True, help="JSON array")
    p.set_defaults(func=cmd_score_probe)

    p = sub.add_parser("ks-check", help="KS statistic of sampler output against the exact marginal")
    _common(p)
    _sched_flags(p)
    p.add_argument("--n-samples", dest="n_samples", type=int)
    p.add_argument("--threshold", type=float, default=0.02)
    p.set_defaults(func=cmd_ks)
    return parser


RATE_BANDS = {"plain": (-3.6, -2.4), "log4_corrected": (-3.4, -2.6)}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    if getattr(args, "band", "unset") is None:
        args.band = RATE_BANDS[args.model]
    try:
        return args.func(args)
    except (UsageError, ConfigError, ScheduleError) as exc:
        print(f"rmdiff: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
