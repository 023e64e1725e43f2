"""JSON experiment configuration with defaults filled in."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from rmdiff.schedule import ScheduleError, ScheduleParams, snap_T
from rmdiff.scores import PerturbationSpec
from rmdiff.targets import DiagonalGaussianTarget, Target, target_from_config

OUT_ENV = "RMDIFF_OUT_DIR"

DEFAULT_T_GRID = [64, 128, 256, 512, 1024, 2048]


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    target: dict
    T: int = 256
    T_grid: list[int] = field(default_factory=lambda: list(DEFAULT_T_GRID))
    K: int = 8
    c0: float = 2.0
    c1: float = 16.0
    snap: bool = True
    mode: str = "sequential"
    M: int | None = None
    workers: int = 1
    perturbation: dict = field(default_factory=lambda: PerturbationSpec().to_config())
    reps: int = 10
    seed: int = 0
    n_samples: int = 1000
    c_R: float = 10.0
    out: str | None = None

    def __post_init__(self):
        if self.mode not in ("sequential", "parallel"):
            raise ConfigError(f"unknown sampler mode {self.mode!r}")
        try:
            tgt = self.target_obj()
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad target: {exc}") from exc
        self.target = tgt.to_config()
        try:
            self.perturbation = PerturbationSpec.from_config(self.perturbation).to_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad perturbation: {exc}") from exc
        spec = self.perturbation_spec()
        if spec.shift is not None and len(spec.shift) != tgt.d:
            raise ConfigError("perturbation shift length does not match the target dimension")
        if self.reps < 1 or self.n_samples < 1:
            raise ConfigError("reps and n_samples must be positive")
        for T in [self.T, *self.T_grid]:
            try:
                self.schedule_params(T)
            except ScheduleError as exc:
                raise ConfigError(str(exc)) from exc

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        sched = data.pop("schedule", None) or {}
        sampler = data.pop("sampler", None) or {}
        merged = {**data, **sched, **sampler}
        known = set(cls.__dataclass_fields__)
        unknown = set(merged) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "target" not in merged:
            raise ConfigError("config needs a target")
        return cls(**merged)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def resolved(self) -> dict:
        """Config as embedded in outputs: everything except the output location."""
        d = self.to_dict()
        d.pop("out")
        return d

    def canonical_json(self) -> str:
        return json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def target_obj(self) -> Target:
        return target_from_config(self.target)

    def perturbation_spec(self) -> PerturbationSpec:
        return PerturbationSpec.from_config(self.perturbation)

    def effective_T(self, T: int | None = None) -> int:
        T = self.T if T is None else T
        return snap_T(T, self.K) if self.snap else T

    def schedule_params(self, T: int | None = None, seed: int | None = None) -> ScheduleParams:
        return ScheduleParams(
            self.effective_T(T), self.K, self.c0, self.c1, seed=self.seed if seed is None else seed
        )

    def out_path(self, name: str) -> Path | None:
        if self.out:
            return Path(self.out)
        base = os.environ.get(OUT_ENV)
        return Path(base) / name if base else None


def uniform_variances(d: int, nonzero: int, seed: int = 0, high: float = 10.0) -> np.ndarray:
    """First ``nonzero`` variances uniform on ``[0, high]``, the rest zero."""
    rng = np.random.default_rng(seed)
    v = np.zeros(d)
    v[:nonzero] = rng.uniform(0.0, high, nonzero)
    return v


def rate_config(d: int = 10, nonzero: int = 10, variance_seed: int = 0, **overrides) -> ExperimentConfig:
    """Rate-experiment defaults: K=10, dyadic T grid, 10 seeds."""
    target = DiagonalGaussianTarget(uniform_variances(d, nonzero, variance_seed))
    base = dict(target=target.to_config(), K=10, c0=2.0, c1=10.0, reps=10, T=512)
    base.update(overrides)
    return ExperimentConfig(**base)
