"""Experiment configuration: nested dataclasses read from YAML with strict keys.

Every key can be overridden from the environment as
``DISIR_<SECTION>__<KEY>=value`` (top-level keys: ``DISIR_<KEY>``), with the
value parsed as a YAML scalar or list.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

import yaml

from ..estimators import EstimatorConfig

__all__ = [
    "ConfigError",
    "ModelSection",
    "ProposalSection",
    "EstimatorSection",
    "MeetingSection",
    "ToySection",
    "FitSection",
    "BenchSection",
    "RunConfig",
    "EXPERIMENTS",
    "ENV_PREFIX",
]

EXPERIMENTS = ("bias-bench", "meeting-times", "toy-trace", "fit-ppca")
ENV_PREFIX = "DISIR_"


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


@dataclass
class ModelSection:
    """PPCA instance: dimensions and number of observed datapoints."""

    Dz: int = 10
    Dx: int = 20
    N: int = 10


@dataclass
class ProposalSection:
    """How the linear-Gaussian proposal is obtained.

    ``kind`` is ``"fitted"`` (IWAE fit on ``n_train`` synthetic draws),
    ``"matched"`` (posterior mean map and marginal variances) or
    ``"standard"`` (``N(0, I)``).
    """

    kind: str = "fitted"
    K: int = 100
    steps: int = 1500
    lr: float = 0.01
    batch_size: int = 32
    n_train: int = 2000


@dataclass
class EstimatorSection:
    """Coupled-estimator settings; ``calibrate_steps`` sizes the beta warm-up."""

    K: int = 10
    L: int = 10
    t0: int = 1
    max_iterations: int = 1000
    beta_init: float = 0.5
    beta_policy: str = "fixed"
    calibrate_steps: int = 200

    def to_estimator(self, seed: int, exploit: bool = True, capped_policy: str = "accept", **kw) -> EstimatorConfig:
        return EstimatorConfig(
            K=kw.get("K", self.K), L=self.L, t0=self.t0, max_iterations=self.max_iterations,
            beta_init=kw.get("beta_init", self.beta_init), seed=seed,
            beta_policy=self.beta_policy, exploit=exploit, capped_policy=capped_policy,
        )


@dataclass
class MeetingSection:
    Ks: list = field(default_factory=lambda: [5, 10, 20])
    bins: int = 50


@dataclass
class ToySection:
    kernels: list = field(default_factory=lambda: ["isir", "isir-disir"])
    steps: int = 10000
    K: int = 5
    beta_init: float = 0.5


@dataclass
class FitSection:
    """Maximum-likelihood fitting of PPCA on synthetic data."""

    Dz: int = 5
    Dx: int = 10
    N: int = 200
    epochs: int = 200
    batch_size: int = 50
    lr: float = 0.02
    lr_decay: float = 0.02
    phi_steps: int = 4
    phi_lr: float = 0.01


@dataclass
class BenchSection:
    """Bias-bench output and failure thresholds.

    ``raw_coordinates`` limits the raw-row CSV to these coordinates
    (``null`` keeps all of them).
    """

    estimators: list = field(default_factory=lambda: ["elbo", "iwae", "c-isir", "c-isir-disir"])
    raw_coordinates: Optional[list] = None
    capped_threshold: float = 0.01


_SECTIONS = {
    "model": ModelSection,
    "proposal": ProposalSection,
    "estimator": EstimatorSection,
    "meeting": MeetingSection,
    "toy": ToySection,
    "fit": FitSection,
    "bench": BenchSection,
}

# keys that do not influence results and are excluded from the config hash
_VOLATILE = ("threads", "output")


@dataclass
class RunConfig:
    """Top-level experiment description."""

    experiment: str = "bias-bench"
    seed: int = 0
    replicates: int = 1000
    threads: int = 0
    output: str = "results"
    model: ModelSection = field(default_factory=ModelSection)
    proposal: ProposalSection = field(default_factory=ProposalSection)
    estimator: EstimatorSection = field(default_factory=EstimatorSection)
    meeting: MeetingSection = field(default_factory=MeetingSection)
    toy: ToySection = field(default_factory=ToySection)
    fit: FitSection = field(default_factory=FitSection)
    bench: BenchSection = field(default_factory=BenchSection)

    def __post_init__(self):
        self.validate()

    # -- conversion ---------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        if not isinstance(data, Mapping):
            raise ConfigError("configuration must be a mapping")
        kwargs = {}
        top = {f.name for f in dataclasses.fields(cls)}
        for key, value in data.items():
            if key not in top:
                raise ConfigError(f"unknown key {key!r}")
            if key in _SECTIONS:
                kwargs[key] = _build_section(key, _SECTIONS[key], value)
            else:
                kwargs[key] = value
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML: {exc}") from exc
        return cls.from_dict(data or {})

    @classmethod
    def load(cls, path: Optional[str] = None, env: Optional[Mapping[str, str]] = None) -> "RunConfig":
        """Read ``path`` (or the defaults) and apply environment overrides."""
        data: dict = {}
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    loaded = yaml.safe_load(fh)
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc}") from exc
            except yaml.YAMLError as exc:
                raise ConfigError(f"invalid YAML: {exc}") from exc
            data = dict(loaded or {})
        base = cls.from_dict(data).to_dict()
        apply_env_overrides(base, os.environ if env is None else env)
        return cls.from_dict(base)

    def with_overrides(self, **changes) -> "RunConfig":
        d = self.to_dict()
        d.update(changes)
        return RunConfig.from_dict(d)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form, ignoring ``threads`` and ``output``."""
        d = {k: v for k, v in self.to_dict().items() if k not in _VOLATILE}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # -- validation ---------------------------------------------------------

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}")
        _check_int("seed", self.seed, 0)
        _check_int("replicates", self.replicates, 1)
        _check_int("threads", self.threads, 0)
        m = self.model
        for name in ("Dz", "Dx", "N"):
            _check_int(f"model.{name}", getattr(m, name), 1)
        p = self.proposal
        if p.kind not in ("fitted", "matched", "standard"):
            raise ConfigError("proposal.kind must be fitted, matched or standard")
        for name in ("K", "batch_size", "n_train"):
            _check_int(f"proposal.{name}", getattr(p, name), 1)
        _check_int("proposal.steps", p.steps, 0)
        e = self.estimator
        try:
            e.to_estimator(self.seed)
        except ValueError as exc:
            raise ConfigError(f"estimator: {exc}") from exc
        _check_int("estimator.calibrate_steps", e.calibrate_steps, 2)
        if not self.meeting.Ks or any(not isinstance(k, int) or k < 2 for k in self.meeting.Ks):
            raise ConfigError("meeting.Ks must be a non-empty list of integers >= 2")
        _check_int("meeting.bins", self.meeting.bins, 1)
        t = self.toy
        if not t.kernels or any(k not in ("isir", "isir-disir") for k in t.kernels):
            raise ConfigError("toy.kernels must list isir and/or isir-disir")
        _check_int("toy.steps", t.steps, 0)
        _check_int("toy.K", t.K, 2)
        f = self.fit
        for name in ("Dz", "Dx", "N", "batch_size"):
            _check_int(f"fit.{name}", getattr(f, name), 1)
        _check_int("fit.epochs", f.epochs, 0)
        _check_int("fit.phi_steps", f.phi_steps, 0)
        for name in ("lr", "lr_decay", "phi_lr"):
            if not isinstance(getattr(f, name), (int, float)) or getattr(f, name) < 0:
                raise ConfigError(f"fit.{name} must be a non-negative number")
        b = self.bench
        allowed = ("elbo", "iwae", "c-isir", "c-isir-disir")
        if not b.estimators or any(s not in allowed for s in b.estimators):
            raise ConfigError(f"bench.estimators must be drawn from {allowed}")
        if b.raw_coordinates is not None and any(
            not isinstance(c, int) or c < 0 for c in b.raw_coordinates
        ):
            raise ConfigError("bench.raw_coordinates must be null or a list of indices")
        if not 0.0 <= b.capped_threshold <= 1.0:
            raise ConfigError("bench.capped_threshold must lie in [0, 1]")


def _check_int(name, value, lo):
    if isinstance(value, bool) or not isinstance(value, int) or value < lo:
        raise ConfigError(f"{name} must be an integer >= {lo}, got {value!r}")


def _build_section(name, cls, value):
    if value is None:
        return cls()
    if not isinstance(value, Mapping):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in value:
        if key not in known:
            raise ConfigError(f"unknown key {name}.{key}")
    return cls(**value)


def apply_env_overrides(data: dict, env: Mapping[str, str]) -> None:
    """Apply ``DISIR_SECTION__KEY`` variables to a config dict in place."""
    for var in sorted(env):
        if not var.startswith(ENV_PREFIX):
            continue
        path = var[len(ENV_PREFIX):].lower().split("__")
        target = data
        for part in path[:-1]:
            if not isinstance(target.get(part), dict):
                raise ConfigError(f"{var}: unknown section {part!r}")
            target = target[part]
        key = _match_key(target, path[-1], var)
        try:
            target[key] = yaml.safe_load(env[var])
        except yaml.YAMLError as exc:
            raise ConfigError(f"{var}: cannot parse value") from exc


def _match_key(section: dict, key: str, var: str) -> str:
    # env names are case-insensitive; keys such as ``Dz`` keep their case
    for k in section:
        if k.lower() == key:
            return k
    raise ConfigError(f"{var}: unknown key {key!r}")
