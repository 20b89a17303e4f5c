"""Experiment configuration: YAML documents validated by pydantic models."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Annotated, Literal, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError, model_validator

from .errors import SpecError

Prob = Annotated[float, Field(gt=0, lt=1)]
Pos = Annotated[float, Field(gt=0)]


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SpecRef(Strict):
    """Either a builtin name with parameter overrides, or an inline description."""

    builtin: str | None = None
    params: dict = {}
    inline: dict | None = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.builtin is None) == (self.inline is None):
            raise ValueError("give exactly one of 'builtin' or 'inline'")
        if self.inline is not None and self.params:
            raise ValueError("'params' only applies to builtins")
        return self


class DiscreteRun(Strict):
    n_max: Annotated[int, Field(ge=1, le=2000)] = 40
    ergodic_check: bool = False
    ergodic_gap_multiple: Pos = 50.0
    simulate_events: Annotated[int, Field(ge=0, le=100_000_000)] = 0
    seed: Annotated[int, Field(ge=0)] = 0


class DiscreteAssert(Strict):
    max_abs_error: Pos = 1e-8
    balance_max: Pos = 1e-10
    ergodic_tv_max: Pos = 1e-6
    sim_tv_max: Pos | None = None


class SimRun(Strict):
    x0_n: Annotated[int, Field(ge=0)] = 0
    x0_z: list[float] | None = None
    horizon: Pos = 100.0
    dt: Annotated[float, Field(gt=0, le=0.1)] = 1e-3
    seed: Annotated[int, Field(ge=0)] = 0
    replicas: Annotated[int, Field(ge=1, le=1024)] = 1
    n_cap: Annotated[int, Field(ge=0, le=200)] = 12
    bins: Annotated[int, Field(ge=1, le=1000)] = 30
    burn_in: Annotated[float, Field(ge=0)] | None = None  # absolute time; None means 20% of the horizon
    adaptive: bool = True
    speed_cap: Annotated[float, Field(ge=1)] = 1000.0
    queue: bool = True
    reflection: Literal["fold", "clamp"] = "fold"
    max_steps: Annotated[int, Field(ge=1)] = 2_000_000_000
    workers: Annotated[int, Field(ge=1, le=64)] = 1

    @model_validator(mode="after")
    def _burn_before_end(self):
        if self.burn_in is not None and self.burn_in >= self.horizon:
            raise ValueError("burn_in must be shorter than the horizon")
        return self


class DiffusiveAssert(Strict):
    global_tv_max: Pos | None = 0.05
    queue_tv_max: Pos | None = None
    env_tv_max: Pos | None = None


class ThresholdAssert(Strict):
    layer_tv_max: Pos = 0.05
    layers: Annotated[int, Field(ge=0)] = 10


class CertificateRun(Strict):
    alpha: Annotated[float, Field(gt=1)]
    gamma: Pos
    lambda_bar: Pos
    mu_bar: Pos
    margin: Annotated[float, Field(ge=0)] = 0.01
    grid: Annotated[int, Field(ge=10, le=2000)] = 200
    c: Annotated[float, Field(gt=1)] | None = None
    epsilon: Prob | None = None
    robert_ns: list[Annotated[int, Field(ge=0)]] = []
    robert_ts: list[Pos] = []

    @model_validator(mode="after")
    def _pair(self):
        if (self.c is None) != (self.epsilon is None):
            raise ValueError("'c' and 'epsilon' must be given together")
        if self.lambda_bar >= self.mu_bar:
            raise ValueError("need lambda_bar < mu_bar")
        return self


class CertificateAssert(Strict):
    kappa_positive: bool = True
    given_feasible: bool = True


class ClockRun(Strict):
    T: list[list[Annotated[float, Field(ge=0)]]]
    Lambdas: list[Pos]
    runs: Annotated[int, Field(ge=100, le=10_000_000)] = 10_000
    t_points: Annotated[int, Field(ge=2, le=1000)] = 20
    t_max: Pos = 3.0
    start: tuple[int, int] = (0, 1)


class JointRun(Strict):
    x1: tuple[int, float]
    x2: tuple[int, float]
    c: Annotated[float, Field(gt=1)] = 1.2
    runs: Annotated[int, Field(ge=100, le=10_000_000)] = 10_000
    k_max: Annotated[int, Field(ge=1, le=1000)] = 10
    alpha: Annotated[float, Field(gt=1)] = 1.0001
    dt: Pos = 1e-3
    horizon: Pos = 1e6


class CouplingRun(Strict):
    seed: Annotated[int, Field(ge=0)] = 0
    clock: ClockRun | None = None
    joint: JointRun | None = None

    @model_validator(mode="after")
    def _some(self):
        if self.clock is None and self.joint is None:
            raise ValueError("give a 'clock' and/or a 'joint' section")
        return self


class CouplingAssert(Strict):
    dkw_level: Prob = 0.05
    se_multiple: Pos = 3.0


class TvDecayRun(Strict):
    n_max: Annotated[int, Field(ge=1, le=2000)] = 60
    n0s: list[Annotated[int, Field(ge=0)]] = [0, 3, 6]
    ts: list[Pos] = [0.5, 1.0, 2.0, 4.0, 8.0]
    alpha: Annotated[float, Field(gt=1)] = 1.0001
    margin: Annotated[float, Field(ge=0)] = 0.01


class TvDecayAssert(Strict):
    check_slope: bool = True


class MgfRun(Strict):
    alpha: Annotated[float, Field(ge=1)]
    beta: Pos
    gamma: Pos
    a: Annotated[float, Field(ge=0)]
    samples: Annotated[int, Field(ge=1000, le=100_000_000)] = 100_000
    seed: Annotated[int, Field(ge=0)] = 0
    eta: Literal["exponential"] = "exponential"

    @model_validator(mode="after")
    def _a(self):
        if self.a >= self.beta + self.gamma:
            raise ValueError("need a < beta + gamma for a finite moment")
        return self


class MgfAssert(Strict):
    se_multiple: Pos = 3.0


class _Base(Strict):
    name: str | None = None
    output: str | None = None


class StationaryDiscrete(_Base):
    kind: Literal["stationary-discrete"]
    spec: SpecRef
    run: DiscreteRun = DiscreteRun()
    assertions: DiscreteAssert = DiscreteAssert()


class StationaryDiffusive(_Base):
    kind: Literal["stationary-diffusive"]
    spec: SpecRef
    run: SimRun = SimRun()
    assertions: DiffusiveAssert = DiffusiveAssert()


class StationaryThreshold(_Base):
    kind: Literal["stationary-threshold"]
    spec: SpecRef
    run: SimRun = SimRun()
    assertions: ThresholdAssert = ThresholdAssert()


class RateCertificateCfg(_Base):
    kind: Literal["rate-certificate"]
    run: CertificateRun
    assertions: CertificateAssert = CertificateAssert()


class CouplingHarness(_Base):
    kind: Literal["coupling-harness"]
    spec: SpecRef | None = None
    run: CouplingRun
    assertions: CouplingAssert = CouplingAssert()

    @model_validator(mode="after")
    def _spec(self):
        if self.run.joint is not None and self.spec is None:
            raise ValueError("the 'joint' section needs a 'spec'")
        return self


class TvDecay(_Base):
    kind: Literal["tv-decay"]
    spec: SpecRef
    run: TvDecayRun = TvDecayRun()
    assertions: TvDecayAssert = TvDecayAssert()


class MgfLemma(_Base):
    kind: Literal["mgf-lemma"]
    run: MgfRun
    assertions: MgfAssert = MgfAssert()


ExperimentConfig = Annotated[
    Union[StationaryDiscrete, StationaryDiffusive, StationaryThreshold, RateCertificateCfg,
          CouplingHarness, TvDecay, MgfLemma],
    Field(discriminator="kind"),
]
KINDS = ("stationary-discrete", "stationary-diffusive", "stationary-threshold", "rate-certificate",
         "coupling-harness", "tv-decay", "mgf-lemma")
_ADAPTER = TypeAdapter(ExperimentConfig)


class ConfigError(SpecError):
    """Config could not be read or validated; ``errors`` holds field-level messages."""

    def __init__(self, msg: str, errors: list[str] | None = None):
        super().__init__(msg)
        self.errors = errors or [msg]


def _fmt(err) -> str:
    parts = [str(x) for x in err["loc"]]
    if parts and parts[0] in KINDS:
        parts = parts[1:]
    loc = ".".join(x for x in parts if not x.startswith("function-"))
    return f"{loc or '<root>'}: {err['msg']}"


def parse_config(data) -> BaseModel:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping at the top level")
    try:
        return _ADAPTER.validate_python(data)
    except ValidationError as e:
        msgs = [_fmt(x) for x in e.errors()]
        raise ConfigError("invalid config:\n  " + "\n  ".join(msgs), msgs) from None


def load_config(path) -> BaseModel:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read {p}: {e.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{p} is not valid YAML: {e}") from None
    return parse_config(data)


def with_overrides(cfg: BaseModel, seed: int | None = None, replicas: int | None = None) -> BaseModel:
    """Apply command-line overrides; both live in the ``run`` section."""
    run = cfg.run
    upd = {}
    if seed is not None:
        if "seed" not in type(run).model_fields:
            raise ConfigError(f"--seed does not apply to {cfg.kind}")
        upd["seed"] = seed
    if replicas is not None:
        if "replicas" not in type(run).model_fields:
            raise ConfigError(f"--replicas does not apply to {cfg.kind}")
        upd["replicas"] = replicas
    if not upd:
        return cfg
    data = cfg.model_dump(mode="json")
    data["run"].update(upd)
    return parse_config(data)


def config_hash(cfg: BaseModel) -> str:
    """sha256 of the canonical JSON form, ignoring the output directory."""
    data = cfg.model_dump(mode="json", exclude={"output"})
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
