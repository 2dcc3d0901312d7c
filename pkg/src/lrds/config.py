"""Run configuration: an INI-style file of ``key = value`` lines under
``[section]`` headers, read into typed dataclasses. Unknown sections and keys
are rejected."""
from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .errors import ConfigError
from .model import (
    INTERCEPT_MEAN,
    INTERCEPT_VAR,
    CompactSupport,
    FixedBasis,
    ModelParams,
    PredictiveProcessBasis,
    regular_grid,
)
from .numerics import SymMatrix

MODES = ("combine", "likelihood", "importance", "em", "filter", "sir", "verify")


@dataclass
class ModelSection:
    basis: str = "predictive_process"
    correlation: str = "matern"
    support_range: float = 0.0
    knots_x: Tuple[float, float] = (-125.0, -70.0)
    knots_y: Tuple[float, float] = (20.0, 50.0)
    knot_spacing: float = 5.0
    intercept: bool = True
    intercept_mean: float = INTERCEPT_MEAN
    intercept_var: float = INTERCEPT_VAR
    intercept_innovation_var: float = 0.0
    jitter: float = 0.0
    evaluator: str = "bisquare"
    width: float = 7.5
    prior_var: float = 1.0


@dataclass
class ParamsSection:
    alpha: float = 0.8
    sigma: float = 5.0
    smoothness: float = 1.25
    scale: float = 15.0
    fine_scale_var: float = 0.5


@dataclass
class InferenceSection:
    mode: str = "combine"
    particles: int = 1000
    walk_scale: float = 0.1
    weight_floor: float = 1e-4
    seed: int = 0
    em_max_iter: int = 1000
    em_tol: float = 1e-6
    em_trace: str = "omega"
    em_pooled: bool = False
    em_one_pass: bool = False
    verify_cap: int = 2000
    times: int = 0


@dataclass
class TransportSection:
    carrier: str = "inprocess"
    endpoints: List[str] = field(default_factory=list)
    port: Optional[int] = None
    timeout: float = 300.0


@dataclass
class DataSection:
    shards: List[str] = field(default_factory=list)


@dataclass
class PredictionSection:
    grid_x: Optional[Tuple[float, float]] = None
    grid_y: Optional[Tuple[float, float]] = None
    spacing: float = 0.5


@dataclass
class SimulateSection:
    servers: int = 3
    times: int = 6
    n: int = 30000
    noise_sd: List[float] = field(default_factory=lambda: [0.75, 2.0, 4.5])
    domain_x: Tuple[float, float] = (-125.0, -70.0)
    domain_y: Tuple[float, float] = (20.0, 50.0)


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    params: ParamsSection = field(default_factory=ParamsSection)
    inference: InferenceSection = field(default_factory=InferenceSection)
    transport: TransportSection = field(default_factory=TransportSection)
    data: DataSection = field(default_factory=DataSection)
    prediction: PredictionSection = field(default_factory=PredictionSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)

    # -- derived objects --

    def model_params(self) -> ModelParams:
        p = self.params
        return ModelParams.natural(alpha=p.alpha, sigma=p.sigma, smoothness=p.smoothness,
                                   scale=p.scale, fine_scale_var=p.fine_scale_var)

    def knots(self) -> np.ndarray:
        m = self.model
        return regular_grid(m.knots_x, m.knots_y, m.knot_spacing)

    def basis_spec(self):
        m = self.model
        if m.basis == "predictive_process":
            if m.correlation == "matern":
                corr = "matern"
            elif m.correlation == "spherical":
                corr = CompactSupport(m.support_range)
            else:
                raise ConfigError(f"unknown correlation {m.correlation!r}")
            return PredictiveProcessBasis(self.knots(), corr, m.intercept, m.intercept_mean,
                                          m.intercept_var)
        if m.basis == "fixed":
            k = len(self.knots())
            return FixedBasis(m.evaluator, self.knots(), m.width,
                              SymMatrix.identity(k) * (1.0 / m.prior_var), m.intercept,
                              m.intercept_mean, m.intercept_var)
        raise ConfigError(f"unknown basis kind {m.basis!r}")

    def prediction_grid(self) -> Optional[np.ndarray]:
        p = self.prediction
        if p.grid_x is None or p.grid_y is None:
            return None
        return regular_grid(p.grid_x, p.grid_y, p.spacing)

    def validate(self):
        if self.inference.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}")
        if self.transport.carrier not in ("inprocess", "socket"):
            raise ConfigError("carrier must be inprocess or socket")
        if self.inference.em_trace not in ("marginal", "omega"):
            raise ConfigError("em_trace must be marginal or omega")
        if self.inference.particles < 1:
            raise ConfigError("particles must be at least 1")
        if self.simulate.servers < 1 or len(self.simulate.noise_sd) < self.simulate.servers:
            raise ConfigError("need one noise_sd per simulated server")
        return self


def _convert(text: str, tp, where: str):
    text = text.strip()
    origin = getattr(tp, "__origin__", None)
    args = getattr(tp, "__args__", ())
    if origin is not None and type(None) in args:  # Optional[X]
        if text.lower() in ("", "none"):
            return None
        inner = next(a for a in args if a is not type(None))
        return _convert(text, inner, where)
    try:
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        if origin is tuple:
            parts = [float(x) for x in text.split(",")]
            if len(parts) != len(args):
                raise ValueError(f"expected {len(args)} comma-separated numbers")
            return tuple(parts)
        if origin is list:
            items = [x.strip() for x in text.replace("\n", ",").split(",") if x.strip()]
            return [float(x) for x in items] if args[0] is float else items
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {text!r}: {exc}") from None
    raise ConfigError(f"{where}: unsupported type {tp}")


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = RunConfig()
    sections = {f.name: f for f in dataclasses.fields(RunConfig)}
    for name in cp.sections():
        if name not in sections:
            raise ConfigError(f"{source}: unknown section [{name}]")
        target = getattr(cfg, name)
        hints = typing.get_type_hints(type(target))
        for key, value in cp.items(name):
            if key not in hints:
                raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
            setattr(target, key, _convert(value, hints[key], f"[{name}] {key}"))
    return cfg.validate()


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


def dump_config(cfg: RunConfig) -> str:
    """Render a config back to text that parse_config accepts."""
    lines = []
    for sec in dataclasses.fields(RunConfig):
        obj = getattr(cfg, sec.name)
        lines.append(f"[{sec.name}]")
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if v is None:
                text = "none"
            elif isinstance(v, (tuple, list)):
                text = ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, float):
                text = repr(v)
            else:
                text = str(v)
            lines.append(f"{f.name} = {text}")
        lines.append("")
    return "\n".join(lines)
