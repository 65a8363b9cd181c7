"""Run configuration shared by the command-line front-end.

A config file is plain text with one ``key = value`` pair per line. Blank
lines and ``#`` comments are ignored, except lines starting with ``#@ ``:
those carry the config embedded in a report, so a report can be fed back in
as a config file.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .data import Schema
from .exceptions import ConfigError
from .kernels import DEFAULT_GRID
from .shortfall import TAILS, WEIGHT_MODES, EstimatorConfig
from .simulation import ESTIMATORS, SCENARIOS, DgpSpec

EMBED_PREFIX = "#@ "
FORMATS = ("csv", "json")
CI_METHODS = ("normal", "percentile")


@dataclass(frozen=True)
class RunConfig:
    mode: str = "estimate"
    # estimate
    input: str = ""
    response: str = "y"
    treatment: str = "d"
    instrument: str = "v"
    continuous: tuple = ()
    discrete: tuple = ()
    weight_mode: str = "proposed"
    # simulate
    scenario: str = "continuous_x"
    n: int = 500
    R: int = 200
    estimators: tuple = ESTIMATORS
    # estimator
    alphas: tuple = (0.3,)
    tail: str = "lower"
    kernel_order_pi: int = 2
    kernel_order_v: int = 2
    grid: tuple = DEFAULT_GRID
    sigma1: float | None = None
    sigma2: float | None = None
    cv_folds: int = 5
    cv_seed: int = 0
    standardize: bool = False
    pi_clip: float = 0.01
    # inference
    B: int = 200
    level: float = 0.95
    ci_method: str = "normal"
    reselect_bandwidths: bool = False
    seed: int = 0
    # output
    output: str = ""
    table: str = ""
    format: str = "csv"
    threads: int = 1

    def __post_init__(self):
        if self.mode not in ("estimate", "simulate"):
            raise ConfigError(f"mode must be 'estimate' or 'simulate', got {self.mode!r}")
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.weight_mode not in WEIGHT_MODES:
            raise ConfigError(f"weight_mode must be one of {WEIGHT_MODES}, got {self.weight_mode!r}")
        if self.mode == "estimate" and self.weight_mode == "oracle":
            raise ConfigError("weight_mode 'oracle' needs latent complier labels and is only available in simulate")
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad or not self.estimators:
            raise ConfigError(f"estimators must be a nonempty subset of {ESTIMATORS}, got {self.estimators!r}")
        if self.tail not in TAILS:
            raise ConfigError(f"tail must be one of {TAILS}, got {self.tail!r}")
        if self.format not in FORMATS:
            raise ConfigError(f"format must be one of {FORMATS}, got {self.format!r}")
        if self.ci_method not in CI_METHODS:
            raise ConfigError(f"ci_method must be one of {CI_METHODS}, got {self.ci_method!r}")
        if self.B != 0 and self.B < 2:
            raise ConfigError(f"B must be 0 (no bootstrap) or at least 2, got {self.B}")
        if self.mode == "simulate" and self.B < 2:
            raise ConfigError("simulate needs B >= 2")
        if self.R < 2:
            raise ConfigError(f"R must be at least 2, got {self.R}")
        if self.n < 1:
            raise ConfigError(f"n must be positive, got {self.n}")
        if self.threads < 1 and self.threads != -1:
            raise ConfigError(f"threads must be positive or -1 (all cores), got {self.threads}")
        if not 0.0 < self.level < 1.0:
            raise ConfigError(f"level must lie in (0, 1), got {self.level}")
        if self.cv_folds < 2:
            raise ConfigError(f"cv_folds must be at least 2, got {self.cv_folds}")
        if not 0.0 < self.pi_clip < 0.5:
            raise ConfigError(f"pi_clip must lie in (0, 0.5), got {self.pi_clip}")
        self.estimator_config()  # validates alphas, kernels and bandwidths

    def estimator_config(self) -> EstimatorConfig:
        return EstimatorConfig(
            alphas=self.alphas, tail=self.tail, weight_mode=self.weight_mode,
            kernel_order_pi=self.kernel_order_pi, kernel_order_v=self.kernel_order_v,
            grid=self.grid, sigma1=self.sigma1, sigma2=self.sigma2, cv_folds=self.cv_folds,
            cv_seed=self.cv_seed, standardize=self.standardize, pi_clip=self.pi_clip,
        )

    def schema(self) -> Schema:
        try:
            return Schema(self.response, self.treatment, self.instrument, self.continuous, self.discrete)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def dgp(self) -> DgpSpec:
        return DgpSpec(n=self.n, scenario=self.scenario, seed=self.seed)

    def replace(self, **changes) -> "RunConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_lines(self) -> list[str]:
        """``key = value`` lines in field order."""
        return [f"{k} = {format_value(v)}".rstrip() for k, v in asdict(self).items()]

    def to_text(self) -> str:
        return "\n".join(self.to_lines()) + "\n"


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
KEYS = tuple(FIELD_TYPES)


def format_value(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    return str(v)


def _parse_bool(key, text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"config key '{key}': expected true/false, got {text!r}")


def _parse_list(key, text, cast):
    parts = [p.strip() for p in text.split(",") if p.strip()]
    try:
        return tuple(cast(p) for p in parts)
    except ValueError:
        raise ConfigError(f"config key '{key}': cannot parse {text!r}") from None


def parse_value(key: str, text):
    """Convert a string (or JSON scalar) to the type of config field ``key``."""
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key '{key}'")
    if not isinstance(text, str):
        if isinstance(text, list):
            text = ",".join(format_value(x) for x in text)
        else:
            text = format_value(text) if text is not None else "auto"
    text = text.strip()
    kind = FIELD_TYPES[key]
    try:
        if kind == "bool":
            return _parse_bool(key, text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "float | None":
            return None if text.lower() in ("auto", "cv", "none", "") else float(text)
    except ValueError:
        raise ConfigError(f"config key '{key}': cannot parse {text!r}") from None
    if kind == "tuple":
        cast = float if key in ("alphas", "grid") else str
        return _parse_list(key, text, cast)
    return text


def parse_config_text(text: str) -> dict:
    """Key/value pairs from config-file text, or from a JSON report."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            doc = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc.msg} at line {exc.lineno}") from None
        raw = doc.get("config", doc) if isinstance(doc, dict) else None
        if not isinstance(raw, dict):
            raise ConfigError("JSON config must be an object")
        return {k: parse_value(k, v) for k, v in raw.items()}
    lines = list(enumerate(text.splitlines(), start=1))
    embedded = [(k, ln.strip()[len(EMBED_PREFIX):]) for k, ln in lines if ln.strip().startswith(EMBED_PREFIX)]
    if embedded:
        lines = embedded  # a report: only its embedded config counts
    out = {}
    for lineno, line in lines:
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {s!r}")
        key, value = (p.strip() for p in s.split("=", 1))
        try:
            out[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"config line {lineno}: {exc}") from None
    return out


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    return parse_config_text(text)


def build_config(mode: str, file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then config-file values, then explicit overrides."""
    values = dict(file_values or {})
    if "mode" in values and values["mode"] != mode:
        raise ConfigError(f"config file is for mode '{values['mode']}', command is '{mode}'")
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    values["mode"] = mode
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
