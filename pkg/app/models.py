import logging
from typing import List, Literal, Optional, Tuple

import orjson
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from harper.arithmetic import Frequency, resolve_frequency
from harper.config import OUTPUT_DIR, WORKERS_DEFAULT, ConfigError
from harper.operator import Coupling
from harper.spectrum import MAX_SITES

logger = logging.getLogger(__name__)

# fields that never change numeric output
RUNTIME_FIELDS = {"workers", "output_dir", "cache"}


class FrequencySpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["value", "cf", "liouville", "golden"]
    value: Optional[float] = None
    coeffs: Optional[List[int]] = None
    target_beta: Optional[float] = None
    depth: int = 30

    @model_validator(mode="after")
    def _check_kind(self):
        if self.kind == "value" and self.value is None:
            raise ValueError("kind 'value' needs 'value'")
        if self.kind == "cf" and not self.coeffs:
            raise ValueError("kind 'cf' needs 'coeffs'")
        if self.kind == "liouville":
            if self.target_beta is None:
                raise ValueError("kind 'liouville' needs 'target_beta'")
            if not 1 <= self.depth <= 12:
                raise ValueError(f"liouville depth must lie in [1, 12], got {self.depth}")
        return self


class RunConfig(BaseModel):
    """One desk-scale run. Precedence: defaults < JSON config file < CLI flags."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    coupling: Tuple[float, float, float] = (0.0, 2.0, 0.0)
    frequency: FrequencySpec = FrequencySpec(kind="golden")
    n: int = 1000
    phase_count: int = 64
    fourier_cutoff: int = 128
    M: int = 400
    seed: int = 0
    output_dir: str = OUTPUT_DIR
    cache: bool = True
    workers: int = WORKERS_DEFAULT

    @field_validator("frequency", mode="before")
    @classmethod
    def _shorthand(cls, v):
        if v == "golden":
            return {"kind": "golden"}
        if isinstance(v, (int, float)):
            return {"kind": "value", "value": float(v)}
        return v

    @field_validator("coupling")
    @classmethod
    def _coupling(cls, v):
        try:
            Coupling(l1=v[0], l2=v[1], l3=v[2])
        except ValidationError as e:
            raise ValueError(e.errors()[0]["msg"]) from e
        return v

    @field_validator("n", "phase_count", "fourier_cutoff", "M", "workers")
    @classmethod
    def _positive(cls, v):
        if v < 1:
            raise ValueError(f"must be >= 1, got {v}")
        return v

    @model_validator(mode="after")
    def _site_guard(self):
        if self.n * self.phase_count > MAX_SITES:
            raise ValueError(f"n * phase_count = {self.n * self.phase_count} exceeds {MAX_SITES}")
        return self

    def coupling_model(self) -> Coupling:
        return Coupling(l1=self.coupling[0], l2=self.coupling[1], l3=self.coupling[2])

    def frequency_model(self) -> Frequency:
        return resolve_frequency(self.frequency.model_dump(), depth=self.frequency.depth)

    def identity(self) -> dict:
        """Config fields that determine numeric output."""
        return self.model_dump(mode="json", exclude=RUNTIME_FIELDS)


def _format_errors(exc: ValidationError) -> str:
    return "; ".join(f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in exc.errors())


def load_run_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    data: dict = {}
    if path:
        try:
            with open(path, "rb") as f:
                data = orjson.loads(f.read())
        except (OSError, orjson.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        config = RunConfig(**data)
    except ValidationError as e:
        raise ConfigError(f"invalid config: {_format_errors(e)}") from e
    logger.info(f"Run config: {config.identity()}")
    return config


def parse_frequency_flag(text: str) -> dict:
    """'golden', a float, 'cf:1,10' or 'liouville:BETA:DEPTH'."""
    if text == "golden":
        return {"kind": "golden"}
    if text.startswith("cf:"):
        try:
            return {"kind": "cf", "coeffs": [int(a) for a in text[3:].split(",")]}
        except ValueError as e:
            raise ConfigError(f"frequency: bad cf coefficients in {text!r}") from e
    if text.startswith("liouville:"):
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError(f"frequency: expected liouville:BETA:DEPTH, got {text!r}")
        try:
            return {"kind": "liouville", "target_beta": float(parts[1]), "depth": int(parts[2])}
        except ValueError as e:
            raise ConfigError(f"frequency: bad liouville parameters in {text!r}") from e
    try:
        return {"kind": "value", "value": float(text)}
    except ValueError as e:
        raise ConfigError(f"frequency: cannot parse {text!r}") from e
