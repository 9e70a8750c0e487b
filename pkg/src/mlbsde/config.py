"""Experiment configuration: YAML file, strict schema, built-in presets."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

SCHEME_NAMES = ("ml", "mdp", "mdp2", "split-ml", "split-mdp")
BASIS_KINDS = ("hermite", "equiprobable", "equiprobable-affine", "uniform", "uniform-affine")


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ProblemSpec(Strict):
    name: Literal["sine", "product", "gooddeal"]
    params: dict = Field(default_factory=dict)


class GridSpec(Strict):
    beta: float = 1.0
    k_min: int = 2
    k_max: int = 7

    @model_validator(mode="after")
    def _range(self):
        if not 0 <= self.k_min <= self.k_max:
            raise ValueError(f"need 0 <= k_min <= k_max, got {self.k_min}..{self.k_max}")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        return self


class BasisSpec(Strict):
    kind: Literal["hermite", "equiprobable", "equiprobable-affine", "uniform", "uniform-affine"]
    label: Optional[str] = None
    degree: int = 7
    cells_per_axis: int = 8
    low: float = -3.0
    high: float = 3.0
    probe_size: int = 1 << 17

    @property
    def name(self) -> str:
        return self.label or self.kind


class ScheduleSpec(Strict):
    """How many paths each run gets.

    ``sine``: ML top level ``factor * K * 2^k`` doubling downward, MDP
    ``factor * K * 2^k``, MDP2 ``factor * K * 4^k``.
    ``constant``: ``M`` paths at every level and every time point.
    ``explicit``: ML lists and MDP sizes per final level.
    ``calibrate``: precision-driven sizes for ``epsilon``.
    """

    kind: Literal["sine", "constant", "explicit", "calibrate"] = "constant"
    M: int = 100_000
    factor: int = 40
    ml: dict[int, list[int]] = Field(default_factory=dict)
    mdp: dict[int, int] = Field(default_factory=dict)
    residual: Optional[int] = None
    epsilon: float = 0.01
    c_K: float = 1.0
    c_M: float = 1.0

    @field_validator("M")
    @classmethod
    def _positive(cls, v):
        if v < 1:
            raise ValueError("M must be positive")
        return v


class ExperimentConfig(Strict):
    name: str = "experiment"
    problem: Union[ProblemSpec, Literal["sine", "product", "gooddeal"]]
    schemes: list[Literal["ml", "mdp", "mdp2", "split-ml", "split-mdp"]]
    grid: GridSpec = Field(default_factory=GridSpec)
    bases: list[BasisSpec]
    residual_basis: Optional[BasisSpec] = None
    schedule: ScheduleSpec = Field(default_factory=ScheduleSpec)
    seeds: list[int] = Field(default_factory=lambda: [0])
    n_eval: int = 100_000
    eval_seed: Optional[int] = None
    mode: Optional[Literal["exact", "euler-subsample", "euler-coupled"]] = None
    mem_budget: Optional[int] = None
    threads: int = 1
    table_aggregate_y: Literal["max", "mean", "t0"] = "max"

    @field_validator("problem")
    @classmethod
    def _problem(cls, v):
        return ProblemSpec(name=v) if isinstance(v, str) else v

    @field_validator("schemes")
    @classmethod
    def _schemes(cls, v):
        if not v:
            raise ValueError("at least one scheme is required")
        if len(set(v)) != len(v):
            raise ValueError("schemes must be distinct")
        return v

    @field_validator("bases")
    @classmethod
    def _bases(cls, v):
        if not v:
            raise ValueError("at least one basis is required")
        names = [b.name for b in v]
        if len(set(names)) != len(names):
            raise ValueError("basis labels must be distinct")
        return v

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if not v:
            raise ValueError("at least one seed is required")
        if any(s < 0 or s >= 2**64 for s in v):
            raise ValueError("seeds are unsigned 64-bit integers")
        return v


class ConfigError(ValueError):
    pass


def _line_of(node, loc) -> int | None:
    """Line (1-based) of the YAML node at the pydantic error location, as far as it exists."""
    line = node.start_mark.line + 1 if node is not None else None
    for part in loc:
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for key, val in node.value:
                if key.value == str(part):
                    nxt = val
                    line = key.start_mark.line + 1
                    break
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
            node = node.value[part]
            line = node.start_mark.line + 1
        else:
            break
        if node is None:
            break
    return line


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        msgs = []
        for err in exc.errors():
            loc = [p for p in err["loc"] if not (isinstance(p, str) and p in ("ProblemSpec", "literal['sine','product','gooddeal']"))]
            line = _line_of(root, loc)
            where = ".".join(str(p) for p in loc) or "<root>"
            msgs.append(f"{source}:{line if line else '?'}: {where}: {err['msg']}")
        raise ConfigError("\n".join(msgs)) from None


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


# -- presets: the published experiment parameters ----------------------------------------

PRESETS: dict[str, dict] = {
    "sine-fig1": {
        "name": "sine-fig1",
        "problem": {"name": "sine", "params": {"C_phi": 1.0, "C_x": 1.0}},
        "schemes": ["ml", "mdp", "mdp2"],
        "grid": {"k_min": 2, "k_max": 7},
        "bases": [{"kind": "hermite", "degree": 7, "label": "hermite"}],
        "schedule": {"kind": "sine", "factor": 40},
        "seeds": [0, 1, 2, 3, 4],
        "n_eval": 10_000,
    },
    "table-multid": {
        "name": "table-multid",
        "problem": {"name": "product", "params": {"dim": 3}},
        "schemes": ["ml", "mdp"],
        "grid": {"k_min": 2, "k_max": 7},
        "bases": [
            {"kind": "equiprobable-affine", "cells_per_axis": 5, "label": "linear"},
            {"kind": "equiprobable", "cells_per_axis": 8, "label": "indicator"},
        ],
        "schedule": {"kind": "constant", "M": 2_000_000},
        "seeds": [0],
        "n_eval": 100_000,
    },
    "gooddeal": {
        "name": "gooddeal",
        "problem": "gooddeal",
        "schemes": ["split-ml", "mdp"],
        "grid": {"k_min": 1, "k_max": 5},
        "bases": [{"kind": "equiprobable", "cells_per_axis": 50, "label": "indicator"}],
        "schedule": {"kind": "constant", "M": 2_000_000},
        "seeds": [0],
        "n_eval": 100_000,
    },
}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    return ExperimentConfig.model_validate(PRESETS[name])
