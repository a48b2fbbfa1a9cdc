"""JSON run configuration.

One file drives every subcommand.  Unknown keys are rejected and every
tolerance must be positive.  Two model kinds exist: the built-in recursive
utility consumption game (``"recursive_utility"``) and a linear coefficient
table (``"table"``) where drift, volatility, drivers and terminal values are
affine in (X, Y1, Y2, L1, L2, u1, u2).
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Annotated, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, ValidationError, field_validator

from .errors import ConfigError
from .malliavin import DEFAULT_CATALOG, PHIS


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridConfig(_Strict):
    T: PositiveFloat = 1.0
    n_steps: PositiveInt = 100


class JumpConfig(_Strict):
    intensity: float = Field(0.0, ge=0)
    marks: list[float] = [0.0]
    probs: list[float] = [1.0]


class Affine(_Strict):
    """const + sum of coefficient * coordinate."""

    const: float = 0.0
    X: float = 0.0
    Y1: float = 0.0
    Y2: float = 0.0
    L1: float = 0.0
    L2: float = 0.0
    u1: float = 0.0
    u2: float = 0.0

    def __call__(self, st) -> np.ndarray:
        out = self.const + self.X * st.X
        for k, name in enumerate(("Y1", "Y2")):
            c = getattr(self, name)
            if c:
                out = out + c * st.Y[k]
        for k, name in enumerate(("L1", "L2")):
            c = getattr(self, name)
            if c:
                out = out + c * st.L[k]
        for k, name in enumerate(("u1", "u2")):
            c = getattr(self, name)
            if c:
                out = out + c * st.U[k]
        return np.broadcast_to(out, st.X.shape).astype(float)


class TablePlayer(_Strict):
    """Driver a W + running(state), terminal W(T) = h0 + hx X(T), constant control."""

    a: float = 0.0
    running: Affine = Affine()
    h0: float = 0.0
    hx: float = 0.0
    control: float = 0.0
    bounds: tuple[float, float] = (-1e6, 1e6)


class TableModel(_Strict):
    kind: Literal["table"]
    x0: float = 1.0
    delta: tuple[float, float] = (0.0, 0.0)
    drift: Affine = Affine()
    vol: Affine = Affine()
    # jump amplitude per unit mark: gamma(zeta) = jump(state) * zeta
    jump: Affine = Affine()
    scheme: Literal["euler", "log-euler"] = "euler"
    players: tuple[TablePlayer, TablePlayer] = (TablePlayer(), TablePlayer())


class RecursiveModel(_Strict):
    kind: Literal["recursive_utility"]
    alpha: tuple[float | list[float], float | list[float]] = (0.0, 0.1)
    eta: tuple[float | list[float], float | list[float]] = (0.0, 1.0)
    kappa: tuple[float, float] = (0.0, 0.0)
    delta: tuple[float, float] = (0.2, 0.5)
    mu: float = 0.05
    sigma: float = 0.2
    x0: PositiveFloat = 1.0
    c_bounds: tuple[PositiveFloat, PositiveFloat] = (1e-4, 1e4)


class TolerancesConfig(_Strict):
    gap_rel: PositiveFloat = 1e-4
    deriv_rel: PositiveFloat = 0.02
    hamiltonian_rel: PositiveFloat = 0.05
    concavity: PositiveFloat = 1e-8
    best_response: PositiveFloat = 0.05
    xp: PositiveFloat = 0.02


class SolverConfig(_Strict):
    n_paths: PositiveInt = 4000
    basis: list[str] | None = None  # coordinates; model default when omitted
    degree: PositiveInt = 2
    ridge: float = Field(1e-8, ge=0)
    scheme: Literal["left", "implicit", "right", "trapezoid"] | None = None
    n_bins: PositiveInt = 10
    concavity_samples: PositiveInt = 10_000
    tolerances: TolerancesConfig = TolerancesConfig()


class MalliavinConfig(_Strict):
    catalog: list[str] = list(DEFAULT_CATALOG)
    phis: list[str] = list(PHIS)
    chunk: PositiveInt = 100_000

    @field_validator("phis")
    @classmethod
    def _known_phis(cls, v):
        bad = [p for p in v if p not in PHIS]
        if bad:
            raise ValueError(f"unknown phi {bad}; choose from {sorted(PHIS)}")
        return v


class CandidateConfig(_Strict):
    """``closed-form`` (recursive utility only, optionally scaled), ``constant``
    (one value per player) or ``values`` (per-step schedules)."""

    kind: Literal["closed-form", "constant", "values"]
    scale: tuple[PositiveFloat, PositiveFloat] = (1.0, 1.0)
    constant: tuple[float, float] | None = None
    values: tuple[list[float], list[float]] | None = None


class OutputConfig(_Strict):
    paths_csv: bool = True
    max_csv_paths: PositiveInt | None = None


class RunConfig(_Strict):
    seed: int = Field(0, ge=0)
    out: str = "out"
    grid: GridConfig = GridConfig()
    model: Annotated[Union[RecursiveModel, TableModel], Field(discriminator="kind")] = RecursiveModel(
        kind="recursive_utility")
    jumps: JumpConfig = JumpConfig()
    solver: SolverConfig = SolverConfig()
    malliavin: MalliavinConfig = MalliavinConfig()
    candidate: CandidateConfig | None = None
    output: OutputConfig = OutputConfig()


def _describe(err: ValidationError, text: str | None) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"])
        where = ""
        if text is not None and e["loc"]:
            key = f'"{e["loc"][-1]}"'
            for k, line in enumerate(text.splitlines(), 1):
                if key in line:
                    where = f" (line {k})"
                    break
        lines.append(f"{loc or '<root>'}{where}: {e['msg']}")
    return "; ".join(lines)


def parse_config(data: dict | str, text: str | None = None) -> RunConfig:
    """Validate a dict or JSON text; ConfigError names the offending fields."""
    if isinstance(data, str):
        text = data
        try:
            data = json.loads(data)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_describe(e, text)) from None


def load_config(path: str | Path | None, **overrides) -> RunConfig:
    """Read ``path`` (defaults when None) and apply CLI overrides that are not None."""
    if path is None:
        cfg = RunConfig()
    else:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        cfg = parse_config(text)
    return apply_overrides(cfg, **overrides)


def apply_overrides(cfg: RunConfig, seed=None, out=None, paths=None, steps=None) -> RunConfig:
    data = cfg.model_dump()
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        data["out"] = out
    if paths is not None:
        data["solver"]["n_paths"] = paths
    if steps is not None:
        data["grid"]["n_steps"] = steps
    return parse_config(data)
