"""Run configuration: ``section.key = value`` text format.

Lines are ``section.key = value``; ``#`` starts a comment; blank lines are
ignored. Lists are comma separated. Unknown sections or keys are errors.

Defaults
--------
=====================  =========================================
geometry.nx            16
geometry.ny            8
geometry.length        2.0
geometry.height        1.0
geometry.layout        single  (or two_outlets)
physics.r .. rho_q     ConstitutiveParams defaults (r=2.5, q=4.5, ...)
physics.forcing        none  (or ``constant:fx,fy``)
physics.form           rotational  (or standard)
data.inlet             parabolic  (or zero)
data.inlet_peak        1.0
data.fluxes            empty: inlet flux, split evenly over outlets
data.u0                none  (or vortex: compact stream-function bump)
data.u0_amplitude      0.1
data.D                 0.0
solver.eps_ladder      0.4, 0.2, 0.1
solver.grad_tol        1e-6
solver.step_tol        1e-7
solver.max_iter        2000
solver.memory          20
solver.kappa           1e4
solver.h_t             0 (meaning min(eps_ladder) / 4)
solver.T_obs           1.0
solver.seed            42
solver.reference       true
solver.korn_starts     20
output.directory       wideflow_out
output.formats         csv  (csv and/or vtk)
=====================  =========================================
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Any, Optional

import numpy as np

from . import constitutive as cv

__all__ = [
    "ConfigError",
    "GeometryConfig",
    "PhysicsConfig",
    "DataConfig",
    "SolverConfig",
    "OutputConfig",
    "RunConfig",
    "parse_config",
    "emit_config",
    "validate_config",
]


class ConfigError(ValueError):
    """Parse or validation failure; ``errors`` lists every problem found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class GeometryConfig:
    nx: int = 16
    ny: int = 8
    length: float = 2.0
    height: float = 1.0
    layout: str = "single"


@dataclass(frozen=True)
class PhysicsConfig:
    r: float = 2.5
    q: float = 4.5
    sigma2: float = 0.1
    sigma_r: float = 0.1
    sigma4: float = 0.01
    sigma_q: float = 0.01
    rho2: float = 0.1
    rho_r: float = 0.1
    rho4: float = 0.01
    rho_q: float = 0.01
    forcing: str = "none"
    form: str = "rotational"

    def params(self, eps: float = 0.1) -> cv.ConstitutiveParams:
        return cv.ConstitutiveParams(r=self.r, q=self.q, sigma2=self.sigma2, sigma_r=self.sigma_r,
                                     sigma4=self.sigma4, sigma_q=self.sigma_q, rho2=self.rho2,
                                     rho_r=self.rho_r, rho4=self.rho4, rho_q=self.rho_q, eps=eps)

    def forcing_vector(self):
        """Constant body force ``(fx, fy)`` or None."""
        if self.forcing == "none":
            return None
        fx, fy = (float(s) for s in self.forcing.split(":", 1)[1].split(","))
        return fx, fy


@dataclass(frozen=True)
class DataConfig:
    inlet: str = "parabolic"
    inlet_peak: float = 1.0
    fluxes: tuple = ()
    u0: str = "none"
    u0_amplitude: float = 0.1
    D: float = 0.0


@dataclass(frozen=True)
class SolverConfig:
    eps_ladder: tuple = (0.4, 0.2, 0.1)
    grad_tol: float = 1e-6
    step_tol: float = 1e-7
    max_iter: int = 2000
    memory: int = 20
    kappa: float = 1e4
    h_t: float = 0.0
    T_obs: float = 1.0
    seed: int = 42
    reference: bool = True
    korn_starts: int = 20

    @property
    def time_step(self) -> float:
        return self.h_t if self.h_t > 0 else min(self.eps_ladder) / 4.0


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "wideflow_out"
    formats: tuple = ("csv",)


@dataclass(frozen=True)
class RunConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    output: OutputConfig = field(default_factory=OutputConfig)


_SECTIONS = {f.name: f.default_factory for f in fields(RunConfig)}


def _convert(raw: str, default: Any):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        val = float(raw)
        if val != int(val):
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(val)
    if isinstance(default, float):
        val = float(raw)
        if not math.isfinite(val):
            raise ValueError(f"expected a finite number, got {raw!r}")
        return val
    if isinstance(default, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        proto = default[0] if default else 0.0
        if isinstance(proto, str):
            return tuple(items)
        return tuple(float(s) for s in items)
    return raw


def parse_config(text: str) -> RunConfig:
    """Parse configuration text; unknown keys and malformed lines are errors.

    Raises
    ------
    ConfigError
        With one message per offending line (``line <n>: ...``) followed by
        aggregated validation errors.
    """
    errors = []
    values = {name: {} for name in _SECTIONS}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            errors.append(f"line {lineno}: expected 'section.key = value'")
            continue
        key, raw = (s.strip() for s in body.split("=", 1))
        if "." not in key:
            errors.append(f"line {lineno}: key {key!r} lacks a section")
            continue
        sec, name = key.split(".", 1)
        if sec not in _SECTIONS:
            errors.append(f"line {lineno}: unknown section {sec!r}")
            continue
        proto = _SECTIONS[sec]()
        if name not in {f.name for f in fields(proto)}:
            errors.append(f"line {lineno}: unknown key {key!r}")
            continue
        if name in values[sec]:
            errors.append(f"line {lineno}: duplicate key {key!r}")
            continue
        try:
            values[sec][name] = _convert(raw, getattr(proto, name))
        except ValueError as exc:
            errors.append(f"line {lineno}: {key}: {exc}")
    if errors:
        raise ConfigError(errors)
    cfg = RunConfig(**{sec: replace(_SECTIONS[sec](), **vals) for sec, vals in values.items()})
    problems = validate_config(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".17g")
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def emit_config(cfg: RunConfig) -> str:
    """Text that :func:`parse_config` maps back to ``cfg``."""
    lines = []
    for sec in _SECTIONS:
        block = getattr(cfg, sec)
        for f in fields(block):
            lines.append(f"{sec}.{f.name} = {_format(getattr(block, f.name))}")
        lines.append("")
    return "\n".join(lines)


def validate_config(cfg: RunConfig) -> list:
    """Aggregated cross-field checks; returns a list of messages (empty if valid)."""
    out = []
    g, ph, d, s, o = cfg.geometry, cfg.physics, cfg.data, cfg.solver, cfg.output
    if g.nx < 2 or g.ny < 2:
        out.append("geometry: nx and ny must be >= 2")
    if not (g.length > 0 and g.height > 0):
        out.append("geometry: length and height must be positive")
    if g.layout not in ("single", "two_outlets"):
        out.append(f"geometry.layout: unknown layout {g.layout!r}")
    elif g.layout == "two_outlets" and g.ny < 3:
        out.append("geometry: two_outlets needs ny >= 3")
    try:
        ph.params(min(s.eps_ladder) if s.eps_ladder else 0.1)
    except cv.ParameterError as exc:
        out.append(f"physics: {exc}")
    if ph.form not in ("rotational", "standard"):
        out.append(f"physics.form: unknown form {ph.form!r}")
    if ph.forcing != "none":
        try:
            if not ph.forcing.startswith("constant:"):
                raise ValueError
            ph.forcing_vector()
        except ValueError:
            out.append("physics.forcing: expected 'none' or 'constant:fx,fy'")
    if d.inlet not in ("parabolic", "zero"):
        out.append(f"data.inlet: unknown profile {d.inlet!r}")
    if d.u0 not in ("none", "vortex"):
        out.append(f"data.u0: unknown initial state {d.u0!r}")
    n_out = 2 if g.layout == "two_outlets" else 1
    if d.fluxes and len(d.fluxes) != n_out:
        out.append(f"data.fluxes: {n_out} value(s) expected, got {len(d.fluxes)}")
    lad = s.eps_ladder
    if not lad:
        out.append("solver.eps_ladder: empty")
    elif any(e <= 0 for e in lad) or any(b >= a for a, b in zip(lad, lad[1:])):
        out.append("solver.eps_ladder: must be positive and strictly decreasing")
    elif s.time_step > min(lad) / 4.0 * (1 + 1e-12):
        out.append("solver.h_t: must satisfy h_t <= min(eps_ladder) / 4")
    if s.h_t < 0:
        out.append("solver.h_t: must be >= 0 (0 selects min(eps)/4)")
    if s.T_obs <= 0:
        out.append("solver.T_obs: must be positive")
    if s.grad_tol <= 0 or s.kappa <= 0:
        out.append("solver: grad_tol and kappa must be positive")
    if s.max_iter < 0 or s.memory < 1:
        out.append("solver: max_iter >= 0 and memory >= 1 required")
    bad = [f for f in o.formats if f not in ("csv", "vtk")]
    if bad:
        out.append(f"output.formats: unknown format(s) {', '.join(bad)}")
    return out
