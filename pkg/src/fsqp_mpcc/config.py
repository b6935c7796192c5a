"""YAML configuration files and experiment specs.

A config file has optional sections ``vehicle``, ``ocp``, ``solver``,
``controller`` and ``terminal``.  An experiment spec names a track file, a
config file and a terminal artifact (paths relative to the spec file) plus
the run settings.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import yaml

from .fsqp import Mode, SolverSettings
from .ocp import OcpConfig
from .vehicle import VehicleParams

SECTIONS = ("vehicle", "ocp", "solver", "controller", "terminal")


def data_path(name: str) -> Path:
    """Path of a file shipped in the package ``data`` directory."""
    return Path(str(resources.files("fsqp_mpcc") / "data" / name))


@dataclass(frozen=True)
class TerminalOptions:
    T: int = 180
    T_tilde: Optional[int] = None
    margin: float = 0.03


@dataclass(frozen=True)
class Config:
    params: VehicleParams = field(default_factory=VehicleParams)
    ocp: OcpConfig = field(default_factory=OcpConfig)
    solver: SolverSettings = field(default_factory=SolverSettings)
    M_max: int = 5
    terminal: TerminalOptions = field(default_factory=TerminalOptions)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Config":
        data = data or {}
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        ctl = dict(data.get("controller") or {})
        M_max = int(ctl.pop("M_max", 5))
        if ctl:
            raise ValueError(f"unknown controller settings: {sorted(ctl)}")
        if M_max < 0:
            raise ValueError("M_max must be nonnegative")
        term = data.get("terminal") or {}
        try:
            topts = TerminalOptions(**term)
        except TypeError as exc:
            raise ValueError(f"bad terminal settings: {exc}") from None
        return cls(
            params=VehicleParams.from_dict(data.get("vehicle") or {}),
            ocp=OcpConfig.from_dict(data.get("ocp") or {}),
            solver=SolverSettings.from_dict(data.get("solver") or {}),
            M_max=M_max,
            terminal=topts,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "vehicle": self.params.to_dict(),
            "ocp": self.ocp.to_dict(),
            "solver": self.solver.to_dict(),
            "controller": {"M_max": self.M_max},
            "terminal": {"T": self.terminal.T, "T_tilde": self.terminal.T_tilde,
                         "margin": self.terminal.margin},
        }


def _read_yaml(path: Path) -> dict:
    try:
        with path.open() as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ValueError(f"{path}: {exc.strerror}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping at top level")
    return data


def load_config(path) -> Config:
    path = Path(path)
    try:
        return Config.from_dict(_read_yaml(path))
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{path}: {exc}") from None


@dataclass(frozen=True)
class ExperimentSpec:
    """One closed-loop experiment.  ``noise`` is the half-width in metres of
    the uniform displacement added to ``p_x`` and ``p_y`` each step."""

    track: Path
    config: Path
    terminal: Path
    modes: tuple[Mode, ...] = (Mode.FSQP,)
    laps: int = 10
    noise: float = 0.0
    seed: int = 0
    out: Path = Path("runs/out")

    def __post_init__(self) -> None:
        object.__setattr__(self, "modes", tuple(Mode(m) for m in self.modes))
        if not self.modes:
            raise ValueError("at least one solver mode is required")
        if int(self.laps) != self.laps or self.laps < 1:
            raise ValueError("laps must be an integer >= 1")
        if not self.noise >= 0:
            raise ValueError("noise must be nonnegative")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ValueError("seed must be a nonnegative integer")

    def with_(self, **changes) -> "ExperimentSpec":
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return {"track": str(self.track), "config": str(self.config), "terminal": str(self.terminal),
                "modes": [m.value for m in self.modes], "laps": self.laps, "noise": self.noise,
                "seed": self.seed, "out": str(self.out)}


def load_spec(path) -> ExperimentSpec:
    """Read an experiment spec.  Input files resolve against the spec's
    directory, ``out`` against the working directory."""
    path = Path(path)
    data = _read_yaml(path)
    missing = [k for k in ("track", "config", "terminal") if k not in data]
    if missing:
        raise ValueError(f"{path}: missing keys {missing}")
    base = path.parent
    known = {"track", "config", "terminal", "modes", "laps", "noise", "seed", "out"}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"{path}: unknown keys {sorted(unknown)}")
    try:
        return ExperimentSpec(
            track=(base / data["track"]).resolve(),
            config=(base / data["config"]).resolve(),
            terminal=(base / data["terminal"]).resolve(),
            modes=tuple(data.get("modes", ["fsqp"])),
            laps=data.get("laps", 10),
            noise=float(data.get("noise", 0.0)),
            seed=data.get("seed", 0),
            out=Path(data.get("out", "runs/out")),
        )
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{path}: {exc}") from None
