"""Run configuration, presets and their resolution into solver inputs."""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from typing import Any, Optional

import yaml

from .errors import ConfigError
from .integrate import SolverConfig
from .model import DriveProfile, PhysParams

KINDS = ("unitary_compare", "master", "sme", "qsd_ensemble", "snr_report", "noise_spectrum", "readout_study")
ENV_PREFIX = "SPINMRFM_"
SPIN_STATES = ("superposition", "up", "down")
SME_SCHEMES = ("kraus", "euler_maruyama", "milstein_diag")


def load_presets() -> dict:
    text = resources.files("spinmrfm").joinpath("presets.yaml").read_text()
    return yaml.safe_load(text)


def preset_names() -> list[str]:
    return sorted(load_presets())


def preset(name: str) -> tuple[PhysParams, DriveProfile]:
    """Parameters and drive of a named preset."""
    presets = load_presets()
    if name not in presets:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(presets)}")
    entry = presets[name]
    params = PhysParams(**entry["params"], metadata={"preset": name})
    return params, DriveProfile(**entry["drive"])


@dataclass
class RunConfig:
    """Everything needed to reproduce one experiment.

    ``None`` fields take the preset's ``run`` defaults.  ``params`` and
    ``drive`` hold field overrides applied on top of the preset.
    """

    kind: str = "qsd_ensemble"
    preset: str = "desk-small"
    params: dict = field(default_factory=dict)
    drive: dict = field(default_factory=dict)
    out_dir: str = "runs/latest"
    n_fock: Optional[int] = None
    t_end: Optional[float] = None
    dt: Optional[float] = None
    full_dt: Optional[float] = None
    record_stride: Optional[int] = None
    scheme: str = "euler_maruyama"
    sme_scheme: str = "kraus"
    chunk_size: int = 100
    workers: int = 1
    n_traj: int = 10
    base_seed: int = 0
    bin_width: Optional[float] = None
    window: Optional[list] = None
    initial_spin: str = "superposition"
    initial_alpha: list = field(default_factory=lambda: [0.0, 0.0])
    hamiltonian: str = "eff"
    drop_constant_force: Optional[bool] = None
    compare_t_end: Optional[float] = None
    compare_n_fock: Optional[int] = None
    omega_grid: list = field(default_factory=lambda: [0.05, 3.0, 600])
    bandwidth: float = 1.0
    g_convention: str = "harmonic"
    truncation_threshold: float = 1e-6
    max_steps: Optional[int] = None
    write_binary: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; choose from {KINDS}")
        if self.initial_spin not in SPIN_STATES:
            raise ConfigError(f"initial_spin must be one of {SPIN_STATES}")
        if self.sme_scheme not in SME_SCHEMES:
            raise ConfigError(f"sme_scheme must be one of {SME_SCHEMES}")
        if self.hamiltonian not in ("eff", "rwa"):
            raise ConfigError("hamiltonian must be 'eff' or 'rwa'")
        if int(self.n_traj) != self.n_traj or self.n_traj < 1:
            raise ConfigError("n_traj must be a positive integer")
        if self.workers < 1:
            raise ConfigError("workers must be positive")
        if self.n_fock is not None and self.n_fock < 2:
            raise ConfigError("n_fock must be at least 2")
        if self.window is not None and (len(self.window) != 2 or self.window[1] <= self.window[0]):
            raise ConfigError("window must be [start, end] with end > start")
        if len(self.initial_alpha) != 2:
            raise ConfigError("initial_alpha must be [re, im]")

    # serialization
    def to_dict(self) -> dict:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError("configuration file must hold a mapping")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        with open(path) as fh:
            return cls.from_yaml(fh.read())

    def with_overrides(self, **changes) -> "RunConfig":
        data = self.to_dict()
        data.update({k: v for k, v in changes.items() if v is not None})
        return RunConfig.from_dict(data)

    def with_env(self, environ: Optional[dict] = None) -> "RunConfig":
        """Apply ``SPINMRFM_<FIELD>`` overrides, parsed as YAML scalars."""
        env = os.environ if environ is None else environ
        changes: dict[str, Any] = {}
        known = {f.name for f in fields(self)}
        for key, raw in env.items():
            if not key.startswith(ENV_PREFIX):
                continue
            name = key[len(ENV_PREFIX):].lower()
            if name not in known:
                raise ConfigError(f"environment override {key} names no configuration field")
            changes[name] = yaml.safe_load(raw)
        return self.with_overrides(**changes)


@dataclass
class ResolvedRun:
    """A configuration with preset defaults filled in and objects built."""

    config: RunConfig
    params: PhysParams
    profile: DriveProfile
    solver: SolverConfig
    n_fock: int
    t_end: float
    window: tuple
    bin_width: float
    full_dt: float
    drop_constant_force: bool
    compare_t_end: float
    compare_n_fock: int
    collapse_deadline: Optional[float]

    def echo(self) -> dict:
        """Fully resolved configuration echo."""
        data = self.config.to_dict()
        data.update(n_fock=self.n_fock, t_end=self.t_end, window=list(self.window), bin_width=self.bin_width,
                    full_dt=self.full_dt, dt=self.solver.dt, record_stride=self.solver.record_stride,
                    drop_constant_force=self.drop_constant_force, compare_t_end=self.compare_t_end,
                    compare_n_fock=self.compare_n_fock)
        return data


def resolve(config: RunConfig) -> ResolvedRun:
    """Merge preset defaults, overrides and derived defaults."""
    presets = load_presets()
    if config.preset not in presets:
        raise ConfigError(f"unknown preset {config.preset!r}; available: {sorted(presets)}")
    entry = presets[config.preset]
    pdata = dict(entry["params"])
    unknown = set(config.params) - {f.name for f in fields(PhysParams)}
    if unknown:
        raise ConfigError(f"unknown parameter overrides: {sorted(unknown)}")
    pdata.update(config.params)
    params = PhysParams(**pdata, metadata={"preset": config.preset})
    ddata = dict(entry["drive"])
    ddata.update(config.drive)
    profile = DriveProfile(**ddata)
    run = entry.get("run", {})

    def pick(name, default=None):
        val = getattr(config, name)
        return val if val is not None else run.get(name, default)

    dt = float(pick("dt", 1e-3))
    stride = int(pick("record_stride", 1))
    t_end = float(pick("t_end", 100.0))
    n_fock = int(pick("n_fock", 32))
    record_dt = dt * stride
    period = 2 * math.pi / params.omega_m
    if config.bin_width is not None:
        bin_width = float(config.bin_width)
    else:
        # nominal period/20, snapped to a whole number of record intervals
        bin_width = record_dt * max(1, round(period / 20 / record_dt))
    window = pick("window")
    if window is None:
        start = (profile.t_switch if profile.kind == "paper_ramp_sine" else 0.0) + 10 * period
        window = (start, t_end)
    solver = SolverConfig(dt=dt, scheme=config.scheme, seed=int(config.base_seed) % 2 ** 64, record_stride=stride,
                          truncation_threshold=config.truncation_threshold, chunk_size=config.chunk_size,
                          max_steps=config.max_steps, energy_scale=params.hbar * params.omega_m)
    return ResolvedRun(
        config=config, params=params, profile=profile, solver=solver, n_fock=n_fock, t_end=t_end,
        window=(float(window[0]), float(window[1])), bin_width=bin_width,
        full_dt=float(pick("full_dt", 2e-6)),
        drop_constant_force=bool(pick("drop_constant_force", False)),
        compare_t_end=float(pick("compare_t_end", min(t_end, 40.0))),
        compare_n_fock=int(pick("compare_n_fock", n_fock)),
        collapse_deadline=run.get("collapse_deadline"),
    )
