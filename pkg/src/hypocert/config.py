"""INI run configuration with dotted keys (``section.key``) and a fixed schema."""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import (BumpPerturbation, Equilibrium, ModelSpec, PerturbedHarmonic, QuadraticCosPotential,
                    QuadraticPotential, TrigPerturbation, ZeroPerturbation)

REQUIRED = object()


def _floats(text):
    return tuple(float(p) for p in str(text).replace(",", " ").split())


# key -> (parser, default)
SCHEMA = {
    "model.dimension": (int, REQUIRED),
    "model.sigma": (float, REQUIRED),
    "drift.family": (str, REQUIRED),
    "drift.gamma": (float, REQUIRED),
    "drift.k": (float, 1.0),
    "drift.F.family": (str, "zero"),
    "drift.F.delta": (float, 0.0),
    "drift.F.freq": (_floats, None),
    "drift.F.radius": (float, 1.0),
    "drift.F.direction": (_floats, None),
    "drift.potential": (str, "quadratic"),
    "drift.potential.beta": (float, 0.0),
    "grid.nx": (int, 128),
    "grid.nv": (int, 128),
    "grid.halfwidth_x": (float, None),
    "grid.halfwidth_v": (float, None),
    "grid.transport": (str, "upwind3"),
    "evolve.dt": (float, None),
    "evolve.T": (float, 10.0),
    "evolve.snapshots": (int, 11),
    "evolve.init_shift": (float, 1.0),
    "evolve.init_width": (float, 0.7),
    "certify.target_fraction": (float, 0.5),
    "certify.n_pairs": (int, 100_000),
    "certify.workers": (int, 1),
    "certify.route": (str, "auto"),
    "hypo.slack": (float, 0.05),
    "hypo.poincare": (str, "rayleigh"),
    "hypo.t0": (float, 5.0),
    "mc.dt": (float, 0.01),
    "mc.T": (float, 10.0),
    "mc.n_traj": (int, 10_000),
    "mc.integrator": (str, "euler_maruyama"),
    "mc.burn_in": (float, 10.0),
    "mc.n_batches": (int, 1),
    "mc.z0": (_floats, None),
    "mc.z0p": (_floats, None),
    "mc.n_snapshots": (int, 11),
    "output.dir": (str, "out"),
    "run.seed": (int, 0),
}

CHOICES = {
    "drift.family": ("perturbed_harmonic", "equilibrium"),
    "drift.F.family": ("zero", "trig", "bump"),
    "drift.potential": ("quadratic", "quadratic_cos"),
    "grid.transport": ("upwind1", "upwind3"),
    "certify.route": ("auto", "lipschitz", "bounded", "compact"),
    "hypo.poincare": ("rayleigh", "prop2"),
    "mc.integrator": ("euler_maruyama", "splitting_oab"),
}

POSITIVE = {"model.sigma", "drift.gamma", "drift.k", "grid.halfwidth_x", "grid.halfwidth_v", "evolve.dt",
            "drift.F.radius", "mc.dt", "hypo.t0", "model.dimension", "grid.nx", "grid.nv", "mc.n_traj",
            "certify.n_pairs", "certify.workers", "evolve.snapshots", "evolve.init_width", "mc.n_batches"}
NONNEGATIVE = {"drift.F.delta", "evolve.T", "mc.T", "mc.burn_in", "hypo.slack", "run.seed"}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    source: str = ""

    def __getitem__(self, key):
        return self.get(key)

    def get(self, key):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        if key in self.values:
            return self.values[key]
        default = SCHEMA[key][1]
        if default is REQUIRED:
            raise ConfigError(f"missing required config key {key!r}")
        return default

    def with_overrides(self, pairs) -> "RunConfig":
        vals = dict(self.values)
        for item in pairs:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            vals[key.strip()] = _parse(key.strip(), raw.strip())
        return RunConfig(vals, self.source)

    def echo(self) -> str:
        """Resolved configuration as INI text; defaults included, missing required keys omitted."""
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for key in SCHEMA:
            try:
                val = self.get(key)
            except ConfigError:
                continue
            if val is None:
                continue
            section, name = key.split(".", 1)
            if not cp.has_section(section):
                cp.add_section(section)
            cp.set(section, name, " ".join(map(repr, val)) if isinstance(val, tuple) else str(val))
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _parse(key, raw):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    parser = SCHEMA[key][0]
    try:
        val = parser(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value {raw!r} for {key}: {exc}") from None
    if key in CHOICES and val not in CHOICES[key]:
        raise ConfigError(f"{key} must be one of {CHOICES[key]}, got {val!r}")
    if key in POSITIVE and not val > 0:
        raise ConfigError(f"{key} must be positive, got {val!r}")
    if key in NONNEGATIVE and not val >= 0:
        raise ConfigError(f"{key} must be nonnegative, got {val!r}")
    return val


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {source}: {exc}") from None
    vals = {}
    for section in cp.sections():
        for name, raw in cp.items(section):
            vals[f"{section}.{name}"] = _parse(f"{section}.{name}", raw)
    return RunConfig(vals, source)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


def build_model(cfg: RunConfig) -> ModelSpec:
    d = cfg["model.dimension"]
    fam = cfg["drift.family"]
    gamma = cfg["drift.gamma"]
    if fam == "equilibrium":
        k = cfg["drift.k"]
        pot = (QuadraticPotential(k) if cfg["drift.potential"] == "quadratic"
               else QuadraticCosPotential(k, cfg["drift.potential.beta"]))
        return ModelSpec(d, cfg["model.sigma"], Equilibrium(pot, gamma))
    if cfg.get("drift.k") != 1.0:
        raise ConfigError("drift.k applies to the equilibrium family only")
    ff = cfg["drift.F.family"]
    delta = cfg["drift.F.delta"]
    direction = cfg["drift.F.direction"]
    if ff == "zero" or delta == 0:
        pert = ZeroPerturbation()
    elif ff == "trig":
        freq = cfg["drift.F.freq"] or (1.0,) * (2 * d)
        pert = TrigPerturbation(delta, freq, direction)
    else:
        pert = BumpPerturbation(delta, cfg["drift.F.radius"], direction)
    return ModelSpec(d, cfg["model.sigma"], PerturbedHarmonic(gamma, pert))
