"""Run configuration: INI-style ``key = value`` files read with :mod:`configparser`.

Section ``[env]`` key ``dt`` is addressed as ``env.dt`` in overrides and in
the flat echo stored inside checkpoints.  Example::

    [env]
    kind = surface

    [run]
    seed = 7
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .environments import ConfigError, EnvSpec
from .trainer import NetConfig, OptConfig, StageSchedule, make_schedule

__all__ = ["RunConfig", "load_config", "parse_config", "KIND_DEFAULTS"]

# Table 3 settings for the two benchmark tasks; the quadratic oracle env has none.
KIND_DEFAULTS = {
    "surface": {"env.d_S": "64", "env.H": "20", "env.dt": "0.01", "schedule.mode": "budget",
                "schedule.total": "5000"},
    "grid": {"env.d_S": "256", "env.H": "20", "env.dt": "0.01", "env.fine_factor": "4",
             "schedule.mode": "budget", "schedule.total": "5000"},
    "quadratic": {"env.d_S": "2", "schedule.mode": "budget"},
}
REQUIRED = {
    "surface": (),
    "grid": (),
    "quadratic": ("env.H", "env.dt"),
}

# key -> (parser, default); None default means "no default".
FIELDS = {
    "env.kind": (str, None),
    "env.d_S": (int, None),
    "env.H": (int, None),
    "env.dt": (float, None),
    "env.fine_factor": (int, "4"),
    "env.score_form": (str, "legendre"),
    "env.surface_mode": (str, "spline"),
    "env.density": (int, "1024"),
    "env.A": (str, ""),
    "env.rho0.r_low": (float, ""),
    "env.rho0.r_high": (float, ""),
    "env.rho0.v_low": (float, ""),
    "env.rho0.v_high": (float, ""),
    "env.rho0.scale": (float, ""),
    "schedule.mode": (str, "budget"),
    "schedule.total": (int, ""),
    "schedule.eps": (float, ""),
    "schedule.delta": (float, "0.05"),
    "schedule.C": (float, "1.0"),
    "schedule.cap": (int, "1000000"),
    "net.hidden": (str, "64,64"),
    "net.activation": (str, "tanh"),
    "net.init_scale": (float, "0.01"),
    "net.bound": (float, ""),
    "optimizer.lr": (float, "0.001"),
    "optimizer.batch": (int, "32"),
    "optimizer.epochs": (int, "50"),
    "optimizer.plateau": (float, "1e-6"),
    "optimizer.beta": (float, "1.0"),
    "optimizer.warm_start": (str, "true"),
    "run.seed": (int, "0"),
    "run.out_dir": (str, "runs/default"),
}


def _parse_matrix(text, d):
    if not text:
        return None
    rows = [r for r in text.replace("\n", ";").split(";") if r.strip()]
    A = np.array([[float(v) for v in r.replace(",", " ").split()] for r in rows])
    if A.size == d and A.ndim == 2 and A.shape[0] == 1 and d > 1:
        A = A.reshape(int(round(np.sqrt(d))), -1)
    return A


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    """Validated, fully resolved run description."""

    flat: dict
    env: EnvSpec
    schedule: StageSchedule
    net: NetConfig
    optimizer: OptConfig
    seed: int
    out_dir: Path = field(default=Path("runs/default"))

    def echo(self) -> dict:
        """Every resolved key as a string, suitable for a checkpoint header."""
        return dict(self.flat)


def _flatten(cp: configparser.ConfigParser):
    flat = {}
    for section in cp.sections():
        for key, value in cp.items(section, raw=True):
            flat[f"{section}.{key}"] = value.strip()
    return flat


def parse_config(flat: dict, overrides=None) -> RunConfig:
    """Validate a flat ``{dotted.key: text}`` mapping; raises :class:`ConfigError` listing every bad field."""
    flat = {k: str(v) for k, v in flat.items()}
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE", [item])
        k, v = item.split("=", 1)
        flat[k.strip()] = v.strip()
    problems = []
    unknown = sorted(k for k in flat if k not in FIELDS)
    if unknown:
        problems += [(k, "unknown key") for k in unknown]
    kind = flat.get("env.kind", "").strip().lower()
    if not kind:
        raise ConfigError("missing required field env.kind", ["env.kind"])
    if kind not in KIND_DEFAULTS:
        raise ConfigError(f"env.kind must be one of {sorted(KIND_DEFAULTS)}, got {kind!r}", ["env.kind"])
    for k in REQUIRED[kind]:
        if not flat.get(k):
            problems.append((k, f"required for env.kind = {kind}"))
    resolved = {k: d for k, (_, d) in FIELDS.items() if d is not None}
    resolved.update(KIND_DEFAULTS[kind])
    resolved.update({k: v for k, v in flat.items() if k in FIELDS})
    resolved["env.kind"] = kind
    values = {}
    for k, (conv, _) in FIELDS.items():
        text = resolved.get(k)
        if text is None or text == "":
            values[k] = None
            continue
        try:
            values[k] = conv(text)
        except ValueError:
            problems.append((k, f"cannot parse {text!r} as {conv.__name__}"))
    if kind == "quadratic" and values.get("schedule.mode") == "budget" and values.get("schedule.total") is None:
        problems.append(("schedule.total", "required for a budget schedule"))
    if problems:
        raise ConfigError("invalid configuration: " + "; ".join(f"{k}: {m}" for k, m in problems),
                          [k for k, _ in problems])
    try:
        rho0 = {k.split(".")[-1]: v for k, v in values.items() if k.startswith("env.rho0.") and v is not None}
        env = EnvSpec(kind=kind, d_S=values["env.d_S"], H=values["env.H"], dt=values["env.dt"],
                      fine_factor=values["env.fine_factor"], rho0=rho0, seed=values["run.seed"],
                      score_form=values["env.score_form"],
                      A=_parse_matrix(resolved.get("env.A", ""), values["env.d_S"]),
                      surface_mode=values["env.surface_mode"], density=values["env.density"])
        schedule = make_schedule(values["schedule.mode"], env.H, total=values["schedule.total"],
                                 eps=values["schedule.eps"], delta=values["schedule.delta"], d=env.phase_dim,
                                 C=values["schedule.C"], cap=values["schedule.cap"])
        hidden = tuple(int(w) for w in values["net.hidden"].replace(" ", "").split(",") if w)
        if not hidden or min(hidden) < 1:
            raise ConfigError("net.hidden must list positive widths", ["net.hidden"])
        net = NetConfig(hidden, values["net.activation"], values["net.init_scale"], values["net.bound"])
        if net.activation not in ("tanh", "softplus", "sigmoid"):
            raise ConfigError("net.activation must be tanh, softplus or sigmoid", ["net.activation"])
        opt = OptConfig(values["optimizer.lr"], values["optimizer.batch"], values["optimizer.epochs"],
                        values["optimizer.plateau"], values["optimizer.beta"],
                        _bool(resolved["optimizer.warm_start"]))
        if opt.learning_rate <= 0 or opt.batch_size < 1 or opt.epochs < 1 or opt.beta <= 0:
            raise ConfigError("optimizer.lr, batch, epochs and beta must be positive",
                              ["optimizer.lr", "optimizer.batch", "optimizer.epochs", "optimizer.beta"])
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc), ["optimizer.warm_start"]) from exc
    seed = values["run.seed"]
    if not 0 <= seed < 2 ** 64:
        raise ConfigError("run.seed must be a 64-bit unsigned integer", ["run.seed"])
    echo = {k: v for k, v in resolved.items() if v != ""}
    return RunConfig(echo, env, schedule, net, opt, seed, Path(values["run.out_dir"]))


def load_config(path, overrides=None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    path = Path(path)
    try:
        with path.open(encoding="utf-8") as fh:
            cp.read_file(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: no such config file", ["config"]) from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}", ["config"]) from exc
    return parse_config(_flatten(cp), overrides)
