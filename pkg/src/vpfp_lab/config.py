"""INI configuration for the command-line tool.

Sections mirror the modules; every key has a default, so an empty file (or
no file) is a valid configuration. ``section.key=value`` overrides are
applied on top of the file.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .experiments import ExperimentConfig, F0Spec, PDEConfig


class ConfigError(ValueError):
    """Unreadable file, unknown key, or a value that fails validation."""


@dataclass(frozen=True)
class SimulateConfig:
    n: int = 512
    record_every: int = 100
    record_particles: int = 16


@dataclass(frozen=True)
class CheckConfig:
    n: int = 64
    replicas: int = 8
    n_list: tuple[int, ...] = (64, 128)
    pde_nx: int = 128
    pde_nv: int = 128
    pde_dt: float = 0.02
    moment_samples: int = 4000
    fluctuation_replicas: int = 200
    binomial_replicas: int = 20000
    rope_samples: int = 100000


@dataclass(frozen=True)
class LabConfig:
    experiment: ExperimentConfig = ExperimentConfig()
    kernel_eta: float = 0.0
    simulate: SimulateConfig = SimulateConfig()
    check: CheckConfig = CheckConfig()
    # -1 means "draw a fresh seed at start-up"
    run_seed: int = -1

    def __post_init__(self):
        if not -1 <= self.run_seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


# (section, key) -> (path into LabConfig, attribute)
def _table():
    t = {}
    for f in fields(F0Spec):
        t[("f0", f.name)] = (("experiment", "f0"), f.name)
    t[("kernel", "interaction")] = (("experiment",), "interaction")
    t[("kernel", "eta")] = ((), "kernel_eta")
    for k in ("dt", "t_end", "scheme"):
        t[("integrator", k)] = (("experiment",), k)
    for f in fields(PDEConfig):
        t[("pde", f.name)] = (("experiment", "pde"), f.name)
    skip = {"f0", "interaction", "dt", "t_end", "scheme", "pde", "seed", "threads"}
    for f in fields(ExperimentConfig):
        if f.name not in skip:
            t[("experiment", f.name)] = (("experiment",), f.name)
    for f in fields(SimulateConfig):
        t[("simulate", f.name)] = (("simulate",), f.name)
    for f in fields(CheckConfig):
        t[("check", f.name)] = (("check",), f.name)
    t[("run", "seed")] = ((), "run_seed")
    t[("run", "threads")] = (("experiment",), "threads")
    return t


KEYS = _table()


def _get(obj, path):
    for p in path:
        obj = getattr(obj, p)
    return obj


def _set(obj, path, attr, value):
    if not path:
        return replace(obj, **{attr: value})
    child = _set(getattr(obj, path[0]), path[1:], attr, value)
    return replace(obj, **{path[0]: child})


def _convert(text: str, current):
    text = text.strip()
    if isinstance(current, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple):
        items = [s for s in (p.strip() for p in text.split(",")) if s]
        elem = type(current[0]) if current else float
        return tuple(elem(s) for s in items)
    return text


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def apply_setting(cfg: LabConfig, section: str, key: str, text: str) -> LabConfig:
    try:
        path, attr = KEYS[(section, key)]
    except KeyError:
        raise ConfigError(f"unknown config key [{section}] {key}") from None
    cur = getattr(_get(cfg, path), attr)
    try:
        return _set(cfg, path, attr, _convert(text, cur))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {key} = {text!r}: {exc}") from None


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> LabConfig:
    cfg = LabConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(p, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from None
        for section in parser.sections():
            for key, val in parser.items(section):
                cfg = apply_setting(cfg, section, key, val)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        lhs, val = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        cfg = apply_setting(cfg, section, key, val)
    return cfg


def config_dict(cfg: LabConfig) -> dict[str, dict[str, str]]:
    """Resolved configuration as ``{section: {key: text}}``; feeds back into ``load_config``."""
    out: dict[str, dict[str, str]] = {}
    for (section, key), (path, attr) in KEYS.items():
        out.setdefault(section, {})[key] = _format(getattr(_get(cfg, path), attr))
    return out


def config_text(cfg: LabConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_dict(config_dict(cfg))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()

