"""Declarative experiment configuration (INI files with a fixed schema).

Unknown sections or keys and unparsable values are hard errors that name the
offending key and its line.  Every key has a default, so a config file only
needs the values it changes.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

EXPERIMENTS = ("particles", "hybrid_forecast", "repressilator", "oversmoothing")

ENV_OUTPUT_DIR = "NEURALGDE_OUTPUT_DIR"
ENV_SEED = "NEURALGDE_SEED"


class ConfigError(ValueError):
    pass


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.replace(",", " ").split()]


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(",", " ").split()]


def _words(text: str) -> list[str]:
    return [x for x in text.replace(",", " ").split()]


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# (parser, default) per key; defaults are strings so they go through the same parser
_COMMON = {
    "experiment": {
        "name": (str, "particles"),
        "seeds": (_ints, "0 1 2"),
        "output_dir": (str, "runs"),
        "wall_clock": (_bool, "false"),
    },
    "training": {
        "epochs": (int, "100"),
        "lr": (float, "0.01"),
        "lr_min": (float, "0.0"),
        "schedule": (str, "constant"),
        "T0": (int, "10"),
        "peak_epoch": (int, "0"),
    },
}

_SPECIFIC = {
    "particles": {
        "data": {"n": (int, "10"), "T": (float, "5.0"), "dt": (float, "0.00195"), "stride": (int, "10"),
                 "alpha": (float, "1.0"), "beta": (float, "0.5"), "r": (float, "1.0"),
                 "sample_every": (int, "2")},
        "model": {"models": (_words, "gcde neural_ode static"), "hidden": (int, "16"),
                  "baseline_hidden": (int, "64"), "ks": (_ints, "1 2 3 4 5")},
        "training": {"epochs": (int, "200")},
    },
    "hybrid_forecast": {
        "data": {"n_stations": (int, "16"), "days": (float, "14"), "base_dt": (float, "0.020833333333333332"),
                 "keep_probs": (_floats, "0.3"), "window": (int, "5"), "time_unit": (float, "10")},
        "model": {"models": (_words, "gcde_gru gcgru gru"), "nz": (int, "16"),
                  "rtol": (float, "1e-4"), "atol": (float, "1e-6")},
        "training": {"epochs": (int, "40"), "schedule": (str, "cosine")},
    },
    "repressilator": {
        "data": {"n_train": (int, "10"), "n_test": (int, "10"), "T": (float, "300"), "tau": (float, "0.5"),
                 "every": (int, "10"), "time_scale": (float, "50")},
        "model": {"hidden": (int, "16"), "sigma_obs": (float, "0.1"), "diffusion_scale": (float, "0.1"),
                  "h": (float, "0.1"), "n_samples": (int, "20")},
        "training": {"epochs": (int, "100")},
    },
    "oversmoothing": {
        "data": {"n_per_block": (int, "50")},
        "model": {"hidden": (int, "16"), "spans": (_floats, "1 10"), "h": (float, "0.5")},
        "training": {"epochs": (int, "100")},
    },
}


def schema(experiment: str) -> dict:
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}; expected one of {EXPERIMENTS}")
    out = {sec: dict(keys) for sec, keys in _COMMON.items()}
    for sec, keys in _SPECIFIC[experiment].items():
        out.setdefault(sec, {}).update(keys)
    return out


@dataclass
class ExperimentConfig:
    experiment: str
    values: dict
    source: str = "<defaults>"
    lines: dict = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def seeds(self) -> list[int]:
        return list(self.values["experiment"]["seeds"])

    @property
    def output_dir(self) -> Path:
        return Path(self.values["experiment"]["output_dir"])

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "values": self.values}

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()

    def set(self, dotted: str, text: str, where: str = "override"):
        """Apply ``section.key=value`` with the schema's parser."""
        if "." not in dotted:
            raise ConfigError(f"{where}: expected section.key, got {dotted!r}")
        section, key = dotted.split(".", 1)
        self.values[section][key] = _parse_value(schema(self.experiment), section, key, text, where)


def _parse_value(sch: dict, section: str, key: str, text: str, where: str):
    if section not in sch:
        raise ConfigError(f"{where}: unknown section [{section}]")
    if key not in sch[section]:
        raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
    parser = sch[section][key][0]
    try:
        value = parser(text)
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {section}.{key}: {exc}") from None
    if parser in (_ints, _floats, _words) and not value:
        raise ConfigError(f"{where}: {section}.{key} must not be empty")
    return value


def default_config(experiment: str) -> ExperimentConfig:
    sch = schema(experiment)
    values = {sec: {k: p(d) for k, (p, d) in keys.items()} for sec, keys in sch.items()}
    values["experiment"]["name"] = experiment
    values["experiment"]["output_dir"] = f"runs/{experiment}"
    return ExperimentConfig(experiment, values)


def _line_index(text: str) -> dict:
    """Map ``(section, key)`` to the 1-based line where it is set."""
    out = {}
    section = None
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"\[(.+)\]$", line)
        if m:
            section = m.group(1).strip()
            out[(section, None)] = i
            continue
        m = re.match(r"([^=:]+)[=:]", line)
        if m and section is not None:
            out[(section, m.group(1).strip())] = i
    return out


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Parse an INI config; ``overrides`` maps ``section.key`` to raw text."""
    path = Path(path)
    text = path.read_text()
    cp = configparser.ConfigParser(interpolation=None, strict=True)
    cp.optionxform = str
    try:
        cp.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    lines = _line_index(text)
    name = cp.get("experiment", "name", fallback="particles").strip()
    where = f"{path}:{lines.get(('experiment', 'name'), 1)}"
    if name not in EXPERIMENTS:
        raise ConfigError(f"{where}: unknown experiment {name!r}; expected one of {EXPERIMENTS}")
    cfg = default_config(name)
    cfg.source = str(path)
    cfg.lines = {f"{s}.{k}": ln for (s, k), ln in lines.items() if k is not None}
    sch = schema(name)
    for section in cp.sections():
        if section not in sch:
            raise ConfigError(f"{path}:{lines.get((section, None), '?')}: unknown section [{section}]")
        for key, raw in cp.items(section):
            loc = f"{path}:{lines.get((section, key), '?')}"
            cfg.values[section][key] = _parse_value(sch, section, key, raw, loc)
    apply_environment(cfg)
    for dotted, raw in (overrides or {}).items():
        cfg.set(dotted, raw)
    validate(cfg)
    return cfg


def apply_environment(cfg: ExperimentConfig) -> None:
    if os.environ.get(ENV_OUTPUT_DIR):
        cfg.values["experiment"]["output_dir"] = os.environ[ENV_OUTPUT_DIR]
    if os.environ.get(ENV_SEED):
        cfg.values["experiment"]["seeds"] = _ints(os.environ[ENV_SEED])


def validate(cfg: ExperimentConfig) -> None:
    v = cfg.values
    if not v["experiment"]["seeds"]:
        raise ConfigError("experiment.seeds must name at least one seed")
    if v["training"]["epochs"] < 0:
        raise ConfigError("training.epochs must be nonnegative")
    if v["training"]["schedule"] not in ("constant", "cosine", "one_cycle"):
        raise ConfigError(f"training.schedule {v['training']['schedule']!r} is not one of constant, cosine, one_cycle")
    if cfg.experiment == "particles":
        bad = [m for m in v["model"]["models"] if m not in ("gcde", "gcde2", "neural_ode", "static")]
        if bad:
            raise ConfigError(f"model.models: unknown particle models {bad}")
    if cfg.experiment == "hybrid_forecast":
        bad = [m for m in v["model"]["models"] if m not in ("gcde_gru", "gcgru", "gru")]
        if bad:
            raise ConfigError(f"model.models: unknown hybrid models {bad}")
        if any(not 0 < p <= 1 for p in v["data"]["keep_probs"]):
            raise ConfigError("data.keep_probs must lie in (0, 1]")


def write_config(cfg: ExperimentConfig, path) -> None:
    """Write a complete INI file that reloads to the same values."""
    lines = []
    for section, keys in cfg.values.items():
        lines.append(f"[{section}]")
        for key, value in keys.items():
            if isinstance(value, list):
                value = " ".join(repr(x) if isinstance(x, float) else str(x) for x in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        lines.append("")
    Path(path).write_text("\n".join(lines))
