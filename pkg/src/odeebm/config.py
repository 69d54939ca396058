"""Experiment configuration: flat INI sections with defaults for every key.

A minimal config needs only the handful of keys that differ from the
defaults; the effective (fully-expanded) config is echoed into each run
directory so any run re-executes from its own echo.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .datasets import DatasetSpec
from .evaluation import EvalProtocol
from .training import ModelConfig, TrainConfig


class ConfigError(ValueError):
    """Malformed config file or unknown key."""


_DATA_DIMS = {"sinusoid": 1, "spiral2d": 2, "damped_osc": 1}


@dataclass
class ExperimentConfig:
    name: str
    out_dir: str
    data_path: str
    dataset: DatasetSpec
    model: ModelConfig
    train: TrainConfig
    eval: EvalProtocol

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.name

    def results_dir(self) -> Path:
        return self.run_dir / "results"


def _parse_value(raw: str, sample):
    raw = raw.strip()
    if isinstance(sample, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(sample, int):
        return int(raw)
    if isinstance(sample, float):
        return float(raw)
    if isinstance(sample, tuple) or sample is None:
        if raw.lower() in ("", "none"):
            return None
        return tuple(float(x) if "." in x or "e" in x.lower() else int(x)
                     for x in raw.split(","))
    return raw


def _fill(section_name, section, target_cls, overrides=None, skip=()):
    """Build a dataclass from an INI section, rejecting unknown keys."""
    defaults = {f.name: f.default for f in fields(target_cls)}
    kwargs = dict(overrides or {})
    known = {f.name for f in fields(target_cls)}
    for key, raw in section.items():
        if key in skip:
            continue
        if key not in known:
            raise ConfigError(f"unknown key [{section_name}] {key}")
        try:
            kwargs[key] = _parse_value(raw, defaults[key])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for [{section_name}] {key}: {exc}") from None
    try:
        return target_cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section_name}]: {exc}") from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read_string(path.read_text())
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(parser)


def parse_config(parser: configparser.ConfigParser) -> ExperimentConfig:
    known_sections = {"experiment", "dataset", "model", "langevin", "training", "eval"}
    for sec in parser.sections():
        if sec not in known_sections:
            raise ConfigError(f"unknown section [{sec}]")

    exp = parser["experiment"] if parser.has_section("experiment") else {}
    for key in exp:
        if key not in ("name", "out_dir", "data_path", "seed"):
            raise ConfigError(f"unknown key [experiment] {key}")
    name = exp.get("name", "run")
    out_dir = exp.get("out_dir", "runs")
    seed = int(exp.get("seed", "0"))

    ds_sec = parser["dataset"] if parser.has_section("dataset") else {}
    dataset = _fill("dataset", ds_sec, DatasetSpec, overrides={"seed": seed})

    data_path = exp.get("data_path", str(Path(out_dir) / name / "dataset.bin"))

    model_over = {"data_dim": _DATA_DIMS[dataset.kind]}
    model_sec = parser["model"] if parser.has_section("model") else {}
    model = _fill("model", model_sec, ModelConfig, overrides=model_over)

    train_over = {"seed": seed}
    lang_sec = dict(parser["langevin"]) if parser.has_section("langevin") else {}
    train_sec = dict(parser["training"]) if parser.has_section("training") else {}
    lang_keys = {"prior_steps", "posterior_steps", "prior_step_size",
                 "posterior_step_size"}
    for key in lang_sec:
        if key not in lang_keys:
            raise ConfigError(f"unknown key [langevin] {key}")
    merged = {**lang_sec, **train_sec}
    train = _fill("training", merged, TrainConfig, overrides=train_over)

    eval_over = {"seed": seed + 7, "steps": train.posterior_steps,
                 "step_size": train.posterior_step_size}
    eval_sec = parser["eval"] if parser.has_section("eval") else {}
    protocol = _fill("eval", eval_sec, EvalProtocol, overrides=eval_over)

    return ExperimentConfig(name, out_dir, data_path, dataset, model, train, protocol)


def echo_config(cfg: ExperimentConfig) -> str:
    """Serialize the effective configuration back to INI text."""
    parser = configparser.ConfigParser()
    parser["experiment"] = {
        "name": cfg.name, "out_dir": cfg.out_dir,
        "data_path": cfg.data_path, "seed": str(cfg.train.seed),
    }

    def dump(section, obj, skip=()):
        parser[section] = {}
        for key, val in asdict(obj).items():
            if key in skip:
                continue
            if isinstance(val, (tuple, list)):
                val = ",".join(str(v) for v in val)
            parser[section][key] = str(val)

    dump("dataset", cfg.dataset)
    dump("model", cfg.model)
    dump("training", cfg.train)
    dump("eval", cfg.eval)
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def write_echo(cfg: ExperimentConfig) -> None:
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    (cfg.run_dir / "config.echo").write_text(echo_config(cfg))
