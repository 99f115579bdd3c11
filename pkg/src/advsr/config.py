"""Experiment configuration files: one INI document drives the pipeline.

A run configuration names everything the command-line pipeline needs --
corpus location and size, model architecture, training recipe, the attack
grid, the defense chains, the evaluation slice and the report outputs --
plus one global seed that every stage fans out from.  Parsing is strict:
unknown sections or keys are rejected by name so typos cannot silently
fall back to defaults, and all paths are resolved relative to the config
file so a run directory can be moved or archived wholesale.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import defenses
from .attacks import AttackConfig
from .corpus import VOCABULARY
from .model import ModelConfig, TrainConfig
from .seeding import derive_seed


class ConfigError(ValueError):
    """A configuration file is malformed or contains unknown entries."""


# section -> ordered mapping of key -> documented default (as text).
_SCHEMA = {
    "run": {"seed": "0", "output": "runs/out", "jobs": "0"},
    "corpus": {"root": "corpus", "train": "2000", "test": "100", "vocabulary": ""},
    "model": {"name": "base", "channels": "16 32", "kernel": "9", "stride": "2"},
    "training": {
        "epochs": "12",
        "batch": "8",
        "learning_rate": "3e-3",
        "label_smoothing": "0.0",
        "rs_aug": "false",
        "rs_sigma": "0.0 0.3",
        "wave_aug": "false",
    },
    "attack": {"grid": "none fgsm:1e-4 fgsm:1e-3 fgsm:1e-2 fgsm:0.1 fgsm:0.2 pgd:1e-2 imperceptible"},
    "defense": {"chains": "none | rs:0.01 | resynth"},
    "evaluation": {"split": "test", "limit": "0", "models": ""},
    "output": {"formats": "csv markdown json", "artifacts": "false"},
}

_FORMATS = ("csv", "markdown", "json")


@dataclass(frozen=True)
class RunConfig:
    """Validated, resolved contents of one configuration file."""

    seed: int = 0
    output: Path = Path("runs/out")
    jobs: int = 0  # 0 means one worker per logical CPU
    corpus_root: Path = Path("corpus")
    n_train: int = 2000
    n_test: int = 100
    vocabulary: tuple = ()  # empty means the full built-in vocabulary
    model_name: str = "base"
    conv_channels: tuple = (16, 32)
    kernel_size: int = 9
    stride: int = 2
    epochs: int = 12
    batch_size: int = 8
    learning_rate: float = 3e-3
    label_smoothing: float = 0.0
    rs_aug: bool = False
    rs_sigma_range: tuple = (0.0, 0.3)
    wave_aug: bool = False
    attack_grid: tuple = ("none",)
    defense_chains: tuple = ("none",)
    eval_split: str = "test"
    eval_limit: int = 0
    eval_models: tuple = ()  # checkpoint paths; empty means the trained [model]
    formats: tuple = ("csv", "markdown", "json")
    artifacts: bool = False
    source: Path | None = None

    # -- derived constructors for the library layer ------------------------

    def model_config(self):
        return ModelConfig(
            name=self.model_name,
            conv_channels=self.conv_channels,
            kernel_size=self.kernel_size,
            stride=self.stride,
        )

    def train_config(self):
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            label_smoothing=self.label_smoothing,
            rs_aug=self.rs_aug,
            rs_sigma_range=self.rs_sigma_range,
            wave_aug=self.wave_aug,
            seed=derive_seed(self.seed, "train"),
        )

    def attack_configs(self):
        """List of (spec, AttackConfig-or-None) pairs in grid order."""
        return [(spec, parse_attack_spec(spec, seed=derive_seed(self.seed, "attack"))) for spec in self.attack_grid]

    def chains(self):
        return [defenses.parse_chain(spec) for spec in self.defense_chains]

    def stage_seed(self, stage, *labels):
        """Per-stage seed fan-out: sha-256 over 'stage/label/...' strings."""
        return derive_seed(self.seed, stage, *labels)


def parse_attack_spec(spec, seed=0):
    """'none' | 'fgsm:EPS' | 'pgd:EPS[:ITERS]' | 'imperceptible' -> config.

    Returns None for 'none' (the clean column).  pgd defaults to 7
    iterations with step size epsilon / 5.
    """
    parts = spec.split(":")
    method = parts[0]
    try:
        if method == "none":
            if len(parts) != 1:
                raise ValueError("'none' takes no parameters")
            return None
        if method == "fgsm":
            if len(parts) != 2:
                raise ValueError("fgsm needs exactly one parameter: fgsm:EPS")
            return AttackConfig(method="fgsm", epsilon=float(parts[1]), iterations=1, seed=seed)
        if method == "pgd":
            if len(parts) not in (2, 3):
                raise ValueError("pgd needs pgd:EPS or pgd:EPS:ITERS")
            iters = int(parts[2]) if len(parts) == 3 else 7
            return AttackConfig(method="pgd", epsilon=float(parts[1]), iterations=iters, seed=seed)
        if method == "imperceptible":
            if len(parts) != 1:
                raise ValueError("'imperceptible' takes no parameters")
            return AttackConfig(method="imperceptible", seed=seed)
    except ValueError as exc:
        raise ConfigError(f"bad attack spec {spec!r}: {exc}") from exc
    raise ConfigError(f"bad attack spec {spec!r}: unknown method {method!r}")


def _parse_int(section, key, text, minimum=None):
    try:
        value = int(text)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {text!r} is not an integer") from exc
    if minimum is not None and value < minimum:
        raise ConfigError(f"[{section}] {key} must be >= {minimum}, got {value}")
    return value


def _parse_float(section, key, text):
    try:
        return float(text)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {text!r} is not a number") from exc


def _parse_bool(section, key, text):
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"[{section}] {key} = {text!r} is not a boolean")


def default_config():
    """The documented defaults as a RunConfig (paths left relative)."""
    return _from_values({s: dict(v) for s, v in _SCHEMA.items()}, base_dir=None, source=None)


def load_config(path):
    """Parse, validate and resolve a configuration file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    values = {section: dict(defaults) for section, defaults in _SCHEMA.items()}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, value in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in section [{section}]")
            values[section][key] = value
    return _from_values(values, base_dir=path.parent, source=path)


def _from_values(values, base_dir, source):
    run, cor, mod, tra = values["run"], values["corpus"], values["model"], values["training"]
    att, dfn, evl, out = values["attack"], values["defense"], values["evaluation"], values["output"]

    def resolve(text):
        p = Path(text)
        if base_dir is not None and not p.is_absolute():
            p = (base_dir / p).resolve()
        return p

    vocabulary = tuple(cor["vocabulary"].split())
    for word in vocabulary:
        if word not in VOCABULARY:
            raise ConfigError(
                f"[corpus] vocabulary contains unknown word {word!r}; "
                f"known words: {' '.join(VOCABULARY)}"
            )
    channels = tuple(_parse_int("model", "channels", c, minimum=1) for c in mod["channels"].split())
    if len(channels) != 2:
        raise ConfigError("[model] channels must list exactly two widths")
    sigma = tuple(_parse_float("training", "rs_sigma", s) for s in tra["rs_sigma"].split())
    if len(sigma) != 2:
        raise ConfigError("[training] rs_sigma must be two numbers: low high")
    grid = tuple(att["grid"].split())
    if not grid:
        raise ConfigError("[attack] grid must list at least one attack (use 'none')")
    for spec in grid:
        parse_attack_spec(spec)  # validate eagerly
    chains = tuple(part.strip() for part in dfn["chains"].split("|") if part.strip())
    if not chains:
        raise ConfigError("[defense] chains must list at least one chain (use 'none')")
    for spec in chains:
        try:
            defenses.parse_chain(spec)
        except ValueError as exc:
            raise ConfigError(f"[defense] chains: {exc}") from exc
    split = evl["split"].strip()
    if split not in ("train", "test"):
        raise ConfigError(f"[evaluation] split must be 'train' or 'test', got {split!r}")
    formats = tuple(out["formats"].split())
    for fmt in formats:
        if fmt not in _FORMATS:
            raise ConfigError(
                f"[output] formats contains {fmt!r}; valid formats: {' '.join(_FORMATS)}"
            )
    label_smoothing = _parse_float("training", "label_smoothing", tra["label_smoothing"])
    cfg = RunConfig(
        seed=_parse_int("run", "seed", run["seed"], minimum=0),
        output=resolve(run["output"]),
        jobs=_parse_int("run", "jobs", run["jobs"], minimum=0),
        corpus_root=resolve(cor["root"]),
        n_train=_parse_int("corpus", "train", cor["train"], minimum=1),
        n_test=_parse_int("corpus", "test", cor["test"], minimum=1),
        vocabulary=vocabulary,
        model_name=mod["name"].strip(),
        conv_channels=channels,
        kernel_size=_parse_int("model", "kernel", mod["kernel"], minimum=1),
        stride=_parse_int("model", "stride", mod["stride"], minimum=1),
        epochs=_parse_int("training", "epochs", tra["epochs"], minimum=1),
        batch_size=_parse_int("training", "batch", tra["batch"], minimum=1),
        learning_rate=_parse_float("training", "learning_rate", tra["learning_rate"]),
        label_smoothing=label_smoothing,
        rs_aug=_parse_bool("training", "rs_aug", tra["rs_aug"]),
        rs_sigma_range=sigma,
        wave_aug=_parse_bool("training", "wave_aug", tra["wave_aug"]),
        attack_grid=grid,
        defense_chains=chains,
        eval_split=split,
        eval_limit=_parse_int("evaluation", "limit", evl["limit"], minimum=0),
        eval_models=tuple(resolve(p) for p in evl["models"].split()),
        formats=formats,
        artifacts=_parse_bool("output", "artifacts", out["artifacts"]),
        source=source,
    )
    # Let the library-level validators reject inconsistent values up front.
    try:
        cfg.model_config()
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def write_config(cfg, path):
    """Write a RunConfig back out as an INI document; load(write(c)) == c.

    Paths are written as given (absolute once resolved), so the written
    file reproduces the resolved run regardless of where it lands.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser["run"] = {
        "seed": str(cfg.seed),
        "output": str(cfg.output),
        "jobs": str(cfg.jobs),
    }
    parser["corpus"] = {
        "root": str(cfg.corpus_root),
        "train": str(cfg.n_train),
        "test": str(cfg.n_test),
        "vocabulary": " ".join(cfg.vocabulary),
    }
    parser["model"] = {
        "name": cfg.model_name,
        "channels": " ".join(str(c) for c in cfg.conv_channels),
        "kernel": str(cfg.kernel_size),
        "stride": str(cfg.stride),
    }
    parser["training"] = {
        "epochs": str(cfg.epochs),
        "batch": str(cfg.batch_size),
        "learning_rate": format(cfg.learning_rate, "g"),
        "label_smoothing": format(cfg.label_smoothing, "g"),
        "rs_aug": str(cfg.rs_aug).lower(),
        "rs_sigma": " ".join(format(s, "g") for s in cfg.rs_sigma_range),
        "wave_aug": str(cfg.wave_aug).lower(),
    }
    parser["attack"] = {"grid": " ".join(cfg.attack_grid)}
    parser["defense"] = {"chains": " | ".join(cfg.defense_chains)}
    parser["evaluation"] = {
        "split": cfg.eval_split,
        "limit": str(cfg.eval_limit),
        "models": " ".join(str(p) for p in cfg.eval_models),
    }
    parser["output"] = {
        "formats": " ".join(cfg.formats),
        "artifacts": str(cfg.artifacts).lower(),
    }
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)
