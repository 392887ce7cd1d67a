"""Experiment configuration: flat dotted ``key = value`` files.

Blank lines and ``#`` comments are ignored.  Lists are comma separated.
Every key has a type and a default (see ``SCHEMA``); unknown keys are an
error, so a typo cannot silently fall back to a default.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from fedmvt.objective import LossWeights
from fedmvt.training import TrainConfig


class ConfigError(ValueError):
    """Carries every problem found, not just the first."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _int_list(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.split(",") if p.strip())


def _str(s: str) -> str:
    return s.strip()


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    check: Callable[[Any], bool] | None = None
    rule: str = ""
    choices: tuple[str, ...] = ()


def _choice(default: str, *options: str) -> Key:
    return Key(_str, default, lambda v: v in options, f"one of {', '.join(options)}", options)


def _nonneg(default: float) -> Key:
    return Key(float, default, lambda v: v >= 0, ">= 0")


_positive_int = (lambda v: v >= 1, ">= 1")
_fraction = (lambda v: 0 <= v <= 1, "in [0, 1]")

SCHEMA: dict[str, Key] = {
    "data.source": _choice("synthetic", "synthetic", "csv"),
    "data.n": Key(int, 4000, lambda v: v >= 2, ">= 2"),
    "data.dim_a": Key(int, 16, *_positive_int),
    "data.dim_b": Key(int, 16, *_positive_int),
    "data.classes": Key(int, 4, lambda v: v >= 2, ">= 2"),
    "data.class_sep": _nonneg(1.5),
    "data.cross_view_corr": Key(float, 0.7, *_fraction),
    "data.latent_dim": Key(int, 8, *_positive_int),
    "data.noise": _nonneg(1.0),
    "data.test_fraction": Key(float, 0.2, lambda v: 0 < v < 1, "in (0, 1)"),
    "data.nl_fraction_a": Key(float, 0.5, *_fraction),
    "data.nl_fraction_b": Key(float, 0.5, *_fraction),
    "data.csv_a": Key(_str, ""),
    "data.csv_b": Key(_str, ""),
    "data.csv_overlap": Key(_str, ""),
    "sweep.overlap_sizes": Key(
        _int_list, (40, 100, 400), lambda v: len(v) > 0 and min(v) >= 1, "a non-empty list of sizes >= 1"
    ),
    "sweep.seeds": Key(_int_list, (0, 1, 2, 3, 4), lambda v: len(v) > 0 and min(v) >= 0, "a non-empty list of seeds >= 0"),
    "train.epochs": Key(int, 30, lambda v: v >= 0, ">= 0"),
    "train.lr": Key(float, 0.01, lambda v: v > 0, "> 0"),
    "train.batch_ol": Key(int, 32, *_positive_int),
    "train.batch_a": Key(int, 64, *_positive_int),
    "train.batch_b": Key(int, 64, *_positive_int),
    "train.hidden": Key(_int_list, (32,), lambda v: all(h >= 1 for h in v), "a list of widths >= 1"),
    "train.rep_dim_a": Key(int, 32, *_positive_int),
    "train.rep_dim_b": Key(int, 32, *_positive_int),
    "loss.lambda1": _nonneg(0.1),
    "loss.lambda2": _nonneg(0.1),
    "loss.lambda3": _nonneg(0.1),
    "loss.lambda4": _nonneg(0.1),
    "loss.lambda5": _nonneg(0.1),
    "loss.orthogonality": _choice("inner", "inner", "outer"),
    "pseudo.threshold": Key(float, 0.7, lambda v: 0 < v <= 1, "in (0, 1]"),
    "pseudo.rule": _choice("all", "all", "any"),
    "pseudo.local_sets": _choice("with_pseudo", "with_pseudo", "ground_truth"),
    "estimation.pool": _choice("batch", "batch", "full"),
    "estimation.exclude_self": Key(_bool, False),
    "vanilla.heads": _choice("fed", "fed", "all"),
    "run.workers": Key(int, 1, *_positive_int),
}


def _format(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict[str, Any] = field(default_factory=lambda: {k: s.default for k, s in SCHEMA.items()})

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @property
    def overlap_sizes(self) -> tuple[int, ...]:
        return self.values["sweep.overlap_sizes"]

    @property
    def seeds(self) -> tuple[int, ...]:
        return self.values["sweep.seeds"]

    def with_values(self, **overrides: Any) -> "ExperimentConfig":
        """Copy with dotted keys given as ``sweep__seeds=(1,)``."""
        vals = dict(self.values)
        for k, v in overrides.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError([f"{key}: unknown key"])
            vals[key] = v
        errors = _check_values(vals)
        if errors:
            raise ConfigError(errors)
        return ExperimentConfig(vals)

    def weights(self) -> LossWeights:
        return LossWeights(*(self.values[f"loss.lambda{i}"] for i in range(1, 6)))

    def train_config(self, seed: int) -> TrainConfig:
        v = self.values
        return TrainConfig(
            epochs=v["train.epochs"],
            lr=v["train.lr"],
            batch_ol=v["train.batch_ol"],
            batch_a=v["train.batch_a"],
            batch_b=v["train.batch_b"],
            hidden=tuple(v["train.hidden"]),
            dim_a=v["train.rep_dim_a"],
            dim_b=v["train.rep_dim_b"],
            weights=self.weights(),
            threshold=v["pseudo.threshold"],
            select_rule=v["pseudo.rule"],
            local_sets=v["pseudo.local_sets"],
            orthogonality=v["loss.orthogonality"],
            pool=v["estimation.pool"],
            exclude_self=v["estimation.exclude_self"],
            vanilla_heads=v["vanilla.heads"],
            seed=seed,
        )

    def echo(self) -> dict[str, str]:
        """Every key, in file syntax; feeding this back reproduces the config."""
        return {k: _format(self.values[k]) for k in SCHEMA}

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.echo().items())


def _check_values(vals: dict[str, Any]) -> list[str]:
    errors = []
    for key, spec in SCHEMA.items():
        if spec.check is not None and not spec.check(vals[key]):
            errors.append(f"{key}: must be {spec.rule}, got {_format(vals[key])}")
    if vals["data.nl_fraction_a"] + vals["data.nl_fraction_b"] > 1:
        errors.append("data.nl_fraction_a + data.nl_fraction_b: must not exceed 1")
    if vals["train.rep_dim_a"] != vals["train.rep_dim_b"]:
        errors.append("train.rep_dim_a, train.rep_dim_b: must be equal (one shared space)")
    if vals["data.source"] == "csv":
        for key in ("data.csv_a", "data.csv_b", "data.csv_overlap"):
            if not vals[key]:
                errors.append(f"{key}: required when data.source = csv")
    return errors


def parse_config_text(text: str, base_dir: Path | None = None) -> tuple[ExperimentConfig | None, list[str]]:
    """Parse and validate; returns (config or None, every error found)."""
    vals = {k: s.default for k, s in SCHEMA.items()}
    errors: list[str] = []
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            continue
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            errors.append(f"line {lineno}: unknown key {key!r}")
            continue
        if key in seen:
            errors.append(f"line {lineno}: {key} already set on line {seen[key]}")
            continue
        seen[key] = lineno
        try:
            vals[key] = SCHEMA[key].parse(value)
        except ValueError:
            errors.append(f"line {lineno}: {key}: cannot parse {value!r}")
    if errors:
        # range checks on half-parsed values would only add noise
        return None, errors
    if base_dir is not None:
        for key in ("data.csv_a", "data.csv_b", "data.csv_overlap"):
            if vals[key] and not Path(vals[key]).is_absolute():
                vals[key] = str((base_dir / vals[key]).resolve())
    errors = _check_values(vals)
    return (None, errors) if errors else (ExperimentConfig(vals), [])


def validate_config(path) -> list[str]:
    """Structural and range validation without running; [] means ok."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        return [f"{path}: cannot read config ({exc})"]
    return parse_config_text(text, path.parent)[1]


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError([f"{path}: cannot read config ({exc})"]) from exc
    cfg, errors = parse_config_text(text, path.parent)
    if errors:
        raise ConfigError(errors)
    return cfg
