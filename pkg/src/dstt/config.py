"""Run configuration: defaults < profile < JSON file < command-line flags."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ConfigError
from .evaluate import TEST_PROFILE
from .model import AblationVariant, DsttConfig
from .uncertainty import DEFAULT_K

PROFILES = {"full": {}, "test": dict(TEST_PROFILE)}

# shorthand accepted in config files and --set
ALIASES = {"lr": "learning_rate", "dropout": "dropout_rate", "n": "sequence_length"}


@dataclass
class RunConfig:
    command: str = ""
    data: str | None = None
    out: str | None = None
    model: DsttConfig = field(default_factory=DsttConfig)
    profile: str = "full"
    w: int = 1
    horizons: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5, 6])
    seeds: list[int] = field(default_factory=lambda: [0])
    K: int = DEFAULT_K
    z: float = 2.0
    boundary: str | None = None
    train_fraction: float = 0.8
    folds: int = 10
    max_gap: int = 6
    workers: int = 1
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


RUN_KEYS = {f.name for f in fields(RunConfig)} - {"model", "command"}
MODEL_KEYS = {f.name for f in fields(DsttConfig)}


STRING_KEYS = {"data", "out", "boundary", "profile"}


def _coerce(key: str, value):
    if key == "variant":
        return value if isinstance(value, AblationVariant) else AblationVariant.parse(str(value))
    if isinstance(value, str) and key not in STRING_KEYS:
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            raise ConfigError(f"cannot parse value {value!r} for {key}", field=key) from None
    return value


def parse_config_text(text: str, source: str = "<config>") -> dict:
    if not text.strip():
        return {}
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno} column {exc.colno}: {exc.msg}", field=None) from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be a JSON object", field=None)
    return doc


def apply_overrides(run: RunConfig, overrides: dict) -> RunConfig:
    """Return a copy of ``run`` with ``overrides`` applied; unknown keys are rejected."""
    model_kw, run_kw = {}, {}
    for raw_key, value in overrides.items():
        key = ALIASES.get(raw_key, raw_key)
        if key == "seed":
            # one seed drives every stochastic stage
            model_kw[key] = run_kw[key] = _coerce(key, value)
        elif key in MODEL_KEYS:
            model_kw[key] = _coerce(key, value)
        elif key in RUN_KEYS:
            run_kw[key] = _coerce(key, value)
        else:
            raise ConfigError(f"unknown configuration key {raw_key!r}", field=raw_key)
    if "profile" in run_kw and run_kw["profile"] not in PROFILES:
        raise ConfigError(f"unknown profile {run_kw['profile']!r}; choose from {sorted(PROFILES)}", field="profile")
    try:
        model = replace(run.model, **model_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), field=next(iter(model_kw), None)) from None
    return replace(run, model=model, **run_kw)


def load_config(path: str | os.PathLike | None = None, flag_overrides: dict | None = None,
                command: str = "") -> RunConfig:
    """Merge defaults, the named profile, the JSON file at ``path`` and flag overrides."""
    file_doc = {}
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}", field=None) from None
        file_doc = parse_config_text(text, str(path))
    flags = dict(flag_overrides or {})
    profile = flags.get("profile", file_doc.get("profile", "full"))
    run = RunConfig(command=command)
    run = apply_overrides(run, {"profile": profile})
    run = apply_overrides(run, PROFILES[profile])
    run = apply_overrides(run, file_doc)
    run = apply_overrides(run, flags)
    run.model.validate()
    _validate_run(run)
    return run


def _validate_run(run: RunConfig) -> None:
    if not 1 <= run.w <= 6:
        raise ConfigError(f"w must be in 1..6, got {run.w}", field="w")
    if not run.horizons or any(not 1 <= h <= 6 for h in run.horizons):
        raise ConfigError(f"horizons must lie in 1..6, got {run.horizons}", field="horizons")
    if not run.seeds:
        raise ConfigError("seeds must not be empty", field="seeds")
    if run.K < 2:
        raise ConfigError(f"K must be >= 2, got {run.K}", field="K")
    if run.z <= 0:
        raise ConfigError(f"z must be positive, got {run.z}", field="z")
    if not 0 < run.train_fraction < 1:
        raise ConfigError(f"train_fraction must be in (0, 1), got {run.train_fraction}", field="train_fraction")
    if run.folds < 2:
        raise ConfigError(f"folds must be >= 2, got {run.folds}", field="folds")
    if run.max_gap < 0:
        raise ConfigError(f"max_gap must be >= 0, got {run.max_gap}", field="max_gap")
    if run.workers < 1:
        raise ConfigError(f"workers must be >= 1, got {run.workers}", field="workers")
