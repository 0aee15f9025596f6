"""Experiment configuration: parsing, validation, presets and hashing.

A config file is YAML or JSON with this shape (every section optional)::

    mode: train-pfl-scratch
    seed: 0
    output_dir: runs/demo
    data:       {num_users, train_size, valid_size, drift_strength, concentration,
                 mean_points_per_user, partition, train_split, valid_split}
    training:   {devices_per_iteration, central_iterations, local_epochs, ...}
    central:    {learning_rate, batch_size, max_epochs, patience, weight_decay}
    thresholds: {tau_epistemic, tau_aleatoric}
    task_filter: {os_versions, asset_versions}
    fedstats:   {key, noise_scale, safety_factor}
    cohort_sizes: [25, 50, 125]
    init_checkpoint: path
    resume_from: path
    checkpoint_every: 0

Unknown keys are rejected. Errors carry a line number (syntax) or a dotted
field path (semantics).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from appsel_pfl import model
from appsel_pfl.engine import CentralConfig, TrainingConfig
from appsel_pfl.fedstats import BUCKET_KEYS, SAFETY_FACTOR
from appsel_pfl.synth import SPLIT_TIMES

MODES = ("train-central", "train-pfl-scratch", "finetune-all", "finetune-top", "cohort-sweep",
         "fedstats", "calibrate-noise", "simulate-data", "evaluate")
PFL_MODES = ("train-pfl-scratch", "finetune-all", "finetune-top", "cohort-sweep")
FINETUNE_MODES = ("finetune-all", "finetune-top")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    num_users: int = 5000
    train_size: int = 20000
    valid_size: int = 4000
    drift_strength: float = 0.0
    concentration: float = 0.5
    mean_points_per_user: float = 1.0
    partition: str = "exact"
    # None picks the mode's natural split (stale for scratch, fresh for fine-tuning)
    train_split: str | None = None
    valid_split: str | None = None


@dataclass(frozen=True)
class ThresholdSection:
    tau_epistemic: float = model.Thresholds().tau_epistemic
    tau_aleatoric: float = model.Thresholds().tau_aleatoric


@dataclass(frozen=True)
class FilterSection:
    os_versions: tuple[str, ...] | None = None
    asset_versions: tuple[str, ...] | None = None


@dataclass(frozen=True)
class FedStatsSection:
    key: str = "record_count"
    noise_scale: float = 0.0
    safety_factor: float = SAFETY_FACTOR


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    central: CentralConfig = field(default_factory=CentralConfig)
    thresholds: ThresholdSection = field(default_factory=ThresholdSection)
    task_filter: FilterSection = field(default_factory=FilterSection)
    fedstats: FedStatsSection = field(default_factory=FedStatsSection)
    cohort_sizes: tuple[int, ...] = (25, 50, 125)
    init_checkpoint: str | None = None
    resume_from: str | None = None
    checkpoint_every: int = 0

    @property
    def train_split(self) -> str:
        if self.data.train_split:
            return self.data.train_split
        return "train_fresh" if self.mode in FINETUNE_MODES else "train_stale"

    @property
    def valid_split(self) -> str:
        if self.data.valid_split:
            return self.data.valid_split
        return "valid_fresh" if self.mode in FINETUNE_MODES else "valid_fixed"


_SECTIONS = {"data": DataSection, "training": TrainingConfig, "central": CentralConfig,
             "thresholds": ThresholdSection, "task_filter": FilterSection,
             "fedstats": FedStatsSection}
# seeds are owned by the top level and pushed down
_DERIVED = {"training": ("master_seed",), "central": ("seed", "freeze_policy")}

# The clipping bound sits near the median update norm at this population size;
# at 0.1 the noise swamps the much smaller mean update of a 250-device cohort.
PRESETS: dict[str, dict] = {
    # 250 devices x 500 iterations over ~20K single-record devices: ~6.3 passes
    "high-budget": {"training": {"devices_per_iteration": 250, "central_learning_rate": 0.001,
                                 "clipping_bound": 0.02}},
    # 25 devices x 500 iterations: ~0.63 passes
    "low-budget": {"training": {"devices_per_iteration": 25, "central_learning_rate": 0.001,
                                "clipping_bound": 0.02}},
    # one local epoch, 125 devices; the rate suits finetune-top (finetune-all wants ~0.01)
    "finetune": {"training": {"devices_per_iteration": 125, "local_epochs": 1,
                              "central_learning_rate": 0.1, "clipping_bound": 0.02}},
}


def _type_ok(value, default) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return True


def _build(cls, raw, path: str, skip=()):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls) if f.name not in skip}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown key")
    defaults = cls() if cls is not ExperimentConfig else None
    kwargs = {}
    for name, value in raw.items():
        default = getattr(defaults, name, None) if defaults is not None else None
        if default is not None and value is not None and not _type_ok(value, default):
            raise ConfigError(f"{path}.{name}: expected {type(default).__name__}, got {value!r}")
        if isinstance(value, list):
            value = tuple(value)
        if isinstance(default, float) and isinstance(value, int):
            value = float(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def from_dict(raw: dict, preset: str | None = None, seed: int | None = None,
              output_dir: str | None = None) -> ExperimentConfig:
    """Validate a raw mapping; ``preset``, ``seed`` and ``output_dir`` override it."""
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r} (known: {sorted(PRESETS)})")
        raw = _merge(PRESETS[preset], raw)
    if seed is not None:
        raw = {**raw, "seed": seed}
    if output_dir is not None:
        raw = {**raw, "output_dir": output_dir}

    top = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown key")
    mode = raw.get("mode")
    if not mode:
        raise ConfigError("mode: required field is missing or empty")
    if mode not in MODES:
        raise ConfigError(f"mode: must be one of {MODES}, got {mode!r}")
    seed_v = raw.get("seed", 0)
    if not isinstance(seed_v, int) or isinstance(seed_v, bool) or not 0 <= seed_v < 2**64:
        raise ConfigError(f"seed: expected an unsigned 64-bit integer, got {seed_v!r}")

    sections = {}
    for name, cls in _SECTIONS.items():
        sub = raw.get(name) or {}
        if isinstance(sub, dict):
            for k in _DERIVED.get(name, ()):
                if k in sub:
                    raise ConfigError(f"{name}.{k}: set by the top-level config, not here")
        sections[name] = _build(cls, sub, name)
    freeze = {"finetune-top": "top_layer_only", "finetune-all": "none"}.get(
        mode, sections["training"].freeze_policy)
    try:
        sections["training"] = replace(sections["training"], master_seed=seed_v,
                                       freeze_policy=freeze)
        sections["central"] = replace(sections["central"], seed=seed_v)
    except ValueError as exc:
        raise ConfigError(f"training: {exc}") from None

    rest = {}
    for k in ("output_dir", "init_checkpoint", "resume_from"):
        if k in raw and raw[k] is not None:
            if not isinstance(raw[k], str) or not raw[k]:
                raise ConfigError(f"{k}: expected a nonempty path string")
            rest[k] = raw[k]
    if "checkpoint_every" in raw:
        ce = raw["checkpoint_every"]
        if not isinstance(ce, int) or isinstance(ce, bool) or ce < 0:
            raise ConfigError(f"checkpoint_every: expected a nonnegative integer, got {ce!r}")
        rest["checkpoint_every"] = ce
    if "cohort_sizes" in raw:
        cs = raw["cohort_sizes"]
        if (not isinstance(cs, list | tuple) or not cs
                or not all(isinstance(c, int) and c > 0 for c in cs)):
            raise ConfigError(f"cohort_sizes: expected a nonempty list of positive integers")
        rest["cohort_sizes"] = tuple(cs)

    cfg = ExperimentConfig(mode=mode, seed=seed_v, **sections, **rest)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    d = cfg.data
    for name in ("num_users", "train_size", "valid_size"):
        if getattr(d, name) < 1:
            raise ConfigError(f"data.{name}: must be positive")
    if not 0.0 <= d.drift_strength <= 1.0:
        raise ConfigError("data.drift_strength: must lie in [0, 1]")
    if not d.concentration > 0:
        raise ConfigError("data.concentration: must be positive")
    if not d.mean_points_per_user > 0:
        raise ConfigError("data.mean_points_per_user: must be positive")
    if d.partition not in ("exact", "poisson"):
        raise ConfigError("data.partition: must be 'exact' or 'poisson'")
    if d.partition == "exact" and d.mean_points_per_user != int(d.mean_points_per_user):
        raise ConfigError("data.mean_points_per_user: exact partitioning needs an integer")
    for name in ("train_split", "valid_split"):
        v = getattr(d, name)
        if v is not None and v not in SPLIT_TIMES:
            raise ConfigError(f"data.{name}: must be one of {tuple(SPLIT_TIMES)}")
    try:
        model.Thresholds(cfg.thresholds.tau_epistemic, cfg.thresholds.tau_aleatoric)
    except ValueError as exc:
        raise ConfigError(f"thresholds: {exc}") from None
    c = cfg.central
    if not c.learning_rate > 0 or c.batch_size < 1 or c.max_epochs < 1 or c.patience < 1:
        raise ConfigError("central: learning_rate, batch_size, max_epochs and patience must be positive")
    if cfg.fedstats.key not in BUCKET_KEYS:
        raise ConfigError(f"fedstats.key: must be one of {BUCKET_KEYS}")
    if not cfg.fedstats.noise_scale >= 0:
        raise ConfigError("fedstats.noise_scale: must be nonnegative")
    if not cfg.fedstats.safety_factor > 0:
        raise ConfigError("fedstats.safety_factor: must be positive")
    if cfg.checkpoint_every and cfg.checkpoint_every % cfg.training.eval_every:
        raise ConfigError("checkpoint_every: must be a multiple of training.eval_every")
    needs_ckpt = cfg.mode in FINETUNE_MODES or cfg.mode == "evaluate"
    if needs_ckpt and not cfg.init_checkpoint:
        raise ConfigError(f"init_checkpoint: mode {cfg.mode} needs a checkpoint to start from")
    for name in ("init_checkpoint", "resume_from"):
        p = getattr(cfg, name)
        if p is not None and not Path(p).is_file():
            raise ConfigError(f"{name}: no such file {p}")


def load_raw(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from None
    if path.suffix.lower() == ".json":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: JSON parse error: {exc.msg}") from None
    else:
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            line = mark.line + 1 if mark is not None else "?"
            msg = getattr(exc, "problem", None) or str(exc)
            raise ConfigError(f"{path}:{line}: YAML parse error: {msg}") from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}:1: top level must be a mapping")
    return raw


def parse_config(path, preset: str | None = None, seed: int | None = None,
                 output_dir: str | None = None) -> ExperimentConfig:
    return from_dict(load_raw(path), preset, seed, output_dir)


def to_dict(cfg: ExperimentConfig) -> dict:
    """Plain mapping that ``from_dict`` accepts back unchanged."""
    out = asdict(cfg)
    for name, skip in _DERIVED.items():
        for k in skip:
            out[name].pop(k)
    for k in ("init_checkpoint", "resume_from"):
        if out[k] is None:
            out.pop(k)

    def lists(x):
        if isinstance(x, dict):
            return {k: lists(v) for k, v in x.items()}
        if isinstance(x, tuple | list):
            return [lists(v) for v in x]
        return x
    out = lists(out)
    # the fine-tuning modes pin the freeze policy themselves
    if cfg.mode in FINETUNE_MODES:
        out["training"].pop("freeze_policy")
    return out


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=True), encoding="utf-8")


def config_hash(cfg: ExperimentConfig) -> str:
    """Digest of every field that can change results.

    Where files go, how often checkpoints are cut and what a run resumed from
    cannot change results, so they are left out.
    """
    d = to_dict(cfg)
    for k in ("output_dir", "resume_from", "checkpoint_every"):
        d.pop(k, None)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
