"""
Run configuration: one YAML document with model/train/data/eval sections.

Only ``seed`` is mandatory. ``resolve`` materialises every default, and
resolving an already resolved document returns it unchanged.
"""
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .data import (
    DatasetManifest,
    build_augmented_dataset,
    generate_synthetic_dataset,
    parse_voc_annotations,
)
from .detector import ModelConfig, scaled_anchors
from .errors import ConfigError
from .evaluation import EvalThresholds
from .training import TrainConfig

SEED_ENV = "MARS_SEED"
DATASET_MODES = ("original", "augmented")
VAL_MODES = ("same", "original", "augmented")


@dataclass(frozen=True)
class DataConfig:
    train: Optional[str] = None
    val: Optional[str] = None
    mode: str = "original"
    val_mode: str = "same"
    augment_strength: float = 1.0
    # used when no train path is given
    synthetic_train: int = 8
    synthetic_val: int = 8
    synthetic_image_size: Optional[int] = None

    def violations(self, base_dir):
        out = []
        for key in ("train", "val"):
            p = getattr(self, key)
            if p is not None and not _resolve_path(p, base_dir).exists():
                out.append(f"data.{key}: path {p!r} does not exist")
        if self.mode not in DATASET_MODES:
            out.append(f"data.mode must be one of {DATASET_MODES}, got {self.mode!r}")
        if self.val_mode not in VAL_MODES:
            out.append(f"data.val_mode must be one of {VAL_MODES}, got {self.val_mode!r}")
        if not 0 <= self.augment_strength <= 1:
            out.append("data.augment_strength must lie in [0, 1]")
        if self.train is None and self.synthetic_train < 1:
            out.append("data.synthetic_train must be >= 1 when no train path is given")
        return out


@dataclass(frozen=True)
class RunConfig:
    seed: int
    output_dir: str
    model: ModelConfig
    train: TrainConfig
    data: DataConfig
    eval: EvalThresholds
    base_dir: Path = field(default=Path("."), compare=False)

    def to_dict(self):
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "model": self.model.to_dict(),
            "train": {k: v for k, v in self.train.to_dict().items() if k != "seed"},
            "data": asdict(self.data),
            "eval": asdict(self.eval),
        }

    def output_path(self):
        return _resolve_path(self.output_dir, self.base_dir)

    def train_config(self):
        return self.train


def _resolve_path(p, base_dir):
    p = Path(p)
    return p if p.is_absolute() else Path(base_dir) / p


def _section(raw, name, cls, errors, drop=()):
    d = raw.get(name) or {}
    if not isinstance(d, dict):
        errors.append(f"{name}: expected a mapping")
        return {}
    known = {f.name for f in fields(cls)} - set(drop)
    for k in sorted(set(d) - known):
        errors.append(f"{name}.{k}: unknown key")
    return {k: v for k, v in d.items() if k in known}


def parse_config(raw, base_dir=".", env=None):
    """Validate a config mapping; raises ConfigError listing every violation."""
    env = os.environ if env is None else env
    errors = []
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping", ["<root>: expected a mapping"])
    for k in sorted(set(raw) - {"seed", "output_dir", "model", "train", "data", "eval"}):
        errors.append(f"{k}: unknown key")
    seed = raw.get("seed")
    if env.get(SEED_ENV) not in (None, ""):
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            errors.append(f"seed: {SEED_ENV}={env[SEED_ENV]!r} is not an integer")
    if seed is None:
        errors.append("seed: missing (mandatory)")
    elif not isinstance(seed, int) or isinstance(seed, bool):
        errors.append(f"seed: must be an integer, got {seed!r}")

    model_d = _section(raw, "model", ModelConfig, errors)
    train_d = _section(raw, "train", TrainConfig, errors, drop=("seed",))
    data_d = _section(raw, "data", DataConfig, errors)
    eval_d = _section(raw, "eval", EvalThresholds, errors)

    if model_d.get("backbone") == "toy" and model_d.get("anchors") is None:
        model_d["anchors"] = scaled_anchors(model_d.get("input_size", 96))
        model_d.setdefault("input_size", 96)
    try:
        model = ModelConfig.from_dict(model_d)
        errors += model.violations()
    except (TypeError, ValueError) as e:
        errors.append(f"model: {e}")
        model = None
    try:
        train = TrainConfig(seed=seed if isinstance(seed, int) else 0, **train_d)
        errors += train.violations()
    except TypeError as e:
        errors.append(f"train: {e}")
        train = None
    try:
        data = DataConfig(**data_d)
        errors += data.violations(base_dir)
    except TypeError as e:
        errors.append(f"data: {e}")
        data = None
    try:
        thresholds = EvalThresholds(**eval_d)
        errors += thresholds.violations()
    except TypeError as e:
        errors.append(f"eval: {e}")
        thresholds = None
    output_dir = raw.get("output_dir", "runs/default")
    if not isinstance(output_dir, str):
        errors.append("output_dir: must be a string")
    if errors:
        raise ConfigError(f"{len(errors)} config violation(s):\n  " + "\n  ".join(errors), errors)
    return RunConfig(seed, output_dir, model, train, data, thresholds, Path(base_dir))


def load_config(path, env=None):
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML ({e})") from e
    return parse_config(raw if raw is not None else {}, base_dir=path.parent, env=env)


def resolve(raw, base_dir=".", env=None):
    """Config mapping with all defaults filled in."""
    return parse_config(raw, base_dir, env).to_dict()


def dump_config(cfg: RunConfig):
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def default_reference():
    """YAML page listing every key with its default value."""
    cfg = RunConfig(0, "runs/default", ModelConfig(), TrainConfig(), DataConfig(), EvalThresholds())
    header = "# Default run configuration (seed is mandatory; MARS_SEED overrides it)\n"
    return header + dump_config(cfg)


def load_dataset(path, base_dir=".", split="train"):
    """JSON manifest file or VOC-style directory."""
    p = _resolve_path(path, base_dir)
    if p.is_dir():
        return parse_voc_annotations(p, split=split)
    return DatasetManifest.load(p)


def build_datasets(cfg: RunConfig):
    """(train manifest, val manifest) following the data section."""
    d = cfg.data
    size = d.synthetic_image_size or cfg.model.input_size
    if d.train is not None:
        train = load_dataset(d.train, cfg.base_dir, "train")
    else:
        train = generate_synthetic_dataset(d.synthetic_train, size, seed=cfg.seed, split="train")
    if d.val is not None:
        val = load_dataset(d.val, cfg.base_dir, "val")
    elif d.train is None:
        val = generate_synthetic_dataset(d.synthetic_val, size, seed=cfg.seed + 1, split="val")
    else:
        val = train
    if d.mode == "augmented":
        train = build_augmented_dataset(train, d.augment_strength, seed=cfg.seed)
    val_mode = d.mode if d.val_mode == "same" else d.val_mode
    if val_mode == "augmented":
        val = build_augmented_dataset(val, d.augment_strength, seed=cfg.seed + 1)
    return train, val
