"""
Experiment configuration: a JSON file parsed into nested dataclasses.

Unknown keys are rejected and every error names the dotted key path. A
profile ("desk" or "full") picks the default table; keys given in the file
always win over the profile.
"""

import json
import types
import typing
from dataclasses import dataclass, field, fields, is_dataclass, asdict, replace

from . import config
from .data import check_seed
from .errors import InvalidValue, ParseError, UnknownKey
from .score_model import ScoreNetConfig
from .sde import DiffusionSchedule
from .vae import VaeConfig

PROFILES = ("desk", "full")


@dataclass
class DataPaths:
    mnist_dir: str | None = config.MNIST_DIR
    train_limit: int | None = None
    test_limit: int | None = None
    classifier_path: str | None = None


@dataclass
class TrainBlock:
    batch_size: int = config.BATCH_SIZE
    epochs: int = config.EPOCHS
    lr_pixel: float = config.LR_PIXEL
    lr_latent: float = config.LR_LATENT
    lr_vae: float = config.LR_VAE
    vae_epochs: int = config.EPOCHS
    lr_classifier: float = config.LR_CLASSIFIER
    classifier_epochs: int = config.CLASSIFIER_EPOCHS
    loss_kind: str = "masked"
    em_rounds: int = config.EM_ROUNDS
    em_epochs_per_round: int = config.EM_EPOCHS_PER_ROUND


@dataclass
class ImputeBlock:
    test_missing_rate: float = config.TEST_MISSING_RATE
    test_seed_offset: int = config.TEST_SEED_OFFSET
    num_images: int = config.NUM_EVAL_IMPUTATIONS
    batch_size: int = 500
    save_grid: bool = True


@dataclass
class EvalBlock:
    num_samples: int = config.NUM_EVAL_SAMPLES
    batch_size: int = 500
    classifier_seed: int = 0


@dataclass
class ExperimentConfig:
    profile: str = "desk"
    output_dir: str = config.OUTPUT_ROOT
    workers: int = config.SWEEP_WORKERS
    missing_rates: list[float] = field(default_factory=lambda: list(config.MISSING_RATES))
    seeds: list[int] = field(default_factory=lambda: list(config.SEEDS))
    models: list[str] = field(default_factory=lambda: list(config.MODELS))
    data: DataPaths = field(default_factory=DataPaths)
    schedule: DiffusionSchedule = field(default_factory=DiffusionSchedule)
    train: TrainBlock = field(default_factory=TrainBlock)
    pixel_net: ScoreNetConfig = field(default_factory=lambda: ScoreNetConfig.for_space("pixel"))
    latent_net: ScoreNetConfig = field(default_factory=lambda: ScoreNetConfig.for_space("latent"))
    vae: VaeConfig = field(default_factory=VaeConfig)
    impute: ImputeBlock = field(default_factory=ImputeBlock)
    eval: EvalBlock = field(default_factory=EvalBlock)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def profile_defaults(profile: str) -> ExperimentConfig:
    """Default configuration of a profile; desk shrinks epochs, steps, sample counts and networks."""
    if profile not in PROFILES:
        raise InvalidValue(f"profile: expected one of {', '.join(PROFILES)}, got {profile!r}")
    cfg = ExperimentConfig(
        profile=profile,
        pixel_net=ScoreNetConfig.for_space("pixel", profile),
        latent_net=ScoreNetConfig.for_space("latent", profile),
    )
    if profile == "desk":
        desk = config.DESK_PROFILE
        cfg.train = replace(cfg.train, epochs=desk["epochs"], vae_epochs=desk["vae_epochs"])
        cfg.schedule = replace(cfg.schedule, num_steps=desk["sample_steps"])
        cfg.impute = replace(cfg.impute, num_images=desk["num_eval_imputations"])
        cfg.eval = replace(cfg.eval, num_samples=desk["num_eval_samples"])
    return cfg


def _type_name(hint) -> str:
    return getattr(hint, "__name__", str(hint))


def _coerce(value, hint, path: str):
    """Check a JSON value against a dataclass field annotation."""
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return None
        for arg in args:
            if arg is not type(None):
                return _coerce(value, arg, path)
    if origin in (list, tuple):
        if not isinstance(value, list):
            raise InvalidValue(f"{path}: expected a list, got {value!r}")
        element = typing.get_args(hint)[0]
        items = [_coerce(v, element, f"{path}[{i}]") for i, v in enumerate(value)]
        return tuple(items) if origin is tuple else items
    if hint is bool:
        if not isinstance(value, bool):
            raise InvalidValue(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidValue(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidValue(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise InvalidValue(f"{path}: expected a string, got {value!r}")
        return value
    raise InvalidValue(f"{path}: unsupported type {_type_name(hint)}")


def _build(cls, base, data, path: str):
    """Overlay a JSON object onto the dataclass instance `base`, recursing into nested blocks."""
    if not isinstance(data, dict):
        raise InvalidValue(f"{path or '<root>'}: expected an object, got {data!r}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise UnknownKey(f"{path}{key}: unknown key")
    values = {}
    for f in fields(cls):
        current = getattr(base, f.name)
        key_path = f"{path}{f.name}"
        if f.name not in data:
            values[f.name] = current
        elif is_dataclass(hints[f.name]):
            values[f.name] = _build(hints[f.name], current, data[f.name], f"{key_path}.")
        else:
            values[f.name] = _coerce(data[f.name], hints[f.name], key_path)
    try:
        return cls(**values)
    except (ValueError, TypeError) as e:
        if isinstance(e, (InvalidValue, UnknownKey)):
            raise
        raise InvalidValue(f"{path.rstrip('.') or '<root>'}: {e}") from e


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Cross-field checks that the dataclasses cannot express on their own."""
    for i, rate in enumerate(cfg.missing_rates):
        if not 0.0 <= rate <= 1.0:
            raise InvalidValue(f"missing_rates[{i}]: rate {rate} is outside [0, 1]")
    if not cfg.seeds:
        raise InvalidValue("seeds: at least one seed is required")
    for i, seed in enumerate(cfg.seeds):
        check_seed(seed, f"seeds[{i}]")
        check_seed(seed + cfg.impute.test_seed_offset, f"impute.test_seed_offset: test seed for seeds[{i}]")
    for i, model in enumerate(cfg.models):
        if model not in config.MODELS:
            raise InvalidValue(f"models[{i}]: expected one of {', '.join(config.MODELS)}, got {model!r}")
    if cfg.workers < 1:
        raise InvalidValue(f"workers: must be >= 1, got {cfg.workers}")
    if not 0.0 <= cfg.impute.test_missing_rate <= 1.0:
        raise InvalidValue(f"impute.test_missing_rate: {cfg.impute.test_missing_rate} is outside [0, 1]")
    if cfg.train.loss_kind not in ("masked", "full"):
        raise InvalidValue(f"train.loss_kind: expected 'masked' or 'full', got {cfg.train.loss_kind!r}")
    for name in ("batch_size", "em_rounds"):
        if getattr(cfg.train, name) < 1:
            raise InvalidValue(f"train.{name}: must be >= 1")
    for name in ("epochs", "vae_epochs", "classifier_epochs", "em_epochs_per_round"):
        if getattr(cfg.train, name) < 0:
            raise InvalidValue(f"train.{name}: must be >= 0")
    for name in ("lr_pixel", "lr_latent", "lr_vae", "lr_classifier"):
        if getattr(cfg.train, name) <= 0:
            raise InvalidValue(f"train.{name}: must be > 0")
    for block, name in (("impute", "num_images"), ("impute", "batch_size"), ("eval", "num_samples"),
                        ("eval", "batch_size")):
        if getattr(getattr(cfg, block), name) < 1:
            raise InvalidValue(f"{block}.{name}: must be >= 1")
    return cfg


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise InvalidValue(f"<root>: expected an object, got {type(data).__name__}")
    profile = data.get("profile", "desk")
    if not isinstance(profile, str):
        raise InvalidValue(f"profile: expected a string, got {profile!r}")
    return validate(_build(ExperimentConfig, profile_defaults(profile), data, ""))


def parse_config(path: str | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    """
    Load an experiment configuration.

    Args:
        path: JSON file; None or an empty file means all defaults
        overrides: "dotted.key=value" strings applied on top; values are parsed
            as JSON and fall back to plain strings

    Returns:
        ExperimentConfig: Validated configuration with defaults filled in

    Raises:
        ParseError: The file is not valid JSON
        UnknownKey: A key does not exist at its path
        InvalidValue: A value has the wrong type or range
    """
    data = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
        if text.strip():
            try:
                data = json.loads(text)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from e
    for item in overrides or []:
        _apply_override(data, item)
    return config_from_dict(data)


def _apply_override(data: dict, item: str):
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ParseError(f"override '{item}' is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    target = data
    parts = key.split(".")
    for part in parts[:-1]:
        target = target.setdefault(part, {})
        if not isinstance(target, dict):
            raise InvalidValue(f"{key}: '{part}' is not an object")
    target[parts[-1]] = value


def serialize_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)


def save_config(cfg: ExperimentConfig, path: str):
    with open(path, "w", encoding="utf-8") as f:
        f.write(serialize_config(cfg))
