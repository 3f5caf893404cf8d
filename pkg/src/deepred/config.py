"""Flat key/value run configuration shared by every CLI command."""
import json
import os
from dataclasses import dataclass, fields

from .eventlog import FormatDescriptor
from .model import ModelConfig
from .trainer import TrainConfig

SEED_ENV = "DEEPRED_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # paths
    data: str = ""
    cache: str = ""
    output_dir: str = "runs/default"
    # input format
    user_col: str = "0"
    item_col: str = "1"
    time_col: str = "2"
    header: bool = True
    # experiment
    mode: str = "temporal"
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    static_train_fraction: float = 0.6
    static_val_fraction: float = 0.1
    static_test_fraction: float = 0.3
    # model
    d: int = 32
    hidden: int = 0
    k: int = 5
    delta_transform: str = "raw"
    pooling: str = "max"
    use_theta: bool = False
    # training
    batch_size: int = 128
    learning_rate: float = 1e-2
    epochs: int = 5
    gamma: float = 0.1
    regularizer: str = "batch"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 0
    shuffle: bool = True
    checkpoint_every: int = 0
    val_max_events: int = 0
    # evaluation
    eval_mode: str = "exact"
    refresh: bool = True

    def __post_init__(self):
        if self.mode not in ("temporal", "static"):
            raise ConfigError(f"mode must be 'temporal' or 'static', got {self.mode!r}")
        if self.eval_mode not in ("exact", "cached"):
            raise ConfigError(f"eval_mode must be 'exact' or 'cached', got {self.eval_mode!r}")

    @property
    def fractions(self):
        return (self.train_fraction, self.val_fraction, self.test_fraction)

    @property
    def static_fractions(self):
        return (self.static_train_fraction, self.static_val_fraction, self.static_test_fraction)

    def log_format(self):
        def col(value):
            return int(value) if str(value).isdigit() else value
        return FormatDescriptor(col(self.user_col), col(self.item_col), col(self.time_col),
                                header=self.header)

    def model_config(self, static=None):
        static = self.mode == "static" if static is None else static
        return ModelConfig(d=self.d, hidden=self.hidden or None, k=self.k,
                           delta_transform=self.delta_transform, pooling=self.pooling,
                           use_theta=self.use_theta, static=static)

    def train_config(self):
        return TrainConfig(batch_size=self.batch_size, learning_rate=self.learning_rate,
                           epochs=self.epochs, gamma=self.gamma, beta1=self.beta1, beta2=self.beta2,
                           epsilon=self.epsilon, seed=self.seed, shuffle=self.shuffle,
                           checkpoint_every=self.checkpoint_every, clip_norm=self.clip_norm,
                           regularizer=self.regularizer, val_mode=self.eval_mode,
                           val_max_events=self.val_max_events or None)

    def to_text(self):
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())


KEYS = {f.name: f for f in fields(RunConfig)}
DEFAULTS = RunConfig()


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def coerce(key, raw):
    """Convert a string (or JSON scalar) to the type of ``key``'s default."""
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    default = getattr(DEFAULTS, key)
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return type(default)(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {raw!r}") from None


def parse_text(text):
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def load_config(path=None, overrides=None, env=None):
    """Defaults <- file <- ``overrides`` <- seed from the environment."""
    values = {}
    if path:
        with open(path) as fh:
            text = fh.read()
        values = json.loads(text) if path.endswith(".json") else parse_text(text)
    values.update(overrides or {})
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        values["seed"] = env[SEED_ENV]
    return RunConfig(**{key: coerce(key, value) for key, value in values.items()})


def describe_keys():
    return "\n".join(f"  {name} (default: {_format(getattr(DEFAULTS, name))})" for name in KEYS)
