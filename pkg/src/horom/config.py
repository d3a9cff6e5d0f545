"""Run configuration, read from a YAML key-value file."""

from dataclasses import asdict, dataclass, field, fields

import yaml

from .errors import ConfigError
from .fom import KINDS, default_problem
from .losses import LossSettings, LossWeights


@dataclass
class TrainingConfig:
    problem: str = "burgers1d"
    param_ranges: list = None  # [[lo, hi], [lo, hi]]; problem default when omitted
    grid_points: list = field(default_factory=lambda: [11, 11])
    problem_overrides: dict = field(default_factory=dict)  # n_steps, T, constants, grid entries
    architecture: str = "1001-250-100-100-5"
    loss_weights: list = field(default_factory=lambda: [1, 1, 0, 0.2, 1, 1, 1e-4])
    learning_rate: float = 1e-3
    lr_decay: float = 1.0  # per-iteration factor: lr_i = learning_rate * lr_decay**i
    iterations: int = 20000
    sampling_freq: int = 2500
    initial_train: list = None  # list of parameter points; grid corners when omitted
    n_samples: int = 20
    top_weights: list = field(default_factory=lambda: [1.0, 0.0])
    seed: int = 0
    time_stride: int = 1
    anneal_rate: float = 0.01
    anneal_every: int = 100
    rollout_cap: float = 0.75
    ld_normalization: str = "frames"
    penalties: dict = field(default_factory=dict)
    data_dir: str = "data"
    run_dir: str = "run"
    log_every: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.problem not in KINDS:
            raise ConfigError(f"unknown problem {self.problem!r}; expected one of {KINDS}")
        try:
            LossWeights.from_sequence(self.loss_weights)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.iterations < 0 or self.sampling_freq <= 0:
            raise ConfigError("iterations must be >= 0 and sampling_freq > 0")
        if self.iterations % self.sampling_freq:
            raise ConfigError(f"sampling_freq {self.sampling_freq} does not divide iterations {self.iterations}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must be in (0, 1]")
        if self.time_stride < 1:
            raise ConfigError("time_stride must be >= 1")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if self.ld_normalization not in ("frames", "sum"):
            raise ConfigError("ld_normalization must be 'frames' or 'sum'")
        if len(self.grid_points) != 2 or min(self.grid_points) < 2:
            raise ConfigError("grid_points needs two entries >= 2")
        w1, w2 = (float(w) for w in self.top_weights)
        if w1 < 0 or w2 < 0 or abs(w1 + w2 - 1) > 1e-12:
            raise ConfigError(f"top_weights must be convex, got {self.top_weights}")
        if self.problem == "kleingordon" and self.param_ranges is None:
            raise ConfigError("kleingordon needs explicit param_ranges for (m, w)")

    @property
    def weights(self):
        return LossWeights.from_sequence(self.loss_weights)

    @property
    def settings(self):
        return LossSettings(tuple(self.top_weights), self.ld_normalization, dict(self.penalties))

    def fom_problem(self):
        overrides = dict(self.problem_overrides)
        if self.param_ranges is not None:
            overrides["param_ranges"] = self.param_ranges
        return default_problem(self.problem, **overrides)

    def to_dict(self):
        return asdict(self)


def load_config(path, **overrides):
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a key-value mapping")
    return config_from_dict(raw, **overrides)


def config_from_dict(raw, **overrides):
    known = {f.name for f in fields(TrainingConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    values = dict(raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainingConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
