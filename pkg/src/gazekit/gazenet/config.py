from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from ..errors import ConfigError
from ..numerics import LrSchedule

PENULTIMATE_WIDTH = 4
REFERENCE_PARAM_TARGET = 140_000


@dataclass
class GazeNetConfig:
    """Architecture and training hyperparameters of the two-tower network."""

    crop_size: int = 128
    tower_channels: tuple = (32, 64, 128)
    tower_kernels: tuple = (7, 5, 3)
    eye_reduction_units: int = 16
    landmark_units: tuple = (16, 16)
    fusion_units: tuple = (16, 8, 4)
    output_dim: int = 2
    bn_eps: float = 1e-3
    bn_momentum: float = 0.9
    pooling: str = "avg"
    padding: str = "same"
    batch_size: int = 64
    schedule: LrSchedule = field(default_factory=LrSchedule)
    max_steps: int = 20_000
    eval_every: int = 500
    early_stop_patience: int = 0
    seed: int = 0

    def __post_init__(self):
        self.tower_channels = tuple(int(c) for c in self.tower_channels)
        self.tower_kernels = tuple(int(k) for k in self.tower_kernels)
        self.landmark_units = tuple(int(u) for u in self.landmark_units)
        self.fusion_units = tuple(int(u) for u in self.fusion_units)
        if isinstance(self.schedule, dict):
            self.schedule = LrSchedule(**self.schedule)
        if len(self.tower_channels) != len(self.tower_kernels):
            raise ConfigError("tower_channels and tower_kernels must have equal length")
        if any(k % 2 == 0 for k in self.tower_kernels):
            raise ConfigError("tower kernels must be odd")
        if not self.fusion_units or self.fusion_units[-1] != PENULTIMATE_WIDTH:
            raise ConfigError(f"last fusion width must be {PENULTIMATE_WIDTH}, got {self.fusion_units}")
        if self.output_dim != 2:
            raise ConfigError("output_dim must be 2 (x, y in cm)")
        if self.pooling not in ("avg", "max"):
            raise ConfigError(f"pooling must be 'avg' or 'max', got {self.pooling!r}")
        if self.padding not in ("same", "valid"):
            raise ConfigError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm needs batch statistics)")
        if self.crop_size < 2 ** len(self.tower_channels):
            raise ConfigError("crop_size too small for the pooling stack")

    def to_dict(self):
        d = asdict(self)
        d["schedule"] = self.schedule.settings()
        for k in ("tower_channels", "tower_kernels", "landmark_units", "fusion_units"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown gazenet config key(s): {', '.join(unknown)}")
        d = dict(d)
        if "schedule" in d and isinstance(d["schedule"], dict):
            sched_known = set(LrSchedule().settings())
            bad = sorted(set(d["schedule"]) - sched_known)
            if bad:
                raise ConfigError(f"unknown schedule config key(s): {', '.join(bad)}")
            d["schedule"] = LrSchedule(**d["schedule"])
        return cls(**d)


def parameter_count(config):
    """Trainable parameters implied by ``config``, summed from layer shapes."""
    total = 0
    cin = 3
    for k, cout in zip(config.tower_kernels, config.tower_channels):
        total += k * k * cin * cout + cout  # conv
        total += 2 * cout  # batch-norm gamma/beta
        cin = cout
    total += cin * config.eye_reduction_units + config.eye_reduction_units
    din = 8
    for u in config.landmark_units:
        total += din * u + u
        din = u
    din = config.eye_reduction_units + config.landmark_units[-1]
    for u in config.fusion_units:
        total += din * u + u
        din = u
    total += din * config.output_dim + config.output_dim
    return total


def within_budget(config, target=REFERENCE_PARAM_TARGET, tolerance=0.10):
    return abs(parameter_count(config) - target) <= tolerance * target
