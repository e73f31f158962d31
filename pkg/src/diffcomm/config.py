"""Plain-text experiment configuration with dotted keys.

Config files are line-oriented ``section.key = value`` pairs; ``#``
starts a comment, blank lines are ignored, and every key has a default
so the empty file is a valid experiment. Lists are comma-separated.
The canonical serialization (all effective keys, sorted) feeds the run
manifest's config hash, so the hash changes exactly when some key's
effective value changes.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

from .channel import CHANNEL_KINDS, DEFAULT_GAIN_FLOOR
from .codec import ALIGN_MODES, MASK_MODES
from .denoiser import DenoiserConfig, preset
from .errors import ConfigurationError
from .schedule import DEFAULT_BETA_END, DEFAULT_BETA_START, NoiseSchedule, build_schedule
from .training import TrainingConfig

__all__ = ["ExperimentConfig", "parse_config_text", "load_experiment_config", "config_hash"]

SWEEP_MODES = ("adaptive", "fixed")

_KNOWN_KEYS = {
    "seed",
    "output.dir",
    "dataset.dirs",
    "dataset.dir",  # single-directory alias
    "dataset.image_size",
    "schedule.T",
    "schedule.beta_start",
    "schedule.beta_end",
    "channel.kinds",
    "channel.snrs_db",
    "channel.gain_floor",
    "denoiser.preset",
    "denoiser.levels",
    "denoiser.base_channels",
    "denoiser.channel_multipliers",
    "denoiser.attention_levels",
    "denoiser.time_embed_dim",
    "alloc.n_patches",
    "alloc.n_min",
    "alloc.n_max",
    "sweep.modes",
    "sweep.fixed_steps",
    "sweep.limit",
    "sweep.timing",
    "align.mode",
    "mask.mode",
    "training.beta",
    "training.batch_size",
    "training.steps",
    "training.lr",
    "training.channel_augment",
    "training.log_interval",
}


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines into a flat dotted-key dict."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"config line {lineno}: empty key")
        if key in out:
            raise ConfigurationError(f"config line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _as_bool(key: str, value: str) -> bool:
    low = value.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigurationError(f"{key}: expected a boolean, got {value!r}")


def _as_int(key: str, value: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigurationError(f"{key}: expected an integer, got {value!r}") from None


def _as_float(key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigurationError(f"{key}: expected a number, got {value!r}") from None


def _as_list(value: str) -> list[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: Path = Path("runs/out")
    dataset_dirs: tuple[Path, ...] = ()
    image_size: int = 32
    schedule_T: int = 1000
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END
    channel_kinds: tuple[str, ...] = ("awgn",)
    snrs_db: tuple[float, ...] = (0.0, 5.0, 10.0, 15.0, 20.0)
    gain_floor: float = DEFAULT_GAIN_FLOOR
    denoiser_preset: str = "desk"
    denoiser_overrides: tuple[tuple[str, str], ...] = ()
    n_patches: int = 16
    n_min: int = 100
    n_max: int = 200
    modes: tuple[str, ...] = ("adaptive",)
    fixed_steps: int = 150
    eval_limit: int = 200
    timing: str = "wall"
    align_mode: str = "aligned"
    mask_mode: str = "strided"
    training: TrainingConfig = field(default_factory=TrainingConfig)
    log_interval: int = 100

    def __post_init__(self) -> None:
        if not self.snrs_db:
            raise ConfigurationError("channel.snrs_db must be non-empty")
        if not self.channel_kinds:
            raise ConfigurationError("channel.kinds must be non-empty")
        for kind in self.channel_kinds:
            if kind not in CHANNEL_KINDS:
                raise ConfigurationError(f"channel.kinds: unknown kind {kind!r}, expected {CHANNEL_KINDS}")
        side = math.isqrt(self.n_patches)
        if side * side != self.n_patches:
            raise ConfigurationError(f"alloc.n_patches must be a perfect square, got {self.n_patches}")
        if not 1 <= self.n_min <= self.n_max:
            raise ConfigurationError(f"need 1 <= n_min <= n_max, got {self.n_min}, {self.n_max}")
        if not self.modes:
            raise ConfigurationError("sweep.modes must be non-empty")
        for mode in self.modes:
            if mode not in SWEEP_MODES:
                raise ConfigurationError(f"sweep.modes: unknown mode {mode!r}, expected {SWEEP_MODES}")
        if self.fixed_steps < 1:
            raise ConfigurationError(f"sweep.fixed_steps must be >= 1, got {self.fixed_steps}")
        if self.timing not in ("wall", "none"):
            raise ConfigurationError(f"sweep.timing must be 'wall' or 'none', got {self.timing!r}")
        if self.align_mode not in ALIGN_MODES:
            raise ConfigurationError(f"align.mode must be one of {ALIGN_MODES}, got {self.align_mode!r}")
        if self.mask_mode not in MASK_MODES:
            raise ConfigurationError(f"mask.mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        if self.image_size < 1:
            raise ConfigurationError(f"dataset.image_size must be positive, got {self.image_size}")
        if self.eval_limit < 1:
            raise ConfigurationError(f"sweep.limit must be >= 1, got {self.eval_limit}")

    @property
    def patch_grid(self) -> tuple[int, int]:
        side = math.isqrt(self.n_patches)
        return (side, side)

    def denoiser_config(self) -> DenoiserConfig:
        base = preset(self.denoiser_preset)
        if not self.denoiser_overrides:
            return base
        fields = base.to_dict()
        for key, value in self.denoiser_overrides:
            if key in ("levels", "base_channels", "time_embed_dim"):
                fields[key] = _as_int(f"denoiser.{key}", value)
            elif key in ("channel_multipliers", "attention_levels"):
                fields[key] = [_as_int(f"denoiser.{key}", v) for v in _as_list(value)]
            else:
                raise ConfigurationError(f"unknown denoiser override {key!r}")
        return DenoiserConfig.from_dict(fields)

    def noise_schedule(self) -> NoiseSchedule:
        return build_schedule(self.schedule_T, self.beta_start, self.beta_end)

    def dataset_names(self) -> tuple[str, ...]:
        return tuple(d.name or str(d) for d in self.dataset_dirs)

    def to_canonical(self) -> str:
        """All effective keys, one per line, sorted — the hashed identity."""
        entries = {
            "seed": str(self.seed),
            "output.dir": str(self.output_dir),
            "dataset.dirs": ",".join(str(d) for d in self.dataset_dirs),
            "dataset.image_size": str(self.image_size),
            "schedule.T": str(self.schedule_T),
            "schedule.beta_start": repr(self.beta_start),
            "schedule.beta_end": repr(self.beta_end),
            "channel.kinds": ",".join(self.channel_kinds),
            "channel.snrs_db": ",".join(repr(v) for v in self.snrs_db),
            "channel.gain_floor": repr(self.gain_floor),
            "denoiser.preset": self.denoiser_preset,
            "denoiser.overrides": ";".join(f"{k}={v}" for k, v in self.denoiser_overrides),
            "alloc.n_patches": str(self.n_patches),
            "alloc.n_min": str(self.n_min),
            "alloc.n_max": str(self.n_max),
            "sweep.modes": ",".join(self.modes),
            "sweep.fixed_steps": str(self.fixed_steps),
            "sweep.limit": str(self.eval_limit),
            "sweep.timing": self.timing,
            "align.mode": self.align_mode,
            "mask.mode": self.mask_mode,
            "training.beta": repr(self.training.beta_tradeoff),
            "training.batch_size": str(self.training.batch_size),
            "training.steps": str(self.training.step_budget),
            "training.lr": repr(self.training.learning_rate),
            "training.channel_augment": str(self.training.channel_augment).lower(),
            "training.log_interval": str(self.log_interval),
        }
        return "\n".join(f"{k} = {v}" for k, v in sorted(entries.items())) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(cfg.to_canonical().encode()).hexdigest()


def _experiment_from_pairs(pairs: dict[str, str]) -> ExperimentConfig:
    unknown = set(pairs) - _KNOWN_KEYS
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    if "dataset.dir" in pairs and "dataset.dirs" in pairs:
        raise ConfigurationError("give either dataset.dir or dataset.dirs, not both")

    def get(key: str, default: str) -> str:
        return pairs.get(key, default)

    dirs_value = pairs.get("dataset.dirs", pairs.get("dataset.dir", ""))
    denoiser_overrides = tuple(
        (key.split(".", 1)[1], pairs[key])
        for key in sorted(pairs)
        if key.startswith("denoiser.") and key != "denoiser.preset"
    )
    training = TrainingConfig(
        beta_tradeoff=_as_float("training.beta", get("training.beta", "0.5")),
        batch_size=_as_int("training.batch_size", get("training.batch_size", "64")),
        step_budget=_as_int("training.steps", get("training.steps", "5000")),
        learning_rate=_as_float("training.lr", get("training.lr", "1e-4")),
        seed=_as_int("seed", get("seed", "0")),
        channel_augment=_as_bool("training.channel_augment", get("training.channel_augment", "false")),
    )
    return ExperimentConfig(
        seed=_as_int("seed", get("seed", "0")),
        output_dir=Path(get("output.dir", "runs/out")),
        dataset_dirs=tuple(Path(p) for p in _as_list(dirs_value)),
        image_size=_as_int("dataset.image_size", get("dataset.image_size", "32")),
        schedule_T=_as_int("schedule.T", get("schedule.T", "1000")),
        beta_start=_as_float("schedule.beta_start", get("schedule.beta_start", repr(DEFAULT_BETA_START))),
        beta_end=_as_float("schedule.beta_end", get("schedule.beta_end", repr(DEFAULT_BETA_END))),
        channel_kinds=tuple(_as_list(get("channel.kinds", "awgn"))),
        snrs_db=tuple(_as_float("channel.snrs_db", v) for v in _as_list(get("channel.snrs_db", "0,5,10,15,20"))),
        gain_floor=_as_float("channel.gain_floor", get("channel.gain_floor", repr(DEFAULT_GAIN_FLOOR))),
        denoiser_preset=get("denoiser.preset", "desk"),
        denoiser_overrides=denoiser_overrides,
        n_patches=_as_int("alloc.n_patches", get("alloc.n_patches", "16")),
        n_min=_as_int("alloc.n_min", get("alloc.n_min", "100")),
        n_max=_as_int("alloc.n_max", get("alloc.n_max", "200")),
        modes=tuple(_as_list(get("sweep.modes", "adaptive"))),
        fixed_steps=_as_int("sweep.fixed_steps", get("sweep.fixed_steps", "150")),
        eval_limit=_as_int("sweep.limit", get("sweep.limit", "200")),
        timing=get("sweep.timing", "wall"),
        align_mode=get("align.mode", "aligned"),
        mask_mode=get("mask.mode", "strided"),
        training=training,
        log_interval=_as_int("training.log_interval", get("training.log_interval", "100")),
    )


def load_experiment_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Read a config file and apply command-line style key overrides."""
    text = Path(path).read_text() if path is not None else ""
    pairs = parse_config_text(text)
    if overrides:
        pairs.update(overrides)
    return _experiment_from_pairs(pairs)
