"""Experiment configuration: a flat key=value file format.

One file drives a whole run: phantom generation, training budgets,
co-training loop shape and evaluation.  Parsing is strict — unknown keys,
bad values and duplicates are errors that name the offending line — and
``format_config`` emits a canonical echo such that ``parse_config``
round-trips it exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .backbone import PatchFeatureSpec, TrainConfig
from .core_volume import DEFAULT_WINDOWS, WindowSpec
from .cotrain import MODES, CotrainSettings
from .phantom import PhantomSpec


class ConfigError(ValueError):
    """A config file failed to parse or validate."""


def _format_float(v: float) -> str:
    return repr(float(v))


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_windows(raw: str) -> tuple[WindowSpec, ...]:
    specs = []
    for part in raw.split(","):
        lo, sep, hi = part.partition(":")
        if not sep:
            raise ValueError(f"window {part.strip()!r} is not lo:hi")
        specs.append(WindowSpec(float(lo), float(hi)))
    if not specs:
        raise ValueError("at least one window is required")
    return tuple(specs)


def _format_windows(windows: tuple[WindowSpec, ...]) -> str:
    return ",".join(f"{_format_float(w.lo)}:{_format_float(w.hi)}" for w in windows)


def _parse_organ_means(raw: str) -> tuple[float, ...] | None:
    if not raw.strip():
        return None
    return tuple(float(p) for p in raw.split(","))


def _parse_dims(raw: str) -> tuple[int, int, int]:
    parts = [p.strip() for p in raw.split(",")]
    if len(parts) != 3:
        raise ValueError(f"dims need exactly three values, got {raw!r}")
    return tuple(int(p) for p in parts)


@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of one experiment, flat so it maps 1:1 onto the file."""

    mode: str = "dmpct"
    seed: int = 0
    rounds: int = 2
    num_classes: int = 4
    learning_rate: float = 0.1
    teacher_iterations: int = 10000
    student_iterations: int = 28000  # 0 means "twice the teacher budget"
    batch_slices: int = 2
    pixels_per_slice: int = 512
    hidden_units: int = 0
    warm_start: bool = False
    top_n: int = 192
    workers: int = 1
    record_provenance: bool = True
    windows: tuple[WindowSpec, ...] = DEFAULT_WINDOWS
    dims: tuple[int, int, int] = (48, 48, 48)
    num_labeled: int = 4
    num_unlabeled: int = 16
    num_test: int = 10
    organ_mean_base: float = -20.0
    organ_mean_step: float = 45.0
    organ_means: tuple[float, ...] | None = None
    organ_std: float = 12.0
    background_mean: float = -60.0
    background_std: float = 15.0
    noise_scale: float = 1.0
    case_hu_jitter: float = 6.0
    center_jitter: float = 0.07
    size_jitter: float = 0.15
    hu_offset: float = 0.0
    size_scale: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.teacher_iterations < 0 or self.student_iterations < 0:
            raise ConfigError("iteration budgets must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.top_n < 1:
            raise ConfigError("top_n must be >= 1")
        if self.num_labeled < 1:
            raise ConfigError("num_labeled must be >= 1")
        if self.num_unlabeled < 0 or self.num_test < 0:
            raise ConfigError("split counts must be >= 0")

    @property
    def resolved_student_iterations(self) -> int:
        if self.student_iterations > 0:
            return self.student_iterations
        return 2 * self.teacher_iterations

    def train_config(self, student: bool = False) -> TrainConfig:
        iterations = self.resolved_student_iterations if student else self.teacher_iterations
        return TrainConfig(
            num_classes=self.num_classes,
            iterations=iterations,
            learning_rate=self.learning_rate,
            batch_slices=self.batch_slices,
            pixels_per_slice=self.pixels_per_slice,
            hidden_units=self.hidden_units,
            feature_spec=PatchFeatureSpec(channels=len(self.windows)),
        )

    def cotrain_settings(self) -> CotrainSettings:
        return CotrainSettings(
            teacher=self.train_config(student=False),
            student=self.train_config(student=True),
            windows=self.windows,
            rounds=self.rounds,
            seed=self.seed,
            warm_start=self.warm_start,
            top_n=self.top_n,
            workers=self.workers,
            record_provenance=self.record_provenance,
        )

    def phantom_spec(self) -> PhantomSpec:
        return PhantomSpec(
            dims=self.dims,
            num_organs=self.num_classes,
            organ_mean_base=self.organ_mean_base,
            organ_mean_step=self.organ_mean_step,
            organ_means=self.organ_means,
            organ_std=self.organ_std,
            background_mean=self.background_mean,
            background_std=self.background_std,
            noise_scale=self.noise_scale,
            case_hu_jitter=self.case_hu_jitter,
            center_jitter=self.center_jitter,
            size_jitter=self.size_jitter,
            hu_offset=self.hu_offset,
            size_scale=self.size_scale,
        )


_PARSERS = {
    "mode": str,
    "seed": int,
    "rounds": int,
    "num_classes": int,
    "learning_rate": float,
    "teacher_iterations": int,
    "student_iterations": int,
    "batch_slices": int,
    "pixels_per_slice": int,
    "hidden_units": int,
    "warm_start": _parse_bool,
    "top_n": int,
    "workers": int,
    "record_provenance": _parse_bool,
    "windows": _parse_windows,
    "dims": _parse_dims,
    "num_labeled": int,
    "num_unlabeled": int,
    "num_test": int,
    "organ_mean_base": float,
    "organ_mean_step": float,
    "organ_means": _parse_organ_means,
    "organ_std": float,
    "background_mean": float,
    "background_std": float,
    "noise_scale": float,
    "case_hu_jitter": float,
    "center_jitter": float,
    "size_jitter": float,
    "hu_offset": float,
    "size_scale": float,
}

assert set(_PARSERS) == {f.name for f in fields(ExperimentConfig)}


def parse_config(text: str, defaults: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse key=value lines into a config.

    Blank lines and ``#`` comments (full-line or trailing) are ignored.

    Raises:
        ConfigError: on unknown keys, duplicate keys, malformed lines or
            unparseable values; the message names the 1-based line number.
    """
    overrides: dict[str, object] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw_value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw_line.strip()!r}")
        key = key.strip()
        raw_value = raw_value.strip()
        if key not in _PARSERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in overrides:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            overrides[key] = _PARSERS[key](raw_value)
        except ConfigError:
            raise
        except (ValueError, TypeError) as err:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {err}") from err
    base = ExperimentConfig() if defaults is None else defaults
    try:
        return replace(base, **overrides)
    except ConfigError as err:
        raise ConfigError(str(err)) from err


def load_config(path: str | Path, defaults: ExperimentConfig | None = None) -> ExperimentConfig:
    file = Path(path)
    if not file.is_file():
        raise ConfigError(f"config file not found: {file}")
    return parse_config(file.read_text(encoding="utf-8"), defaults)


def format_config(config: ExperimentConfig) -> str:
    """Canonical echo of a config; ``parse_config`` round-trips it exactly."""
    lines = []
    for f in fields(ExperimentConfig):
        value = getattr(config, f.name)
        if f.name == "windows":
            encoded = _format_windows(value)
        elif f.name == "dims":
            encoded = ",".join(str(v) for v in value)
        elif f.name == "organ_means":
            encoded = "" if value is None else ",".join(_format_float(v) for v in value)
        elif isinstance(value, bool):
            encoded = "true" if value else "false"
        elif isinstance(value, float):
            encoded = _format_float(value)
        else:
            encoded = str(value)
        lines.append(f"{f.name} = {encoded}")
    return "\n".join(lines) + "\n"
