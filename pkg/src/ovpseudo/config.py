"""Run configuration: one TOML file, command-line flags override it."""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .anchors import ThresholdMode
from .evaluation import OccludedMode
from .preprocess import DEFAULT_KSIZE, DEFAULT_SIGMA, BlurScope, Mode


class ConfigError(ValueError):
    """Invalid or incomplete configuration; the CLI maps it to exit code 2."""


@dataclass
class DatasetConfig:
    annotations: Path | None = None
    split: Path | None = None
    images_root: Path | None = None
    proposals: Path | None = None


@dataclass
class BackendConfig:
    kind: str = "mock"
    manifest: Path | None = None
    endpoint: Path | None = None
    max_retries: int = 2
    retry_backoff: float = 0.0


@dataclass
class PreprocessConfig:
    mode: str = Mode.SOFT.value
    ksize: int = DEFAULT_KSIZE
    sigma: float = DEFAULT_SIGMA
    blur_scope: str = BlurScope.FRAME.value


@dataclass
class ThresholdConfig:
    crowded: int = 8
    occluded: float = 0.5
    anchor_mode: str = ThresholdMode.MIN.value
    occluded_mode: str = OccludedMode.IGNORE.value
    dedup_iou: float = 0.9


@dataclass
class TemperatureConfig:
    tau_bag: float = 30.0
    tau_bg: float = 5.0
    tau_cls: float = 30.0
    tau_individual: float = 30.0


@dataclass
class LossConfig:
    text: Path | None = None
    image: Path | None = None
    background: Path | None = None
    steps: int = 0
    lr: float = 0.01
    h: float = 1e-5


@dataclass
class EvalConfig:
    detections: Path | None = None
    pseudo: Path | None = None
    histogram: Path | None = None
    counts: Path | None = None
    vocabularies: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    thresholds: ThresholdConfig = field(default_factory=ThresholdConfig)
    temperatures: TemperatureConfig = field(default_factory=TemperatureConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out_dir: Path = Path("out")
    jobs: int = 1
    deterministic: bool = True

    def to_json(self) -> dict:
        def conv(v):
            if isinstance(v, Path):
                return str(v)
            if isinstance(v, dict):
                return {k: conv(x) for k, x in sorted(v.items())}
            return v

        return {k: conv(v) for k, v in asdict(self).items()}

    def validate(self, required: tuple[str, ...] = ()) -> "RunConfig":
        """Check enums, ranges and that every set path exists; ``required`` names dotted keys that must be set."""
        _enum(Mode, self.preprocess.mode, "preprocess.mode")
        _enum(BlurScope, self.preprocess.blur_scope, "preprocess.blur_scope")
        _enum(OccludedMode, self.thresholds.occluded_mode, "thresholds.occluded_mode")
        mode = self.thresholds.anchor_mode
        self.thresholds.anchor_mode = mode.value if isinstance(mode, ThresholdMode) else str(mode).upper()
        _enum(ThresholdMode, self.thresholds.anchor_mode, "thresholds.anchor_mode")
        if self.backend.kind not in ("mock", "http"):
            raise ConfigError(f"backend.kind must be 'mock' or 'http', got {self.backend.kind!r}")
        if self.preprocess.ksize < 1 or self.preprocess.ksize % 2 == 0:
            raise ConfigError(f"preprocess.ksize must be a positive odd integer, got {self.preprocess.ksize}")
        if self.preprocess.sigma < 0:
            raise ConfigError("preprocess.sigma must be >= 0")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.backend.max_retries < 0:
            raise ConfigError("backend.max_retries must be >= 0")
        if self.thresholds.crowded < 0 or not 0.0 <= self.thresholds.occluded <= 1.0:
            raise ConfigError("thresholds.crowded must be >= 0 and thresholds.occluded in [0, 1]")
        for name, value in asdict(self.temperatures).items():
            if not value > 0:
                raise ConfigError(f"temperatures.{name} must be positive")
        for key in required:
            if self.get(key) is None:
                raise ConfigError(f"missing required setting {key}")
        for key, path in self.paths():
            if not path.exists():
                raise ConfigError(f"{key}: path does not exist: {path}")
        return self

    def get(self, dotted: str):
        obj = self
        for part in dotted.split("."):
            obj = obj[part] if isinstance(obj, dict) else getattr(obj, part)
        return obj

    def paths(self):
        for section in (self.dataset, self.backend, self.loss, self.eval):
            sname = _section_name(self, section)
            for f in fields(section):
                v = getattr(section, f.name)
                if isinstance(v, Path):
                    yield f"{sname}.{f.name}", v
        for name, v in sorted(self.eval.vocabularies.items()):
            yield f"eval.vocabularies.{name}", v


def _section_name(cfg: RunConfig, section) -> str:
    return next(f.name for f in fields(cfg) if getattr(cfg, f.name) is section)


def _enum(kind, value, key):
    try:
        kind(value)
    except ValueError:
        raise ConfigError(f"{key}: {value!r} is not one of {[m.value for m in kind]}") from None


_SECTIONS = {"dataset": DatasetConfig, "backend": BackendConfig, "preprocess": PreprocessConfig,
             "thresholds": ThresholdConfig, "temperatures": TemperatureConfig, "loss": LossConfig,
             "eval": EvalConfig}


def _coerce(section_cls, name: str, value, base: Path):
    kinds = {f.name: f.type for f in fields(section_cls)}
    if name not in kinds:
        raise ConfigError(f"unknown setting {section_cls.__name__}.{name}")
    kind = str(kinds[name])
    if "Path" in kind:
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a path string")
        p = Path(value)
        return p if p.is_absolute() else base / p
    if name == "vocabularies":
        if not isinstance(value, dict):
            raise ConfigError("eval.vocabularies must be a table of name = path")
        return {k: (Path(v) if Path(v).is_absolute() else base / v) for k, v in value.items()}
    try:
        if kind == "int":
            if isinstance(value, bool) or int(value) != value:
                raise ValueError
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "str":
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: bad value {value!r} (expected {kind})") from None
    return value


def from_mapping(obj: dict, base: Path = Path(".")) -> RunConfig:
    cfg = RunConfig()
    for key, value in obj.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            section = getattr(cfg, key)
            for name, v in value.items():
                setattr(section, name, _coerce(_SECTIONS[key], name, v, base))
        elif key == "out_dir":
            p = Path(str(value))
            cfg.out_dir = p if p.is_absolute() else base / p
        elif key == "jobs":
            cfg.jobs = _coerce(RunConfig, "jobs", value, base)
        elif key == "deterministic":
            if not isinstance(value, bool):
                raise ConfigError("deterministic must be true or false")
            cfg.deterministic = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return cfg


def load_config(path) -> RunConfig:
    """Parse a TOML config; relative paths resolve against the config file's directory."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        obj = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return from_mapping(obj, path.parent)


def override(cfg: RunConfig, dotted: str, value, base: Path = Path(".")) -> None:
    """Apply one flag value (already parsed by argparse) to a dotted key."""
    if value is None:
        return
    head, _, name = dotted.rpartition(".")
    if not head:
        if dotted == "out_dir":
            cfg.out_dir = Path(value)
        else:
            setattr(cfg, dotted, value)
        return
    section = getattr(cfg, head)
    setattr(section, name, _coerce(_SECTIONS[head], name, value, base) if not isinstance(value, Path)
            else value)
