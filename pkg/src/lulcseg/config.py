"""Plain-text ``key = value`` configuration files and the pipeline config.

Grammar, one entry per line::

    # comment
    key = value        # trailing comments are allowed too

Keys are unique; whitespace around keys and values is stripped; blank
lines are ignored. Order is preserved (palette files rely on it).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AUGMENT_SETS, AugmentOp
from .model import BackboneConfig, JPUConfig, TrainConfig


class ConfigError(ValueError):
    pass


def parse_keyvalue(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_keyvalue(path) -> dict[str, str]:
    path = Path(path)
    return parse_keyvalue(path.read_text(), str(path))


def _ints(value: str) -> tuple:
    return tuple(int(v) for v in value.split(",") if v.strip())


@dataclass
class PipelineConfig:
    dataset_root: Path = Path("data")
    out: Path = Path("out")
    palette_file: Path | None = None
    tile_size: int = 512
    augment_set: str = "standard"
    test_fraction: float = 0.2
    seed: int = 0
    workers: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    jpu: JPUConfig = field(default_factory=JPUConfig)
    # synthetic dataset generation
    synth_scenes: int = 40
    synth_size: int = 256
    synth_region_scale: int = 96

    def __post_init__(self):
        self.dataset_root = Path(self.dataset_root)
        self.out = Path(self.out)
        if self.palette_file is not None:
            self.palette_file = Path(self.palette_file)
        if self.tile_size < 1:
            raise ConfigError("tile_size must be positive")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie strictly between 0 and 1")
        if self.augment_set not in AUGMENT_SETS and not all(
            op in AugmentOp.__members__ for op in self.augment_set.split(",")
        ):
            raise ConfigError(f"unknown augment set {self.augment_set!r}")

    def with_overrides(self, **kw) -> "PipelineConfig":
        """Copy with top-level or ``train.*`` fields replaced (``None`` values skipped)."""
        kw = {k: v for k, v in kw.items() if v is not None}
        train_kw = {k[6:]: kw.pop(k) for k in list(kw) if k.startswith("train.")}
        cfg = dataclasses.replace(self, **kw)
        if train_kw:
            cfg.train = dataclasses.replace(cfg.train, **train_kw)
        return cfg

    def to_mapping(self) -> dict[str, str]:
        """Inverse of :meth:`from_mapping` (``None`` entries omitted)."""
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            items = ([(f"{f.name}.{g.name}", getattr(v, g.name)) for g in dataclasses.fields(v)]
                     if dataclasses.is_dataclass(v) else [(f.name, v)])
            for key, value in items:
                if value is not None:
                    out[key] = ",".join(map(str, value)) if isinstance(value, tuple) else str(value)
        return out

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        return cls.from_mapping(read_keyvalue(path), source=str(path))

    @classmethod
    def from_mapping(cls, kv: dict[str, str], source="<config>") -> "PipelineConfig":
        top, train, backbone, jpu = {}, {}, {}, {}
        sections = {"train": (train, TrainConfig), "backbone": (backbone, BackboneConfig), "jpu": (jpu, JPUConfig)}
        top_types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, value in kv.items():
            prefix, _, name = key.partition(".")
            if name and prefix in sections:
                target, kind = sections[prefix]
                ftypes = {f.name: f for f in dataclasses.fields(kind)}
                if name not in ftypes:
                    raise ConfigError(f"{source}: unknown key {key!r}")
                target[name] = _coerce(ftypes[name].default, value, key, source)
            elif key in top_types and key not in sections:
                default = getattr(cls(), key)
                top[key] = _coerce(default, value, key, source)
            else:
                raise ConfigError(f"{source}: unknown key {key!r}")
        try:
            return cls(train=TrainConfig(**train), backbone=BackboneConfig(**backbone), jpu=JPUConfig(**jpu), **top)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: {exc}") from exc


def _coerce(default, value: str, key: str, source: str):
    try:
        if isinstance(default, bool):
            return value.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return _ints(value)
        if isinstance(default, Path) or default is None:
            if key.endswith("channels"):
                return int(value) if value.lower() != "none" else None
            return Path(value) if value.lower() != "none" else None
        return value
    except ValueError:
        raise ConfigError(f"{source}: bad value {value!r} for {key!r}") from None
