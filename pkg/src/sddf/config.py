"""Run configuration: one dataclass per YAML section.

Unknown sections or keys are errors.  Relative paths are resolved against the
directory of the config file.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .model import ArchSpec
from .shapes import shape_from_dict
from .training import LossConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ShapeSection:
    type: str = "circle"
    id: str = "shape"
    radius: float = 1.0
    center: list | None = None
    min: list | None = None
    max: list | None = None
    vertices: list | None = None
    triangles: list | None = None
    faces: list | None = None
    path: str | None = None


@dataclass
class DatasetSection:
    instances: list = field(default_factory=list)


@dataclass
class SensorSection:
    kind: str = "auto"
    views: int = 8
    heldout_views: int = 1
    radius: float = 2.0
    d_min: float = 0.05
    d_max: float = 100.0
    width: int = 64
    height: int = 64
    focal: float = 48.0
    rays: int = 1081
    span_deg: float = 270.0
    max_finite: int = 12500
    max_infinite: int = 12500


@dataclass
class ArchSection:
    layers: int = 4
    width: int = 64
    skips: list = field(default_factory=list)
    beta: float = 100.0
    latent_dim: int = 0
    squasher: str = "sigmoid"


@dataclass
class LossSection:
    alpha: float = 1.0
    beta: float | None = None
    gamma: float = 0.0
    sigma: float = 0.001
    norm_power: float = 1.0
    rectifier: str = "relu"


TrainSection = dataclasses.make_dataclass(
    "TrainSection",
    [(f.name, f.type, field(default=f.default)) for f in fields(TrainConfig)]
    + [("complete_finite", int, field(default=1000)), ("complete_infinite", int, field(default=1000))],
)


@dataclass
class AugmentSection:
    views: int = 32
    method: str = "exact"
    bins: int = 128
    max_points: int = 1250
    inflation: float = 1.0
    radius: float | None = None


@dataclass
class EvalSection:
    views: int = 8
    normalize: bool = True
    interpolation_weights: list = field(default_factory=lambda: [1.0, 0.75, 0.5, 0.25, 0.0])


SECTIONS = {
    "shape": ShapeSection,
    "dataset": DatasetSection,
    "sensor": SensorSection,
    "arch": ArchSection,
    "loss": LossSection,
    "train": TrainSection,
    "augment": AugmentSection,
    "eval": EvalSection,
}

SHAPE_KEYS = {f.name for f in fields(ShapeSection)}


@dataclass
class RunConfig:
    shape: ShapeSection | None = None
    dataset: DatasetSection | None = None
    sensor: SensorSection = field(default_factory=SensorSection)
    arch: ArchSection = field(default_factory=ArchSection)
    loss: LossSection = field(default_factory=LossSection)
    train: object = field(default_factory=TrainSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    eval: EvalSection = field(default_factory=EvalSection)
    base_dir: Path = field(default_factory=Path.cwd)

    # ---------------------------------------------------------- instances
    def instances(self) -> list[tuple[str, dict]]:
        """``(id, shape dict)`` for every configured instance."""
        if self.shape is not None and self.dataset is not None:
            raise ConfigError("give either a shape or a dataset section, not both")
        if self.dataset is not None:
            out = []
            for i, inst in enumerate(self.dataset.instances):
                if not isinstance(inst, dict) or "shape" not in inst:
                    raise ConfigError(f"dataset.instances[{i}] needs a 'shape' mapping")
                extra = set(inst) - {"id", "shape"}
                if extra:
                    raise ConfigError(f"unknown key {sorted(extra)[0]!r} in dataset.instances[{i}]")
                out.append((str(inst.get("id", f"inst{i}")), self._shape_dict(inst["shape"])))
            if not out:
                raise ConfigError("dataset has no instances")
            if len({k for k, _ in out}) != len(out):
                raise ConfigError("duplicate instance ids")
            return out
        shape = self.shape or ShapeSection()
        d = {k: v for k, v in dataclasses.asdict(shape).items() if v is not None}
        ident = d.pop("id")
        return [(ident, self._shape_dict(d))]

    def _shape_dict(self, d: dict) -> dict:
        extra = set(d) - SHAPE_KEYS
        if extra:
            raise ConfigError(f"unknown shape key {sorted(extra)[0]!r}")
        d = dict(d)
        d.pop("id", None)
        if d.get("path"):
            p = Path(d["path"])
            p = p if p.is_absolute() else self.base_dir / p
            with open(p, encoding="utf-8") as fh:
                d = yaml.safe_load(fh)
        return d

    def shapes(self):
        return [(k, shape_from_dict(d)) for k, d in self.instances()]

    @property
    def dim(self) -> int:
        return self.shapes()[0][1].dim

    # ----------------------------------------------------------- builders
    def arch_spec(self, dim: int) -> ArchSpec:
        a = self.arch
        return ArchSpec(dim=dim, latent_dim=a.latent_dim, layers=a.layers, width=a.width,
                        skips=tuple(a.skips), beta=a.beta)

    def loss_config(self, multi: bool) -> LossConfig:
        d = dataclasses.asdict(self.loss)
        if d["beta"] is None:
            d["beta"] = 1.0 if multi else 0.5
        return LossConfig(**d)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        d = {f.name: getattr(self.train, f.name) for f in fields(TrainConfig)}
        if seed is not None:
            d["seed"] = seed
        return TrainConfig(**d)

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            sec = getattr(self, name)
            if sec is not None:
                out[name] = dataclasses.asdict(sec)
        return out


def _build(cls, data, section: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    names = {f.name for f in fields(cls)}
    extra = set(data) - names
    if extra:
        raise ConfigError(f"unknown key {section}.{sorted(extra)[0]}")
    return cls(**data)


def parse_config(data: dict | None, base_dir=None) -> RunConfig:
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    extra = set(data) - set(SECTIONS)
    if extra:
        raise ConfigError(f"unknown section {sorted(extra)[0]!r}")
    kw = {}
    for name, cls in SECTIONS.items():
        if name in data or name not in ("shape", "dataset"):
            kw[name] = _build(cls, data.get(name), name)
    cfg = RunConfig(**kw, base_dir=Path(base_dir) if base_dir else Path.cwd())
    try:
        cfg.arch_spec(2)
        cfg.loss_config(False)
        cfg.train_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    return parse_config(data, path.resolve().parent)


def describe_defaults() -> str:
    """Every configurable key with its default, one per line."""
    lines = []
    for name, cls in SECTIONS.items():
        lines.append(f"{name}:")
        for f in fields(cls):
            if f.default is not dataclasses.MISSING:
                default = f.default
            else:
                default = f.default_factory()
            lines.append(f"  {name}.{f.name} = {default!r}")
    return "\n".join(lines)
