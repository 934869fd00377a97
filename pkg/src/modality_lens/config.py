"""Run configuration: one canonical JSON document covering every ablation axis."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alignment import AlignmentState, TrainConfig
from .backbone import VARIANTS, EncoderPipeline, ViTConfig
from .checkpoint import canonical_json
from .errors import ConfigError
from .lens import PerceiverConfig, PointEmbedConfig
from .pointcloud import DEFAULT_CATEGORIES, Category, PatchConfig, SyntheticSpec
from .zeroshot import DEFAULT_TEMPLATES


@dataclass(frozen=True)
class PipelineConfig:
    variant: str = "full"
    unlock: str = "none"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


@dataclass(frozen=True)
class TeacherConfig:
    seed: int = 0
    n_features: int = 256
    hidden: int = 64


@dataclass(frozen=True)
class SynthConfig:
    categories: tuple[Category, ...] = DEFAULT_CATEGORIES
    points_per_cloud: int = 512
    noise_sigma: float = 0.01
    train_per_category: int = 64
    heldout_per_category: int = 32
    size_jitter: float = 0.15

    def spec(self, seed: int, split: str) -> SyntheticSpec:
        n = self.train_per_category if split == "train" else self.heldout_per_category
        # held-out clouds come from a disjoint seed stream
        return SyntheticSpec(
            categories=self.categories,
            points_per_cloud=self.points_per_cloud,
            noise_sigma=self.noise_sigma,
            clouds_per_category=n,
            seed=seed * 2 + (0 if split == "train" else 1),
            size_jitter=self.size_jitter,
        )


@dataclass(frozen=True)
class EvalConfig:
    templates: tuple[str, ...] = DEFAULT_TEMPLATES
    ks: tuple[int, ...] = (1, 3, 5)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    patch: PatchConfig = field(default_factory=PatchConfig)
    embed: PointEmbedConfig = field(default_factory=PointEmbedConfig)
    perceiver: PerceiverConfig = field(default_factory=PerceiverConfig)
    vit: ViTConfig = field(default_factory=ViTConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    # serialisation
    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _from_dict(cls, data, "")

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(data)

    def with_overrides(self, items: list[str]) -> "RunConfig":
        data = self.to_dict()
        for item in items:
            if "=" not in item:
                raise ConfigError(f"override must look like key=value, got {item!r}")
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = data
            parts = key.strip().split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return RunConfig.from_dict(data)

    # builders
    def build_pipeline(self) -> EncoderPipeline:
        return EncoderPipeline(
            self.patch, self.embed, self.perceiver, self.vit,
            variant=self.pipeline.variant, unlock=self.pipeline.unlock, seed=self.seed,
        )

    def build_state(self, pipe: EncoderPipeline) -> AlignmentState:
        return AlignmentState(
            pipe, self.train, seed=self.seed, teacher_seed=self.teacher.seed,
            teacher_features=self.teacher.n_features, teacher_hidden=self.teacher.hidden,
        )

    def category_names(self) -> list[str]:
        return [c.name for c in self.synth.categories]


def _from_dict(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(path + k for k in unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(getattr(defaults, name), value, path + name)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config section {path or '<root>'}: {exc}") from None


def _coerce(default, value, path: str):
    if dataclasses.is_dataclass(default):
        return _from_dict(type(default), value, path + ".")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{path} must be a list, got {value!r}")
        if path.endswith("categories"):
            out = []
            for i, item in enumerate(value):
                if not isinstance(item, dict) or set(item) - {"name", "generator", "size"}:
                    raise ConfigError(f"{path}[{i}] must be {{name, generator, size}}")
                out.append(Category(str(item["name"]), str(item["generator"]), dict(item.get("size", {}))))
            return tuple(out)
        return tuple(value)
    return value


def pipeline_from_checkpoint(config: dict, tensors: dict):
    """Rebuild (RunConfig, pipeline, state) and copy stored tensors over the seeded ones."""
    cfg = RunConfig.from_dict(config)
    pipe = cfg.build_pipeline()
    state = cfg.build_state(pipe)
    restore(pipe, state, tensors)
    return cfg, pipe, state


def snapshot(pipe: EncoderPipeline, state: AlignmentState | None = None) -> dict:
    out = dict((k, t.data) for k, t in pipe.all_params().items())
    if state is not None:
        out.update(state.tensors())
    return out


def restore(pipe: EncoderPipeline, state: AlignmentState | None, tensors: dict) -> None:
    targets = {k: t.data for k, t in pipe.all_params().items()}
    if state is not None:
        targets.update(state.tensors())
    for name, arr in tensors.items():
        if name not in targets:
            raise ConfigError(f"checkpoint tensor {name!r} has no counterpart in this configuration")
        dst = targets[name]
        if dst.shape != np.shape(arr):
            raise ConfigError(f"checkpoint tensor {name!r} has shape {np.shape(arr)}, expected {dst.shape}")
        dst[...] = arr
