"""Run configuration: nested dataclass configs loaded from JSON, plus a
splitmix64 stream that derives every module seed from one global seed."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .instances import InjectorParams
from .lift import ContrastiveConfig
from .merge import MergeConfig
from .raster import RasterOptions
from .refine import RefineConfig
from .scene import SceneSpec
from .tracing import TraceOptions

OUTPUT_ENV = "SPLATTRACE_OUTPUT_DIR"
MASK64 = (1 << 64) - 1
# order fixes which splitmix64 draw each module receives
SEED_STREAMS = ("scene", "injector", "refine", "contrastive", "prompt")


class ConfigError(ValueError):
    pass


def splitmix64(state):
    """One step: returns (next state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def derive_seeds(seed: int) -> dict:
    state = seed & MASK64
    out = {}
    for name in SEED_STREAMS:
        state, z = splitmix64(state)
        out[name] = z >> 32  # 32 bits keeps seeds readable in reports
    return out


@dataclass(frozen=True)
class EvalConfig:
    reference_view: int = 0
    objects: tuple | None = None
    corrupted_fraction: float = 0.25
    max_queries: int = 8
    coverage_min: float = 0.5
    n_prompts: int = 3


@dataclass(frozen=True)
class RunConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    scene_file: str | None = None
    injector: InjectorParams = field(default_factory=InjectorParams)
    raster: RasterOptions = field(default_factory=RasterOptions)
    trace: TraceOptions = field(default_factory=TraceOptions)
    merge: MergeConfig = field(default_factory=MergeConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/default"
    seed: int = 0

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with ``seed`` set and every module seed re-derived from it."""
        s = derive_seeds(seed)
        return dataclasses.replace(
            self,
            seed=seed,
            scene=dataclasses.replace(self.scene, seed=s["scene"]),
            injector=dataclasses.replace(self.injector, seed=s["injector"]),
            refine=dataclasses.replace(self.refine, seed=s["refine"]),
            contrastive=dataclasses.replace(self.contrastive, seed=s["contrastive"]),
        )

    def prompt_seed(self):
        return derive_seeds(self.seed)["prompt"]

    def resolved_output(self):
        return os.environ.get(OUTPUT_ENV) or self.output_dir

    def validate(self):
        self.scene.validate()
        self.injector.validate(self.scene.n_views)
        self.refine.validate()
        self.contrastive.validate()
        if self.contrastive.feature_dim != self.scene.feature_dim:
            raise ConfigError("contrastive.feature_dim must equal scene.feature_dim")
        if not 0 <= self.eval.corrupted_fraction <= 1:
            raise ConfigError("eval.corrupted_fraction must lie in [0, 1]")
        return self

    def to_dict(self):
        return _plain(dataclasses.asdict(self))


_NESTED = {
    "scene": SceneSpec,
    "injector": InjectorParams,
    "raster": RasterOptions,
    "trace": TraceOptions,
    "merge": MergeConfig,
    "refine": RefineConfig,
    "contrastive": ContrastiveConfig,
    "eval": EvalConfig,
}


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, d, path):
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def config_from_dict(d: dict, seed: int | None = None) -> RunConfig:
    """Build and validate a RunConfig.  The global seed (``seed`` argument, else
    the config's own) always re-derives the module seeds."""
    d = dict(d)
    unknown = sorted(set(d) - {f.name for f in dataclasses.fields(RunConfig)})
    if unknown:
        raise ConfigError(f"config: unknown keys {unknown}")
    kw = {}
    for key, value in d.items():
        kw[key] = _build(_NESTED[key], value, key) if key in _NESTED else value
    cfg = RunConfig(**kw)
    cfg = cfg.with_seed(cfg.seed if seed is None else seed)
    try:
        return cfg.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from e


def load_config(path, seed: int | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
    return config_from_dict(d, seed)
