"""Run configuration: presets, strict JSON loading, seed derivation and hashing."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import BaselineSpec
from .detector import DetectorConfig, DetectorTrainConfig
from .env import SynthConfig
from .errors import ConfigError
from .numerics import OptimizerConfig
from .policy import PolicyConfig
from .training import REWARD_KINDS, PPOConfig, RewardWeights

PRESETS = ("desk", "paper")
BENCHMARKS = ("standard", "noiseless", "degenerate")


@dataclass
class RunConfig:
    preset: str = "desk"
    benchmark: str = "standard"
    seed: int = 0
    out_dir: str = "runs"
    data: SynthConfig = field(default_factory=SynthConfig)
    splits: dict = field(default_factory=lambda: {"train": 3000, "val": 100, "test": 300})
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    detector_train: DetectorTrainConfig = field(default_factory=DetectorTrainConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    rewards: RewardWeights = field(default_factory=RewardWeights)
    reward_kind: str = "mistexit"
    baselines: list = field(default_factory=list)

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        if self.benchmark not in BENCHMARKS:
            raise ConfigError(f"benchmark must be one of {BENCHMARKS}, got {self.benchmark!r}")
        if self.reward_kind not in REWARD_KINDS:
            raise ConfigError(f"reward_kind must be one of {REWARD_KINDS}, got {self.reward_kind!r}")
        if set(self.splits) - {"train", "val", "test"} or any(int(v) < 0 for v in self.splits.values()):
            raise ConfigError(f"splits must map train/val/test to non-negative sizes, got {self.splits}")
        if self.detector.feature_dim != self.data.feature_dim or self.policy.feature_dim != self.data.feature_dim:
            raise ConfigError(
                f"feature dims disagree: data {self.data.feature_dim}, detector {self.detector.feature_dim}, "
                f"policy {self.policy.feature_dim}"
            )
        self.baselines = [b if isinstance(b, BaselineSpec) else BaselineSpec(**b) for b in self.baselines]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @property
    def hash(self) -> str:
        return config_hash(self)

    def component_seed(self, component: str) -> int:
        return derive_seed(self.seed, component)


def derive_seed(root: int, component: str) -> int:
    """Independent 32-bit seed for ``component`` under the root seed."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(component.encode())])
    return int(ss.generate_state(1)[0])


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

def _desk_defaults() -> dict:
    # desk settings were picked on validation clips of the standard benchmark
    return {
        "splits": {"train": 3000, "val": 100, "test": 300},
        "detector_train": {"steps": 1500, "batch_size": 128, "w1": 1.0, "w2": 0.1,
                           "optimizer": {"algorithm": "adamw", "lr": 1e-3, "weight_decay": 5e-2}},
        "policy": {"initial_continue": 0.92},
        "ppo": {"total_steps": 200_000, "lr": 1e-3, "entropy_weight": 0.01},
        "rewards": {"v1": 1.0, "v2": 1.0, "v3": 0.2},
    }


def _paper_defaults() -> dict:
    return {
        "data": {"feature_dim": 2048},
        "splits": {"train": 2624, "val": 200, "test": 1037},
        "detector": {"feature_dim": 2048, "proj_dim": 2048, "hidden_dim": 1024, "layers": 1},
        "detector_train": {"batch_size": 128, "w1": 1.0, "w2": 0.1,
                           "optimizer": {"algorithm": "adamw", "lr": 1e-6, "weight_decay": 5e-2}},
        "policy": {"feature_dim": 2048, "hidden": 512, "bidirectional": True},
        "ppo": {"total_steps": 42_000_000, "horizon": 40, "epochs": 4, "num_streams": 8, "lr": 1e-4,
                "action_weight": 1.0, "value_weight": 0.5, "entropy_weight": 0.2},
        "rewards": {"v1": 0.1, "v2": 1.0, "v3": 1.0},
    }


def _benchmark_defaults(name: str) -> dict:
    if name == "noiseless":
        return {"data": {"noise": 0.0, "drift": 10.0}, "splits": {"train": 1000, "val": 100, "test": 300}}
    if name == "degenerate":
        return {"data": {"feature_dim": 4}, "detector": {"feature_dim": 4}, "policy": {"feature_dim": 4},
                "splits": {"train": 200, "val": 50, "test": 200}, "detector_train": {"steps": 200}}
    return {}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "splits":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _build(cls, values: dict, where: str):
    """Instantiate a dataclass from a dict, rejecting keys it does not declare."""
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected an object, got {type(values).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = dict(values)
    if cls is DetectorTrainConfig and "optimizer" in kwargs:
        kwargs["optimizer"] = _build(OptimizerConfig, kwargs["optimizer"], f"{where}.optimizer")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_SECTIONS = {
    "data": SynthConfig,
    "detector": DetectorConfig,
    "detector_train": DetectorTrainConfig,
    "policy": PolicyConfig,
    "ppo": PPOConfig,
    "rewards": RewardWeights,
}


def config_from_dict(raw: dict) -> RunConfig:
    """Expand ``preset`` and ``benchmark`` defaults, then apply the explicit values."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"config: unknown key(s) {unknown}")
    preset = raw.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"preset must be one of {PRESETS}, got {preset!r}")
    benchmark = raw.get("benchmark", "standard")
    if benchmark not in BENCHMARKS:
        raise ConfigError(f"benchmark must be one of {BENCHMARKS}, got {benchmark!r}")
    base = _desk_defaults() if preset == "desk" else _paper_defaults()
    merged = _merge(_merge(base, _benchmark_defaults(benchmark)), raw)
    kwargs = {k: v for k, v in merged.items() if k not in _SECTIONS}
    for name, cls in _SECTIONS.items():
        if name in merged:
            kwargs[name] = _build(cls, merged[name], name)
    if "baselines" in kwargs:
        kwargs["baselines"] = [_build(BaselineSpec, b, f"baselines[{i}]") for i, b in enumerate(kwargs["baselines"])]
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw)
