"""Future-anticipating mistake detector.

The detector sees the K most recent frame features, appends L+1 blank tokens
(L anticipated future frames plus one classification token), adds sinusoidal
positions and one of three learned modality embeddings, and runs a small
transformer encoder. The blank tokens' outputs are decoded into anticipated
future features and a two-way (mistake, correct) logit pair.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from . import numerics as nx
from .env import ClipRecord, all_windows
from .errors import ArtifactError, ConfigError, DimensionError, DivergenceError

log = logging.getLogger(__name__)

OBSERVED, ANTICIPATED, CLASSIFY = 0, 1, 2


@dataclass
class DetectorConfig:
    window: int = 5
    anticipation: int = 20
    feature_dim: int = 16
    proj_dim: int = 64
    hidden_dim: int = 64
    layers: int = 1
    heads: int = 2
    dropout: float = 0.0

    def __post_init__(self):
        if self.window < 1 or self.anticipation < 0:
            raise ConfigError(f"need window >= 1 and anticipation >= 0, got {self.window}, {self.anticipation}")
        for name in ("feature_dim", "proj_dim", "hidden_dim", "layers", "heads"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"detector {name} must be positive")
        if self.proj_dim % self.heads:
            raise ConfigError(f"proj_dim {self.proj_dim} not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def seq_len(self) -> int:
        return self.window + self.anticipation + 1


@dataclass
class DetectorOutput:
    logits: torch.Tensor  # (..., 2)
    confidences: torch.Tensor  # (..., 2)
    anticipated: torch.Tensor  # (..., L, F)
    attention: torch.Tensor | None = None  # (..., K) scores over observed frames


class Detector(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cfg = cfg
        self.proj = nx.Dense(cfg.feature_dim, cfg.proj_dim)
        self.modality = nn.Parameter(0.02 * torch.randn(3, cfg.proj_dim))
        self.encoder = nn.ModuleList(
            nx.EncoderLayer(cfg.proj_dim, cfg.hidden_dim, cfg.heads, cfg.dropout) for _ in range(cfg.layers)
        )
        self.anticipation_head = nx.Dense(cfg.proj_dim, cfg.feature_dim)
        self.logit_head = nx.Dense(cfg.proj_dim, 2)
        kinds = [OBSERVED] * cfg.window + [ANTICIPATED] * cfg.anticipation + [CLASSIFY]
        self.register_buffer("kinds", torch.tensor(kinds), persistent=False)
        self.register_buffer("positions", nx.sinusoidal_positions(cfg.seq_len, cfg.proj_dim), persistent=False)

    def forward(self, windows: torch.Tensor, with_attention: bool = False) -> DetectorOutput:
        cfg = self.cfg
        if windows.dim() < 2 or windows.shape[-2] != cfg.window:
            raise DimensionError(f"detector expects {cfg.window} frames per window, got shape {tuple(windows.shape)}")
        if windows.shape[-1] != cfg.feature_dim:
            raise DimensionError(f"detector expects feature dim {cfg.feature_dim}, got {windows.shape[-1]}")
        lead = windows.shape[:-2]
        observed = self.proj(windows)
        blanks = observed.new_zeros(*lead, cfg.anticipation + 1, cfg.proj_dim)
        seq = torch.cat([observed, blanks], dim=-2)
        seq = seq + self.positions + self.modality[self.kinds]
        maps = []
        for layer in self.encoder:
            seq, attn = layer(seq)
            maps.append(attn)
        tail = seq[..., cfg.window :, :]
        anticipated = self.anticipation_head(tail[..., : cfg.anticipation, :])
        logits = self.logit_head(tail[..., -1, :])
        attention = None
        if with_attention:
            # classification-token row, averaged over heads and layers, restricted to observed frames
            mean_map = torch.stack(maps).mean(dim=0).mean(dim=-3)
            row = mean_map[..., -1, : cfg.window]
            attention = row / row.sum(dim=-1, keepdim=True)
        return DetectorOutput(logits, nx.softmax(logits), anticipated, attention)


def build_detector(cfg: DetectorConfig, seed: int = 0) -> Detector:
    torch.manual_seed(seed)
    return Detector(cfg)


def detector_forward(detector: Detector, window, with_attention: bool = False) -> DetectorOutput:
    """Inference on one window (K, F) or a batch (..., K, F)."""
    x = torch.as_tensor(np.asarray(window), dtype=torch.get_default_dtype())
    with torch.no_grad():
        return detector(x, with_attention=with_attention)


def detector_loss(output: DetectorOutput, future, label, w1: float = 1.0, w2: float = 0.1):
    """``w1 * CE + w2 * mean-L1(anticipated, future)``; returns (total, ce, l1)."""
    future = torch.as_tensor(future, dtype=output.anticipated.dtype)
    if future.shape != output.anticipated.shape:
        raise DimensionError(
            f"future truth shape {tuple(future.shape)} != anticipated {tuple(output.anticipated.shape)}"
        )
    ce = nx.cross_entropy(output.logits, label)
    l1 = nx.l1_mean(output.anticipated, future)
    return w1 * ce + w2 * l1, ce, l1


# ---------------------------------------------------------------------------
# Batched access to clip windows
# ---------------------------------------------------------------------------

class WindowBank:
    """All clips' frames in one array so windows and futures gather in one shot."""

    def __init__(self, clips: Sequence[ClipRecord]):
        if not clips:
            raise ConfigError("need at least one clip")
        self.clips = list(clips)
        self.frames = np.concatenate([c.features for c in clips]).astype(np.float32)
        lengths = np.array([c.n_frames for c in clips])
        self.offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        self.lengths = lengths
        self.labels = np.array([c.label for c in clips])

    def gather(self, clip_idx: np.ndarray, t: np.ndarray, K: int, L: int):
        off = self.offsets[clip_idx][:, None]
        last = (self.lengths[clip_idx] - 1)[:, None]
        t = t[:, None]
        w_idx = off + np.clip(t + np.arange(-K + 1, 1)[None, :], 0, None)
        f_idx = off + np.minimum(t + np.arange(1, L + 1)[None, :], last)
        return self.frames[w_idx], self.frames[f_idx], self.labels[clip_idx]


@dataclass
class DetectorStream:
    """Detector outputs for every frame of one clip (each computed from its own causal window)."""

    logits: np.ndarray  # (frames, 2)
    confidences: np.ndarray  # (frames, 2)


def detector_streams(detector: Detector, clips: Sequence[ClipRecord], chunk: int = 4096) -> dict[str, DetectorStream]:
    K = detector.cfg.window
    windows = np.concatenate([all_windows(c, K) for c in clips]) if clips else np.zeros((0, K, 1))
    logits = []
    with torch.no_grad():
        for i in range(0, len(windows), chunk):
            x = torch.as_tensor(windows[i : i + chunk], dtype=torch.get_default_dtype())
            logits.append(detector(x).logits.double().numpy())
    logits = np.concatenate(logits) if logits else np.zeros((0, 2))
    out, pos = {}, 0
    for c in clips:
        lg = logits[pos : pos + c.n_frames]
        pos += c.n_frames
        conf = np.exp(lg - lg.max(axis=1, keepdims=True))
        conf /= conf.sum(axis=1, keepdims=True)
        out[c.id] = DetectorStream(lg, conf)
    return out


# ---------------------------------------------------------------------------
# Pre-training
# ---------------------------------------------------------------------------

@dataclass
class DetectorTrainConfig:
    steps: int = 1500
    batch_size: int = 128
    w1: float = 1.0
    w2: float = 0.1
    optimizer: nx.OptimizerConfig = field(
        default_factory=lambda: nx.OptimizerConfig("adamw", lr=1e-3, weight_decay=5e-2)
    )
    log_every: int = 100

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = nx.OptimizerConfig(**self.optimizer)
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.w1 < 0 or self.w2 < 0:
            raise ConfigError("loss weights must be non-negative")


def pretrain_detector(
    clips: Sequence[ClipRecord],
    cfg: DetectorConfig,
    train_cfg: DetectorTrainConfig,
    seed: int = 0,
    probe: Sequence[ClipRecord] | None = None,
    detector: Detector | None = None,
):
    """Train on (random clip, random time) windows. Returns (detector, log records)."""
    train = [c for c in clips if c.split == "train"] or list(clips)
    if not train:
        raise ConfigError("detector pre-training needs a non-empty train split")
    if detector is None:
        detector = build_detector(cfg, seed)
    store = nx.ParameterStore(detector)
    opt = nx.Optimizer(store, train_cfg.optimizer)
    bank = WindowBank(train)
    rng = np.random.default_rng([seed, 0xDE7])
    history, running = [], None
    detector.train()
    for step in range(1, train_cfg.steps + 1):
        ci = rng.integers(0, len(train), size=train_cfg.batch_size)
        t = (rng.random(train_cfg.batch_size) * bank.lengths[ci]).astype(np.int64)
        win, fut, lab = bank.gather(ci, t, cfg.window, cfg.anticipation)
        out = detector(torch.from_numpy(win).to(torch.get_default_dtype()))
        loss, ce, l1 = detector_loss(out, torch.from_numpy(fut), lab, train_cfg.w1, train_cfg.w2)
        if not torch.isfinite(loss):
            raise DivergenceError(f"detector loss became {loss.item()} at step {step} (ce={ce.item()}, l1={l1.item()})")
        opt.zero_grad()
        loss.backward()
        opt.step()
        value = loss.item()
        running = value if running is None else 0.95 * running + 0.05 * value
        if step % train_cfg.log_every == 0 or step == train_cfg.steps:
            rec = {"step": step, "loss": value, "running_loss": running, "ce": ce.item(), "l1": l1.item()}
            if probe:
                rec["probe_ap"] = probe_ap(detector, probe)
            history.append(rec)
            log.debug("detector step %d loss %.4f", step, value)
    detector.eval()
    return detector, history


def final_frame_scores(detector: Detector, clips: Sequence[ClipRecord]) -> np.ndarray:
    """Mistake confidence after the whole clip has streamed (full observation)."""
    K = detector.cfg.window
    windows = np.stack([all_windows(c, K)[-1] for c in clips])
    out = detector_forward(detector, windows)
    return out.confidences[:, 0].double().numpy()


def probe_ap(detector: Detector, clips: Sequence[ClipRecord]) -> float:
    from .evaluation import average_precision

    was_training = detector.training
    detector.eval()
    scores = final_frame_scores(detector, clips)
    detector.train(was_training)
    return average_precision(scores, [c.label for c in clips], ids=[c.id for c in clips])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_detector(path, detector: Detector, meta: dict | None = None) -> None:
    nx.module_to_checkpoint(detector, path)
    sidecar = {"kind": "detector", "config": asdict(detector.cfg), "meta": meta or {}}
    sidecar_path(path).write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def load_detector(path) -> tuple[Detector, dict]:
    path = Path(path)
    side = sidecar_path(path)
    if not path.exists() or not side.exists():
        raise ArtifactError(f"detector checkpoint {path} (or its sidecar) is missing")
    info = json.loads(side.read_text())
    if info.get("kind") != "detector":
        raise ArtifactError(f"{path} is not a detector checkpoint")
    detector = Detector(DetectorConfig(**info["config"]))
    nx.checkpoint_to_module(detector, path)
    detector.eval()
    return detector, info.get("meta", {})


def post_onset_ap(detector: Detector, clips: Sequence[ClipRecord]) -> float:
    """AP over every (clip, frame) pair at or after the clip's evidence onset."""
    from .evaluation import average_precision

    missing = [c.id for c in clips if c.onset is None]
    if missing:
        raise ConfigError(f"clips without an onset cannot be scored after onset: {missing[:3]}")
    streams = detector_streams(detector, clips)
    scores, labels, ids = [], [], []
    for c in clips:
        conf = streams[c.id].confidences
        for t in range(c.onset, c.n_frames):
            scores.append(conf[t, 0])
            labels.append(c.label)
            ids.append(f"{c.id}:{t:06d}")
    return average_precision(scores, labels, ids=ids)
