"""Streaming keystep clips and the episode machinery around them.

A clip is a sequence of precomputed per-frame feature vectors with a binary
label (0 = mistake, 1 = correct). Episodes stream one frame per decision and
end either when an exit action is taken or when the clip runs out.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    EpisodeError,
    FrameCountError,
    TruncatedFileError,
    ArtifactError,
)

MISTAKE, CORRECT = 0, 1
SPLITS = ("train", "val", "test")
CLIP_MAGIC = b"EXC1"


class Action(enum.IntEnum):
    CONTINUE = 0
    EXIT_MISTAKE = 1
    EXIT_CORRECT = 2

    @property
    def is_exit(self) -> bool:
        return self is not Action.CONTINUE


def extract_correctness(action: Action) -> int:
    """Label implied by an exit action: ExitMistake -> 0, ExitCorrect -> 1."""
    action = Action(action)
    if action is Action.EXIT_MISTAKE:
        return MISTAKE
    if action is Action.EXIT_CORRECT:
        return CORRECT
    raise EpisodeError("Continue carries no correctness prediction")


def exit_action_for(label: int) -> Action:
    return Action.EXIT_MISTAKE if int(label) == MISTAKE else Action.EXIT_CORRECT


def time_to_frame_index(t: float, fps: float) -> int:
    if t < 0:
        raise ValueError(f"time must be non-negative, got {t}")
    if fps <= 0:
        raise ValueError(f"fps must be positive, got {fps}")
    return int(math.floor(t * fps))


@dataclass
class ClipRecord:
    id: str
    features: np.ndarray  # (frames, F) float32
    duration: float  # seconds
    fps: float
    label: int
    split: str = "train"
    onset: int | None = None  # first label-bearing frame, synthetic data only

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ConfigError(f"clip {self.id}: features must be (frames>=1, F), got {self.features.shape}")
        if self.label not in (MISTAKE, CORRECT):
            raise ConfigError(f"clip {self.id}: label must be 0 or 1, got {self.label}")
        if self.split not in SPLITS:
            raise ConfigError(f"clip {self.id}: unknown split {self.split!r}")
        if not np.isfinite(self.features).all():
            raise ConfigError(f"clip {self.id}: non-finite features")
        expected = time_to_frame_index(self.duration, self.fps)
        if expected != self.n_frames:
            raise FrameCountError(
                f"clip {self.id}: {self.n_frames} frames but floor(T*f) = {expected} (T={self.duration}, f={self.fps})"
            )

    @property
    def n_frames(self) -> int:
        return int(self.features.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])


def frame_at(clip: ClipRecord, t: int) -> np.ndarray:
    """Feature at frame ``t``; ``t == n_frames`` is clamped to the last frame."""
    return clip.features[min(t, clip.n_frames - 1)]


def window(clip: ClipRecord, t: int, K: int) -> np.ndarray:
    """The K most recent frames ending at ``t``, left-padded with frame 0."""
    if not 0 <= t < clip.n_frames:
        raise IndexError(f"frame {t} outside clip {clip.id} of {clip.n_frames} frames")
    idx = np.clip(np.arange(t - K + 1, t + 1), 0, None)
    return clip.features[idx]


def all_windows(clip: ClipRecord, K: int) -> np.ndarray:
    """Windows for every frame of the clip, shape (frames, K, F)."""
    t = np.arange(clip.n_frames)[:, None]
    idx = np.clip(t + np.arange(-K + 1, 1)[None, :], 0, None)
    return clip.features[idx]


def future_truth(clip: ClipRecord, t: int, L: int) -> np.ndarray:
    """Frames t+1 .. t+L, padded by repeating the final frame."""
    idx = np.clip(np.arange(t + 1, t + 1 + L), None, clip.n_frames - 1)
    return clip.features[idx].reshape(L, clip.feature_dim)


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------

@dataclass
class EpisodeState:
    clip: ClipRecord
    t: int = 0
    hidden: object = None
    exit_point: int | None = None
    exit_action: Action | None = None
    done: bool = False

    @property
    def natural_end(self) -> bool:
        return self.done and self.exit_action is None


def reset(clip: ClipRecord, hidden=None) -> EpisodeState:
    return EpisodeState(clip=clip, hidden=hidden)


def step(state: EpisodeState, action: Action) -> EpisodeState:
    """Apply one action and return the successor state (the input is not mutated)."""
    if state.done:
        raise EpisodeError(f"episode on clip {state.clip.id} already finished")
    action = Action(action)
    if action.is_exit:
        return replace(state, exit_point=state.t, exit_action=action, done=True)
    if state.t + 1 >= state.clip.n_frames:
        n = state.clip.n_frames
        return replace(state, t=n, exit_point=n, exit_action=None, done=True)
    return replace(state, t=state.t + 1)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    feature_dim: int = 16
    t_min: float = 10.0
    t_max: float = 20.0
    fps: float = 2.0
    mistake_rate: float = 0.5
    onset_lo: float = 0.2
    onset_hi: float = 0.5
    separation: float = 4.0
    noise: float = 0.3
    drift: float = 1.0
    base_step: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.feature_dim <= 0:
            raise ConfigError("feature_dim must be positive")
        if not 0 < self.t_min <= self.t_max:
            raise ConfigError(f"need 0 < t_min <= t_max, got {self.t_min}, {self.t_max}")
        if self.fps <= 0 or time_to_frame_index(self.t_min, self.fps) < 1:
            raise ConfigError("every clip must contain at least one frame")
        if not 0.0 <= self.mistake_rate <= 1.0:
            raise ConfigError(f"mistake_rate must be in [0, 1], got {self.mistake_rate}")
        if not 0.0 < self.onset_lo <= self.onset_hi < 1.0:
            raise ConfigError(f"need 0 < onset_lo <= onset_hi < 1, got {self.onset_lo}, {self.onset_hi}")
        if self.noise < 0 or self.drift <= 0 or self.separation < 0 or self.base_step < 0:
            raise ConfigError("noise, separation and base_step must be >= 0 and drift > 0")


def prototypes(cfg: SynthConfig) -> np.ndarray:
    """Class prototypes (row 0 = mistake, row 1 = correct), ``separation`` apart."""
    rng = np.random.default_rng([cfg.seed, 0xC1A55])
    direction = rng.standard_normal(cfg.feature_dim)
    direction /= np.linalg.norm(direction)
    half = 0.5 * cfg.separation * direction
    return np.stack([half, -half]).astype(np.float64)


def generate_dataset(cfg: SynthConfig, n_clips: int, split: str = "train", start_index: int = 0) -> list[ClipRecord]:
    """Synthesise clips whose label only becomes visible from the onset frame on.

    Before the onset every clip follows the same mean-reverting random walk,
    so the label is not recoverable from those frames. From the onset the
    features are pulled toward the label's prototype at rate ``drift``.
    Clip ``i`` uses its own seeded stream, so a dataset is a pure function of
    (cfg, n_clips, start_index).
    """
    if n_clips < 1:
        raise ConfigError("n_clips must be >= 1")
    protos = prototypes(cfg)
    phi = math.exp(-cfg.base_step)
    innov = math.sqrt(1.0 - phi * phi)
    clips = []
    for i in range(start_index, start_index + n_clips):
        rng = np.random.default_rng([cfg.seed, 0xDA7A, i])
        label = CORRECT if rng.random() >= cfg.mistake_rate else MISTAKE
        duration = float(rng.uniform(cfg.t_min, cfg.t_max))
        n = time_to_frame_index(duration, cfg.fps)
        onset_time = rng.uniform(cfg.onset_lo * duration, cfg.onset_hi * duration)
        onset = min(time_to_frame_index(onset_time, cfg.fps), n - 1)
        base = np.empty((n, cfg.feature_dim))
        base[0] = rng.standard_normal(cfg.feature_dim)
        shocks = rng.standard_normal((n, cfg.feature_dim))
        for t in range(1, n):
            base[t] = phi * base[t - 1] + innov * shocks[t]
        since = np.arange(n) - onset + 1
        pull = np.where(since > 0, 1.0 - np.exp(-cfg.drift * np.maximum(since, 0)), 0.0)[:, None]
        feats = (1.0 - pull) * base + pull * protos[label]
        if cfg.noise > 0:
            feats = feats + cfg.noise * rng.standard_normal(feats.shape)
        clips.append(
            ClipRecord(
                id=f"clip{i:05d}",
                features=feats.astype(np.float32),
                duration=duration,
                fps=cfg.fps,
                label=label,
                split=split,
                onset=onset,
            )
        )
    return clips


def generate_splits(cfg: SynthConfig, sizes: dict[str, int]) -> list[ClipRecord]:
    out, start = [], 0
    for split in SPLITS:
        n = sizes.get(split, 0)
        if n:
            out.extend(generate_dataset(cfg, n, split=split, start_index=start))
            start += n
    return out


def degenerate_dataset(n_clips: int, feature_dim: int = 4, seed: int = 0, split: str = "train") -> list[ClipRecord]:
    """Two-frame clips whose label is fully visible from frame 0.

    With the default reward weights and T = 1 s, exiting at t=0 with the
    right label is the unique best behaviour.
    """
    rng = np.random.default_rng([seed, 0xDE6])
    protos = np.stack([np.full(feature_dim, 1.0), np.full(feature_dim, -1.0)])
    clips = []
    for i in range(n_clips):
        label = int(rng.integers(0, 2))
        feats = protos[label] + 0.05 * rng.standard_normal((2, feature_dim))
        clips.append(ClipRecord(f"deg{i:05d}", feats.astype(np.float32), 1.0, 2.0, label, split, onset=0))
    return clips


def split_clips(clips: Iterable[ClipRecord], split: str) -> list[ClipRecord]:
    return [c for c in clips if c.split == split]


# ---------------------------------------------------------------------------
# Feature files
# ---------------------------------------------------------------------------

def write_clip_file(path, clip: ClipRecord, raw_label: int | None = None) -> None:
    """Serialise one clip: magic, u32 id length, id, u8 label, f32 fps,
    u32 frame count, u32 feature dim, then frames x dim float32 (LE)."""
    raw = clip.id.encode("utf-8")
    label = clip.label if raw_label is None else raw_label
    header = CLIP_MAGIC + struct.pack("<I", len(raw)) + raw
    header += struct.pack("<BfII", label, clip.fps, clip.n_frames, clip.feature_dim)
    payload = np.ascontiguousarray(clip.features, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_clip_file(path, split: str = "train", duration: float | None = None, onset: int | None = None) -> ClipRecord:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError as exc:
        raise ArtifactError(f"clip file not found: {path}") from exc
    if data[:4] != CLIP_MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}, expected {CLIP_MAGIC!r}")
    if len(data) < 8:
        raise TruncatedFileError(f"{path}: truncated header")
    (id_len,) = struct.unpack_from("<I", data, 4)
    head_end = 8 + id_len + struct.calcsize("<BfII")
    if len(data) < head_end:
        raise TruncatedFileError(f"{path}: truncated header")
    clip_id = data[8 : 8 + id_len].decode("utf-8")
    label, fps, n, dim = struct.unpack_from("<BfII", data, 8 + id_len)
    need = n * dim * 4
    if len(data) - head_end < need:
        raise TruncatedFileError(
            f"clip {clip_id}: payload truncated ({len(data) - head_end} of {need} bytes) in {path}"
        )
    if len(data) - head_end > need:
        raise FrameCountError(f"clip {clip_id}: payload longer than the declared {n} frames in {path}")
    feats = np.frombuffer(data, dtype="<f4", count=n * dim, offset=head_end).reshape(n, dim).astype(np.float32)
    # "correction" (label 2) counts as a mistake
    mapped = MISTAKE if label in (0, 2) else CORRECT if label == 1 else None
    if mapped is None:
        raise FrameCountError(f"clip {clip_id}: unknown label code {label}")
    fps = float(fps)
    if duration is None:
        duration = n / fps
        while time_to_frame_index(duration, fps) < n:
            duration = float(np.nextafter(duration, np.inf))
    if time_to_frame_index(duration, fps) != n:
        raise FrameCountError(f"clip {clip_id}: {n} frames inconsistent with duration {duration}s at {fps} fps")
    return ClipRecord(clip_id, feats, float(duration), fps, mapped, split, onset=onset)


def save_dataset(clips: Sequence[ClipRecord], out_dir, manifest_name: str = "manifest.json") -> Path:
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    entries = []
    for clip in clips:
        rel = f"clips/{clip.id}.exc"
        write_clip_file(out / rel, clip)
        entry = {"path": rel, "split": clip.split, "duration": clip.duration}
        if clip.onset is not None:
            entry["onset"] = int(clip.onset)
        entries.append(entry)
    manifest = {
        "clips": entries,
        "feature_dim": clips[0].feature_dim if clips else 0,
        "fps": clips[0].fps if clips else 0.0,
    }
    path = out / manifest_name
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_feature_files(manifest_path) -> list[ClipRecord]:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError as exc:
        raise ArtifactError(f"manifest not found: {manifest_path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{manifest_path}: invalid JSON ({exc})") from exc
    for key in ("clips", "feature_dim", "fps"):
        if key not in manifest:
            raise ConfigError(f"{manifest_path}: manifest lacks {key!r}")
    root = manifest_path.parent
    clips = []
    for entry in manifest["clips"]:
        split = entry.get("split", "train")
        if split not in SPLITS:
            raise ConfigError(f"{manifest_path}: unknown split {split!r}")
        clip = read_clip_file(root / entry["path"], split, entry.get("duration"), entry.get("onset"))
        if clip.feature_dim != manifest["feature_dim"]:
            raise FrameCountError(f"clip {clip.id}: feature dim {clip.feature_dim} != manifest {manifest['feature_dim']}")
        clips.append(clip)
    return clips
