"""Accuracy / earliness metrics and the streaming evaluation loop.

Positive class for AP is "mistake" (label 0), scored by the detector's
mistake confidence at the decision point. An exit action fixes the predicted
label, but the ranking score for AP stays the detector's confidence.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .detector import Detector, DetectorStream, detector_forward, detector_streams
from .env import MISTAKE, Action, ClipRecord, extract_correctness, reset, step, window
from .errors import ConfigError

SCORE_RULE = "score=detector mistake confidence at decision point; label=exit action (detector argmax at natural end)"


def average_precision(scores, labels, ids=None, positive: int = MISTAKE) -> float:
    """Mean of precision@rank over the ranks of the positives.

    Scores are sorted descending; ties are broken by ``ids`` (ascending),
    falling back to input order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    if ids is None:
        ids = list(range(len(scores)))
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], ids[i]))
    is_pos = labels[order] == positive
    n_pos = int(is_pos.sum())
    if n_pos == 0:
        raise ValueError("average precision is undefined without positives")
    total, hits = 0.0, 0
    # sequential accumulation in rank order keeps the result independent of array length
    for rank, pos in enumerate(is_pos, start=1):
        if pos:
            hits += 1
            total += hits / rank
    return total / n_pos


@dataclass
class EvalRecord:
    clip_id: str
    exit_frame: int
    n_frames: int
    observation_ratio: float
    score: float
    predicted: int
    label: int

    def __post_init__(self):
        if not 0.0 <= self.observation_ratio <= 1.0:
            raise ValueError(f"observation ratio out of range: {self.observation_ratio}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score out of range: {self.score}")


def observation_ratio(records: Sequence[EvalRecord]) -> float:
    if not records:
        raise ValueError("observation ratio of an empty record set")
    return float(np.mean([r.observation_ratio for r in records]))


@dataclass
class EvalSummary:
    model: str
    ap: float
    mean_or: float
    records: list
    seed: int = 0
    config_hash: str = ""
    meta: dict = field(default_factory=lambda: {"positive_class": "mistake", "score_rule": SCORE_RULE})

    def to_json(self) -> str:
        payload = asdict(self)
        return json.dumps(payload, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalSummary":
        d = json.loads(text)
        d["records"] = [EvalRecord(**r) for r in d["records"]]
        return cls(**d)

    @property
    def accuracy(self) -> float:
        return float(np.mean([r.predicted == r.label for r in self.records]))


def summarize(model: str, records: Sequence[EvalRecord], seed: int = 0, config_hash: str = "") -> EvalSummary:
    ap = average_precision([r.score for r in records], [r.label for r in records], ids=[r.clip_id for r in records])
    return EvalSummary(model, ap, observation_ratio(records), list(records), seed, config_hash)


def run_episode(agent, clip: ClipRecord, stream: DetectorStream, rng: np.random.Generator) -> EvalRecord:
    """Drive one episode with ``agent`` and turn its end point into an EvalRecord."""
    state = reset(clip)
    agent.begin(clip, stream, rng)
    while not state.done:
        state = step(state, agent.decide(state.t))
    conf = stream.confidences
    if state.exit_action is not None:
        e = state.exit_point
        score, predicted = conf[e, MISTAKE], extract_correctness(state.exit_action)
    else:
        e = clip.n_frames
        score, predicted = conf[-1, MISTAKE], int(np.argmax(conf[-1]))
    return EvalRecord(clip.id, int(e), clip.n_frames, e / clip.n_frames, float(np.clip(score, 0.0, 1.0)),
                      int(predicted), clip.label)


def evaluate_model(agent, detector: Detector, clips: Sequence[ClipRecord], seed: int = 0, name: str | None = None,
                   streams: dict | None = None, workers: int = 1, config_hash: str = "") -> EvalSummary:
    """Evaluate an exit agent on every clip. Episode ``i`` gets its own rng seeded by (seed, i)."""
    if not clips:
        raise ConfigError("no clips to evaluate")
    if detector is not None and clips[0].feature_dim != detector.cfg.feature_dim:
        raise ConfigError(f"dataset feature dim {clips[0].feature_dim} != detector {detector.cfg.feature_dim}")
    if streams is None:
        streams = detector_streams(detector, clips)

    def one(i: int) -> EvalRecord:
        rng = np.random.default_rng([seed, i])
        return run_episode(agent.fork() if workers > 1 else agent, clips[i], streams[clips[i].id], rng)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(one, range(len(clips))))
    else:
        records = [one(i) for i in range(len(clips))]
    return summarize(name or getattr(agent, "name", "model"), records, seed, config_hash)


def evaluate_policy(policy, detector: Detector, clips: Sequence[ClipRecord], streams=None, seed: int = 0,
                    greedy: bool = True) -> EvalSummary:
    from .baselines import PolicyAgent

    return evaluate_model(PolicyAgent(policy, greedy=greedy), detector, clips, seed=seed, streams=streams)


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------

FRONTIER_COLUMNS = ("model", "ap", "or", "seed")


def export_frontier(summaries: Sequence[EvalSummary], path) -> None:
    rows = []
    for s in summaries:
        if not (math.isfinite(s.ap) and math.isfinite(s.mean_or)):
            raise ValueError(f"summary {s.model!r} has non-finite metrics")
        rows.append((s.model, repr(float(s.ap)), repr(float(s.mean_or)), str(s.seed)))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FRONTIER_COLUMNS)
        w.writerows(rows)


def load_frontier(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != FRONTIER_COLUMNS:
            raise ValueError(f"{path}: unexpected frontier columns {reader.fieldnames}")
        return [{"model": r["model"], "ap": float(r["ap"]), "or": float(r["or"]), "seed": int(r["seed"])} for r in reader]


def export_attention(detector: Detector, clip: ClipRecord, t: int, path=None) -> np.ndarray:
    """Attention the classification token pays to each observed frame at time ``t``."""
    out = detector_forward(detector, window(clip, t, detector.cfg.window), with_attention=True)
    scores = out.attention.double().numpy()
    if path is not None:
        frames = np.clip(np.arange(t - detector.cfg.window + 1, t + 1), 0, None)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("frame_index", "score"))
            for f, s in zip(frames, scores):
                w.writerow((int(f), repr(float(s))))
    return scores
