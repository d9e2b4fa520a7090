"""Comparison exit rules, all driven by the same detector stream as the RL policy.

Every agent implements ``begin(clip, stream, rng)`` once per episode and
``decide(t)`` once per frame. Rules without an exit-type decision of their
own exit with the detector's current argmax label.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from . import numerics as nx
from .detector import Detector, DetectorStream
from .env import Action, ClipRecord, exit_action_for
from .errors import ConfigError
from .policy import ExitPolicy, PolicyConfig, act

log = logging.getLogger(__name__)

KINDS = ("random", "adafocus_v2", "adafocus_v2pp", "adafocus_v3", "adafocus_v3pp",
         "frameexit", "fastforward", "adaframe")


@dataclass
class BaselineSpec:
    kind: str
    threshold: float | None = None  # confidence (v2) or entropy (v3) threshold
    window: int | None = None  # P, predictions averaged by the "++" variants
    delta: float = 0.7  # AdaFrame value drop
    drops: int = 2  # AdaFrame drop count
    penalty: float = 1e-2  # FastForward per-frame cost
    tau0: float | None = None  # FrameExit schedule endpoints
    tau1: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown baseline kind {self.kind!r}")
        if self.threshold is None:
            self.threshold = {"adafocus_v2": 0.75, "adafocus_v2pp": 0.75, "adafocus_v3": 0.1,
                              "adafocus_v3pp": 0.1}.get(self.kind)
        if self.window is None:
            self.window = {"adafocus_v2pp": 5, "adafocus_v3pp": 3}.get(self.kind, 1)
        if self.kind.startswith("adafocus_v2") and not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"confidence threshold must lie in (0, 1), got {self.threshold}")
        if self.kind.startswith("adafocus_v3") and self.threshold < 0:
            raise ConfigError(f"entropy threshold must be >= 0, got {self.threshold}")
        if self.window < 1 or self.drops < 1 or self.delta < 0 or self.penalty < 0:
            raise ConfigError("baseline window and drop count must be >= 1; delta and penalty >= 0")
        if (self.tau0 is None) != (self.tau1 is None):
            raise ConfigError("FrameExit needs both tau0 and tau1 (or neither, for validation selection)")
        if self.tau0 is not None and not self.tau0 < self.tau1:
            raise ConfigError("FrameExit schedule needs tau0 < tau1")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Pure decision rules
# ---------------------------------------------------------------------------

def random_policy(rng: np.random.Generator) -> Action:
    return Action(int(rng.integers(0, 3)))


def _argmax_exit(conf) -> Action:
    return exit_action_for(int(np.argmax(conf)))


def confidence_threshold_policy(history: Sequence, tau: float, P: int = 1) -> Action:
    """Exit (with the current argmax label) once the mean max-class confidence over
    the last ``P`` predictions exceeds ``tau``."""
    if not len(history):
        raise ValueError("need at least one detector output")
    recent = np.asarray(history[-P:], dtype=np.float64)
    c = recent.max(axis=1).mean()
    return _argmax_exit(history[-1]) if c > tau else Action.CONTINUE


def entropy(conf) -> float:
    p = np.asarray(conf, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def entropy_threshold_policy(history: Sequence, tau: float, P: int = 1) -> Action:
    if not len(history):
        raise ValueError("need at least one detector output")
    h = np.mean([entropy(c) for c in history[-P:]])
    return _argmax_exit(history[-1]) if h < tau else Action.CONTINUE


def adaframe_policy(values: Sequence[float], delta: float = 0.7, count: int = 2) -> bool:
    """True once the value estimate has fallen at least ``delta`` below the
    running maximum of earlier estimates ``count`` times."""
    drops, best = 0, -math.inf
    for v in values:
        if v <= best - delta:
            drops += 1
            if drops >= count:
                return True
        best = max(best, v)
    return False


# ---------------------------------------------------------------------------
# Agents
# ---------------------------------------------------------------------------

class Agent:
    name = "agent"

    def begin(self, clip: ClipRecord, stream: DetectorStream, rng: np.random.Generator) -> None:
        self.clip, self.stream, self.rng = clip, stream, rng

    def decide(self, t: int) -> Action:
        raise NotImplementedError

    def fork(self) -> "Agent":
        return copy.copy(self)


class NeverExit(Agent):
    name = "full_observation"

    def decide(self, t):
        return Action.CONTINUE


class ExitAt(Agent):
    """Exit at a fixed frame with the detector's argmax label (test helper and lower bound)."""

    def __init__(self, frame: int = 0):
        self.frame = frame
        self.name = f"exit_at_{frame}"

    def decide(self, t):
        if t >= self.frame:
            return _argmax_exit(self.stream.confidences[t])
        return Action.CONTINUE


class RandomAgent(Agent):
    name = "random"

    def decide(self, t):
        return random_policy(self.rng)


class ConfidenceAgent(Agent):
    def __init__(self, tau: float, P: int = 1, name: str = "adafocus_v2"):
        self.tau, self.P, self.name = tau, P, name

    def decide(self, t):
        return confidence_threshold_policy(self.stream.confidences[: t + 1], self.tau, self.P)


class EntropyAgent(Agent):
    def __init__(self, tau: float, P: int = 1, name: str = "adafocus_v3"):
        self.tau, self.P, self.name = tau, P, name

    def decide(self, t):
        return entropy_threshold_policy(self.stream.confidences[: t + 1], self.tau, self.P)


class PolicyAgent(Agent):
    """Runs an ExitPolicy; greedy (argmax) by default."""

    def __init__(self, policy: ExitPolicy, greedy: bool = True, name: str = "mistexit"):
        self.policy, self.greedy, self.name = policy, greedy, name

    def begin(self, clip, stream, rng):
        super().begin(clip, stream, rng)
        self.h = self.policy.initial_hidden()

    def decide(self, t):
        out = act(self.policy, self.clip.features[t], self.stream.confidences[t], self.h, self.rng, self.greedy)
        self.h = out.hidden
        return out.action


class AdaFrameAgent(PolicyAgent):
    """Uses only the critic of an actor-critic net: stop after repeated value drops."""

    def __init__(self, policy: ExitPolicy, delta: float = 0.7, count: int = 2, name: str = "adaframe"):
        super().__init__(policy, True, name)
        self.delta, self.count = delta, count

    def begin(self, clip, stream, rng):
        super().begin(clip, stream, rng)
        self.values = []

    def decide(self, t):
        out = act(self.policy, self.clip.features[t], self.stream.confidences[t], self.h, None, True)
        self.h = out.hidden
        self.values.append(out.value)
        if adaframe_policy(self.values, self.delta, self.count):
            return _argmax_exit(self.stream.confidences[t])
        return Action.CONTINUE


# ---------------------------------------------------------------------------
# FrameExit
# ---------------------------------------------------------------------------

def frame_losses(clip: ClipRecord, stream: DetectorStream) -> np.ndarray:
    return -np.log(np.clip(stream.confidences[:, clip.label], 1e-12, 1.0))


def threshold_schedule(t, n_frames: int, tau0: float, tau1: float):
    return tau0 + (tau1 - tau0) * np.asarray(t, dtype=np.float64) / n_frames


def frameexit_pseudolabels(clips: Sequence[ClipRecord], streams: dict, tau0: float, tau1: float) -> dict:
    """Per clip, a 0/1 array marking frames where the detector's loss is below the
    time-dependent threshold (low early, high late)."""
    if not tau0 < tau1:
        raise ConfigError("FrameExit schedule needs tau0 < tau1")
    out = {}
    for c in clips:
        loss = frame_losses(c, streams[c.id])
        out[c.id] = (loss < threshold_schedule(np.arange(c.n_frames), c.n_frames, tau0, tau1)).astype(np.int64)
    return out


class FrameExitClassifier(nn.Module):
    """Same encoder stack as the exit policy, followed by a single exit logit."""

    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.cfg = cfg
        self.visual = nx.MLP([cfg.feature_dim, *cfg.visual_widths], init="kaiming")
        self.confidence = nx.MLP([2, *cfg.confidence_widths], init="kaiming")
        self.head = nx.Dense(cfg.embed_dim, 1)

    def forward(self, frame, conf):
        return self.head(torch.cat([self.visual(frame), self.confidence(conf)], dim=-1)).squeeze(-1)


@dataclass
class FrameExitModel:
    classifier: FrameExitClassifier
    tau0: float
    tau1: float
    degenerate: bool = False
    prevalence: float = 0.0


def frameexit_train(clips: Sequence[ClipRecord], streams: dict, tau0: float, tau1: float, cfg: PolicyConfig,
                    steps: int = 500, batch_size: int = 128, lr: float = 1e-3, seed: int = 0) -> FrameExitModel:
    labels = frameexit_pseudolabels(clips, streams, tau0, tau1)
    frames = np.concatenate([c.features for c in clips])
    confs = np.concatenate([streams[c.id].confidences for c in clips]).astype(np.float32)
    y = np.concatenate([labels[c.id] for c in clips]).astype(np.float32)
    prevalence = float(y.mean())
    degenerate = prevalence in (0.0, 1.0)
    if degenerate:
        log.warning("FrameExit pseudo-labels are all %d for schedule (%g, %g)", int(prevalence), tau0, tau1)
    torch.manual_seed(seed)
    model = FrameExitClassifier(cfg)
    store = nx.ParameterStore(model)
    opt = nx.Optimizer(store, nx.OptimizerConfig("adam", lr=lr))
    rng = np.random.default_rng([seed, 0xFE])
    X, C, Y = torch.from_numpy(frames), torch.from_numpy(confs), torch.from_numpy(y)
    for _ in range(steps):
        idx = torch.from_numpy(rng.integers(0, len(y), size=batch_size))
        loss = nn.functional.binary_cross_entropy_with_logits(model(X[idx], C[idx]), Y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    return FrameExitModel(model, tau0, tau1, degenerate, prevalence)


class FrameExitAgent(Agent):
    name = "frameexit"

    def __init__(self, model: FrameExitModel):
        self.model = model

    def decide(self, t):
        with torch.no_grad():
            logit = self.model.classifier(torch.as_tensor(self.clip.features[t]),
                                          torch.as_tensor(self.stream.confidences[t], dtype=torch.float32))
        if float(logit) > 0.0:
            return _argmax_exit(self.stream.confidences[t])
        return Action.CONTINUE


FRAMEEXIT_GRID = ((0.05, 0.3), (0.05, 0.7), (0.1, 0.5), (0.2, 0.7), (0.3, 1.0))


def frameexit_select(train: Sequence[ClipRecord], val: Sequence[ClipRecord], streams: dict, cfg: PolicyConfig,
                     grid=FRAMEEXIT_GRID, or_weight: float = 0.5, seed: int = 0, steps: int = 500):
    """Fit one classifier per schedule and keep the one with the best val ``AP - or_weight * OR``."""
    from .evaluation import evaluate_model

    best, best_score = None, -math.inf
    for tau0, tau1 in grid:
        model = frameexit_train(train, streams, tau0, tau1, cfg, steps=steps, seed=seed)
        summary = evaluate_model(FrameExitAgent(model), None, val, seed=seed, streams=streams)
        score = summary.ap - or_weight * summary.mean_or
        if score > best_score:
            best, best_score = model, score
    return best


def make_rule_agent(spec: BaselineSpec) -> Agent:
    """Agents that need no training."""
    if spec.kind == "random":
        return RandomAgent()
    if spec.kind in ("adafocus_v2", "adafocus_v2pp"):
        return ConfidenceAgent(spec.threshold, spec.window, spec.kind)
    if spec.kind in ("adafocus_v3", "adafocus_v3pp"):
        return EntropyAgent(spec.threshold, spec.window, spec.kind)
    raise ConfigError(f"baseline {spec.kind!r} must be trained first")
