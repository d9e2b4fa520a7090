"""Recurrent actor-critic exit policy.

Inputs per frame are the latest raw frame feature and the detector's softmax
confidences. Each goes through its own 3-layer MLP; the concatenation feeds a
GRU whose state carries the episode history. Actor and critic both read the
current state together with the previous hidden state.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from . import numerics as nx
from .detector import Detector, DetectorStream, detector_streams
from .env import Action, ClipRecord, EpisodeState, reset, step
from .errors import ArtifactError, ConfigError, DivergenceError

N_ACTIONS = 3


@dataclass
class PolicyConfig:
    feature_dim: int = 16
    visual_widths: list = field(default_factory=lambda: [64, 64, 32])
    confidence_widths: list = field(default_factory=lambda: [16, 16, 8])
    hidden: int = 64
    bidirectional: bool = False
    # initial probability of Continue; None keeps the near-uniform start
    initial_continue: float | None = None

    def __post_init__(self):
        self.visual_widths = list(self.visual_widths)
        self.confidence_widths = list(self.confidence_widths)
        widths = [self.feature_dim, self.hidden, *self.visual_widths, *self.confidence_widths]
        if any(int(w) <= 0 for w in widths):
            raise ConfigError("policy widths must be positive")
        if len(self.visual_widths) != 3 or len(self.confidence_widths) != 3:
            raise ConfigError("visual and confidence encoders are 3-layer MLPs (three widths each)")
        if self.initial_continue is not None and not 0.0 < self.initial_continue < 1.0:
            raise ConfigError(f"initial_continue must lie in (0, 1), got {self.initial_continue}")

    @property
    def embed_dim(self) -> int:
        return self.visual_widths[-1] + self.confidence_widths[-1]


class ExitPolicy(nn.Module):
    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.cfg = cfg
        self.visual = nx.MLP([cfg.feature_dim, *cfg.visual_widths], init="kaiming")
        self.confidence = nx.MLP([2, *cfg.confidence_widths], init="kaiming")
        self.gru = nx.GRUCell(cfg.embed_dim, cfg.hidden)
        if cfg.bidirectional:
            self.gru_back = nx.GRUCell(cfg.embed_dim, cfg.hidden)
        state_dim = cfg.hidden * (2 if cfg.bidirectional else 1)
        self.actor = nx.Dense(state_dim + cfg.hidden, N_ACTIONS)
        self.critic = nx.Dense(state_dim + cfg.hidden, 1)
        with torch.no_grad():
            # near-uniform initial action distribution
            self.actor.weight.mul_(0.01)
            self.actor.bias.zero_()
            if cfg.initial_continue is not None:
                q = cfg.initial_continue
                self.actor.bias[int(Action.CONTINUE)] = math.log((N_ACTIONS - 1) * q / (1.0 - q))

    def initial_hidden(self, batch: int | None = None) -> torch.Tensor:
        shape = (self.cfg.hidden,) if batch is None else (batch, self.cfg.hidden)
        return torch.zeros(shape, dtype=self.gru.w_hh.dtype)

    def encode(self, frame: torch.Tensor, confidences: torch.Tensor) -> torch.Tensor:
        return encode_inputs(self, frame, confidences)

    def forward(self, frame, confidences, h_prev):
        """Returns (action logits, value, next hidden)."""
        return policy_step(self, self.encode(frame, confidences), h_prev)


def encode_inputs(policy: ExitPolicy, frame: torch.Tensor, confidences: torch.Tensor) -> torch.Tensor:
    """``p = [MLP_v(frame), MLP_m(confidences)]``."""
    return torch.cat([policy.visual(frame), policy.confidence(confidences)], dim=-1)


def policy_step(policy: ExitPolicy, p: torch.Tensor, h_prev: torch.Tensor):
    h = policy.gru(p, h_prev)
    if policy.cfg.bidirectional:
        # over the streamed prefix, the reverse direction's output at the newest
        # position has only consumed that position, starting from a zero state
        back = policy.gru_back(p, torch.zeros_like(h_prev))
        g = torch.cat([h, back], dim=-1)
    else:
        g = h
    joint = torch.cat([g, h_prev], dim=-1)
    logits = policy.actor(joint)
    value = policy.critic(joint).squeeze(-1)
    return logits, value, h


@dataclass
class PolicyStepOutput:
    probs: np.ndarray
    action: Action
    log_prob: float
    value: float
    hidden: torch.Tensor


def select_action(probs: np.ndarray, rng: np.random.Generator | None, greedy: bool) -> int:
    if not np.all(np.isfinite(probs)):
        raise DivergenceError(f"non-finite action distribution {probs}")
    if greedy:
        return int(np.argmax(probs))
    if rng is None:
        raise ValueError("sampling an action needs an rng")
    u = rng.random()
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), len(probs) - 1))


def act(policy: ExitPolicy, frame, confidences, h_prev, rng=None, greedy=False) -> PolicyStepOutput:
    dtype = policy.gru.w_hh.dtype
    with torch.no_grad():
        logits, value, h = policy(
            torch.as_tensor(np.asarray(frame), dtype=dtype),
            torch.as_tensor(np.asarray(confidences), dtype=dtype),
            h_prev,
        )
        logp = torch.log_softmax(logits.double(), dim=-1).numpy()
    probs = np.exp(logp)
    a = select_action(probs, rng, greedy)
    return PolicyStepOutput(probs, Action(a), float(logp[a]), float(value), h)


@dataclass
class TrajectoryStep:
    t: int
    frame: np.ndarray
    confidences: np.ndarray
    logits: np.ndarray
    hidden_prev: torch.Tensor
    action: Action
    log_prob: float
    value: float
    probs: np.ndarray


@dataclass
class Trajectory:
    steps: list
    state: EpisodeState

    def __len__(self) -> int:
        return len(self.steps)


def rollout_episode(
    clip: ClipRecord,
    detector: Detector | None,
    policy: ExitPolicy,
    greedy: bool = True,
    rng: np.random.Generator | None = None,
    stream: DetectorStream | None = None,
) -> Trajectory:
    """Stream ``clip`` through detector and policy until an exit or the clip ends.

    Detector outputs come from ``stream`` when given (precomputed per frame
    from causal windows), otherwise they are computed from ``detector``.
    """
    if stream is None:
        stream = detector_streams(detector, [clip])[clip.id]
    if not greedy and rng is None:
        raise ValueError("sampling rollouts need an rng")
    state = reset(clip, policy.initial_hidden())
    steps = []
    while not state.done:
        t = state.t
        out = act(policy, clip.features[t], stream.confidences[t], state.hidden, rng, greedy)
        steps.append(
            TrajectoryStep(t, clip.features[t], stream.confidences[t], stream.logits[t], state.hidden,
                           out.action, out.log_prob, out.value, out.probs)
        )
        state = step(state, out.action)
        state.hidden = out.hidden
    return Trajectory(steps, state)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def build_policy(cfg: PolicyConfig, seed: int = 0) -> ExitPolicy:
    torch.manual_seed(seed)
    return ExitPolicy(cfg)


def save_policy(path, policy: ExitPolicy, meta: dict | None = None, kind: str = "policy") -> None:
    nx.module_to_checkpoint(policy, path)
    side = Path(str(path) + ".json")
    side.write_text(json.dumps({"kind": kind, "config": asdict(policy.cfg), "meta": meta or {}}, indent=1, sort_keys=True))


def load_policy(path) -> tuple[ExitPolicy, dict]:
    path = Path(path)
    side = Path(str(path) + ".json")
    if not path.exists() or not side.exists():
        raise ArtifactError(f"policy checkpoint {path} (or its sidecar) is missing")
    info = json.loads(side.read_text())
    policy = ExitPolicy(PolicyConfig(**info["config"]))
    nx.checkpoint_to_module(policy, path)
    policy.eval()
    return policy, dict(info.get("meta", {}), kind=info.get("kind", "policy"))
