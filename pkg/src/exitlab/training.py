"""Rewards and PPO training of the exit policy against a frozen detector."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, asdict, field
from typing import Callable, Sequence

import numpy as np
import torch

from . import numerics as nx
from .detector import Detector, DetectorStream, detector_streams
from .env import Action, ClipRecord, extract_correctness
from .errors import ConfigError, DivergenceError, StaleBatchError
from .policy import ExitPolicy, PolicyConfig, build_policy

log = logging.getLogger(__name__)

REWARD_KINDS = ("mistexit", "fastforward", "adaframe")


@dataclass
class RewardWeights:
    v1: float = 0.1  # dense
    v2: float = 1.0  # sparse
    v3: float = 1.0  # time penalty

    def __post_init__(self):
        if min(self.v1, self.v2, self.v3) < 0:
            raise ConfigError("reward weights must be non-negative")


@dataclass
class PPOConfig:
    total_steps: int = 200_000
    horizon: int = 40
    epochs: int = 4
    minibatch_size: int = 80
    num_streams: int = 8
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    action_weight: float = 1.0
    value_weight: float = 0.5
    entropy_weight: float = 0.2
    lr: float = 1e-3
    max_grad_norm: float | None = 0.5
    probe_every: int = 25
    fixed_penalty: float = 1e-2  # FastForward per-frame cost
    lr_schedule: str = "linear"  # "linear" decays the initial rate to 0 over training

    def __post_init__(self):
        if not 0.0 < self.clip < 1.0:
            raise ConfigError(f"clip ratio must lie in (0, 1), got {self.clip}")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ConfigError("gamma and lambda must lie in [0, 1]")
        for name in ("total_steps", "horizon", "epochs", "minibatch_size", "num_streams", "probe_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"PPO {name} must be >= 1")
        if self.lr <= 0:
            raise ConfigError("PPO learning rate must be > 0")
        if self.lr_schedule not in ("constant", "linear"):
            raise ConfigError(f"lr_schedule must be constant or linear, got {self.lr_schedule!r}")


# ---------------------------------------------------------------------------
# Rewards
# ---------------------------------------------------------------------------

def _check_distribution(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (2,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"not a valid two-way confidence distribution: {p}")
    return p


def reward(t, exit_point, duration, conf_t, conf_next, label, action, weights: RewardWeights,
           final_prediction: int | None = None) -> float:
    """Three-term MistExit reward for time step ``t`` of an episode ending at ``exit_point``.

    Before the end point: ``v1 * (conf_next[label] - conf_t[label]) - v3 / duration``.
    At the end point: ``v2`` if the exit action's label is right. When the
    episode ended naturally (``action`` is None or Continue) the detector's
    final prediction stands in for the exit action.
    """
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    if t < exit_point:
        c0, c1 = _check_distribution(conf_t), _check_distribution(conf_next)
        return weights.v1 * (c1[label] - c0[label]) - weights.v3 * (1.0 / duration)
    if t == exit_point:
        if action is not None and Action(action).is_exit:
            predicted = extract_correctness(action)
        elif final_prediction is None:
            raise ValueError("natural-end reward needs the detector's final prediction")
        else:
            predicted = int(final_prediction)
        return weights.v2 * float(predicted == label)
    raise ValueError(f"t={t} lies beyond the end point {exit_point}")


def fixed_penalty_reward(t, exit_point, conf_t, conf_next, label, action, penalty: float = 1e-2,
                         final_prediction: int | None = None, final_conf=None) -> float:
    """FastForward-style reward: unit-weight confidence gain minus a flat per-frame cost,
    and at the end point the target-class confidence when the predicted label is right."""
    if t < exit_point:
        c0, c1 = _check_distribution(conf_t), _check_distribution(conf_next)
        return (c1[label] - c0[label]) - penalty
    if t == exit_point:
        c = _check_distribution(conf_t if final_conf is None else final_conf)
        if action is not None and Action(action).is_exit:
            predicted = extract_correctness(action)
        elif final_prediction is None:
            raise ValueError("natural-end reward needs the detector's final prediction")
        else:
            predicted = int(final_prediction)
        return float(c[label]) * float(predicted == label)
    raise ValueError(f"t={t} lies beyond the end point {exit_point}")


def adaframe_dense(conf_next, label, best_so_far: float) -> float:
    """Improvement of the target-class confidence over its best value so far, floored at 0."""
    return max(0.0, float(_check_distribution(conf_next)[label]) - best_so_far)


def transition_reward(kind: str, clip: ClipRecord, conf: np.ndarray, t: int, action: Action,
                      weights: RewardWeights, penalty: float = 1e-2) -> tuple[float, bool]:
    """Reward for taking ``action`` at frame ``t`` of ``clip``; returns (reward, episode done).

    ``conf`` holds the detector confidences for every frame of the clip. On the
    last frame a Continue ends the episode naturally; the step then gets its
    penalty (no next frame, so no confidence gain) plus the sparse term judged
    on the detector's final prediction.
    """
    n, label = clip.n_frames, clip.label
    action = Action(action)
    last = t + 1 >= n
    if kind == "mistexit":
        if action.is_exit:
            return reward(t, t, clip.duration, conf[t], conf[t], label, action, weights), True
        nxt = conf[t] if last else conf[t + 1]
        r = reward(t, n if last else t + 1, clip.duration, conf[t], nxt, label, action, weights)
        if last:
            r += reward(n, n, clip.duration, conf[t], conf[t], label, None, weights,
                        final_prediction=int(np.argmax(conf[n - 1])))
        return r, last
    if kind == "fastforward":
        if action.is_exit:
            return fixed_penalty_reward(t, t, conf[t], conf[t], label, action, penalty), True
        nxt = conf[t] if last else conf[t + 1]
        r = fixed_penalty_reward(t, t + 1, conf[t], nxt, label, action, penalty)
        if last:
            r += fixed_penalty_reward(n, n, conf[n - 1], conf[n - 1], label, None, penalty,
                                      final_prediction=int(np.argmax(conf[n - 1])))
        return r, last
    if kind == "adaframe":
        if action.is_exit:
            return weights.v2 * float(extract_correctness(action) == label), True
        if last:
            return weights.v2 * float(int(np.argmax(conf[n - 1])) == label), True
        best = float(conf[: t + 1, label].max())
        return adaframe_dense(conf[t + 1], label, best), False
    raise ConfigError(f"unknown reward kind {kind!r}")


def optimal_first_actions(kind: str, clip: ClipRecord, conf: np.ndarray, weights: RewardWeights,
                          gamma: float, penalty: float = 1e-2, tol: float = 1e-12) -> tuple[set, dict]:
    """Brute-force every action sequence on ``clip`` and return the set of best first actions.

    Exits are terminal, so a sequence is k Continues followed by an exit (or
    by the natural end); all of them are enumerated and scored by their
    discounted return.
    """
    n = clip.n_frames
    best_by_first: dict[Action, float] = {}
    for k in range(n + 1):
        finals = [None] if k == n else [Action.EXIT_MISTAKE, Action.EXIT_CORRECT]
        for final in finals:
            seq = [Action.CONTINUE] * k + ([final] if final is not None else [])
            ret, disc = 0.0, 1.0
            for t, a in enumerate(seq):
                r, done = transition_reward(kind, clip, conf, t, a, weights, penalty)
                ret += disc * r
                disc *= gamma
                if done:
                    break
            first = seq[0]
            best_by_first[first] = max(best_by_first.get(first, -math.inf), ret)
    top = max(best_by_first.values())
    return {a for a, v in best_by_first.items() if v >= top - tol}, best_by_first


# ---------------------------------------------------------------------------
# Rollout storage and advantages
# ---------------------------------------------------------------------------

@dataclass
class TransitionBatch:
    """One collection cycle: arrays shaped (streams, horizon, ...)."""

    frames: np.ndarray
    confidences: np.ndarray
    hidden: np.ndarray  # recurrent state fed into each step
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    last_values: np.ndarray  # bootstrap value after the final step of each stream
    version: int
    episode_returns: list = field(default_factory=list)
    episode_ors: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return int(self.rewards.size)


def compute_advantages(rewards, values, dones, last_values, gamma: float, lam: float, normalize: bool = False):
    """Generalised advantage estimation over (streams, steps) arrays.

    ``dones[s, t]`` marks that the episode ended with step t, cutting both the
    bootstrap and the GAE trace. Returns (advantages, returns).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise ValueError("empty batch")
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if rewards.ndim == 1:
        rewards, values, dones = rewards[None], values[None], dones[None]
    last_values = np.broadcast_to(np.asarray(last_values, dtype=np.float64), (rewards.shape[0],))
    if values.shape != rewards.shape or dones.shape != rewards.shape:
        raise ValueError("rewards, values and dones must align")
    adv = np.zeros_like(rewards)
    S, T = rewards.shape
    gae = np.zeros(S)
    for t in reversed(range(T)):
        alive = 1.0 - dones[:, t]
        next_v = last_values if t == T - 1 else values[:, t + 1]
        delta = rewards[:, t] + gamma * next_v * alive - values[:, t]
        gae = delta + gamma * lam * alive * gae
        adv[:, t] = gae
    returns = adv + values
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, returns


class RolloutCollector:
    """Runs ``num_streams`` episodes side by side, resampling clips as episodes end."""

    def __init__(self, clips: Sequence[ClipRecord], streams: dict[str, DetectorStream], kind: str,
                 weights: RewardWeights, cfg: PPOConfig, seed: int):
        if not clips:
            raise ConfigError("policy training needs a non-empty train split")
        if kind not in REWARD_KINDS:
            raise ConfigError(f"unknown reward kind {kind!r}")
        self.clips, self.streams, self.kind = list(clips), streams, kind
        self.weights, self.cfg = weights, cfg
        self.rng = np.random.default_rng([seed, 0x5EED])
        self.slots = [None] * cfg.num_streams

    def _start(self, s: int, hidden_dim: int) -> None:
        clip = self.clips[int(self.rng.integers(0, len(self.clips)))]
        self.slots[s] = {"clip": clip, "t": 0, "h": np.zeros(hidden_dim, np.float32), "ret": 0.0}

    def collect(self, policy: ExitPolicy, version: int) -> TransitionBatch:
        S, T, H = self.cfg.num_streams, self.cfg.horizon, policy.cfg.hidden
        F = policy.cfg.feature_dim
        for s in range(S):
            if self.slots[s] is None:
                self._start(s, H)
        buf = {
            "frames": np.zeros((S, T, F), np.float32),
            "confidences": np.zeros((S, T, 2), np.float32),
            "hidden": np.zeros((S, T, H), np.float32),
            "actions": np.zeros((S, T), np.int64),
            "log_probs": np.zeros((S, T), np.float32),
            "values": np.zeros((S, T), np.float32),
            "rewards": np.zeros((S, T), np.float64),
            "dones": np.zeros((S, T), bool),
        }
        returns, ors = [], []
        dtype = policy.gru.w_hh.dtype
        for t in range(T):
            for s, slot in enumerate(self.slots):
                clip = slot["clip"]
                buf["frames"][s, t] = clip.features[slot["t"]]
                buf["confidences"][s, t] = self.streams[clip.id].confidences[slot["t"]]
                buf["hidden"][s, t] = slot["h"]
            with torch.no_grad():
                logits, values, h_new = policy(
                    torch.from_numpy(buf["frames"][:, t]).to(dtype),
                    torch.from_numpy(buf["confidences"][:, t]).to(dtype),
                    torch.from_numpy(buf["hidden"][:, t]).to(dtype),
                )
                logp = torch.log_softmax(logits, dim=-1)
            probs = logp.double().exp().numpy()
            if not np.isfinite(probs).all():
                raise DivergenceError("non-finite action distribution during rollout")
            u = self.rng.random(S)
            cdf = np.cumsum(probs, axis=1)
            acts = np.minimum((u[:, None] * cdf[:, -1:] >= cdf).sum(axis=1), 2)
            buf["actions"][:, t] = acts
            buf["log_probs"][:, t] = logp.numpy()[np.arange(S), acts]
            buf["values"][:, t] = values.numpy()
            h_np = h_new.numpy()
            for s, slot in enumerate(self.slots):
                clip = slot["clip"]
                conf = self.streams[clip.id].confidences
                r, done = transition_reward(self.kind, clip, conf, slot["t"], Action(int(acts[s])),
                                            self.weights, self.cfg.fixed_penalty)
                buf["rewards"][s, t] = r
                buf["dones"][s, t] = done
                slot["ret"] += r
                if done:
                    exit_point = slot["t"] if acts[s] != Action.CONTINUE else clip.n_frames
                    returns.append(slot["ret"])
                    ors.append(exit_point / clip.n_frames)
                    self._start(s, H)
                else:
                    slot["t"] += 1
                    slot["h"] = h_np[s].astype(np.float32)
        with torch.no_grad():
            frames = np.stack([sl["clip"].features[sl["t"]] for sl in self.slots])
            confs = np.stack([self.streams[sl["clip"].id].confidences[sl["t"]] for sl in self.slots])
            hid = np.stack([sl["h"] for sl in self.slots])
            _, last_v, _ = policy(torch.from_numpy(frames).to(dtype), torch.from_numpy(confs.astype(np.float32)).to(dtype),
                                  torch.from_numpy(hid).to(dtype))
        return TransitionBatch(**buf, last_values=last_v.double().numpy(), version=version,
                               episode_returns=returns, episode_ors=ors)


# ---------------------------------------------------------------------------
# PPO
# ---------------------------------------------------------------------------

def ppo_loss(policy: ExitPolicy, frames, confidences, hidden, actions, old_log_probs, advantages, returns,
             cfg: PPOConfig):
    """Clipped surrogate + value + entropy objective; returns (total, stats dict of tensors)."""
    logits, values, _ = policy(frames, confidences, hidden)
    logp_all = torch.log_softmax(logits, dim=-1)
    logp = logp_all.gather(-1, actions.unsqueeze(-1)).squeeze(-1)
    ratio = torch.exp(logp - old_log_probs)
    surr = torch.min(ratio * advantages, torch.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * advantages)
    policy_loss = -surr.mean()
    value_loss = (values - returns).pow(2).mean()
    entropy = -(logp_all.exp() * logp_all).sum(-1).mean()
    total = cfg.action_weight * policy_loss + cfg.value_weight * value_loss - cfg.entropy_weight * entropy
    return total, {"policy_loss": policy_loss, "value_loss": value_loss, "entropy": entropy, "ratio": ratio}


def ppo_update(batch: TransitionBatch, policy: ExitPolicy, store: nx.ParameterStore, optimizer: nx.Optimizer,
               cfg: PPOConfig, rng: np.random.Generator) -> dict:
    if batch.version != store.version:
        raise StaleBatchError(f"batch collected at parameter version {batch.version}, store is at {store.version}")
    adv, ret = compute_advantages(batch.rewards, batch.values, batch.dones, batch.last_values,
                                  cfg.gamma, cfg.lam, normalize=True)
    dtype = policy.gru.w_hh.dtype
    n = batch.size

    def flat(a, tdtype=None):
        a = a.reshape(n, *a.shape[2:])
        t = torch.from_numpy(np.ascontiguousarray(a))
        return t.to(tdtype or dtype)

    frames, confs, hidden = flat(batch.frames), flat(batch.confidences), flat(batch.hidden)
    actions = flat(batch.actions, torch.long)
    old_logp = flat(batch.log_probs)
    adv_t, ret_t = flat(adv), flat(ret)
    sums = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "clip_fraction": 0.0, "max_ratio_dev": 0.0}
    count = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = torch.from_numpy(order[start : start + cfg.minibatch_size])
            total, stats = ppo_loss(policy, frames[idx], confs[idx], hidden[idx], actions[idx], old_logp[idx],
                                    adv_t[idx], ret_t[idx], cfg)
            if not torch.isfinite(total):
                raise DivergenceError(f"PPO loss became {total.item()} at version {store.version}")
            optimizer.zero_grad()
            total.backward()
            if cfg.max_grad_norm:
                torch.nn.utils.clip_grad_norm_(policy.parameters(), cfg.max_grad_norm)
            optimizer.step()
            ratio = stats["ratio"].detach()
            sums["policy_loss"] += stats["policy_loss"].item()
            sums["value_loss"] += stats["value_loss"].item()
            sums["entropy"] += stats["entropy"].item()
            sums["clip_fraction"] += float(((ratio - 1.0).abs() > cfg.clip).double().mean())
            sums["max_ratio_dev"] = max(sums["max_ratio_dev"], float((ratio - 1.0).abs().max()))
            count += 1
    return {k: (v if k == "max_ratio_dev" else v / count) for k, v in sums.items()}


def train_policy(
    clips: Sequence[ClipRecord],
    detector: Detector,
    ppo_cfg: PPOConfig,
    weights: RewardWeights,
    policy_cfg: PolicyConfig,
    seed: int = 0,
    kind: str = "mistexit",
    probe: Sequence[ClipRecord] | None = None,
    on_record: Callable[[dict], None] | None = None,
):
    """Curriculum stage two: PPO on the exit policy while the detector stays frozen.

    Returns (policy, training log). Raises if the detector's parameters
    change in any way during training.
    """
    train = [c for c in clips if c.split == "train"] or list(clips)
    before = nx.parameter_checksum(detector)
    detector.eval()
    for p in detector.parameters():
        p.requires_grad_(False)
    try:
        streams = detector_streams(detector, list(train) + list(probe or []))
        policy = build_policy(policy_cfg, seed)
        store = nx.ParameterStore(policy)
        optimizer = nx.Optimizer(store, nx.OptimizerConfig("adam", lr=ppo_cfg.lr))
        collector = RolloutCollector(train, streams, kind, weights, ppo_cfg, seed)
        rng = np.random.default_rng([seed, 0x99])
        per_cycle = ppo_cfg.num_streams * ppo_cfg.horizon
        cycles = math.ceil(ppo_cfg.total_steps / per_cycle)
        history = []
        for cycle in range(1, cycles + 1):
            if ppo_cfg.lr_schedule == "linear":
                optimizer.set_lr(ppo_cfg.lr * (1.0 - (cycle - 1) / cycles))
            policy.eval()
            batch = collector.collect(policy, store.version)
            policy.train()
            stats = ppo_update(batch, policy, store, optimizer, ppo_cfg, rng)
            policy.eval()
            rec = {
                "step": cycle * per_cycle,
                "mean_reward": float(np.mean(batch.episode_returns)) if batch.episode_returns else None,
                "mean_or": float(np.mean(batch.episode_ors)) if batch.episode_ors else None,
                "probe_ap": None,
                "episodes": len(batch.episode_returns),
                **{k: float(v) for k, v in stats.items()},
            }
            if probe and (cycle % ppo_cfg.probe_every == 0 or cycle == cycles):
                from .evaluation import evaluate_policy

                rec["probe_ap"] = evaluate_policy(policy, detector, probe, streams=streams).ap
            history.append(rec)
            if on_record:
                on_record(rec)
    finally:
        for p in detector.parameters():
            p.requires_grad_(True)
    after = nx.parameter_checksum(detector)
    if after != before:
        raise RuntimeError("detector parameters changed during policy training")
    return policy, history
