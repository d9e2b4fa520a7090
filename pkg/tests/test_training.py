import math

import numpy as np
import pytest
import torch

from exitlab import numerics as nx
from exitlab.detector import DetectorStream
from exitlab.env import Action, ClipRecord
from exitlab.errors import ConfigError, StaleBatchError
from exitlab.policy import ExitPolicy, PolicyConfig, build_policy
from exitlab.training import (PPOConfig, RewardWeights, RolloutCollector, adaframe_dense, compute_advantages,
                              fixed_penalty_reward, optimal_first_actions, ppo_loss, ppo_update, reward,
                              train_policy, transition_reward)

from conftest import GRAD_INSTANCES, check_grads, kink_free_instances, optimal_action_rate

PAPER_WEIGHTS = RewardWeights(v1=0.1, v2=1.0, v3=1.0)


def reward_oracle(t, E, T, c_t, c_next, label, action, v1, v2, v3, final_pred=None):
    """Direct transcription of the three-term reward, written independently of the package."""
    if t < E:
        return v1 * (c_next[label] - c_t[label]) - v3 / T
    if action in (1, 2):
        implied = 0 if action == 1 else 1
    else:
        implied = final_pred
    return v2 * (1.0 if implied == label else 0.0)


# --- reward -------------------------------------------------------------------

def test_reward_hand_cases():
    r = reward(3, 10, 20.0, [0.6, 0.4], [0.7, 0.3], 0, Action.CONTINUE, PAPER_WEIGHTS)
    assert abs(r - (-0.04)) <= 1e-12
    assert reward(4, 4, 20.0, [0.5, 0.5], [0.5, 0.5], 0, Action.EXIT_MISTAKE, PAPER_WEIGHTS) == 1.0
    assert reward(4, 4, 20.0, [0.5, 0.5], [0.5, 0.5], 0, Action.EXIT_CORRECT, PAPER_WEIGHTS) == 0.0


def test_reward_matches_independent_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10_000):
        T = float(rng.uniform(1, 60))
        E = int(rng.integers(0, 100))
        t = int(rng.integers(0, E + 1))
        a, b = rng.random(2)
        c_t, c_n = np.array([a, 1 - a]), np.array([b, 1 - b])
        label = int(rng.integers(0, 2))
        action = int(rng.integers(0, 3))
        v1, v2, v3 = rng.uniform(0, 2, size=3)
        final = int(rng.integers(0, 2))
        ours = reward(t, E, T, c_t, c_n, label, None if action == 0 else action, RewardWeights(v1, v2, v3),
                      final_prediction=final)
        worst = max(worst, abs(ours - reward_oracle(t, E, T, c_t, c_n, label, action, v1, v2, v3, final)))
    assert worst <= 1e-9


def test_reward_errors():
    with pytest.raises(ValueError):
        reward(0, 1, 1.0, [0.7, 0.7], [0.5, 0.5], 0, Action.CONTINUE, PAPER_WEIGHTS)
    with pytest.raises(ValueError):
        reward(2, 1, 1.0, [0.5, 0.5], [0.5, 0.5], 0, Action.CONTINUE, PAPER_WEIGHTS)
    with pytest.raises(ValueError):
        reward(1, 1, 1.0, [0.5, 0.5], [0.5, 0.5], 0, None, PAPER_WEIGHTS)
    with pytest.raises(ConfigError):
        RewardWeights(v1=-1.0)


def test_natural_end_uses_final_prediction():
    assert reward(5, 5, 2.5, [0.8, 0.2], [0.8, 0.2], 0, None, PAPER_WEIGHTS, final_prediction=0) == 1.0
    assert reward(5, 5, 2.5, [0.8, 0.2], [0.8, 0.2], 1, None, PAPER_WEIGHTS, final_prediction=0) == 0.0


def test_fixed_penalty_examples():
    assert abs(fixed_penalty_reward(0, 3, [0.6, 0.4], [0.6, 0.4], 0, Action.CONTINUE) - (-0.01)) <= 1e-12
    assert abs(fixed_penalty_reward(0, 3, [0.6, 0.4], [0.65, 0.35], 0, Action.CONTINUE) - 0.04) <= 1e-12
    assert fixed_penalty_reward(3, 3, [0.3, 0.7], [0.3, 0.7], 1, Action.EXIT_CORRECT) == 0.7
    assert fixed_penalty_reward(3, 3, [0.3, 0.7], [0.3, 0.7], 0, Action.EXIT_CORRECT) == 0.0


def test_adaframe_dense_never_negative():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        a = rng.random()
        assert adaframe_dense([a, 1 - a], int(rng.integers(0, 2)), rng.random()) >= 0.0


def _clip(n, fps=2.0, label=1):
    return ClipRecord(f"n{n}", np.zeros((n, 2), np.float32), n / fps, fps, label)


@pytest.mark.parametrize("n", [2, 7, 40])
def test_penalties_over_full_episode_sum_to_v3_times_fps(n):
    clip = _clip(n)
    conf = np.full((n, 2), 0.5)
    w = RewardWeights(v1=0.0, v2=0.0, v3=0.7)
    total = sum(transition_reward("mistexit", clip, conf, t, Action.CONTINUE, w)[0] for t in range(n))
    assert abs(total - (-0.7 * clip.fps)) <= 1e-12


def test_fastforward_penalty_grows_with_length():
    w = RewardWeights()
    totals = []
    for n in (4, 8):
        conf = np.full((n, 2), 0.5)
        totals.append(sum(transition_reward("fastforward", _clip(n), conf, t, Action.CONTINUE, w)[0]
                          for t in range(n - 1)))
    assert totals[1] < totals[0]


def test_transition_reward_unknown_kind():
    with pytest.raises(ConfigError):
        transition_reward("bogus", _clip(2), np.full((2, 2), 0.5), 0, Action.CONTINUE, RewardWeights())


def test_degenerate_optimum_is_correct_exit_at_start():
    clip = ClipRecord("d", np.zeros((2, 4), np.float32), 1.0, 2.0, 0)
    conf = np.array([[0.9, 0.1], [0.9, 0.1]])
    for kind in ("mistexit", "fastforward"):
        best, _ = optimal_first_actions(kind, clip, conf, RewardWeights(), 0.99)
        assert best == {Action.EXIT_MISTAKE}


# --- advantages -----------------------------------------------------------------

def test_gae_zero_discount_is_reward_minus_value():
    r, v = np.array([1.0, -2.0, 0.5]), np.array([0.3, 0.1, -0.4])
    adv, _ = compute_advantages(r, v, np.zeros(3), 9.0, gamma=0.0, lam=0.95)
    assert np.allclose(adv[0], r - v)


def test_gae_zero_lambda_is_one_step_td():
    r, v = np.array([1.0, -2.0, 0.5]), np.array([0.3, 0.1, -0.4])
    adv, _ = compute_advantages(r, v, np.zeros(3), 2.0, gamma=1.0, lam=0.0)
    assert np.allclose(adv[0], r + np.append(v[1:], 2.0) - v)


def test_gae_returns_hand_unrolled():
    _, ret = compute_advantages(np.ones(3), np.zeros(3), [0, 0, 1], 5.0, gamma=1.0, lam=1.0)
    assert ret[0].tolist() == [3.0, 2.0, 1.0]


def test_gae_respects_episode_boundaries():
    r, v = np.array([1.0, 1.0, 1.0]), np.zeros(3)
    _, ret = compute_advantages(r, v, [0, 1, 0], 10.0, gamma=1.0, lam=1.0)
    assert ret[0].tolist() == [2.0, 1.0, 11.0]


def test_gae_normalisation_and_errors():
    adv, _ = compute_advantages(np.arange(6.0).reshape(2, 3), np.zeros((2, 3)), np.zeros((2, 3)), [0, 0],
                                0.9, 0.9, normalize=True)
    assert abs(adv.mean()) < 1e-12 and abs(adv.std() - 1) < 1e-6
    with pytest.raises(ValueError):
        compute_advantages([], [], [], 0.0, 0.9, 0.9)


# --- PPO ------------------------------------------------------------------------

def tiny_policy_cfg():
    return PolicyConfig(feature_dim=3, visual_widths=[5, 5, 4], confidence_widths=[3, 3, 2], hidden=4)


def tiny_setup(seed=0, n_clips=6):
    rng = np.random.default_rng(seed)
    clips, streams = [], {}
    for i in range(n_clips):
        n = int(rng.integers(2, 6))
        clip = ClipRecord(f"t{i}", rng.normal(size=(n, 3)).astype(np.float32), n / 2.0, 2.0, int(rng.integers(0, 2)))
        a = rng.random(n)
        conf = np.stack([a, 1 - a], axis=1)
        clips.append(clip)
        streams[clip.id] = DetectorStream(np.log(conf), conf)
    return clips, streams


def collect(policy, store, cfg, seed=0):
    clips, streams = tiny_setup(seed)
    return RolloutCollector(clips, streams, "mistexit", RewardWeights(), cfg, seed).collect(policy, store.version)


def test_zero_learning_rate_leaves_parameters():
    cfg = PPOConfig(horizon=5, num_streams=2, minibatch_size=5, epochs=2)
    pol = build_policy(tiny_policy_cfg())
    store = nx.ParameterStore(pol)
    opt = nx.Optimizer(store, nx.OptimizerConfig("adam", lr=1e-3))
    opt.set_lr(0.0)
    before = nx.parameter_checksum(pol)
    stats = ppo_update(collect(pol, store, cfg), pol, store, opt, cfg, np.random.default_rng(0))
    assert all(math.isfinite(v) for v in stats.values())
    assert nx.parameter_checksum(pol) == before


def test_ratio_is_exactly_one_for_unchanged_parameters():
    pol = build_policy(tiny_policy_cfg())
    frames, conf, hidden = torch.randn(6, 3), torch.softmax(torch.randn(6, 2), -1), torch.randn(6, 4)
    actions = torch.tensor([0, 1, 2, 0, 1, 2])
    with torch.no_grad():
        logits, _, _ = pol(frames, conf, hidden)
        old = torch.log_softmax(logits, -1).gather(-1, actions[:, None]).squeeze(-1)
    _, stats = ppo_loss(pol, frames, conf, hidden, actions, old, torch.randn(6), torch.randn(6), PPOConfig())
    assert torch.equal(stats["ratio"], torch.ones(6))


def _away_from_clip(rng, n, clip):
    """Log-ratio offsets that keep every ratio clear of the clip boundaries."""
    inner = rng.uniform(0.02, 0.1, n)
    outer = rng.uniform(0.4, 0.6, n)
    mag = np.where(rng.random(n) < 0.5, inner, outer)
    return mag * rng.choice([-1.0, 1.0], n)


def test_surrogate_gradients(f64):
    cfg = PPOConfig()

    def make(i):
        torch.manual_seed(300 + i)
        rng = np.random.default_rng(300 + i)
        pol = ExitPolicy(tiny_policy_cfg())
        frames, conf = torch.randn(2, 3), torch.softmax(torch.randn(2, 2), -1)
        hidden, actions = torch.randn(2, 4), torch.tensor(rng.integers(0, 3, 2))
        with torch.no_grad():
            logits, _, _ = pol(frames, conf, hidden)
            cur = torch.log_softmax(logits, -1).gather(-1, actions[:, None]).squeeze(-1)
        old = cur - torch.as_tensor(_away_from_clip(rng, 2, cfg.clip))
        return pol, (frames, conf, hidden, actions, old, torch.randn(2), torch.randn(2))

    def layers_of(inst):
        pol, (frames, conf, hidden, *_) = inst
        hidden_layers = [pol.visual.layers[0], pol.visual.layers[1], pol.confidence.layers[0],
                         pol.confidence.layers[1]]
        return hidden_layers, lambda: pol(frames, conf, hidden)

    count = 0
    for pol, batch in kink_free_instances(make, layers_of):
        check_grads(lambda: ppo_loss(pol, *batch, cfg)[0], dict(pol.named_parameters()))
        count += 1
    assert count == GRAD_INSTANCES


def test_stale_batch_rejected():
    cfg = PPOConfig(horizon=4, num_streams=2, minibatch_size=4, epochs=1)
    pol = build_policy(tiny_policy_cfg())
    store = nx.ParameterStore(pol)
    opt = nx.Optimizer(store, nx.OptimizerConfig("adam", lr=1e-3))
    batch = collect(pol, store, cfg)
    ppo_update(batch, pol, store, opt, cfg, np.random.default_rng(0))
    with pytest.raises(StaleBatchError):
        ppo_update(batch, pol, store, opt, cfg, np.random.default_rng(0))


def test_collector_batch_alignment():
    cfg = PPOConfig(horizon=7, num_streams=3)
    pol = build_policy(tiny_policy_cfg())
    batch = collect(pol, nx.ParameterStore(pol), cfg)
    assert batch.rewards.shape == batch.actions.shape == batch.dones.shape == (3, 7)
    assert batch.hidden.shape == (3, 7, 4) and batch.size == 21
    # every stream starts a fresh episode from a zero hidden state
    assert np.count_nonzero(batch.hidden[:, 0]) == 0


@pytest.mark.parametrize("kwargs", [dict(clip=0.0), dict(gamma=1.5), dict(horizon=0), dict(lr=0.0),
                                    dict(lr_schedule="cosine")])
def test_ppo_config_validation(kwargs):
    with pytest.raises(ConfigError):
        PPOConfig(**kwargs)


# --- end-to-end training ------------------------------------------------------------

def test_detector_frozen_and_log_deterministic(degenerate_setup):
    train, test, det = degenerate_setup
    before = nx.parameter_checksum(det)
    cfg = PPOConfig(total_steps=960, probe_every=1)
    runs = [train_policy(train, det, cfg, RewardWeights(), PolicyConfig(feature_dim=4), seed=3, probe=test[:20])
            for _ in range(2)]
    assert nx.parameter_checksum(det) == before
    assert runs[0][1] == runs[1][1] and len(runs[0][1]) == 3
    assert nx.parameter_checksum(runs[0][0]) == nx.parameter_checksum(runs[1][0])
    assert {"step", "mean_reward", "mean_or", "probe_ap", "policy_loss", "value_loss"} <= set(runs[0][1][0])
    assert all(p.requires_grad for p in det.parameters())


@pytest.mark.parametrize("kind", ["mistexit", "fastforward"])
def test_degenerate_environment_reaches_optimum(degenerate_setup, kind):
    train, test, det = degenerate_setup
    cfg = PPOConfig(total_steps=50_000, entropy_weight=0.01)
    w = RewardWeights()
    pol, _ = train_policy(train, det, cfg, w, PolicyConfig(feature_dim=4), seed=0, kind=kind)
    assert optimal_action_rate(kind, pol, det, test, w, cfg) >= 0.95


def _mean_entropy(pol, det, clips):
    from exitlab.detector import detector_streams
    from exitlab.policy import act

    streams = detector_streams(det, clips)
    hs = []
    for c in clips:
        p = act(pol, c.features[0], streams[c.id].confidences[0], pol.initial_hidden(), greedy=True).probs
        hs.append(-float(np.sum(p * np.log(np.clip(p, 1e-300, None)))))
    return float(np.mean(hs))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_larger_entropy_weight_keeps_more_entropy(degenerate_setup, seed):
    train, test, det = degenerate_setup
    ent = []
    for weight in (0.0, 0.5):
        cfg = PPOConfig(total_steps=8000, entropy_weight=weight)
        pol, _ = train_policy(train, det, cfg, RewardWeights(), PolicyConfig(feature_dim=4), seed=seed)
        ent.append(_mean_entropy(pol, det, test[:50]))
    assert ent[1] >= ent[0]
