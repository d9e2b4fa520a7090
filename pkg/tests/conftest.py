import numpy as np
import pytest
import torch

from exitlab import numerics as nx

torch.set_num_threads(1)

GRAD_INSTANCES = 20
GRAD_STEP = 1e-3
GRAD_TOL = 1e-4


def check_grads(fn, tensors, tol=GRAD_TOL):
    """Finite-difference check; returns the worst relative error."""
    errors = nx.grad_check(fn, tensors, eps=GRAD_STEP)
    worst = max(errors.values())
    assert worst <= tol, errors
    return worst


@pytest.fixture
def f64():
    with nx.float64_mode():
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


RELU_MARGIN = 0.02


def relu_margin(layers, run) -> float:
    """Smallest |pre-activation| seen at ``layers`` while calling ``run``.

    Central differences are only a valid oracle away from ReLU kinks, so
    gradient-check instances closer than RELU_MARGIN are discarded.
    """
    seen = []
    hooks = [l.register_forward_hook(lambda m, i, o: seen.append(o.detach().abs().min().item())) for l in layers]
    try:
        run()
    finally:
        for h in hooks:
            h.remove()
    return min(seen) if seen else float("inf")


def kink_free_instances(make, layers_of, n=GRAD_INSTANCES, max_draws=500):
    """Yield ``n`` instances from ``make(i)`` whose forward pass stays clear of ReLU kinks."""
    accepted = 0
    for i in range(max_draws):
        inst = make(i)
        layers, run = layers_of(inst)
        if relu_margin(layers, run) < RELU_MARGIN:
            continue
        accepted += 1
        yield inst
        if accepted == n:
            return
    raise AssertionError(f"only {accepted} kink-free instances in {max_draws} draws")


# --- shared trained artifacts ------------------------------------------------

@pytest.fixture(scope="session")
def noiseless_clips():
    return noiseless_run(0)[0]


_NOISELESS = {}


def noiseless_run(seed: int):
    """(clips, detector) on the noiseless preset, trained once per seed and cached for the session."""
    from exitlab.detector import DetectorConfig, DetectorTrainConfig, pretrain_detector
    from exitlab.env import SynthConfig, generate_splits

    if seed not in _NOISELESS:
        clips = generate_splits(SynthConfig(noise=0.0, drift=10.0, seed=seed), {"train": 1000, "val": 100, "test": 300})
        det, _ = pretrain_detector(clips, DetectorConfig(), DetectorTrainConfig(steps=1500), seed=seed)
        _NOISELESS[seed] = (clips, det)
    return _NOISELESS[seed]


@pytest.fixture(scope="session")
def noiseless_detector(noiseless_clips):
    return noiseless_run(0)[1]


@pytest.fixture(scope="session")
def degenerate_setup():
    from exitlab.detector import DetectorConfig, DetectorTrainConfig, pretrain_detector
    from exitlab.env import degenerate_dataset

    train = degenerate_dataset(200, seed=0, split="train")
    test = degenerate_dataset(200, seed=100, split="test")
    det, _ = pretrain_detector(train, DetectorConfig(feature_dim=4), DetectorTrainConfig(steps=200), seed=0)
    return train, test, det


def optimal_action_rate(kind, policy, detector, clips, weights, ppo_cfg) -> float:
    """Fraction of clips where the greedy first action is among the brute-forced best first actions."""
    from exitlab.detector import detector_streams
    from exitlab.policy import act
    from exitlab.training import optimal_first_actions

    streams = detector_streams(detector, clips)
    hits = 0
    for c in clips:
        conf = streams[c.id].confidences
        best, _ = optimal_first_actions(kind, c, conf, weights, ppo_cfg.gamma, ppo_cfg.fixed_penalty)
        out = act(policy, c.features[0], conf[0], policy.initial_hidden(), greedy=True)
        hits += out.action in best
    return hits / len(clips)


_DESK = {}


def desk_pipeline(seed: int, w2: float = 0.1) -> dict:
    """Full desk pipeline on the standard benchmark (data, detector, policy, test metrics), cached per (seed, w2)."""
    import time

    from exitlab.baselines import NeverExit, RandomAgent
    from exitlab.cli import build_dataset
    from exitlab.config import config_from_dict
    from exitlab.detector import detector_streams, pretrain_detector
    from exitlab.env import split_clips
    from exitlab.evaluation import evaluate_model, evaluate_policy
    from exitlab.training import train_policy

    key = (seed, w2)
    if key not in _DESK:
        cfg = config_from_dict({"seed": seed, "detector_train": {"w2": w2}})
        clips = build_dataset(cfg)
        val, test = split_clips(clips, "val"), split_clips(clips, "test")
        t0 = time.perf_counter()
        det, _ = pretrain_detector(clips, cfg.detector, cfg.detector_train, seed=cfg.component_seed("detector"))
        t1 = time.perf_counter()
        before = nx.parameter_checksum(det)
        policy, history = train_policy(clips, det, cfg.ppo, cfg.rewards, cfg.policy,
                                       seed=cfg.component_seed("policy:mistexit"), probe=val)
        t2 = time.perf_counter()
        streams = detector_streams(det, test)
        _DESK[key] = {
            "cfg": cfg, "clips": clips, "detector": det, "policy": policy, "history": history, "streams": streams,
            "checksums": (before, nx.parameter_checksum(det)),
            "mistexit": evaluate_policy(policy, det, test, streams=streams),
            "random": evaluate_model(RandomAgent(), det, test, streams=streams, seed=seed),
            "full": evaluate_model(NeverExit(), det, test, streams=streams),
            "seconds": {"detector": t1 - t0, "policy": t2 - t1},
        }
    return _DESK[key]


# --- acceptance report ---------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def report_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
