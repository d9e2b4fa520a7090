"""Command-line entry point: ``exitlab <command> ...``.

Every command writes its artifact and a run manifest next to it
(``<out>.run.json``, or ``<out>/run.json`` for directories). Failures exit
with a one-line JSON error on stderr: status 2 for configuration problems,
3 for missing or malformed artifacts, 4 for numerical divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import numerics as nx
from .baselines import (AdaFrameAgent, BaselineSpec, FrameExitAgent, KINDS, NeverExit, PolicyAgent,
                        frameexit_select, make_rule_agent)
from .config import RunConfig, load_config
from .detector import detector_streams, load_detector, pretrain_detector, probe_ap, save_detector
from .env import ClipRecord, degenerate_dataset, generate_splits, load_feature_files, save_dataset, split_clips
from .errors import ArtifactError, ConfigError, ExitlabError
from .evaluation import EvalSummary, evaluate_model, export_attention, export_frontier
from .policy import load_policy, save_policy
from .training import train_policy

log = logging.getLogger("exitlab")


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    version: str = __version__
    started: float = 0.0
    finished: float = 0.0
    artifacts: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def manifest_path(out) -> Path:
    out = Path(out)
    return out / "run.json" if out.is_dir() else Path(str(out) + ".run.json")


def write_manifest(m: RunManifest, out) -> None:
    atomic_write(manifest_path(out), json.dumps(dataclasses.asdict(m), indent=1, sort_keys=True))


def guard_output(out, force: bool) -> None:
    out = Path(out)
    exists = out.exists() and (not out.is_dir() or any(out.iterdir()))
    if exists and not force:
        raise ArtifactError(f"{out} already exists; pass --force to overwrite")
    out.parent.mkdir(parents=True, exist_ok=True)


def require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"{what} {path} does not exist")
    return path


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

def build_dataset(cfg: RunConfig) -> list[ClipRecord]:
    """Regenerate the configured dataset; identical for identical configs."""
    seed = cfg.component_seed(f"data:{cfg.data.seed}")
    if cfg.benchmark == "degenerate":
        clips = []
        for i, (split, n) in enumerate(sorted(cfg.splits.items())):
            part = degenerate_dataset(n, cfg.data.feature_dim, seed=seed + i, split=split)
            for c in part:
                c.id = f"{split}-{c.id}"
            clips += part
        return clips
    return generate_splits(dataclasses.replace(cfg.data, seed=seed), cfg.splits)


def dataset_for(cfg: RunConfig, data_dir) -> list[ClipRecord]:
    if data_dir is None:
        return build_dataset(cfg)
    return load_feature_files(require(data_dir, "dataset"))


def _split(clips, name: str) -> list[ClipRecord]:
    part = split_clips(clips, name)
    if not part:
        raise ConfigError(f"dataset has no clips in split {name!r}")
    return part


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig, m: RunManifest) -> None:
    guard_output(args.out, args.force)
    clips = build_dataset(cfg)
    path = save_dataset(clips, args.out)
    m.artifacts["manifest"] = str(path)
    m.metrics = {split: len(split_clips(clips, split)) for split in ("train", "val", "test")}


def _ndjson_writer(path):
    fh = open(path, "w")

    def write(rec: dict) -> None:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.flush()

    return fh, write


def cmd_train_detector(args, cfg: RunConfig, m: RunManifest) -> None:
    guard_output(args.out, args.force)
    clips = dataset_for(cfg, args.data)
    log_path = Path(str(args.out) + ".log.ndjson")
    fh, write = _ndjson_writer(log_path)
    try:
        det, history = pretrain_detector(clips, cfg.detector, cfg.detector_train, seed=cfg.component_seed("detector"))
        for rec in history:
            write(rec)
    finally:
        fh.close()
    val = split_clips(clips, "val")
    metrics = {"final_loss": history[-1]["loss"] if history else None}
    if val and len({c.label for c in val}) == 2:
        metrics["val_ap_final_frame"] = probe_ap(det, val)
    seed = cfg.component_seed("detector")
    save_detector(args.out, det, {"config_hash": cfg.hash, "checksum": nx.parameter_checksum(det), "seed": seed,
                                  "steps": cfg.detector_train.steps, "final_loss": metrics["final_loss"]})
    m.artifacts.update(checkpoint=str(args.out), log=str(log_path))
    m.metrics = metrics


def _load_detector(path):
    det, meta = load_detector(require(path, "detector checkpoint"))
    return det, meta


def _train_kind(cfg: RunConfig, clips, det, kind: str, log_path=None):
    fh, write = _ndjson_writer(log_path) if log_path else (None, None)
    before = nx.parameter_checksum(det)
    try:
        policy, history = train_policy(clips, det, cfg.ppo, cfg.rewards, cfg.policy,
                                       seed=cfg.component_seed(f"policy:{kind}"), kind=kind,
                                       probe=split_clips(clips, "val") or None, on_record=write)
    finally:
        if fh:
            fh.close()
    after = nx.parameter_checksum(det)
    return policy, history, before, after


def cmd_train_policy(args, cfg: RunConfig, m: RunManifest) -> None:
    guard_output(args.out, args.force)
    det, _ = _load_detector(args.detector)
    clips = dataset_for(cfg, args.data)
    kind = args.kind or cfg.reward_kind
    log_path = Path(str(args.out) + ".log.ndjson")
    policy, history, before, after = _train_kind(cfg, clips, det, kind, log_path)
    meta = {"config_hash": cfg.hash, "detector_checksum": before, "seed": cfg.component_seed(f"policy:{kind}"),
            "rewards": dataclasses.asdict(cfg.rewards), "ppo": dataclasses.asdict(cfg.ppo)}
    save_policy(args.out, policy, meta, kind=kind)
    m.artifacts.update(checkpoint=str(args.out), log=str(log_path))
    last = history[-1] if history else {}
    m.metrics = {"detector_checksum_before": before, "detector_checksum_after": after,
                 "final_mean_reward": last.get("mean_reward"), "final_mean_or": last.get("mean_or"),
                 "final_probe_ap": last.get("probe_ap")}


def parse_baseline(text: str) -> BaselineSpec:
    """A baseline is named by kind, or given as a JSON file of BaselineSpec fields."""
    if text in KINDS:
        return BaselineSpec(text)
    path = Path(text)
    if not path.exists():
        raise ConfigError(f"baseline {text!r} is neither a known kind {KINDS} nor a spec file")
    try:
        return BaselineSpec(**json.loads(path.read_text()))
    except (TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: bad baseline spec ({exc})") from exc


def baseline_agent(spec: BaselineSpec, cfg: RunConfig, clips, det, streams):
    if spec.kind == "frameexit":
        train, val = _split(clips, "train"), _split(clips, "val")
        seed = cfg.component_seed("frameexit")
        grid = ((spec.tau0, spec.tau1),) if spec.tau0 is not None else None
        kwargs = {"grid": grid} if grid else {}
        model = frameexit_select(train, val, streams, cfg.policy, seed=seed, **kwargs)
        return FrameExitAgent(model)
    if spec.kind in ("fastforward", "adaframe"):
        trained_cfg = dataclasses.replace(cfg, ppo=dataclasses.replace(cfg.ppo, fixed_penalty=spec.penalty))
        policy, _, _, _ = _train_kind(trained_cfg, clips, det, spec.kind)
        if spec.kind == "adaframe":
            return AdaFrameAgent(policy, spec.delta, spec.drops)
        return PolicyAgent(policy, name="fastforward")
    return make_rule_agent(spec)


def _evaluate(args, cfg: RunConfig, m: RunManifest, agent_factory) -> None:
    guard_output(args.out, args.force)
    det, _ = _load_detector(args.detector)
    clips = dataset_for(cfg, args.data)
    target = _split(clips, args.split)
    if target[0].feature_dim != det.cfg.feature_dim:
        raise ConfigError(f"dataset feature dim {target[0].feature_dim} != detector {det.cfg.feature_dim}")
    streams = detector_streams(det, clips)
    agent = agent_factory(clips, det, streams)
    summary = evaluate_model(agent, det, target, seed=cfg.component_seed("evaluate"), streams=streams,
                             workers=args.workers, config_hash=cfg.hash)
    atomic_write(args.out, summary.to_json())
    m.artifacts["summary"] = str(args.out)
    m.metrics = {"model": summary.model, "ap": summary.ap, "mean_or": summary.mean_or,
                 "records": len(summary.records), "split": args.split}


def cmd_run_baseline(args, cfg: RunConfig, m: RunManifest) -> None:
    spec = parse_baseline(args.kind)
    _evaluate(args, cfg, m, lambda clips, det, streams: baseline_agent(spec, cfg, clips, det, streams))


def cmd_evaluate(args, cfg: RunConfig, m: RunManifest) -> None:
    if args.policy and args.baseline:
        raise ConfigError("pass at most one of --policy and --baseline")

    def factory(clips, det, streams):
        if args.policy:
            policy, meta = load_policy(require(args.policy, "policy checkpoint"))
            if meta.get("kind") == "adaframe":
                return AdaFrameAgent(policy)
            return PolicyAgent(policy, name=meta.get("kind", "mistexit"))
        if args.baseline:
            return baseline_agent(parse_baseline(args.baseline), cfg, clips, det, streams)
        return NeverExit()

    _evaluate(args, cfg, m, factory)


def cmd_frontier(args, cfg, m: RunManifest) -> None:
    guard_output(args.out, args.force)
    # run manifests sit next to each summary and match the same globs
    paths = sorted(p for p in glob.glob(args.summaries) if not p.endswith(".run.json"))
    summaries = []
    for p in paths:
        try:
            summaries.append(EvalSummary.from_json(Path(p).read_text()))
        except (json.JSONDecodeError, TypeError, KeyError) as exc:
            raise ArtifactError(f"{p}: not an evaluation summary ({exc})") from exc
    export_frontier(summaries, args.out)
    m.artifacts.update(frontier=str(args.out), summaries=paths)
    m.metrics = {"rows": len(summaries)}


def cmd_attention(args, cfg, m: RunManifest) -> None:
    guard_output(args.out, args.force)
    det, _ = _load_detector(args.detector)
    if args.data is None and cfg is None:
        raise ConfigError("attention needs --data or --config to locate the clip")
    clips = dataset_for(cfg, args.data)
    matches = [c for c in clips if c.id == args.clip]
    if not matches:
        raise ArtifactError(f"clip {args.clip!r} not found")
    clip = matches[0]
    if not 0 <= args.t < clip.n_frames:
        raise ConfigError(f"frame {args.t} outside clip of {clip.n_frames} frames")
    scores = export_attention(det, clip, args.t, args.out)
    m.artifacts["attention"] = str(args.out)
    m.metrics = {"argmax_offset": int(np.argmax(scores))}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _default_workers() -> int:
    raw = os.environ.get("EXITLAB_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exitlab", description="Early-exit mistake detection on streaming clips.")
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--workers", type=int, default=_default_workers(),
                        help="evaluation threads (default: $EXITLAB_WORKERS or 1)")
    common.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, config_required=True):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--config", required=config_required)
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data)
    p.add_argument("--out", required=True)

    p = add("train-detector", cmd_train_detector)
    p.add_argument("--data", help="dataset directory (default: regenerate from the config)")
    p.add_argument("--out", required=True)

    p = add("train-policy", cmd_train_policy)
    p.add_argument("--detector", required=True)
    p.add_argument("--data")
    p.add_argument("--kind", choices=("mistexit", "fastforward", "adaframe"))
    p.add_argument("--out", required=True)

    p = add("run-baseline", cmd_run_baseline)
    p.add_argument("--kind", required=True, help=f"one of {', '.join(KINDS)} or a spec JSON file")
    p.add_argument("--detector", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate)
    p.add_argument("--detector", required=True)
    p.add_argument("--policy")
    p.add_argument("--baseline")
    p.add_argument("--data")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)

    p = add("frontier", cmd_frontier, config_required=False)
    p.add_argument("--summaries", required=True, help="glob of summary JSON files")
    p.add_argument("--out", required=True)

    p = add("attention", cmd_attention, config_required=False)
    p.add_argument("--detector", required=True)
    p.add_argument("--data")
    p.add_argument("--clip", required=True)
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = load_config(args.config) if args.config else None
        m = RunManifest(args.command, cfg.hash if cfg else "", cfg.seed if cfg else 0, started=time.time())
        args.func(args, cfg, m)
        m.finished = time.time()
        write_manifest(m, args.out)
    except ExitlabError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "status": exc.exit_code}),
              file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
