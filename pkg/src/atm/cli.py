"""Command line entry point: ``atm <stage> [flags]``.

Exit codes: 0 success, 1 stage failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, TrainConfig, deep_merge, load_config
from .pipeline import (
    DATA_ROOT_ENV,
    StageError,
    compare_variants,
    data_root,
    format_report,
    render_episode,
    run_stage,
    write_json,
)

logger = logging.getLogger("atm")


def _parse_set(items) -> dict:
    """``--set policy.epochs=3`` style overrides; values parse as JSON when possible."""
    out: dict = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node: dict = {}
        cur = node
        parts = key.split(".")
        for p in parts[:-1]:
            cur[p] = {}
            cur = cur[p]
        cur[parts[-1]] = value
        out = deep_merge(out, node)
    return out


def load_tasks(path) -> list:
    """Read a task list: a JSON array, or an object with a ``tasks`` array, of TaskSpec dicts."""
    from .synthetic_env import TaskSpec

    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    if isinstance(raw, dict):
        raw = raw.get("tasks")
    if not isinstance(raw, list) or not raw:
        raise ConfigError(f"{path}: expected a non-empty list of tasks")
    try:
        return [TaskSpec.from_dict(t).to_dict() for t in raw]
    except (TypeError, KeyError, ValueError) as e:
        raise ConfigError(f"{path}: bad task entry: {e}") from e


def _data_overrides(args) -> dict:
    d = {}
    if getattr(args, "tasks", None):
        d["tasks"] = load_tasks(args.tasks)
    if getattr(args, "num_videos", None) is not None:
        d["num_videos"] = args.num_videos
    if getattr(args, "num_demos", None) is not None:
        d["num_demos"] = args.num_demos
    emb = getattr(args, "embodiment", None)
    if emb:
        d["video_embodiment"] = emb
        d["demo_embodiment"] = emb
    if getattr(args, "demo_embodiment", None):
        d["demo_embodiment"] = args.demo_embodiment
    return {"data": d} if d else {}


def resolve_config(args, fallback: TrainConfig | None = None) -> TrainConfig:
    overrides = deep_merge(_parse_set(args.set), _data_overrides(args))
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.config:
        return load_config(*args.config, overrides=overrides)
    base = fallback.to_dict() if fallback is not None else {}
    return TrainConfig.from_dict(deep_merge(base, overrides))


def _split(s) -> list:
    return [p for p in (s or "").split(",") if p]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="atm", description="Any-point trajectory modeling pipeline")
    ap.add_argument("--root", default=None, help=f"run root for outputs and the ledger (default: ${DATA_ROOT_ENV} or .)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="stage", required=True)

    def common(p):
        p.add_argument("--config", action="append", help="JSON config; repeat to layer overrides")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config value")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--force", action="store_true", help="overwrite outputs that are not up to date")
        return p

    p = common(sub.add_parser("gen-data", help="render expert videos and demos"))
    p.add_argument("--out", default=None)
    p.add_argument("--tasks", default=None, help="task list JSON (see configs/tasks.json)")
    p.add_argument("--num-videos", type=int, default=None, help="action-free videos per task")
    p.add_argument("--num-demos", type=int, default=None, help="action-labelled demos per task")
    p.add_argument("--embodiment", default=None, help="embodiment used for the videos")
    p.add_argument("--demo-embodiment", default=None, help="embodiment for demos (default: same as videos)")

    p = common(sub.add_parser("annotate", help="label videos with point tracks"))
    p.add_argument("--data", "--dataset", dest="data", default=None)
    p.add_argument("--workers", type=int, default=1)

    p = common(sub.add_parser("train-tracker", help="train the track transformer"))
    p.add_argument("--data", "--dataset", dest="data", default=None)
    p.add_argument("--out", default=None)

    p = common(sub.add_parser("train-policy", help="train the ATM policy or the BC baseline"))
    p.add_argument("--demos", default=None)
    p.add_argument("--tracker", default=None, help="tracker checkpoint(s), comma separated")
    p.add_argument("--variant", choices=("atm", "bc"), default="atm")
    p.add_argument("--out", default=None)

    p = common(sub.add_parser("eval", help="closed-loop evaluation"))
    p.add_argument("--policy", required=True)
    p.add_argument("--episodes", type=int, default=None, help="episodes per task")
    p.add_argument("--out", default=None)

    p = sub.add_parser("compare", help="ATM vs BC report from eval outputs")
    p.add_argument("--atm", required=True, help="eval JSON(s), comma separated")
    p.add_argument("--bc", required=True, help="eval JSON(s), comma separated")
    p.add_argument("--out", default=None)

    p = sub.add_parser("render", help="predicted vs oracle track overlays for one episode")
    p.add_argument("--tracker", required=True)
    p.add_argument("--episode", required=True)
    p.add_argument("--view", default="agentview")
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--out", required=True)

    p = common(sub.add_parser("all", help="run every stage and compare ATM with BC"))
    p.add_argument("--seeds", default="0,1,2", help="policy training / evaluation seeds")
    p.add_argument("--episodes", type=int, default=None)
    return ap


def _report(rec) -> None:
    print(json.dumps({"stage": rec.stage, "status": rec.status, "config_hash": rec.config_hash, "outputs": list(rec.outputs), "metrics": rec.metrics}, default=str))


def run_all(args, root: Path) -> dict:
    cfg = resolve_config(args)
    data = root / "data"
    tracker = root / "tracker.pt"
    episodes = args.episodes or cfg.eval.episodes
    _report(run_stage("gen-data", cfg, root, args.force, out=str(data)))
    _report(run_stage("annotate", cfg, root, args.force, data=str(data)))
    _report(run_stage("train-tracker", cfg, root, args.force, data=str(data), out=str(tracker)))
    evals = {"atm": [], "bc": []}
    for seed in [int(s) for s in _split(args.seeds)]:
        scfg = TrainConfig.from_dict({**cfg.to_dict(), "seed": seed})
        for variant in ("atm", "bc"):
            ckpt = root / f"policy_{variant}_s{seed}.pt"
            trk = [str(tracker)] if variant == "atm" else None
            _report(run_stage("train-policy", scfg, root, args.force, demos=str(data), tracker=trk, variant=variant, out=str(ckpt)))
            out = root / f"eval_{variant}_s{seed}.json"
            _report(run_stage("eval", scfg, root, args.force, policy=str(ckpt), episodes=episodes, seed=seed, out=str(out)))
            evals[variant].append(json.loads(out.read_text()))
    report = compare_variants(evals["atm"], evals["bc"])
    write_json(root / "metrics.json", report)
    print(format_report(report))
    return report


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    root = Path(args.root) if args.root else data_root()
    try:
        if args.stage == "compare":
            load = lambda s: [json.loads(Path(p).read_text()) for p in _split(s)]
            report = compare_variants(load(args.atm), load(args.bc))
            if args.out:
                write_json(args.out, report)
            print(format_report(report))
            return 0
        if args.stage == "render":
            res = render_episode(args.tracker, args.episode, args.out, args.view, args.stride)
            print(json.dumps({"strip": res["strip"], "mean_l2": res["mean_l2"]}))
            return 0
        if args.stage == "all":
            run_all(args, root)
            return 0
        if args.stage == "eval":
            from .policy import load_policy

            # a missing checkpoint is reported by run_stage with the stage that makes it
            fallback = load_policy(args.policy).config if Path(args.policy).exists() else None
            cfg = resolve_config(args, fallback=fallback)
            rec = run_stage(
                "eval", cfg, root, args.force,
                policy=args.policy,
                episodes=args.episodes or cfg.eval.episodes,
                seed=cfg.seed,
                out=args.out or str(Path(args.policy).with_suffix(".eval.json")),
            )
            _report(rec)
            for out in rec.outputs:
                print(Path(out).read_text())
            return 0
        cfg = resolve_config(args)
        if args.stage == "gen-data":
            rec = run_stage("gen-data", cfg, root, args.force, out=args.out or str(root / "data"))
        elif args.stage == "annotate":
            rec = run_stage("annotate", cfg, root, args.force, data=args.data or str(root / "data"), workers=args.workers)
        elif args.stage == "train-tracker":
            rec = run_stage("train-tracker", cfg, root, args.force, data=args.data or str(root / "data"), out=args.out or str(root / "tracker.pt"))
        elif args.stage == "train-policy":
            trk = _split(args.tracker) or None
            rec = run_stage(
                "train-policy", cfg, root, args.force,
                demos=args.demos or str(root / "data"),
                tracker=trk,
                variant=args.variant,
                out=args.out or str(root / f"policy_{args.variant}_s{cfg.seed}.pt"),
            )
        else:  # pragma: no cover - argparse restricts choices
            raise StageError(f"unknown stage {args.stage}")
        _report(rec)
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (StageError, ValueError, FileNotFoundError, RuntimeError) as e:
        print(f"{args.stage} failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
