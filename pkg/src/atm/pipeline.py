"""Stage orchestration, the run ledger, variant comparison and track overlays.

Every stage appends a RunRecord to ``<root>/runs.jsonl``.  A stage whose key
(stage, relevant config sections, seed, arguments and input content hashes)
matches an earlier record whose outputs are unchanged on disk is skipped as
up to date.
"""
from __future__ import annotations

import colorsys
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig, config_hash, save_config
from .data_model import denormalize_coords, hash_directory, read_manifest

logger = logging.getLogger(__name__)

LEDGER_NAME = "runs.jsonl"
EVAL_SCHEMA = "atm-eval/1"
COMPARE_SCHEMA = "atm-compare/1"
DATA_ROOT_ENV = "ATM_DATA_ROOT"

# config sections that influence each stage
STAGE_SECTIONS = {
    "gen-data": ("data", "env"),
    "annotate": ("annotation",),
    "train-tracker": ("tracker", "augment"),
    "train-policy": ("policy", "augment"),
    "eval": ("eval", "env", "data"),
}
PRODUCER = {
    "data": "gen-data",
    "annotations": "annotate",
    "tracker": "train-tracker",
    "policy": "train-policy",
    "eval": "eval",
}


class StageError(RuntimeError):
    """A stage could not run or failed; the CLI exits with status 1."""


class UpstreamMissingError(StageError):
    pass


def data_root(default=".") -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, default))


def content_hash(path) -> str:
    path = Path(path)
    if path.is_dir():
        return hash_directory(path, exclude=("runs",))
    if path.is_file():
        return hashlib.sha256(path.read_bytes()).hexdigest()
    return ""


@dataclass
class RunRecord:
    stage: str
    config_hash: str
    key: str
    seed: int
    inputs: dict  # path -> content hash at run time
    outputs: dict  # path -> content hash after the run
    wall_time: float
    metrics: dict = field(default_factory=dict)
    status: str = "ok"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def read_ledger(root) -> list[RunRecord]:
    path = Path(root) / LEDGER_NAME
    if not path.exists():
        return []
    return [RunRecord(**json.loads(line)) for line in path.read_text().splitlines() if line.strip()]


def append_ledger(root, record: RunRecord) -> None:
    Path(root).mkdir(parents=True, exist_ok=True)
    with open(Path(root) / LEDGER_NAME, "a") as f:
        f.write(record.to_json() + "\n")


def provenance(root, artifact) -> list[RunRecord]:
    """Chain of records that produced `artifact`, most recent producer first."""
    records = read_ledger(root)
    chain, wanted = [], {str(Path(artifact))}
    for rec in reversed(records):
        if rec.status == "ok" and wanted & set(rec.outputs):
            chain.append(rec)
            wanted = set(rec.inputs) - set(rec.outputs)
            if not wanted:
                break
    return chain


def _stage_key(stage: str, config: TrainConfig, args: dict, input_hashes: dict) -> tuple[str, str]:
    d = config.to_dict()
    sections = {s: d[s] for s in STAGE_SECTIONS[stage]}
    chash = config_hash({"stage": stage, "seed": config.seed, **sections})
    key = config_hash({"config": chash, "args": args, "inputs": input_hashes})
    return chash, key


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        producer = PRODUCER[what.rstrip("0123456789")]
        raise UpstreamMissingError(f"missing {what} at {path}; run `atm {producer}` first")
    return path


def _check_annotated(data_dir: Path) -> None:
    manifest = read_manifest(data_dir)
    for p in manifest.paths("video")[:1] + manifest.paths("demo")[:1]:
        meta = json.loads((p / "meta.json").read_text())
        if "annotation" not in meta.get("metadata", {}):
            raise UpstreamMissingError(f"{data_dir} is not annotated; run `atm annotate` first")


def run_stage(stage: str, config: TrainConfig, root, force: bool = False, **args) -> RunRecord:
    """Run one pipeline stage with upstream checks, idempotence and ledgering.

    Stage arguments (paths are taken as given):
      gen-data:      out
      annotate:      data, workers
      train-tracker: data, out
      train-policy:  demos, tracker (list or None), variant, out
      eval:          policy, episodes, seed, out
    """
    root = Path(root)
    inputs, outputs = _stage_io(stage, args)
    for what, p in inputs.items():
        _require(p, what)
    if stage in ("train-tracker",):
        _check_annotated(Path(args["data"]))
    out_paths = {str(p) for p in outputs}
    # a dataset is hashed as a whole so re-annotation invalidates downstream stages
    input_hashes = {
        str(p): content_hash(p.parent if p.name == "manifest.json" else p)
        for p in inputs.values()
        if not any(str(p) == o or Path(o) in Path(p).parents for o in out_paths)
    }
    key_args = {k: (str(v) if isinstance(v, Path) else v) for k, v in args.items() if k != "workers"}
    chash, key = _stage_key(stage, config, key_args, input_hashes)

    if not force:
        for rec in reversed(read_ledger(root)):
            if rec.key == key and rec.status == "ok":
                if all(content_hash(p) == h for p, h in rec.outputs.items()):
                    logger.info("%s: up to date (config %s)", stage, chash)
                    return RunRecord(**{**asdict(rec), "status": "up to date"})
                break
        existing = [p for p in outputs if Path(p).exists() and stage != "annotate"]
        if existing:
            raise StageError(f"{stage}: output {existing[0]} exists and is not up to date; pass --force to overwrite")

    t0 = time.time()
    metrics = _execute(stage, config, args, force)
    wall = time.time() - t0
    out_hashes = {str(p): content_hash(p) for p in outputs}
    rec = RunRecord(stage, chash, key, config.seed, {str(p): h for p, h in input_hashes.items()}, out_hashes, round(wall, 3), metrics)
    append_ledger(root, rec)
    return rec


def _stage_io(stage: str, a: dict) -> tuple[dict, list]:
    if stage == "gen-data":
        return {}, [Path(a["out"])]
    if stage == "annotate":
        return {"data": Path(a["data"]) / "manifest.json"}, [Path(a["data"])]
    if stage == "train-tracker":
        return {"data": Path(a["data"]) / "manifest.json"}, [Path(a["out"])]
    if stage == "train-policy":
        ins = {"data": Path(a["demos"]) / "manifest.json"}
        for i, t in enumerate(a.get("tracker") or []):
            ins["tracker" if i == 0 else f"tracker{i}"] = Path(t)
        return ins, [Path(a["out"])]
    if stage == "eval":
        return {"policy": Path(a["policy"])}, [Path(a["out"])]
    raise StageError(f"unknown stage {stage!r}")


def _execute(stage: str, config: TrainConfig, a: dict, force: bool) -> dict:
    if stage == "gen-data":
        import shutil

        from .synthetic_env import generate_datasets

        out = Path(a["out"])
        if out.exists():
            shutil.rmtree(out)
        m = generate_datasets(
            out,
            config.data.task_specs(),
            config.data.num_videos,
            config.data.num_demos,
            seed=config.seed,
            video_embodiment=config.data.video_embodiment,
            demo_embodiment=config.data.demo_embodiment,
            env_config=config.env,
        )
        save_config(config, out / "config.gen-data.json")
        return {"num_videos": m.num_videos, "num_demos": m.num_demos}
    if stage == "annotate":
        from .annotation import annotate_dataset

        report = annotate_dataset(a["data"], config.annotation, config.seed, force=force, workers=a.get("workers", 1))
        if not report.ok:
            raise StageError(f"annotation failed for {len(report.failed)} episode(s): {report.failed}")
        return report.to_dict()
    if stage == "train-tracker":
        from .track_transformer import train_track_transformer

        out = Path(a["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        save_config(config, str(out) + ".config.json")
        return train_track_transformer(a["data"], config, out, metrics_path=str(out) + ".metrics.jsonl")
    if stage == "train-policy":
        from .policy import train_policy

        out = Path(a["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        save_config(config, str(out) + ".config.json")
        return train_policy(a["demos"], config, a["variant"], out, a.get("tracker") or None, metrics_path=str(out) + ".metrics.jsonl")
    if stage == "eval":
        out = Path(a["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        result = evaluate_checkpoint(a["policy"], a["episodes"], a["seed"], config)
        write_json(out, result)
        return {"success_rate": result["success_rate"]}
    raise StageError(f"unknown stage {stage!r}")


def write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def evaluate_checkpoint(policy_path, episodes: int, seed: int, config: TrainConfig | None = None) -> dict:
    """Closed-loop evaluation of a policy checkpoint; returns the versioned metrics payload."""
    from .policy import evaluate_policy, load_policy

    pol = load_policy(policy_path)
    cfg = config or pol.config
    res = evaluate_policy(pol, cfg.data.task_specs(), episodes, seed, cfg)
    return {
        "schema": EVAL_SCHEMA,
        "policy": str(policy_path),
        "variant": pol.variant,
        "track_length": pol.track_length if pol.variant == "atm" else 0,
        "episodes_per_task": episodes,
        **res,
    }


# comparison ----------------------------------------------------------------


def _summary(evals: list) -> dict:
    tasks = list(evals[0]["per_task"])
    for e in evals[1:]:
        if list(e["per_task"]) != tasks:
            raise ValueError("eval outputs of one variant disagree on the task list")
    per_task = {}
    for t in tasks:
        rates = np.array([e["per_task"][t]["success_rate"] for e in evals])
        n = sum(e["per_task"][t]["episodes"] for e in evals)
        per_task[t] = {"mean": float(rates.mean()), "per_seed": rates.tolist(), "episodes": n}
    means = np.array([e["success_rate"] for e in evals])
    return {
        "tasks": tasks,
        "per_task": per_task,
        "mean": float(means.mean()),
        "per_seed": means.tolist(),
        "seeds": [e.get("seed") for e in evals],
        "episodes": sum(v["episodes"] for v in per_task.values()),
    }


def compare_variants(atm_evals: list, bc_evals: list) -> dict:
    """Per-task and mean success of ATM vs BC over seeds, with deltas."""
    if not atm_evals or not bc_evals:
        raise ValueError("need at least one eval output per variant")
    atm, bc = _summary(atm_evals), _summary(bc_evals)
    if atm["tasks"] != bc["tasks"]:
        raise ValueError(f"task lists differ: ATM {atm['tasks']} vs BC {bc['tasks']}")
    rows = []
    for t in atm["tasks"]:
        a, b = atm["per_task"][t]["mean"], bc["per_task"][t]["mean"]
        rows.append({"task": t, "atm": a, "bc": b, "delta": a - b})
    delta = atm["mean"] - bc["mean"]
    # binomial standard error of the difference of two pooled success rates
    se = float(np.sqrt(atm["mean"] * (1 - atm["mean"]) / atm["episodes"] + bc["mean"] * (1 - bc["mean"]) / bc["episodes"]))
    return {
        "schema": COMPARE_SCHEMA,
        "rows": rows,
        "atm_mean": atm["mean"],
        "bc_mean": bc["mean"],
        "delta": delta,
        "atm_per_seed": atm["per_seed"],
        "bc_per_seed": bc["per_seed"],
        "atm_seeds": atm["seeds"],
        "bc_seeds": bc["seeds"],
        "episodes": {"atm": atm["episodes"], "bc": bc["episodes"]},
        "confidence": (
            f"delta {delta:+.3f} with binomial standard error {se:.3f} over pooled episodes; "
            f"seed-to-seed spread ATM {np.ptp(atm['per_seed']):.3f}, BC {np.ptp(bc['per_seed']):.3f}"
        ),
    }


def format_report(report: dict) -> str:
    lines = [f"{'task':<32} {'ATM':>6} {'BC':>6} {'delta':>7}"]
    for r in report["rows"]:
        lines.append(f"{r['task']:<32} {r['atm']:>6.3f} {r['bc']:>6.3f} {r['delta']:>+7.3f}")
    lines.append(f"{'mean':<32} {report['atm_mean']:>6.3f} {report['bc_mean']:>6.3f} {report['delta']:>+7.3f}")
    lines.append(report["confidence"])
    return "\n".join(lines)


# visualisation -------------------------------------------------------------


def round_half_up(x) -> np.ndarray:
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


def point_colors(k: int) -> np.ndarray:
    """Distinct colour per point index, (k, 3) uint8."""
    return np.array(
        [[int(round(255 * c)) for c in colorsys.hsv_to_rgb(i / max(k, 1), 0.9, 1.0)] for i in range(k)],
        dtype=np.uint8,
    ).reshape(k, 3)


def _draw_polyline(img: np.ndarray, pts: np.ndarray, color) -> None:
    H, W = img.shape[:2]
    for p, q in zip(pts[:-1], pts[1:]):
        n = int(max(abs(q - p).max(), 1))
        seg = round_half_up(p[None] + (q - p)[None] * (np.arange(n + 1)[:, None] / n))
        ok = (seg[:, 0] >= 0) & (seg[:, 0] < W) & (seg[:, 1] >= 0) & (seg[:, 1] < H)
        img[seg[ok, 1], seg[ok, 0]] = color
    if len(pts) == 1:
        x, y = round_half_up(pts[0])
        if 0 <= x < W and 0 <= y < H:
            img[y, x] = color


def overlay_frames(frames, predicted, oracle=None) -> np.ndarray:
    """Draw per-frame track polylines.

    frames (T, H, W, 3) uint8; predicted / oracle (T, K, L, 2) normalised
    coordinates, the L-step track predicted at each frame.  Pixel positions
    are denormalised coordinates rounded half-up.  Oracle tracks are drawn
    first at half brightness, predictions on top.
    """
    frames = np.asarray(frames)
    T, H, W = frames.shape[:3]
    predicted = np.asarray(predicted, dtype=np.float64)
    if predicted.size == 0:
        return frames.copy()
    if len(predicted) != T:
        raise ValueError(f"{len(predicted)} predicted track sets for {T} frames")
    if oracle is not None:
        oracle = np.asarray(oracle, dtype=np.float64)
        if oracle.shape[:2] != predicted.shape[:2]:
            raise ValueError(f"oracle tracks {oracle.shape} do not align with predictions {predicted.shape}")
    K = predicted.shape[1]
    colors = point_colors(K)
    out = frames.copy()
    for t in range(T):
        for k in range(K):
            if oracle is not None:
                _draw_polyline(out[t], denormalize_coords(oracle[t, k], (W, H)), colors[k] // 2)
            _draw_polyline(out[t], denormalize_coords(predicted[t, k], (W, H)), colors[k])
    return out


def render_track_overlay(frames, predicted, out_dir, oracle=None, stem: str = "overlay", valid=None) -> dict:
    """Write overlay frames as PNGs plus a side-by-side strip.

    With oracle tracks the mean per-point L2 error is embedded in the file
    names and the per-point values are stored as PNG text metadata.
    """
    from PIL import Image
    from PIL.PngImagePlugin import PngInfo

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = np.asarray(frames)
    imgs = overlay_frames(frames, predicted, oracle)
    info = PngInfo()
    tag = ""
    per_point = None
    if oracle is not None and np.asarray(predicted).size:
        err = np.linalg.norm(np.asarray(predicted, np.float64) - np.asarray(oracle, np.float64), axis=-1)  # (T, K, L)
        if valid is not None:
            v = np.broadcast_to(np.asarray(valid, bool), err.shape)
            per_point = np.array([err[:, k][v[:, k]].mean() if v[:, k].any() else 0.0 for k in range(err.shape[1])])
        else:
            per_point = err.mean(axis=(0, 2))
        tag = f"_l2-{per_point.mean():.4f}"
        info.add_text("per_point_l2", json.dumps([round(float(x), 6) for x in per_point]))
    files = []
    for t, im in enumerate(imgs):
        p = out_dir / f"{stem}{tag}_t{t:04d}.png"
        Image.fromarray(im).save(p, pnginfo=info)
        files.append(str(p))
    strip = out_dir / f"{stem}{tag}_strip.png"
    Image.fromarray(np.concatenate(list(imgs), axis=1) if len(imgs) else np.zeros((1, 1, 3), np.uint8)).save(strip, pnginfo=info)
    return {
        "frames": files,
        "strip": str(strip),
        "mean_l2": None if per_point is None else float(per_point.mean()),
        "per_point_l2": None if per_point is None else per_point.tolist(),
    }


def render_episode(tracker_path, episode_path, out_dir, view: str = "agentview", stride: int = 4) -> dict:
    """Predicted vs oracle overlay for every `stride`-th frame of a stored, annotated episode."""
    import torch

    from .data_model import read_episode
    from .track_transformer import load_tracker, track_window

    bundle = load_tracker(tracker_path)
    ep = read_episode(episode_path)
    coords, vis, _ = ep.track_arrays(view)
    if coords.size == 0:
        raise StageError(f"{episode_path} has no tracks for view {view!r}; run `atm annotate` first")
    model = bundle.model_for(view)
    ts = list(range(0, ep.length, stride))
    wins = [track_window(coords, vis, t, model.track_length) for t in ts]
    truth = np.stack([w[0].astype(np.float32) for w in wins])  # (T', K, L, 2)
    in_range = np.stack([w[2] for w in wins])
    frames = np.stack([ep.views[view][t] for t in ts])
    lang = np.repeat(bundle.text_encoder.encode(ep.instruction)[None], len(ts), 0)
    pred = model.predict(frames, torch.from_numpy(truth[:, :, 0]), lang).numpy()
    return render_track_overlay(frames, pred, out_dir, oracle=truth, stem=Path(episode_path).name, valid=in_range[:, None, :])
