"""Self-supervised point-track labels for action-free videos.

Pipeline per video: pick a query frame, track an n x n grid through the
whole video, drop grid points that never move, resample query points around
the movers and track those.
"""
from __future__ import annotations

import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import AnnotationConfig, config_hash
from .data_model import PointTrack, read_episode, read_manifest, write_episode

logger = logging.getLogger(__name__)

# (frames T x H x W x 3, query frame index, queries K x 2) -> (coords K x T x 2, visibility K x T)
Tracker = Callable[[np.ndarray, int, np.ndarray], tuple]


class TrackerContractError(RuntimeError):
    pass


def sample_grid_points(n_rows: int, n_cols: int) -> np.ndarray:
    """Cell centres of a uniform n_rows x n_cols partition of the unit square, row-major."""
    if n_rows < 1 or n_cols < 1:
        raise ValueError(f"grid needs at least one row and column, got {n_rows}x{n_cols}")
    ys = (np.arange(n_rows) + 0.5) / n_rows
    xs = (np.arange(n_cols) + 0.5) / n_cols
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=-1)


def motion_variance(track, mode: str = "axis_sum") -> float:
    """Population variance of positions over time, summed over x and y.

    ``mode="displacement"`` instead uses the variance of the distance to the
    first position.
    """
    coords = np.asarray(getattr(track, "coords", track), dtype=np.float64).reshape(-1, 2)
    if mode == "axis_sum":
        return float(coords.var(axis=0).sum())
    if mode == "displacement":
        return float(np.linalg.norm(coords - coords[0], axis=1).var())
    raise ValueError(f"unknown variance mode {mode!r}")


def filter_static_points(tracks, var_threshold: float, mode: str = "axis_sum") -> np.ndarray:
    """Indices of tracks whose motion variance strictly exceeds the threshold."""
    v = np.array([motion_variance(t, mode) for t in tracks])
    return np.flatnonzero(v > var_threshold)


def _near_square(k: int) -> tuple[int, int]:
    rows = int(np.floor(np.sqrt(k)))
    while k % rows:
        rows -= 1
    return rows, k // rows


def resample_around(kept_points, num_points: int, radius: float, rng) -> tuple[np.ndarray, bool]:
    """Draw query points uniformly in discs of `radius` around kept points.

    Returns (points, used_fallback).  With no kept points the result is a
    uniform grid over the frame and `used_fallback` is True.
    """
    rng = np.random.default_rng(rng)
    kept = np.asarray(kept_points, dtype=np.float64).reshape(-1, 2)
    if len(kept) == 0:
        logger.warning("no moving points survived filtering; falling back to a uniform grid")
        return sample_grid_points(*_near_square(num_points)), True
    centres = kept[rng.integers(len(kept), size=num_points)]
    angle = rng.uniform(0, 2 * np.pi, size=num_points)
    r = radius * np.sqrt(rng.uniform(0, 1, size=num_points))
    offsets = np.stack([np.cos(angle), np.sin(angle)], axis=-1) * r[:, None]
    return np.clip(centres + offsets, 0.0, 1.0), False


def _check_tracker_output(out, num_queries: int, T: int, query_t: int, queries: np.ndarray):
    try:
        coords, vis = out
        coords = np.asarray(coords, dtype=np.float64)
        vis = np.asarray(vis, dtype=bool)
    except (TypeError, ValueError) as e:
        raise TrackerContractError(f"tracker returned {type(out).__name__}, expected (coords, visibility)") from e
    if coords.shape != (num_queries, T, 2):
        raise TrackerContractError(f"coords shape {coords.shape}, expected {(num_queries, T, 2)}")
    if vis.shape != (num_queries, T):
        raise TrackerContractError(f"visibility shape {vis.shape}, expected {(num_queries, T)}")
    if not np.all(np.isfinite(coords)):
        raise TrackerContractError("non-finite track coordinates")
    if np.abs(coords[:, query_t] - queries).max(initial=0.0) > 1e-6:
        raise TrackerContractError("tracker output at the query frame does not match the query points")
    return coords, vis


@dataclass
class VideoAnnotation:
    tracks: list
    query_t: int
    fallback: bool
    num_kept: int


def annotate_video(frames, tracker: Tracker, config: AnnotationConfig, rng) -> VideoAnnotation:
    frames = np.asarray(frames)
    T = len(frames)
    if T < 2:
        raise ValueError(f"annotation needs at least 2 frames, got {T}")
    rng = np.random.default_rng(rng)
    query_t = int(rng.integers(T))

    grid = sample_grid_points(config.grid_size, config.grid_size)
    coords, _ = _check_tracker_output(tracker(frames, query_t, grid), len(grid), T, query_t, grid)
    kept = filter_static_points(coords, config.var_threshold, config.variance_mode)

    queries, fallback = resample_around(grid[kept], config.num_points, config.radius, rng)
    coords, vis = _check_tracker_output(
        tracker(frames, query_t, queries), len(queries), T, query_t, queries
    )
    coords = np.clip(coords, 0.0, 1.0)
    tracks = [PointTrack(k, c, v) for k, (c, v) in enumerate(zip(coords, vis))]
    return VideoAnnotation(tracks, query_t, fallback, len(kept))


# dataset level -------------------------------------------------------------


@dataclass
class AnnotationReport:
    processed: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    failed: dict = field(default_factory=dict)  # episode path -> error message

    @property
    def ok(self) -> bool:
        return not self.failed

    def merge(self, other: "AnnotationReport") -> None:
        self.processed += other.processed
        self.skipped += other.skipped
        self.failed.update(other.failed)

    def to_dict(self) -> dict:
        return {
            "processed": len(self.processed),
            "skipped": len(self.skipped),
            "failed": dict(self.failed),
        }


def annotation_hash(config: AnnotationConfig, seed: int) -> str:
    import dataclasses

    return config_hash({"annotation": dataclasses.asdict(config), "seed": seed})


def episode_seed(seed: int, rel_path: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(rel_path.encode())]).generate_state(1)[0])


def oracle_tracker_factory(episode, view: str):
    """Builds the analytic tracker from world states stored with a synthetic episode."""
    from .synthetic_env import OracleTracker, env_from_metadata, states_from_episode

    if episode.states is None:
        raise TrackerContractError("episode has no stored world states for the oracle tracker")
    return OracleTracker(states_from_episode(episode), view, env_from_metadata(episode.metadata))


class ExternalTrackerAdapter:
    """Slot for a learned point tracker; not shipped."""

    def __init__(self, *args, **kwargs):
        raise NotImplementedError("no external tracker is bundled; pass a callable obeying the Tracker contract")


def _annotate_one(args) -> AnnotationReport:
    root, rel, tracker_factory, config, seed, chash, force = args
    report = AnnotationReport()
    path = Path(root) / rel
    try:
        ep = read_episode(path)
        if not force and ep.metadata.get("annotation", {}).get("config_hash") == chash and ep.tracks:
            report.skipped.append(rel)
            return report
        ep_seed = episode_seed(seed, rel)
        rng = np.random.default_rng(ep_seed)
        info = {"config_hash": chash, "seed": ep_seed, "views": {}}
        for view in sorted(ep.views):
            ann = annotate_video(ep.views[view], tracker_factory(ep, view), config, rng)
            ep.tracks[view] = ann.tracks
            info["views"][view] = {
                "query_t": ann.query_t,
                "fallback_grid": ann.fallback,
                "num_kept": ann.num_kept,
            }
        ep.metadata["annotation"] = info
        write_episode(ep, path)
        report.processed.append(rel)
    except Exception as e:  # collected into the report; the stage exits nonzero
        logger.error("annotation failed for %s: %s", rel, e)
        report.failed[rel] = f"{type(e).__name__}: {e}"
    return report


def annotate_dataset(
    root,
    config: AnnotationConfig,
    seed: int = 0,
    tracker_factory=oracle_tracker_factory,
    kinds: tuple = ("video", "demo"),
    force: bool = False,
    workers: int = 1,
) -> AnnotationReport:
    """Annotate every episode of a dataset in place.

    Episodes already annotated under the same config hash are skipped.
    """
    manifest = read_manifest(root)
    chash = annotation_hash(config, seed)
    rels = [e["path"] for e in manifest.episodes if e["kind"] in kinds]
    jobs = [(str(root), rel, tracker_factory, config, seed, chash, force) for rel in rels]
    report = AnnotationReport()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            for r in pool.map(_annotate_one, jobs):
                report.merge(r)
    else:
        for job in jobs:
            report.merge(_annotate_one(job))
    logger.info("annotation: %s", report.to_dict())
    return report
