"""Episode types, coordinate conventions and the on-disk dataset format.

Layout of a dataset directory::

    DIR/manifest.json
    DIR/episodes/<episode_id>/meta.json
    DIR/episodes/<episode_id>/frames_<view>.npy      uint8   T x H x W x 3
    DIR/episodes/<episode_id>/tracks_<view>.npy      <f4     K x T x 2
    DIR/episodes/<episode_id>/visibility_<view>.npy  bool    K x T
    DIR/episodes/<episode_id>/actions.npy            <f4     T x A   (demos only)
    DIR/episodes/<episode_id>/proprio.npy            <f4     T x D_p (optional)
    DIR/episodes/<episode_id>/states.npy             <f8     T x D_s (synthetic env only)

Track coordinates are normalized to the unit interval per axis.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1


class EpisodeValidationError(ValueError):
    """An episode violates a type invariant; the message names the field."""


@dataclass
class PointTrack:
    point_id: int
    coords: np.ndarray  # T x 2
    visibility: np.ndarray  # T

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype="<f4").reshape(-1, 2)
        self.visibility = np.asarray(self.visibility, dtype=bool).reshape(-1)

    def __len__(self) -> int:
        return len(self.coords)

    def validate(self, name: str = "track", bounded: bool = True) -> None:
        if len(self.coords) < 1:
            raise EpisodeValidationError(f"{name}.coords: empty track")
        if len(self.coords) != len(self.visibility):
            raise EpisodeValidationError(
                f"{name}.visibility: length {len(self.visibility)} != coords length {len(self.coords)}"
            )
        if not np.all(np.isfinite(self.coords)):
            raise EpisodeValidationError(f"{name}.coords: non-finite value")
        if bounded and (self.coords.min() < 0 or self.coords.max() > 1):
            raise EpisodeValidationError(
                f"{name}.coords: value outside [0, 1] (min {self.coords.min():g}, max {self.coords.max():g})"
            )


def tracks_to_arrays(tracks: list[PointTrack]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(coords K x T x 2, visibility K x T, point ids K)."""
    if not tracks:
        return np.zeros((0, 0, 2), "<f4"), np.zeros((0, 0), bool), np.zeros(0, np.int64)
    coords = np.stack([t.coords for t in tracks])
    vis = np.stack([t.visibility for t in tracks])
    ids = np.array([t.point_id for t in tracks], dtype=np.int64)
    return coords, vis, ids


def tracks_from_arrays(coords, visibility, point_ids=None) -> list[PointTrack]:
    coords = np.asarray(coords)
    ids = range(len(coords)) if point_ids is None else point_ids
    return [PointTrack(int(i), c, v) for i, c, v in zip(ids, coords, visibility)]


@dataclass
class Episode:
    views: dict  # view name -> uint8 array T x H x W x 3
    instruction: str
    tracks: dict = field(default_factory=dict)  # view name -> list[PointTrack]
    actions: np.ndarray | None = None
    proprioception: np.ndarray | None = None
    embodiment_tag: str = "cursor"
    states: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.views = {k: np.asarray(v, dtype=np.uint8) for k, v in self.views.items()}
        if self.actions is not None:
            self.actions = np.asarray(self.actions, dtype="<f4")
        if self.proprioception is not None:
            self.proprioception = np.asarray(self.proprioception, dtype="<f4")
        if self.states is not None:
            self.states = np.asarray(self.states, dtype="<f8")

    @property
    def length(self) -> int:
        return len(next(iter(self.views.values())))

    @property
    def is_demo(self) -> bool:
        """Action-labeled episodes form the demo set; the rest are action-free videos."""
        return self.actions is not None

    @property
    def kind(self) -> str:
        return "demo" if self.is_demo else "video"

    def track_arrays(self, view: str):
        return tracks_to_arrays(self.tracks.get(view, []))

    def validate(self) -> None:
        if not self.views:
            raise EpisodeValidationError("views: episode has no views")
        lengths = {k: len(v) for k, v in self.views.items()}
        T = next(iter(lengths.values()))
        for k, v in self.views.items():
            if v.ndim != 4 or v.shape[-1] != 3:
                raise EpisodeValidationError(f"views[{k}]: expected T x H x W x 3, got {v.shape}")
            if len(v) != T:
                raise EpisodeValidationError(f"views[{k}]: length {len(v)} != {T} (views must share T)")
        if T < 1:
            raise EpisodeValidationError("views: T must be >= 1")
        for view, tracks in self.tracks.items():
            if view not in self.views:
                raise EpisodeValidationError(f"tracks[{view}]: no such view")
            for i, tr in enumerate(tracks):
                name = f"tracks[{view}][{i}]"
                tr.validate(name)
                if len(tr) != T:
                    raise EpisodeValidationError(f"{name}.coords: length {len(tr)} != T={T}")
        for name in ("actions", "proprioception", "states"):
            arr = getattr(self, name)
            if arr is None:
                continue
            if arr.ndim != 2 or len(arr) != T:
                raise EpisodeValidationError(f"{name}: expected T x D with T={T}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise EpisodeValidationError(f"{name}: non-finite value")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Episode):
            return NotImplemented
        if (self.instruction, self.embodiment_tag) != (other.instruction, other.embodiment_tag):
            return False
        if self.views.keys() != other.views.keys() or self.tracks.keys() != other.tracks.keys():
            return False
        if any(not np.array_equal(self.views[k], other.views[k]) for k in self.views):
            return False
        for k in self.tracks:
            a, b = self.track_arrays(k), other.track_arrays(k)
            if any(not np.array_equal(x, y) for x, y in zip(a, b)):
                return False
        for name in ("actions", "proprioception", "states"):
            x, y = getattr(self, name), getattr(other, name)
            if (x is None) != (y is None) or (x is not None and not np.array_equal(x, y)):
                return False
        return self.metadata == other.metadata


# coordinates ---------------------------------------------------------------


def normalize_coords(pixel_xy, image_size) -> np.ndarray:
    """Pixel (x, y) to unit coordinates; `image_size` is (width, height) or a square side."""
    w, h = _wh(image_size)
    p = np.asarray(pixel_xy, dtype=np.float64)
    return p / np.array([w, h], dtype=np.float64)


def denormalize_coords(unit_xy, image_size) -> np.ndarray:
    w, h = _wh(image_size)
    return np.asarray(unit_xy, dtype=np.float64) * np.array([w, h], dtype=np.float64)


def _wh(image_size) -> tuple[int, int]:
    if np.isscalar(image_size):
        w = h = image_size
    else:
        w, h = image_size
    if w < 1 or h < 1:
        raise ValueError(f"image dimensions must be >= 1, got {w}x{h}")
    return w, h


# storage -------------------------------------------------------------------


def _save(path: Path, arr: np.ndarray, dtype) -> None:
    np.save(path, np.ascontiguousarray(arr, dtype=dtype), allow_pickle=False)


def write_episode(episode: Episode, path) -> Path:
    """Write one episode directory.  Rejects episodes that violate invariants."""
    episode.validate()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "instruction": episode.instruction,
        "embodiment_tag": episode.embodiment_tag,
        "kind": episode.kind,
        "length": episode.length,
        "views": {k: list(v.shape) for k, v in episode.views.items()},
        "tracks": {},
        "action_dim": None if episode.actions is None else int(episode.actions.shape[1]),
        "proprio_dim": None if episode.proprioception is None else int(episode.proprioception.shape[1]),
        "has_states": episode.states is not None,
        "metadata": episode.metadata,
    }
    for k, v in episode.views.items():
        _save(path / f"frames_{k}.npy", v, np.uint8)
    for k, tracks in episode.tracks.items():
        coords, vis, ids = tracks_to_arrays(tracks)
        _save(path / f"tracks_{k}.npy", coords, "<f4")
        _save(path / f"visibility_{k}.npy", vis, bool)
        meta["tracks"][k] = {"point_ids": ids.tolist(), "shape": list(coords.shape)}
    for name, fname, dtype in (
        ("actions", "actions.npy", "<f4"),
        ("proprioception", "proprio.npy", "<f4"),
        ("states", "states.npy", "<f8"),
    ):
        arr = getattr(episode, name)
        target = path / fname
        if arr is not None:
            _save(target, arr, dtype)
        elif target.exists():
            target.unlink()
    tmp = path / "meta.json.tmp"
    tmp.write_text(json.dumps(meta, indent=1, sort_keys=True))
    os.replace(tmp, path / "meta.json")
    return path


def read_meta(path) -> dict:
    return json.loads((Path(path) / "meta.json").read_text())


def read_episode(path, load_frames: bool = True) -> Episode:
    path = Path(path)
    meta = read_meta(path)
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported schema version {meta.get('schema_version')}")
    views = {}
    for k, shape in meta["views"].items():
        if load_frames:
            views[k] = np.load(path / f"frames_{k}.npy")
        else:
            views[k] = np.load(path / f"frames_{k}.npy", mmap_mode="r")
    tracks = {}
    for k, info in meta["tracks"].items():
        coords = np.load(path / f"tracks_{k}.npy")
        vis = np.load(path / f"visibility_{k}.npy")
        tracks[k] = tracks_from_arrays(coords, vis, info["point_ids"])

    def opt(fname):
        f = path / fname
        return np.load(f) if f.exists() else None

    return Episode(
        views=views,
        instruction=meta["instruction"],
        tracks=tracks,
        actions=opt("actions.npy"),
        proprioception=opt("proprio.npy"),
        embodiment_tag=meta["embodiment_tag"],
        states=opt("states.npy"),
        metadata=meta["metadata"],
    )


@dataclass
class DatasetManifest:
    episodes: list  # records: {"path", "kind", "instruction", "embodiment_tag"}
    image_size: dict  # view -> [H, W]
    action_dim: int | None = None
    proprio_dim: int | None = None
    schema_version: int = SCHEMA_VERSION
    root: Path | None = None

    @property
    def num_videos(self) -> int:
        return sum(1 for e in self.episodes if e["kind"] == "video")

    @property
    def num_demos(self) -> int:
        return sum(1 for e in self.episodes if e["kind"] == "demo")

    def paths(self, kind: str | None = None) -> list[Path]:
        root = self.root or Path(".")
        return [root / e["path"] for e in self.episodes if kind is None or e["kind"] == kind]

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "num_videos": self.num_videos,
            "num_demos": self.num_demos,
            "image_size": self.image_size,
            "action_dim": self.action_dim,
            "proprio_dim": self.proprio_dim,
            "episodes": self.episodes,
        }

    def validate(self) -> None:
        d = self.to_dict()
        kinds = [e["kind"] for e in self.episodes]
        if d["num_videos"] != kinds.count("video") or d["num_demos"] != kinds.count("demo"):
            raise ValueError("manifest counts do not match episode records")
        for e in self.episodes:
            if e["kind"] not in ("video", "demo"):
                raise ValueError(f"episode {e['path']}: unknown kind {e['kind']!r}")


def write_manifest(manifest: DatasetManifest, root) -> Path:
    root = Path(root)
    manifest.validate()
    out = root / "manifest.json"
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest.to_dict(), indent=1, sort_keys=True))
    os.replace(tmp, out)
    return out


def read_manifest(root) -> DatasetManifest:
    root = Path(root)
    d = json.loads((root / "manifest.json").read_text())
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{root}: unsupported manifest schema {d.get('schema_version')}")
    m = DatasetManifest(
        episodes=d["episodes"],
        image_size=d["image_size"],
        action_dim=d["action_dim"],
        proprio_dim=d["proprio_dim"],
        root=root,
    )
    if (d["num_videos"], d["num_demos"]) != (m.num_videos, m.num_demos):
        raise ValueError(f"{root}/manifest.json: stored counts disagree with episode records")
    return m


def scan_dataset(root) -> DatasetManifest:
    """Rebuild a manifest from the episode directories on disk."""
    root = Path(root)
    records, image_size = [], {}
    action_dim = proprio_dim = None
    for meta_path in sorted((root / "episodes").glob("*/meta.json")):
        meta = json.loads(meta_path.read_text())
        ep_dir = meta_path.parent
        records.append(
            {
                "path": str(ep_dir.relative_to(root)),
                "kind": meta["kind"],
                "instruction": meta["instruction"],
                "embodiment_tag": meta["embodiment_tag"],
            }
        )
        for k, shape in meta["views"].items():
            image_size[k] = shape[1:3]
        action_dim = meta["action_dim"] or action_dim
        proprio_dim = meta["proprio_dim"] or proprio_dim
    return DatasetManifest(records, image_size, action_dim, proprio_dim, root=root)


def hash_directory(root, exclude: tuple = ()) -> str:
    """Content hash over every file below `root` (relative paths + bytes)."""
    root = Path(root)
    h = hashlib.sha256()
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = f.relative_to(root).as_posix()
        if any(rel == e or rel.startswith(e + "/") for e in exclude):
            continue
        h.update(rel.encode())
        h.update(b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()
