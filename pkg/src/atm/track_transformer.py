"""Track transformer: predicts H future positions of arbitrary query points.

Inputs are one frame, the query points and a language embedding.  Future
track positions are replaced by a learned mask value before encoding, so the
model only ever sees the current position of each point.  During training a
fraction of image patches is replaced by a mask token and reconstructed as an
auxiliary objective.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .config import TrackerConfig, TrainConfig
from .data_model import hash_directory, read_episode, read_manifest
from .layers import (
    Transformer,
    check_finite,
    color_jitter,
    cosine_with_warmup,
    fourier_features,
    make_optimizer,
    masked_mse,
    patchify,
    random_shift,
    seed_everything,
    to_float_images,
)
from .text import HashingTextEncoder

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "atm-track-transformer/1"

MODALITY_IMAGE, MODALITY_TRACK, MODALITY_LANG = 0, 1, 2


def num_masked(num_patches: int, ratio: float) -> int:
    return int(np.floor(ratio * num_patches + 0.5))


def mask_patches(num_patches: int, ratio: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Uniformly choose round(ratio * P) patches to mask.  Returns (kept, masked) index arrays."""
    if not 0 <= ratio <= 1:
        raise ValueError(f"mask ratio must be in [0, 1], got {ratio}")
    rng = np.random.default_rng(rng)
    perm = rng.permutation(num_patches)
    n = num_masked(num_patches, ratio)
    return np.sort(perm[n:]), np.sort(perm[:n])


def random_patch_mask(batch: int, num_patches: int, ratio: float, generator=None) -> torch.Tensor:
    """(B, P) bool, True for masked patches; exactly round(ratio * P) per row."""
    n = num_masked(num_patches, ratio)
    order = torch.rand(batch, num_patches, generator=generator).argsort(dim=1)
    mask = torch.zeros(batch, num_patches, dtype=torch.bool)
    mask.scatter_(1, order[:, :n], True)
    return mask


class TrackTransformer(nn.Module):
    def __init__(
        self,
        image_size: int = 64,
        image_patch_size: int = 8,
        track_length: int = 16,
        track_patch_size: int = 4,
        dim: int = 128,
        depth: int = 4,
        heads: int = 4,
        mlp_ratio: float = 2.0,
        lang_dim: int = 32,
        point_freqs: int = 4,
        local_radius: int = 2,
    ):
        super().__init__()
        if track_length % track_patch_size:
            raise ValueError("track_length must be divisible by track_patch_size")
        self.image_size = image_size
        self.image_patch_size = image_patch_size
        self.track_length = track_length
        self.track_patch_size = track_patch_size
        self.point_freqs = point_freqs
        self.local_radius = local_radius
        self.num_patches = (image_size // image_patch_size) ** 2
        self.tokens_per_track = track_length // track_patch_size
        patch_dim = image_patch_size**2 * 3

        self.patch_embed = nn.Linear(patch_dim, dim)
        self.img_pos_embed = nn.Parameter(torch.randn(self.num_patches, dim) * 0.02)
        self.img_coord_embed = nn.Linear(4 * point_freqs + 2, dim)
        n = image_size // image_patch_size
        centres = (torch.stack(torch.meshgrid(torch.arange(n), torch.arange(n), indexing="xy"), -1).reshape(-1, 2) + 0.5) / n
        self.register_buffer("patch_centres", centres, persistent=False)
        self.register_buffer("future_steps", (torch.arange(track_length) > 0).float()[:, None], persistent=False)
        self.img_mask_token = nn.Parameter(torch.zeros(dim))
        self.track_mask_value = nn.Parameter(torch.zeros(2))
        self.track_embed = nn.Linear(track_patch_size * 2, dim)
        self.track_time_embed = nn.Parameter(torch.randn(self.tokens_per_track, dim) * 0.02)
        self.point_embed = nn.Linear(4 * point_freqs + 2, dim)
        # colours sampled on a (2r+1)^2 pixel neighbourhood around each query point
        self.local_embed = nn.Linear(3 * (2 * local_radius + 1) ** 2, dim)
        self.lang_embed = nn.Linear(lang_dim, dim)
        self.modality_embed = nn.Parameter(torch.randn(3, dim) * 0.02)
        self.encoder = Transformer(dim, depth, heads, mlp_ratio)
        self.track_head = nn.Linear(dim, track_patch_size * 2)
        self.img_head = nn.Linear(dim, patch_dim)

    def coord_features(self, xy: torch.Tensor) -> torch.Tensor:
        return torch.cat([fourier_features(xy, self.point_freqs), xy], dim=-1)

    def local_appearance(self, frames: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
        """Bilinear colour samples around each point: frames (B, H, W, 3), points (B, K, 2) -> (B, K, D)."""
        B, H, W, _ = frames.shape
        r = self.local_radius
        off = torch.arange(-r, r + 1, dtype=points.dtype)
        oy, ox = torch.meshgrid(off, off, indexing="ij")
        off = torch.stack([ox.reshape(-1) * 2 / W, oy.reshape(-1) * 2 / H], -1)  # pixels -> [-1, 1] units
        grid = (points * 2 - 1)[:, :, None] + off  # (B, K, n, 2)
        img = frames.permute(0, 3, 1, 2)
        smp = nn.functional.grid_sample(img, grid, mode="bilinear", padding_mode="border", align_corners=False)
        return self.local_embed(smp.permute(0, 2, 3, 1).reshape(B, points.shape[1], -1))

    def tokenize_tracks(self, tracks: torch.Tensor, frames=None) -> torch.Tensor:
        """(B, K, H, 2) tracks -> (B, K * H/ps, D) tokens with every future step masked out."""
        B, K, H, _ = tracks.shape
        if H != self.track_length:
            raise ValueError(f"track length {H} != model track length {self.track_length}")
        current = tracks[:, :, :1]
        masked = torch.cat([current, self.track_mask_value.to(tracks.dtype).expand(B, K, H - 1, 2)], dim=2)
        patches = masked.reshape(B, K, self.tokens_per_track, self.track_patch_size * 2)
        point_id = self.point_embed(self.coord_features(current[:, :, 0]))
        if frames is not None:
            point_id = point_id + self.local_appearance(frames, current[:, :, 0])
        tok = (
            self.track_embed(patches)
            + self.track_time_embed
            + point_id[:, :, None]
            + self.modality_embed[MODALITY_TRACK]
        )
        return tok.reshape(B, K * self.tokens_per_track, -1)

    def forward(self, frames, tracks, lang, mask_ratio: float = 0.0, generator=None) -> dict:
        """frames (B, H, W, 3) in [0, 1]; tracks (B, K, 2) query points or (B, K, H, 2) full tracks."""
        if tracks.dim() == 3:
            tracks = tracks[:, :, None].expand(-1, -1, self.track_length, -1)
        B, K = tracks.shape[:2]
        patches = patchify(frames, self.image_patch_size)
        img = self.patch_embed(patches)
        mask = None
        if mask_ratio > 0:
            mask = random_patch_mask(B, self.num_patches, mask_ratio, generator)
            img = torch.where(mask[..., None], self.img_mask_token.to(img.dtype).expand_as(img), img)
        pos = self.img_pos_embed + self.img_coord_embed(self.coord_features(self.patch_centres.to(img.dtype)))
        img = img + pos + self.modality_embed[MODALITY_IMAGE]
        trk = self.tokenize_tracks(tracks, frames)
        lng = (self.lang_embed(lang) + self.modality_embed[MODALITY_LANG])[:, None]
        x = self.encoder(torch.cat([img, trk, lng], dim=1))

        P = self.num_patches
        out = self.track_head(x[:, P : P + trk.shape[1]])
        # the current position is given, so only future steps carry a predicted offset
        delta = out.reshape(B, K, self.track_length, 2) * self.future_steps.to(out.dtype)
        return {
            "tracks": tracks[:, :, :1] + delta,
            "recon": self.img_head(x[:, :P]),
            "patches": patches,
            "mask": mask,
        }

    @torch.no_grad()
    def predict(self, frames, queries, lang) -> torch.Tensor:
        """Eval-mode prediction, (B, K, H, 2).  No image masking."""
        queries = torch.as_tensor(queries)
        if queries.shape[-2] == 0:
            raise ValueError("at least one query point is required")
        if (queries < 0).any() or (queries > 1).any():
            raise ValueError("query points must lie in [0, 1]^2")
        was_training = self.training
        self.eval()
        try:
            dtype = self.patch_embed.weight.dtype
            return self(to_float_images(frames).to(dtype), queries.to(dtype), torch.as_tensor(lang).to(dtype))["tracks"]
        finally:
            self.train(was_training)


def loss_total(pred_tracks, true_tracks, recon=None, true_patches=None, patch_mask=None, img_weight=1.0, valid=None):
    """Track MSE plus weighted reconstruction MSE on masked patches only.

    `valid` (B, K, H) excludes padded (and optionally invisible) steps from the
    track term.  Returns (total, {"track": ..., "img": ...}).
    """
    track = masked_mse(pred_tracks, true_tracks, None if valid is None else valid[..., None])
    if recon is None or patch_mask is None or not bool(patch_mask.any()):
        img = torch.zeros((), dtype=track.dtype)
    else:
        img = masked_mse(recon, true_patches, patch_mask[..., None])
    total = track + img_weight * img
    return total, {"track": track.detach(), "img": img.detach()}


# data ----------------------------------------------------------------------


def track_window(coords, vis, t: int, horizon: int):
    """Crop tracks (K, T, 2) to steps t..t+horizon-1, repeating the final position past the end.

    Returns (window (K, H, 2), visibility (K, H), in_range (H,)).
    """
    T = coords.shape[1]
    idx = np.arange(t, t + horizon)
    in_range = idx < T
    idx = np.minimum(idx, T - 1)
    return coords[:, idx], vis[:, idx], in_range


class TrackWindowDataset:
    """All (episode, start frame) windows of annotated episodes for one view."""

    def __init__(self, episodes, view: str, horizon: int, text_encoder, mask_invisible: bool = False):
        self.view = view
        self.horizon = horizon
        self.mask_invisible = mask_invisible
        self.frames, self.coords, self.vis, self.lang = [], [], [], []
        for ep in episodes:
            coords, vis, _ = ep.track_arrays(view)
            if coords.size == 0:
                raise ValueError(f"episode {ep.instruction!r} has no tracks for view {view!r}; annotate first")
            self.frames.append(np.asarray(ep.views[view]))
            self.coords.append(coords.astype(np.float32))
            self.vis.append(vis)
            self.lang.append(text_encoder.encode(ep.instruction))
        self.index = [(e, t) for e, f in enumerate(self.frames) for t in range(len(f))]

    def __len__(self) -> int:
        return len(self.index)

    def batch(self, ids) -> dict:
        frames, tracks, valid, lang = [], [], [], []
        for i in ids:
            e, t = self.index[i]
            w, v, in_range = track_window(self.coords[e], self.vis[e], t, self.horizon)
            ok = np.broadcast_to(in_range, v.shape)
            if self.mask_invisible:
                ok = ok & v
            frames.append(self.frames[e][t])
            tracks.append(w)
            valid.append(ok)
            lang.append(self.lang[e])
        return {
            "frames": torch.from_numpy(np.stack(frames)),
            "tracks": torch.from_numpy(np.stack(tracks)),
            "valid": torch.from_numpy(np.stack(valid)),
            "lang": torch.from_numpy(np.stack(lang)),
        }


def augment_batch(frames: torch.Tensor, tracks: torch.Tensor, config: TrainConfig, generator=None):
    """Colour jitter plus random shift; track targets move with the image content."""
    aug = config.augment
    H, W = frames.shape[1:3]
    frames, shifts = random_shift(frames, aug.shift_pad, generator)
    frames = color_jitter(frames, aug.brightness, aug.contrast, aug.saturation, generator)
    offset = shifts.to(tracks.dtype) / torch.tensor([W, H], dtype=tracks.dtype)
    return frames, tracks + offset[:, None, None, :]


# training ------------------------------------------------------------------


def build_model(tcfg: TrackerConfig, image_size: int) -> TrackTransformer:
    return TrackTransformer(
        image_size=image_size,
        image_patch_size=tcfg.image_patch_size,
        track_length=tcfg.track_length,
        track_patch_size=tcfg.track_patch_size,
        dim=tcfg.dim,
        depth=tcfg.depth,
        heads=tcfg.heads,
        mlp_ratio=tcfg.mlp_ratio,
        lang_dim=tcfg.lang_dim,
    )


def split_episodes(paths: list, val_fraction: float, seed: int) -> tuple[list, list]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(paths))
    n_val = max(1, int(round(val_fraction * len(paths)))) if len(paths) > 1 and val_fraction > 0 else 0
    val = sorted(paths[i] for i in order[:n_val])
    train = sorted(paths[i] for i in order[n_val:])
    return train, val


@torch.no_grad()
def evaluate_loss(model, dataset: TrackWindowDataset, tcfg: TrackerConfig, seed: int, batch_size: int = 256) -> dict:
    """Deterministic validation loss: fixed order, fixed mask draws, no augmentation."""
    model.eval()
    g = torch.Generator().manual_seed(seed)
    totals = {"loss": 0.0, "track": 0.0, "img": 0.0}
    n = 0
    for start in range(0, len(dataset), batch_size):
        ids = list(range(start, min(start + batch_size, len(dataset))))
        b = dataset.batch(ids)
        out = model(to_float_images(b["frames"]), b["tracks"], b["lang"], tcfg.image_mask_ratio, g)
        loss, parts = loss_total(
            out["tracks"], b["tracks"], out["recon"], out["patches"], out["mask"], tcfg.img_loss_weight, b["valid"]
        )
        totals["loss"] += float(loss) * len(ids)
        totals["track"] += float(parts["track"]) * len(ids)
        totals["img"] += float(parts["img"]) * len(ids)
        n += len(ids)
    model.train()
    return {k: v / max(n, 1) for k, v in totals.items()}


@dataclass
class TrackerBundle:
    """Frozen per-view track transformers plus the text encoder they were trained with."""

    models: dict
    config: TrainConfig
    text_encoder: HashingTextEncoder
    meta: dict

    def model_for(self, view: str) -> TrackTransformer:
        return self.models[view] if view in self.models else self.models["*"]

    @torch.no_grad()
    def predict(self, view: str, frames, queries, instruction_or_lang) -> torch.Tensor:
        if isinstance(instruction_or_lang, str):
            lang = self.text_encoder.encode(instruction_or_lang)[None].repeat(len(frames), 0)
        else:
            lang = np.asarray(instruction_or_lang)
        return self.model_for(view).predict(frames, queries, lang)


def save_tracker(path, models: dict, config: TrainConfig, meta: dict) -> None:
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "config": config.to_dict(),
            "state_dicts": {v: m.state_dict() for v, m in models.items()},
            "meta": meta,
        },
        path,
    )


def load_tracker(path) -> TrackerBundle:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a track transformer checkpoint")
    cfg = TrainConfig.from_dict(ckpt["config"])
    models = {}
    for view, sd in ckpt["state_dicts"].items():
        m = build_model(cfg.tracker, ckpt["meta"]["image_size"])
        m.load_state_dict(sd)
        m.eval()
        for p in m.parameters():
            p.requires_grad_(False)
        models[view] = m
    return TrackerBundle(models, cfg, HashingTextEncoder(cfg.tracker.lang_dim, cfg.seed), ckpt["meta"])


def train_track_transformer(dataset_dir, config: TrainConfig, out_path, metrics_path=None, views=None) -> dict:
    """Train one track transformer per view on the annotated action-free videos.

    Keeps the weights with the lowest validation loss.  Returns a summary with
    the best validation loss per view.
    """
    tcfg = config.tracker
    manifest = read_manifest(dataset_dir)
    video_paths = manifest.paths("video")
    if not video_paths:
        raise ValueError(f"{dataset_dir}: no action-free videos to train on")
    train_paths, val_paths = split_episodes(video_paths, tcfg.val_fraction, config.seed)
    train_eps = [read_episode(p) for p in train_paths]
    val_eps = [read_episode(p) for p in val_paths] or train_eps[:1]
    views = views or sorted(train_eps[0].views)
    image_size = train_eps[0].views[views[0]].shape[1]
    text = HashingTextEncoder(tcfg.lang_dim, config.seed)
    gen = seed_everything(config.seed)

    groups = [("*", views)] if tcfg.tie_view_weights else [(v, [v]) for v in views]
    best_models, summary = {}, {"views": {}}
    metrics_f = open(metrics_path, "a") if metrics_path else None
    try:
        for key, group_views in groups:
            train_sets = [TrackWindowDataset(train_eps, v, tcfg.track_length, text, tcfg.mask_invisible_loss) for v in group_views]
            val_sets = [TrackWindowDataset(val_eps, v, tcfg.track_length, text, tcfg.mask_invisible_loss) for v in group_views]
            model = build_model(tcfg, image_size)
            opt = make_optimizer(model, tcfg.lr, tcfg.weight_decay)
            flat = [(si, i) for si, ds in enumerate(train_sets) for i in range(len(ds))]
            per_epoch = len(flat)
            if tcfg.samples_per_episode:
                per_epoch = min(per_epoch, tcfg.samples_per_episode * len(train_eps) * len(group_views))
            steps_per_epoch = max(1, -(-per_epoch // tcfg.batch_size))
            sched = cosine_with_warmup(opt, tcfg.warmup_epochs * steps_per_epoch, tcfg.epochs * steps_per_epoch)
            best = {"val_loss": float("inf"), "epoch": -1}
            best_state = None
            for epoch in range(tcfg.epochs):
                t0 = time.time()
                model.train()
                order = torch.randperm(len(flat), generator=gen)[:per_epoch].tolist()
                run = {"loss": 0.0, "track": 0.0, "img": 0.0}
                seen = 0
                for s in range(steps_per_epoch):
                    chunk = [flat[i] for i in order[s * tcfg.batch_size : (s + 1) * tcfg.batch_size]]
                    if not chunk:
                        break
                    for si in sorted({c[0] for c in chunk}):
                        b = train_sets[si].batch([i for sj, i in chunk if sj == si])
                        frames = to_float_images(b["frames"])
                        tracks = b["tracks"]
                        if tcfg.augment:
                            frames, tracks = augment_batch(frames, tracks, config, gen)
                        out = model(frames, tracks, b["lang"], tcfg.image_mask_ratio, gen)
                        loss, parts = loss_total(
                            out["tracks"], tracks, out["recon"], out["patches"], out["mask"],
                            tcfg.img_loss_weight, b["valid"],
                        )
                        check_finite(loss, "train_track_transformer", epoch=epoch, step=s, **{k: float(v) for k, v in parts.items()})
                        opt.zero_grad()
                        loss.backward()
                        torch.nn.utils.clip_grad_norm_(model.parameters(), tcfg.clip_grad)
                        opt.step()
                        n = len(b["frames"])
                        run["loss"] += float(loss.detach()) * n
                        run["track"] += float(parts["track"]) * n
                        run["img"] += float(parts["img"]) * n
                        seen += n
                    sched.step()
                val = [evaluate_loss(model, ds, tcfg, config.seed + 1) for ds in val_sets]
                val_loss = float(np.mean([v["loss"] for v in val]))
                check_finite(torch.tensor(val_loss), "validation", epoch=epoch)
                rec = {
                    "stage": "train-tracker",
                    "view": key,
                    "epoch": epoch,
                    "train_loss": run["loss"] / max(seen, 1),
                    "train_track_loss": run["track"] / max(seen, 1),
                    "train_img_loss": run["img"] / max(seen, 1),
                    "val_loss": val_loss,
                    "val_track_loss": float(np.mean([v["track"] for v in val])),
                    "val_img_loss": float(np.mean([v["img"] for v in val])),
                    "lr": opt.param_groups[0]["lr"],
                    "seconds": round(time.time() - t0, 3),
                }
                logger.info(json.dumps(rec))
                if metrics_f:
                    metrics_f.write(json.dumps(rec) + "\n")
                    metrics_f.flush()
                if val_loss < best["val_loss"]:
                    best = {"val_loss": val_loss, "epoch": epoch}
                    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            model.load_state_dict(best_state)
            model.eval()
            best_models[key] = model
            summary["views"][key] = best
    finally:
        if metrics_f:
            metrics_f.close()

    meta = {
        "image_size": image_size,
        "views": views,
        "dataset_hash": hash_directory(dataset_dir, exclude=("runs",)),
        "train_episodes": [str(Path(p).name) for p in train_paths],
        "val_episodes": [str(Path(p).name) for p in val_paths],
        "best": summary["views"],
    }
    save_tracker(out_path, best_models, config, meta)
    summary["checkpoint"] = str(out_path)
    return summary


def validation_loss_from_checkpoint(path, dataset_dir) -> dict:
    """Recompute the stored validation loss of a tracker checkpoint."""
    bundle = load_tracker(path)
    tcfg = bundle.config.tracker
    root = Path(dataset_dir)
    val_eps = [read_episode(root / "episodes" / n) for n in bundle.meta["val_episodes"]]
    out = {}
    for key, model in bundle.models.items():
        views = bundle.meta["views"] if key == "*" else [key]
        losses = [
            evaluate_loss(model, TrackWindowDataset(val_eps, v, tcfg.track_length, bundle.text_encoder, tcfg.mask_invisible_loss), tcfg, bundle.config.seed + 1)["loss"]
            for v in views
        ]
        out[key] = float(np.mean(losses))
    return out


@torch.no_grad()
def track_error(model: TrackTransformer, episodes, view: str, text_encoder, horizon=None, stride: int = 1) -> float:
    """Mean per-step L2 distance between predicted and stored (oracle) tracks.

    Every `stride`-th frame of each episode is used as a query frame with the
    annotated points at that frame as queries; steps past the episode end are
    ignored.
    """
    horizon = horizon or model.track_length
    total, count = 0.0, 0
    for ep in episodes:
        coords, vis, _ = ep.track_arrays(view)
        lang = text_encoder.encode(ep.instruction)
        T = coords.shape[1]
        ts = list(range(0, T, stride))
        frames = np.stack([ep.views[view][t] for t in ts])
        windows = [track_window(coords, vis, t, model.track_length) for t in ts]
        truth = torch.from_numpy(np.stack([w[0] for w in windows]))
        in_range = torch.from_numpy(np.stack([w[2] for w in windows]))
        pred = model.predict(frames, truth[:, :, 0], np.repeat(lang[None], len(ts), 0)).to(truth.dtype)
        err = torch.linalg.norm(pred - truth, dim=-1)[:, :, :horizon]  # (B, K, H)
        m = in_range[:, None, :horizon].expand_as(err)
        total += float(err[m].sum())
        count += int(m.sum())
    return total / max(count, 1)
