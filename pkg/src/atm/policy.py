"""Track-guided visuomotor policy and the language-conditioned BC baseline.

Each timestep of the frame stack is summarised by a spatial transformer over
image patches of every view, the predicted tracks (early fusion) and, for the
BC variant, a language token.  A causally masked temporal transformer turns the
per-step summaries into action tokens, and an MLP head regresses actions from
each action token concatenated with that step's tracks (late fusion).
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

from .annotation import sample_grid_points
from .config import PolicyConfig, TrainConfig
from .data_model import read_episode, read_manifest
from .layers import (
    Transformer,
    check_finite,
    color_jitter,
    cosine_with_warmup,
    make_optimizer,
    masked_mse,
    patchify,
    random_shift,
    seed_everything,
    to_float_images,
)
from .synthetic_env import ACTION_DIM, TabletopEnv, TaskSpec, is_success, proprio_vector
from .text import HashingTextEncoder
from .track_transformer import TrackerBundle, load_tracker

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "atm-policy/1"
VARIANTS = ("atm", "bc")
MOD_IMAGE, MOD_TRACK, MOD_LANG = 0, 1, 2
TOK_PROPRIO, TOK_SPATIAL, TOK_ACTION = 0, 1, 2


def grid_query_points(num_points: int, rows: int, cols: int) -> np.ndarray:
    """Fixed grid of query points used at every control step."""
    if rows * cols != num_points:
        raise ValueError(f"{num_points} points do not form a {rows} x {cols} grid")
    return sample_grid_points(rows, cols)


def track_features(tracks: torch.Tensor) -> torch.Tensor:
    """(..., K, L, 2) -> (..., K, 2L): start position followed by displacements from it."""
    start = tracks[..., :1, :]
    rel = torch.cat([start, tracks[..., 1:, :] - start], dim=-2)
    return rel.flatten(-2)


class TrackGuidedPolicy(nn.Module):
    def __init__(
        self,
        variant: str = "atm",
        num_views: int = 1,
        image_size: int = 64,
        image_patch_size: int = 8,
        num_points: int = 32,
        track_length: int = 16,
        action_dim: int = ACTION_DIM,
        proprio_dim: int = 3,
        frame_stack: int = 10,
        dim: int = 64,
        spatial_depth: int = 2,
        temporal_depth: int = 2,
        heads: int = 4,
        mlp_ratio: float = 2.0,
        head_hidden: int = 256,
        lang_dim: int = 32,
        early_fusion: bool = True,
        late_fusion: bool = True,
        use_proprio: bool = False,
    ):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown policy variant {variant!r}")
        self.variant = variant
        self.num_views = num_views
        self.image_patch_size = image_patch_size
        self.num_points = num_points
        self.track_length = track_length
        self.frame_stack = frame_stack
        self.early_fusion = early_fusion
        self.late_fusion = late_fusion
        self.use_proprio = use_proprio
        num_patches = (image_size // image_patch_size) ** 2

        self.patch_embed = nn.Linear(image_patch_size**2 * 3, dim)
        self.img_pos_embed = nn.Parameter(torch.randn(num_views, num_patches, dim) * 0.02)
        self.track_embed = nn.Linear(2 * track_length, dim)
        self.view_embed = nn.Parameter(torch.randn(num_views, dim) * 0.02)
        self.modality_embed = nn.Parameter(torch.randn(3, dim) * 0.02)
        self.lang_embed = nn.Linear(lang_dim, dim) if variant == "bc" else None
        self.spatial_cls_token = nn.Parameter(torch.randn(dim) * 0.02)
        self.spatial = Transformer(dim, spatial_depth, heads, mlp_ratio)

        self.proprio_embed = nn.Linear(proprio_dim, dim) if use_proprio else None
        self.action_cls_token = nn.Parameter(torch.randn(dim) * 0.02)
        self.temporal_pos_embed = nn.Parameter(torch.randn(frame_stack, dim) * 0.02)
        self.temporal_type_embed = nn.Parameter(torch.randn(3, dim) * 0.02)
        self.temporal = Transformer(dim, temporal_depth, heads, mlp_ratio)

        late_dim = num_views * num_points * 2 * track_length if late_fusion else 0
        self.head = nn.Sequential(
            nn.Linear(dim + late_dim, head_hidden),
            nn.GELU(),
            nn.Linear(head_hidden, head_hidden),
            nn.GELU(),
            nn.Linear(head_hidden, action_dim),
        )

    def _tracks_or_zeros(self, tracks, like: torch.Tensor, B: int, S: int) -> torch.Tensor:
        # the BC variant never looks at track values
        if self.variant == "bc" or tracks is None:
            return torch.zeros(
                B, S, self.num_views, self.num_points, self.track_length, 2, dtype=like.dtype
            )
        return tracks.to(like.dtype)

    def spatial_encode(self, frames: torch.Tensor, tracks=None, lang=None) -> torch.Tensor:
        """frames (B, S, V, H, W, 3) in [0, 1]; tracks (B, S, V, K, L, 2) -> (B, S, D)."""
        B, S, V = frames.shape[:3]
        if V != self.num_views:
            raise ValueError(f"policy expects {self.num_views} view(s), got {V}")
        N = B * S
        tokens = [self.spatial_cls_token.expand(N, 1, -1)]
        for v in range(V):
            patches = patchify(frames[:, :, v].reshape(N, *frames.shape[3:]), self.image_patch_size)
            tokens.append(self.patch_embed(patches) + self.img_pos_embed[v] + self.modality_embed[MOD_IMAGE])
        if self.early_fusion:
            tr = self._tracks_or_zeros(tracks, frames, B, S)
            for v in range(V):
                feat = track_features(tr[:, :, v].reshape(N, self.num_points, self.track_length, 2))
                tokens.append(self.track_embed(feat) + self.view_embed[v] + self.modality_embed[MOD_TRACK])
        if self.variant == "bc":
            if lang is None:
                raise ValueError("the BC variant needs a language embedding")
            lt = self.lang_embed(lang.to(frames.dtype)) + self.modality_embed[MOD_LANG]
            tokens.append(lt[:, None].expand(B, S, -1).reshape(N, 1, -1))
        x = self.spatial(torch.cat(tokens, dim=1))
        return x[:, 0].reshape(B, S, -1)

    def temporal_decode(self, spatial: torch.Tensor, proprio=None) -> torch.Tensor:
        """(B, S, D) spatial summaries (+ (B, S, Dp) proprio) -> (B, S, D) action tokens, causally."""
        B, S, D = spatial.shape
        if S > self.frame_stack:
            raise ValueError(f"sequence length {S} exceeds frame stack {self.frame_stack}")
        pos = self.temporal_pos_embed[:S]
        per_step = []
        if self.use_proprio:
            if proprio is None or proprio.shape[:2] != (B, S):
                raise ValueError("proprioception must be aligned with the spatial sequence")
            per_step.append(self.proprio_embed(proprio.to(spatial.dtype)) + pos + self.temporal_type_embed[TOK_PROPRIO])
        per_step.append(spatial + pos + self.temporal_type_embed[TOK_SPATIAL])
        per_step.append(self.action_cls_token.expand(B, S, -1) + pos + self.temporal_type_embed[TOK_ACTION])
        n = len(per_step)
        x = torch.stack(per_step, dim=2).reshape(B, S * n, D)
        causal = torch.ones(S * n, S * n, dtype=torch.bool).tril()
        x = self.temporal(x, causal)
        return x.reshape(B, S, n, D)[:, :, -1]

    def action_head(self, action_tokens: torch.Tensor, tracks=None) -> torch.Tensor:
        """(..., D) action tokens (+ (..., V, K, L, 2) tracks of the same step) -> (..., A)."""
        if not self.late_fusion:
            return self.head(action_tokens)
        lead = action_tokens.shape[:-1]
        if self.variant == "bc" or tracks is None:
            late = torch.zeros(*lead, self.num_views * self.num_points * 2 * self.track_length, dtype=action_tokens.dtype)
        else:
            late = track_features(tracks.to(action_tokens.dtype)).flatten(-3)
        return self.head(torch.cat([action_tokens, late], dim=-1))

    def forward(self, frames, tracks=None, proprio=None, lang=None) -> torch.Tensor:
        """Normalised actions for every step of the stack, (B, S, A)."""
        B, S = frames.shape[:2]
        tr = self._tracks_or_zeros(tracks, frames, B, S) if self.variant == "atm" else None
        spatial = self.spatial_encode(frames, tr, lang)
        act_tokens = self.temporal_decode(spatial, proprio)
        return self.action_head(act_tokens, tr)


def bc_loss(pred: torch.Tensor, target: torch.Tensor, valid=None) -> torch.Tensor:
    """Mean squared error over batch (and time) and action dimensions."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return masked_mse(pred, target, None if valid is None else valid[..., None])


def build_policy(pcfg: PolicyConfig, variant: str, num_views: int, image_size: int, action_dim: int, proprio_dim: int, track_length=None) -> TrackGuidedPolicy:
    return TrackGuidedPolicy(
        variant=variant,
        num_views=num_views,
        image_size=image_size,
        image_patch_size=pcfg.image_patch_size,
        num_points=pcfg.num_points,
        track_length=track_length or pcfg.track_length,
        action_dim=action_dim,
        proprio_dim=proprio_dim,
        frame_stack=pcfg.frame_stack,
        dim=pcfg.dim,
        spatial_depth=pcfg.spatial_depth,
        temporal_depth=pcfg.temporal_depth,
        heads=pcfg.heads,
        mlp_ratio=pcfg.mlp_ratio,
        head_hidden=pcfg.head_hidden,
        lang_dim=pcfg.lang_dim,
        early_fusion=pcfg.early_fusion,
        late_fusion=pcfg.late_fusion,
        use_proprio=pcfg.use_proprio,
    )


# trackers ------------------------------------------------------------------


def load_trackers(paths) -> TrackerBundle:
    """Merge one or more tracker checkpoints into a single view -> model bundle."""
    if isinstance(paths, (str, Path)):
        paths = [p for p in str(paths).split(",") if p]
    bundles = [load_tracker(p) for p in paths]
    if not bundles:
        raise ValueError("no tracker checkpoints given")
    merged = bundles[0]
    for b in bundles[1:]:
        merged.models.update(b.models)
    return merged


@torch.no_grad()
def predict_grid_tracks(bundle: TrackerBundle, view: str, frames, lang, queries: np.ndarray, length: int, batch_size: int = 256) -> torch.Tensor:
    """Tracks of the fixed query grid for a batch of frames, truncated to `length` steps: (N, K, L, 2)."""
    frames = torch.as_tensor(frames)
    lang = torch.as_tensor(np.asarray(lang, dtype=np.float32))
    q = torch.as_tensor(queries, dtype=torch.float32)
    out = []
    model = bundle.model_for(view)
    for s in range(0, len(frames), batch_size):
        f = frames[s : s + batch_size]
        out.append(model.predict(f, q.expand(len(f), -1, -1), lang[s : s + batch_size])[:, :, :length].float())
    return torch.cat(out) if out else torch.zeros(0, len(queries), length, 2)


# data ----------------------------------------------------------------------


@dataclass
class DemoSet:
    views: list
    frames: list  # per episode: (T, V, H, W, 3) uint8
    actions: list  # per episode: (T, A) normalised
    proprio: list
    lang: list
    tracks: list  # per episode: (T, V, K, L, 2) or None
    action_mean: np.ndarray
    action_std: np.ndarray


def action_stats(actions: list) -> tuple[np.ndarray, np.ndarray]:
    a = np.concatenate(actions).astype(np.float64)
    mean = a.mean(0)
    std = a.std(0)
    std[std < 1e-6] = 1.0
    return mean.astype(np.float32), std.astype(np.float32)


def load_demos(dataset_dir, pcfg: PolicyConfig, text: HashingTextEncoder, tracker: TrackerBundle | None, track_length: int) -> DemoSet:
    manifest = read_manifest(dataset_dir)
    eps = [read_episode(p) for p in manifest.paths("demo")]
    if not eps:
        raise ValueError(f"{dataset_dir}: no action-labeled demonstrations")
    views = sorted(eps[0].views)
    mean, std = action_stats([e.actions for e in eps])
    queries = grid_query_points(pcfg.num_points, pcfg.grid_rows, pcfg.grid_cols)
    frames, actions, proprio, lang, tracks = [], [], [], [], []
    for e in eps:
        fr = np.stack([e.views[v] for v in views], axis=1)
        frames.append(fr)
        actions.append(((e.actions - mean) / std).astype(np.float32))
        proprio.append(e.proprioception if e.proprioception is not None else np.zeros((len(fr), 0), np.float32))
        lv = text.encode(e.instruction)
        lang.append(lv)
        if tracker is not None:
            per_view = [
                predict_grid_tracks(tracker, v, e.views[v], np.repeat(lv[None], len(fr), 0), queries, track_length)
                for v in views
            ]
            tracks.append(torch.stack(per_view, dim=1).numpy())
        else:
            tracks.append(None)
    return DemoSet(views, frames, actions, proprio, lang, tracks, mean, std)


def stack_indices(end: int, S: int) -> np.ndarray:
    """Indices of the S most recent steps ending at `end`, padded at the start with step 0."""
    return np.maximum(np.arange(end - S + 1, end + 1), 0)


def window_batches(demos: DemoSet, S: int, rng: np.random.Generator):
    """Non-overlapping length-S windows with a random phase; each step is supervised once."""
    items = []
    for e, fr in enumerate(demos.frames):
        T = len(fr)
        start = -int(rng.integers(0, S))
        while start < T:
            raw = np.arange(start, start + S)
            items.append((e, np.clip(raw, 0, T - 1), (raw >= 0) & (raw < T)))
            start += S
    return items


def collate(demos: DemoSet, items) -> dict:
    out = {"frames": [], "actions": [], "proprio": [], "lang": [], "valid": [], "tracks": []}
    for e, idx, valid in items:
        out["frames"].append(demos.frames[e][idx])
        out["actions"].append(demos.actions[e][idx])
        out["proprio"].append(demos.proprio[e][idx])
        out["lang"].append(demos.lang[e])
        out["valid"].append(valid)
        if demos.tracks[e] is not None:
            out["tracks"].append(demos.tracks[e][idx])
    b = {k: torch.from_numpy(np.stack(v)) for k, v in out.items() if v}
    b.setdefault("tracks", None)
    return b


def _augment_windows(frames: torch.Tensor, config: TrainConfig, gen) -> torch.Tensor:
    """Same shift/jitter for every step of a window, independently per window and view."""
    B, S, V, H, W, C = frames.shape
    aug = config.augment
    x = frames.permute(0, 2, 1, 3, 4, 5).reshape(B * V, S, H, W, C)
    shifts = torch.randint(-aug.shift_pad, aug.shift_pad + 1, (B * V, 2), generator=gen)
    x = torch.stack([random_shift(x[:, s], aug.shift_pad, shifts=shifts)[0] for s in range(S)], dim=1)
    # jitter the stack as one tall image so all steps share the same factors
    x = color_jitter(x.reshape(B * V, S * H, W, C), aug.brightness, aug.contrast, aug.saturation, gen)
    return x.reshape(B, V, S, H, W, C).permute(0, 2, 1, 3, 4, 5)


def train_policy(
    dataset_dir,
    config: TrainConfig,
    variant: str,
    out_path,
    tracker_paths=None,
    metrics_path=None,
) -> dict:
    """Behavioural cloning on the demo set; saves the last-epoch weights."""
    pcfg = config.policy
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if variant == "atm" and not tracker_paths:
        raise ValueError("the ATM variant needs a track transformer checkpoint per view")
    if variant == "bc" and tracker_paths:
        raise ValueError("the BC variant does not use tracks; do not pass a tracker checkpoint")
    gen = seed_everything(config.seed)
    rng = np.random.default_rng(config.seed)
    tracker = load_trackers(tracker_paths) if variant == "atm" else None
    text = HashingTextEncoder(pcfg.lang_dim, config.seed if tracker is None else tracker.config.seed)
    L = pcfg.track_length
    # with augmentation the tracks are regenerated from the augmented frames each batch
    cache_tracks = tracker is not None and not pcfg.augment
    demos = load_demos(dataset_dir, pcfg, text, tracker if cache_tracks else None, L)
    if tracker is not None:
        missing = [v for v in demos.views if v not in tracker.models and "*" not in tracker.models]
        if missing:
            raise ValueError(f"no track transformer for view(s) {missing}")
    V = len(demos.views)
    image_size = demos.frames[0].shape[2]
    proprio_dim = demos.proprio[0].shape[1]
    model = build_policy(pcfg, variant, V, image_size, len(demos.action_mean), max(proprio_dim, 1), L)
    opt = make_optimizer(model, pcfg.lr, pcfg.weight_decay)
    S = pcfg.frame_stack
    n_items = len(window_batches(demos, S, np.random.default_rng(0)))
    steps_per_epoch = max(1, -(-n_items // pcfg.batch_size))
    sched = cosine_with_warmup(opt, pcfg.warmup_epochs * steps_per_epoch, pcfg.epochs * steps_per_epoch)
    queries = grid_query_points(pcfg.num_points, pcfg.grid_rows, pcfg.grid_cols)
    metrics_f = open(metrics_path, "a") if metrics_path else None
    history = []
    try:
        for epoch in range(pcfg.epochs):
            t0 = time.time()
            items = window_batches(demos, S, rng)
            order = rng.permutation(len(items))
            total, count = 0.0, 0
            for s in range(0, len(items), pcfg.batch_size):
                b = collate(demos, [items[i] for i in order[s : s + pcfg.batch_size]])
                frames = to_float_images(b["frames"])
                tracks = b["tracks"]
                if pcfg.augment:
                    frames = _augment_windows(frames, config, gen)
                if tracker is not None and not cache_tracks:
                    tracks = _regenerate_tracks(tracker, demos.views, frames, b["lang"], queries, L)
                proprio = b["proprio"] if pcfg.use_proprio else None
                pred = model(frames, tracks, proprio, b["lang"])
                loss = bc_loss(pred, b["actions"], b["valid"])
                check_finite(loss, "train_policy", epoch=epoch, step=s // pcfg.batch_size)
                opt.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), pcfg.clip_grad)
                opt.step()
                sched.step()
                n = int(b["valid"].sum())
                total += float(loss.detach()) * n
                count += n
            rec = {
                "stage": "train-policy",
                "variant": variant,
                "epoch": epoch,
                "train_loss": total / max(count, 1),
                "lr": opt.param_groups[0]["lr"],
                "seconds": round(time.time() - t0, 3),
            }
            history.append(rec)
            logger.info(json.dumps(rec))
            if metrics_f:
                metrics_f.write(json.dumps(rec) + "\n")
                metrics_f.flush()
    finally:
        if metrics_f:
            metrics_f.close()
    ckpt = {
        "format": CHECKPOINT_FORMAT,
        "variant": variant,
        "config": config.to_dict(),
        "state_dict": model.state_dict(),
        "action_mean": demos.action_mean,
        "action_std": demos.action_std,
        "views": demos.views,
        "image_size": image_size,
        "proprio_dim": max(proprio_dim, 1),
        "track_length": L,
        "tracker_paths": [str(p) for p in (tracker_paths if isinstance(tracker_paths, (list, tuple)) else str(tracker_paths).split(","))] if tracker_paths else [],
        "final_train_loss": history[-1]["train_loss"] if history else None,
    }
    torch.save(ckpt, out_path)
    return {"checkpoint": str(out_path), "final_train_loss": ckpt["final_train_loss"], "epochs": len(history)}


@torch.no_grad()
def _regenerate_tracks(tracker, views, frames, lang, queries, L) -> torch.Tensor:
    B, S, V = frames.shape[:3]
    lang_rep = lang[:, None].expand(B, S, -1).reshape(B * S, -1).numpy()
    per_view = [
        predict_grid_tracks(tracker, v, frames[:, :, i].reshape(B * S, *frames.shape[3:]), lang_rep, queries, L)
        for i, v in enumerate(views)
    ]
    return torch.stack(per_view, dim=1).reshape(B, S, V, len(queries), L, 2)


# inference -----------------------------------------------------------------


@dataclass
class LoadedPolicy:
    model: TrackGuidedPolicy
    config: TrainConfig
    variant: str
    views: list
    action_mean: np.ndarray
    action_std: np.ndarray
    tracker: TrackerBundle | None
    text: HashingTextEncoder
    queries: np.ndarray
    track_length: int


def load_policy(path, tracker_paths=None) -> LoadedPolicy:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a policy checkpoint")
    cfg = TrainConfig.from_dict(ckpt["config"])
    variant = ckpt["variant"]
    model = build_policy(
        cfg.policy, variant, len(ckpt["views"]), ckpt["image_size"], len(ckpt["action_mean"]), ckpt["proprio_dim"], ckpt["track_length"]
    )
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    tracker = None
    if variant == "atm":
        tracker = load_trackers(tracker_paths or ckpt["tracker_paths"])
    seed = tracker.config.seed if tracker is not None else cfg.seed
    return LoadedPolicy(
        model=model,
        config=cfg,
        variant=variant,
        views=ckpt["views"],
        action_mean=np.asarray(ckpt["action_mean"]),
        action_std=np.asarray(ckpt["action_std"]),
        tracker=tracker,
        text=HashingTextEncoder(cfg.policy.lang_dim, seed),
        queries=grid_query_points(cfg.policy.num_points, cfg.policy.grid_rows, cfg.policy.grid_cols),
        track_length=ckpt["track_length"],
    )


class ObsHistory:
    """Per-environment record of observations and the tracks predicted at each step."""

    def __init__(self, frame_stack: int):
        self.S = frame_stack
        self.frames: list = []  # each: (V, H, W, 3) uint8
        self.tracks: list = []  # each: (V, K, L, 2) or None
        self.proprio: list = []

    def push(self, frames, proprio=None):
        self.frames.append(np.asarray(frames))
        self.proprio.append(np.zeros(1, np.float32) if proprio is None else np.asarray(proprio, np.float32))
        self.tracks.append(None)


@torch.no_grad()
def rollout_step(policy: LoadedPolicy, histories: list, instructions: list) -> np.ndarray:
    """One closed-loop control step for a batch of environments.

    Tracks are predicted from each environment's newest frame with the fixed
    query grid (never reused across steps), then the policy consumes the
    padded frame stack.  Returns unnormalised actions (N, A).
    """
    N = len(histories)
    langs = np.stack([policy.text.encode(s) for s in instructions])
    if policy.tracker is not None:
        newest = np.stack([h.frames[-1] for h in histories])  # (N, V, H, W, 3)
        per_view = [
            predict_grid_tracks(policy.tracker, v, newest[:, i], langs, policy.queries, policy.track_length)
            for i, v in enumerate(policy.views)
        ]
        fresh = torch.stack(per_view, dim=1).numpy()
        for h, tr in zip(histories, fresh):
            h.tracks[-1] = tr
    S = policy.model.frame_stack
    idx = [stack_indices(len(h.frames) - 1, S) for h in histories]
    frames = torch.from_numpy(np.stack([np.stack([h.frames[i] for i in ix]) for h, ix in zip(histories, idx)]))
    tracks = None
    if policy.tracker is not None:
        tracks = torch.from_numpy(np.stack([np.stack([h.tracks[i] for i in ix]) for h, ix in zip(histories, idx)]))
    proprio = None
    if policy.model.use_proprio:
        proprio = torch.from_numpy(np.stack([np.stack([h.proprio[i] for i in ix]) for h, ix in zip(histories, idx)]))
    lang = torch.from_numpy(langs)
    pred = policy.model(to_float_images(frames), tracks, proprio, lang)[:, -1].numpy()
    return pred * policy.action_std + policy.action_mean


def evaluate_policy(policy: LoadedPolicy, tasks, episodes: int, seed: int, config: TrainConfig | None = None, embodiment: str | None = None) -> dict:
    """Closed-loop success rates.  Episodes of a task run as one batch."""
    cfg = config or policy.config
    embodiment = embodiment or cfg.data.demo_embodiment
    per_task = {}
    for task in tasks:
        task = task if isinstance(task, TaskSpec) else TaskSpec.from_dict(task)
        envs = [TabletopEnv(cfg.env, embodiment) for _ in range(episodes)]
        hist = [ObsHistory(policy.model.frame_stack) for _ in range(episodes)]
        done = np.zeros(episodes, bool)
        steps = np.zeros(episodes, int)
        for i, (env, h) in enumerate(zip(envs, hist)):
            state, frames = env.reset(task, cfg.eval.seed_offset + 1000 * seed + i)
            h.push(np.stack([frames[v] for v in policy.views]), proprio_vector(state))
            done[i] = is_success(state)
        for _ in range(task.horizon):
            active = np.flatnonzero(~done)
            if len(active) == 0:
                break
            acts = rollout_step(policy, [hist[i] for i in active], [task.instruction] * len(active))
            for a, i in zip(acts, active):
                state, frames, ok = envs[i].step(a)
                hist[i].push(np.stack([frames[v] for v in policy.views]), proprio_vector(state))
                steps[i] += 1
                done[i] = ok
        per_task[task.name] = {
            "instruction": task.instruction,
            "success_rate": float(done.mean()),
            "episodes": episodes,
            "mean_steps": float(steps.mean()),
        }
    rates = [v["success_rate"] for v in per_task.values()]
    return {
        "variant": policy.variant,
        "seed": seed,
        "success_rate": float(np.mean(rates)) if rates else 0.0,
        # reward is 1 on the step the task is solved and 0 otherwise
        "mean_return": float(np.mean(rates)) if rates else 0.0,
        "per_task": per_task,
    }
