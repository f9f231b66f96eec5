"""Deterministic 2D tabletop benchmark with scripted experts and analytic point tracks.

The workspace is the unit square with x to the right and y downward, so for
the default third-person view world coordinates coincide with normalized image
coordinates.  Discs are pushed quasi-statically by the agent and can be
grasped; goal zones are static and drawn underneath everything else.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

ACTION_DIM = 4

DISC_COLORS = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.7, 0.2),
    "blue": (0.15, 0.3, 0.9),
}
ZONE_COLORS = {
    "yellow": (0.95, 0.85, 0.3),
    "purple": (0.7, 0.45, 0.85),
}
BACKGROUND = (0.92, 0.92, 0.9)

TEMPLATES = {
    "reach": "reach the {disc} disc",
    "push": "push the {disc} disc to the {zone} zone",
    "pick_place": "put the {disc} disc in the {zone} zone",
}


class LayoutError(RuntimeError):
    pass


@dataclass(frozen=True)
class EmbodimentSpec:
    name: str
    body_color: tuple
    accent_color: tuple
    speed_scale: float = 1.0
    fingers: bool = False


EMBODIMENTS = {
    "cursor": EmbodimentSpec("cursor", (0.25, 0.25, 0.25), (0.95, 0.95, 0.95)),
    "two-finger": EmbodimentSpec(
        "two-finger", (0.9, 0.5, 0.1), (0.3, 0.15, 0.05), speed_scale=0.9, fingers=True
    ),
}


@dataclass(frozen=True)
class TaskSpec:
    template: str
    disc: str
    zone: str = ""
    success_margin: float = 0.02
    horizon: int = 50

    def __post_init__(self):
        if self.template not in TEMPLATES:
            raise ValueError(f"unknown template {self.template!r}; choose from {sorted(TEMPLATES)}")
        if self.disc not in DISC_COLORS:
            raise ValueError(f"unknown disc colour {self.disc!r}; choose from {sorted(DISC_COLORS)}")
        if self.template != "reach" and self.zone not in ZONE_COLORS:
            raise ValueError(f"{self.template} needs a zone from {sorted(ZONE_COLORS)}, got {self.zone!r}")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")

    @property
    def instruction(self) -> str:
        return TEMPLATES[self.template].format(disc=self.disc, zone=self.zone)

    @property
    def name(self) -> str:
        return self.instruction.replace(" ", "_")

    def to_dict(self) -> dict:
        return {
            "template": self.template,
            "disc": self.disc,
            "zone": self.zone,
            "success_margin": self.success_margin,
            "horizon": self.horizon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(**d)


DEFAULT_TASKS = (
    TaskSpec("reach", "red"),
    TaskSpec("push", "blue", "yellow"),
    TaskSpec("pick_place", "green", "purple"),
)


@dataclass
class EnvConfig:
    image_size: int = 64
    agent_radius: float = 0.08
    disc_radius: float = 0.07
    zone_radius: float = 0.12
    max_speed: float = 0.05
    grasp_margin: float = 0.02
    wrist_view: bool = False
    wrist_extent: float = 0.5
    max_layout_tries: int = 1000


@dataclass
class WorldState:
    agent: np.ndarray
    grip: bool
    held: int
    disc_pos: np.ndarray
    disc_radius: np.ndarray
    disc_colors: list
    zone_pos: np.ndarray
    zone_radius: np.ndarray
    zone_colors: list
    task: TaskSpec
    agent_radius: float
    step_count: int = 0
    # a just-released disc still under the agent; exempt from pushing until clear
    ghost: int = -1

    def copy(self) -> "WorldState":
        return copy.deepcopy(self)

    def disc_index(self, color: str) -> int:
        return self.disc_colors.index(color)

    def zone_index(self, color: str) -> int:
        return self.zone_colors.index(color)

    def vector(self) -> np.ndarray:
        """Flat float64 record: agent xy, grip, held, ghost, then disc xys."""
        return np.concatenate(
            [self.agent, [float(self.grip), float(self.held), float(self.ghost)], self.disc_pos.ravel()]
        )


def state_from_vector(vec: np.ndarray, template: WorldState) -> WorldState:
    s = template.copy()
    s.agent = np.array(vec[:2], dtype=np.float64)
    s.grip = bool(vec[2] > 0.5)
    s.held = int(round(vec[3]))
    s.ghost = int(round(vec[4]))
    s.disc_pos = np.array(vec[5:], dtype=np.float64).reshape(-1, 2)
    return s


def is_success(state: WorldState) -> bool:
    task = state.task
    d = state.disc_pos[state.disc_index(task.disc)]
    if task.template == "reach":
        r = state.disc_radius[state.disc_index(task.disc)]
        return bool(np.linalg.norm(state.agent - d) <= state.agent_radius + r + task.success_margin)
    z = state.zone_index(task.zone)
    inside = np.linalg.norm(d - state.zone_pos[z]) <= state.zone_radius[z]
    if task.template == "push":
        return bool(inside)
    if task.template == "pick_place":
        return bool(inside and state.held < 0)
    raise ValueError(f"unknown template {task.template!r}")


class TabletopEnv:
    """One environment instance; `reset` and `step` are deterministic."""

    def __init__(self, config: EnvConfig | None = None, embodiment: str = "cursor"):
        self.config = config or EnvConfig()
        if embodiment not in EMBODIMENTS:
            raise ValueError(f"unknown embodiment {embodiment!r}")
        self.embodiment = EMBODIMENTS[embodiment]
        n = self.config.image_size
        c = (np.arange(n) + 0.5) / n
        self._gx, self._gy = np.meshgrid(c, c)
        self.state: WorldState | None = None

    @property
    def view_names(self) -> list[str]:
        return ["agentview", "wrist"] if self.config.wrist_view else ["agentview"]

    def reset(self, task: TaskSpec, seed: int) -> tuple[WorldState, dict]:
        cfg = self.config
        rng = np.random.default_rng(seed)
        colors = list(DISC_COLORS)
        zones = list(ZONE_COLORS)
        for _ in range(cfg.max_layout_tries):
            zone_pos = rng.uniform(cfg.zone_radius, 1 - cfg.zone_radius, size=(len(zones), 2))
            disc_pos = rng.uniform(cfg.disc_radius, 1 - cfg.disc_radius, size=(len(colors), 2))
            agent = rng.uniform(cfg.agent_radius, 1 - cfg.agent_radius, size=2)
            circles = [(p, cfg.zone_radius) for p in zone_pos]
            circles += [(p, cfg.disc_radius) for p in disc_pos]
            circles += [(agent, cfg.agent_radius)]
            if _separated(circles, gap=0.02) and _solvable(task, disc_pos, zone_pos, colors, zones, cfg):
                break
        else:
            raise LayoutError(f"no feasible layout for seed {seed}")
        state = WorldState(
            agent=agent,
            grip=False,
            held=-1,
            disc_pos=disc_pos,
            disc_radius=np.full(len(colors), cfg.disc_radius),
            disc_colors=colors,
            zone_pos=zone_pos,
            zone_radius=np.full(len(zones), cfg.zone_radius),
            zone_colors=zones,
            task=task,
            agent_radius=cfg.agent_radius,
        )
        self.state = state
        return state.copy(), self.render(state)

    def step(self, action) -> tuple[WorldState, dict, bool]:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        self.state = transition(self.state, action, self.config, self.embodiment)
        return self.state.copy(), self.render(self.state), is_success(self.state)

    # rendering -------------------------------------------------------------

    def viewport(self, state: WorldState, view: str) -> tuple[np.ndarray, float]:
        """Return (top-left world corner, world extent) of a view."""
        if view == "agentview":
            return np.zeros(2), 1.0
        if view == "wrist":
            e = self.config.wrist_extent
            return state.agent - e / 2, e
        raise KeyError(f"unknown view {view!r}")

    def render(self, state: WorldState) -> dict:
        return {v: self.render_view(state, v) for v in self.view_names}

    def render_view(self, state: WorldState, view: str = "agentview") -> np.ndarray:
        n = self.config.image_size
        origin, extent = self.viewport(state, view)
        wx = origin[0] + self._gx * extent
        wy = origin[1] + self._gy * extent
        px_per_unit = n / extent
        img = np.empty((n, n, 3))
        img[:] = BACKGROUND
        outside = (wx < 0) | (wx > 1) | (wy < 0) | (wy > 1)
        img[outside] = 0.0

        def paint(center, radius, color):
            d = np.hypot(wx - center[0], wy - center[1]) * px_per_unit
            alpha = np.clip(radius * px_per_unit - d + 0.5, 0.0, 1.0)[..., None]
            img[...] = img * (1 - alpha) + np.asarray(color) * alpha

        for p, r, c in zip(state.zone_pos, state.zone_radius, state.zone_colors):
            paint(p, r, ZONE_COLORS[c])
        emb = self.embodiment
        for ent in _z_order(state):
            if ent != AGENT_ENTITY:
                paint(state.disc_pos[ent], state.disc_radius[ent], DISC_COLORS[state.disc_colors[ent]])
                continue
            r = state.agent_radius
            paint(state.agent, r, emb.body_color)
            if emb.fingers:
                for side in (-1, 1):
                    paint(state.agent + np.array([side * 0.6 * r, 0.0]), 0.3 * r, emb.accent_color)
            if state.grip:
                paint(state.agent, 0.35 * r, emb.accent_color)
        return np.round(img * 255).astype(np.uint8)


def _solvable(task, disc_pos, zone_pos, colors, zones, cfg: EnvConfig) -> bool:
    if task.template != "push":
        return True
    disc = disc_pos[colors.index(task.disc)]
    u = zone_pos[zones.index(task.zone)] - disc
    u = u / np.linalg.norm(u)
    # the pushing contact point behind the disc must be reachable by the agent
    behind = disc - u * (cfg.agent_radius + cfg.disc_radius + 0.03)
    return bool(np.all(behind >= cfg.agent_radius) and np.all(behind <= 1 - cfg.agent_radius))


def _separated(circles, gap: float) -> bool:
    for i in range(len(circles)):
        for j in range(i + 1, len(circles)):
            (p, r), (q, s) = circles[i], circles[j]
            if np.linalg.norm(p - q) < r + s + gap:
                return False
    return True


def transition(state: WorldState, action, config: EnvConfig, embodiment: EmbodimentSpec) -> WorldState:
    """Pure dynamics: returns the successor of `state` under `action`."""
    a = np.nan_to_num(np.asarray(action, dtype=np.float64), nan=0.0, posinf=0.0, neginf=0.0)
    a = np.clip(a, -1.0, 1.0)
    s = state.copy()
    s.step_count += 1

    move = a[:2] * config.max_speed * embodiment.speed_scale
    speed = np.linalg.norm(move)
    vmax = config.max_speed * embodiment.speed_scale
    if speed > vmax:
        move = move * (vmax / speed)
    ra = s.agent_radius
    old_agent = s.agent.copy()
    s.agent = np.clip(s.agent + move, ra, 1 - ra)
    delta = s.agent - old_agent

    close = a[2] > 0
    if s.held >= 0:
        if close:
            s.disc_pos[s.held] = s.agent.copy()
        else:
            s.ghost, s.held = s.held, -1
    elif close and not s.grip:
        gaps = np.linalg.norm(s.disc_pos - s.agent, axis=1) - s.disc_radius - ra
        if s.ghost >= 0:
            gaps[s.ghost] = np.inf
        cand = int(np.argmin(gaps))
        if gaps[cand] <= config.grasp_margin:
            s.held = cand
            s.disc_pos[cand] = s.agent.copy()
    s.grip = bool(close)
    if s.ghost >= 0 and np.linalg.norm(s.disc_pos[s.ghost] - s.agent) >= ra + s.disc_radius[s.ghost]:
        s.ghost = -1

    for i in range(len(s.disc_pos)):
        if i in (s.held, s.ghost):
            continue
        s.disc_pos[i] = push_out(s.agent, ra, s.disc_pos[i], s.disc_radius[i])
    _separate_discs(s)
    return s


def push_out(agent: np.ndarray, ra: float, disc: np.ndarray, rd: float) -> np.ndarray:
    """Displace an overlapping disc along the contact normal until it just touches."""
    diff = disc - agent
    dist = float(np.linalg.norm(diff))
    overlap = ra + rd - dist
    if overlap <= 0:
        return disc
    normal = diff / dist if dist > 0 else np.array([1.0, 0.0])
    return np.clip(disc + normal * overlap, rd, 1 - rd)


def _separate_discs(s: WorldState, iters: int = 3) -> None:
    n = len(s.disc_pos)
    for _ in range(iters):
        moved = False
        for i in range(n):
            for j in range(i + 1, n):
                if s.held in (i, j):
                    continue  # lifted
                diff = s.disc_pos[j] - s.disc_pos[i]
                dist = float(np.linalg.norm(diff))
                overlap = s.disc_radius[i] + s.disc_radius[j] - dist
                if overlap <= 1e-12:
                    continue
                normal = diff / dist if dist > 0 else np.array([1.0, 0.0])
                s.disc_pos[i] = np.clip(s.disc_pos[i] - normal * overlap * 0.5, s.disc_radius[i], 1 - s.disc_radius[i])
                s.disc_pos[j] = np.clip(s.disc_pos[j] + normal * overlap * 0.5, s.disc_radius[j], 1 - s.disc_radius[j])
                moved = True
        if not moved:
            break


# scripted expert -----------------------------------------------------------


def _inside(p, margin) -> bool:
    return bool(np.all(p >= margin) and np.all(p <= 1 - margin))


def _toward(src, dst, max_speed, gain=1.0) -> np.ndarray:
    v = (np.asarray(dst) - np.asarray(src)) * gain / max_speed
    n = np.linalg.norm(v)
    return v / n if n > 1 else v


def expert_action(state: WorldState, config: EnvConfig | None = None) -> np.ndarray:
    """Scripted proportional controller.  Deterministic in `state`."""
    config = config or EnvConfig()
    task = state.task
    vmax = config.max_speed
    di = state.disc_index(task.disc)
    disc = state.disc_pos[di]
    rd = state.disc_radius[di]
    ra = state.agent_radius
    act = np.zeros(ACTION_DIM)

    if task.template == "reach":
        if is_success(state):
            return act
        # stop at contact distance rather than driving into the disc
        gap = np.linalg.norm(disc - state.agent) - (ra + rd + 0.5 * task.success_margin)
        d = disc - state.agent
        n = np.linalg.norm(d)
        step = min(max(gap, 0.0), vmax)
        act[:2] = d / n * step / vmax if n > 0 else 0.0
        return act

    zone = state.zone_pos[state.zone_index(task.zone)]
    if task.template == "push":
        if is_success(state):
            return act
        u = zone - disc
        if np.linalg.norm(u) < 1e-9:
            return act
        u = u / np.linalg.norm(u)
        contact = ra + rd
        rel = state.agent - disc
        along = float(rel @ u)
        lateral = rel - along * u
        lat = float(np.linalg.norm(lateral))
        perp = np.array([-u[1], u[0]])
        sides = [s for s in (perp, -perp) if _inside(disc + s * (contact + 0.03) - u * contact, ra)]
        side = max(sides or [perp, -perp], key=lambda s: float(lateral @ s))
        if along < -0.9 * contact and lat < 0.8 * rd:
            # behind the disc: push toward the zone while re-centring on the line
            target = disc - u * contact + u * vmax
        elif along < -0.9 * contact:
            target = disc - u * (contact + 0.01)
        elif lat < contact + 0.02:
            # in front or beside: sidestep before going around
            target = disc + u * along + side * (contact + 0.03)
        else:
            target = disc + side * (contact + 0.03) - u * contact
        act[:2] = _toward(state.agent, target, vmax)
        return act

    if task.template == "pick_place":
        holding = state.held == di
        if holding:
            offset = disc - state.agent
            target = zone - offset
            if np.linalg.norm(disc - zone) < 0.3 * state.zone_radius[0]:
                return act  # open gripper to release
            act[:2] = _toward(state.agent, target, vmax)
            act[2] = 1.0
            return act
        if is_success(state):
            return act
        if state.held >= 0:
            return act  # holding the wrong disc: release
        gap = np.linalg.norm(disc - state.agent) - ra - rd
        if gap <= 0.5 * config.grasp_margin:
            act[2] = 1.0
            if state.grip:
                act[2] = -1.0  # reopen so the next close attempt can grasp
            return act
        d = disc - state.agent
        step = min(gap - 0.25 * config.grasp_margin, vmax)
        act[:2] = d / np.linalg.norm(d) * step / vmax
        return act
    raise ValueError(f"unknown template {task.template!r}")


# oracle tracker ------------------------------------------------------------

BACKGROUND_ENTITY = -1
AGENT_ENTITY = -2


def _z_order(state: WorldState) -> list[int]:
    """Entities bottom to top: resting discs, the agent, then a held disc."""
    order = [i for i in range(len(state.disc_pos)) if i != state.held]
    order.append(AGENT_ENTITY)
    if state.held >= 0:
        order.append(state.held)
    return order


def _covers(state: WorldState, ent: int, p: np.ndarray) -> bool:
    if ent == AGENT_ENTITY:
        return bool(np.linalg.norm(p - state.agent) <= state.agent_radius)
    return bool(np.linalg.norm(p - state.disc_pos[ent]) <= state.disc_radius[ent])


def entity_under(state: WorldState, point_world: np.ndarray) -> int:
    """Topmost entity covering a world point: agent, a disc index, or background.

    Zones are static, so points on them behave exactly like background.
    """
    for ent in reversed(_z_order(state)):
        if _covers(state, ent, point_world):
            return ent
    return BACKGROUND_ENTITY


def _entity_pos(state: WorldState, ent: int) -> np.ndarray:
    if ent == AGENT_ENTITY:
        return state.agent
    if ent == BACKGROUND_ENTITY:
        return np.zeros(2)
    return state.disc_pos[ent]


def _occluded(state: WorldState, ent: int, p: np.ndarray) -> bool:
    order = _z_order(state)
    above = order[order.index(ent) + 1:] if ent != BACKGROUND_ENTITY else order
    return any(_covers(state, e, p) for e in above)


def oracle_tracks(
    states: list[WorldState],
    query_points: np.ndarray,
    query_t: int,
    view: str = "agentview",
    env: TabletopEnv | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic tracks of query points given at frame `query_t`.

    Returns coords (K, T, 2) in the view's normalized frame and visibility
    (K, T).  Each point is bound to the entity under it at `query_t` and moves
    rigidly with it.
    """
    env = env or TabletopEnv()
    q = np.asarray(query_points, dtype=np.float64).reshape(-1, 2)
    T = len(states)
    ref = states[query_t]
    origin, extent = env.viewport(ref, view)
    world_q = origin + q * extent
    coords = np.empty((len(q), T, 2))
    vis = np.empty((len(q), T), dtype=bool)
    for k, wp in enumerate(world_q):
        ent = entity_under(ref, wp)
        offset = wp - _entity_pos(ref, ent)
        for t, st in enumerate(states):
            w = _entity_pos(st, ent) + offset
            o, e = env.viewport(st, view)
            c = (w - o) / e
            inside = bool(np.all((c >= 0) & (c <= 1)))
            coords[k, t] = np.clip(c, 0.0, 1.0)
            vis[k, t] = inside and not _occluded(st, ent, w)
    # the query frame reproduces the query exactly
    coords[:, query_t] = q
    return coords, vis


class OracleTracker:
    """TrackerInterface backed by stored world states of one episode."""

    def __init__(self, states: list[WorldState], view: str = "agentview", env: TabletopEnv | None = None):
        self.states = states
        self.view = view
        self.env = env or TabletopEnv()

    def __call__(self, frames: np.ndarray, query_t: int, query_points: np.ndarray):
        if len(frames) != len(self.states):
            raise ValueError(f"{len(frames)} frames but {len(self.states)} states")
        return oracle_tracks(self.states, query_points, query_t, self.view, self.env)


# rollouts ------------------------------------------------------------------


@dataclass
class Rollout:
    task: TaskSpec
    seed: int
    states: list = field(default_factory=list)
    frames: dict = field(default_factory=dict)
    actions: list = field(default_factory=list)
    success: bool = False


def run_expert(env: TabletopEnv, task: TaskSpec, seed: int, stop_on_success: bool = True) -> Rollout:
    """Roll out the scripted expert; frames and states have one more entry than actions."""
    state, frames = env.reset(task, seed)
    ro = Rollout(task=task, seed=seed, states=[state], frames={v: [f] for v, f in frames.items()})
    for _ in range(task.horizon):
        a = expert_action(state, env.config)
        state, frames, done = env.step(a)
        ro.actions.append(a)
        ro.states.append(state)
        for v, f in frames.items():
            ro.frames[v].append(f)
        if done:
            ro.success = True
            if stop_on_success:
                break
    return ro


# datasets ------------------------------------------------------------------


def world_metadata(state: WorldState, env: TabletopEnv) -> dict:
    """Static scene description needed to rebuild states from stored vectors."""
    import dataclasses

    return {
        "task": state.task.to_dict(),
        "disc_radius": state.disc_radius.tolist(),
        "disc_colors": list(state.disc_colors),
        "zone_pos": state.zone_pos.tolist(),
        "zone_radius": state.zone_radius.tolist(),
        "zone_colors": list(state.zone_colors),
        "agent_radius": state.agent_radius,
        "env_config": dataclasses.asdict(env.config),
        "embodiment": env.embodiment.name,
    }


def env_from_metadata(metadata: dict) -> TabletopEnv:
    w = metadata["world"]
    return TabletopEnv(EnvConfig(**w["env_config"]), w["embodiment"])


def states_from_episode(episode) -> list[WorldState]:
    w = episode.metadata["world"]
    template = WorldState(
        agent=np.zeros(2),
        grip=False,
        held=-1,
        disc_pos=np.zeros((len(w["disc_colors"]), 2)),
        disc_radius=np.array(w["disc_radius"]),
        disc_colors=list(w["disc_colors"]),
        zone_pos=np.array(w["zone_pos"]),
        zone_radius=np.array(w["zone_radius"]),
        zone_colors=list(w["zone_colors"]),
        task=TaskSpec.from_dict(w["task"]),
        agent_radius=w["agent_radius"],
    )
    out = []
    for t, vec in enumerate(np.asarray(episode.states, dtype=np.float64)):
        s = state_from_vector(vec, template)
        s.step_count = t
        out.append(s)
    return out


def proprio_vector(state: WorldState) -> np.ndarray:
    return np.array([state.agent[0], state.agent[1], float(state.grip)])


def rollout_to_episode(ro: Rollout, env: TabletopEnv, with_actions: bool):
    from .data_model import Episode

    T = len(ro.states)
    actions = None
    if with_actions:
        actions = np.zeros((T, ACTION_DIM))
        actions[: len(ro.actions)] = np.asarray(ro.actions)
    return Episode(
        views={v: np.stack(f) for v, f in ro.frames.items()},
        instruction=ro.task.instruction,
        actions=actions,
        proprioception=np.stack([proprio_vector(s) for s in ro.states]),
        embodiment_tag=env.embodiment.name,
        states=np.stack([s.vector() for s in ro.states]),
        metadata={
            "layout_seed": ro.seed,
            "success": ro.success,
            "world": world_metadata(ro.states[0], env),
        },
    )


def generate_datasets(
    out_dir,
    tasks,
    num_videos: int,
    num_demos: int,
    seed: int = 0,
    video_embodiment: str = "cursor",
    demo_embodiment: str = "cursor",
    env_config: EnvConfig | None = None,
    max_attempts_factor: int = 20,
):
    """Render expert rollouts into an action-free video set and a demo set.

    Counts are per task.  Failed expert rollouts are discarded and replaced
    by fresh layouts.  Returns the written manifest.
    """
    from pathlib import Path

    from .data_model import DatasetManifest, write_episode, write_manifest

    out = Path(out_dir)
    (out / "episodes").mkdir(parents=True, exist_ok=True)
    env_config = env_config or EnvConfig()
    records = []
    seq = np.random.SeedSequence(seed)
    for ti, (task, task_seq) in enumerate(zip(tasks, seq.spawn(len(tasks)))):
        rng = np.random.default_rng(task_seq)
        for kind, count, emb in (
            ("video", num_videos, video_embodiment),
            ("demo", num_demos, demo_embodiment),
        ):
            env = TabletopEnv(env_config, emb)
            made = attempts = 0
            while made < count:
                attempts += 1
                if attempts > max(count, 1) * max_attempts_factor:
                    raise RuntimeError(f"expert keeps failing on task {task.instruction!r}")
                layout_seed = int(rng.integers(0, 2**31 - 1))
                try:
                    ro = run_expert(env, task, layout_seed)
                except LayoutError:
                    continue
                if not ro.success:
                    logger.info("discarding failed expert rollout (task %s, seed %d)", task.name, layout_seed)
                    continue
                ep = rollout_to_episode(ro, env, with_actions=kind == "demo")
                rel = f"episodes/{kind}_{ti:02d}_{made:04d}"
                write_episode(ep, out / rel)
                records.append(
                    {
                        "path": rel,
                        "kind": kind,
                        "instruction": task.instruction,
                        "embodiment_tag": emb,
                    }
                )
                made += 1
    n = env_config.image_size
    views = TabletopEnv(env_config).view_names
    manifest = DatasetManifest(
        episodes=records,
        image_size={v: [n, n] for v in views},
        action_dim=ACTION_DIM,
        proprio_dim=3,
        root=out,
    )
    write_manifest(manifest, out)
    return manifest
