"""Circle2d: a point agent on a bounded plane that should trace a target circle.

State is the last four ``(x, y, theta)`` triplets (oldest first). Actions in
``[-1, 1]^2`` decode to a heading change in ``[-pi, pi]`` and a speed in
``[0.5, 3.0]``; the agent rotates first, then moves. Everything here works on a
leading batch axis so dataset generation and evaluation can run many episodes
in lock-step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BOUND = 50.0
RESET_FRACTION = 0.7
HISTORY = 4
HORIZON = 1000
SPEED_MIN, SPEED_MAX = 0.5, 3.0
OBS_DIM = 3 * HISTORY
ACT_DIM = 2

ENV_IDS = {"inplace": "circle2d-inplace-v0", "navigate": "circle2d-navigate-v0"}


@dataclass(frozen=True)
class TaskTarget:
    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 10.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("target radius must be positive")


@dataclass(frozen=True)
class EnvConfig:
    target: TaskTarget = field(default_factory=TaskTarget)
    # "distance": -| ||p - c|| - R |; "literal": -| ||p - c||^2 - R |
    reward_mode: str = "distance"
    horizon: int = HORIZON

    def __post_init__(self):
        if self.reward_mode not in ("distance", "literal"):
            raise ValueError(f"unknown reward_mode {self.reward_mode!r}")


@dataclass
class EnvState:
    history: np.ndarray  # (..., 4, 3), oldest triplet first
    t: int = 0

    @property
    def position(self) -> np.ndarray:
        return self.history[..., -1, :2]

    @property
    def heading(self) -> np.ndarray:
        return self.history[..., -1, 2]

    def observation(self) -> np.ndarray:
        return self.history.reshape(*self.history.shape[:-2], OBS_DIM).astype(np.float32)


class InvalidStateError(RuntimeError):
    pass


def wrap_angle(theta):
    """Map angles onto ``[-pi, pi)``."""
    return (np.asarray(theta) + np.pi) % (2.0 * np.pi) - np.pi


def reset(seed, batch: int | None = None) -> EnvState:
    """Uniform start in the central 70% of the square, uniform heading.

    ``seed`` may be an int, a ``SeedSequence`` or a ``Generator``.
    """
    rng = np.random.default_rng(seed)
    shape = () if batch is None else (batch,)
    lim = RESET_FRACTION * BOUND
    xy = rng.uniform(-lim, lim, size=shape + (2,))
    theta = rng.uniform(-np.pi, np.pi, size=shape)
    triplet = np.concatenate([xy, theta[..., None]], axis=-1)
    history = np.repeat(triplet[..., None, :], HISTORY, axis=-2)
    return EnvState(history=history, t=0)


def state_from_pose(xy, theta) -> EnvState:
    xy = np.asarray(xy, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    triplet = np.concatenate([xy, theta[..., None]], axis=-1)
    return EnvState(history=np.repeat(triplet[..., None, :], HISTORY, axis=-2), t=0)


def decode_action(raw):
    """Affine decode of clamped raw actions into ``(delta_theta, speed)``."""
    raw = np.clip(np.asarray(raw, dtype=np.float64), -1.0, 1.0)
    delta_theta = raw[..., 0] * np.pi
    speed = SPEED_MIN + (raw[..., 1] + 1.0) * 0.5 * (SPEED_MAX - SPEED_MIN)
    return delta_theta, speed


def encode_action(delta_theta, speed):
    """Inverse of :func:`decode_action` (no clamping)."""
    raw_turn = np.asarray(delta_theta) / np.pi
    raw_speed = 2.0 * (np.asarray(speed) - SPEED_MIN) / (SPEED_MAX - SPEED_MIN) - 1.0
    return np.stack([raw_turn, raw_speed], axis=-1)


def task_reward(position, target: TaskTarget = TaskTarget(), mode: str = "distance"):
    d = np.asarray(position, dtype=np.float64) - np.asarray(target.center)
    sq = (d * d).sum(axis=-1)
    if mode == "distance":
        return -np.abs(np.sqrt(sq) - target.radius)
    if mode == "literal":
        return -np.abs(sq - target.radius)
    raise ValueError(f"unknown reward mode {mode!r}")


def step(state: EnvState, action, config: EnvConfig = EnvConfig()):
    """Advance one step. Reward is measured at the post-move position.

    Returns ``(next_state, reward, done)``; ``done`` is the truncation flag.
    """
    if state.t >= config.horizon:
        raise InvalidStateError("episode already finished; call reset()")
    delta_theta, speed = decode_action(action)
    theta = wrap_angle(state.heading + delta_theta)
    xy = state.position + speed[..., None] * np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    xy = np.clip(xy, -BOUND, BOUND)
    triplet = np.concatenate([xy, theta[..., None]], axis=-1)
    history = np.concatenate([state.history[..., 1:, :], triplet[..., None, :]], axis=-2)
    t = state.t + 1
    reward = task_reward(xy, config.target, config.reward_mode)
    return EnvState(history=history, t=t), reward, t >= config.horizon


@dataclass
class Trajectory:
    """One episode. ``observations`` has one more row than ``actions``."""

    observations: np.ndarray  # (T+1, 12)
    actions: np.ndarray  # (T, 2)
    rewards: np.ndarray  # (T,)

    @property
    def positions(self) -> np.ndarray:
        return self.observations[:, -3:-1].astype(np.float64)

    @property
    def headings(self) -> np.ndarray:
        return self.observations[:, -1].astype(np.float64)

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class ScriptedPlan:
    circle_radius: float
    orientation: str  # "ccw" | "cw"
    speed_level: float
    noise_level: float
    navigate_first: bool = False
    approach_point: tuple[float, float] | None = None
    # None anchors the circle at the pose where circling starts
    circle_center: tuple[float, float] | None = None

    def __post_init__(self):
        if self.orientation not in ("ccw", "cw"):
            raise ValueError("orientation must be 'ccw' or 'cw'")
        if not 0 < self.circle_radius < BOUND:
            raise ValueError("circle_radius out of range")
        if not SPEED_MIN <= self.speed_level <= SPEED_MAX:
            raise ValueError("speed_level out of range")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        if self.navigate_first and self.approach_point is None:
            raise ValueError("navigate_first needs an approach_point")


def _anchor_center(xy, theta, radius, sign):
    # center sits on the left normal for ccw, right normal for cw
    normal = np.stack([-np.sin(theta), np.cos(theta)], axis=-1) * sign[..., None]
    center = xy + radius[..., None] * normal
    lim = BOUND - radius[..., None]
    return np.clip(center, -lim, lim)


def _circle_heading(xy, center, radius, sign, speed):
    """Heading that moves the agent to the next vertex of the inscribed polygon."""
    rel = xy - center
    phi = np.arctan2(rel[..., 1], rel[..., 0])
    advance = 2.0 * np.arcsin(np.minimum(speed / (2.0 * radius), 1.0))
    target_angle = phi + sign * advance
    tgt = center + radius[..., None] * np.stack([np.cos(target_angle), np.sin(target_angle)], axis=-1)
    d = tgt - xy
    return np.arctan2(d[..., 1], d[..., 0])


def scripted_rollouts(plans: list[ScriptedPlan], seeds, config: EnvConfig = EnvConfig()) -> list[Trajectory]:
    """Run the hard-coded circle drawer for several plans in lock-step.

    ``seeds[i]`` drives both the reset of episode ``i`` and its action noise.
    """
    n = len(plans)
    rngs = [np.random.default_rng(s) for s in seeds]
    starts = [reset(r) for r in rngs]
    state = EnvState(history=np.stack([s.history for s in starts]), t=0)

    radius = np.array([p.circle_radius for p in plans])
    sign = np.array([1.0 if p.orientation == "ccw" else -1.0 for p in plans])
    speed = np.array([p.speed_level for p in plans])
    noise = np.array([p.noise_level for p in plans])
    navigating = np.array([p.navigate_first for p in plans])
    approach = np.array([p.approach_point if p.navigate_first else (0.0, 0.0) for p in plans], dtype=np.float64)
    center = np.zeros((n, 2))
    anchored = np.zeros(n, dtype=bool)
    for i, p in enumerate(plans):
        if p.circle_center is not None:
            center[i] = p.circle_center
            anchored[i] = True

    T = config.horizon
    obs = np.empty((n, T + 1, OBS_DIM), dtype=np.float32)
    actions = np.empty((n, T, ACT_DIM), dtype=np.float32)
    rewards = np.empty((n, T), dtype=np.float32)
    obs[:, 0] = state.observation()
    for t in range(T):
        xy, theta = state.position, state.heading
        to_goal = approach - xy
        dist = np.linalg.norm(to_goal, axis=-1)
        navigating &= dist >= 1.0
        fresh = ~navigating & ~anchored
        if fresh.any():
            center[fresh] = _anchor_center(xy[fresh], theta[fresh], radius[fresh], sign[fresh])
            anchored |= fresh
        desired = _circle_heading(xy, center, radius, sign, speed)
        cmd_speed = speed.copy()
        if navigating.any():
            desired[navigating] = np.arctan2(to_goal[navigating, 1], to_goal[navigating, 0])
            # slow down on the last step so the approach point is actually reached
            cmd_speed[navigating] = np.clip(np.minimum(speed[navigating], dist[navigating]), SPEED_MIN, SPEED_MAX)
        raw = encode_action(wrap_angle(desired - theta), cmd_speed)
        eps = np.stack([r.standard_normal(2) for r in rngs])
        raw = np.clip(raw + noise[:, None] * eps, -1.0, 1.0)
        state, reward, _ = step(state, raw, config)
        actions[:, t] = raw
        rewards[:, t] = reward
        obs[:, t + 1] = state.observation()
    return [Trajectory(obs[i], actions[i], rewards[i]) for i in range(n)]


def scripted_rollout(plan: ScriptedPlan, seed, config: EnvConfig = EnvConfig()) -> Trajectory:
    return scripted_rollouts([plan], [seed], config)[0]


@dataclass(frozen=True)
class PlanRanges:
    radius: tuple[float, float] = (2.0, 11.0)
    speed: tuple[float, float] = (SPEED_MIN, SPEED_MAX)
    noise: tuple[float, float] = (0.0, 0.065)


def sample_plan(rng: np.random.Generator, variant: str, ranges: PlanRanges = PlanRanges()) -> ScriptedPlan:
    if variant not in ENV_IDS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(ENV_IDS)}")
    lim = RESET_FRACTION * BOUND
    navigate = variant == "navigate"
    return ScriptedPlan(
        circle_radius=float(rng.uniform(*ranges.radius)),
        orientation="ccw" if rng.random() < 0.5 else "cw",
        speed_level=float(rng.uniform(*ranges.speed)),
        noise_level=float(rng.uniform(*ranges.noise)),
        navigate_first=navigate,
        approach_point=tuple(rng.uniform(-lim, lim, size=2)) if navigate else None,
    )


def on_target_return(config: EnvConfig = EnvConfig(), n_starts: int = 16, seed: int = 0) -> float:
    """Best undiscounted return of the scripted drawer sent onto the target circle."""
    rng = np.random.default_rng(seed)
    target = config.target
    plans, seeds = [], []
    for i in range(n_starts):
        s = np.random.SeedSequence([seed, i])
        start = reset(np.random.default_rng(s))
        rel = start.position - np.asarray(target.center)
        norm = np.linalg.norm(rel)
        entry = np.asarray(target.center) + target.radius * (rel / norm if norm > 0 else np.array([1.0, 0.0]))
        plans.append(ScriptedPlan(
            circle_radius=target.radius,
            orientation="ccw" if rng.random() < 0.5 else "cw",
            speed_level=SPEED_MAX if norm > target.radius + 3 else 1.0,
            noise_level=0.0,
            navigate_first=True,
            approach_point=(float(entry[0]), float(entry[1])),
            circle_center=target.center,
        ))
        seeds.append(s)
    trajs = scripted_rollouts(plans, seeds, config)
    return float(max(tr.rewards.astype(np.float64).sum() for tr in trajs))


def generate_dataset(variant: str, n_episodes: int, seed: int, path=None, config: EnvConfig = EnvConfig(),
                     ranges: PlanRanges = PlanRanges(), chunk: int = 64):
    """Roll out ``n_episodes`` sampled scripted plans; optionally write them to ``path``.

    Returns the in-memory dataset. The header records provenance and the
    return bounds later used for normalization.
    """
    from .datastore import Dataset, write_dataset

    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if variant not in ENV_IDS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(ENV_IDS)}")
    root = np.random.SeedSequence(seed)
    plan_ss, *episode_ss = root.spawn(n_episodes + 1)
    plan_rng = np.random.default_rng(plan_ss)
    plans = [sample_plan(plan_rng, variant, ranges) for _ in range(n_episodes)]
    trajs = []
    for i in range(0, n_episodes, chunk):
        trajs += scripted_rollouts(plans[i:i + chunk], episode_ss[i:i + chunk], config)
    returns = [float(tr.rewards.astype(np.float64).sum()) for tr in trajs]
    header = {
        "env_id": ENV_IDS[variant],
        "variant": variant,
        "seed": int(seed),
        "episode_count": n_episodes,
        "horizon": config.horizon,
        "target": {"center": list(config.target.center), "radius": config.target.radius},
        "reward_mode": config.reward_mode,
        "plan_ranges": {"radius": list(ranges.radius), "speed": list(ranges.speed), "noise": list(ranges.noise)},
        "return_bounds": [min(returns), on_target_return(config)],
    }
    ds = Dataset.from_trajectories(trajs, header)
    if path is not None:
        write_dataset(ds, path)
    return ds
