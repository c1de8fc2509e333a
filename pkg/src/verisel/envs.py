"""Deterministic continuous Cartpole and Mountain Car, presets, and rollouts.

The dynamics are the standard published formulations (Euler integration);
every physical constant sits in the config dataclasses so runs are auditable.
Randomness enters only through explicitly passed generators or seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .boxes import Box
from .nets import Network, forward

REWARD_THRESHOLDS = {"cartpole": 250.0, "mountaincar": 90.0, "aurora": 99.0}

TERM_OUT_OF_BOUNDS = "out_of_bounds"
TERM_POLE_FELL = "pole_fell"
TERM_GOAL = "goal_reached"
TERM_STEP_CAP = "step_cap"


@dataclass(frozen=True)
class CartpoleConfig:
    x_low: float = -2.4
    x_high: float = 2.4
    init_center_halfwidth: float = 0.05
    angle_fail_threshold: float = 12.0 * math.pi / 180.0
    max_steps: int = 500
    gravity: float = 9.8
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    pole_half_length: float = 0.5
    force_scale: float = 10.0  # force = force_scale * clip(action, -1, 1)
    dt: float = 0.02
    action_min_magnitude: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.x_low >= self.x_high:
            raise ValueError("x_low must be below x_high")
        if self.init_center_halfwidth < 0:
            raise ValueError("init_center_halfwidth must be nonnegative")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")


@dataclass(frozen=True)
class MountainCarConfig:
    min_position: float = -1.2
    max_position: float = 0.6
    goal_position: float = 0.45
    min_action: float = -2.0
    max_action: float = 2.0
    max_speed: float = 0.4
    init_position_range: tuple[float, float] = (-0.9, -0.6)
    init_velocity_range: tuple[float, float] = (0.0, 0.0)
    x_scale: float = 1.5
    power: float = 0.0015
    gravity: float = 0.0025
    goal_reward: float = 100.0
    action_cost: float = 0.1
    max_steps: int = 300
    seed: int = 0

    def __post_init__(self) -> None:
        if not (self.min_position < self.goal_position <= self.max_position):
            raise ValueError("need min_position < goal_position <= max_position")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")


@dataclass(frozen=True)
class EpisodeResult:
    total_reward: float
    steps: int
    termination: str


def _checked_action(action) -> float:
    a = float(action[0]) if np.ndim(action) else float(action)
    if not math.isfinite(a):
        raise ValueError("action must be finite")
    return a


def _apply_min_magnitude(a: float, floor: float) -> float:
    if floor > 0.0 and 0.0 < abs(a) < floor:
        return math.copysign(floor, a)
    return a


def cartpole_reset(cfg: CartpoleConfig, rng: np.random.Generator) -> np.ndarray:
    """State (x, vx, theta, vtheta): platform-center offsets, all +-halfwidth."""
    center = np.array([0.5 * (cfg.x_low + cfg.x_high), 0.0, 0.0, 0.0])
    hw = cfg.init_center_halfwidth
    return center + rng.uniform(-hw, hw, size=4)


def cartpole_step(cfg: CartpoleConfig, state: np.ndarray, action) -> tuple[np.ndarray, float, bool, str | None]:
    """One Euler step; reward 1.0 while the new state survives, else 0.0."""
    a = _apply_min_magnitude(_checked_action(action), cfg.action_min_magnitude)
    force = cfg.force_scale * min(1.0, max(-1.0, a))
    x, vx, th, vth = (float(s) for s in state)
    sin_th, cos_th = math.sin(th), math.cos(th)
    total_mass = cfg.cart_mass + cfg.pole_mass
    pml = cfg.pole_mass * cfg.pole_half_length
    temp = (force + pml * vth * vth * sin_th) / total_mass
    th_acc = (cfg.gravity * sin_th - cos_th * temp) / (
        cfg.pole_half_length * (4.0 / 3.0 - cfg.pole_mass * cos_th * cos_th / total_mass)
    )
    x_acc = temp - pml * th_acc * cos_th / total_mass
    x += cfg.dt * vx
    vx += cfg.dt * x_acc
    th += cfg.dt * vth
    vth += cfg.dt * th_acc
    new_state = np.array([x, vx, th, vth])
    if x < cfg.x_low or x > cfg.x_high:
        return new_state, 0.0, True, TERM_OUT_OF_BOUNDS
    if abs(th) > cfg.angle_fail_threshold:
        return new_state, 0.0, True, TERM_POLE_FELL
    return new_state, 1.0, False, None


def mountaincar_reset(cfg: MountainCarConfig, rng: np.random.Generator) -> np.ndarray:
    pos = rng.uniform(*cfg.init_position_range)
    vel = rng.uniform(*cfg.init_velocity_range)
    return np.array([pos, vel])


def mountaincar_step(cfg: MountainCarConfig, state: np.ndarray, action) -> tuple[np.ndarray, float, bool, str | None]:
    """One step; cost -action_cost*a^2 per step, goal pays goal_reward once."""
    a = _checked_action(action)
    a = min(cfg.max_action, max(cfg.min_action, a))
    pos, vel = float(state[0]), float(state[1])
    vel += a * cfg.power - cfg.gravity * math.cos(3.0 * pos / cfg.x_scale)
    vel = min(cfg.max_speed, max(-cfg.max_speed, vel))
    pos += vel
    if pos <= cfg.min_position:
        pos = cfg.min_position
        vel = max(0.0, vel)
    elif pos >= cfg.max_position:
        pos = cfg.max_position
    new_state = np.array([pos, vel])
    if pos >= cfg.goal_position:
        return new_state, cfg.goal_reward, True, TERM_GOAL
    return new_state, -cfg.action_cost * a * a, False, None


def _episode(policy: Network, cfg, rng: np.random.Generator) -> EpisodeResult:
    if isinstance(cfg, CartpoleConfig):
        reset, step = cartpole_reset, cartpole_step
    elif isinstance(cfg, MountainCarConfig):
        reset, step = mountaincar_reset, mountaincar_step
    else:
        raise TypeError(f"unknown environment config {type(cfg).__name__}")
    state = reset(cfg, rng)
    if policy.input_dim != state.size:
        raise ValueError(f"policy expects {policy.input_dim} inputs, state has {state.size}")
    total = 0.0
    termination = TERM_STEP_CAP
    steps = 0
    for _ in range(cfg.max_steps):
        action = forward(policy, state)[0]
        state, reward, done, term = step(cfg, state, action)
        total += reward
        steps += 1
        if done:
            termination = term
            break
    return EpisodeResult(total, steps, termination)


@dataclass(frozen=True)
class RolloutResult:
    mean_reward: float
    episodes: tuple[EpisodeResult, ...]


def rollout(policy: Network, cfg, episodes: int, seed: int) -> RolloutResult:
    """Mean reward over seeded episodes; bitwise deterministic given the seed."""
    if episodes < 1:
        raise ValueError("need at least one episode")
    children = np.random.SeedSequence(seed).spawn(episodes)
    results = tuple(_episode(policy, cfg, np.random.default_rng(c)) for c in children)
    mean = float(np.mean([r.total_reward for r in results]))
    return RolloutResult(mean, results)


def classify(mean_reward: float, benchmark: str) -> str:
    """good iff the mean clears the benchmark threshold (inclusive)."""
    if not math.isfinite(mean_reward):
        raise ValueError("mean reward must be finite")
    try:
        threshold = REWARD_THRESHOLDS[benchmark]
    except KeyError:
        raise ValueError(f"unknown benchmark {benchmark!r}") from None
    return "good" if mean_reward >= threshold else "bad"


_ENV_PRESETS = {
    "cartpole-indist": lambda: CartpoleConfig(),
    "cartpole-ood-left": lambda: CartpoleConfig(x_low=-10.0, x_high=-2.4),
    "cartpole-ood-right": lambda: CartpoleConfig(x_low=2.4, x_high=10.0),
    "mountaincar-indist": lambda: MountainCarConfig(),
    "mountaincar-ood": lambda: MountainCarConfig(
        min_position=-2.4,
        max_position=1.2,
        goal_position=0.9,
        init_position_range=(0.4, 0.5),
        init_velocity_range=(-0.4, -0.3),
    ),
}


def env_preset(name: str, seed: int | None = None):
    try:
        cfg = _ENV_PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown environment preset {name!r}; have {sorted(_ENV_PRESETS)}") from None
    return cfg if seed is None else replace(cfg, seed=seed)


def query_domain(name: str) -> tuple[Box, ...]:
    """Named input-domain boxes the disagreement queries range over."""
    if name == "cartpole":
        rest = [(-2.18, 2.66), (-0.23, 0.23), (-1.3, 1.22)]
        return (
            Box.from_bounds([(-10.0, -2.4)] + rest),
            Box.from_bounds([(2.4, 10.0)] + rest),
        )
    if name == "mountaincar":
        return (Box.from_bounds([(-2.4, 0.9), (-0.4, 0.134)]),)
    if name == "aurora-30d":
        patterns = [(-0.007, 0.007), (1.0, 1.04), (0.7, 8.0)]
        return (Box.from_bounds([patterns[i % 3] for i in range(30)]),)
    raise ValueError(f"unknown query domain {name!r}; have cartpole, mountaincar, aurora-30d")
