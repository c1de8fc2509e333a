"""Cross-entropy-method policy synthesis and labeled fixture generation.

The optimizer samples flat weight vectors from a diagonal Gaussian, scores
them by seeded rollouts (a whole generation shares its episode seeds, so
candidates compete on identical initial states), and refits to the elites.
Populations are evaluated in lockstep with vectorized dynamics, which keeps
training a policy on these tasks in the seconds range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace, asdict

import numpy as np

from .boxes import Box
from .envs import (
    REWARD_THRESHOLDS,
    CartpoleConfig,
    MountainCarConfig,
    query_domain,
    rollout,
)
from .nets import Layer, Network, forward_many

STATE_DIMS = {"cartpole": 4, "mountaincar": 2}


def default_architecture(benchmark: str) -> tuple[int, ...]:
    if benchmark == "cartpole":
        return (32, 16)
    if benchmark == "mountaincar":
        return (64, 16)
    raise ValueError(f"no default architecture for benchmark {benchmark!r}")


def fixture_train_config(benchmark: str) -> "TrainConfig":
    """Tuned recipe for small, verification-friendly fixture policies.

    Cartpole policies are trained blind to cart position (masked first-layer
    column), which makes their behavior identical on every platform; the
    action penalty keeps output scales comparable across seeds.
    """
    if benchmark == "cartpole":
        return TrainConfig(
            architecture=(12, 8),
            episodes_per_eval=4,
            generations=40,
            weight_penalty=0.01,
            action_penalty=0.1,
            velocity_penalty=1.0,
            init_scale=3.0,
            mask_inputs=(0,),
            target_reward=495.0,
        )
    if benchmark == "mountaincar":
        return TrainConfig(
            architecture=(12, 8),
            episodes_per_eval=4,
            generations=40,
            weight_penalty=0.01,
            init_spread=0.9,
            target_reward=92.0,
        )
    raise ValueError(f"no fixture recipe for benchmark {benchmark!r}")


@dataclass(frozen=True)
class TrainConfig:
    architecture: tuple[int, ...] = (32, 16)
    population: int = 48
    elite_fraction: float = 0.125
    generations: int = 24
    episodes_per_eval: int = 2
    noise_decay: float = 0.85
    init_sigma: float = 1.0
    weight_penalty: float = 0.0  # fitness = reward - weight_penalty * sum(w^2)
    action_penalty: float = 0.0  # fitness cost per squared action unit, training only
    velocity_penalty: float = 0.0  # fitness cost per squared velocity unit, training only
    init_spread: float | None = None  # widen the reset distribution while training
    init_scale: float = 1.0  # scale factor on every init halfwidth while training
    mask_inputs: tuple[int, ...] = ()  # input dims the policy must ignore (zeroed weights)
    target_reward: float | None = None  # stop early once the elite mean clears it
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.architecture or any(h < 1 for h in self.architecture):
            raise ValueError("architecture needs positive layer sizes")
        if not (0.0 < self.elite_fraction < 1.0):
            raise ValueError("elite_fraction must be in (0, 1)")
        if self.population < 2 * self.elite_count:
            raise ValueError("population must be at least twice the elite count")
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        if self.episodes_per_eval < 1:
            raise ValueError("episodes_per_eval must be >= 1")
        if not (0.0 < self.noise_decay <= 1.0):
            raise ValueError("noise_decay must be in (0, 1]")
        if self.init_sigma <= 0:
            raise ValueError("init_sigma must be positive")
        if self.weight_penalty < 0 or self.action_penalty < 0 or self.velocity_penalty < 0:
            raise ValueError("penalties must be nonnegative")
        if self.init_spread is not None and self.init_spread <= 0:
            raise ValueError("init_spread must be positive")
        if self.init_scale <= 0:
            raise ValueError("init_scale must be positive")
        if any(d < 0 for d in self.mask_inputs):
            raise ValueError("mask_inputs must be nonnegative dims")
        object.__setattr__(self, "architecture", tuple(int(h) for h in self.architecture))
        object.__setattr__(self, "mask_inputs", tuple(int(d) for d in self.mask_inputs))

    @property
    def elite_count(self) -> int:
        return max(1, math.floor(self.population * self.elite_fraction))


def _shapes(input_dim: int, architecture: tuple[int, ...]) -> list[tuple[int, int]]:
    dims = [input_dim, *architecture, 1]
    return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]


def flat_dim(input_dim: int, architecture: tuple[int, ...]) -> int:
    return sum(o * i + o for o, i in _shapes(input_dim, architecture))


def net_from_flat(name: str, input_dim: int, architecture: tuple[int, ...], vec: np.ndarray) -> Network:
    """Unflatten a weight vector into a scalar-output policy network."""
    shapes = _shapes(input_dim, architecture)
    layers = []
    at = 0
    for li, (o, i) in enumerate(shapes):
        w = vec[at : at + o * i].reshape(o, i)
        at += o * i
        b = vec[at : at + o]
        at += o
        act = "linear" if li == len(shapes) - 1 else "relu"
        layers.append(Layer(w.copy(), b.copy(), act))
    if at != vec.size:
        raise ValueError(f"weight vector has {vec.size} entries, expected {at}")
    return Network(name, input_dim, tuple(layers))


def _unpack_population(pop: np.ndarray, input_dim: int, architecture: tuple[int, ...]):
    """Views of a (P, flat) population as per-layer weight tensors."""
    shapes = _shapes(input_dim, architecture)
    tensors = []
    at = 0
    p = pop.shape[0]
    for o, i in shapes:
        w = pop[:, at : at + o * i].reshape(p, o, i)
        at += o * i
        b = pop[:, at : at + o]
        at += o
        tensors.append((w, b))
    return tensors


def _population_actions(tensors, states: np.ndarray) -> np.ndarray:
    """(P, E, state) -> (P, E) scalar actions, all policies at once."""
    v = states
    for li, (w, b) in enumerate(tensors):
        v = np.einsum("poi,pei->peo", w, v) + b[:, None, :]
        if li < len(tensors) - 1:
            v = np.maximum(v, 0.0)
    return v[..., 0]


def _init_states(env_cfg, episodes: int, seed_key, spread: float | None = None,
                 scale: float = 1.0) -> np.ndarray:
    """Episode start states; spread widens position, scale widens everything."""
    rng = np.random.default_rng(seed_key)
    if isinstance(env_cfg, CartpoleConfig):
        center = np.array([0.5 * (env_cfg.x_low + env_cfg.x_high), 0.0, 0.0, 0.0])
        hw = np.full(4, env_cfg.init_center_halfwidth * scale)
        if spread is not None:
            hw[0] = spread
        return center + rng.uniform(-hw, hw, size=(episodes, 4))
    lo, hi = env_cfg.init_position_range
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo) * scale if spread is None else spread
    pos = rng.uniform(center - half, center + half, size=episodes)
    vel = rng.uniform(*env_cfg.init_velocity_range, size=episodes)
    return np.stack([pos, vel], axis=1)


def _rollout_population(env_cfg, tensors, init_states: np.ndarray, population: int):
    """Per-candidate mean reward, squared-action cost, and squared-velocity cost."""
    e = init_states.shape[0]
    states = np.broadcast_to(init_states, (population,) + init_states.shape).copy()
    alive = np.ones((population, e), dtype=bool)
    reward = np.zeros((population, e))
    action_cost = np.zeros((population, e))
    velocity_cost = np.zeros((population, e))
    cartpole = isinstance(env_cfg, CartpoleConfig)
    for _ in range(env_cfg.max_steps):
        if not alive.any():
            break
        actions = _population_actions(tensors, states)
        action_cost += np.where(alive, actions * actions, 0.0)
        velocity_cost += np.where(alive, states[..., 1] * states[..., 1], 0.0)
        if cartpole and env_cfg.action_min_magnitude > 0.0:
            floor = env_cfg.action_min_magnitude
            small = (np.abs(actions) < floor) & (actions != 0.0)
            actions = np.where(small, np.sign(actions) * floor, actions)
        if cartpole:
            force = env_cfg.force_scale * np.clip(actions, -1.0, 1.0)
            x, vx, th, vth = (states[..., i] for i in range(4))
            sin_th, cos_th = np.sin(th), np.cos(th)
            total_mass = env_cfg.cart_mass + env_cfg.pole_mass
            pml = env_cfg.pole_mass * env_cfg.pole_half_length
            temp = (force + pml * vth * vth * sin_th) / total_mass
            th_acc = (env_cfg.gravity * sin_th - cos_th * temp) / (
                env_cfg.pole_half_length
                * (4.0 / 3.0 - env_cfg.pole_mass * cos_th * cos_th / total_mass)
            )
            x_acc = temp - pml * th_acc * cos_th / total_mass
            nx = x + env_cfg.dt * vx
            nvx = vx + env_cfg.dt * x_acc
            nth = th + env_cfg.dt * vth
            nvth = vth + env_cfg.dt * th_acc
            new_states = np.stack([nx, nvx, nth, nvth], axis=-1)
            failed = (
                (nx < env_cfg.x_low)
                | (nx > env_cfg.x_high)
                | (np.abs(nth) > env_cfg.angle_fail_threshold)
            )
            reward += (alive & ~failed).astype(np.float64)
            alive &= ~failed
        else:
            a = np.clip(actions, env_cfg.min_action, env_cfg.max_action)
            pos, vel = states[..., 0], states[..., 1]
            vel = vel + a * env_cfg.power - env_cfg.gravity * np.cos(3.0 * pos / env_cfg.x_scale)
            vel = np.clip(vel, -env_cfg.max_speed, env_cfg.max_speed)
            pos = pos + vel
            at_floor = pos <= env_cfg.min_position
            pos = np.clip(pos, env_cfg.min_position, env_cfg.max_position)
            vel = np.where(at_floor, np.maximum(0.0, vel), vel)
            new_states = np.stack([pos, vel], axis=-1)
            goal = pos >= env_cfg.goal_position
            step_reward = np.where(goal, env_cfg.goal_reward, -env_cfg.action_cost * a * a)
            reward += np.where(alive, step_reward, 0.0)
            alive &= ~goal
        states = np.where(alive[..., None], new_states, states)
    return reward.mean(axis=1), action_cost.mean(axis=1), velocity_cost.mean(axis=1)


def _state_dim(env_cfg) -> int:
    return 4 if isinstance(env_cfg, CartpoleConfig) else 2


def cem_train(env_cfg, cfg: TrainConfig) -> tuple[Network, list[dict]]:
    """Train one policy; returns the best-ever candidate and reward history.

    Candidates are ranked by reward minus the squared-weight penalty, so a
    positive weight_penalty steers the search toward the smallest policy that
    still earns the reward. init_spread widens the start-position range during
    training (within the task's usual bounds); evaluation resets are untouched.
    mask_inputs zeroes the first-layer weights of the named input dims in every
    candidate, so the trained policy provably ignores those state variables.
    """
    input_dim = _state_dim(env_cfg)
    if any(d >= input_dim for d in cfg.mask_inputs):
        raise ValueError(f"mask_inputs out of range for {input_dim}-d state")
    dim = flat_dim(input_dim, cfg.architecture)
    masked_cols = np.array(
        [d + input_dim * r for d in cfg.mask_inputs for r in range(cfg.architecture[0])],
        dtype=int,
    )
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x9E3779B9]))
    mu = np.zeros(dim)
    sigma = np.full(dim, cfg.init_sigma)
    best_vec = mu.copy()
    best_fitness = -np.inf
    best_reward = -np.inf
    history: list[dict] = []
    for gen in range(cfg.generations):
        pop = mu + sigma * rng.standard_normal((cfg.population, dim))
        pop[0] = mu  # always evaluate the current mean
        if masked_cols.size:
            pop[:, masked_cols] = 0.0
        tensors = _unpack_population(pop, input_dim, cfg.architecture)
        inits = _init_states(
            env_cfg, cfg.episodes_per_eval, [cfg.seed, 1000 + gen], cfg.init_spread, cfg.init_scale
        )
        rewards, action_costs, velocity_costs = _rollout_population(
            env_cfg, tensors, inits, cfg.population
        )
        fitness = (
            rewards
            - cfg.weight_penalty * np.sum(pop * pop, axis=1)
            - cfg.action_penalty * action_costs
            - cfg.velocity_penalty * velocity_costs
        )
        order = np.argsort(-fitness, kind="stable")
        elites = pop[order[: cfg.elite_count]]
        elite_rewards = rewards[order[: cfg.elite_count]]
        if float(fitness[order[0]]) > best_fitness:
            best_fitness = float(fitness[order[0]])
            best_reward = float(rewards[order[0]])
            best_vec = pop[order[0]].copy()
        extra = cfg.init_sigma * cfg.noise_decay ** (gen + 1)
        mu = elites.mean(axis=0)
        sigma = np.sqrt(elites.var(axis=0) + extra * extra)
        history.append(
            {
                "generation": gen,
                "best": float(rewards[order[0]]),
                "elite_mean": float(elite_rewards.mean()),
                "population_mean": float(rewards.mean()),
                "best_so_far": best_reward,
            }
        )
        if cfg.target_reward is not None and elite_rewards.mean() >= cfg.target_reward:
            break
    net = net_from_flat(f"cem-{cfg.seed}", input_dim, cfg.architecture, best_vec)
    return net, history


@dataclass(frozen=True)
class FixtureSet:
    networks: dict[str, Network]
    labels: dict[str, str]  # construction labels: "good" / "bad"
    manifest: dict


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def make_fixture_set(
    env_cfg,
    n_good: int = 8,
    n_bad: int = 4,
    seed: int = 0,
    train_config: TrainConfig | None = None,
    ood_boxes: tuple[Box, ...] | None = None,
    divergence_target: float = 80.0,
    rejection_budget: int = 60,
    eval_episodes: int = 20,
    quality_floor: float | None = None,
) -> FixtureSet:
    """Train n_good policies, then derive n_bad in-distribution lookalikes.

    A bad fixture starts from a freshly trained policy and perturbs the first
    layer's weights on the state dimension the OOD box stretches furthest,
    rejection-sampling until in-distribution reward still clears the benchmark
    threshold while outputs on the OOD box move by at least divergence_target.
    OOD reward is never consulted; it stays held out as ground truth.

    quality_floor (default: the benchmark threshold) is the in-distribution
    mean a freshly trained policy must reach before it is accepted.
    """
    if n_good < 2:
        raise ValueError("need at least 2 good fixtures")
    if n_bad < 0:
        raise ValueError("n_bad must be nonnegative")
    benchmark = "cartpole" if isinstance(env_cfg, CartpoleConfig) else "mountaincar"
    threshold = REWARD_THRESHOLDS[benchmark]
    floor = threshold if quality_floor is None else float(quality_floor)
    base_cfg = train_config or fixture_train_config(benchmark)
    if ood_boxes is None:
        ood_boxes = query_domain(benchmark)

    networks: dict[str, Network] = {}
    labels: dict[str, str] = {}
    entries: dict[str, dict] = {}
    skipped: list[str] = []

    def train_verified(tag: str, attempt_base: int) -> tuple[Network, float, int]:
        """Train until the public rollout confirms the quality floor."""
        for attempt in range(10):
            t_seed = _derived_seed(seed, attempt_base, attempt)
            cfg = replace(base_cfg, seed=t_seed)
            net, _ = cem_train(env_cfg, cfg)
            mean = rollout(net, env_cfg, eval_episodes, _derived_seed(seed, attempt_base, attempt, 7)).mean_reward
            if mean >= floor:
                return replace(net, name=tag), mean, t_seed
        raise RuntimeError(f"could not train a passing policy for {tag} in 10 attempts")

    for i in range(n_good):
        tag = f"good-{i:02d}"
        net, mean, t_seed = train_verified(tag, 100 + i)
        networks[tag] = net
        labels[tag] = "good"
        entries[tag] = {"label": "good", "train_seed": t_seed, "in_dist_mean": mean}

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBAD]))
    probe = np.vstack([b.sample(np.random.default_rng(_derived_seed(seed, 42)), 128) for b in ood_boxes])
    stretch = np.max(
        [np.maximum(np.abs(b.lower), np.abs(b.upper)) for b in ood_boxes], axis=0
    )
    novel_dim = int(np.argmax(stretch))

    for j in range(n_bad):
        tag = f"bad-{j:02d}"
        base, base_mean, t_seed = train_verified(f"{tag}-base", 500 + j)
        base_out = forward_many(base, probe)
        accepted = None
        for attempt in range(rejection_budget):
            scale = 0.5 * (1.3 ** (attempt // 3))
            w0 = base.layers[0]
            w = w0.weights.copy()
            w[:, novel_dim] = w[:, novel_dim] + scale * rng.standard_normal(w.shape[0])
            cand_layers = (Layer(w, w0.bias.copy(), w0.activation),) + base.layers[1:]
            cand = Network(tag, base.input_dim, cand_layers)
            divergence = float(np.max(np.abs(forward_many(cand, probe) - base_out)))
            if divergence < divergence_target:
                continue
            mean = rollout(cand, env_cfg, eval_episodes, _derived_seed(seed, 900 + j, attempt)).mean_reward
            if mean >= threshold:
                accepted = (cand, mean, divergence, scale, attempt)
                break
        if accepted is None:
            skipped.append(tag)
            continue
        cand, mean, divergence, scale, attempt = accepted
        networks[tag] = cand
        labels[tag] = "bad"
        entries[tag] = {
            "label": "bad",
            "train_seed": t_seed,
            "in_dist_mean": mean,
            "base_in_dist_mean": base_mean,
            "perturb_dim": novel_dim,
            "perturb_scale": scale,
            "ood_output_divergence": divergence,
            "attempts": attempt + 1,
        }

    manifest = {
        "benchmark": benchmark,
        "seed": seed,
        "threshold": threshold,
        "quality_floor": floor,
        "train_config": asdict(base_cfg),
        "divergence_target": divergence_target,
        "models": entries,
        "skipped_bad": skipped,
    }
    return FixtureSet(networks, labels, manifest)
