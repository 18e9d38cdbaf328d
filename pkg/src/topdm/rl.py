"""TD3 with action coupling and demo-restart segment collection.

The policy sees ``(observation, previous action)`` and proposes ``mu``; the
executed action is ``clamp(beta * mu + (1 - beta) * a_prev + noise)``. Data is
gathered in fixed-length segments; with probability ``p_restart`` a segment
starts from a uniformly sampled demonstration state instead of continuing
the ongoing episode. ``p_restart`` decays geometrically per environment step.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from .demos import DemoStore
from .envs import make_env
from .nn import Adam, Mlp, polyak_update
from .sim import ContractViolation, Env

CURVE_COLUMNS = (
    "env_step",
    "eval_median_return",
    "eval_min_return",
    "eval_max_return",
    "p_restart",
    "wall_seconds",
)


@dataclass
class Td3Config:
    start_timesteps: int = 25_000
    total_timesteps: int = 10_000_000
    exploration_noise: float = 0.1
    batch_size: int = 256
    gamma: float = 0.98
    target_update_rate: float = 0.005
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    policy_frequency: int = 2
    beta: float = 0.7
    segment_length: int = 15
    demo_restart_prob_init: float = 0.7
    demo_restart_decay: float = 0.999996
    buffer_capacity: int = 1_000_000
    hidden: int = 256
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    eval_every: int = 5_000
    eval_episodes: int = 5
    use_demos: bool = True
    coupled_targets: bool = True

    def __post_init__(self):
        for name in ("demo_restart_prob_init", "demo_restart_decay", "target_update_rate", "beta"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ContractViolation(f"{name} must lie in [0, 1]")
        if not 0.0 < self.gamma < 1.0:
            raise ContractViolation("gamma must lie in (0, 1)")
        if self.segment_length < 1:
            raise ContractViolation("segment_length must be >= 1")
        if self.policy_frequency < 1 or self.batch_size < 1:
            raise ContractViolation("policy_frequency and batch_size must be >= 1")

    @classmethod
    def desk(cls, **overrides) -> "Td3Config":
        """Desk-scale run: fewer steps, smaller buffer and networks, same ratios."""
        base = dict(total_timesteps=300_000, buffer_capacity=200_000, hidden=64)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Td3Config":
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            if key not in kinds:
                raise ContractViolation(f"unknown td3 option {key!r}")
            kind = kinds[key]
            if kind in ("bool", bool):
                if isinstance(value, str):
                    value = value.strip().lower() in ("1", "true", "yes", "on")
                kwargs[key] = bool(value)
            elif kind in ("int", int):
                kwargs[key] = int(float(value))
            else:
                kwargs[key] = float(value)
        return cls(**kwargs)


@dataclass
class ReplayTransition:
    obs: np.ndarray
    prev_action: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    done: bool


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling."""

    def __init__(self, obs_dim: int, action_dim: int, capacity: int):
        self.capacity = int(capacity)
        self.obs = np.zeros((self.capacity, obs_dim))
        self.prev_action = np.zeros((self.capacity, action_dim))
        self.action = np.zeros((self.capacity, action_dim))
        self.reward = np.zeros(self.capacity)
        self.next_obs = np.zeros((self.capacity, obs_dim))
        self.done = np.zeros(self.capacity)
        self.size = 0
        self.ptr = 0

    def __len__(self):
        return self.size

    def add(self, obs, prev_action, action, reward, next_obs, done) -> None:
        i = self.ptr
        self.obs[i] = obs
        self.prev_action[i] = prev_action
        self.action[i] = action
        self.reward[i] = reward
        self.next_obs[i] = next_obs
        self.done[i] = float(done)
        self.ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def push(self, t: ReplayTransition) -> None:
        self.add(t.obs, t.prev_action, t.action, t.reward, t.next_obs, t.done)

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, self.size, size=batch_size)

    def batch(self, idx):
        return (self.obs[idx], self.prev_action[idx], self.action[idx],
                self.reward[idx], self.next_obs[idx], self.done[idx])

    def sample(self, batch_size: int, rng: np.random.Generator):
        return self.batch(self.sample_indices(batch_size, rng))


def coupled_policy_action(actor: Mlp, obs, a_prev, beta: float, exploration_noise: float,
                          rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """``clamp(beta * actor(obs, a_prev) + (1 - beta) * a_prev + eps)``."""
    if not 0.0 <= beta <= 1.0:
        raise ContractViolation("beta must lie in [0, 1]")
    a_prev = np.asarray(a_prev, dtype=np.float64)
    mu = actor(np.concatenate([obs, a_prev]))
    a = beta * mu + (1.0 - beta) * a_prev
    if exploration_noise > 0:
        a = a + exploration_noise * rng.standard_normal(a.shape)
    return np.clip(a, -1.0, 1.0)


class Agent:
    """Actor, twin critics, their targets and optimisers."""

    def __init__(self, obs_dim: int, action_dim: int, config: Td3Config, rng: np.random.Generator):
        h = config.hidden
        self.obs_dim, self.action_dim = obs_dim, action_dim
        self.actor = Mlp([obs_dim + action_dim, h, h, action_dim], "tanh", rng, final_scale=0.01)
        self.critic1 = Mlp([obs_dim + action_dim, h, h, 1], "identity", rng)
        self.critic2 = Mlp([obs_dim + action_dim, h, h, 1], "identity", rng)
        self.actor_target = self.actor.copy()
        self.critic1_target = self.critic1.copy()
        self.critic2_target = self.critic2.copy()
        self.actor_opt = Adam(self.actor.n_params, lr=config.actor_lr)
        self.critic1_opt = Adam(self.critic1.n_params, lr=config.critic_lr)
        self.critic2_opt = Adam(self.critic2.n_params, lr=config.critic_lr)
        self.updates = 0


def td3_update(agent: Agent, buffer: ReplayBuffer, config: Td3Config, rng: np.random.Generator) -> dict:
    """One TD3 critic step (and, every ``policy_frequency`` calls, an actor step).

    Returns the losses; an empty dict if the buffer holds fewer than one batch.
    """
    if len(buffer) < config.batch_size:
        return {}
    beta = config.beta
    obs, prev, act, rew, nxt, done = buffer.sample(config.batch_size, rng)
    n = obs.shape[0]

    noise = np.clip(config.policy_noise * rng.standard_normal(act.shape), -config.noise_clip, config.noise_clip)
    mu_next = agent.actor_target(np.concatenate([nxt, act], axis=1))
    if config.coupled_targets:
        next_act = beta * mu_next + (1.0 - beta) * act
    else:
        next_act = mu_next
    next_act = np.clip(next_act + noise, -1.0, 1.0)
    target_in = np.concatenate([nxt, next_act], axis=1)
    q_next = np.minimum(agent.critic1_target(target_in)[:, 0], agent.critic2_target(target_in)[:, 0])
    y = rew + config.gamma * (1.0 - done) * q_next

    critic_in = np.concatenate([obs, act], axis=1)
    losses = {}
    for name, critic, opt in (("critic1", agent.critic1, agent.critic1_opt),
                              ("critic2", agent.critic2, agent.critic2_opt)):
        err = critic(critic_in)[:, 0] - y
        losses[name] = float(np.mean(err * err))
        grads, _ = critic.backward((2.0 / n) * err[:, None])
        opt.step(critic.params, grads)
    losses["critic"] = losses["critic1"] + losses["critic2"]

    agent.updates += 1
    if agent.updates % config.policy_frequency == 0:
        actor_in = np.concatenate([obs, prev], axis=1)
        mu = agent.actor(actor_in)
        a = beta * mu + (1.0 - beta) * prev
        q = agent.critic1(np.concatenate([obs, a], axis=1))[:, 0]
        losses["actor"] = float(-np.mean(q))
        _, dq_din = agent.critic1.backward(np.full((n, 1), -1.0 / n))
        dmu = beta * dq_din[:, agent.obs_dim:]
        actor_grads, _ = agent.actor.backward(dmu)
        agent.actor_opt.step(agent.actor.params, actor_grads)
        rate = config.target_update_rate
        polyak_update(agent.actor_target, agent.actor, rate)
        polyak_update(agent.critic1_target, agent.critic1, rate)
        polyak_update(agent.critic2_target, agent.critic2, rate)
    return losses


class Collector:
    """Drives one environment for data collection, segment by segment.

    Holds the ongoing episode (the env's own state), the previous executed
    action and the number of environment steps taken so far, from which the
    current restart probability follows.
    """

    def __init__(self, env: Env, config: Td3Config, demos: Optional[DemoStore], rng: np.random.Generator):
        self.env = env
        self.config = config
        self.demos = demos
        self.rng = rng
        self.steps = 0
        self.restarts = 0
        if self.p_restart > 0 and (demos is None or len(demos) == 0):
            raise ContractViolation("demo restarts enabled but the demo store is empty")
        self._new_episode()

    @property
    def p_restart(self) -> float:
        if not self.config.use_demos:
            return 0.0
        return self.config.demo_restart_prob_init * self.config.demo_restart_decay ** self.steps

    def _new_episode(self):
        self.obs = self.env.reset(int(self.rng.integers(2**31))).flat()
        self.a_prev = np.zeros(self.env.action_dim)

    def start_segment(self) -> bool:
        """Maybe jump to a demo state. Returns True on a restart."""
        p = self.p_restart
        if p > 0 and self.rng.random() < p:
            state, obs, a_prev = self.demos.sample_restart(self.rng)
            self.env.restore(state)
            self.obs = self.env.observe().flat()
            self.a_prev = a_prev
            self.restarts += 1
            return True
        if self.env.remaining_steps == 0:
            self._new_episode()
        return False

    def step(self, actor: Mlp, buffer: ReplayBuffer, random_policy: bool = False) -> float:
        cfg = self.config
        if random_policy:
            mu = self.rng.uniform(-1.0, 1.0, size=self.env.action_dim)
            action = np.clip(cfg.beta * mu + (1.0 - cfg.beta) * self.a_prev, -1.0, 1.0)
        else:
            action = coupled_policy_action(actor, self.obs, self.a_prev, cfg.beta, cfg.exploration_noise, self.rng)
        result = self.env.step(action)
        next_obs = result.observation.flat()
        # Bundled envs have no terminal states; time limits are not terminal.
        buffer.add(self.obs, self.a_prev, action, result.reward, next_obs, False)
        self.obs = next_obs
        self.a_prev = action
        self.steps += 1
        if result.done:
            self._new_episode()
        return result.reward

    def collect_segment(self, actor: Mlp, buffer: ReplayBuffer, random_policy: bool = False,
                        max_steps: Optional[int] = None, on_step: Optional[Callable] = None) -> int:
        self.start_segment()
        n = self.config.segment_length if max_steps is None else min(max_steps, self.config.segment_length)
        for _ in range(n):
            self.step(actor, buffer, random_policy)
            if on_step is not None:
                on_step()
        return n


def collect_segment(env, actor, buffer, demos, p_restart, config, rng, collector: Optional[Collector] = None):
    """Functional form: collect one segment and return ``(added, new p_restart)``.

    ``p_restart`` must agree with ``collector.p_restart`` when a collector is
    passed; without one a fresh collector continues from ``p_restart``.
    """
    if collector is None:
        init = config.demo_restart_prob_init
        steps = 0 if p_restart >= init else int(round(math.log(p_restart / init) / math.log(config.demo_restart_decay)))
        collector = Collector(env, config, demos, rng)
        collector.steps = steps
    added = collector.collect_segment(actor, buffer)
    return added, collector.p_restart


def evaluate_policy(env: Env, actor: Mlp, beta: float, episodes: int, seed_base: int = 10_000) -> list[float]:
    """Deterministic (noise-free) returns over ``episodes`` fixed-seed episodes."""
    returns = []
    for i in range(episodes):
        obs = env.reset(seed_base + i).flat()
        a_prev = np.zeros(env.action_dim)
        total = 0.0
        for _ in range(env.episode_length):
            action = coupled_policy_action(actor, obs, a_prev, beta, 0.0)
            result = env.step(action)
            total += result.reward
            obs = result.observation.flat()
            a_prev = action
        returns.append(total)
    return returns


@dataclass
class TrainResult:
    curve: list = field(default_factory=list)
    agent: Optional[Agent] = None
    p_restart: float = 0.0
    restarts: int = 0
    updates: int = 0

    @property
    def final_return(self) -> float:
        return self.curve[-1]["eval_median_return"] if self.curve else float("nan")


def train(env_id: str, config: Td3Config, demos: Optional[DemoStore] = None, seed: int = 0,
          env_options: Optional[dict] = None, timing: bool = True, log: Optional[Callable] = None) -> TrainResult:
    """Alternate collection and updates; evaluate every ``eval_every`` steps and at the end."""
    started = time.perf_counter()
    env_options = env_options or {}
    env = make_env(env_id, **env_options)
    eval_env = make_env(env_id, **env_options)
    rng = np.random.default_rng([seed, 1])
    update_rng = np.random.default_rng([seed, 2])
    obs_dim = env.reset(0).flat().shape[0]
    agent = Agent(obs_dim, env.action_dim, config, np.random.default_rng([seed, 0]))
    buffer = ReplayBuffer(obs_dim, env.action_dim, config.buffer_capacity)
    collector = Collector(env, config, demos if config.use_demos else None, rng)
    result = TrainResult(agent=agent)

    def evaluate():
        rets = evaluate_policy(eval_env, agent.actor, config.beta, config.eval_episodes)
        row = {
            "env_step": collector.steps,
            "eval_median_return": float(np.median(rets)),
            "eval_min_return": float(np.min(rets)),
            "eval_max_return": float(np.max(rets)),
            "p_restart": collector.p_restart,
            "wall_seconds": time.perf_counter() - started if timing else 0.0,
        }
        result.curve.append(row)
        if log is not None:
            log(row)

    def after_step():
        if collector.steps > config.start_timesteps:
            td3_update(agent, buffer, config, update_rng)
        if collector.steps % config.eval_every == 0 and collector.steps < config.total_timesteps:
            evaluate()

    while collector.steps < config.total_timesteps:
        warmup = collector.steps < config.start_timesteps
        collector.collect_segment(agent.actor, buffer, random_policy=warmup,
                                  max_steps=config.total_timesteps - collector.steps, on_step=after_step)
    evaluate()
    result.p_restart = collector.p_restart
    result.restarts = collector.restarts
    result.updates = agent.updates
    return result


def write_curve(rows, path, timing: bool = True) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_COLUMNS)
        for row in rows:
            writer.writerow([
                row["env_step"],
                repr(row["eval_median_return"]),
                repr(row["eval_min_return"]),
                repr(row["eval_max_return"]),
                repr(row["p_restart"]),
                f"{row['wall_seconds']:.3f}" if timing else "",
            ])


def read_curve(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for rec in csv.DictReader(fh):
            rows.append({
                "env_step": int(rec["env_step"]),
                "eval_median_return": float(rec["eval_median_return"]),
                "eval_min_return": float(rec["eval_min_return"]),
                "eval_max_return": float(rec["eval_max_return"]),
                "p_restart": float(rec["p_restart"]),
                "wall_seconds": float(rec["wall_seconds"]) if rec["wall_seconds"] else 0.0,
            })
        return rows
