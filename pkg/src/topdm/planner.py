"""Sampling-based planners: MPPI, a cross-entropy variant and TOPDM.

TOPDM keeps MPPI's loop (perturb mean sequences, couple them into actions,
roll out, update) and changes three things, each behind its own toggle:

* ``mod1``  keep the top ``f_b`` fraction and duplicate it instead of taking a
  return-weighted average; execute the best sequence seen in the step.
* ``mod2``  warm-start the next planning step from the time-shifted sequence
  that was executed.
* ``mod3``  perturb only ``ceil(f_n * a_d)`` random action dimensions per
  (candidate, timestep) instead of every entry.

With all three off the loop is plain MPPI.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .rollout import evaluate_actions
from .sim import ContractViolation, Env, EnvState

MODES = ("mppi", "cem", "topdm")


def ceil_fraction(fraction: float, n: int) -> int:
    """``ceil(fraction * n)`` robust to binary round-off (0.3 * 20 -> 6, not 7)."""
    return int(math.ceil(round(fraction * n, 9)))


@dataclass
class PlannerConfig:
    tau: int = 20
    n_traj: int = 1000
    n_iter: int = 20
    beta: float = 0.7
    f_n: float = 0.3
    f_b: float = 0.05
    sigma_i: float = 0.9
    sigma_n: float = 0.3
    kappa: float = 1.0
    mode: str = "topdm"
    mod1: bool = True
    mod2: bool = True
    mod3: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractViolation(f"unknown planner mode {self.mode!r}")
        if self.tau < 1 or self.n_traj < 1 or self.n_iter < 1:
            raise ContractViolation("tau, n_traj and n_iter must be >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ContractViolation("beta must lie in [0, 1]")
        if not 0.0 <= self.f_n <= 1.0:
            raise ContractViolation("f_n must lie in [0, 1]")
        if not 0.0 < self.f_b <= 1.0 or ceil_fraction(self.f_b, self.n_traj) < 1:
            raise ContractViolation("f_b must lie in (0, 1]")
        if self.sigma_i < 0 or self.sigma_n < 0:
            raise ContractViolation("noise std must be >= 0")
        if self.mode == "mppi" and self.kappa <= 0:
            raise ContractViolation("kappa must be positive")

    @property
    def toggles(self) -> tuple[bool, bool, bool]:
        """Effective (mod1, mod2, mod3); MPPI ignores the flags."""
        if self.mode == "mppi":
            return False, False, False
        return self.mod1, self.mod2, self.mod3

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PlannerConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            if key not in kinds:
                raise ContractViolation(f"unknown planner option {key!r}")
            kind = kinds[key]
            if kind in ("bool", bool):
                if isinstance(value, str):
                    value = value.strip().lower() in ("1", "true", "yes", "on")
                kwargs[key] = bool(value)
            elif kind in ("int", int):
                kwargs[key] = int(value)
            elif kind in ("float", float):
                kwargs[key] = float(value)
            else:
                kwargs[key] = str(value)
        return cls(**kwargs)


def desk_defaults(**overrides) -> PlannerConfig:
    """Desk-scale TOPDM settings: short horizon, small population."""
    base = dict(tau=10, n_traj=64, n_iter=10)
    base.update(overrides)
    return PlannerConfig(**base)


# Ablation variants in the order they are reported.
VARIANTS = {
    "mppi": dict(mode="mppi"),
    "mod1": dict(mode="topdm", mod1=True, mod2=False, mod3=False),
    "mod12": dict(mode="topdm", mod1=True, mod2=True, mod3=False),
    "topdm": dict(mode="topdm", mod1=True, mod2=True, mod3=True),
}


@dataclass
class PlanState:
    mu: np.ndarray
    a: np.ndarray
    returns: np.ndarray
    best_mu: np.ndarray
    best_return: float = -math.inf
    # CEM sampling distribution; unused by the other modes.
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None
    # Running best return after each iteration of the last planning step.
    best_trace: list = field(default_factory=list)


def couple_actions(mu, a_prev, beta: float) -> np.ndarray:
    """``a_s = beta * mu_s + (1 - beta) * a_{s-1}``, seeded with ``a_prev``.

    Works on (tau, a_d) or batched (N, tau, a_d) arrays. No clamping here;
    the environment clamps at execution.
    """
    if not 0.0 <= beta <= 1.0:
        raise ContractViolation("beta must lie in [0, 1]")
    mu = np.asarray(mu, dtype=np.float64)
    out = np.empty_like(mu)
    prev = np.broadcast_to(np.asarray(a_prev, dtype=np.float64), mu[..., 0, :].shape)
    for s in range(mu.shape[-2]):
        prev = beta * mu[..., s, :] + (1.0 - beta) * prev
        out[..., s, :] = prev
    return out


def add_masked_noise(mu, f_n: float, sigma_n: float, rng: np.random.Generator) -> np.ndarray:
    """Add N(0, sigma_n) noise to ``ceil(f_n * a_d)`` distinct dims per (candidate, step)."""
    if not 0.0 <= f_n <= 1.0:
        raise ContractViolation("f_n must lie in [0, 1]")
    mu = np.asarray(mu, dtype=np.float64)
    a_d = mu.shape[-1]
    k = ceil_fraction(f_n, a_d)
    out = mu.copy()
    if k == 0:
        return out
    if k == a_d:
        return out + sigma_n * rng.standard_normal(mu.shape)
    # k smallest of a_d uniforms per (n, t) gives a uniform random k-subset.
    keys = rng.random(mu.shape)
    chosen = np.argpartition(keys, k - 1, axis=-1)[..., :k]
    noise = sigma_n * rng.standard_normal(mu.shape[:-1] + (k,))
    np.put_along_axis(out, chosen, np.take_along_axis(out, chosen, axis=-1) + noise, axis=-1)
    return out


def add_full_noise(mu, sigma_n: float, rng: np.random.Generator) -> np.ndarray:
    mu = np.asarray(mu, dtype=np.float64)
    return mu + sigma_n * rng.standard_normal(mu.shape)


def select_elites(returns, f_b: float) -> np.ndarray:
    """Source indices that refill a population of N from its top ``ceil(f_b N)``.

    Elites are ranked by return (ties: lower index first) and laid out
    round-robin, so each appears ``N // k`` or ``N // k + 1`` times and the
    best candidate comes first.
    """
    returns = np.asarray(returns, dtype=np.float64)
    n = returns.shape[0]
    k = ceil_fraction(f_b, n)
    if n < 1 or k < 1:
        raise ContractViolation("need at least one candidate and one elite")
    order = np.argsort(-returns, kind="stable")
    elites = order[:k]
    return elites[np.arange(n) % k]


def mppi_update(mus, returns, kappa: float) -> np.ndarray:
    """Return-weighted average ``sum_n mu_n exp(kappa R_n) / sum_k exp(kappa R_k)``."""
    returns = np.asarray(returns, dtype=np.float64)
    mus = np.asarray(mus, dtype=np.float64)
    if kappa <= 0:
        raise ContractViolation("kappa must be positive")
    if np.any(np.isnan(returns)) or np.any(returns == np.inf):
        raise ContractViolation("returns must be finite")
    top = returns.max()
    if top == -np.inf:
        raise ContractViolation("all returns are -inf")
    weights = np.exp(kappa * (returns - top))
    weights = weights / weights.sum()
    return np.tensordot(weights, mus, axes=(0, 0))


def warm_start_shift(best_mu, sigma_i: float, rng: np.random.Generator) -> np.ndarray:
    """Drop the first row, shift the rest up, draw the last row from N(0, sigma_i)."""
    best_mu = np.asarray(best_mu, dtype=np.float64)
    out = np.empty_like(best_mu)
    out[:-1] = best_mu[1:]
    out[-1] = sigma_i * rng.standard_normal(best_mu.shape[-1])
    return out


def fit_elites(mus, returns, f_b: float) -> tuple[np.ndarray, np.ndarray]:
    """Mean and std of the top ``ceil(f_b N)`` sequences (cross-entropy update)."""
    returns = np.asarray(returns, dtype=np.float64)
    k = ceil_fraction(f_b, returns.shape[0])
    elites = np.asarray(mus)[np.argsort(-returns, kind="stable")[:k]]
    return elites.mean(axis=0), elites.std(axis=0)


def initial_plan(config: PlannerConfig, action_dim: int, rng: np.random.Generator, a_prev=None) -> PlanState:
    shape = (config.n_traj, config.tau, action_dim)
    a = np.zeros((config.n_traj, config.tau + 1, action_dim))
    if a_prev is not None:
        a[:, 0, :] = a_prev
    plan = PlanState(
        mu=config.sigma_i * rng.standard_normal(shape),
        a=a,
        returns=np.full(config.n_traj, -math.inf),
        best_mu=np.zeros((config.tau, action_dim)),
    )
    if config.mode == "cem":
        plan.mean = np.zeros((config.tau, action_dim))
        plan.std = np.full((config.tau, action_dim), config.sigma_i)
    return plan


def plan_action(
    env: Env,
    current_state: EnvState,
    a_prev,
    plan: PlanState,
    config: PlannerConfig,
    rng: np.random.Generator,
    workers: int = 1,
) -> tuple[np.ndarray, PlanState]:
    """One planning step. Returns the (unclamped) action to execute and the next PlanState."""
    mod1, mod2, mod3 = config.toggles
    a_prev = np.asarray(a_prev, dtype=np.float64)
    n = config.n_traj
    mu = plan.mu
    mean, std = plan.mean, plan.std
    best_mu, best_return = None, -math.inf
    trace = []
    returns = None

    for _ in range(config.n_iter):
        if config.mode == "cem":
            mu = mean + std * rng.standard_normal(mu.shape)
        elif mod3:
            mu = add_masked_noise(mu, config.f_n, config.sigma_n, rng)
        else:
            mu = add_full_noise(mu, config.sigma_n, rng)

        coupled = couple_actions(mu, a_prev, config.beta)
        returns = evaluate_actions(env, current_state, coupled, workers)

        i_best = int(np.argmax(returns))
        if best_mu is None or returns[i_best] > best_return:
            best_return = float(returns[i_best])
            best_mu = mu[i_best].copy()
        trace.append(best_return)

        if config.mode == "cem":
            mean, std = fit_elites(mu, returns, config.f_b)
        elif mod1:
            mu = mu[select_elites(returns, config.f_b)]
        else:
            mean = mppi_update(mu, returns, config.kappa)
            mu = np.broadcast_to(mean, mu.shape).copy()

    if config.mode == "cem":
        executed = mean
    elif mod1:
        executed = best_mu
    else:
        executed = mean
    action = config.beta * executed[0] + (1.0 - config.beta) * a_prev

    if mod2:
        start = warm_start_shift(executed, config.sigma_i, rng)
        next_mu = np.broadcast_to(start, mu.shape).copy()
        next_mean = start
    else:
        next_mu = config.sigma_i * rng.standard_normal(mu.shape)
        next_mean = np.zeros_like(executed)

    next_a = np.zeros((n, config.tau + 1, mu.shape[-1]))
    next_a[:, 0, :] = action
    next_a[:, 1:, :] = coupled
    new_plan = PlanState(
        mu=next_mu,
        a=next_a,
        returns=returns,
        best_mu=best_mu,
        best_return=best_return,
        best_trace=trace,
    )
    if config.mode == "cem":
        new_plan.mean = next_mean
        new_plan.std = np.full_like(executed, config.sigma_i)
    return action, new_plan


@dataclass
class EpisodeResult:
    demo: "DemoTrajectory"
    total_return: float
    success: bool
    wall_seconds: float
    best_traces: list


def run_episode(
    env: Env,
    config: PlannerConfig,
    episode_length: Optional[int] = None,
    seed: int = 0,
    workers: int = 1,
    planning_env: Optional[Env] = None,
) -> EpisodeResult:
    """Model-predictive control loop: plan, execute one action, repeat.

    ``planning_env`` (same state layout as ``env``) supplies the rollout
    reward if given; goal tasks use it to plan on the dense reward while the
    episode is scored on ``env``'s own reward.
    """
    from .demos import DemoTrajectory

    started = time.perf_counter()
    episode_length = env.episode_length if episode_length is None else episode_length
    model = env if planning_env is None else planning_env
    env.reset(seed)
    a_prev = np.zeros(env.action_dim)
    plan = initial_plan(config, env.action_dim, np.random.default_rng([seed, 0, 1]), a_prev)

    states = [env.snapshot()]
    observations = [env.observe()]
    actions, rewards, traces = [], [], []
    success = False
    for t in range(episode_length):
        state = env.snapshot()
        rng = np.random.default_rng([seed, t, 0])
        model_state = EnvState(state.values, model.env_id, state.step_index)
        action, plan = plan_action(model, model_state, a_prev, plan, config, rng, workers)
        executed = np.clip(action, -1.0, 1.0)
        result = env.step(executed)
        states.append(env.snapshot())
        observations.append(result.observation)
        actions.append(executed)
        rewards.append(result.reward)
        traces.append(plan.best_trace)
        success = result.success
        a_prev = action

    total = 0.0
    for r in rewards:
        total += r
    demo = DemoTrajectory(
        env_id=env.env_id,
        seed=seed,
        states=states,
        observations=observations,
        actions=actions,
        rewards=rewards,
        planner_config=config.to_dict(),
        total_return=total,
        success=bool(success) if env.goal_based else False,
        env_options=env.options(),
    )
    return EpisodeResult(demo, total, demo.success, time.perf_counter() - started, traces)
