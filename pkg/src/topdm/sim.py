"""Environment contract shared by planners and learners.

Every environment is a deterministic, time-invariant system whose full state
fits in a flat float64 vector. The batched dynamics operate row-wise with
elementwise numpy operations only, so a row's result never depends on which
other rows share the batch (this is what lets the rollout engine split a
batch across workers and still be bit-exact).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class ContractViolation(ValueError):
    """Raised when a caller breaks an environment or planner precondition."""


@dataclass(eq=False)
class EnvState:
    values: np.ndarray
    env_id: str
    step_index: int = 0

    def __post_init__(self):
        self.values = np.array(self.values, dtype=np.float64).reshape(-1)
        if self.step_index < 0:
            raise ContractViolation("step_index must be non-negative")

    def __eq__(self, other):
        if not isinstance(other, EnvState):
            return NotImplemented
        return (
            self.env_id == other.env_id
            and self.step_index == other.step_index
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )

    def copy(self) -> "EnvState":
        return EnvState(self.values.copy(), self.env_id, self.step_index)


@dataclass(eq=False)
class Observation:
    components: np.ndarray
    achieved_goal: Optional[np.ndarray] = None
    desired_goal: Optional[np.ndarray] = None

    def __eq__(self, other):
        if not isinstance(other, Observation):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and a.tobytes() == b.tobytes()

        return (
            same(self.components, other.components)
            and same(self.achieved_goal, other.achieved_goal)
            and same(self.desired_goal, other.desired_goal)
        )

    def flat(self) -> np.ndarray:
        """Observation vector with the desired goal appended (policy input)."""
        if self.desired_goal is None:
            return self.components
        return np.concatenate([self.components, self.desired_goal])


@dataclass
class StepResult:
    observation: Observation
    reward: float
    done: bool
    success: bool = False


class Env:
    """Base class. Subclasses implement the batched hooks below.

    Hooks (all row-wise, ``values`` has shape (N, state_dim)):

    * ``_dynamics(values, actions)`` -> next values
    * ``_reward(next_values, actions)`` -> rewards (N,)
    * ``_success(values)`` -> bool (N,)
    * ``_observe(values)`` -> Observation for a single row
    * ``_initial_values(rng)`` -> state vector for ``reset``
    """

    env_id: str = "env"
    state_dim: int = 0
    action_dim: int = 0
    goal_based: bool = False
    episode_length: int = 50
    dt: float = 0.05

    def __init__(self):
        self._values = np.zeros(self.state_dim)
        self._step = 0

    # -- subclass hooks -------------------------------------------------
    def _dynamics(self, values, actions):
        raise NotImplementedError

    def _reward(self, next_values, actions):
        raise NotImplementedError

    def _success(self, values):
        return np.zeros(values.shape[0], dtype=bool)

    def _observe(self, values) -> Observation:
        raise NotImplementedError

    def _initial_values(self, rng) -> np.ndarray:
        raise NotImplementedError

    # -- public contract ------------------------------------------------
    def options(self) -> dict:
        """Keyword options that rebuild this env through ``make_env``."""
        return {"episode_length": self.episode_length}

    @property
    def obs_dim(self) -> int:
        return self.observe(EnvState(self._values, self.env_id)).flat().shape[0]

    def clone(self) -> "Env":
        """Fresh replica with identical configuration and current state."""
        other = self._fresh()
        other.restore(self.snapshot())
        return other

    def _fresh(self) -> "Env":
        raise NotImplementedError

    def reset(self, seed: int) -> Observation:
        rng = np.random.default_rng(seed)
        self._values = np.asarray(self._initial_values(rng), dtype=np.float64)
        self._step = 0
        return self._observe(self._values[None, :])

    def snapshot(self) -> EnvState:
        return EnvState(self._values.copy(), self.env_id, self._step)

    def restore(self, state: EnvState) -> None:
        self._check_state(state)
        self._values = state.values.copy()
        self._step = state.step_index

    def observe(self, state: Optional[EnvState] = None) -> Observation:
        values = self._values if state is None else state.values
        return self._observe(values[None, :])

    def is_success(self, state: Optional[EnvState] = None) -> bool:
        values = self._values if state is None else state.values
        return bool(self._success(values[None, :])[0])

    @property
    def remaining_steps(self) -> int:
        return max(0, self.episode_length - self._step)

    def transition(self, state: EnvState, action) -> tuple[EnvState, StepResult]:
        """Pure step: ``state`` is left untouched."""
        self._check_state(state)
        a = self._check_action(action)[None, :]
        vals = state.values[None, :]
        nxt = self._dynamics(vals, a)
        reward = float(self._reward(nxt, a)[0])
        success = bool(self._success(nxt)[0])
        new_state = EnvState(nxt[0], self.env_id, state.step_index + 1)
        result = StepResult(
            observation=self._observe(nxt),
            reward=reward,
            done=new_state.step_index >= self.episode_length,
            success=success,
        )
        return new_state, result

    def step(self, action) -> StepResult:
        new_state, result = self.transition(self.snapshot(), action)
        self._values = new_state.values
        self._step = new_state.step_index
        return result

    def rollout_returns(self, state: EnvState, actions: np.ndarray) -> np.ndarray:
        """Undiscounted returns of N action sequences (N, T, a_d) from ``state``."""
        self._check_state(state)
        actions = np.asarray(actions, dtype=np.float64)
        if actions.ndim != 3 or actions.shape[2] != self.action_dim:
            raise ContractViolation(
                f"expected actions of shape (N, T, {self.action_dim}), got {actions.shape}"
            )
        if not np.all(np.isfinite(actions)):
            raise ContractViolation("non-finite action in rollout")
        n, horizon, _ = actions.shape
        vals = np.repeat(state.values[None, :], n, axis=0)
        total = np.zeros(n)
        for t in range(horizon):
            a = np.clip(actions[:, t, :], -1.0, 1.0)
            vals = self._dynamics(vals, a)
            total = total + self._reward(vals, a)
        return total

    # -- checks ---------------------------------------------------------
    def _check_state(self, state: EnvState):
        if state.env_id != self.env_id:
            raise ContractViolation(
                f"state belongs to {state.env_id!r}, not {self.env_id!r}"
            )
        if state.values.shape != (self.state_dim,):
            raise ContractViolation(
                f"state has {state.values.shape[0]} values, expected {self.state_dim}"
            )

    def _check_action(self, action) -> np.ndarray:
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape[0] != self.action_dim:
            raise ContractViolation(
                f"action has length {a.shape[0]}, expected {self.action_dim}"
            )
        if not np.all(np.isfinite(a)):
            raise ContractViolation("non-finite action")
        return np.clip(a, -1.0, 1.0)


def step(env: Env, state: EnvState, action) -> tuple[EnvState, StepResult]:
    return env.transition(state, action)


def snapshot(env: Env) -> EnvState:
    return env.snapshot()


def restore(env: Env, state: EnvState) -> None:
    env.restore(state)


def reset(env: Env, seed: int) -> Observation:
    return env.reset(seed)
