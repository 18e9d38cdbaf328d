"""Demonstration trajectories: recording, file format, restart sampling.

A demo file is one JSON object whose keys are the :class:`DemoTrajectory`
fields. Every real number is written with 17 significant digits so float64
values survive a save/load round trip bit for bit. Files live under
``demos/<env_id>/<seed>.demo``.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .sim import ContractViolation, Env, EnvState, Observation

FORMAT_VERSION = 1


class DemoFormatError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(eq=False)
class DemoTrajectory:
    env_id: str
    seed: int
    states: list
    observations: list
    actions: list
    rewards: list
    planner_config: dict = field(default_factory=dict)
    total_return: float = 0.0
    success: bool = False
    # Options that rebuild the recording env via ``make_env``.
    env_options: dict = field(default_factory=dict)

    def __post_init__(self):
        self.actions = [np.asarray(a, dtype=np.float64) for a in self.actions]
        self.rewards = [float(r) for r in self.rewards]
        self.validate()

    @property
    def length(self) -> int:
        return len(self.actions)

    def validate(self):
        T = len(self.actions)
        if len(self.rewards) != T:
            raise DemoFormatError("rewards", f"length {len(self.rewards)} != actions length {T}")
        if len(self.states) != T + 1:
            raise DemoFormatError("states", f"length {len(self.states)} != {T + 1}")
        if len(self.observations) != T + 1:
            raise DemoFormatError("observations", f"length {len(self.observations)} != {T + 1}")
        total = 0.0
        for r in self.rewards:
            total += r
        if total != self.total_return:
            raise DemoFormatError("total_return", f"{self.total_return!r} != sum of rewards {total!r}")

    def __eq__(self, other):
        if not isinstance(other, DemoTrajectory):
            return NotImplemented
        return (
            self.env_id == other.env_id
            and self.seed == other.seed
            and self.states == other.states
            and self.observations == other.observations
            and len(self.actions) == len(other.actions)
            and all(a.tobytes() == b.tobytes() for a, b in zip(self.actions, other.actions))
            and [r.hex() for r in self.rewards] == [r.hex() for r in other.rewards]
            and self.planner_config == other.planner_config
            and self.total_return == other.total_return
            and self.success == other.success
            and self.env_options == other.env_options
        )


def _num(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"cannot serialise non-finite value {x}")
    text = format(x, ".17g")
    # "-0" would come back from JSON as the integer 0 and lose its sign.
    return text if any(c in text for c in ".en") else text + ".0"


def _vec(values) -> str:
    return "[" + ", ".join(_num(v) for v in np.asarray(values, dtype=np.float64).reshape(-1)) + "]"


def _opt_vec(values) -> str:
    return "null" if values is None else _vec(values)


def _value(v) -> str:
    if isinstance(v, bool) or v is None or isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return _num(v)


def dumps(demo: DemoTrajectory) -> str:
    lines = ["{"]
    lines.append(f'  "format_version": {FORMAT_VERSION},')
    lines.append(f'  "env_id": {json.dumps(demo.env_id)},')
    lines.append(f'  "seed": {int(demo.seed)},')
    states = ",\n    ".join(
        f'{{"values": {_vec(s.values)}, "env_id": {json.dumps(s.env_id)}, "step_index": {int(s.step_index)}}}'
        for s in demo.states
    )
    lines.append(f'  "states": [\n    {states}\n  ],')
    obs = ",\n    ".join(
        f'{{"components": {_vec(o.components)}, "achieved_goal": {_opt_vec(o.achieved_goal)}, '
        f'"desired_goal": {_opt_vec(o.desired_goal)}}}'
        for o in demo.observations
    )
    lines.append(f'  "observations": [\n    {obs}\n  ],')
    acts = ",\n    ".join(_vec(a) for a in demo.actions)
    lines.append(f'  "actions": [\n    {acts}\n  ],')
    lines.append(f'  "rewards": {_vec(demo.rewards)},')
    cfg = ", ".join(f"{json.dumps(k)}: {_value(v)}" for k, v in demo.planner_config.items())
    lines.append(f'  "planner_config": {{{cfg}}},')
    lines.append(f'  "total_return": {_num(demo.total_return)},')
    lines.append(f'  "success": {json.dumps(bool(demo.success))},')
    opts = ", ".join(f"{json.dumps(k)}: {_value(v)}" for k, v in demo.env_options.items())
    lines.append(f'  "env_options": {{{opts}}}')
    lines.append("}")
    return "\n".join(lines) + "\n"


def _require(data: dict, key: str, kind):
    if key not in data:
        raise DemoFormatError(key, "missing")
    value = data[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise DemoFormatError(key, f"expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}")
    return value


def _array(value, field_name: str) -> np.ndarray:
    try:
        arr = np.array(value, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DemoFormatError(field_name, f"not a numeric vector ({exc})") from None
    if arr.ndim != 1:
        raise DemoFormatError(field_name, "not a flat numeric vector")
    return arr


def loads(text: str) -> DemoTrajectory:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DemoFormatError("<document>", str(exc)) from None
    if not isinstance(data, dict):
        raise DemoFormatError("<document>", "top level must be an object")

    env_id = _require(data, "env_id", str)
    seed = _require(data, "seed", int)
    states = []
    for i, s in enumerate(_require(data, "states", list)):
        if not isinstance(s, dict):
            raise DemoFormatError(f"states[{i}]", "expected object")
        states.append(EnvState(
            _array(_require(s, "values", list), f"states[{i}].values"),
            _require(s, "env_id", str),
            _require(s, "step_index", int),
        ))
    observations = []
    for i, o in enumerate(_require(data, "observations", list)):
        if not isinstance(o, dict):
            raise DemoFormatError(f"observations[{i}]", "expected object")
        ag, dg = o.get("achieved_goal"), o.get("desired_goal")
        observations.append(Observation(
            _array(_require(o, "components", list), f"observations[{i}].components"),
            None if ag is None else _array(ag, f"observations[{i}].achieved_goal"),
            None if dg is None else _array(dg, f"observations[{i}].desired_goal"),
        ))
    actions = [_array(a, f"actions[{i}]") for i, a in enumerate(_require(data, "actions", list))]
    rewards = _array(_require(data, "rewards", list), "rewards").tolist()
    planner_config = _require(data, "planner_config", dict)
    total_return = _require(data, "total_return", float)
    success = _require(data, "success", bool)
    env_options = _require(data, "env_options", dict) if "env_options" in data else {}

    from .envs import known_env_id

    known_env_id(env_id)
    return DemoTrajectory(env_id, seed, states, observations, actions, rewards,
                          planner_config, total_return, success, env_options)


def save(demo: DemoTrajectory, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(demo))


def load(path) -> DemoTrajectory:
    return loads(Path(path).read_text())


def demo_path(root, env_id: str, seed: int) -> Path:
    return Path(root) / env_id / f"{seed}.demo"


@dataclass
class ReplayReport:
    total_return: float
    max_deviation: float
    first_divergence: Optional[int]

    @property
    def ok(self) -> bool:
        return self.first_divergence is None


def replay(env: Env, demo: DemoTrajectory) -> ReplayReport:
    """Re-execute the recorded actions from ``states[0]`` and compare rewards."""
    env.restore(demo.states[0])
    worst = 0.0
    first = None
    total = 0.0
    for t, (action, recorded) in enumerate(zip(demo.actions, demo.rewards)):
        result = env.step(action)
        total += result.reward
        dev = abs(result.reward - recorded)
        if result.reward != recorded and first is None:
            first = t
        worst = max(worst, dev)
    return ReplayReport(total, worst, first)


class DemoStore:
    """Read-only collection of demos with uniform (trajectory, timestep) sampling."""

    def __init__(self, demos):
        self.demos = list(demos)
        self._index = [(i, t) for i, d in enumerate(self.demos) for t in range(d.length)]

    @classmethod
    def from_directory(cls, root, env_id: Optional[str] = None) -> "DemoStore":
        root = Path(root)
        pattern = f"{env_id}/*.demo" if env_id else "**/*.demo"
        return cls(load(p) for p in sorted(root.glob(pattern)))

    def __len__(self):
        return len(self._index)

    def sample_restart(self, rng: np.random.Generator) -> tuple[EnvState, Observation, np.ndarray]:
        if not self._index:
            raise ContractViolation("demo store is empty")
        i, t = self._index[int(rng.integers(len(self._index)))]
        demo = self.demos[i]
        return demo.states[t].copy(), demo.observations[t], demo.actions[t].copy()


def sample_restart(store: DemoStore, rng: np.random.Generator):
    return store.sample_restart(rng)
