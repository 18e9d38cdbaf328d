"""Deterministic batched evaluation of candidate action sequences.

Candidates are split into contiguous index ranges, one per worker. Every
worker restores a private env replica to the common start state and rolls
its whole range forward in one vectorised pass. Env dynamics are row-wise,
so the result for a candidate does not depend on how the batch was split.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .sim import ContractViolation, Env, EnvState


@dataclass
class RolloutRequest:
    start_state: EnvState
    actions: np.ndarray
    candidate_index: int


@dataclass
class RolloutResult:
    total_return: float
    candidate_index: int


class RolloutError(ContractViolation):
    def __init__(self, candidate_index: int, cause: Exception):
        super().__init__(f"candidate {candidate_index}: {cause}")
        self.candidate_index = candidate_index


_pools: dict[int, ThreadPoolExecutor] = {}


def _pool(workers: int) -> ThreadPoolExecutor:
    if workers not in _pools:
        _pools[workers] = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="rollout")
    return _pools[workers]


def partition(n: int, workers: int) -> list[tuple[int, int]]:
    """Contiguous ``[start, stop)`` ranges covering ``range(n)``."""
    workers = max(1, min(workers, n))
    bounds = np.linspace(0, n, workers + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _evaluate_range(env: Env, start: EnvState, actions: np.ndarray) -> np.ndarray:
    replica = env.clone()
    replica.restore(start)
    return replica.rollout_returns(start, actions)


def evaluate_actions(env: Env, start: EnvState, actions: np.ndarray, workers: int = 1) -> np.ndarray:
    """Returns of ``actions`` (N, T, a_d), all rolled out from ``start``."""
    actions = np.asarray(actions, dtype=np.float64)
    n = actions.shape[0]
    if n == 0:
        return np.zeros(0)
    if actions.shape[1] == 0:
        return np.zeros(n)
    chunks = partition(n, workers)
    if len(chunks) == 1:
        return _evaluate_range(env, start, actions)
    futures = [
        _pool(len(chunks)).submit(_evaluate_range, env, start, actions[a:b]) for a, b in chunks
    ]
    return np.concatenate([f.result() for f in futures])


def evaluate_batch(env_prototype: Env, requests: list[RolloutRequest], workers: int = 1) -> list[RolloutResult]:
    """Evaluate independent requests; results come back sorted by candidate index.

    Requests sharing a start state and horizon are grouped and vectorised;
    any contract violation aborts the batch naming the offending candidate.
    """
    if not requests:
        return []
    env_id = requests[0].start_state.env_id
    for req in requests:
        if req.start_state.env_id != env_id:
            raise RolloutError(req.candidate_index, ContractViolation("requests span several env ids"))

    ordered = sorted(requests, key=lambda r: r.candidate_index)
    results: dict[int, float] = {}
    groups: dict[tuple, list[RolloutRequest]] = {}
    for req in ordered:
        acts = np.asarray(req.actions, dtype=np.float64)
        if acts.ndim != 2 or (acts.shape[0] > 0 and acts.shape[1] != env_prototype.action_dim):
            raise RolloutError(req.candidate_index, ContractViolation(f"bad action shape {acts.shape}"))
        if not np.all(np.isfinite(acts)):
            raise RolloutError(req.candidate_index, ContractViolation("non-finite action"))
        if acts.shape[0] == 0:
            results[req.candidate_index] = 0.0
            continue
        key = (req.start_state.values.tobytes(), req.start_state.step_index, acts.shape[0])
        groups.setdefault(key, []).append(req)

    for members in groups.values():
        start = members[0].start_state
        stacked = np.stack([np.asarray(m.actions, dtype=np.float64) for m in members])
        try:
            returns = evaluate_actions(env_prototype, start, stacked, workers)
        except ContractViolation as exc:
            raise RolloutError(members[0].candidate_index, exc) from exc
        for m, r in zip(members, returns):
            results[m.candidate_index] = float(r)

    return [RolloutResult(results[r.candidate_index], r.candidate_index) for r in ordered]
