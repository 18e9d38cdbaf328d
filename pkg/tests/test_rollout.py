import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from topdm.envs import ENV_IDS, make_env
from topdm.rollout import RolloutError, RolloutRequest, evaluate_actions, evaluate_batch, partition


def sequential_returns(env, start, actions):
    out = []
    for seq in actions:
        env.restore(start)
        total = 0.0
        for a in seq:
            total = total + env.step(a).reward
        out.append(total)
    return np.array(out)


@settings(max_examples=60)
@given(n=st.integers(0, 200), workers=st.integers(1, 16))
def test_partition_covers_range(n, workers):
    parts = partition(n, workers)
    covered = [i for a, b in parts for i in range(a, b)]
    assert covered == list(range(n))
    assert len(parts) <= workers


@pytest.mark.parametrize("env_id", ENV_IDS)
@pytest.mark.parametrize("workers", [1, 3, 8])
def test_matches_sequential(env_id, workers):
    env = make_env(env_id)
    env.reset(1)
    start = env.snapshot()
    acts = np.random.default_rng(2).uniform(-1, 1, (13, 6, env.action_dim))
    got = evaluate_actions(env, start, acts, workers)
    assert np.array_equal(got, sequential_returns(env.clone(), start, acts))


@pytest.mark.parametrize("env_id", ENV_IDS)
def test_one_vs_eight_workers_bit_identical(env_id):
    env = make_env(env_id)
    rng = np.random.default_rng(0)
    for batch in range(10):
        env.reset(batch)
        start = env.snapshot()
        acts = rng.uniform(-1.2, 1.2, (int(rng.integers(1, 100)), 10, env.action_dim))
        one = evaluate_actions(env, start, acts, 1)
        eight = evaluate_actions(env, start, acts, 8)
        assert one.tobytes() == eight.tobytes()


def test_evaluation_leaves_env_untouched():
    env = make_env("rotor_spin")
    env.reset(0)
    before = env.snapshot()
    other = make_env("rotor_spin")
    other.reset(5)
    evaluate_actions(env, other.snapshot(), np.zeros((4, 5, 8)), 2)
    assert env.snapshot() == before


def test_empty_inputs():
    env = make_env("double_integrator")
    env.reset(0)
    assert evaluate_actions(env, env.snapshot(), np.zeros((0, 5, 1))).shape == (0,)
    assert evaluate_actions(env, env.snapshot(), np.zeros((3, 0, 1))).tolist() == [0.0, 0.0, 0.0]
    assert evaluate_batch(env, []) == []


def test_batch_sorted_by_index_and_mixed_starts():
    env = make_env("point_reach-dense")
    rng = np.random.default_rng(3)
    requests = []
    for i in (5, 2, 9, 0):
        env.reset(i)
        requests.append(RolloutRequest(env.snapshot(), rng.uniform(-1, 1, (4 + i % 3, 2)), i))
    results = evaluate_batch(make_env("point_reach-dense"), requests, workers=4)
    assert [r.candidate_index for r in results] == [0, 2, 5, 9]
    for r in results:
        req = next(q for q in requests if q.candidate_index == r.candidate_index)
        expected = sequential_returns(make_env("point_reach-dense"), req.start_state, req.actions[None])[0]
        assert r.total_return == expected


def test_batch_of_64_matches_serial_loop():
    env = make_env("point_reach-dense")
    env.reset(6)
    start = env.snapshot()
    acts = np.random.default_rng(6).uniform(-1, 1, (64, 10, 2))
    results = evaluate_batch(env, [RolloutRequest(start, acts[i], i) for i in range(64)], workers=4)
    serial = []
    for seq in acts:
        state, total = start, 0.0
        for a in seq:
            state, res = env.transition(state, a)
            total += res.reward
        serial.append(total)
    assert [r.total_return for r in results] == serial


def test_batch_zero_length_sequence():
    env = make_env("double_integrator")
    env.reset(0)
    (res,) = evaluate_batch(env, [RolloutRequest(env.snapshot(), np.zeros((0, 1)), 7)])
    assert res.total_return == 0.0 and res.candidate_index == 7


def test_batch_reports_offending_candidate():
    env = make_env("point_reach-dense")
    env.reset(0)
    good = RolloutRequest(env.snapshot(), np.zeros((3, 2)), 0)
    bad = RolloutRequest(env.snapshot(), np.array([[0.0, np.nan]]), 4)
    with pytest.raises(RolloutError) as info:
        evaluate_batch(env, [good, bad])
    assert info.value.candidate_index == 4


def test_batch_rejects_wrong_action_dim():
    env = make_env("point_reach-dense")
    env.reset(0)
    with pytest.raises(RolloutError) as info:
        evaluate_batch(env, [RolloutRequest(env.snapshot(), np.zeros((3, 5)), 2)])
    assert info.value.candidate_index == 2


@pytest.mark.skipif((os.cpu_count() or 1) < 4, reason="speedup needs at least 4 cores")
def test_parallel_speedup():
    import time

    env = make_env("point_reach-dense")
    env.reset(0)
    acts = np.random.default_rng(0).uniform(-1, 1, (1000, 20, 2))
    t0 = time.perf_counter()
    evaluate_actions(env, env.snapshot(), acts, 1)
    t1 = time.perf_counter()
    evaluate_actions(env, env.snapshot(), acts, 4)
    t2 = time.perf_counter()
    assert (t1 - t0) / (t2 - t1) >= 2.0
