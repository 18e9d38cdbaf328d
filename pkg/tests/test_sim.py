import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from topdm.envs import ENV_IDS, DoubleIntegrator, make_env
from topdm.sim import ContractViolation, EnvState


def random_actions(env, n, seed):
    return np.random.default_rng(seed).uniform(-1.5, 1.5, size=(n, env.action_dim))


@pytest.mark.parametrize("env_id", ENV_IDS)
def test_step_is_deterministic(env_id):
    env = make_env(env_id)
    env.reset(3)
    state = env.snapshot()
    a = random_actions(env, 1, 0)[0]
    s1, r1 = env.transition(state, a)
    s2, r2 = env.transition(state, a)
    assert s1 == s2
    assert r1.reward == r2.reward and r1.observation == r2.observation


def test_double_integrator_fixed_point():
    env = DoubleIntegrator()
    state = EnvState([0.0, 0.0], env.env_id)
    nxt, _ = env.transition(state, [0.0])
    assert nxt.values.tolist() == [0.0, 0.0]


def test_double_integrator_one_euler_step():
    env = DoubleIntegrator()
    nxt, _ = env.transition(EnvState([0.0, 0.0], env.env_id), [1.0])
    assert nxt.values[1] == pytest.approx(0.05 * 80.0, abs=1e-15)
    assert nxt.values[0] == pytest.approx(0.05 * 0.05 * 80.0, abs=1e-15)


@pytest.mark.parametrize("env_id", ENV_IDS)
def test_snapshot_restore_replays_rewards(env_id):
    env = make_env(env_id)
    env.reset(11)
    for a in random_actions(env, 5, 1):
        env.step(a)
    snap = env.snapshot()
    actions = random_actions(env, 10, 2)
    first = [env.step(a).reward for a in actions]
    env.restore(snap)
    second = [env.step(a).reward for a in actions]
    assert first == second


def test_restore_rejects_truncated_values():
    env = make_env("point_reach-dense")
    env.reset(0)
    snap = env.snapshot()
    with pytest.raises(ContractViolation):
        env.restore(EnvState(snap.values[:-1], snap.env_id, snap.step_index))


def test_restore_rejects_foreign_env():
    env = make_env("point_reach-dense")
    other = make_env("double_integrator")
    other.reset(0)
    with pytest.raises(ContractViolation):
        env.restore(other.snapshot())
    with pytest.raises(ContractViolation):
        env.transition(other.snapshot(), [0.0, 0.0])


def test_action_dimension_mismatch():
    env = make_env("point_reach-dense")
    env.reset(0)
    with pytest.raises(ContractViolation):
        env.step([0.0, 0.0, 0.0])


def test_restore_mid_episode_leaves_remaining_horizon():
    env = make_env("point_reach-dense", episode_length=50)
    env.reset(0)
    for _ in range(30):
        env.step([0.1, -0.1])
    snap = env.snapshot()
    env.reset(5)
    env.restore(snap)
    assert snap.step_index == 30
    assert env.remaining_steps == 20
    steps = 0
    while True:
        steps += 1
        if env.step([0.0, 0.0]).done:
            break
    assert steps == 20


@pytest.mark.parametrize("env_id", ENV_IDS)
def test_reset_is_seeded(env_id):
    env = make_env(env_id)
    assert env.reset(7) == env.reset(7)


@pytest.mark.parametrize("env_id", ["point_reach-dense", "arm_reach-sparse"])
def test_reset_seed_sensitivity(env_id):
    env = make_env(env_id)
    differ = 0
    for s in range(100):
        g1 = env.reset(2 * s + 7).desired_goal
        g2 = env.reset(2 * s + 8).desired_goal
        differ += not np.array_equal(g1, g2)
    assert differ >= 99


@pytest.mark.parametrize("env_id", ENV_IDS)
@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), t=st.integers(0, 49))
def test_replay_equivalence(env_id, seed, t):
    env = make_env(env_id)
    env.reset(seed)
    actions = random_actions(env, 50, seed)
    rewards, snaps = [], []
    for a in actions:
        snaps.append(env.snapshot())
        rewards.append(env.step(a).reward)
    env.restore(snaps[t])
    tail = [env.step(a).reward for a in actions[t:]]
    assert tail == rewards[t:]


@pytest.mark.parametrize("env_id", ENV_IDS)
@settings(max_examples=20, deadline=None)
@given(data=st.data())
def test_out_of_range_actions_are_clamped(env_id, data):
    env = make_env(env_id)
    env.reset(data.draw(st.integers(0, 1000)))
    state = env.snapshot()
    signs = np.array(data.draw(st.lists(st.sampled_from([-1.0, 1.0]), min_size=env.action_dim, max_size=env.action_dim)))
    mags = np.array(data.draw(st.lists(st.floats(1.0, 5.0), min_size=env.action_dim, max_size=env.action_dim)))
    a = signs * mags
    s1, r1 = env.transition(state, 2 * a)
    s2, r2 = env.transition(state, np.clip(a, -1, 1))
    assert s1 == s2 and r1.reward == r2.reward


@pytest.mark.parametrize("env_id", ENV_IDS)
def test_batched_rollout_matches_single_steps(env_id):
    env = make_env(env_id)
    env.reset(4)
    start = env.snapshot()
    acts = np.random.default_rng(9).uniform(-1.2, 1.2, size=(7, 12, env.action_dim))
    batched = env.rollout_returns(start, acts)
    for n in range(7):
        env.restore(start)
        total = 0.0
        for a in acts[n]:
            total = total + env.step(a).reward
        assert total == batched[n]
