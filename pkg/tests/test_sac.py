import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from oracles import value_iteration_chain
from flowfact.approximator import Adam, load_checkpoint
from flowfact.envs import BanditEnv, ChainEnv
from flowfact.sac import (
    Batch,
    CheckpointMismatchError,
    ReplayBuffer,
    SacState,
    TrainConfig,
    TrainingDivergedError,
    critic_loss,
    entropy,
    evaluate,
    policy_distribution,
    policy_logit_grad,
    policy_loss,
    policy_objective,
    save_agent,
    soft_targets,
    soft_value,
    softmax,
    summarize,
    target_entropy,
    temperature_loss,
    train,
)

TINY = TrainConfig(hidden=4, embed_dim=2, conv_filters=(1, 1), seed=0)
FAST = TrainConfig(total_steps=3000, batch_size=32, buffer_size=2048, lr=3e-3, update_every=1, hidden=32,
                   embed_dim=8, conv_filters=(4, 4), seed=0)


def tiny_state(q1_bias, q2_bias, policy_bias, alpha=0.5, gamma=0.99, q1t=None, q2t=None, shape=(1, 1, 1)):
    """State whose networks ignore the input: every weight and hidden bias is zero."""
    state = SacState.create({"x": shape}, TINY, 3, dtype="float64")
    nets = {"q1": q1_bias, "q2": q2_bias, "policy": policy_bias,
            "q1_target": q1_bias if q1t is None else q1t, "q2_target": q2_bias if q2t is None else q2t}
    for name, bias in nets.items():
        net = getattr(state, name)
        for k, v in net.params.items():
            v[:] = 0
        head = [k for k in net.params if k.startswith("head.") and k.endswith(".b")][0]
        net.params[head][:] = bias
    state.log_alpha = math.log(alpha)
    state.gamma = gamma
    return state


def one_batch(a=0, r=1.0, done=0.0, n=1):
    x = {"x": np.ones((n, 1, 1, 1))}
    return Batch(x, np.full(n, a), np.full(n, r, dtype=float), x, np.full(n, done, dtype=float))


# -- distributions ------------------------------------------------------------


def test_softmax_examples():
    np.testing.assert_allclose(softmax(np.zeros(3)), [1 / 3] * 3)
    p = softmax(np.array([10.0, 0.0, 0.0]))
    assert p.argmax() == 0 and p[0] > 0.99
    assert abs(entropy(np.full(3, 1 / 3)) - math.log(3)) < 1e-12


def test_soft_value_examples():
    q = np.array([1.0, 0.0, 0.0])
    assert abs(soft_value(q, np.full(3, 1 / 3), 0.5) - (1 / 3 + 0.5 * math.log(3))) < 1e-12
    assert round(float(soft_value(q, np.full(3, 1 / 3), 0.5)), 4) == 0.8826
    assert soft_value(np.array([3.0, 7.0, -1.0]), np.array([0.0, 1.0, 0.0]), 0.0) == 7.0
    assert abs(soft_value(np.full(3, 2.5), np.array([0.2, 0.5, 0.3]), 0.0) - 2.5) < 1e-12


@given(st.lists(st.floats(-100, 100), min_size=3, max_size=3), st.integers(0, 2))
def test_soft_value_one_hot_selects_entry(q, a):
    probs = np.eye(3)[a]
    assert soft_value(np.array(q), probs, 0.0) == q[a]


@given(st.lists(st.floats(-20, 20), min_size=3, max_size=3), st.floats(-1e3, 1e3))
def test_logit_shift_invariance(logits, c):
    logits = np.array(logits)
    np.testing.assert_allclose(softmax(logits + c), softmax(logits), atol=1e-9)


def test_policy_distribution_shift_invariance():
    a = tiny_state(0, 0, [0.3, -1.0, 2.0])
    b = tiny_state(0, 0, [0.3 + 17.0, -1.0 + 17.0, 2.0 + 17.0])
    x = {"x": np.ones((1, 1, 1, 1))}
    np.testing.assert_allclose(policy_distribution(a.policy, x), policy_distribution(b.policy, x), atol=1e-9)


def test_target_entropy_value():
    assert abs(target_entropy(3) - 0.2 * math.log(3)) < 1e-15
    assert round(target_entropy(3), 4) == 0.2197


# -- critic -----------------------------------------------------------------------


def test_done_transition_target_is_reward():
    state = tiny_state([5.0, 1.0, 2.0], [4.0, 3.0, 2.0], [0.0, 1.0, 0.0])
    assert soft_targets(one_batch(r=0.7, done=1.0), state)[0] == 0.7


def test_zero_discount_target_is_reward():
    state = tiny_state([5.0, 1.0, 2.0], [4.0, 3.0, 2.0], [0.0, 1.0, 0.0], gamma=0.0)
    np.testing.assert_array_equal(soft_targets(one_batch(r=-2.5, n=4), state), [-2.5] * 4)


def test_critic_loss_hand_evaluation():
    q1, q2 = np.array([1.0, 2.0, 0.5]), np.array([0.8, 2.5, 0.0])
    pol = np.array([0.2, -0.4, 0.1])
    state = tiny_state(q1, q2, pol, alpha=0.5, gamma=0.9)
    # Hand evaluation of the soft Bellman target and squared errors.
    p = np.exp(pol) / np.exp(pol).sum()
    vmin = np.minimum(q1, q2)
    v = sum(p[i] * (vmin[i] - 0.5 * math.log(p[i])) for i in range(3))
    y = 1.5 + 0.9 * v
    expected = 0.5 * (q1[1] - y) ** 2 + 0.5 * (q2[1] - y) ** 2
    loss, grads, values = critic_loss(one_batch(a=1, r=1.5), state)
    assert abs(loss - expected) < 1e-12
    np.testing.assert_allclose(grads["q1"]["head.q.b"], [0, q1[1] - y, 0], atol=1e-12)
    np.testing.assert_allclose(grads["q2"]["head.q.b"], [0, q2[1] - y, 0], atol=1e-12)
    np.testing.assert_allclose(values["q1"][0], q1)


def test_target_uses_minimum_of_target_critics_and_is_swap_symmetric():
    a, b = np.array([1.0, 4.0, -2.0]), np.array([3.0, 0.0, -1.0])
    s1 = tiny_state(0, 0, [0.1, 0.2, 0.3], q1t=a, q2t=b)
    s2 = tiny_state(0, 0, [0.1, 0.2, 0.3], q1t=b, q2t=a)
    smin = tiny_state(0, 0, [0.1, 0.2, 0.3], q1t=np.minimum(a, b), q2t=np.minimum(a, b))
    batch = one_batch(n=3)
    y = soft_targets(batch, s1)
    np.testing.assert_array_equal(y, soft_targets(batch, s2))
    np.testing.assert_allclose(y, soft_targets(batch, smin), rtol=1e-15)


# -- policy -----------------------------------------------------------------------


def test_indifferent_policy_has_zero_gradient():
    for logits in ([0.0, 0.0, 0.0], [3.0, -1.0, 0.5]):
        g = policy_logit_grad(np.array([logits]), np.full((1, 3), 2.0), 0.0)
        assert np.max(np.abs(g)) < 1e-15


def test_policy_loss_hand_evaluation():
    q1, q2 = np.array([1.0, 2.0, 0.5]), np.array([0.8, 2.5, 0.0])
    pol = np.array([0.2, -0.4, 0.1])
    state = tiny_state(q1, q2, pol, alpha=0.3)
    p = np.exp(pol) / np.exp(pol).sum()
    qmin = np.minimum(q1, q2)
    expected = sum(p[i] * (0.3 * math.log(p[i]) - qmin[i]) for i in range(3))
    loss, grads, probs = policy_loss(one_batch(), state)
    assert abs(loss - expected) < 1e-12
    np.testing.assert_allclose(probs[0], p, rtol=1e-12)

    def objective(z):
        pz = np.exp(z) / np.exp(z).sum()
        return sum(pz[i] * (0.3 * math.log(pz[i]) - qmin[i]) for i in range(3))

    h = 1e-6
    numeric = [(objective(pol + h * e) - objective(pol - h * e)) / (2 * h) for e in np.eye(3)]
    np.testing.assert_allclose(grads["head.logits.b"], numeric, atol=1e-8)


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       st.floats(0.0, 3.0))
def test_policy_logit_grad_matches_differences(logits, q, alpha):
    z, q = np.array([logits]), np.array([q])
    h = 1e-6
    numeric = [(policy_objective(softmax(z + h * e), q, alpha) - policy_objective(softmax(z - h * e), q, alpha))[0]
               / (2 * h) for e in np.eye(3)]
    np.testing.assert_allclose(policy_logit_grad(z, q, alpha)[0], numeric, atol=1e-6)


def simplex_grid(n=200):
    pts = [(i / n, j / n, (n - i - j) / n) for i in range(n + 1) for j in range(n + 1 - i)]
    return np.array(pts)


def test_entropy_of_optimal_policy_increases_with_alpha():
    # Gaps small enough that the grid resolves the optimum even at the lowest temperature.
    q = np.array([0.1, 0.05, 0.0])
    grid = simplex_grid(400)
    ents = []
    for alpha in (0.01, 0.1, 1.0, 10.0):
        best = grid[np.argmin(policy_objective(grid, q, alpha))]
        ents.append(entropy(best))
    assert all(a < b for a, b in zip(ents, ents[1:]))
    # At large temperature the minimiser is close to uniform.
    assert ents[-1] > math.log(3) - 0.01


# -- temperature --------------------------------------------------------------------


def probs_with_entropy(h):
    """A (x, (1-x)/2, (1-x)/2) distribution with entropy exactly ``h``."""
    def f(x):
        return entropy(np.array([x, (1 - x) / 2, (1 - x) / 2])) - h
    x = brentq(f, 1 / 3, 1 - 1e-12, xtol=1e-15)
    return np.array([x, (1 - x) / 2, (1 - x) / 2])


def test_temperature_fixed_point():
    state = tiny_state(0, 0, 0)
    p = probs_with_entropy(state.target_entropy)
    _, grad = temperature_loss(np.tile(p, (8, 1)), state)
    assert abs(grad) < 1e-8


def test_temperature_moves_alpha_down_when_entropy_is_high():
    state = tiny_state(0, 0, 0)
    _, grad = temperature_loss(np.full((4, 3), 1 / 3), state)
    assert grad > 0
    la = {"log_alpha": np.array([state.log_alpha])}
    Adam(lr=0.01).apply(la, {"log_alpha": np.array([grad])})
    assert la["log_alpha"][0] < state.log_alpha
    _, grad_low = temperature_loss(np.tile([0.98, 0.01, 0.01], (4, 1)), state)
    assert grad_low < 0


# -- replay ---------------------------------------------------------------------------


def test_replay_sampling_is_uniform():
    buf = ReplayBuffer(100, {"x": (1, 1, 1)})
    for i in range(100):
        buf.add({"x": np.zeros((1, 1, 1))}, 0, float(i), {"x": np.zeros((1, 1, 1))}, False)
    rng = np.random.default_rng(0)
    counts = np.zeros(100)
    for _ in range(10_000):
        np.add.at(counts, buf.sample_indices(10, rng), 1)
    n, p = 100_000, 0.01
    sigma = math.sqrt(n * p * (1 - p))
    assert np.max(np.abs(counts - n * p)) < 5 * sigma


def test_replay_ring_and_underflow():
    buf = ReplayBuffer(3, {"x": (1, 1, 1)})
    z = {"x": np.zeros((1, 1, 1))}
    with pytest.raises(ValueError):
        buf.sample(1, np.random.default_rng(0))
    for i in range(5):
        buf.add(z, i % 3, float(i), z, i == 4)
    assert len(buf) == 3
    assert sorted(buf.r) == [2.0, 3.0, 4.0]
    with pytest.raises(ValueError):
        buf.sample(4, np.random.default_rng(0))


# -- training ---------------------------------------------------------------------------


def test_bandit_learns_best_arm():
    env = BanditEnv()
    state, _ = train(env, FAST)
    p = policy_distribution(state.policy, {"x": np.ones((1, 1, 1, 1))})[0]
    assert p[0] > 0.95
    assert evaluate(state.policy, env, 3).success_rate == 1.0


def test_chain_reaches_value_iteration_optimum():
    env = ChainEnv()
    optimum = value_iteration_chain(5, env.goal_reward, env.step_reward)
    state, _ = train(env, FAST)
    returns = [r["return"] for r in evaluate(state.policy, env, 3).results]
    assert min(returns) >= optimum - 0.05 * abs(optimum)


def test_same_seed_gives_identical_logs(tmp_path):
    cfg = TrainConfig(total_steps=300, batch_size=16, buffer_size=256, update_every=2, hidden=8, embed_dim=4,
                      conv_filters=(2, 2), seed=3)
    train(ChainEnv(), cfg, tmp_path / "a.jsonl")
    train(ChainEnv(), cfg, tmp_path / "b.jsonl")
    a = (tmp_path / "a.jsonl").read_text()
    assert a == (tmp_path / "b.jsonl").read_text()
    rec = json.loads(a.splitlines()[-1])
    assert {"step", "episode", "return", "outcome", "alpha", "critic_loss", "policy_loss"} <= set(rec)


def test_zero_learning_rate_leaves_parameters_unchanged():
    cfg = TrainConfig(total_steps=200, batch_size=16, buffer_size=256, update_every=1, lr=0.0, hidden=8,
                      embed_dim=4, conv_filters=(2, 2), seed=1)
    env = ChainEnv()
    initial = SacState.create(env.observation_shapes, cfg, 3)
    trained, _ = train(env, cfg)
    assert trained.log_alpha == initial.log_alpha
    for name in ("policy", "q1", "q2", "q1_target", "q2_target"):
        a, b = getattr(initial, name).params, getattr(trained, name).params
        for k in a:
            assert a[k].tobytes() == b[k].tobytes(), (name, k)


class NanRewardEnv(BanditEnv):
    def step(self, action):
        obs, _, done, info = super().step(action)
        return obs, float("nan"), done, info


def test_divergence_aborts_with_diagnostic_checkpoint(tmp_path):
    cfg = TrainConfig(total_steps=50, batch_size=4, buffer_size=64, update_every=1, hidden=4, embed_dim=2,
                      conv_filters=(1, 1))
    with pytest.raises(TrainingDivergedError) as e:
        train(NanRewardEnv(), cfg, diagnostic_path=tmp_path / "diag.ffck")
    assert e.value.checkpoint == str(tmp_path / "diag.ffck")
    _, meta = load_checkpoint(tmp_path / "diag.ffck")
    assert meta["diverged_at_step"] == 4


# -- evaluation -----------------------------------------------------------------------------


def test_summary_arithmetic():
    success, counts, oob, col, ratio = summarize(["success", "oob", "collision", "collision"])
    assert success == 0.25 and counts["collision"] == 2
    assert oob == 1 / 3 and col == 2 / 3 and ratio == 0.5
    assert summarize(["success"] * 5)[0] == 1.0
    assert summarize(["success"] * 5)[2:] == (None, None, None)
    assert summarize(["oob", "success"])[4] is None


@settings(max_examples=50)
@given(st.lists(st.sampled_from(["success", "oob", "collision", "timeout"]), min_size=1, max_size=40))
def test_failure_shares_sum_to_one(outcomes):
    success, counts, oob, col, ratio = summarize(outcomes)
    assert success == outcomes.count("success") / len(outcomes)
    if counts["oob"] + counts["collision"]:
        assert abs(oob + col - 1.0) < 1e-12
    if counts["collision"]:
        assert ratio == counts["oob"] / counts["collision"]


def test_evaluation_is_deterministic_and_checks_representations(tmp_path):
    env = ChainEnv()
    state = SacState.create(env.observation_shapes, TINY, 3)
    a = evaluate(state.policy, env, 4, seed=9)
    b = evaluate(state.policy, env, 4, seed=9)
    assert a.to_dict() == b.to_dict()
    save_agent(tmp_path / "p.ffck", state, {"representations": "ego+obj"})
    with pytest.raises(CheckpointMismatchError):
        evaluate(tmp_path / "p.ffck", env, 1)
    save_agent(tmp_path / "q.ffck", state, {"representations": "x"})
    assert evaluate(tmp_path / "q.ffck", env, 4, seed=9).to_dict() == a.to_dict()
    with pytest.raises(ValueError):
        evaluate(state.policy, env, 0)


def test_greedy_ties_go_to_lowest_index():
    env = ChainEnv()
    state = tiny_state(0, 0, [1.0, 1.0, 1.0], shape=env.observation_shapes["x"])
    # Action 0 moves right, so a tie-broken greedy policy walks straight to the goal.
    assert evaluate(state.policy, env, 1).results[0]["steps"] == 4
