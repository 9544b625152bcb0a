import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_differences, relative_error
from flowfact.approximator import (
    Adam,
    CheckpointFormatError,
    Network,
    NetworkConfig,
    NonFiniteGradientError,
    SpecMismatchError,
    TapeReuseError,
    add_grads,
    apply_update,
    backward,
    forward,
    load_checkpoint,
    network_arrays,
    network_from_arrays,
    polyak_update,
    save_checkpoint,
)

TOY = NetworkConfig(planes=(("a", 2), ("b", 1)), height=8, width=8, conv_filters=(4, 8),
                    embed_dim=8, hidden=16, dtype="float64")


def toy_obs(rng, batch=2, cfg=TOY):
    return {n: rng.normal(size=(batch, cfg.height, cfg.width, c)) for n, c in cfg.planes}


def activation_pattern(tape):
    masks = [tape.trunk_mask.ravel()]
    for rec in tape.encoders.values():
        masks += [rec["m1"].ravel(), rec["m2"].ravel(), rec["m3"].ravel()]
    return np.concatenate(masks)


def gradient_check(seed, cfg=TOY):
    """Largest per-tensor relative error between backward() and central differences.

    Returns None when a probe at +-h flips a ReLU, where the finite-difference
    oracle is undefined.
    """
    rng = np.random.default_rng(seed)
    net = Network.init(cfg, seed)
    obs = toy_obs(rng)
    upstream = rng.normal(size=(2, 3))

    last = {}

    def loss():
        out, tape = forward(net, obs)
        last["pattern"] = activation_pattern(tape)
        return float(np.sum(out["out"] * upstream))

    def pattern():
        # Pattern of the most recent loss() evaluation.
        return last["pattern"]

    loss()
    _, tape = forward(net, obs)
    analytic = backward(net, tape, upstream)
    numeric = central_differences(loss, net.params, h=1e-4, pattern=pattern)
    if numeric is None:
        return None
    return max(relative_error(analytic[k], numeric[k]) for k in net.params)


def gradient_check_many(count, first_seed=0):
    """Errors for ``count`` nets with a valid oracle, plus the seeds that were skipped at kinks."""
    errors, skipped, seed = [], [], first_seed
    while len(errors) < count:
        err = gradient_check(seed)
        (skipped.append(seed) if err is None else errors.append(err))
        seed += 1
    return errors, skipped


def test_zero_head_weights_give_bias():
    net = Network.init(TOY, 0)
    net.params["head.out.w"][:] = 0
    net.params["head.out.b"][:] = [0.5, -1.0, 2.0]
    out, _ = forward(net, toy_obs(np.random.default_rng(1)))
    np.testing.assert_array_equal(out["out"], [[0.5, -1.0, 2.0]] * 2)


def test_unused_plane_is_ignored():
    net = Network.init(TOY, 0)
    obs = toy_obs(np.random.default_rng(2))
    a = forward(net, {**obs, "extra": np.zeros((2, 8, 8, 5))})[0]["out"]
    b = forward(net, {**obs, "extra": np.ones((2, 8, 8, 5))})[0]["out"]
    np.testing.assert_array_equal(a, b)


def test_single_observation_shape():
    net = Network.init(TOY, 3)
    obs = {k: v[0] for k, v in toy_obs(np.random.default_rng(3)).items()}
    out = forward(net, obs)[0]["out"]
    assert out[0].shape == (3,) and np.all(np.isfinite(out))


def test_spec_mismatch():
    net = Network.init(TOY, 0)
    obs = toy_obs(np.random.default_rng(0))
    with pytest.raises(SpecMismatchError):
        forward(net, {"a": obs["a"]})
    with pytest.raises(SpecMismatchError):
        forward(net, {"a": obs["a"], "b": np.zeros((2, 8, 8, 2))})
    with pytest.raises(SpecMismatchError):
        forward(net, {"a": obs["a"], "b": obs["b"][:1]})


def test_tiny_inputs_accepted():
    cfg = NetworkConfig(planes=(("x", 1),), height=1, width=1, hidden=4, embed_dim=2, conv_filters=(2, 2))
    out, _ = forward(Network.init(cfg, 0), {"x": np.ones((1, 1, 1))})
    assert out["out"].shape == (1, 3)


def test_gradients_match_finite_differences():
    errors, _ = gradient_check_many(3)
    assert max(errors) < 1e-4


def test_kink_crossing_is_detected():
    # Seed 8 puts a conv1 pre-activation within 1e-4 of zero.
    assert gradient_check(8) is None


def test_zero_upstream_gives_zero_gradients():
    net = Network.init(TOY, 0)
    _, tape = forward(net, toy_obs(np.random.default_rng(0)))
    grads = backward(net, tape, np.zeros((2, 3)))
    assert set(grads) == set(net.params)
    assert all(np.all(g == 0) for g in grads.values())


def test_gradient_linearity():
    net = Network.init(TOY, 4)
    rng = np.random.default_rng(4)
    obs = toy_obs(rng)
    u1, u2 = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    g1 = backward(net, forward(net, obs)[1], u1)
    g2 = backward(net, forward(net, obs)[1], u2)
    g12 = backward(net, forward(net, obs)[1], u1 + u2)
    summed = add_grads(g1, g2)
    for k in g12:
        np.testing.assert_allclose(g12[k], summed[k], rtol=1e-10, atol=1e-12)


def test_tape_reuse_rejected():
    net = Network.init(TOY, 0)
    _, tape = forward(net, toy_obs(np.random.default_rng(0)))
    backward(net, tape, np.ones((2, 3)))
    with pytest.raises(TapeReuseError):
        backward(net, tape, np.ones((2, 3)))


def test_multi_head_gradients():
    cfg = NetworkConfig(planes=(("a", 1),), height=4, width=4, heads=(("p", 3), ("q", 3)),
                        conv_filters=(2, 2), embed_dim=4, hidden=6, dtype="float64")
    net = Network.init(cfg, 0)
    obs = {"a": np.random.default_rng(0).normal(size=(2, 4, 4, 1))}
    only_p = backward(net, forward(net, obs)[1], {"p": np.ones((2, 3))})
    assert np.all(only_p["head.q.w"] == 0)
    with pytest.raises(ValueError):
        backward(net, forward(net, obs)[1], np.ones((2, 3)))


# -- optimizer ---------------------------------------------------------------


def test_zero_gradients_leave_parameters_unchanged():
    net = Network.init(TOY, 0)
    before = {k: v.copy() for k, v in net.params.items()}
    apply_update(Adam(lr=0.1), net, {k: np.zeros_like(v) for k, v in net.params.items()})
    for k in before:
        np.testing.assert_array_equal(net.params[k], before[k])


def test_descent_on_square():
    w = {"w": np.array([1.0])}
    Adam(lr=0.1).apply(w, {"w": 2 * w["w"]})
    assert abs(w["w"][0]) < 1.0


def test_first_step_is_lr_times_sign():
    for g in (2.0, -0.3, 1e3, -1e-4):
        w = {"w": np.array([1.0])}
        Adam(lr=0.1).apply(w, {"w": np.array([g])})
        # Bias correction makes m_hat = g and v_hat = g^2 after one step.
        expected = 0.1 * g / (abs(g) + 1e-8)
        assert abs((1.0 - w["w"][0]) - expected) < 1e-9
        if abs(g) >= 1:
            assert abs((1.0 - w["w"][0]) - 0.1 * np.sign(g)) < 1e-9


def test_linear_learning_rate_decay():
    opt = Adam(lr=1.0, total_steps=4)
    lrs = []
    w = {"w": np.array([0.0])}
    for _ in range(5):
        lrs.append(opt.current_lr())
        opt.apply(w, {"w": np.array([1.0])})
    assert lrs == [1.0, 0.75, 0.5, 0.25, 0.0]


def test_non_finite_gradient_rejected():
    w = {"w": np.array([1.0, 2.0])}
    opt = Adam(lr=0.1)
    with pytest.raises(NonFiniteGradientError):
        opt.apply(w, {"w": np.array([np.nan, 1.0])})
    np.testing.assert_array_equal(w["w"], [1.0, 2.0])
    assert opt.step == 0


def test_gradient_shape_mismatch():
    with pytest.raises(ValueError):
        Adam().apply({"w": np.zeros(2)}, {"w": np.zeros(3)})


def test_polyak_update():
    a, b = Network.init(TOY, 0), Network.init(TOY, 1)
    expected = {k: a.params[k] + 0.25 * (b.params[k] - a.params[k]) for k in a.params}
    polyak_update(a, b, 0.25)
    for k in expected:
        np.testing.assert_allclose(a.params[k], expected[k], rtol=1e-12)


# -- determinism and wiring ---------------------------------------------------


def test_seeded_initialization_and_updates_are_deterministic():
    runs = []
    for _ in range(2):
        net = Network.init(TOY, 7)
        opt = Adam(lr=1e-2)
        rng = np.random.default_rng(7)
        for _ in range(3):
            out, tape = forward(net, toy_obs(rng))
            apply_update(opt, net, backward(net, tape, out["out"]))
        runs.append(net)
    for k in runs[0].params:
        np.testing.assert_array_equal(runs[0].params[k], runs[1].params[k])


def test_encoder_permutation_wiring():
    cfg = TOY
    perm_cfg = NetworkConfig(planes=(("b", 1), ("a", 2)), height=8, width=8, conv_filters=(4, 8),
                             embed_dim=8, hidden=16, dtype="float64")
    net = Network.init(cfg, 5)
    perm = Network.init(perm_cfg, 0)
    for k, v in net.params.items():
        perm.params[k] = v.copy()
    e = cfg.embed_dim
    # Swap the trunk's input blocks to follow the new embedding order.
    perm.params["trunk.w"] = np.concatenate([net.params["trunk.w"][e:], net.params["trunk.w"][:e]])
    obs = toy_obs(np.random.default_rng(5))
    a, ta = forward(net, obs)
    b, tb = forward(perm, obs)
    np.testing.assert_allclose(a["out"], b["out"], rtol=1e-12)
    np.testing.assert_array_equal(ta.concat[:, :e], tb.concat[:, e:])


# -- checkpoints --------------------------------------------------------------


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    net = Network.init(NetworkConfig(planes=(("a", 2),), height=8, width=8), 0)
    arrays = {**network_arrays(net, "policy"), "step": np.array([42], dtype=np.int64),
              "mask": np.array([1, 0], dtype=np.uint8)}
    save_checkpoint(tmp_path / "c.ffck", arrays, {"note": "x"})
    loaded, meta = load_checkpoint(tmp_path / "c.ffck")
    assert meta == {"note": "x"}
    assert loaded.keys() == arrays.keys()
    for k in arrays:
        assert loaded[k].dtype == arrays[k].dtype
        assert loaded[k].tobytes() == arrays[k].tobytes()
    back = network_from_arrays(net.config, loaded, "policy")
    for k in net.params:
        assert back.params[k].tobytes() == net.params[k].tobytes()


def test_checkpoint_rejects_bad_magic_and_truncation(tmp_path):
    save_checkpoint(tmp_path / "c.ffck", {"x": np.zeros(4, np.float32)})
    blob = (tmp_path / "c.ffck").read_bytes()
    (tmp_path / "bad.ffck").write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_checkpoint(tmp_path / "bad.ffck")
    (tmp_path / "short.ffck").write_bytes(blob[:-3])
    with pytest.raises(CheckpointFormatError, match="truncated"):
        load_checkpoint(tmp_path / "short.ffck")
    (tmp_path / "long.ffck").write_bytes(blob + b"\0")
    with pytest.raises(CheckpointFormatError, match="trailing"):
        load_checkpoint(tmp_path / "long.ffck")


def test_checkpoint_missing_parameter():
    net = Network.init(TOY, 0)
    arrays = network_arrays(net, "p")
    arrays.pop("p.trunk.b")
    with pytest.raises(CheckpointFormatError):
        network_from_arrays(TOY, arrays, "p")


@settings(max_examples=5)
@given(st.integers(0, 2**31 - 1))
def test_random_nets_have_finite_outputs(seed):
    net = Network.init(NetworkConfig(planes=(("a", 2),), height=8, width=8), seed)
    out, _ = forward(net, toy_obs(np.random.default_rng(seed), cfg=net.config))
    assert out["out"].shape == (2, 3) and np.all(np.isfinite(out["out"]))
