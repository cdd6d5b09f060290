import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctpg.approx import (AdamState, DivergenceError, NetSpec, Optimizer, ParamBlock, TaskNet, adam_step, forward,
                         gradient, init_mlp, load_checkpoint, rng_from_state, rng_state, save_checkpoint)

from oracles import central_diff, rel_error


def test_netspec_param_count():
    spec = NetSpec(3, 2, (4, 5))
    assert spec.n_params == 3 * 4 + 4 + 4 * 5 + 5 + 5 * 2 + 2
    with pytest.raises(ValueError):
        NetSpec(0, 2)
    with pytest.raises(ValueError):
        NetSpec(2, 2, ())


def test_forward_rejects_wrong_input_length():
    spec = NetSpec(3, 2, (4,))
    p = init_mlp(spec, np.random.default_rng(0))
    with pytest.raises(ValueError):
        forward(p, spec, np.zeros(4))


def test_forward_single_matches_batch():
    spec = NetSpec(3, 2, (8, 8))
    p = init_mlp(spec, np.random.default_rng(1))
    x = np.random.default_rng(2).normal(size=(5, 3))
    batch = forward(p, spec, x)
    for i in range(5):
        np.testing.assert_allclose(forward(p, spec, x[i]), batch[i], rtol=0, atol=1e-14)


def test_param_block_shape_mismatch():
    with pytest.raises(ValueError):
        ParamBlock(np.zeros(5), [(2, 2)])


@pytest.mark.parametrize("seed", range(8))
def test_mlp_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    spec = NetSpec(int(rng.integers(1, 5)), int(rng.integers(1, 4)), tuple(int(h) for h in rng.integers(2, 7, size=2)))
    p = init_mlp(spec, rng)
    x = rng.normal(size=(4, spec.input_dim))
    up = rng.normal(size=(4, spec.output_dim))
    g, gx = gradient(p, spec, x, up)
    fd = central_diff(lambda: float(np.sum(up * forward(p, spec, x))), p.data)
    assert rel_error(g, fd) <= 1e-4
    fdx = central_diff(lambda: float(np.sum(up * forward(p, spec, x))), x)
    assert rel_error(gx, fdx) <= 1e-4


@pytest.mark.parametrize("shared", [False, True])
@pytest.mark.parametrize("seed", range(4))
def test_tasknet_gradient_matches_finite_differences(shared, seed):
    rng = np.random.default_rng(100 + seed)
    net = TaskNet("mlp", 3, 2, rng, input_dim=3, hidden_sizes=(5, 4), shared=shared)
    tasks = np.array([2, 0, 2, 1, 0])
    x = rng.normal(size=(5, 3))
    up = rng.normal(size=(5, 2))
    out, cache = net.forward_cache(tasks, x)
    g, gx = net.backward(cache, up)
    loss = lambda: float(np.sum(up * net.forward(tasks, x)))
    assert rel_error(g, central_diff(loss, net.params)) <= 1e-4
    assert rel_error(gx, central_diff(loss, x)) <= 1e-4


def test_tasknet_rows_use_their_own_task_parameters():
    net = TaskNet("mlp", 2, 1, np.random.default_rng(0), input_dim=2, hidden_sizes=(3,))
    x = np.ones((1, 2))
    a = net.forward(np.array([0]), x)
    b = net.forward(np.array([1]), x)
    assert a[0, 0] != b[0, 0]
    mixed = net.forward(np.array([1, 0]), np.ones((2, 2)))
    np.testing.assert_array_equal(mixed[:, 0], [b[0, 0], a[0, 0]])


def test_shared_trunk_has_per_task_head_only():
    per = TaskNet("mlp", 4, 2, np.random.default_rng(0), input_dim=3, hidden_sizes=(5,))
    sh = TaskNet("mlp", 4, 2, np.random.default_rng(0), input_dim=3, hidden_sizes=(5,), shared=True)
    assert per.size == 4 * (3 * 5 + 5 + 5 * 2 + 2)
    assert sh.size == 3 * 5 + 5 + 4 * (5 * 2 + 2)


def test_table_gradient_accumulates_duplicates():
    net = TaskNet("table", 2, 3, n_states=4)
    out, cache = net.forward_cache(np.array([1, 1, 0]), np.array([2, 2, 3]))
    np.testing.assert_array_equal(out, 0.0)
    g, gx = net.backward(cache, np.array([[1.0, 0, 0], [2.0, 0, 0], [0, 0, 5.0]]))
    assert gx is None
    G = g.reshape(2, 4, 3)
    assert G[1, 2, 0] == 3.0 and G[0, 3, 2] == 5.0 and np.count_nonzero(G) == 2


def test_adam_first_step_moves_by_lr():
    p = np.array([1.0, -2.0])
    new, st_ = adam_step(p, np.array([0.5, -3.0]), AdamState.zeros(2), lr=0.1)
    # bias-corrected first step is lr * sign(g) up to eps
    np.testing.assert_allclose(new, [0.9, -1.9], atol=1e-7)
    assert st_.t == 1
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_adam_two_steps_hand_computed():
    p, s = np.array([0.0]), AdamState.zeros(1)
    p, s = adam_step(p, np.array([1.0]), s, lr=1.0)
    p, s = adam_step(p, np.array([2.0]), s, lr=1.0)
    m = 0.9 * 0.1 + 0.1 * 2.0
    v = 0.999 * 0.001 + 0.001 * 4.0
    step2 = (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    step1 = 1.0 / (1.0 + 1e-8)
    np.testing.assert_allclose(p, [-step1 - step2], rtol=1e-12)


def test_adam_rejects_non_finite():
    with pytest.raises(DivergenceError):
        adam_step(np.zeros(2), np.array([np.nan, 0.0]), AdamState.zeros(2), 0.1)


def test_sgd_optimizer_in_place():
    p = np.array([1.0, 2.0])
    Optimizer(2, 0.5, "sgd").step(p, np.array([2.0, -2.0]))
    np.testing.assert_array_equal(p, [0.0, 3.0])
    with pytest.raises(ValueError):
        Optimizer(2, 0.5, "rmsprop")


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    blocks = {"a": rng.normal(size=7), "b": rng.normal(size=(2, 3))}
    rng.normal(size=3)
    save_checkpoint(tmp_path / "c.npz", blocks, {"x": rng_state(rng)}, {"note": "hi"})
    got, header = load_checkpoint(tmp_path / "c.npz")
    for k in blocks:
        np.testing.assert_array_equal(got[k], blocks[k])
    assert header["meta"] == {"note": "hi"}
    assert header["blocks"]["b"] == {"shape": [2, 3], "dtype": "<f8"}
    r2 = rng_from_state(header["rng"]["x"])
    np.testing.assert_array_equal(r2.normal(size=4), rng.normal(size=4))


def test_checkpoint_schema_version_checked(tmp_path):
    import json
    save_checkpoint(tmp_path / "c.npz", {"a": np.zeros(2)})
    with np.load(tmp_path / "c.npz") as z:
        header = json.loads(str(z["header"]))
        arrays = {k: z[k] for k in z.files if k != "header"}
    header["schema_version"] = 99
    np.savez(tmp_path / "bad.npz", header=np.array(json.dumps(header)), **arrays)
    with pytest.raises(ValueError, match="schema"):
        load_checkpoint(tmp_path / "bad.npz")


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), batch=st.integers(1, 6))
def test_gradient_is_linear_in_upstream(seed, batch):
    rng = np.random.default_rng(seed)
    spec = NetSpec(3, 2, (4,))
    p = init_mlp(spec, rng)
    x = rng.normal(size=(batch, 3))
    u1, u2 = rng.normal(size=(batch, 2)), rng.normal(size=(batch, 2))
    g1, _ = gradient(p, spec, x, u1)
    g2, _ = gradient(p, spec, x, u2)
    g12, _ = gradient(p, spec, x, 2 * u1 - u2)
    np.testing.assert_allclose(g12, 2 * g1 - g2, atol=1e-10)
