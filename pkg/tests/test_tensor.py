import math

import numpy as np
import pytest

from confadv import tensor as T
from confadv.tensor import Tape, Tensor

from oracles import conv2d_ref, maxpool_ref, run_net, same_signature, xent_ref


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def test_conv_constant_input_sums():
    out = T.conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 2, 2)))
    assert out.shape == (1, 2, 2)
    assert np.all(out.data == 4.0)


def test_conv_hand_cross_correlation():
    x = np.array([[[1, 2], [3, 4]]], np.float32)
    k = np.array([[[[1, 0], [0, 1]]]], np.float32)
    assert T.conv2d(x, k).data.tolist() == [[[5.0]]]


def test_conv_identity_kernel_and_adjoint():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 6, 7)).astype(np.float32)
    with Tape() as tape:
        xt = Tensor(x)
        y = T.conv2d(xt, np.ones((1, 1, 1, 1)))
        seed = rng.standard_normal(y.shape).astype(np.float32)
        loss = T.tsum(T.mul(y, seed))
    np.testing.assert_array_equal(y.data, x)
    np.testing.assert_array_equal(tape.gradient(loss, xt).data, seed)


@pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (2, 1, 3), (1, 2, 5), (2, 0, 1), (3, 1, 2)])
def test_conv_output_extent_and_reference(stride, padding, k):
    rng = np.random.default_rng(stride * 10 + padding + k)
    x = rng.standard_normal((2, 9, 8)).astype(np.float32)
    w = rng.standard_normal((3, 2, k, k)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    out = T.conv2d(x, w, b, stride, padding)
    assert out.shape == (3, (9 + 2 * padding - k) // stride + 1, (8 + 2 * padding - k) // stride + 1)
    np.testing.assert_allclose(out.data, conv2d_ref(x, w, b, stride, padding), rtol=1e-5, atol=1e-5)


def test_conv_batched_matches_single():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 2, 8, 8)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    batched = T.conv2d(x, w, None, 1, 1).data
    for i in range(4):
        np.testing.assert_allclose(batched[i], T.conv2d(x[i], w, None, 1, 1).data, rtol=1e-6, atol=1e-6)


@pytest.mark.parametrize("x_shape,w_shape", [((2, 5, 5), (1, 3, 3, 3)), ((1, 2, 2), (1, 1, 3, 3)), ((1, 4, 4), (1, 1, 3, 2))])
def test_conv_shape_errors(x_shape, w_shape):
    with pytest.raises(T.ShapeError):
        T.conv2d(np.zeros(x_shape), np.zeros(w_shape))


# ---------------------------------------------------------------------------
# maxpool2, dense, activations
# ---------------------------------------------------------------------------

def test_maxpool_basic_and_constant():
    assert T.maxpool2(np.array([[[1, 2], [3, 4]]])).data.tolist() == [[[4.0]]]
    out = T.maxpool2(np.full((2, 6, 4), 0.3)).data
    assert out.shape == (2, 3, 2) and np.all(out == np.float32(0.3))


def test_maxpool_tie_routes_to_first_cell():
    with Tape() as tape:
        x = Tensor(np.full((1, 2, 2), 5.0))
        loss = T.tsum(T.maxpool2(x))
    assert loss.item() == 5.0
    assert tape.gradient(loss, x).data.tolist() == [[[1.0, 0.0], [0.0, 0.0]]]


def test_maxpool_matches_reference():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((3, 6, 8)).astype(np.float32)
    ref, _ = maxpool_ref(x)
    np.testing.assert_array_equal(T.maxpool2(x).data, ref.astype(np.float32))


def test_maxpool_odd_extent_rejected():
    with pytest.raises(T.ShapeError):
        T.maxpool2(np.zeros((1, 3, 4)))


def test_dense_examples():
    x = np.array([0.3, 0.7], np.float32)
    np.testing.assert_array_equal(T.dense(x, np.eye(2), np.zeros(2)).data, x)
    np.testing.assert_allclose(T.dense(x, [[1, -2]], [0]).data, [-1.1], rtol=1e-6)
    np.testing.assert_array_equal(T.dense(x, np.zeros((3, 2)), [1, 2, 3]).data, [1, 2, 3])
    with pytest.raises(T.ShapeError):
        T.dense(np.zeros(3), np.zeros((2, 2)), np.zeros(2))


def test_relu_and_tanh():
    assert T.relu([-1.0, 0.0, 2.0]).data.tolist() == [0.0, 0.0, 2.0]
    assert T.tanh_map([0.0]).data.tolist() == [0.0]
    ys = T.tanh_map(np.array([1.0, 5.0, 50.0, 1e4])).data
    assert np.all(np.abs(ys) <= 1) and np.all(np.diff(ys) >= 0)


def test_nonfinite_rejected():
    with pytest.raises(T.NonFiniteError):
        Tensor([1.0, np.nan])


# ---------------------------------------------------------------------------
# softmax cross-entropy
# ---------------------------------------------------------------------------

def test_xent_values():
    assert T.softmax_cross_entropy([0.0, 0.0], 0).item() == pytest.approx(math.log(2), rel=1e-6)
    assert T.softmax_cross_entropy([10.0, -10.0], 0).item() == pytest.approx(2.0611536e-9, rel=1e-5)
    assert T.softmax_cross_entropy([10.0, -10.0], 1).item() == pytest.approx(20.0, rel=1e-6)


def test_xent_shift_invariant():
    rng = np.random.default_rng(5)
    for _ in range(20):
        z = rng.standard_normal(2) * 3
        t = rng.uniform(-50, 50)
        a = T.softmax_cross_entropy(z, 1).item()
        b = T.softmax_cross_entropy(z + t, 1).item()
        assert a == pytest.approx(b, rel=1e-5, abs=1e-6)
        assert a == pytest.approx(xent_ref(z.astype(np.float32), 1), rel=1e-5, abs=1e-6)


def test_xent_gradient_sums_to_zero():
    rng = np.random.default_rng(6)
    for _ in range(50):
        with Tape() as tape:
            z = Tensor(rng.standard_normal(2) * 5)
            loss = T.softmax_cross_entropy(z, int(rng.integers(2)))
        g = tape.gradient(loss, z).data
        assert abs(float(g.sum())) < 1e-6


# ---------------------------------------------------------------------------
# gradient
# ---------------------------------------------------------------------------

def test_gradient_of_sum_is_ones():
    with Tape() as tape:
        x = Tensor(np.random.default_rng(0).standard_normal((3, 4)))
        loss = T.tsum(x)
    assert np.all(tape.gradient(loss, x).data == 1.0)


def test_gradient_dense_adjoint():
    with Tape() as tape:
        x = Tensor([0.3, 0.7])
        loss = T.tsum(T.dense(x, [[1, -2]], [0]))
    assert tape.gradient(loss, x).data.tolist() == [1.0, -2.0]


def test_gradient_of_unrelated_tensor_is_zero():
    with Tape() as tape:
        x = Tensor([1.0, 2.0])
        y = Tensor([3.0])
        loss = T.tsum(T.mul(x, x))
    assert np.all(T.gradient(tape, loss, y).data == 0.0)


def test_replay_is_bit_identical_and_nodes_visited_once():
    rng = np.random.default_rng(9)
    w = rng.standard_normal((2, 1, 3, 3)).astype(np.float32)
    with Tape() as tape:
        x = Tensor(rng.random((1, 6, 6)))
        h = T.relu(T.conv2d(x, w, np.zeros(2), 1, 1))
        z = T.dense(T.flatten(T.maxpool2(h)), rng.standard_normal((2, 18)), np.zeros(2))
        loss = T.softmax_cross_entropy(z, 1)
    for rec, out in zip(tape.records, tape.replay()):
        np.testing.assert_array_equal(rec.output.data, out)

    calls = []
    original = dict(T.OPS)
    try:
        for name, op in original.items():
            T.OPS[name] = T.Op(op.forward, (lambda n, b: lambda ctx, g, needs: (calls.append(n), b(ctx, g, needs))[1])(name, op.backward))
        tape.gradient(loss, x)
    finally:
        T.OPS.update(original)
    assert len(calls) == len(tape.records)


def test_forward_deterministic():
    rng = np.random.default_rng(11)
    x = rng.random((5, 1, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 1, 3, 3)).astype(np.float32)
    a = T.conv2d(x, w, None, 1, 1).data
    b = T.conv2d(x, w, None, 1, 1).data
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------------------
# finite differences on random composed networks
# ---------------------------------------------------------------------------

def random_network(rng):
    """Random network of up to four parametrised layers plus activations."""
    c, size = int(rng.integers(1, 3)), int(rng.choice([6, 8]))
    shape = (c, size, size)
    layers, params = [], {}
    n_layers = int(rng.integers(1, 5))
    for i in range(n_layers - 1):
        k = int(rng.choice([1, 3, 5]))
        if k > size:
            k = 1
        stride = int(rng.choice([1, 2])) if size >= 6 else 1
        pad = int(rng.integers(0, k // 2 + 1))
        co = int(rng.integers(1, 4))
        params[f"w{i}"] = (rng.standard_normal((co, c, k, k)) / math.sqrt(c * k * k)).astype(np.float32)
        params[f"b{i}"] = (0.1 * rng.standard_normal(co)).astype(np.float32)
        layers.append(("conv", f"w{i}", f"b{i}", stride, pad))
        size = (size + 2 * pad - k) // stride + 1
        c = co
        layers.append((str(rng.choice(["relu", "tanh"])),))
        if size % 2 == 0 and size >= 2 and rng.random() < 0.5:
            layers.append(("pool",))
            size //= 2
    params["wd"] = (rng.standard_normal((2, c * size * size)) / math.sqrt(c * size * size)).astype(np.float32)
    params["bd"] = (0.1 * rng.standard_normal(2)).astype(np.float32)
    layers.append(("dense", "wd", "bd"))
    return layers, params, shape


def engine_forward(layers, params, x):
    h = x
    for layer in layers:
        kind = layer[0]
        if kind == "conv":
            h = T.conv2d(h, params[layer[1]], params[layer[2]], layer[3], layer[4])
        elif kind == "relu":
            h = T.relu(h)
        elif kind == "tanh":
            h = T.tanh_map(h)
        elif kind == "pool":
            h = T.maxpool2(h)
        else:
            h = T.dense(T.flatten(h), params[layer[1]], params[layer[2]])
    return h


def fd_check(layers, params, x, label, names, rng, n_probe=6, h=1e-3):
    """Compare engine gradients with float64 central differences of the reference net."""
    with Tape() as tape:
        xt = Tensor(x)
        wt = {k: Tensor(v) for k, v in params.items()}
        loss = T.softmax_cross_entropy(engine_forward(layers, wt, xt), label)
    targets = {"x": xt, **{k: wt[k] for k in names}}
    grads = dict(zip(targets, tape.gradient(loss, list(targets.values()))))

    checked = skipped = 0
    for key, g in grads.items():
        base = x if key == "x" else params[key]
        flat_idx = rng.choice(base.size, size=min(n_probe, base.size), replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, base.shape)

            def f(delta):
                arr = base.astype(np.float64).copy()
                arr[idx] += delta
                p = {k: v for k, v in params.items()}
                xx = x
                if key == "x":
                    xx = arr
                else:
                    p[key] = arr
                out, sig = run_net(layers, p, xx)
                return xent_ref(out, label), sig

            fp, sp = f(h)
            fm, sm = f(-h)
            _, s0 = f(0.0)
            if not (same_signature(sp, s0) and same_signature(sm, s0)):
                skipped += 1  # probe straddles a relu/pool kink
                continue
            num = (fp - fm) / (2 * h)
            ana = float(g.data[idx])
            assert abs(ana - num) <= 1e-3 * abs(num) + 1e-5, (key, idx, ana, num)
            checked += 1
    return checked, skipped


def test_finite_differences_random_networks():
    rng = np.random.default_rng(2024)
    total_checked = total_skipped = 0
    for trial in range(100):
        layers, params, shape = random_network(rng)
        x = rng.random(shape).astype(np.float32)
        names = [k for k in params if rng.random() < 0.5][:2]
        c, s = fd_check(layers, params, x, int(rng.integers(2)), names, rng)
        total_checked += c
        total_skipped += s
    assert total_checked >= 500
    assert total_skipped <= 0.05 * (total_checked + total_skipped)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = np.array([0.5, -1.0, 2.0], np.float32)
    new, st = T.adam_update(p, np.zeros(3, np.float32), T.AdamState.fresh(p, lr=1e-3))
    np.testing.assert_array_equal(new, p)
    assert st.step == 1


def test_adam_first_step_is_learning_rate():
    p = np.zeros(4, np.float32)
    g = np.array([0.3, -2.0, 1e-2, 7.0], np.float32)
    new, _ = T.adam_update(p, g, T.AdamState.fresh(p, lr=1e-3))
    # m_hat = g and v_hat = g^2, so each step is lr * sign(g) up to the eps term
    np.testing.assert_allclose(new, -1e-3 * np.sign(g), rtol=1e-4)


def test_adam_moves_against_gradient_sign_and_counts_steps():
    p = np.zeros(3, np.float32)
    g = np.array([1.0, -1.0, 0.5], np.float32)
    st = T.AdamState.fresh(p, lr=1e-2)
    p1, st = T.adam_update(p, g, st)
    p2, st = T.adam_update(p1, g, st)
    assert st.step == 2 and st.beta2 == 0.99 and st.beta1 == 0.9
    assert np.all(np.sign(p1 - p) == -np.sign(g)) and np.all(np.sign(p2 - p1) == -np.sign(g))
    assert st.m.shape == p.shape and st.v.shape == p.shape


def test_adam_shape_mismatch():
    p = np.zeros(3, np.float32)
    with pytest.raises(T.ShapeError):
        T.adam_update(p, np.zeros(2, np.float32), T.AdamState.fresh(p))
