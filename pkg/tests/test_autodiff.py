import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_difference, grad_mismatches
from pav.autodiff import (
    Adam, Mlp, ParamTensor, Tape, adam_step, add, backward, concat, columns, linear, load_checkpoint, mlp_forward,
    relu, reshape, restore, save_checkpoint, sigmoid, softplus,
)
from pav.errors import InvalidInputError, InvalidStateError, NonFiniteGradientError


def _mlp(rng, widths=(5, 7, 3), hidden="relu", output="identity"):
    return Mlp("m", widths, hidden, output, rng, dtype=np.float64)


def test_zero_network_gives_zero(rng):
    mlp = _mlp(rng)
    for p in mlp.params:
        p.values[...] = 0
    out, _ = mlp_forward(mlp, rng.normal(size=(4, 5)))
    assert np.all(out.value == 0)


def test_identity_layer(rng):
    mlp = _mlp(rng, (4, 4))
    mlp.layers[0][0].values[...] = np.eye(4)
    x = rng.normal(size=(3, 4))
    out, _ = mlp_forward(mlp, x)
    np.testing.assert_array_equal(out.value, x)


def test_width_mismatch(rng):
    with pytest.raises(InvalidInputError):
        mlp_forward(_mlp(rng), np.zeros((2, 4)))


def test_glorot_init(rng):
    mlp = Mlp("m", (40, 24, 1), rng=rng)
    w0 = mlp.layers[0][0].values
    assert w0.shape == (40, 24) and w0.dtype == np.float32
    assert np.abs(w0).max() <= np.sqrt(6 / 64)
    assert all(np.all(b.values == 0) for _, b in mlp.layers)


def test_input_gradient_of_sum_is_ones(rng):
    mlp = _mlp(rng, (3, 3))
    mlp.layers[0][0].values[...] = np.eye(3)
    tape = Tape()
    x = tape.input(rng.normal(size=(5, 3)))
    out, _ = mlp_forward(mlp, x, tape)
    backward(tape, out)
    np.testing.assert_array_equal(x.grad, np.ones((5, 3)))


def _loss(mlp, x, proj):
    out, _ = mlp_forward(mlp, x)
    return float((out.value * proj).sum())


@pytest.mark.parametrize("hidden,output", [("relu", "identity"), ("softplus", "sigmoid")])
def test_mlp_gradients_match_finite_differences(rng, hidden, output):
    mlp = _mlp(rng, (5, 6, 6, 3), hidden, output)
    x = rng.normal(size=(8, 5))
    proj = rng.normal(size=(8, 3))
    tape = Tape()
    xin = tape.input(x)
    out, _ = mlp_forward(mlp, xin, tape)
    tape.backward(out, proj)
    for p in mlp.params:
        num = np.array([central_difference(lambda: _loss(mlp, x, proj), p.values, i)
                        for i in np.ndindex(p.shape)])
        assert len(grad_mismatches(p.grad.reshape(-1), num)) == 0, p.name
    num_x = np.array([central_difference(lambda: _loss(mlp, x, proj), x, i) for i in np.ndindex(x.shape)])
    assert len(grad_mismatches(xin.grad.reshape(-1), num_x)) == 0


def test_two_passes_accumulate(rng):
    mlp = _mlp(rng)
    a, b = rng.normal(size=(2, 4, 5))
    grads = []
    for x in (a, b):
        for p in mlp.params:
            p.zero_grad()
        out, tape = mlp_forward(mlp, x)
        tape.backward(out)
        grads.append([p.grad.copy() for p in mlp.params])
    for p in mlp.params:
        p.zero_grad()
    for x in (a, b):
        out, tape = mlp_forward(mlp, x)
        tape.backward(out)
    for k, p in enumerate(mlp.params):
        np.testing.assert_allclose(p.grad, grads[0][k] + grads[1][k], atol=1e-12)


def test_batched_equals_sum_of_samples(rng):
    mlp = _mlp(rng)
    x = rng.normal(size=(6, 5))
    out, tape = mlp_forward(mlp, x)
    tape.backward(out)
    batched = [p.grad.copy() for p in mlp.params]
    for p in mlp.params:
        p.zero_grad()
    for row in x:
        out, tape = mlp_forward(mlp, row[None])
        tape.backward(out)
    for b, p in zip(batched, mlp.params):
        np.testing.assert_allclose(p.grad, b, atol=1e-5)


def test_backward_without_forward():
    with pytest.raises(InvalidStateError):
        Tape().backward(Tape().constant(np.zeros(3)))


def test_backward_twice_rejected(rng):
    mlp = _mlp(rng)
    out, tape = mlp_forward(mlp, rng.normal(size=(2, 5)))
    tape.backward(out)
    with pytest.raises(InvalidStateError):
        tape.backward(out)


def test_param_watched_twice_shares_leaf(rng):
    p = ParamTensor("p", rng.normal(size=(3, 2)))
    tape = Tape()
    x = tape.constant(rng.normal(size=(4, 3)))
    y = add(linear(x, tape.param(p)), linear(x, tape.param(p)))
    tape.backward(y)
    np.testing.assert_allclose(p.grad, 2 * x.value.T @ np.ones((4, 2)))


def test_elementary_ops_gradients(rng):
    x0 = rng.normal(size=(4, 6))

    def build(x):
        tape = Tape()
        xv = tape.input(x)
        a = columns(xv, 0, 3)
        b = columns(xv, 3, 6)
        y = concat([sigmoid(a), softplus(b), relu(add(a, b))])
        return tape, xv, reshape(y, (4, 3, 3))

    proj = rng.normal(size=(4, 3, 3))
    tape, xv, y = build(x0)
    tape.backward(y, proj)
    num = [central_difference(lambda: float((build(x0)[2].value * proj).sum()), x0, i, 1e-5)
           for i in np.ndindex(x0.shape)]
    assert len(grad_mismatches(xv.grad.reshape(-1), num)) == 0


def test_sigmoid_softplus_stable():
    tape = Tape()
    x = tape.input(np.array([-800.0, 0.0, 800.0]))
    np.testing.assert_allclose(sigmoid(x).value, [0, 0.5, 1])
    np.testing.assert_allclose(softplus(x).value, [0, np.log(2), 800])


# -- Adam -------------------------------------------------------------------------

def test_zero_gradient_leaves_params():
    p = ParamTensor("p", np.array([1.0, -2.0]))
    adam = Adam([p], 0.1)
    adam.step()
    np.testing.assert_array_equal(p.values, [1.0, -2.0])
    assert adam.t == 1


def test_first_step_scalar():
    p = ParamTensor("p", np.array([0.0]))
    adam = Adam([p], 0.01)
    p.grad[...] = 1.0
    adam.step()
    assert p.values[0] == pytest.approx(-0.01, abs=1e-9)
    assert p.grad[0] == 0


def test_two_step_recurrence():
    b1, b2, eps, lr, g = 0.9, 0.99, 1e-8, 0.05, 0.3
    p = ParamTensor("p", np.array([1.0]))
    adam = Adam([p], lr, b1, b2, eps)
    x, m, v = 1.0, 0.0, 0.0
    for t in (1, 2):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        p.grad[...] = g
        adam.step()
    assert p.values[0] == pytest.approx(x, abs=1e-12)


def test_group_learning_rates():
    a = ParamTensor("a", np.zeros(1), group="offset")
    b = ParamTensor("b", np.zeros(1), group="color")
    adam = Adam([a, b], {"offset": 2.5e-4, "color": 2.5e-3})
    a.grad[...] = 1
    b.grad[...] = 1
    adam_step([a, b], adam)
    assert a.values[0] == pytest.approx(-2.5e-4, rel=1e-6)
    assert b.values[0] == pytest.approx(-2.5e-3, rel=1e-6)


def test_non_finite_gradient_rejected():
    p = ParamTensor("w", np.zeros((2, 3)))
    adam = Adam([p], 0.1)
    p.grad[1, 2] = np.nan
    with pytest.raises(NonFiniteGradientError) as info:
        adam.step()
    assert info.value.name == "w" and info.value.index == (1, 2)
    assert adam.t == 0 and np.all(p.values == 0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=6))
def test_update_bounded_by_lr(grads):
    p = ParamTensor("p", np.zeros(1))
    adam = Adam([p], 0.01)
    for g in grads:
        before = p.values.copy()
        p.grad[...] = g
        adam.step()
        assert np.all(np.isfinite(p.values))
        # Adam steps never exceed lr / (1 - beta1) in magnitude
        assert abs(p.values[0] - before[0]) <= 0.01 / 0.1 + 1e-12


# -- checkpoints ------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, rng):
    w = ParamTensor("layer.weight", rng.normal(size=(3, 4)).astype(np.float32))
    s = ParamTensor("scalar", np.array(2.5, dtype=np.float32))
    adam = Adam([w, s], 0.01)
    w.grad[...] = 1
    adam.step()
    save_checkpoint(tmp_path / "c.bin", [w, s], adam)
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw.startswith(b"PAVCKPT1")
    stored = load_checkpoint(tmp_path / "c.bin")
    assert set(stored) == {"layer.weight", "scalar", "layer.weight.m", "layer.weight.v", "scalar.m", "scalar.v",
                           "adam.t"}
    w2 = ParamTensor("layer.weight", np.zeros((3, 4), dtype=np.float32))
    s2 = ParamTensor("scalar", np.zeros((), dtype=np.float32))
    adam2 = Adam([w2, s2], 0.01)
    restore([w2, s2], stored, adam2)
    assert np.array_equal(w2.values, w.values) and s2.values == s.values
    assert adam2.t == 1
    np.testing.assert_array_equal(adam2.m["layer.weight"], adam.m["layer.weight"])


def test_checkpoint_layout(tmp_path):
    p = ParamTensor("ab", np.array([1.0, 2.0], dtype=np.float32))
    save_checkpoint(tmp_path / "c.bin", [p])
    raw = (tmp_path / "c.bin").read_bytes()
    expected = (b"PAVCKPT1" + (2).to_bytes(4, "little") + b"ab" + b"f32" + (1).to_bytes(4, "little")
                + (2).to_bytes(4, "little") + np.array([1, 2], dtype="<f4").tobytes())
    assert raw == expected


def test_checkpoint_rejects_garbage_and_mismatch(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"nope")
    with pytest.raises(InvalidInputError):
        load_checkpoint(tmp_path / "x.bin")
    p = ParamTensor("p", np.zeros(3, dtype=np.float32))
    save_checkpoint(tmp_path / "c.bin", [p])
    with pytest.raises(InvalidInputError):
        restore([ParamTensor("p", np.zeros(4, dtype=np.float32))], load_checkpoint(tmp_path / "c.bin"))
    with pytest.raises(InvalidInputError):
        restore([ParamTensor("q", np.zeros(3, dtype=np.float32))], load_checkpoint(tmp_path / "c.bin"))
