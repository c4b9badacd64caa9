import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from langevin_rom.nn import (ACTIVATIONS, AdamState, Mlp, ShapeError, adam_step, grad_params, load_checkpoint,
                             save_checkpoint)

# shapes used by the stationary, joint and mobility networks (1D and 2D)
SHAPES = [(2, 128, 64, 1), (3, 128, 64, 2), (4, 256, 128, 2), (6, 256, 128, 4), (1, 128, 128, 1), (2, 128, 128, 4)]
N_DRAWS = 20


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def random_loss(rng, d_out):
    w = rng.standard_normal(d_out)

    def loss(out):
        # smooth nonlinear scalar of the output
        v = np.sum(np.sin(out @ w))
        return v, np.cos(out @ w)[:, None] * w[None, :]

    return loss


@pytest.mark.parametrize("widths", SHAPES)
def test_parameter_gradients(widths):
    for draw in range(N_DRAWS):
        rng = np.random.default_rng(1000 * draw + sum(widths))
        net = Mlp.init(widths, rng)
        x = rng.standard_normal((7, widths[0]))
        loss = random_loss(rng, widths[-1])
        _, grads = grad_params(net, loss, x)
        flat_g = np.concatenate([g.ravel() for g in grads])
        theta = net.flat()
        idx = rng.choice(len(theta), size=25, replace=False)
        h = 1e-6
        fd = np.empty(len(idx))
        for k, i in enumerate(idx):
            t = theta.copy()
            t[i] += h
            net.set_flat(t)
            up = loss(net.forward(x))[0]
            t[i] -= 2 * h
            net.set_flat(t)
            dn = loss(net.forward(x))[0]
            fd[k] = (up - dn) / (2 * h)
        net.set_flat(theta)
        assert rel_err(flat_g[idx], fd) < 1e-4, (widths, draw)


@pytest.mark.parametrize("widths", SHAPES)
def test_input_jacobian(widths):
    for draw in range(N_DRAWS):
        rng = np.random.default_rng(77 + 31 * draw + widths[1])
        net = Mlp.init(widths, rng)
        x = rng.standard_normal((4, widths[0]))
        out, J = net.forward_and_jacobian(x)
        assert np.allclose(out, net.forward(x))
        h = 1e-6
        fd = np.empty_like(J)
        for j in range(widths[0]):
            e = np.zeros(widths[0])
            e[j] = h
            fd[:, :, j] = (net.forward(x + e) - net.forward(x - e)) / (2 * h)
        assert rel_err(J, fd) < 1e-4, (widths, draw)


@pytest.mark.parametrize("act", sorted(ACTIVATIONS))
def test_input_gradient_via_backward(act):
    for draw in range(N_DRAWS):
        rng = np.random.default_rng(draw)
        net = Mlp.init((3, 16, 8, 2), rng, activation=act)
        x = rng.standard_normal((5, 3))
        g_out = rng.standard_normal((5, 2))
        out, cache = net.forward(x, cache=True)
        _, gx = net.backward(cache, g_out, need_input=True)
        J = net.jacobian(x)
        assert np.allclose(gx, np.einsum("no,noi->ni", g_out, J), rtol=1e-10, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(sorted(ACTIVATIONS)))
def test_activation_derivatives(seed, act):
    f, df, both = ACTIVATIONS[act]
    a = np.random.default_rng(seed).uniform(-6, 6, 50)
    h = 1e-6
    assert np.allclose(df(a), (f(a + h) - f(a - h)) / (2 * h), rtol=1e-6, atol=1e-8)
    v, d = both(a)
    assert np.allclose(v, f(a)) and np.allclose(d, df(a))


def test_zero_last_layer_gives_zero_output():
    net = Mlp.init((2, 8, 3), 0, zero_last=True)
    assert np.all(net.forward(np.ones((4, 2))) == 0)


def test_shape_errors():
    net = Mlp.init((2, 4, 1), 0)
    with pytest.raises(ShapeError):
        net.forward(np.ones((3, 5)))
    with pytest.raises(ShapeError):
        adam_step(AdamState(), net.params(), net.params()[:-1])


def test_adam_matches_closed_form_first_step():
    # after one step with bias correction every coordinate moves by lr * sign(g)
    p = [np.array([1.0, -2.0, 3.0])]
    g = [np.array([0.3, -5.0, 1e-3])]
    st_ = AdamState(lr=0.01)
    adam_step(st_, p, g)
    assert np.allclose(p[0], np.array([1.0, -2.0, 3.0]) - 0.01 * np.sign(g[0]), atol=1e-7)


def test_adam_decoupled_weight_decay_on_zero_gradient():
    p = [np.array([2.0])]
    st_ = AdamState(lr=0.1, weight_decay=0.5)
    adam_step(st_, p, [np.zeros(1)])
    assert p[0][0] == pytest.approx(2.0 * (1 - 0.05))


def test_adam_minimizes_quadratic():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((5, 5))
    A = A @ A.T + np.eye(5)
    x = [rng.standard_normal(5)]
    st_ = AdamState(lr=0.05)
    for _ in range(3000):
        adam_step(st_, x, [A @ x[0]])
    assert np.linalg.norm(x[0]) < 1e-3


def test_checkpoint_round_trip(tmp_path):
    net = Mlp.init((3, 9, 2), 5, activation="tanh")
    save_checkpoint(net, tmp_path / "net.bin", {"note": "x"})
    back, meta = load_checkpoint(tmp_path / "net.bin")
    assert back.widths == net.widths and back.activation == "tanh"
    assert np.array_equal(back.flat(), net.flat())
    assert meta["note"] == "x"


def test_checkpoint_rejects_bad_magic(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"\x00" * 64)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.bin")
