import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from esnasr.cells import (Cell, backward_sequence, cell_backward, cell_forward, init_cell,
                          param_count, run_sequence)
from esnasr.errors import CacheMismatchError, InvalidConfigError, ShapeError
from esnasr.training import relative_error


def _sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def scalar_lstm(wx, wh, b, x, h, c):
    """Loop-by-loop LSTM step straight from the gate equations (gate blocks i, f, g, o)."""
    d = len(h)
    pre = []
    for j in range(4 * d):
        s = b[j]
        for k in range(len(x)):
            s += x[k] * wx[k][j]
        for k in range(d):
            s += h[k] * wh[k][j]
        pre.append(s)
    h_new, c_new = [], []
    for j in range(d):
        i = _sigmoid(pre[j])
        f = _sigmoid(pre[d + j])
        g = math.tanh(pre[2 * d + j])
        o = _sigmoid(pre[3 * d + j])
        cj = f * c[j] + i * g
        c_new.append(cj)
        h_new.append(o * math.tanh(cj))
    return h_new, c_new


def test_lstm_step_vs_scalar_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10):
        cell = init_cell("lstm", 3, 2, rng)
        x, h, c = rng.normal(size=3), rng.normal(size=2), rng.normal(size=2)
        h1, c1, _ = cell_forward(cell, h, x, c)
        ref_h, ref_c = scalar_lstm(cell.params["w_x"].tolist(), cell.params["w_h"].tolist(),
                                   cell.params["b"].tolist(), x, h, c)
        assert np.max(np.abs(h1 - ref_h)) <= 1e-12
        assert np.max(np.abs(c1 - ref_c)) <= 1e-12


@pytest.mark.parametrize("kind", ["rnn", "lstm"])
def test_zero_weights_zero_state(kind):
    cell = Cell(kind, 3, 4)
    h, _, _ = cell_forward(cell, np.zeros(4), np.ones(3))
    assert np.array_equal(h, np.zeros(4))


def test_rnn_without_recurrence_is_feedforward_and_jacobian():
    rng = np.random.default_rng(1)
    cell = init_cell("simple-rnn", 3, 5, rng)
    cell.params["w_h"][...] = 0.0
    x = rng.normal(size=3)
    h, _, cache = cell_forward(cell, rng.normal(size=5), x)
    pre = x @ cell.params["w_x"] + cell.params["b"]
    assert np.array_equal(h, np.tanh(pre))
    # d h / d x = diag(1 - tanh^2) W_xh, i.e. row j of the jacobian is (1 - h_j^2) w_x[:, j]
    jac = np.empty((5, 3))
    for j in range(5):
        dh = np.zeros(5)
        dh[j] = 1.0
        dx, _, _ = cell_backward(cell, cache, dh)
        jac[j] = dx
    assert np.allclose(jac, (1 - h ** 2)[:, None] * cell.params["w_x"].T, atol=1e-15)


def test_zero_upstream_gives_zero_gradients():
    rng = np.random.default_rng(2)
    cell = init_cell("lstm", 3, 4, rng)
    _, _, cache = cell_forward(cell, rng.normal(size=4), rng.normal(size=3), rng.normal(size=4))
    dx, dh, dc = cell_backward(cell, cache, np.zeros(4), np.zeros(4))
    assert not dx.any() and not dh.any() and not dc.any()
    assert not any(g.any() for g in cell.grads.values())


def test_cache_mismatch():
    rng = np.random.default_rng(3)
    a, b = init_cell("lstm", 2, 3, rng), init_cell("lstm", 2, 3, rng)
    _, _, cache = cell_forward(a, np.zeros(3), np.ones(2))
    with pytest.raises(CacheMismatchError):
        cell_backward(b, cache, np.ones(3))
    with pytest.raises(CacheMismatchError):
        cell_backward(a, cache, np.ones(4))
    with pytest.raises(ShapeError):
        cell_forward(a, np.zeros(3), np.ones(5))
    with pytest.raises(InvalidConfigError):
        Cell("gru", 2, 2)


def _fd_instance(seed):
    rng = np.random.default_rng(seed)
    kind = ("rnn", "lstm")[seed % 2]
    i, d = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    cell = init_cell(kind, i, d, rng)
    xs = rng.normal(size=(2, 4, i))
    w = rng.normal(size=(2, 4, d))

    def loss():
        hs, _ = run_sequence(cell, xs)
        return float(np.sum(w * hs))

    hs, cache = run_sequence(cell, xs)
    cell.zero_grad()
    dxs = backward_sequence(cell, cache, w)
    return cell, xs, loss, dxs


def _central(f, arr, eps=1e-5):
    flat = arr.reshape(-1)
    out = np.empty(flat.size)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        up = f()
        flat[k] = orig - eps
        down = f()
        flat[k] = orig
        out[k] = (up - down) / (2 * eps)
    return out.reshape(arr.shape)


@pytest.mark.parametrize("seed", range(50))
def test_bptt_gradients_match_finite_differences(seed):
    cell, xs, loss, dxs = _fd_instance(seed)
    for name, p in cell.params.items():
        assert relative_error(cell.grads[name], _central(loss, p)).max() <= 1e-6, name
    assert relative_error(dxs, _central(loss, xs)).max() <= 1e-6


def test_sequence_matches_stepwise():
    rng = np.random.default_rng(4)
    cell = init_cell("lstm", 3, 4, rng)
    xs = rng.normal(size=(2, 5, 3))
    hs, _ = run_sequence(cell, xs)
    h, c = np.zeros((2, 4)), np.zeros((2, 4))
    for t in range(5):
        h, c, _ = cell_forward(cell, h, xs[:, t], c)
        assert np.allclose(hs[:, t], h, rtol=0, atol=1e-14)


def test_param_count_examples():
    assert param_count("simple-rnn", 512, 512) == 524_800
    assert param_count("lstm", 512, 512) == 2_099_200
    assert Cell("lstm", 7, 5).num_params() == param_count("lstm", 7, 5)


@given(i=st.integers(1, 2000), d=st.integers(1, 2000))
def test_param_count_ratio(i, d):
    assert param_count("lstm", i, d) == 4 * param_count("rnn", i, d)
    assert param_count("rnn", i, d) / param_count("lstm", i, d) == 0.25
