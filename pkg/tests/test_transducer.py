import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import softmax

from esnasr.errors import EmptyInputError, OracleTooLargeError, ShapeError, VocabError
from esnasr.training import finite_diff_report, relative_error
from esnasr.transducer import (BLANK, LogitLattice, ModelConfig, brute_force_loss, build_model,
                               count_alignments, greedy_decode, joint, model_forward,
                               stack_frames, transducer_loss, transducer_loss_batch)


def _random_case(rng, T=None, U=None, V=None, scale=2.0):
    T = T or int(rng.integers(1, 5))
    U = int(rng.integers(0, 4)) if U is None else U
    V = V or int(rng.integers(1, 4))
    logits = rng.normal(scale=scale, size=(T, U + 1, V + 1))
    labels = rng.integers(1, V + 1, size=U).tolist()
    return LogitLattice(logits), labels


def test_single_forced_path():
    logits = np.array([[[0.3, -1.0, 2.0]]])
    expected = -math.log(softmax(logits[0, 0])[BLANK])
    loss, _ = transducer_loss(logits, [])
    assert loss == pytest.approx(expected, abs=1e-14)
    assert brute_force_loss(logits, []) == pytest.approx(expected, abs=1e-14)


def test_two_frames_one_label_by_hand():
    rng = np.random.default_rng(0)
    lat = rng.normal(size=(2, 2, 3))
    p = softmax(lat, axis=-1)
    y = 2
    # emit y at frame 0 then two blanks, or blank, emit y at frame 1, blank
    prob = (p[0, 0, y] * p[0, 1, 0] * p[1, 1, 0]) + (p[0, 0, 0] * p[1, 0, y] * p[1, 1, 0])
    assert brute_force_loss(lat, [y]) == pytest.approx(-math.log(prob), abs=1e-14)
    assert transducer_loss(lat, [y])[0] == pytest.approx(-math.log(prob), abs=1e-14)
    assert count_alignments(2, 1) == 2


def test_loss_matches_brute_force_300_lattices():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(300):
        lat, labels = _random_case(rng)
        worst = max(worst, abs(transducer_loss(lat, labels)[0] - brute_force_loss(lat, labels)))
    assert worst <= 1e-9


@settings(max_examples=60, deadline=None)
@given(T=st.integers(1, 4), U=st.integers(0, 4), V=st.integers(1, 5), c=st.floats(-50, 50))
def test_uniform_logits_closed_form(T, U, V, c):
    # only orderings that finish on a blank carry mass: C(T+U-1, U) of them
    lat = np.full((T, U + 1, V + 1), c)
    labels = [1 + (k % V) for k in range(U)]
    expected = -(math.log(math.comb(T + U - 1, U)) - (T + U) * math.log(V + 1))
    assert transducer_loss(lat, labels)[0] == pytest.approx(expected, abs=1e-9)


def test_shift_invariance():
    rng = np.random.default_rng(2)
    lat, labels = _random_case(rng, T=3, U=2, V=3)
    base = transducer_loss(lat, labels)[0]
    shifted = transducer_loss(lat.logits + 17.5, labels)[0]
    assert shifted == pytest.approx(base, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_logit_gradient_finite_differences(seed):
    rng = np.random.default_rng(seed)
    lat, labels = _random_case(rng, T=3, U=2, V=2)
    _, grad = transducer_loss(lat, labels)
    x = lat.logits.copy()
    num = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + 1e-5
        up = transducer_loss(x, labels)[0]
        x[idx] = orig - 1e-5
        down = transducer_loss(x, labels)[0]
        x[idx] = orig
        num[idx] = (up - down) / 2e-5
    assert relative_error(grad, num).max() <= 1e-6


def test_batched_loss_equals_single_lattices():
    rng = np.random.default_rng(3)
    V = 3
    cases = [_random_case(rng, T=int(rng.integers(1, 6)), U=int(rng.integers(0, 4)), V=V)
             for _ in range(6)]
    T = max(c[0].T for c in cases)
    U = max(c[0].U for c in cases)
    logits = rng.normal(size=(6, T, U + 1, V + 1))
    labels = np.zeros((6, U), dtype=int)
    for b, (lat, lab) in enumerate(cases):
        logits[b, :lat.T, :lat.U + 1] = lat.logits
        labels[b, :len(lab)] = lab
    losses, grads = transducer_loss_batch(logits, labels, [c[0].T for c in cases],
                                          [c[0].U for c in cases])
    for b, (lat, lab) in enumerate(cases):
        loss, g = transducer_loss(lat, lab)
        assert losses[b] == pytest.approx(loss, abs=1e-12)
        assert np.allclose(grads[b, :lat.T, :lat.U + 1], g, atol=1e-12)
        # padding receives no gradient
        assert not grads[b, lat.T:].any() and not grads[b, :, lat.U + 1:].any()


def test_loss_errors():
    lat = np.zeros((2, 2, 3))
    with pytest.raises(VocabError):
        transducer_loss(lat, [3])
    with pytest.raises(VocabError):
        transducer_loss(lat, [0])
    with pytest.raises(EmptyInputError):
        transducer_loss(np.zeros((0, 1, 3)), [])
    with pytest.raises(ShapeError):
        transducer_loss(lat, [1, 1])
    with pytest.raises(OracleTooLargeError):
        brute_force_loss(np.zeros((10, 4, 2)), [1, 1, 1])


# -- model-level --

def tiny_config(enc="lstm", dec="esn", seed=0, **kw):
    base = dict(feature_dim=3, encoder_layers=[(enc, 4)], decoder_layers=[(dec, 4)], joint_dim=4,
                vocab_size=2, subsample_factor=1, master_seed=seed, esn_sparsity=0.5)
    base.update(kw)
    return ModelConfig(**base)


def tiny_batch(rng, n=2, V=2, feature_dim=3):
    batch = []
    for _ in range(n):
        U = int(rng.integers(1, 3))
        batch.append((rng.normal(size=(int(rng.integers(2, 4)), feature_dim)),
                      rng.integers(1, V + 1, size=U).tolist()))
    return batch


def test_joint_zero_weights_and_hand_computation():
    model = build_model(tiny_config(joint_dim=2))
    for name in ("joint.w_enc", "joint.w_dec", "joint.b", "output.w", "output.b"):
        model.params[name][...] = 0.0
    assert not joint(model, np.ones(4), np.ones(4)).any()
    p = model.params
    p["joint.w_enc"][...] = np.arange(8.0).reshape(4, 2) / 10
    p["joint.w_dec"][...] = -np.arange(8.0).reshape(4, 2) / 20
    p["joint.b"][...] = [0.1, -0.2]
    p["output.w"][...] = [[1.0, 2.0, -1.0], [0.5, -0.5, 3.0]]
    p["output.b"][...] = [0.0, 0.1, 0.2]
    e, d = np.array([1.0, 0.0, -1.0, 2.0]), np.array([0.5, 0.5, 0.0, 1.0])
    a = [sum(e[k] * p["joint.w_enc"][k, j] for k in range(4)) for j in range(2)]
    b = [sum(d[k] * p["joint.w_dec"][k, j] for k in range(4)) + p["joint.b"][j] for j in range(2)]
    z = [math.tanh(a[j] + b[j]) for j in range(2)]
    ref = [sum(z[j] * p["output.w"][j, v] for j in range(2)) + p["output.b"][v] for v in range(3)]
    assert np.max(np.abs(joint(model, e, d) - ref)) <= 1e-12


def test_stack_frames_and_lattice_shapes():
    assert stack_frames(np.ones((10, 3)), 2).shape == (5, 6)
    padded = stack_frames(np.arange(9.0).reshape(3, 3), 2)
    assert padded.shape == (2, 6) and not padded[1, 3:].any()
    model = build_model(tiny_config(subsample_factor=2))
    lat = model_forward(model, np.ones((10, 3)), [])
    assert (lat.T, lat.U, lat.V) == (5, 0, 2)


def test_forward_independent_of_gradient_pass():
    rng = np.random.default_rng(4)
    model = build_model(tiny_config(dec="esn", seed=1))
    frames, labels = rng.normal(size=(4, 3)), [1, 2]
    before = model_forward(model, frames, labels).logits
    model.loss_and_grad([(frames, labels)])
    assert np.array_equal(model_forward(model, frames, labels).logits, before)
    model.loss([(frames, labels)])
    assert np.array_equal(model_forward(model, frames, labels).logits, before)


def test_greedy_always_blank_is_empty():
    model = build_model(tiny_config())
    model.params["output.w"][...] = 0.0
    model.params["output.b"][...] = [5.0, 0.0, 0.0]
    assert greedy_decode(model, np.ones((6, 3))) == []


def test_greedy_crafted_chain_token_then_blank():
    cfg = ModelConfig(feature_dim=2, encoder_layers=[("rnn", 2)], decoder_layers=[("rnn", 2)],
                      joint_dim=2, vocab_size=2)
    model = build_model(cfg)
    p = model.params
    for k in ("decoder.0.w_h", "decoder.0.b", "joint.w_enc", "joint.b", "output.b"):
        p[k][...] = 0.0
    p["decoder.0.w_x"][...] = np.eye(2)
    p["joint.w_dec"][...] = np.eye(2)
    p["embedding"][...] = [[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]]   # start, token 1, token 2
    # start state points at token 2; after emitting 2 the state points at blank
    p["output.w"][...] = [[0.0, 0.0, 5.0], [5.0, 0.0, 0.0]]
    assert greedy_decode(model, np.ones((1, 2))) == [2]
    assert greedy_decode(model, np.ones((1, 2)), max_symbols_per_frame=1) == [2]


@pytest.mark.parametrize("seed", range(5))
def test_greedy_invariant_to_positive_logit_scaling(seed):
    rng = np.random.default_rng(seed)
    model = build_model(tiny_config(seed=seed, vocab_size=3))
    for k in ("output.w", "output.b"):
        model.params[k][...] = rng.normal(scale=3.0, size=model.params[k].shape)
    frames = rng.normal(size=(6, 3))
    ref = greedy_decode(model, frames)
    for c in (0.01, 0.5, 7.0):
        scaled = build_model(tiny_config(seed=seed, vocab_size=3))
        for k, v in model.params.items():
            scaled.params[k][...] = v
        scaled.params["output.w"] *= c
        scaled.params["output.b"] *= c
        assert greedy_decode(scaled, frames) == ref


def _prob_forward(probs, labels, upto):
    """alpha(t, u) in probability space, u <= upto."""
    T = probs.shape[0]
    alpha = np.zeros((T, upto + 1))
    alpha[0, 0] = 1.0
    for t in range(T):
        for u in range(upto + 1):
            if t == 0 and u == 0:
                continue
            a = alpha[t - 1, u] * probs[t - 1, u, BLANK] if t > 0 else 0.0
            if u > 0:
                a += alpha[t, u - 1] * probs[t, u - 1, labels[u - 1]]
            alpha[t, u] = a
    return alpha


@pytest.mark.parametrize("seed", range(3))
def test_probability_normalisation(seed):
    """Mass of all sequences of length <= 2 plus every longer sequence sums to one."""
    rng = np.random.default_rng(seed)
    model = build_model(tiny_config(seed=seed + 3))
    frames = rng.normal(size=(2, 3))
    total = 0.0
    for U in range(3):
        for labels in itertools.product([1, 2], repeat=U):
            total += math.exp(-transducer_loss(model_forward(model, frames, labels), labels)[0])
    for prefix in itertools.product([1, 2], repeat=3):
        probs = softmax(model_forward(model, frames, prefix).logits, axis=-1)
        alpha = _prob_forward(probs, prefix, 2)
        total += sum(alpha[t, 2] * probs[t, 2, prefix[2]] for t in range(2))
    assert total == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("enc,dec", [("lstm", "esn"), ("esn", "lstm"), ("lstm", "lstm"),
                                     ("rnn", "rnn")])
def test_end_to_end_gradients_dim4(enc, dec):
    rng = np.random.default_rng(7)
    model = build_model(tiny_config(enc=enc, dec=dec, seed=2, subsample_factor=2))
    report = finite_diff_report(model, tiny_batch(rng))
    assert max(report.values()) <= 1e-5, report
    esn_stack = "decoder" if dec == "esn" else "encoder" if enc == "esn" else None
    if esn_stack:
        assert {f"{esn_stack}.0.rho", f"{esn_stack}.0.gamma"} <= set(report)
