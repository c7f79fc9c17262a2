"""Trainable recurrent cells (simple RNN and LSTM) with hand-written backward passes.

Weights use the row-vector convention: ``pre = x @ w_x + h @ w_h + b``. LSTM
gates are packed in the order input, forget, candidate, output.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from .errors import CacheMismatchError, InvalidConfigError, ShapeError

SIMPLE_RNN = "rnn"
LSTM = "lstm"
CELL_KINDS = (SIMPLE_RNN, LSTM)
_KIND_ALIASES = {"simple-rnn": SIMPLE_RNN, "rnn": SIMPLE_RNN, "lstm": LSTM}


def _canonical_kind(kind: str) -> str:
    try:
        return _KIND_ALIASES[kind]
    except KeyError:
        raise InvalidConfigError(f"unknown cell kind {kind!r}") from None


def param_count(kind: str, input_dim: int, state_dim: int) -> int:
    kind = _canonical_kind(kind)
    base = state_dim * state_dim + state_dim * input_dim + state_dim
    return 4 * base if kind == LSTM else base


class Cell:
    """Dense trainable cell. ``params`` and ``grads`` map the same names to same-shaped arrays."""

    def __init__(self, kind: str, input_dim: int, state_dim: int, params: Optional[dict] = None):
        self.kind = _canonical_kind(kind)
        if input_dim <= 0 or state_dim <= 0:
            raise InvalidConfigError("cell dims must be positive")
        self.input_dim = input_dim
        self.state_dim = state_dim
        width = self.gate_width
        shapes = {"w_x": (input_dim, width), "w_h": (state_dim, width), "b": (width,)}
        if params is None:
            params = {k: np.zeros(s) for k, s in shapes.items()}
        for k, s in shapes.items():
            if params[k].shape != s:
                raise ShapeError(f"{k} must have shape {s}, got {params[k].shape}")
        self.params = {k: np.asarray(params[k], dtype=np.float64) for k in shapes}
        self.grads = {k: np.zeros(s) for k, s in shapes.items()}

    @property
    def gate_width(self) -> int:
        return 4 * self.state_dim if self.kind == LSTM else self.state_dim

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())


def init_cell(kind: str, input_dim: int, state_dim: int, rng: np.random.Generator) -> Cell:
    """Uniform(-k, k) weights with k = 1/sqrt(state_dim); LSTM forget-gate bias set to 1."""
    cell = Cell(kind, input_dim, state_dim)
    k = 1.0 / np.sqrt(state_dim)
    for name in ("w_x", "w_h", "b"):
        p = cell.params[name]
        p[...] = rng.uniform(-k, k, size=p.shape)
    if cell.kind == LSTM:
        d = state_dim
        cell.params["b"][d:2 * d] = 1.0
    return cell


@dataclass
class StepCache:
    owner: Cell
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: Optional[np.ndarray]
    act: np.ndarray      # post-nonlinearity gates (lstm) or new state (rnn)
    c: Optional[np.ndarray]
    tanh_c: Optional[np.ndarray]


def _lstm_gates(pre, d):
    act = np.empty_like(pre)
    act[..., :2 * d] = expit(pre[..., :2 * d])
    act[..., 2 * d:3 * d] = np.tanh(pre[..., 2 * d:3 * d])
    act[..., 3 * d:] = expit(pre[..., 3 * d:])
    return act


def _check_dims(cell, h_prev, x):
    if x.shape[-1] != cell.input_dim:
        raise ShapeError(f"input must have length {cell.input_dim}, got {x.shape[-1]}")
    if h_prev.shape[-1] != cell.state_dim:
        raise ShapeError(f"state must have length {cell.state_dim}, got {h_prev.shape[-1]}")


def cell_forward(cell: Cell, h_prev, x, c_prev=None):
    """One step. Returns ``(h, c, cache)``; ``c`` is None for the simple RNN."""
    h_prev = np.asarray(h_prev, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    _check_dims(cell, h_prev, x)
    p = cell.params
    pre = x @ p["w_x"] + h_prev @ p["w_h"] + p["b"]
    if cell.kind == SIMPLE_RNN:
        h = np.tanh(pre)
        return h, None, StepCache(cell, x, h_prev, None, h, None, None)
    d = cell.state_dim
    if c_prev is None:
        c_prev = np.zeros_like(h_prev)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    if c_prev.shape != h_prev.shape:
        raise ShapeError("cell state and hidden state shapes differ")
    act = _lstm_gates(pre, d)
    c = act[..., d:2 * d] * c_prev + act[..., :d] * act[..., 2 * d:3 * d]
    tanh_c = np.tanh(c)
    h = act[..., 3 * d:] * tanh_c
    return h, c, StepCache(cell, x, h_prev, c_prev, act, c, tanh_c)


def _pre_grad(cell, act, c_prev, tanh_c, dh, dc):
    """Gradient w.r.t. the pre-activation, plus the gradient flowing into c_prev."""
    if cell.kind == SIMPLE_RNN:
        return dh * (1.0 - act * act), None
    d = cell.state_dim
    i, f, g, o = act[..., :d], act[..., d:2 * d], act[..., 2 * d:3 * d], act[..., 3 * d:]
    dc_total = dh * o * (1.0 - tanh_c * tanh_c)
    if dc is not None:
        dc_total = dc_total + dc
    dpre = np.empty_like(act)
    dpre[..., :d] = dc_total * g * i * (1.0 - i)
    dpre[..., d:2 * d] = dc_total * c_prev * f * (1.0 - f)
    dpre[..., 2 * d:3 * d] = dc_total * i * (1.0 - g * g)
    dpre[..., 3 * d:] = dh * tanh_c * o * (1.0 - o)
    return dpre, dc_total * f


def cell_backward(cell: Cell, cache: StepCache, dh, dc=None, need_dx: bool = True):
    """Reverse one step; accumulates into ``cell.grads``.

    Returns ``(dx, dh_prev, dc_prev)``. ``dx`` is None when ``need_dx`` is False,
    ``dc_prev`` is None for the simple RNN.
    """
    if cache.owner is not cell:
        raise CacheMismatchError("cache was produced by a different cell")
    dh = np.asarray(dh, dtype=np.float64)
    if dh.shape != cache.h_prev.shape:
        raise CacheMismatchError(f"upstream gradient shape {dh.shape} does not match cache "
                                 f"{cache.h_prev.shape}")
    dpre, dc_prev = _pre_grad(cell, cache.act, cache.c_prev, cache.tanh_c, dh, dc)
    p, g = cell.params, cell.grads
    x2 = cache.x.reshape(-1, cell.input_dim)
    h2 = cache.h_prev.reshape(-1, cell.state_dim)
    d2 = dpre.reshape(-1, cell.gate_width)
    g["w_x"] += x2.T @ d2
    g["w_h"] += h2.T @ d2
    g["b"] += d2.sum(axis=0)
    dx = dpre @ p["w_x"].T if need_dx else None
    dh_prev = dpre @ p["w_h"].T
    return dx, dh_prev, dc_prev


@dataclass
class SequenceCache:
    owner: Cell
    xs: np.ndarray
    hs: np.ndarray          # (B, T+1, d): initial state followed by every output
    cs: Optional[np.ndarray]
    acts: np.ndarray
    tanh_cs: Optional[np.ndarray]


def run_sequence(cell: Cell, xs: np.ndarray, h0=None, c0=None):
    """Unroll over ``xs`` of shape (B, T, input_dim). Returns (B, T, state_dim) outputs and a cache."""
    if xs.ndim != 3 or xs.shape[-1] != cell.input_dim:
        raise ShapeError(f"expected (B, T, {cell.input_dim}) inputs, got {xs.shape}")
    B, T, _ = xs.shape
    d = cell.state_dim
    p = cell.params
    proj = xs @ p["w_x"] + p["b"]
    hs = np.zeros((B, T + 1, d))
    if h0 is not None:
        hs[:, 0] = h0
    acts = np.empty((B, T, cell.gate_width))
    lstm = cell.kind == LSTM
    cs = tanh_cs = None
    if lstm:
        cs = np.zeros((B, T + 1, d))
        if c0 is not None:
            cs[:, 0] = c0
        tanh_cs = np.empty((B, T, d))
    w_h = p["w_h"]
    for t in range(T):
        pre = proj[:, t] + hs[:, t] @ w_h
        if lstm:
            a = _lstm_gates(pre, d)
            acts[:, t] = a
            c = a[:, d:2 * d] * cs[:, t] + a[:, :d] * a[:, 2 * d:3 * d]
            cs[:, t + 1] = c
            tc = np.tanh(c)
            tanh_cs[:, t] = tc
            hs[:, t + 1] = a[:, 3 * d:] * tc
        else:
            h = np.tanh(pre)
            acts[:, t] = h
            hs[:, t + 1] = h
    return hs[:, 1:], SequenceCache(cell, xs, hs, cs, acts, tanh_cs)


def backward_sequence(cell: Cell, cache: SequenceCache, dhs: np.ndarray, need_dx: bool = True):
    """BPTT through a cached unroll. Accumulates parameter gradients, returns d(inputs) or None."""
    if cache.owner is not cell:
        raise CacheMismatchError("cache was produced by a different cell")
    B, T, d = dhs.shape
    if cache.hs.shape != (B, T + 1, d):
        raise CacheMismatchError("upstream gradient does not match the cached unroll")
    w_h_t = cell.params["w_h"].T
    dpres = np.empty((B, T, cell.gate_width))
    dh_next = np.zeros((B, d))
    dc_next = np.zeros((B, d)) if cell.kind == LSTM else None
    for t in range(T - 1, -1, -1):
        dh = dhs[:, t] + dh_next
        if cell.kind == LSTM:
            dpre, dc_next = _pre_grad(cell, cache.acts[:, t], cache.cs[:, t],
                                      cache.tanh_cs[:, t], dh, dc_next)
        else:
            dpre, _ = _pre_grad(cell, cache.acts[:, t], None, None, dh, None)
        dpres[:, t] = dpre
        dh_next = dpre @ w_h_t
    g = cell.grads
    flat_d = dpres.reshape(-1, cell.gate_width)
    g["w_x"] += cache.xs.reshape(-1, cell.input_dim).T @ flat_d
    g["w_h"] += cache.hs[:, :-1].reshape(-1, d).T @ flat_d
    g["b"] += flat_d.sum(axis=0)
    if not need_dx:
        return None
    return dpres @ cell.params["w_x"].T
