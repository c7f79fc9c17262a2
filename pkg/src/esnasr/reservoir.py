"""Fixed random echo-state layers.

A layer computes ``h_t = tanh(rho * W_res h_{t-1} + gamma * W_in x_t)`` where
``W_res`` and ``W_in`` are sparse, random and never trained, and ``rho`` and
``gamma`` are the only learnable quantities.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (EmptyInputError, InvalidConfigError, NonConvergenceError,
                     ReservoirGenerationError, ShapeError)
from .numerics import Prng, SparseMatrix, estimate_spectral_radius

RHO_INIT = 0.9
GAMMA_INIT = 1.0


@dataclass(frozen=True)
class ReservoirConfig:
    state_dim: int
    input_dim: int
    sparsity: float = 0.8
    init_lo: float = -1.0
    init_hi: float = 1.0
    seed: int = 0
    normalize_radius: bool = True

    def __post_init__(self):
        if self.state_dim <= 0 or self.input_dim <= 0:
            raise InvalidConfigError(
                f"reservoir dims must be positive, got state={self.state_dim} input={self.input_dim}")
        if not 0.0 <= self.sparsity < 1.0:
            raise InvalidConfigError(f"sparsity must lie in [0, 1), got {self.sparsity}")
        if not self.init_lo < self.init_hi:
            raise InvalidConfigError("init_lo must be below init_hi")
        if not 0 <= self.seed < 2**64:
            raise InvalidConfigError("seed must be an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        return asdict(self)


def nonzero_count(sparsity: float, rows: int, cols: int) -> int:
    """round((1 - sparsity) * rows * cols), halves rounded up."""
    return int(math.floor((1.0 - sparsity) * rows * cols + 0.5))


@dataclass(eq=False)
class ReservoirLayer:
    config: ReservoirConfig
    w_res: SparseMatrix
    w_in: SparseMatrix
    rho: np.ndarray = field(default_factory=lambda: np.array(RHO_INIT))
    gamma: np.ndarray = field(default_factory=lambda: np.array(GAMMA_INIT))

    def __post_init__(self):
        # 0-d arrays so optimizers can update the scalars in place
        self.rho = np.array(self.rho, dtype=np.float64)
        self.gamma = np.array(self.gamma, dtype=np.float64)
        if self.w_res.shape != (self.state_dim, self.state_dim):
            raise ShapeError(f"w_res must be {self.state_dim}x{self.state_dim}")
        if self.w_in.shape != (self.state_dim, self.input_dim):
            raise ShapeError(f"w_in must be {self.state_dim}x{self.input_dim}")

    @property
    def state_dim(self) -> int:
        return self.config.state_dim

    @property
    def input_dim(self) -> int:
        return self.config.input_dim


def _random_sparse(stream: Prng, rows: int, cols: int, sparsity: float,
                   lo: float, hi: float) -> SparseMatrix:
    count = nonzero_count(sparsity, rows, cols)
    positions = sorted(stream.sample(rows * cols, count))
    values = [stream.uniform(lo, hi) for _ in positions]
    pos = np.asarray(positions, dtype=np.int64)
    return SparseMatrix.from_arrays(rows, cols, pos // cols, pos % cols, np.asarray(values))


def generate_reservoir(config: ReservoirConfig) -> ReservoirLayer:
    """Build a layer deterministically from ``config`` (and nothing else)."""
    root = Prng(config.seed)
    w_res = _random_sparse(root.split("w_res"), config.state_dim, config.state_dim,
                           config.sparsity, config.init_lo, config.init_hi)
    w_in = _random_sparse(root.split("w_in"), config.state_dim, config.input_dim,
                          config.sparsity, config.init_lo, config.init_hi)
    if config.normalize_radius:
        try:
            radius = estimate_spectral_radius(w_res)
        except NonConvergenceError as exc:
            raise ReservoirGenerationError(
                f"could not normalise reservoir (seed={config.seed}): {exc}") from exc
        if radius <= 0.0:
            raise ReservoirGenerationError(
                f"reservoir with seed={config.seed} has zero spectral radius; "
                "lower the sparsity or disable normalize_radius")
        w_res = w_res.scaled(1.0 / radius)
    return ReservoirLayer(config, w_res, w_in)


def regenerate_from(config: ReservoirConfig) -> ReservoirLayer:
    return generate_reservoir(config)


def esn_step(layer: ReservoirLayer, h_prev, x) -> np.ndarray:
    h_prev = np.asarray(h_prev, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if h_prev.shape[-1] != layer.state_dim:
        raise ShapeError(f"state must have length {layer.state_dim}, got {h_prev.shape[-1]}")
    if x.shape[-1] != layer.input_dim:
        raise ShapeError(f"input must have length {layer.input_dim}, got {x.shape[-1]}")
    return np.tanh(layer.rho * layer.w_res.apply(h_prev) + layer.gamma * layer.w_in.apply(x))


@dataclass(eq=False)
class DeepEsn:
    layers: list

    def __post_init__(self):
        if not self.layers:
            raise InvalidConfigError("a deep ESN needs at least one layer")
        for lower, upper in zip(self.layers, self.layers[1:]):
            if upper.input_dim != lower.state_dim:
                raise ShapeError(
                    f"layer input_dim {upper.input_dim} does not match previous state_dim "
                    f"{lower.state_dim}")

    @classmethod
    def generate(cls, configs: Sequence[ReservoirConfig]) -> "DeepEsn":
        return cls([generate_reservoir(c) for c in configs])


def esn_forward(stack: DeepEsn, inputs, h0: Optional[Sequence] = None) -> list:
    """Run every layer over the sequence.

    Layer ``l`` reads layer ``l-1``'s state at the same time step. Returns one
    ``(T, ..., state_dim)`` array per layer.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 0 or inputs.shape[0] == 0:
        raise EmptyInputError("esn_forward needs a nonempty input sequence")
    outputs = []
    seq = inputs
    for l, layer in enumerate(stack.layers):
        if h0 is None or h0[l] is None:
            h = np.zeros(seq.shape[1:-1] + (layer.state_dim,))
        else:
            h = np.asarray(h0[l], dtype=np.float64)
        # input drive for the whole sequence in one product
        drive = layer.gamma * layer.w_in.apply(seq)
        states = np.empty(seq.shape[:-1] + (layer.state_dim,))
        for t in range(seq.shape[0]):
            h = np.tanh(layer.rho * layer.w_res.apply(h) + drive[t])
            states[t] = h
        outputs.append(states)
        seq = states
    return outputs


def check_echo_state_property(layer: ReservoirLayer, inputs, seed_a: int, seed_b: int) -> np.ndarray:
    """Distance between two runs started from different random states.

    Both initial states are uniform in [-1, 1]; returns ``||h_t^A - h_t^B||_2``
    for every step.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise EmptyInputError("inputs must be a nonempty (T, input_dim) array")
    h_a = Prng(seed_a).uniform_array(layer.state_dim, -1.0, 1.0)
    h_b = Prng(seed_b).uniform_array(layer.state_dim, -1.0, 1.0)
    distances = np.empty(inputs.shape[0])
    for t, x in enumerate(inputs):
        h_a = esn_step(layer, h_a, x)
        h_b = esn_step(layer, h_b, x)
        distances[t] = np.linalg.norm(h_a - h_b)
    return distances
