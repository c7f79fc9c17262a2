"""Optimisers, the BPTT training loop, gradient checking and the ridge readout.

Only tensors in ``model.params`` receive gradients or optimiser state. Frozen
reservoir matrices are never touched: the backward pass routes state gradients
through them without materialising a weight gradient.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .errors import DivergenceError, InvalidConfigError, ShapeError, SingularSystemError
from .numerics import Prng

CLIP_NORM = 5.0
# Denominator floor for relative gradient errors. Central differences at eps=1e-5 on an
# O(1) loss carry ~1e-11 of roundoff, which swamps the relative error of gradients much
# smaller than this floor; below it the check is effectively absolute (|a - n| / 1e-4).
FD_FLOOR = 1e-4


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise InvalidConfigError(f"optimizer must be 'sgd' or 'adam', got {self.kind!r}")
        if self.lr < 0:
            raise InvalidConfigError("learning rate must be >= 0")


def make_optimizer(model, kind: str = "adam", lr: float = 1e-3) -> OptimizerState:
    opt = OptimizerState(kind=kind, lr=lr)
    if kind == "adam":
        opt.m = {n: np.zeros_like(p) for n, p in model.params.items()}
        opt.v = {n: np.zeros_like(p) for n, p in model.params.items()}
    return opt


def apply_update(opt: OptimizerState, params: dict, grads: dict):
    """In-place update; arrays keep their identity so layers sharing them see the change."""
    opt.step += 1
    if opt.kind == "sgd":
        for name, p in params.items():
            p -= opt.lr * grads[name]
        return
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for name, p in params.items():
        g = grads[name]
        m, v = opt.m[name], opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


@dataclass
class StepRecord:
    step: int
    loss: float
    wall_ms: float
    grad_norm: float
    updated_tensors: int


@dataclass
class TrainReport:
    records: list = field(default_factory=list)

    @property
    def losses(self) -> list:
        return [r.loss for r in self.records]

    @property
    def wall_ms(self) -> list:
        return [r.wall_ms for r in self.records]

    @property
    def grad_norms(self) -> list:
        return [r.grad_norm for r in self.records]

    @property
    def updated_tensors(self) -> int:
        return self.records[-1].updated_tensors if self.records else 0

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.records)


def train_step(model, batch, opt: OptimizerState, clip_norm: float = CLIP_NORM) -> StepRecord:
    if not batch:
        raise InvalidConfigError("train_step needs a nonempty batch")
    start = time.perf_counter()
    loss = model.loss_and_grad(batch)
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss} at step {opt.step + 1}")
    norm = global_norm(model.grads)
    if not math.isfinite(norm):
        raise DivergenceError(f"non-finite gradient norm at step {opt.step + 1}")
    if norm > clip_norm:
        scale = clip_norm / norm
        for g in model.grads.values():
            g *= scale
    apply_update(opt, model.params, model.grads)
    wall_ms = (time.perf_counter() - start) * 1000.0
    return StepRecord(opt.step, loss, wall_ms, norm, len(model.grads))


def batch_order(num_items: int, batch_size: int, seed: int):
    """Endless stream of index batches; each epoch is a fresh seeded permutation."""
    stream = Prng(seed)
    epoch = 0
    while True:
        perm = stream.split(epoch).sample(num_items, num_items)
        for i in range(0, num_items - batch_size + 1, batch_size):
            yield perm[i:i + batch_size]
        epoch += 1


def train(model, dataset, steps: int, batch_size: int = 32, opt: Optional[OptimizerState] = None,
          seed: int = 0, on_step: Optional[Callable] = None) -> TrainReport:
    """Run ``steps`` optimiser updates over seeded shuffles of ``dataset``."""
    if batch_size > len(dataset):
        batch_size = len(dataset)
    opt = opt or make_optimizer(model)
    report = TrainReport()
    order = batch_order(len(dataset), batch_size, seed)
    for _ in range(steps):
        batch = [dataset[i] for i in next(order)]
        try:
            record = train_step(model, batch, opt)
        except DivergenceError as exc:
            exc.report = report
            raise
        report.records.append(record)
        if on_step is not None:
            on_step(record)
    return report


# ---------------------------------------------------------------------------
# gradient checking

def relative_error(analytic, numeric, floor: float = FD_FLOOR):
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)),
                                                    floor)


def finite_diff_report(model, batch, epsilon: float = 1e-5, floor: float = FD_FLOOR,
                       max_params: int = 5000) -> dict:
    """Per-tensor worst relative error between analytic and central-difference gradients."""
    total = sum(p.size for p in model.params.values())
    if total > max_params:
        raise InvalidConfigError(f"model has {total} trainable scalars; limit is {max_params}")
    model.loss_and_grad(batch)
    analytic = {n: g.copy() for n, g in model.grads.items()}
    worst = {}
    for name, p in model.params.items():
        flat = p.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = model.loss(batch)
            flat[i] = orig - epsilon
            down = model.loss(batch)
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * epsilon)
        err = relative_error(analytic[name].reshape(-1), numeric, floor)
        worst[name] = float(err.max()) if err.size else 0.0
    return worst


def finite_diff_check(model, batch, epsilon: float = 1e-5, floor: float = FD_FLOOR) -> float:
    return max(finite_diff_report(model, batch, epsilon, floor).values())


class LinearReadout:
    """``Y ~ X @ w`` under a squared-error loss; the smallest model the gradient checker accepts."""

    def __init__(self, w):
        self.params = {"w": np.asarray(w, dtype=np.float64)}
        self.grads = {"w": np.zeros_like(self.params["w"])}

    def loss(self, batch) -> float:
        x, y = batch
        r = x @ self.params["w"] - y
        return 0.5 * float(np.sum(r * r))

    def loss_and_grad(self, batch) -> float:
        x, y = batch
        r = x @ self.params["w"] - y
        self.grads["w"][...] = x.T @ r
        return 0.5 * float(np.sum(r * r))


def ridge_readout(states, targets, lam: float) -> np.ndarray:
    """Closed-form readout ``(S^T S + lam I)^-1 S^T Y`` via a Cholesky solve."""
    S = np.asarray(states, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if S.ndim != 2 or S.shape[0] != Y.shape[0]:
        raise ShapeError(f"states {S.shape} and targets {Y.shape} must share their row count")
    if lam < 0:
        raise InvalidConfigError("ridge lambda must be >= 0")
    gram = S.T @ S
    gram[np.diag_indices_from(gram)] += lam
    try:
        factor = scipy.linalg.cho_factor(gram, lower=True, check_finite=True)
    except np.linalg.LinAlgError:
        raise SingularSystemError("normal equations are singular; use lambda > 0") from None
    diag = np.abs(np.diag(factor[0]))
    if diag.min() <= 1e-7 * diag.max():
        raise SingularSystemError("normal equations are numerically singular; use lambda > 0")
    return scipy.linalg.cho_solve(factor, S.T @ Y)
