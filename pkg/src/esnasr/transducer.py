"""RNN-T model with optionally frozen echo-state layers.

Layout: frame stacking -> encoder stack -> joint network <- prediction network.
Encoder and prediction-network layers are each either a trainable cell
(``lstm`` / ``rnn``) or a frozen reservoir (``esn``). Output index 0 is blank.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import log_softmax, logsumexp

from .cells import LSTM, Cell, backward_sequence, cell_forward, init_cell, run_sequence
from .errors import (EmptyInputError, InvalidConfigError, OracleTooLargeError, ShapeError,
                     VocabError)
from .numerics import child_seed
from .reservoir import ReservoirConfig, ReservoirLayer, esn_step, generate_reservoir

BLANK = 0
ESN = "esn"
LAYER_KINDS = ("lstm", "rnn", ESN)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    dim: int

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise InvalidConfigError(f"layer kind must be one of {LAYER_KINDS}, got {self.kind!r}")
        if self.dim <= 0:
            raise InvalidConfigError("layer dim must be positive")


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    encoder_layers: tuple
    decoder_layers: tuple
    joint_dim: int
    vocab_size: int
    subsample_factor: int = 1
    master_seed: int = 0
    embed_dim: int = 0          # 0 means "same as the first prediction-network layer"
    esn_sparsity: float = 0.8
    esn_normalize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "encoder_layers", tuple(_as_spec(s) for s in self.encoder_layers))
        object.__setattr__(self, "decoder_layers", tuple(_as_spec(s) for s in self.decoder_layers))
        if not self.encoder_layers or not self.decoder_layers:
            raise InvalidConfigError("need at least one encoder and one prediction-network layer")
        if self.vocab_size < 1:
            raise InvalidConfigError("vocab_size must be >= 1")
        if self.feature_dim <= 0 or self.joint_dim <= 0 or self.subsample_factor < 1:
            raise InvalidConfigError("feature_dim, joint_dim and subsample_factor must be positive")
        if self.embed_dim < 0:
            raise InvalidConfigError("embed_dim must be >= 0")
        if not 0 <= self.master_seed < 2**64:
            raise InvalidConfigError("master_seed must be an unsigned 64-bit integer")

    @property
    def embedding_dim(self) -> int:
        return self.embed_dim or self.decoder_layers[0].dim

    @property
    def stacked_dim(self) -> int:
        return self.feature_dim * self.subsample_factor

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_layers"] = [asdict(s) for s in self.encoder_layers]
        d["decoder_layers"] = [asdict(s) for s in self.decoder_layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _as_spec(s) -> LayerSpec:
    if isinstance(s, LayerSpec):
        return s
    if isinstance(s, dict):
        return LayerSpec(**s)
    kind, dim = s
    return LayerSpec(kind, int(dim))


class TransducerModel:
    """All trainable tensors live in ``params`` (with matching ``grads``); frozen
    reservoir matrices live in ``frozen`` and have no gradient storage at all."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.encoder: list = []
        self.decoder: list = []
        self.params: dict = {}
        self.grads: dict = {}
        self.frozen: dict = {}

    # registration helpers -------------------------------------------------
    def _add_param(self, name, array, grad=None):
        self.params[name] = array
        self.grads[name] = np.zeros_like(array) if grad is None else grad

    def _add_layer(self, stack_name, index, layer):
        prefix = f"{stack_name}.{index}"
        if isinstance(layer, Cell):
            for k in ("w_x", "w_h", "b"):
                self._add_param(f"{prefix}.{k}", layer.params[k], layer.grads[k])
        else:
            self._add_param(f"{prefix}.rho", layer.rho)
            self._add_param(f"{prefix}.gamma", layer.gamma)
            self.frozen[f"{prefix}.w_res"] = layer.w_res
            self.frozen[f"{prefix}.w_in"] = layer.w_in

    def esn_layers(self):
        """(stack name, index, layer) for every reservoir, encoder first."""
        for stack_name, stack in (("encoder", self.encoder), ("decoder", self.decoder)):
            for i, layer in enumerate(stack):
                if isinstance(layer, ReservoirLayer):
                    yield stack_name, i, layer

    def named_tensors(self):
        """(name, value, trainable) for every tensor the model owns."""
        out = [(n, p, True) for n, p in self.params.items()]
        out += [(n, m, False) for n, m in self.frozen.items()]
        return out

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def num_trainable(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def num_frozen(self) -> int:
        return int(sum(m.nnz for m in self.frozen.values()))

    def loss_and_grad(self, batch) -> float:
        return batch_loss(self, batch, compute_grad=True)

    def loss(self, batch) -> float:
        return batch_loss(self, batch, compute_grad=False)


def reservoir_config_for(config: ModelConfig, stack_name: str, index: int, input_dim: int,
                         state_dim: int) -> ReservoirConfig:
    return ReservoirConfig(
        state_dim=state_dim, input_dim=input_dim, sparsity=config.esn_sparsity,
        seed=child_seed(config.master_seed, f"{stack_name}.{index}.reservoir"),
        normalize_radius=config.esn_normalize)


def _build_stack(model, stack_name, specs, input_dim):
    config = model.config
    layers = []
    for i, spec in enumerate(specs):
        if spec.kind == ESN:
            layer = generate_reservoir(
                reservoir_config_for(config, stack_name, i, input_dim, spec.dim))
        else:
            rng = np.random.default_rng(child_seed(config.master_seed, f"{stack_name}.{i}.init"))
            layer = init_cell(spec.kind, input_dim, spec.dim, rng)
        layers.append(layer)
        model._add_layer(stack_name, i, layer)
        input_dim = spec.dim
    return layers


def build_model(config: ModelConfig) -> TransducerModel:
    """Initialise a model. Reservoir seeds and trainable inits all derive from ``master_seed``."""
    model = TransducerModel(config)
    model.encoder = _build_stack(model, "encoder", config.encoder_layers, config.stacked_dim)
    model.decoder = _build_stack(model, "decoder", config.decoder_layers, config.embedding_dim)
    enc_dim = config.encoder_layers[-1].dim
    dec_dim = config.decoder_layers[-1].dim
    V1 = config.vocab_size + 1
    J = config.joint_dim

    def uniform(name, shape, fan_in):
        rng = np.random.default_rng(child_seed(config.master_seed, name))
        k = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-k, k, size=shape)

    emb_rng = np.random.default_rng(child_seed(config.master_seed, "embedding"))
    model._add_param("embedding", emb_rng.normal(0.0, 1.0, size=(V1, config.embedding_dim)))
    model._add_param("joint.w_enc", uniform("joint.w_enc", (enc_dim, J), enc_dim))
    model._add_param("joint.w_dec", uniform("joint.w_dec", (dec_dim, J), dec_dim))
    model._add_param("joint.b", np.zeros(J))
    model._add_param("output.w", uniform("output.w", (J, V1), J))
    model._add_param("output.b", np.zeros(V1))
    return model


# ---------------------------------------------------------------------------
# forward / backward

def stack_frames(frames, factor: int) -> np.ndarray:
    """Concatenate ``factor`` consecutive frames; a ragged tail is zero-padded."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise EmptyInputError("frames must be a nonempty (n, feature_dim) array")
    n, f = frames.shape
    T = -(-n // factor)
    padded = np.zeros((T * factor, f))
    padded[:n] = frames
    return padded.reshape(T, factor * f)


@dataclass
class _EsnCache:
    us: np.ndarray      # W_in x_t
    rs: np.ndarray      # W_res h_{t-1}
    hs: np.ndarray


def _esn_sequence(layer: ReservoirLayer, xs: np.ndarray):
    B, T, _ = xs.shape
    us = layer.w_in.apply(xs)
    drive = layer.gamma * us
    rs = np.empty((B, T, layer.state_dim))
    hs = np.empty((B, T, layer.state_dim))
    h = np.zeros((B, layer.state_dim))
    for t in range(T):
        r = layer.w_res.apply(h)
        rs[:, t] = r
        h = np.tanh(layer.rho * r + drive[:, t])
        hs[:, t] = h
    return hs, _EsnCache(us, rs, hs)


def _esn_sequence_backward(layer, cache, dhs, grad_rho, grad_gamma, need_dx):
    # W_res and W_in are frozen: only the state path and the two scalars get gradients
    B, T, d = dhs.shape
    dpres = np.empty((B, T, d))
    dh_next = np.zeros((B, d))
    rho = layer.rho
    for t in range(T - 1, -1, -1):
        h = cache.hs[:, t]
        dpre = (dhs[:, t] + dh_next) * (1.0 - h * h)
        dpres[:, t] = dpre
        dh_next = rho * layer.w_res.apply_transpose(dpre)
    grad_rho += np.sum(dpres * cache.rs)
    grad_gamma += np.sum(dpres * cache.us)
    if not need_dx:
        return None
    return layer.gamma * layer.w_in.apply_transpose(dpres)


def _run_stack(layers, xs):
    caches = []
    for layer in layers:
        if isinstance(layer, Cell):
            xs, cache = run_sequence(layer, xs)
        else:
            xs, cache = _esn_sequence(layer, xs)
        caches.append(cache)
    return xs, caches


def _backward_stack(model, stack_name, layers, caches, dout, need_input_grad):
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        need_dx = i > 0 or need_input_grad
        if isinstance(layer, Cell):
            dout = backward_sequence(layer, caches[i], dout, need_dx=need_dx)
        else:
            dout = _esn_sequence_backward(
                layer, caches[i], dout, model.grads[f"{stack_name}.{i}.rho"],
                model.grads[f"{stack_name}.{i}.gamma"], need_dx)
    return dout


def _unpack(batch):
    frames, labels = [], []
    for item in batch:
        if isinstance(item, tuple):
            f, l = item
        else:
            f, l = item.frames, item.labels
        frames.append(f)
        labels.append(list(l))
    return frames, labels


@dataclass
class ForwardContext:
    t_lens: np.ndarray
    u_lens: np.ndarray
    tokens: np.ndarray        # (B, U+1) prediction-network inputs, blank-prefixed
    labels: np.ndarray        # (B, U) zero-padded targets
    enc: np.ndarray
    dec: np.ndarray
    z: np.ndarray
    enc_caches: list
    dec_caches: list


def forward_batch(model: TransducerModel, frames_list, labels_list):
    """Padded batch forward. Returns ``(logits (B, T, U+1, V+1), ForwardContext)``."""
    cfg = model.config
    if not frames_list:
        raise EmptyInputError("empty batch")
    stacked = []
    for f in frames_list:
        f = np.asarray(f, dtype=np.float64)
        if f.ndim != 2 or f.shape[1] != cfg.feature_dim:
            raise ShapeError(f"frames must be (n, {cfg.feature_dim}), got {f.shape}")
        stacked.append(stack_frames(f, cfg.subsample_factor))
    B = len(stacked)
    t_lens = np.array([s.shape[0] for s in stacked])
    u_lens = np.array([len(l) for l in labels_list])
    T, U = int(t_lens.max()), int(u_lens.max())
    xs = np.zeros((B, T, cfg.stacked_dim))
    labels = np.zeros((B, U), dtype=np.int64)
    for b, (s, l) in enumerate(zip(stacked, labels_list)):
        xs[b, :s.shape[0]] = s
        if len(l):
            arr = np.asarray(l, dtype=np.int64)
            if arr.min() < 1 or arr.max() > cfg.vocab_size:
                raise VocabError(f"label tokens must lie in [1, {cfg.vocab_size}]")
            labels[b, :len(l)] = arr
    tokens = np.concatenate([np.full((B, 1), BLANK, dtype=np.int64), labels], axis=1)

    enc, enc_caches = _run_stack(model.encoder, xs)
    emb = model.params["embedding"][tokens]
    dec, dec_caches = _run_stack(model.decoder, emb)

    p = model.params
    a = enc @ p["joint.w_enc"]
    d = dec @ p["joint.w_dec"] + p["joint.b"]
    z = np.tanh(a[:, :, None, :] + d[:, None, :, :])
    logits = z @ p["output.w"] + p["output.b"]
    return logits, ForwardContext(t_lens, u_lens, tokens, labels, enc, dec, z,
                                  enc_caches, dec_caches)


def backward_batch(model: TransducerModel, dlogits: np.ndarray, ctx: ForwardContext):
    """Accumulate parameter gradients given d(loss)/d(logits)."""
    p, g = model.params, model.grads
    J = model.config.joint_dim
    V1 = dlogits.shape[-1]
    z = ctx.z
    g["output.w"] += z.reshape(-1, J).T @ dlogits.reshape(-1, V1)
    g["output.b"] += dlogits.reshape(-1, V1).sum(axis=0)
    dpre = (dlogits @ p["output.w"].T) * (1.0 - z * z)
    da = dpre.sum(axis=2)
    dd = dpre.sum(axis=1)
    g["joint.b"] += dd.reshape(-1, J).sum(axis=0)
    g["joint.w_enc"] += ctx.enc.reshape(-1, ctx.enc.shape[-1]).T @ da.reshape(-1, J)
    g["joint.w_dec"] += ctx.dec.reshape(-1, ctx.dec.shape[-1]).T @ dd.reshape(-1, J)
    denc = da @ p["joint.w_enc"].T
    ddec = dd @ p["joint.w_dec"].T

    demb = _backward_stack(model, "decoder", model.decoder, ctx.dec_caches, ddec, True)
    np.add.at(g["embedding"], ctx.tokens.ravel(), demb.reshape(-1, demb.shape[-1]))
    # frames need no gradient, so the bottom encoder layer skips its input gradient
    _backward_stack(model, "encoder", model.encoder, ctx.enc_caches, denc, False)


def batch_loss(model: TransducerModel, batch, compute_grad: bool = True) -> float:
    """Mean transducer loss over the batch; with ``compute_grad`` the model's grads
    are reset and filled."""
    frames, labels = _unpack(batch)
    logits, ctx = forward_batch(model, frames, labels)
    losses, dlogits = transducer_loss_batch(logits, ctx.labels, ctx.t_lens, ctx.u_lens,
                                            compute_grad=compute_grad)
    B = len(frames)
    if compute_grad:
        model.zero_grad()
        backward_batch(model, dlogits / B, ctx)
    return float(np.sum(losses) / B)


# ---------------------------------------------------------------------------
# lattice loss

@dataclass
class LogitLattice:
    logits: np.ndarray      # (T, U+1, V+1)

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 3:
            raise ShapeError("lattice must be (T, U+1, V+1)")
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("lattice entries must be finite")

    @property
    def T(self) -> int:
        return self.logits.shape[0]

    @property
    def U(self) -> int:
        return self.logits.shape[1] - 1

    @property
    def V(self) -> int:
        return self.logits.shape[2] - 1


def _diagonals(T, U1):
    for d in range(T + U1 - 1):
        ts = np.arange(max(0, d - U1 + 1), min(T - 1, d) + 1)
        yield ts, d - ts


def transducer_loss_batch(logits, labels, t_lens, u_lens, compute_grad=True):
    """Forward-backward over padded lattices.

    ``logits`` is (B, T, U+1, V+1); returns per-utterance negative
    log-likelihoods and d(sum of losses)/d(logits) (None without ``compute_grad``).
    """
    B, T, U1, V1 = logits.shape
    U = U1 - 1
    t_lens = np.asarray(t_lens)
    u_lens = np.asarray(u_lens)
    lp = log_softmax(logits, axis=-1)
    blank = lp[..., BLANK]
    lab = np.full((B, T, U1), -np.inf)
    if U:
        idx = np.broadcast_to(np.asarray(labels)[:, None, :, None], (B, T, U, 1))
        lab[:, :, :U] = np.take_along_axis(lp[:, :, :U, :], idx, axis=-1)[..., 0]

    alpha = np.full((B, T, U1), -np.inf)
    alpha[:, 0, 0] = 0.0
    for ts, us in _diagonals(T, U1):
        if ts[0] == 0 and us[0] == 0:
            continue
        tm = np.maximum(ts - 1, 0)
        um = np.maximum(us - 1, 0)
        from_blank = np.where(ts >= 1, alpha[:, tm, us] + blank[:, tm, us], -np.inf)
        from_label = np.where(us >= 1, alpha[:, ts, um] + lab[:, ts, um], -np.inf)
        alpha[:, ts, us] = np.logaddexp(from_blank, from_label)

    bidx = np.arange(B)
    last_t = t_lens - 1
    final_blank = blank[bidx, last_t, u_lens]
    log_like = alpha[bidx, last_t, u_lens] + final_blank
    if not compute_grad:
        return -log_like, None

    beta = np.full((B, T + 1, U1 + 1), -np.inf)
    beta[bidx, last_t, u_lens] = final_blank
    lab_ext = lab.copy()
    lab_ext[:, :, U] = -np.inf
    for ts, us in reversed(list(_diagonals(T, U1))):
        val = np.logaddexp(beta[:, ts + 1, us] + blank[:, ts, us],
                           beta[:, ts, us + 1] + lab_ext[:, ts, us])
        valid = ((ts[None, :] < t_lens[:, None]) & (us[None, :] <= u_lens[:, None])
                 & ~((ts[None, :] == last_t[:, None]) & (us[None, :] == u_lens[:, None])))
        beta[:, ts, us] = np.where(valid, val, beta[:, ts, us])

    ll = log_like[:, None, None]
    occ_blank = np.exp(alpha + blank + beta[:, 1:, :U1] - ll)
    occ_label = np.exp(alpha + lab_ext + beta[:, :T, 1:] - ll)
    occ_blank[bidx, last_t, u_lens] += np.exp(alpha[bidx, last_t, u_lens] + final_blank - log_like)

    dlp = np.zeros_like(lp)
    dlp[..., BLANK] = -occ_blank
    if U:
        # additive: padded label slots point at blank but carry zero occupancy
        onehot = np.eye(V1)[np.asarray(labels)]
        dlp[:, :, :U, :] -= occ_label[:, :, :U, None] * onehot[:, None, :, :]
    dlogits = dlp - np.exp(lp) * dlp.sum(axis=-1, keepdims=True)
    return -log_like, dlogits


def _check_lattice(lattice, labels):
    if not isinstance(lattice, LogitLattice):
        lattice = LogitLattice(lattice)
    if lattice.T == 0:
        raise EmptyInputError("lattice has no frames")
    labels = np.asarray(list(labels), dtype=np.int64)
    if len(labels) != lattice.U:
        raise ShapeError(f"lattice has U={lattice.U} but {len(labels)} labels were given")
    if len(labels) and (labels.min() < 1 or labels.max() > lattice.V):
        raise VocabError(f"label tokens must lie in [1, {lattice.V}]")
    return lattice, labels


def transducer_loss(lattice, labels):
    """Negative log-likelihood of ``labels`` and its gradient w.r.t. the logits."""
    lattice, labels = _check_lattice(lattice, labels)
    losses, grad = transducer_loss_batch(lattice.logits[None], labels[None],
                                         [lattice.T], [lattice.U])
    return float(losses[0]), grad[0]


BRUTE_FORCE_LIMIT = 12


def brute_force_loss(lattice, labels) -> float:
    """Sum over every ordering of T blanks and U labels.

    Orderings whose last move is a label would emit after the final frame and
    carry no probability, so only orderings ending in blank contribute.
    """
    lattice, labels = _check_lattice(lattice, labels)
    T, U = lattice.T, lattice.U
    if T + U > BRUTE_FORCE_LIMIT:
        raise OracleTooLargeError(f"T+U={T + U} exceeds the enumeration limit {BRUTE_FORCE_LIMIT}")
    lp = log_softmax(lattice.logits, axis=-1)
    path_scores = []
    for label_moves in itertools.combinations(range(T + U), U):
        moves = set(label_moves)
        t = u = 0
        score = 0.0
        for step in range(T + U):
            if t >= T:
                score = None
                break
            if step in moves:
                score += lp[t, u, labels[u]]
                u += 1
            else:
                score += lp[t, u, BLANK]
                t += 1
        if score is not None:
            path_scores.append(score)
    return float(-logsumexp(path_scores))


def count_alignments(T: int, U: int) -> int:
    """Number of monotone paths with nonzero probability on a T x (U+1) lattice."""
    return math.comb(T + U - 1, U)


# ---------------------------------------------------------------------------
# inference

def joint(model: TransducerModel, enc_t, dec_u) -> np.ndarray:
    """Logits over blank + vocabulary for one (frame, label-position) pair."""
    p = model.params
    enc_t = np.asarray(enc_t, dtype=np.float64)
    dec_u = np.asarray(dec_u, dtype=np.float64)
    if enc_t.shape[-1] != p["joint.w_enc"].shape[0] or dec_u.shape[-1] != p["joint.w_dec"].shape[0]:
        raise ShapeError("joint input dims do not match the model")
    z = np.tanh(enc_t @ p["joint.w_enc"] + (dec_u @ p["joint.w_dec"] + p["joint.b"]))
    return z @ p["output.w"] + p["output.b"]


def encode(model: TransducerModel, frames) -> np.ndarray:
    """Encoder outputs (T, enc_dim) for one utterance."""
    xs = stack_frames(frames, model.config.subsample_factor)[None]
    enc, _ = _run_stack(model.encoder, xs)
    return enc[0]


def _decoder_step(model, states, token):
    x = model.params["embedding"][token]
    new_states = []
    for layer, (h, c) in zip(model.decoder, states):
        if isinstance(layer, Cell):
            h, c, _ = cell_forward(layer, h, x, c if layer.kind == LSTM else None)
        else:
            h = esn_step(layer, h, x)
        new_states.append((h, c))
        x = h
    return x, new_states


def _decoder_start(model):
    states = [(np.zeros(l.state_dim), np.zeros(l.state_dim)) for l in model.decoder]
    return _decoder_step(model, states, BLANK)


def greedy_decode(model: TransducerModel, frames, max_symbols_per_frame: int = 4) -> list:
    """Frame-synchronous greedy search; ties go to the lowest index (blank first)."""
    if max_symbols_per_frame < 1:
        raise InvalidConfigError("max_symbols_per_frame must be >= 1")
    enc = encode(model, frames)
    dec_out, states = _decoder_start(model)
    hyp = []
    for t in range(enc.shape[0]):
        for _ in range(max_symbols_per_frame):
            k = int(np.argmax(joint(model, enc[t], dec_out)))
            if k == BLANK:
                break
            hyp.append(k)
            dec_out, states = _decoder_step(model, states, k)
    return hyp


def model_forward(model: TransducerModel, frames, labels) -> LogitLattice:
    logits, _ = forward_batch(model, [frames], [list(labels)])
    return LogitLattice(logits[0])
