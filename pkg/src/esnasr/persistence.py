"""Binary model files that store reservoirs as seeds.

Layout (little-endian throughout)::

    b"ESRM"  u32 version
    u32 config_len, config bytes
    u32 n_esn, then per reservoir: u8 stack, u32 index, u32 state_dim, u32 input_dim,
        f64 sparsity, f64 init_lo, f64 init_hi, u64 seed, u8 normalize, f64 rho, f64 gamma
    u32 n_tensors, then per tensor: u16 name_len, name, u8 ndim, u32 dims..., f32 payload
    u32 crc32 of everything above

Reservoir matrix values never appear; loading regenerates them from the seed.
Trainable tensors are stored as float32, and ``save_model`` rounds the in-memory
model to float32 precision first so the saved and live models stay identical.
"""
from __future__ import annotations

import io
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import (BadMagicError, ChecksumError, ConfigMismatchError, InvalidConfigError,
                     ModelFileError, UnsupportedVersionError)
from .reservoir import ReservoirConfig
from .transducer import LayerSpec, ModelConfig, TransducerModel, build_model

MAGIC = b"ESRM"
FORMAT_VERSION = 1
_KIND_CODES = {"lstm": 0, "rnn": 1, "esn": 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}
_STACK_CODES = {"encoder": 0, "decoder": 1}
_STACK_NAMES = {v: k for k, v in _STACK_CODES.items()}
_ESN_RECORD = struct.Struct("<BIIIdddQBdd")
ESN_RECORD_SIZE = _ESN_RECORD.size


def encode_model_config(cfg: ModelConfig) -> bytes:
    out = [struct.pack("<IIIIQIdB", cfg.feature_dim, cfg.joint_dim, cfg.vocab_size,
                       cfg.subsample_factor, cfg.master_seed, cfg.embed_dim, cfg.esn_sparsity,
                       int(cfg.esn_normalize))]
    for stack in (cfg.encoder_layers, cfg.decoder_layers):
        out.append(struct.pack("<I", len(stack)))
        for spec in stack:
            out.append(struct.pack("<BI", _KIND_CODES[spec.kind], spec.dim))
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes, pos: int = 0, end: int = None):
        self.data = data
        self.pos = pos
        self.end = len(data) if end is None else end

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > self.end:
            raise ModelFileError("model file is truncated")
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values

    def raw(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise ModelFileError("model file is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def decode_model_config(data: bytes) -> ModelConfig:
    r = _Reader(data)
    feature_dim, joint_dim, vocab, sub, seed, embed_dim, sparsity, normalize = r.take("<IIIIQIdB")
    stacks = []
    for _ in range(2):
        (n,) = r.take("<I")
        layers = []
        for _ in range(n):
            code, dim = r.take("<BI")
            if code not in _KIND_NAMES:
                raise ConfigMismatchError(f"unknown layer kind code {code}")
            layers.append(LayerSpec(_KIND_NAMES[code], dim))
        stacks.append(tuple(layers))
    if r.pos != len(data):
        raise ConfigMismatchError("trailing bytes in config block")
    try:
        return ModelConfig(feature_dim=feature_dim, encoder_layers=stacks[0],
                           decoder_layers=stacks[1], joint_dim=joint_dim, vocab_size=vocab,
                           subsample_factor=sub, master_seed=seed, embed_dim=embed_dim,
                           esn_sparsity=sparsity, esn_normalize=bool(normalize))
    except InvalidConfigError as exc:
        raise ConfigMismatchError(f"stored model config is invalid: {exc}") from exc


def _scalar_names(model: TransducerModel) -> set:
    names = set()
    for stack, i, _ in model.esn_layers():
        names.update({f"{stack}.{i}.rho", f"{stack}.{i}.gamma"})
    return names


def stored_tensor_names(model: TransducerModel) -> list:
    """Tensors written to the payload section, in file order."""
    skip = _scalar_names(model)
    return [n for n in model.params if n not in skip]


def round_to_f32(model: TransducerModel):
    """Round every stored trainable tensor to float32 precision, in place."""
    for name in stored_tensor_names(model):
        p = model.params[name]
        p[...] = p.astype("<f4").astype(np.float64)


def serialize(model: TransducerModel) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    cfg_bytes = encode_model_config(model.config)
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    esn = list(model.esn_layers())
    buf.write(struct.pack("<I", len(esn)))
    for stack, i, layer in esn:
        c = layer.config
        buf.write(_ESN_RECORD.pack(_STACK_CODES[stack], i, c.state_dim, c.input_dim, c.sparsity,
                                   c.init_lo, c.init_hi, c.seed, int(c.normalize_radius),
                                   float(layer.rho), float(layer.gamma)))
    names = stored_tensor_names(model)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        p = model.params[name]
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_model(model: TransducerModel, destination) -> int:
    """Write ``model``; returns the byte count. Rounds the model's stored tensors to float32 first."""
    round_to_f32(model)
    data = serialize(model)
    if hasattr(destination, "write"):
        destination.write(data)
    else:
        tmp = f"{os.fspath(destination)}.tmp"
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, destination)
    return len(data)


def deserialize(data: bytes) -> TransducerModel:
    if len(data) < len(MAGIC) + 8:
        raise ModelFileError("file too short to be a model file")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}; not a model file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"model file format version {version} is not supported (expected {FORMAT_VERSION})")
    (stored_crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != stored_crc:
        raise ChecksumError("CRC32 mismatch; the model file is corrupted")

    r = _Reader(data, 8, len(data) - 4)
    (cfg_len,) = r.take("<I")
    config = decode_model_config(r.raw(cfg_len))
    model = build_model(config)

    (n_esn,) = r.take("<I")
    expected = {(stack, i): layer for stack, i, layer in model.esn_layers()}
    if n_esn != len(expected):
        raise ConfigMismatchError(f"file lists {n_esn} reservoirs, config implies {len(expected)}")
    for _ in range(n_esn):
        (stack_code, index, state_dim, input_dim, sparsity, lo, hi, seed, normalize,
         rho, gamma) = r.take(_ESN_RECORD.format)
        key = (_STACK_NAMES.get(stack_code), index)
        if key not in expected:
            raise ConfigMismatchError(f"reservoir record {key} has no matching layer")
        try:
            stored = ReservoirConfig(state_dim, input_dim, sparsity, lo, hi, seed, bool(normalize))
        except InvalidConfigError as exc:
            raise ConfigMismatchError(str(exc)) from exc
        layer = expected.pop(key)
        # build_model regenerated this layer from the master seed; it must be the stored one
        if stored != layer.config:
            raise ConfigMismatchError(f"stored reservoir config for {key} disagrees with the model")
        layer.rho[...] = rho
        layer.gamma[...] = gamma

    (n_tensors,) = r.take("<I")
    remaining = set(stored_tensor_names(model))
    for _ in range(n_tensors):
        (name_len,) = r.take("<H")
        name = r.raw(name_len).decode("utf-8")
        (ndim,) = r.take("<B")
        shape = r.take(f"<{ndim}I") if ndim else ()
        if name not in remaining:
            raise ConfigMismatchError(f"unexpected or duplicate tensor {name!r}")
        target = model.params[name]
        if tuple(shape) != target.shape:
            raise ConfigMismatchError(f"tensor {name!r} has shape {shape}, expected {target.shape}")
        payload = r.raw(4 * target.size)
        target[...] = np.frombuffer(payload, dtype="<f4").reshape(target.shape)
        remaining.discard(name)
    if remaining:
        raise ConfigMismatchError(f"missing tensors: {sorted(remaining)}")
    if r.pos != r.end:
        raise ConfigMismatchError("trailing bytes after the tensor section")
    return model


def load_model(source) -> TransducerModel:
    if isinstance(source, (bytes, bytearray)):
        return deserialize(bytes(source))
    if hasattr(source, "read"):
        return deserialize(source.read())
    with open(source, "rb") as fh:
        return deserialize(fh.read())


@dataclass(frozen=True)
class SizeBreakdown:
    header: int
    config: int
    reservoirs: int
    tensor_headers: int
    tensor_payload: int
    trailer: int

    @property
    def total(self) -> int:
        return (self.header + self.config + self.reservoirs + self.tensor_headers
                + self.tensor_payload + self.trailer)


def size_breakdown(model: TransducerModel) -> SizeBreakdown:
    """Predicted file size by section, computed without serialising."""
    n_esn = len(list(model.esn_layers()))
    names = stored_tensor_names(model)
    headers = sum(2 + len(n.encode("utf-8")) + 1 + 4 * model.params[n].ndim for n in names)
    payload = sum(4 * model.params[n].size for n in names)
    return SizeBreakdown(
        header=len(MAGIC) + 4,
        config=4 + len(encode_model_config(model.config)),
        reservoirs=4 + ESN_RECORD_SIZE * n_esn,
        tensor_headers=4 + headers,
        tensor_payload=payload,
        trailer=4)
