"""Binary model checkpoints.

Layout (all little-endian): magic "BSEG1", format version u16, embedded
model configuration, then parameter blocks (name, rank, extents, raw
float32 values) in construction order, then batch-norm running-statistic
blocks. The embedded configuration makes checkpoints self-describing:
loading rebuilds the model without the original config file. A
save/load/save round trip reproduces identical bytes.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import (CheckpointExtentError, CheckpointMagicError,
                     CheckpointTruncationError, CheckpointVersionError)
from .model import DROPOUT_VARIANTS, ModelConfig, SegModel, build_model
from .rng import Rng

MAGIC = b"BSEG1"
VERSION = 1

_CONFIG_FMT = "<IIIIBfQ"


def save_checkpoint(model: SegModel, path) -> None:
    cfg = model.config
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<H", VERSION)
    blob += struct.pack(_CONFIG_FMT, cfg.input_channels, cfg.num_classes, cfg.stages,
                        cfg.features, DROPOUT_VARIANTS.index(cfg.dropout_variant),
                        cfg.dropout_p, cfg.seed & 0xFFFFFFFFFFFFFFFF)
    params = model.parameters()
    blob += struct.pack("<I", len(params))
    for p in params:
        name = p.name.encode("utf-8")
        blob += struct.pack("<H", len(name)) + name
        blob += struct.pack("<B", p.data.ndim)
        blob += struct.pack(f"<{p.data.ndim}I", *p.data.shape)
        blob += np.ascontiguousarray(p.data, "<f4").tobytes()
    bns = model.bn_states()
    blob += struct.pack("<I", len(bns))
    for name, bn in bns:
        raw = name.encode("utf-8")
        channels = bn.running_mean.shape[0]
        blob += struct.pack("<H", len(raw)) + raw
        blob += struct.pack("<I", channels)
        blob += np.ascontiguousarray(bn.running_mean, "<f4").tobytes()
        blob += np.ascontiguousarray(bn.running_var, "<f4").tobytes()
    with open(path, "wb") as f:
        f.write(bytes(blob))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncationError(
                f"checkpoint ends at byte {len(self.data)}, "
                f"needed {self.pos + n}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> SegModel:
    with open(path, "rb") as f:
        r = _Reader(f.read())

    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointMagicError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported version {version}")

    cin, classes, stages, features, variant_idx, drop_p, seed = r.unpack(_CONFIG_FMT)
    if variant_idx >= len(DROPOUT_VARIANTS):
        raise CheckpointVersionError(f"{path}: unknown variant tag {variant_idx}")
    cfg = ModelConfig(input_channels=cin, num_classes=classes, stages=stages,
                      features=features, dropout_variant=DROPOUT_VARIANTS[variant_idx],
                      dropout_p=float(drop_p), seed=int(seed))
    model = build_model(cfg, Rng(cfg.seed))

    (n_params,) = r.unpack("<I")
    params = model.parameters()
    if n_params != len(params):
        raise CheckpointExtentError(
            f"{path}: {n_params} parameter blocks, config implies {len(params)}")
    for p in params:
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        if name != p.name:
            raise CheckpointExtentError(
                f"{path}: parameter {name!r} where {p.name!r} expected")
        (rank,) = r.unpack("<B")
        extents = r.unpack(f"<{rank}I")
        if extents != p.data.shape:
            raise CheckpointExtentError(
                f"{path}: {name} extents {extents} do not match config {p.data.shape}")
        raw = r.take(4 * int(np.prod(extents)))
        p.data = np.frombuffer(raw, "<f4").reshape(extents).copy()
        p.velocity = np.zeros_like(p.data)
        p.grad = None

    (n_bns,) = r.unpack("<I")
    bns = model.bn_states()
    if n_bns != len(bns):
        raise CheckpointExtentError(
            f"{path}: {n_bns} batch-norm blocks, config implies {len(bns)}")
    for expected_name, bn in bns:
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        if name != expected_name:
            raise CheckpointExtentError(
                f"{path}: batch-norm block {name!r} where {expected_name!r} expected")
        (channels,) = r.unpack("<I")
        if channels != bn.running_mean.shape[0]:
            raise CheckpointExtentError(
                f"{path}: {name} has {channels} channels, config implies "
                f"{bn.running_mean.shape[0]}")
        bn.running_mean = np.frombuffer(r.take(4 * channels), "<f4").copy()
        bn.running_var = np.frombuffer(r.take(4 * channels), "<f4").copy()
    return model
