"""Reduced-width ECAPA-TDNN encoder and the ``.ckpt`` checkpoint format."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import CheckpointError, ConfigError, IntegrityError, ShapeError, TooShortError
from .frontend import FeatureMatrix


@dataclass(frozen=True)
class EncoderConfig:
    channels: int = 64
    res2net_scale: int = 2
    se_reduction: int = 4
    dilations: tuple = (2, 3, 4)
    embedding_dim: int = 64
    feature_dim: int = 40
    kernel_size: int = 3
    first_kernel: int = 5
    attention_channels: int = 64

    def validate(self):
        d = tuple(self.dilations)
        if len(d) != 3:
            raise ConfigError(f"expected three dilations, got {d}")
        if any(b <= a for a, b in zip(d, d[1:])) or d[0] < 1:
            raise ConfigError(f"dilations must be strictly increasing and >= 1, got {d}")
        if self.res2net_scale < 2 or self.channels % self.res2net_scale:
            raise ConfigError(
                f"channels {self.channels} not divisible by res2net_scale {self.res2net_scale}")
        if self.channels % self.se_reduction:
            raise ConfigError(
                f"channels {self.channels} not divisible by se_reduction {self.se_reduction}")
        for name in ("channels", "embedding_dim", "feature_dim", "attention_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EncoderConfig:
        d = dict(d)
        d["dilations"] = tuple(d["dilations"])
        return cls(**d)


class Encoder(nn.Layer):
    """conv block -> 3 SE-Res2Net blocks -> concat -> conv block -> attentive pooling -> affine.

    Input ``(N, F, T)`` features, output ``(N, D)`` embeddings. Internally the
    layers run channel-major, ``(C, N, T)``.
    """

    def __init__(self, cfg: EncoderConfig = EncoderConfig(), seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        C = cfg.channels
        self.layer1 = self.add("layer1", nn.TDNNBlock(cfg.feature_dim, C, cfg.first_kernel, rng=rng))
        self.blocks = [
            self.add(f"block{i + 1}", nn.Res2NetBlock(C, cfg.res2net_scale, cfg.kernel_size, d,
                                                      cfg.se_reduction, rng=rng))
            for i, d in enumerate(cfg.dilations)
        ]
        self.mfa = self.add("mfa", nn.TDNNBlock(3 * C, 3 * C, 1, rng=rng))
        self.pool = self.add("pool", nn.AttentiveStatsPool(3 * C, cfg.attention_channels, rng=rng))
        self.fc = self.add("fc", nn.Linear(6 * C, cfg.embedding_dim, rng=rng))

    def forward(self, x):
        if x.ndim != 3 or x.shape[1] != self.cfg.feature_dim:
            raise ShapeError(f"encoder expects (N, {self.cfg.feature_dim}, T) input, got {x.shape}")
        if x.shape[2] < 2:
            raise TooShortError(f"encoder needs T >= 2 frames, got {x.shape[2]}")
        h = self.layer1.forward(np.ascontiguousarray(x.transpose(1, 0, 2)))
        outs = []
        for block in self.blocks:
            h = block.forward(h)
            outs.append(h)
        h = self.mfa.forward(np.concatenate(outs, axis=0))
        return self.fc.forward(self.pool.forward(h))

    def backward(self, dy):
        dh = self.mfa.backward(self.pool.backward(self.fc.backward(dy)))
        douts = np.split(dh, 3, axis=0)
        carry = None
        for block, dout in zip(reversed(self.blocks), reversed(douts)):
            g = dout if carry is None else dout + carry
            carry = block.backward(g)
        return self.layer1.backward(carry).transpose(1, 0, 2)


def build_encoder(cfg: EncoderConfig = EncoderConfig(), seed: int = 0) -> Encoder:
    return Encoder(cfg, seed)


def embed(encoder: Encoder, features) -> np.ndarray:
    """Embedding of one utterance (``T x F`` features) in eval mode."""
    frames = features.frames if isinstance(features, FeatureMatrix) else np.asarray(features)
    if frames.ndim != 2 or frames.shape[0] < 2:
        raise TooShortError(f"need a (T >= 2, F) feature matrix, got shape {frames.shape}")
    was_training = encoder.training
    encoder.eval()
    try:
        x = frames.T[None].astype(encoder.dtype)
        return encoder.forward(x)[0].astype(np.float64)
    finally:
        encoder.train(was_training)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1
_MAGIC = b"CLDCKPT\x00"
_SECTIONS = ("encoder", "head", "teacher", "optimizer")


@dataclass
class Checkpoint:
    encoder_config: EncoderConfig
    encoder: dict
    head: dict = field(default_factory=dict)
    teacher: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    epoch: int = -1
    meta: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for section in _SECTIONS:
            for name, arr in getattr(self, section).items():
                out[f"{section}/{name}"] = np.asarray(arr)
        return out

    def check_shapes(self):
        ref = Encoder(self.encoder_config).state_dict()
        if set(ref) != set(self.encoder):
            missing = sorted(set(ref) - set(self.encoder))[:3]
            extra = sorted(set(self.encoder) - set(ref))[:3]
            raise ShapeError(f"encoder arrays do not match config (missing {missing}, extra {extra})")
        for name, arr in ref.items():
            if np.shape(self.encoder[name]) != arr.shape:
                raise ShapeError(
                    f"encoder array {name} has shape {np.shape(self.encoder[name])}, config implies {arr.shape}")


def _dtype_str(arr: np.ndarray) -> str:
    dt = np.dtype(arr.dtype)
    if dt.kind not in "fiu":
        raise CheckpointError(f"cannot store arrays of dtype {dt}")
    return dt.newbyteorder("<").str


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Binary layout: magic, uint64 header length, JSON header, raw little-endian arrays."""
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, arr in ckpt.arrays().items():
        dt = _dtype_str(arr)
        data = np.ascontiguousarray(arr, dtype=dt).tobytes()
        entries.append({"name": name, "dtype": dt, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({
        "version": ckpt.version,
        "encoder_config": ckpt.encoder_config.to_dict(),
        "epoch": ckpt.epoch,
        "meta": ckpt.meta,
        "arrays": entries,
        "data_bytes": offset,
    }, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != _MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint file (bad magic or truncated header)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + hlen:
        raise IntegrityError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16 : 16 + hlen])
    except ValueError as exc:
        raise IntegrityError(f"{path}: corrupt header") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
    expected = 16 + hlen + header["data_bytes"]
    if len(raw) != expected:
        raise IntegrityError(f"{path}: length {len(raw)} bytes, header implies {expected}")
    data = memoryview(raw)[16 + hlen :]
    sections = {s: {} for s in _SECTIONS}
    for e in header["arrays"]:
        section, name = e["name"].split("/", 1)
        buf = data[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=e["dtype"]).reshape(e["shape"]).copy()
        sections[section][name] = arr.astype(np.dtype(e["dtype"]).newbyteorder("="))
    ckpt = Checkpoint(
        encoder_config=EncoderConfig.from_dict(header["encoder_config"]),
        epoch=header["epoch"], meta=header["meta"], version=header["version"], **sections)
    ckpt.check_shapes()
    return ckpt
