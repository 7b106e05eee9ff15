"""Binary checkpoint files.

Layout: a 16-byte fixed preamble (8 magic bytes, u32 version, u32 header
length, little-endian), a JSON header describing the config, parameter
names/shapes/offsets and the trainable mask, then one contiguous
little-endian float64 payload. Round-trips are bit-exact.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    ParameterShapeError,
    PayloadMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)
from .tensor import Tensor
from .vit import ViTConfig, param_shapes

MAGIC = b"GPTUNE\x00\x01"
VERSION = 1
_PREAMBLE = struct.Struct("<8sII")


@dataclass
class Checkpoint:
    """Full parameter set partitioned into frozen backbone and trainable
    tuning parameters by ``trainable``."""

    config: ViTConfig
    params: dict[str, Tensor]
    trainable: set[str]
    seed: int
    version: int = VERSION
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        missing = self.trainable - set(self.params)
        if missing:
            raise ConfigError(f"trainable mask names unknown parameters: {sorted(missing)}")

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}


def backbone_hash(ckpt: Checkpoint) -> str:
    """Digest of the frozen (non-trainable) parameters, order-independent."""
    digest = hashlib.sha256()
    for name in sorted(set(ckpt.params) - ckpt.trainable):
        digest.update(name.encode())
        digest.update(ckpt.params[name].data.astype("<f8").tobytes())
    return digest.hexdigest()[:16]


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    entries = []
    offset = 0
    names = sorted(ckpt.params)
    for name in names:
        arr = ckpt.params[name].data
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {
        "config": dataclasses.asdict(ckpt.config),
        "seed": ckpt.seed,
        "trainable": sorted(ckpt.trainable),
        "extras": ckpt.extras,
        "params": entries,
        "total_values": offset,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_PREAMBLE.pack(MAGIC, ckpt.version, len(header_bytes)))
        fh.write(header_bytes)
        for name in names:
            fh.write(ckpt.params[name].data.astype("<f8").tobytes())


def load_checkpoint(path, expected_config: ViTConfig | None = None) -> Checkpoint:
    """Load and validate a checkpoint.

    With ``expected_config`` given, every stored parameter is additionally
    checked against the shapes that config implies; the first conflict
    raises :class:`ParameterShapeError` naming the parameter.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _PREAMBLE.size:
        raise TruncatedFileError(f"{path}: file shorter than the fixed preamble")
    magic, version, header_len = _PREAMBLE.unpack_from(raw, 0)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic bytes {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < _PREAMBLE.size + header_len:
        raise TruncatedFileError(f"{path}: header truncated")
    header = json.loads(raw[_PREAMBLE.size:_PREAMBLE.size + header_len])

    payload = raw[_PREAMBLE.size + header_len:]
    expected_bytes = header["total_values"] * 8
    if len(payload) < expected_bytes:
        raise TruncatedFileError(
            f"{path}: payload has {len(payload)} bytes, header declares {expected_bytes}")
    if len(payload) != expected_bytes:
        raise PayloadMismatchError(
            f"{path}: payload has {len(payload)} bytes, header declares {expected_bytes}")

    flat = np.frombuffer(payload, dtype="<f8")
    config = ViTConfig(**header["config"])
    expected_shapes = param_shapes(expected_config) if expected_config else None

    params: dict[str, Tensor] = {}
    for entry in header["params"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        size = int(np.prod(shape)) if shape else 1
        if offset + size > flat.size:
            raise TruncatedFileError(f"{path}: parameter '{name}' extends past the payload")
        if expected_shapes is not None and name in expected_shapes \
                and expected_shapes[name] != shape:
            raise ParameterShapeError(
                f"{path}: parameter '{name}' has shape {shape}, "
                f"expected {expected_shapes[name]} for the given config")
        params[name] = Tensor(flat[offset:offset + size].reshape(shape).copy())

    return Checkpoint(config=config, params=params, trainable=set(header["trainable"]),
                      seed=header["seed"], version=version, extras=header.get("extras", {}))
