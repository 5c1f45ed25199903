"""FSNC tensor checkpoints.

Layout (little-endian)::

    b"FSNC" | u16 version | u32 n_entries
    per entry: u16 name_len | name (utf-8) | u8 rank | u32 dims[rank] | u8 dtype
               | payload (4 * prod(dims) bytes, float32) | u32 crc32(payload)
    u32 meta_len | metadata (utf-8 JSON)
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .data import FormatError, _atomic_write
from .spiking import LayerSpec, LifParams, NetworkSpec

log = logging.getLogger(__name__)

MAGIC = b"FSNC"
VERSION = 1
DTYPE_F32 = 0


@dataclass
class Checkpoint:
    tensors: dict = field(default_factory=dict)  # name -> float32 array, insertion order kept
    metadata: dict = field(default_factory=dict)
    crc_mismatches: list = field(default_factory=list)


def encode_metadata(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        a = np.asarray(arr)
        if a.dtype != np.float32:
            raise TypeError(f"{name}: only float32 tensors are stored, got {a.dtype}")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF or a.ndim > 0xFF:
            raise ValueError(f"{name}: name or rank too large")
        payload = np.ascontiguousarray(a).astype("<f4", copy=False).tobytes()
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<B", a.ndim),
                  struct.pack(f"<{a.ndim}I", *a.shape), struct.pack("<B", DTYPE_F32), payload,
                  struct.pack("<I", zlib.crc32(payload))]
    meta = encode_metadata(ckpt.metadata)
    parts += [struct.pack("<I", len(meta)), meta]
    return b"".join(parts)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    _atomic_write(path, checkpoint_bytes(ckpt))


def parse_checkpoint(raw: bytes, strict: bool = False, source: str = "<bytes>") -> Checkpoint:
    """Decode FSNC bytes.  A CRC mismatch is recorded in ``crc_mismatches``
    (and logged); with ``strict=True`` it raises instead."""
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{source}: truncated {what} at offset {pos}")
        out = raw[pos:pos + n]
        pos += n
        return out

    if take(4, "magic") != MAGIC:
        raise FormatError(f"{source}: bad magic at offset 0")
    version, count = struct.unpack("<HI", take(6, "header"))
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version} at offset 4")
    tensors, bad = {}, []
    for _ in range(count):
        at = pos
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        if name in tensors:
            raise FormatError(f"{source}: duplicate entry {name!r} at offset {at}")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        (dtype,) = struct.unpack("<B", take(1, "dtype"))
        if dtype != DTYPE_F32:
            raise FormatError(f"{source}: entry {name!r} has unknown dtype {dtype} at offset {pos - 1}")
        payload = take(4 * int(np.prod(dims, dtype=np.int64)), f"payload of {name!r}")
        (crc,) = struct.unpack("<I", take(4, "crc"))
        if zlib.crc32(payload) != crc:
            msg = f"{source}: CRC32 mismatch in entry {name!r} (offset {at})"
            if strict:
                raise FormatError(msg)
            log.warning(msg)
            bad.append(name)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    (mlen,) = struct.unpack("<I", take(4, "metadata length"))
    meta_raw = take(mlen, "metadata")
    if pos != len(raw):
        raise FormatError(f"{source}: {len(raw) - pos} trailing bytes at offset {pos}")
    try:
        meta = json.loads(meta_raw.decode("utf-8")) if mlen else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{source}: metadata is not valid JSON ({e})") from None
    return Checkpoint(tensors, meta, bad)


def load_checkpoint(path, strict: bool = False) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    return parse_checkpoint(raw, strict=strict, source=str(path))


def network_to_checkpoint(net: NetworkSpec, metadata: dict | None = None) -> Checkpoint:
    tensors = {}
    for i, l in enumerate(net.layers):
        if l.weight is not None:
            tensors[f"layer{i}.weight"] = np.asarray(l.weight, dtype=np.float32)
        if l.bias is not None:
            tensors[f"layer{i}.bias"] = np.asarray(l.bias, dtype=np.float32)
    meta = dict(metadata or {})
    meta["network"] = {"input_shape": list(net.input_shape),
                       "layers": [l.config_dict() for l in net.layers]}
    return Checkpoint(tensors, meta)


def network_from_checkpoint(ckpt: Checkpoint) -> NetworkSpec:
    try:
        spec = ckpt.metadata["network"]
        layers = []
        for i, d in enumerate(spec["layers"]):
            d = dict(d)
            lif = d.pop("lif", None)
            layers.append(LayerSpec(
                weight=ckpt.tensors.get(f"layer{i}.weight"), bias=ckpt.tensors.get(f"layer{i}.bias"),
                lif=LifParams.from_dict(lif) if lif is not None else None, **d))
        net = NetworkSpec(tuple(spec["input_shape"]), layers)
    except (KeyError, TypeError) as e:
        raise FormatError(f"checkpoint metadata does not describe a network ({e})") from None
    net.validate()
    return net


def save_network(path, net: NetworkSpec, metadata: dict | None = None) -> None:
    save_checkpoint(path, network_to_checkpoint(net, metadata))


def load_network(path, strict: bool = True):
    """Returns ``(network, metadata)``."""
    ckpt = load_checkpoint(path, strict=strict)
    return network_from_checkpoint(ckpt), ckpt.metadata
