"""IDX reading/writing and the synthetic oriented-bar corpus."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

IDX_UBYTE = 0x08
CLASS_NAMES = ("horizontal", "vertical", "diagonal")


class FormatError(ValueError):
    """Malformed file; the message names the byte offset or line."""


def read_idx(path) -> np.ndarray:
    """Parse an IDX file of unsigned bytes.

    Image files (magic ``0x00000803``) come back as float32 in [0, 1]
    (``byte / 255``); label files (``0x00000801``) as int64.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at offset 0")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (0x00000801, 0x00000803):
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at offset 0")
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(raw) < hdr:
        raise FormatError(f"{path}: truncated dimension header at offset 4")
    dims = struct.unpack(f">{ndim}I", raw[4:hdr])
    count = int(np.prod(dims))
    if len(raw) - hdr < count:
        raise FormatError(f"{path}: payload truncated at offset {len(raw)}, expected {hdr + count} bytes")
    if len(raw) - hdr > count:
        raise FormatError(f"{path}: {len(raw) - hdr - count} trailing bytes at offset {hdr + count}")
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=hdr).reshape(dims)
    if ndim == 1:
        return data.astype(np.int64)
    return (data.astype(np.float32) / 255.0)


def read_idx_pair(images_path, labels_path):
    x = read_idx(images_path)
    y = read_idx(labels_path)
    if x.ndim != 3 or y.ndim != 1 or len(x) != len(y):
        raise FormatError(f"{images_path}/{labels_path}: image/label counts disagree")
    return x, y


def write_idx(path, array) -> None:
    """Write uint8 IDX.  Float arrays are taken as [0, 1] intensities."""
    a = np.asarray(array)
    if a.dtype.kind == "f":
        a = np.rint(np.clip(a, 0.0, 1.0) * 255.0)
    a = a.astype(np.uint8)
    if a.ndim not in (1, 3):
        raise ValueError("IDX writer handles label vectors and image stacks only")
    hdr = struct.pack(">I", 0x00000800 | a.ndim) + struct.pack(f">{a.ndim}I", *a.shape)
    _atomic_write(path, hdr + a.tobytes())


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


def bar_template(cls: int, size: int) -> np.ndarray:
    img = np.zeros((size, size), dtype=np.float32)
    c = size // 2
    if cls == 0:
        img[c - 1:c + 1, 1:-1] = 1.0
    elif cls == 1:
        img[1:-1, c - 1:c + 1] = 1.0
    elif cls == 2:
        i = np.arange(1, size - 1)
        img[i, i] = 1.0
        img[i[:-1], i[:-1] + 1] = 1.0
    else:
        raise ValueError(f"unknown class {cls}")
    return img


def generate_synthetic_patterns(n_per_class: int, size: int = 12, noise_sigma: float = 0.1,
                                seed: int = 0):
    """Balanced horizontal/vertical/diagonal bar images with Gaussian pixel
    noise, clipped to [0, 1].  Returns ``(images [N, size, size], labels)``;
    samples are interleaved by class."""
    if size < 8:
        raise ValueError("size must be >= 8")
    rng = np.random.default_rng(seed)
    templates = np.stack([bar_template(c, size) for c in range(len(CLASS_NAMES))])
    labels = np.tile(np.arange(len(CLASS_NAMES)), n_per_class)
    images = templates[labels]
    if noise_sigma > 0:
        images = images + rng.normal(0.0, noise_sigma, images.shape)
    return np.clip(images, 0.0, 1.0).astype(np.float32), labels.astype(np.int64)


def generate_separable_toy(n: int, dim: int = 4, margin: float = 0.15, seed: int = 0):
    """Two classes in ``[0, 1]^dim`` split by the plane through the cube
    centre with normal ``(1, .., 1, -1, .., -1)``; points closer than
    ``margin`` to the plane are rejected.  Labels alternate."""
    if dim < 2 or n < 1:
        raise ValueError("need dim >= 2 and n >= 1")
    rng = np.random.default_rng(seed)
    normal = np.where(np.arange(dim) < (dim + 1) // 2, 1.0, -1.0)
    normal /= np.linalg.norm(normal)
    want = np.arange(n) % 2
    out = np.empty((n, dim), dtype=np.float32)
    filled = np.zeros(2, dtype=int)
    need = np.bincount(want, minlength=2)
    pools = [[], []]
    while np.any(filled < need):
        x = rng.random((4 * n, dim))
        d = (x - 0.5) @ normal
        x = x[np.abs(d) >= margin]
        lab = (d[np.abs(d) >= margin] > 0).astype(int)
        for c in (0, 1):
            take = x[lab == c][: need[c] - filled[c]]
            pools[c].append(take)
            filled[c] += len(take)
    for c in (0, 1):
        out[want == c] = np.concatenate(pools[c])[: need[c]]
    return out, want.astype(np.int64)
