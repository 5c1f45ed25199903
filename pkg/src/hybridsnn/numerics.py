"""Dense array kernels and seeded randomness shared by the ANN and SNN paths.

Arrays are plain ``numpy.ndarray`` objects, row-major, float32 by default.
Kernels preserve the dtype they are given so that gradient checks can run
in float64.  Every kernel accepts an optional leading batch axis.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

DTYPE = np.float32


class DimensionError(ValueError):
    """Shapes of the operands are incompatible."""


class NumericError(ArithmeticError):
    """A NaN/inf reached a place where only finite values make sense."""


def as_tensor(x, dtype=DTYPE) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


def make_rng(seed: int, stream_id: int = 0) -> np.random.Generator:
    """Independent generator for ``(seed, stream_id)``.

    Streams with different ids are statistically independent and each one is
    bit-reproducible, so parallel workers can each take their own stream.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream_id),))
    return np.random.Generator(np.random.PCG64(ss))


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Patches of a ``[B, C, H, W]`` batch as ``[B, H'*W', C*k*k]``."""
    B, C, H, W = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = conv_output_size(H, k, stride, padding)
    Wo = conv_output_size(W, k, stride, padding)
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :Ho, :Wo]  # B, C, Ho, Wo, k, k
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B, Ho * Wo, C * k * k)


def col2im(cols: np.ndarray, shape: tuple, k: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`; overlapping patches are summed."""
    B, C, H, W = shape
    Ho = conv_output_size(H, k, stride, padding)
    Wo = conv_output_size(W, k, stride, padding)
    out = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=cols.dtype)
    cols = cols.reshape(B, Ho, Wo, C, k, k)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0,
                   bias: np.ndarray | None = None) -> np.ndarray:
    """Cross-correlation of ``[C_in, H, W]`` (or ``[B, C_in, H, W]``) with
    ``[C_out, C_in, k, k]``; no kernel flip."""
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects [C,H,W] input and 4-D kernel, got {x.shape}, {kernel.shape}")
    C_out, C_in, k, k2 = kernel.shape
    if k != k2:
        raise DimensionError("only square kernels are supported")
    if x.shape[1] != C_in:
        raise DimensionError(f"input has {x.shape[1]} channels, kernel expects {C_in}")
    if stride < 1:
        raise DimensionError("stride must be >= 1")
    H, W = x.shape[2:]
    if k > H + 2 * padding or k > W + 2 * padding:
        raise DimensionError(f"kernel {k} larger than padded input {H}x{W}+{padding}")
    Ho = conv_output_size(H, k, stride, padding)
    Wo = conv_output_size(W, k, stride, padding)
    cols = im2col(x, k, stride, padding)
    out = cols @ kernel.reshape(C_out, -1).T  # B, P, C_out
    if bias is not None:
        out = out + np.asarray(bias)
    out = out.transpose(0, 2, 1).reshape(x.shape[0], C_out, Ho, Wo)
    return out[0] if single else out


def fc_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """``y = W x (+ b)`` for ``x`` of shape ``[n]`` or ``[B, n]``."""
    x = np.asarray(x)
    weights = np.asarray(weights)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1]:
        raise DimensionError(f"fc weights {weights.shape} do not accept input {x.shape}")
    y = x @ weights.T
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (weights.shape[0],):
            raise DimensionError(f"bias shape {bias.shape} != ({weights.shape[0]},)")
        y = y + bias
    return y


def avgpool2d(x: np.ndarray, window: int) -> np.ndarray:
    x = np.asarray(x)
    H, W = x.shape[-2:]
    if window < 1 or H % window or W % window:
        raise DimensionError(f"window {window} does not divide {H}x{W}")
    lead = x.shape[:-2]
    blocks = x.reshape(*lead, H // window, window, W // window, window)
    return blocks.mean(axis=(-3, -1))


def maxpool2d(x: np.ndarray, window: int) -> np.ndarray:
    x = np.asarray(x)
    H, W = x.shape[-2:]
    if window < 1 or H % window or W % window:
        raise DimensionError(f"window {window} does not divide {H}x{W}")
    lead = x.shape[:-2]
    blocks = x.reshape(*lead, H // window, window, W // window, window)
    return blocks.max(axis=(-3, -1))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-shifted softmax over the last axis."""
    z = np.asarray(logits)
    if z.size == 0:
        raise DimensionError("softmax of an empty vector")
    if np.any(np.isnan(z)):
        raise NumericError("NaN in softmax input")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits)
    if np.any(np.isnan(z)):
        raise NumericError("NaN in log_softmax input")
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def finite_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray,
                               h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time.

    ``x`` is evaluated in float64 regardless of its dtype.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return grad
