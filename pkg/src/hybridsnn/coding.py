"""Image <-> spike conversion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .numerics import NumericError


@dataclass
class EncoderParams:
    max_rate: float = 1.0  # spike probability per step at intensity 1
    T: int = 100

    def __post_init__(self):
        if not 0.0 < self.max_rate <= 1.0:
            raise ValueError("max_rate must lie in (0, 1]")
        if self.T < 1:
            raise ValueError("T must be >= 1")


def poisson_encode(image, params: EncoderParams, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli-per-step rate code: ``[T, *image.shape]`` binary train.

    Pixels are clipped to [0, 1]; each fires with probability
    ``intensity * max_rate`` at every step, independently.
    """
    img = np.asarray(image, dtype=np.float64)
    if np.any(np.isnan(img)):
        raise NumericError("NaN pixel")
    p = np.clip(img, 0.0, 1.0) * params.max_rate
    return (rng.random((params.T, *img.shape)) < p).astype(np.float32)


def poisson_encode_batch(images, params: EncoderParams, rng: np.random.Generator) -> np.ndarray:
    """``[B, *grid] -> [B, T, *grid]``."""
    img = np.asarray(images, dtype=np.float64)
    if np.any(np.isnan(img)):
        raise NumericError("NaN pixel")
    p = np.clip(img, 0.0, 1.0)[:, None] * params.max_rate
    return (rng.random((img.shape[0], params.T, *img.shape[1:])) < p).astype(np.float32)


def constant_current_encode(image, T: int) -> np.ndarray:
    """The image repeated as an analog current for all T steps."""
    img = np.asarray(image, dtype=np.float32)
    return np.broadcast_to(img, (T, *img.shape)).copy()


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def dog_kernel(sigma_center: float, sigma_surround: float) -> np.ndarray:
    radius = int(np.ceil(3.0 * sigma_surround))
    return gaussian_kernel(sigma_center, radius) - gaussian_kernel(sigma_surround, radius)


def dog_response(image, sigma_center: float = 1.0, sigma_surround: float = 2.0) -> np.ndarray:
    """Center-surround contrast; edges replicate the border pixel so a flat
    image has exactly zero response (up to rounding)."""
    if not 0 < sigma_center < sigma_surround:
        raise ValueError("need 0 < sigma_center < sigma_surround")
    img = np.asarray(image, dtype=np.float64)
    return ndimage.correlate(img, dog_kernel(sigma_center, sigma_surround), mode="nearest")


def dog_encode(image, sigma_center: float = 1.0, sigma_surround: float = 2.0,
               threshold: float = 0.01, T: int = 20) -> np.ndarray:
    """Latency-coded ON/OFF contrast train of shape ``[T, 2, H, W]``.

    Channel 0 carries positive contrast, channel 1 negative.  Every pixel with
    ``|response| > threshold`` fires once; the strongest contrast fires at
    step 0 and the latency grows linearly as the contrast weakens.
    """
    resp = dog_response(image, sigma_center, sigma_surround)
    mag = np.abs(resp)
    out = np.zeros((T, 2, *resp.shape), dtype=np.float32)
    active = mag > threshold
    if not active.any():
        return out
    peak = mag[active].max()
    latency = np.floor((1.0 - mag / peak) * (T - 1)).astype(np.int64)
    hh, ww = np.nonzero(active)
    ch = (resp[hh, ww] < 0).astype(np.int64)
    out[latency[hh, ww], ch, hh, ww] = 1.0
    return out


def decode_spike_count(output_spikes) -> int:
    """Class with the most spikes over the window (lowest index on ties)."""
    counts = np.asarray(output_spikes).reshape(np.shape(output_spikes)[0], -1).sum(axis=0)
    return int(np.argmax(counts))


def decode_potential(u_T) -> np.ndarray:
    """Accumulated output potentials are the scores, verbatim."""
    return np.array(u_T, copy=True)
