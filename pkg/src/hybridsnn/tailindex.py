"""Tail-index estimation of optimizer noise.

Contains a symmetric alpha-stable sampler (the estimator's test oracle), the
block-sum estimator of ``1/alpha``, harvesting of SGD gradient noise and STDP
update noise, a two-layer ReLU testbed, and an Euler-Maruyama sampler for the
Langevin / OU synaptic-sampling dynamics.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .coding import EncoderParams, poisson_encode_batch
from .spiking import NetworkSpec
from .stdp import StdpParams, stdp_sample_update

log = logging.getLogger(__name__)


@dataclass
class TailIndexEstimate:
    alpha_hat: float
    K: int
    K1: int
    K2: int
    n_noise_coordinates: int
    dropped_zeros: int = 0
    truncated: int = 0
    zero_blocks: int = 0

    @property
    def in_range(self) -> bool:
        return 0.0 < self.alpha_hat <= 2.0

    def report(self, mode: str) -> dict:
        d = asdict(self)
        d["mode"] = mode
        d["in_range"] = self.in_range
        return d


def sample_alpha_stable(alpha: float, sigma: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Symmetric alpha-stable draws (Chambers-Mallows-Stuck).

    ``alpha=2`` gives a Gaussian with variance ``2 sigma^2``, ``alpha=1`` a
    Cauchy with scale ``sigma``.
    """
    if not 0.0 < alpha <= 2.0:
        raise ValueError(f"alpha must lie in (0, 2], got {alpha}")
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    v = rng.uniform(-np.pi / 2, np.pi / 2, n)
    w = rng.exponential(1.0, n)
    if alpha == 1.0:
        x = np.tan(v)
    else:
        x = (np.sin(alpha * v) / np.cos(v) ** (1.0 / alpha)
             * (np.cos(v - alpha * v) / w) ** ((1.0 - alpha) / alpha))
    return sigma * x


def choose_k1(K: int) -> int:
    """Divisor of ``K`` in ``[2, K/2]`` closest to ``sqrt(K)`` (smaller on ties)."""
    K = int(K)
    if K < 4:
        raise ValueError(f"K={K} has no block size in [2, K/2]")
    root = math.sqrt(K)
    best = None
    for d in range(2, K // 2 + 1):
        if d > 2 * root + 1:
            break
        if K % d == 0 and (best is None or abs(d - root) < abs(best - root)):
            best = d
    if best is None:
        raise ValueError(f"K={K} is prime; no block size in [2, K/2]")
    return best


def _admissible_k(n: int) -> int:
    """Largest ``K <= n`` that is not prime (and at least 4)."""
    for K in range(n, 3, -1):
        if any(K % d == 0 for d in range(2, math.isqrt(K) + 1)):
            return K
    raise ValueError(f"need at least 4 non-zero samples, got {n}")


def estimate_tail_index(X, K1: int | None = None, K2: int | None = None) -> TailIndexEstimate:
    """Block-sum estimator of the tail index of (approximately) SaS samples.

    ``1/alpha = (mean_i ln|Y_i| - mean_j ln|X_j|) / ln K1`` where ``Y_i`` sums
    consecutive blocks of ``K1`` samples.  Exact zeros are dropped first.
    Without ``K1`` the usable length is truncated to the largest composite
    number and ``K1`` is its divisor nearest the square root; with ``K1``
    given, ``K2`` defaults to as many full blocks as fit.
    """
    x = np.asarray(X, dtype=np.float64).ravel()
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite samples")
    nz = x[x != 0]
    dropped = x.size - nz.size
    if K1 is None:
        K = _admissible_k(nz.size)
        K1 = choose_k1(K)
        K2 = K // K1
    else:
        if K1 < 2:
            raise ValueError("K1 must be >= 2")
        if K2 is None:
            K2 = nz.size // K1
        if K2 < 1 or K1 * K2 > nz.size:
            raise ValueError(f"K1*K2={K1 * (K2 or 0)} exceeds the {nz.size} non-zero samples")
    K = K1 * K2
    xs = nz[:K]
    y = xs.reshape(K2, K1).sum(axis=1)
    # discrete data can cancel exactly inside a block; such blocks carry no
    # scale information and are left out of the block average
    zero_blocks = int(np.sum(y == 0))
    if zero_blocks == K2:
        raise ValueError("every block sum is exactly zero")
    y = y[y != 0]
    inv = (np.mean(np.log(np.abs(y))) - np.mean(np.log(np.abs(xs)))) / math.log(K1)
    alpha = 1.0 / inv if inv != 0 else math.inf
    if not 0.0 < alpha <= 2.0:
        log.debug("alpha_hat %.4f outside (0, 2]", alpha)
    return TailIndexEstimate(float(alpha), K, K1, K2, int(x.size), int(dropped), int(nz.size - K),
                             zero_blocks)


def collect_sgd_gradient_noise(grad_fn: Callable, n: int, batch_size: int, passes: int,
                               rng: np.random.Generator) -> np.ndarray:
    """Minibatch-minus-full gradient noise at a fixed parameter snapshot.

    ``grad_fn(indices)`` must return the flattened gradient of the mean loss
    over those sample indices.  Each pass shuffles the ``n`` samples into
    ``n / batch_size`` disjoint batches.  Returns ``[passes * n / b, dim]``.
    """
    if batch_size < 1 or n % batch_size:
        raise ValueError(f"batch size {batch_size} does not divide n={n}")
    if passes < 1:
        raise ValueError("passes must be >= 1")
    full = np.asarray(grad_fn(np.arange(n)), dtype=np.float64)
    if batch_size == n:
        # the only batch is the full set; skip the reordering round-off
        return np.zeros((passes, full.size))
    out = []
    for _ in range(passes):
        perm = rng.permutation(n)
        for s in range(0, n, batch_size):
            out.append(np.asarray(grad_fn(perm[s:s + batch_size]), dtype=np.float64) - full)
    return np.stack(out)


def collect_stdp_update_noise(net: NetworkSpec, layer_idx: int, images, batch_size: int, passes: int,
                              rng: np.random.Generator, params: StdpParams | None = None,
                              encoder: EncoderParams | None = None, trains=None) -> np.ndarray:
    """Per-minibatch STDP update minus the mean update of its pass.

    Weights stay at their snapshot.  Each image is encoded once (or taken
    from ``trains``, ``[N, T, *grid]``) so the noise reflects which samples
    form a batch, as for SGD.  The update of a batch is the mean per-sample
    update; conv layers learn under cross-depth inhibition as in training.
    Returns ``[passes * n / b, n_weights]``.
    """
    net = net.copy()
    net.layers[layer_idx].inhibition = net.layers[layer_idx].kind == "conv2d"
    params = params or StdpParams()
    encoder = encoder or EncoderParams()
    if trains is None:
        trains = poisson_encode_batch(np.asarray(images), encoder, rng)
    n = len(trains)
    if batch_size < 1 or n % batch_size:
        raise ValueError(f"batch size {batch_size} does not divide n={n}")
    if passes < 1:
        raise ValueError("passes must be >= 1")
    out = []
    for _ in range(passes):
        perm = rng.permutation(n)
        upd = [stdp_sample_update(net, layer_idx, trains[perm[s:s + batch_size]], params,
                                  learn=False).ravel() / batch_size
               for s in range(0, n, batch_size)]
        upd = np.stack(upd)
        out.append(upd - upd.mean(axis=0))
    return np.concatenate(out)


# --- two-layer ReLU testbed -------------------------------------------------

@dataclass
class TwoLayerNet:
    """``f(x) = m^{-1/2} sum_r a_r relu(w_r . x)``; ``W`` is ``[d, m]`` with
    column ``r`` holding ``w_r``; the signs ``a`` never train."""

    W: np.ndarray
    a: np.ndarray
    kappa: float = 1.0

    def __post_init__(self):
        if self.W.ndim != 2 or self.a.shape != (self.W.shape[1],):
            raise ValueError("W must be [d, m] and a must be [m]")
        if not np.all(np.abs(self.a) == 1):
            raise ValueError("a entries must be +-1")

    @property
    def d(self) -> int:
        return self.W.shape[0]

    @property
    def m(self) -> int:
        return self.W.shape[1]


def init_two_layer(d: int, m: int, kappa: float, rng: np.random.Generator) -> TwoLayerNet:
    if d < 1 or m < 1:
        raise ValueError("d and m must be >= 1")
    if not 0.0 < kappa <= 1.0:
        raise ValueError("kappa must lie in (0, 1]")
    W = rng.normal(0.0, kappa, (d, m))
    a = rng.choice([-1.0, 1.0], size=m)
    return TwoLayerNet(W, a, kappa)


def normalize_inputs(X) -> np.ndarray:
    """Scale every row to unit Euclidean norm."""
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero input vector cannot be normalized")
    return X / norms


def two_layer_forward(net: TwoLayerNet, x) -> np.ndarray | float:
    x = np.asarray(x, dtype=np.float64)
    f = np.maximum(x @ net.W, 0.0) @ net.a / math.sqrt(net.m)
    return float(f) if np.ndim(f) == 0 else f


def two_layer_loss(net: TwoLayerNet, X, y) -> float:
    r = np.asarray(y, dtype=np.float64) - two_layer_forward(net, X)
    return 0.5 * float(np.sum(r * r))


def two_layer_grad(net: TwoLayerNet, X, y) -> np.ndarray:
    """Gradient of ``0.5 sum (y - f)^2`` in ``W`` (relu'(0) taken as 0)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    r = y - two_layer_forward(net, X)
    act = (X @ net.W > 0).astype(np.float64)  # n, m
    return -(X.T @ (r[:, None] * act)) * net.a[None, :] / math.sqrt(net.m)


def two_layer_gd_step(net: TwoLayerNet, X, y, lr: float) -> TwoLayerNet:
    y = np.asarray(y, dtype=np.float64)
    if np.any(np.abs(y) > 1):
        raise ValueError("targets must satisfy |y| <= 1")
    return TwoLayerNet(net.W - lr * two_layer_grad(net, X, y), net.a.copy(), net.kappa)


# --- Langevin / OU synaptic sampling ---------------------------------------

@dataclass
class OuProcessSpec:
    log_density_gradient: Callable
    learning_rate: float = 0.1
    temperature: float = 1.0
    dt: float = 0.01
    steps: int = 100_000

    def __post_init__(self):
        if self.learning_rate <= 0 or self.dt <= 0:
            raise ValueError("learning_rate and dt must be > 0")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def gaussian_log_density_gradient(theta):
    """``d/dtheta log N(0, I) = -theta``."""
    return -np.asarray(theta)


def simulate_ou_sampling(spec: OuProcessSpec, theta0, rng: np.random.Generator) -> np.ndarray:
    """Euler-Maruyama path of ``dtheta = b grad log p* dt + sqrt(2 T b) dW``.

    Returns ``[steps + 1, *theta0.shape]`` including the start.  For the
    Gaussian target keep ``dt <= 0.1 / b``.
    """
    theta = np.array(theta0, dtype=np.float64)
    b, dt = spec.learning_rate, spec.dt
    noise = math.sqrt(2.0 * spec.temperature * b * dt)
    out = np.empty((spec.steps + 1, *theta.shape))
    out[0] = theta
    xi = rng.standard_normal((spec.steps, *theta.shape)) if noise > 0 else None
    for k in range(spec.steps):
        theta = theta + b * np.asarray(spec.log_density_gradient(theta)) * dt
        if xi is not None:
            theta = theta + noise * xi[k]
        out[k + 1] = theta
    return out
