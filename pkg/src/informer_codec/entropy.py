"""Probability models for the latent and the hyperpriors, plus CMF tables for coding."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special

from . import tensor as T
from .layers import Module, param
from .tensor import Tensor

LIKELIHOOD_FLOOR = 2.0 ** -64
SCALE_LOWER_BOUND = 0.11
PRECISION_BITS = 16

_INV_SQRT2 = 1.0 / math.sqrt(2.0)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(x: Tensor, mode: str, rng: Optional[T.RngState] = None) -> Tensor:
    """``train_noise`` adds U(-1/2, 1/2) noise; ``eval_round`` rounds half away from zero.

    The noise sample is a constant, so gradients flow only into ``x``.
    """
    if mode == "train_noise":
        if rng is None:
            raise ValueError("train_noise needs an RngState")
        noise = rng.uniform(-0.5, 0.5, x.shape, dtype=x.dtype)
        return x + Tensor(noise)
    if mode == "eval_round":
        return Tensor(round_half_away(x.data))
    raise ValueError(f"unknown quantizer mode {mode!r}")


def rate_bits(likelihoods: Tensor) -> Tensor:
    """Total ``-log2`` of the likelihoods, as a scalar tensor."""
    if np.any(likelihoods.data <= 0) or np.any(likelihoods.data > 1 + 1e-12):
        raise ValueError("likelihoods must lie in (0, 1]")
    return -(T.log(likelihoods).sum() * (1.0 / math.log(2.0)))


@dataclass
class GaussianConditional:
    """Gaussian convolved with a unit uniform, evaluated on integer bins."""

    scale_lower_bound: float = SCALE_LOWER_BOUND
    tail_mass: float = 1e-9

    def lower_bound(self, sigma: Tensor) -> Tensor:
        return T.clamp_min(sigma, self.scale_lower_bound)

    def likelihood(self, v: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
        return gaussian_likelihood(v, mu, self.lower_bound(sigma))


def gaussian_likelihood(v: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """``Phi((v + 1/2 - mu) / sigma) - Phi((v - 1/2 - mu) / sigma)``, floored at 2**-64.

    Both terms are taken on the upper tail via erfc so far-out bins keep
    their relative precision.
    """
    if np.any(sigma.data <= 0):
        raise ValueError("sigma must be positive")
    dist = T.absolute(T.sub(v, mu))
    inv = (1.0 / sigma) * _INV_SQRT2
    upper = T.erfc((dist - 0.5) * inv)
    lower = T.erfc((dist + 0.5) * inv)
    return T.clamp_min((upper - lower) * 0.5, LIKELIHOOD_FLOOR)


def gaussian_pmf(values: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Numpy twin of :func:`gaussian_likelihood` without the floor (for tables and oracles)."""
    dist = np.abs(values - mu)
    return 0.5 * (special.erfc((dist - 0.5) * _INV_SQRT2 / sigma)
                  - special.erfc((dist + 0.5) * _INV_SQRT2 / sigma))


class FactorizedPrior(Module):
    """Per-channel learned univariate CDF built from monotone stages.

    Each stage is ``x <- softplus(H) x + b`` followed (except the last) by
    ``x <- x + tanh(a) tanh(x)``; the CDF is ``sigmoid`` of the final value.
    Channels are stored along the leading parameter axis.
    """

    def __init__(self, channels: int, rng: T.RngState, filters=(3, 3, 3), init_scale: float = 1.0,
                 dtype=np.float64):
        self.channels = channels
        dims = (1,) + tuple(filters) + (1,)
        scale = init_scale ** (1.0 / len(dims[:-1]))
        self.matrices, self.biases, self.factors = [], [], []
        for i in range(len(dims) - 1):
            fo, fi = dims[i + 1], dims[i]
            init = math.log(math.expm1(1.0 / scale / fo))
            self.matrices.append(param(np.full((channels, fo, fi), init), dtype))
            self.biases.append(param(rng.uniform(-0.5, 0.5, (channels, fo, 1)), dtype))
            if i < len(dims) - 2:
                self.factors.append(param(np.zeros((channels, fo, 1)), dtype))

    def logits(self, v: Tensor, channel: Optional[int] = None) -> Tensor:
        """CDF logits for values whose last axis indexes channels.

        With ``channel`` given, every element of ``v`` belongs to that channel.
        """
        if channel is None:
            if v.shape[-1] != self.channels:
                raise ValueError(f"expected {self.channels} channels, got {v.shape[-1]}")
            sel, ch = slice(None), self.channels
        else:
            sel, ch = slice(channel, channel + 1), 1
        shape = v.shape
        x = v.reshape(-1, ch).transpose().reshape(ch, 1, -1)
        for i, (m, b) in enumerate(zip(self.matrices, self.biases)):
            x = T.softplus(m[sel]) @ x + b[sel]
            if i < len(self.factors):
                x = x + T.tanh(self.factors[i][sel]) * T.tanh(x)
        return x.reshape(ch, -1).transpose().reshape(shape)

    def cdf(self, v: Tensor) -> Tensor:
        return T.sigmoid(self.logits(v))

    def likelihood(self, v: Tensor, channel: Optional[int] = None) -> Tensor:
        v = v.reshape(1, *v.shape)
        both = self.logits(T.concat([v - 0.5, v + 0.5], axis=0), channel)
        lower, upper = both[0], both[1]
        # evaluate on the side of the sigmoid where the difference is well conditioned
        sign = Tensor(-np.sign(lower.data + upper.data))
        diff = T.sigmoid(sign * upper) - T.sigmoid(sign * lower)
        return T.clamp_min(T.absolute(diff), LIKELIHOOD_FLOOR)

    def cdf_numpy(self, values: np.ndarray) -> np.ndarray:
        """CDF at ``values`` (shape ``[M]``) for every channel, as ``[M, channels]``."""
        with T.no_grad():
            grid = np.repeat(np.asarray(values, dtype=np.float64)[:, None], self.channels, axis=1)
            return self.cdf(Tensor(grid.astype(self.matrices[0].dtype))).data.astype(np.float64)


def factorized_likelihood(v: Tensor, model: FactorizedPrior, channel: Optional[int] = None) -> Tensor:
    """Bin likelihoods of ``v`` under ``model``.

    With ``channel`` given, ``v`` holds values of that single channel only.
    """
    return model.likelihood(v, channel)


# -- CMF tables -------------------------------------------------------------------

@dataclass(frozen=True)
class CmfTable:
    """Integer frequencies for the symbols ``v_min .. v_max`` summing to ``2**precision_bits``."""

    v_min: int
    freqs: np.ndarray
    precision_bits: int = PRECISION_BITS

    @property
    def v_max(self) -> int:
        return self.v_min + len(self.freqs) - 1

    @property
    def cumulative(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.freqs)])

    def probability(self, symbol: int) -> float:
        return int(self.freqs[symbol - self.v_min]) / float(1 << self.precision_bits)


def quantize_pmf(pmf: np.ndarray, precision_bits: int = PRECISION_BITS) -> np.ndarray:
    """Integer frequencies for the rows of ``pmf`` (shape ``[..., n]``).

    Every symbol gets 1 plus the floor of its share of the remaining mass;
    the leftover units go one each to the most probable symbols, ties by index.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    n = pmf.shape[-1]
    total = 1 << precision_bits
    if n > total:
        raise ValueError(f"alphabet of {n} symbols exceeds 2**{precision_bits}")
    pmf = np.clip(pmf, 0.0, None)
    sums = pmf.sum(axis=-1, keepdims=True)
    if np.any(sums <= 0):
        raise ValueError("probability mass over the alphabet is zero")
    pmf = pmf / sums
    freqs = 1 + np.floor(pmf * (total - n)).astype(np.int64)
    remainder = total - freqs.sum(axis=-1)
    order = np.argsort(-pmf, axis=-1, kind="stable")
    ranks = np.argsort(order, axis=-1)
    freqs += ranks < remainder[..., None]
    return freqs


def gaussian_bin_masses(mu, sigma, v_min: int, v_max: int) -> np.ndarray:
    """Masses of ``v_min .. v_max`` with the first and last bins absorbing the tails.

    ``mu`` and ``sigma`` may be arrays; the result has shape ``mu.shape + (n,)``.
    """
    mu = np.asarray(mu, dtype=np.float64)[..., None]
    sigma = np.asarray(sigma, dtype=np.float64)[..., None]
    values = np.arange(v_min, v_max + 1, dtype=np.float64)
    pmf = np.array(gaussian_pmf(values, mu, sigma))
    # tails: P(V < v_min + 1/2) and P(V >= v_max - 1/2)
    low_tail = 0.5 * special.erfc((mu - (v_min + 0.5)) * _INV_SQRT2 / sigma)
    high_tail = 0.5 * special.erfc(((v_max - 0.5) - mu) * _INV_SQRT2 / sigma)
    pmf[..., 0] = low_tail[..., 0]
    if v_max > v_min:
        pmf[..., -1] = high_tail[..., 0]
    else:
        pmf[..., 0] = 1.0
    return pmf


def factorized_bin_masses(model: FactorizedPrior, v_min: int, v_max: int) -> np.ndarray:
    """Per-channel masses ``[channels, n]`` with tail-absorbing edge bins."""
    if v_max == v_min:
        return np.ones((model.channels, 1))
    edges = np.arange(v_min, v_max, dtype=np.float64) + 0.5
    cdf = model.cdf_numpy(edges).T  # [channels, n-1]
    lead = np.zeros((model.channels, 1))
    tail = np.ones((model.channels, 1))
    return np.diff(np.concatenate([lead, cdf, tail], axis=1), axis=1)


def build_cmf(mu: float, sigma: float, model_kind: str, alphabet: tuple,
              precision_bits: int = PRECISION_BITS, model: Optional[FactorizedPrior] = None,
              channel: int = 0) -> CmfTable:
    """CMF table for one symbol over the inclusive ``alphabet``.

    ``model_kind`` is ``"gaussian"`` (uses ``mu``/``sigma``) or
    ``"factorized"`` (uses ``model`` and ``channel``).
    """
    v_min, v_max = int(alphabet[0]), int(alphabet[1])
    if v_min > v_max:
        raise ValueError("alphabet lower bound exceeds upper bound")
    if v_max - v_min + 1 > (1 << precision_bits):
        raise ValueError("alphabet too large for the frequency precision")
    if model_kind == "gaussian":
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        masses = gaussian_bin_masses(mu, sigma, v_min, v_max)
    elif model_kind == "factorized":
        if model is None:
            raise ValueError("factorized CMF needs a model")
        masses = factorized_bin_masses(model, v_min, v_max)[channel]
    else:
        raise ValueError(f"unknown model kind {model_kind!r}")
    return CmfTable(v_min, quantize_pmf(masses, precision_bits), precision_bits)
