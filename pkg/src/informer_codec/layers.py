"""Neural network building blocks on top of :mod:`informer_codec.tensor`."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

BETA_MIN = 1e-6
LEAKY_SLOPE = 0.01


class Module:
    """Container that discovers parameters and submodules by attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Tensor) and item.requires_grad:
                        yield f"{prefix}{key}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def param(data: np.ndarray, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def _uniform_init(rng: T.RngState, shape, fan_in: int, dtype, gain: float = 1.0) -> Tensor:
    bound = gain / math.sqrt(fan_in)
    return param(rng.uniform(-bound, bound, shape), dtype)


class Linear(Module):
    """Affine map over the last axis; also serves as a 1x1 convolution."""

    def __init__(self, in_dim: int, out_dim: int, rng: T.RngState, dtype=np.float64, gain: float = 1.0):
        self.weight = _uniform_init(rng, (in_dim, out_dim), in_dim, dtype, gain)
        self.bias = param(np.zeros(out_dim), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: T.RngState, stride: int = 1,
                 padding=0, dtype=np.float64, mask: Optional[np.ndarray] = None, gain: float = 1.0):
        fan_in = kernel * kernel * in_ch
        if mask is not None:
            fan_in = max(1, int(mask.sum()) * in_ch)
        self.weight = _uniform_init(rng, (kernel, kernel, in_ch, out_ch), fan_in, dtype, gain)
        self.bias = param(np.zeros(out_ch), dtype)
        self.stride = stride
        self.padding = padding
        self.mask = mask

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.mask)


class ConvTranspose2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: T.RngState, stride: int = 2,
                 padding: int = 2, output_padding: int = 1, dtype=np.float64, gain: float = 1.0):
        # each output pixel receives about k*k*in_ch/stride**2 taps
        fan_in = max(1, kernel * kernel * in_ch // (stride * stride))
        self.weight = _uniform_init(rng, (kernel, kernel, in_ch, out_ch), fan_in, dtype, gain)
        self.bias = param(np.zeros(out_ch), dtype)
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding,
                                  self.output_padding)


def causal_mask(kernel: int) -> np.ndarray:
    """1 at taps strictly before the centre in raster order, 0 elsewhere."""
    mask = np.zeros((kernel, kernel))
    c = kernel // 2
    mask[:c, :] = 1.0
    mask[c, :c] = 1.0
    return mask


class MaskedConv2d(Conv2d):
    """5x5 causal convolution used as the autoregressive context model."""

    def __init__(self, in_ch: int, out_ch: int, rng: T.RngState, kernel: int = 5, dtype=np.float64):
        super().__init__(in_ch, out_ch, kernel, rng, stride=1, padding=kernel // 2, dtype=dtype,
                         mask=causal_mask(kernel))

    def at_position(self, y: np.ndarray, h: int, w: int) -> Tensor:
        """Output at a single position of an ``[H, W, C]`` array, shape ``[1, Cout]``.

        Uses the already-masked kernel so taps at or after ``(h, w)`` are ignored.
        """
        k = self.weight.shape[0]
        r = k // 2
        H, W, C = y.shape
        window = np.zeros((k, k, C), dtype=y.dtype)
        h0, h1 = max(0, h - r), min(H, h + r + 1)
        w0, w1 = max(0, w - r), min(W, w + r + 1)
        window[h0 - h + r:h1 - h + r, w0 - w + r:w1 - w + r] = y[h0:h1, w0:w1]
        kern = self.weight * Tensor(self.mask[:, :, None, None].astype(self.weight.dtype))
        flat = Tensor(window.reshape(1, -1))
        return flat @ kern.reshape(k * k * C, -1) + self.bias


class GDN(Module):
    """Generalized divisive normalization, or its inverse when ``inverse=True``.

    ``out_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)``; the inverse multiplies.
    """

    def __init__(self, channels: int, inverse: bool = False, dtype=np.float64):
        self.beta = param(np.ones(channels), dtype)
        self.gamma = param(0.1 * np.eye(channels), dtype)
        self.inverse = inverse

    def __call__(self, x: Tensor) -> Tensor:
        if np.any(self.beta.data <= 0):
            raise RuntimeError("GDN beta must stay positive; call project() after each step")
        norm = T.sqrt(T.square(x) @ self.gamma.transpose() + self.beta)
        return x * norm if self.inverse else x / norm

    def project(self) -> None:
        np.maximum(self.beta.data, BETA_MIN, out=self.beta.data)
        np.maximum(self.gamma.data, 0.0, out=self.gamma.data)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float64):
        self.scale = param(np.ones(dim), dtype)
        self.shift = param(np.zeros(dim), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        centred = x - x.mean(axis=-1, keepdims=True)
        var = T.square(centred).mean(axis=-1, keepdims=True)
        return centred / T.sqrt(var + self.eps) * self.scale + self.shift


class MultiHeadAttention(Module):
    """Scaled dot-product attention with ``num_heads`` heads over ``[..., L, D]`` inputs."""

    def __init__(self, dim: int, num_heads: int, rng: T.RngState, dtype=np.float64):
        if dim % num_heads:
            raise ValueError(f"model dim {dim} is not divisible by {num_heads} heads")
        self.q_proj = Linear(dim, dim, rng, dtype)
        self.k_proj = Linear(dim, dim, rng, dtype)
        self.v_proj = Linear(dim, dim, rng, dtype)
        self.o_proj = Linear(dim, dim, rng, dtype)
        self.dim = dim
        self.num_heads = num_heads

    def _split(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        d = self.dim // self.num_heads
        return x.reshape(*lead, self.num_heads, d).swapaxes(-3, -2)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None,
                 return_weights: bool = False):
        if k.shape[-2] == 0:
            raise ValueError("attention needs at least one key")
        if q.shape[-1] != self.dim or k.shape[-1] != self.dim or v.shape[-1] != self.dim:
            raise ValueError("attention inputs must have the model dimension")
        d = self.dim // self.num_heads
        qh = self._split(self.q_proj(q))
        kh = self._split(self.k_proj(k))
        vh = self._split(self.v_proj(v))
        scores = (qh @ kh.swapaxes(-1, -2)) * (1.0 / math.sqrt(d))
        if mask is not None:
            scores = scores + Tensor(np.asarray(mask, dtype=scores.dtype))
        weights = T.softmax(scores, axis=-1)
        ctx = (weights @ vh).swapaxes(-3, -2)
        ctx = ctx.reshape(*ctx.shape[:-2], self.dim)
        out = self.o_proj(ctx)
        if mask is not None:
            # queries with no admissible key contribute nothing
            valid = (np.asarray(mask) > -1e8).any(axis=-1, keepdims=True)
            if not valid.all():
                out = out * Tensor(valid.astype(out.dtype))
        return (out, weights) if return_weights else out


class Mlp(Module):
    """Two affine layers with a leaky ReLU between."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, rng: T.RngState, dtype=np.float64):
        self.fc1 = Linear(in_dim, hidden_dim, rng, dtype)
        self.fc2 = Linear(hidden_dim, out_dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.leaky_relu(self.fc1(x), LEAKY_SLOPE))


class MlpBlock(Module):
    """Pre-norm residual MLP: ``x + MLP(LN(x))``."""

    def __init__(self, dim: int, rng: T.RngState, hidden_dim: Optional[int] = None, dtype=np.float64):
        self.norm = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(dim, hidden_dim or 2 * dim, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.mlp(self.norm(x))


class AttentionBlock(Module):
    """Pre-norm residual attention: ``x + MHA(LN(x), LN'(kv), LN'(kv))``.

    With ``self_attention=True`` one norm serves queries and keys/values.
    """

    def __init__(self, dim: int, num_heads: int, rng: T.RngState, self_attention: bool = False,
                 dtype=np.float64):
        self.norm_q = LayerNorm(dim, dtype=dtype)
        self.norm_kv = None if self_attention else LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadAttention(dim, num_heads, rng, dtype)

    def norm_keys(self, kv: Tensor) -> Tensor:
        return (self.norm_kv or self.norm_q)(kv)

    def __call__(self, x: Tensor, kv: Optional[Tensor] = None, mask: Optional[np.ndarray] = None) -> Tensor:
        xn = self.norm_q(x)
        kvn = xn if kv is None else self.norm_keys(kv)
        return x + self.attn(xn, kvn, kvn, mask)
