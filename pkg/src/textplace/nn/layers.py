"""Parameterized building blocks: linear, layer norm, attention, Transformer block, conv."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor

# additive bias for masked attention keys; exp() underflows to exactly 0
MASK_VALUE = -1e30


class Module:
    """Parameter container. Parameters are :class:`Tensor` attributes with ``requires_grad``."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch; missing={sorted(missing)}, unexpected={sorted(unexpected)}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.copy()


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return ag.parameter(rng.uniform(-bound, bound, size=shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = uniform_init(rng, (d_in, d_out), d_in)
        self.bias = uniform_init(rng, (d_out,), d_in)

    def __call__(self, x) -> Tensor:
        return ag.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = ag.parameter(np.ones(d))
        self.bias = ag.parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadSelfAttention(Module):
    """Unmasked scaled dot-product self-attention over a set of tokens.

    ``head_dim`` defaults to ``d_model // heads``.
    """

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, head_dim: int | None = None):
        if head_dim is None:
            if d_model % heads:
                raise ValueError(f"d_model {d_model} not divisible by heads {heads}")
            head_dim = d_model // heads
        self.heads = heads
        self.head_dim = head_dim
        inner = heads * head_dim
        self.q = Linear(d_model, inner, rng)
        self.k = Linear(d_model, inner, rng)
        self.v = Linear(d_model, inner, rng)
        self.out = Linear(inner, d_model, rng)

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        """``x``: (B, T, d) or (T, d). ``key_mask``: (B, T) bool, False marks padding."""
        squeeze = x.ndim == 2
        if squeeze:
            x = ag.reshape(x, (1,) + x.shape)
        b, t, _ = x.shape

        def split(z: Tensor) -> Tensor:
            return ag.transpose(ag.reshape(z, (b, t, self.heads, self.head_dim)), (0, 2, 1, 3))

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(self.head_dim))
        if key_mask is not None:
            bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, MASK_VALUE)[:, None, None, :]
            scores = scores + bias
        weights = ag.softmax(scores, axis=-1)
        ctx = ag.reshape(ag.transpose(ag.matmul(weights, v), (0, 2, 1, 3)), (b, t, self.heads * self.head_dim))
        y = self.out(ctx)
        return ag.reshape(y, y.shape[1:]) if squeeze else y


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        self.up = Linear(d_model, d_ff, rng)
        self.down = Linear(d_ff, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(ag.gelu(self.up(x)))


class TransformerBlock(Module):
    """Pre-norm encoder block: ``x + attn(norm(x))`` then ``x + ffn(norm(x))``."""

    def __init__(self, d_model: int, heads: int, d_ff: int, rng: np.random.Generator,
                 head_dim: int | None = None):
        self.norm1 = LayerNorm(d_model)
        self.attn = MultiHeadSelfAttention(d_model, heads, rng, head_dim)
        self.norm2 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_ff, rng)

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.norm1(x), key_mask)
        return x + self.ffn(self.norm2(x))


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        fan_in = c_in * kernel * kernel
        self.weight = uniform_init(rng, (c_out, c_in, kernel, kernel), fan_in)
        self.bias = uniform_init(rng, (c_out,), fan_in)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ag.conv2d(x, self.weight, self.bias, self.stride, self.padding)


def multi_head_self_attention(x, heads: int, params: MultiHeadSelfAttention) -> Tensor:
    if params.heads != heads:
        raise ValueError(f"params built for {params.heads} heads, got {heads}")
    return params(ag.as_tensor(x))
