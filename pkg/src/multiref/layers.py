"""Transformer building blocks shared by the encoder, denoiser and probes."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import (
    Module,
    Parameter,
    Tensor,
    attention,
    gelu,
    layernorm,
    matmul,
)


def init_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, std: float | None = None):
        std = 1.0 / math.sqrt(d_in) if std is None else std
        self.w = Parameter(init_normal(rng, (d_in, d_out), std))
        self.b = Parameter(np.zeros(d_out)) if bias else None
        self.d_in = d_in
        self.d_out = d_out

    @classmethod
    def from_params(cls, w: Parameter, b: Parameter | None) -> "Linear":
        layer = cls.__new__(cls)
        layer.w, layer.b = w, b
        layer.d_in, layer.d_out = w.shape
        return layer

    def weight_matrix(self) -> np.ndarray:
        """Current effective (d_in, d_out) weight."""
        return self.w.data

    def forward(self, x: Tensor) -> Tensor:
        y = matmul(x, self.w)
        return y + self.b if self.b is not None else y


class LoraLinear(Linear):
    """``x W + b + scale * x A^T B^T`` with ``A: r x d_in`` and ``B: d_out x r``.

    The wrapped layer keeps its original ``w``/``b`` parameters (and names);
    ``B`` starts at zero so a fresh wrap leaves outputs unchanged.
    """

    def __init__(self, w: Parameter, b: Parameter | None, rank: int,
                 rng: np.random.Generator, alpha: float | None = None):
        if rank < 1:
            raise ValueError(f"LoRA rank must be >= 1, got {rank}")
        self.w = w
        self.b = b
        self.d_in, self.d_out = w.shape
        self.lora = _LoraFactors(self.d_in, self.d_out, rank, rng, w.dtype)
        self.scale = (alpha if alpha is not None else rank) / rank

    @classmethod
    def wrap(cls, base: Linear, rank: int, rng: np.random.Generator,
             alpha: float | None = None) -> "LoraLinear":
        return cls(base.w, base.b, rank, rng, alpha)

    def weight_matrix(self) -> np.ndarray:
        return self.w.data + self.scale * (self.lora.b.data @ self.lora.a.data).T

    def forward(self, x: Tensor) -> Tensor:
        y = super().forward(x)
        return y + matmul(matmul(x, self.lora.a.T), self.lora.b.T) * self.scale

    def merged(self) -> Linear:
        self.w.data = self.weight_matrix().astype(self.w.dtype)
        return Linear.from_params(self.w, self.b)


class _LoraFactors(Module):
    def __init__(self, d_in: int, d_out: int, rank: int, rng: np.random.Generator, dtype):
        self.a = Parameter(init_normal(rng, (rank, d_in), 1.0 / math.sqrt(d_in)), dtype=dtype)
        self.b = Parameter(np.zeros((d_out, rank)), dtype=dtype)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layernorm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator,
                 out_std: float | None = None):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng, std=out_std)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


def split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, length, dim = x.shape
    return x.reshape(*lead, length, heads, dim // heads).swapaxes(-2, -3)


def merge_heads(x: Tensor) -> Tensor:
    *lead, heads, length, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, length, heads * dh)


class MultiHeadAttention(Module):
    """Multi-head attention; self-attention when ``context`` is omitted."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 kv_dim: int | None = None, out_std: float | None = None):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        kv_dim = dim if kv_dim is None else kv_dim
        self.heads = heads
        self.wq = Linear(dim, dim, rng, bias=False)
        self.wk = Linear(kv_dim, dim, rng, bias=False)
        self.wv = Linear(kv_dim, dim, rng, bias=False)
        self.wo = Linear(dim, dim, rng, std=out_std)

    def forward(self, x: Tensor, context: Tensor | None = None, mask=None) -> Tensor:
        context = x if context is None else context
        q = split_heads(self.wq(x), self.heads)
        k = split_heads(self.wk(context), self.heads)
        v = split_heads(self.wv(context), self.heads)
        return self.wo(merge_heads(attention(q, k, v, mask)))


class TransformerBlock(Module):
    """Pre-layernorm self-attention + MLP block with residuals."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio * dim, dim, rng)

    def forward(self, x: Tensor, mask=None) -> Tensor:
        x = x + self.attn(self.ln1(x), mask=mask)
        return x + self.mlp(self.ln2(x))


def sinusoidal(positions, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed sin/cos features of shape ``(len(positions), dim)``."""
    positions = np.asarray(positions, dtype=np.float64)[:, None]
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    angles = positions * freqs[None, :]
    out = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if dim % 2:
        out = np.concatenate([out, np.zeros((len(out), 1))], axis=1)
    return out.astype(dtype)
