"""Patch-token transformer denoiser with decoupled image cross-attention.

Each block runs self-attention over image patches, then a cross-attention
whose query is shared between a text branch (keys/values from ``c_t``) and
an optional image branch (keys/values from ``c_i`` through the adapter
projections), then an MLP.
"""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass

import numpy as np

from .autodiff import Module, Parameter, ShapeError, Tensor, attention
from .images import patchify
from .layers import (
    LayerNorm,
    Linear,
    LoraLinear,
    MLP,
    MultiHeadAttention,
    init_normal,
    merge_heads,
    sinusoidal,
    split_heads,
)

DEFAULT_LORA_TARGETS = (
    "attn.wq", "attn.wk", "attn.wv", "attn.wo",
    "xattn.wq", "xattn.wk", "xattn.wv", "xattn.wo",
)


@dataclass(frozen=True)
class DenoiserConfig:
    blocks: int = 4
    dim: int = 64
    heads: int = 4
    patch: int = 2
    channels: int = 3
    max_side: int = 32
    time_dim: int = 64
    cond_dim: int = 64
    mlp_ratio: int = 4
    image_scale: float = 1.0
    seed: int = 1

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.max_side % self.patch:
            raise ValueError("max_side must be a multiple of patch")


class AdapterProjections(Module):
    """The image-branch key/value projections; zero at installation."""

    def __init__(self, cond_dim: int, dim: int, dtype=None):
        self.wk = Linear.from_params(Parameter(np.zeros((cond_dim, dim)), dtype=dtype), None)
        self.wv = Linear.from_params(Parameter(np.zeros((cond_dim, dim)), dtype=dtype), None)


class DecoupledCrossAttention(Module):
    def __init__(self, dim: int, cond_dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.cond_dim = cond_dim
        self.wq = Linear(dim, dim, rng, bias=False)
        self.wk = Linear(cond_dim, dim, rng, bias=False)
        self.wv = Linear(cond_dim, dim, rng, bias=False)
        self.wo = Linear(dim, dim, rng)
        self.adapter: AdapterProjections | None = None
        self.image_scale = 1.0

    def branches(self, x: Tensor, c_t: Tensor, c_i: Tensor | None):
        """Per-branch attention outputs (heads merged, before ``wo``)."""
        for name, c in (("c_t", c_t), ("c_i", c_i)):
            if c is not None and c.shape[-1] != self.cond_dim:
                raise ShapeError(f"{name} width {c.shape[-1]} != condition width {self.cond_dim}")
        q = split_heads(self.wq(x), self.heads)
        text = attention(q, split_heads(self.wk(c_t), self.heads),
                         split_heads(self.wv(c_t), self.heads))
        image = None
        if self.adapter is not None and c_i is not None:
            image = attention(q, split_heads(self.adapter.wk(c_i), self.heads),
                              split_heads(self.adapter.wv(c_i), self.heads))
        return merge_heads(text), None if image is None else merge_heads(image)

    def forward(self, x: Tensor, c_t: Tensor, c_i: Tensor | None = None) -> Tensor:
        text, image = self.branches(x, c_t, c_i)
        if image is not None:
            text = text + (image if self.image_scale == 1.0 else image * self.image_scale)
        return self.wo(text)


def inject(x: Tensor, c_t: Tensor, c_i: Tensor | None, layer: DecoupledCrossAttention) -> Tensor:
    """Residual decoupled cross-attention update of the latent tokens ``x``."""
    return x + layer(x, c_t, c_i)


class DenoiserBlock(Module):
    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator):
        self.ln1 = LayerNorm(cfg.dim)
        self.attn = MultiHeadAttention(cfg.dim, cfg.heads, rng)
        self.ln2 = LayerNorm(cfg.dim)
        self.xattn = DecoupledCrossAttention(cfg.dim, cfg.cond_dim, cfg.heads, rng)
        self.ln3 = LayerNorm(cfg.dim)
        self.mlp = MLP(cfg.dim, cfg.mlp_ratio * cfg.dim, cfg.dim, rng)

    def forward(self, x: Tensor, c_t: Tensor, c_i: Tensor | None) -> Tensor:
        x = x + self.attn(self.ln1(x))
        x = x + self.xattn(self.ln2(x), c_t, c_i)
        return x + self.mlp(self.ln3(x))


class Denoiser(Module):
    """Noise predictor ``eps(x_t, t, c_t, c_i)`` over ``(B, H, W, C)`` images."""

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig(), rng: np.random.Generator | None = None):
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        self.cfg = cfg
        patch_dim = cfg.patch * cfg.patch * cfg.channels
        grid = cfg.max_side // cfg.patch
        self.patch_in = Linear(patch_dim, cfg.dim, rng)
        self.pos = Parameter(init_normal(rng, (grid, grid, cfg.dim), 0.02))
        self.time_mlp = MLP(cfg.time_dim, 4 * cfg.dim, cfg.dim, rng)
        self.blocks = [DenoiserBlock(cfg, rng) for _ in range(cfg.blocks)]
        self.ln_out = LayerNorm(cfg.dim)
        self.out = Linear(cfg.dim, patch_dim, rng, std=0.0)
        for block in self.blocks:
            block.xattn.image_scale = cfg.image_scale

    @property
    def has_adapters(self) -> bool:
        return any(b.xattn.adapter is not None for b in self.blocks)

    def forward(self, x_t, t, c_t: Tensor, c_i: Tensor | None = None) -> Tensor:
        cfg = self.cfg
        x_t = np.asarray(x_t.data if isinstance(x_t, Tensor) else x_t)
        if x_t.ndim == 3:
            x_t = x_t[None]
        b, h, w, c = x_t.shape
        p = cfg.patch
        gh, gw = h // p, w // p
        dtype = self.patch_in.w.dtype
        tokens = Tensor(patchify(x_t, p), dtype=dtype)
        x = self.patch_in(tokens) + self.pos[:gh, :gw].reshape(gh * gw, cfg.dim)
        t = np.broadcast_to(np.asarray(t), (b,))
        temb = self.time_mlp(Tensor(sinusoidal(t, cfg.time_dim, dtype), dtype=dtype))
        x = x + temb.reshape(b, 1, cfg.dim)
        for block in self.blocks:
            x = block(x, c_t, c_i)
        out = self.out(self.ln_out(x))
        out = out.reshape(b, gh, gw, p, p, c).transpose(0, 1, 3, 2, 4, 5)
        return out.reshape(b, h, w, c)


def install_adapters(model: Denoiser) -> Denoiser:
    """Give every cross-attention layer zero-initialised image projections."""
    if model.has_adapters:
        raise RuntimeError("adapters are already installed")
    for block in model.blocks:
        block.xattn.adapter = AdapterProjections(model.cfg.cond_dim, model.cfg.dim,
                                                 dtype=model.patch_in.w.dtype)
    return model


def _target_layers(model: Denoiser, targets):
    found = []
    for i, block in enumerate(model.blocks):
        for target in targets:
            owner_name, attr = target.split(".")
            owner = getattr(block, owner_name, None)
            if owner is None or not isinstance(getattr(owner, attr, None), Linear):
                raise KeyError(f"unknown LoRA target {target!r}")
            found.append((owner, attr))
    return found


def lora_wrap(model: Denoiser, rank: int = 32, targets=DEFAULT_LORA_TARGETS,
              rng: np.random.Generator | None = None, alpha: float | None = None) -> Denoiser:
    """Wrap the named attention projections as ``W + scale * B A`` with ``B = 0``."""
    rng = np.random.default_rng(model.cfg.seed + 1000) if rng is None else rng
    layers = _target_layers(model, targets)
    for owner, attr in layers:
        if isinstance(getattr(owner, attr), LoraLinear):
            raise RuntimeError(f"{attr} is already LoRA-wrapped")
    for owner, attr in layers:
        setattr(owner, attr, LoraLinear.wrap(getattr(owner, attr), rank, rng, alpha))
    return model


def lora_merge(model: Denoiser) -> Denoiser:
    """Fold every LoRA update into its base weight and drop the wrappers."""
    for block in model.blocks:
        for owner in (block.attn, block.xattn):
            for attr in ("wq", "wk", "wv", "wo"):
                layer = getattr(owner, attr)
                if isinstance(layer, LoraLinear):
                    setattr(owner, attr, layer.merged())
    return model


def has_lora(model: Module) -> bool:
    return any(fnmatch.fnmatchcase(name, "*.lora.*") for name, _ in model.named_parameters())
