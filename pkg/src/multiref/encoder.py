"""Miniature multimodal encoder with learned reference-token aggregation.

Reference images and an optional prompt are laid out in one instruction
sequence, passed through causal context blocks, and summarised by ``N``
learned reference tokens appended before the last aggregation block(s),
which attend bi-directionally.  The updated reference rows are projected
to the condition width and become the image condition ``c_i``.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Module,
    Parameter,
    ShapeError,
    Tensor,
    causal_mask,
    concat,
    stack,
)
from .images import fit_to_cap, patchify
from .layers import LayerNorm, MLP, TransformerBlock, init_normal, sinusoidal

SEGMENT_IDS = {"instruction": 0, "image": 1, "prompt": 2}
_CHAR_OFFSET = 31  # printable ASCII 32..126 -> ids 1..95; 0 is UNK
VOCAB_SIZE = 96


def char_ids(text: str) -> np.ndarray:
    codes = np.frombuffer(text.encode("utf-32-le"), dtype=np.uint32).astype(np.int64)
    ids = codes - _CHAR_OFFSET
    ids[(codes < 32) | (codes > 126)] = 0
    return ids


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 4
    dim: int = 64
    heads: int = 4
    patch: int = 4
    max_image_side: int = 32
    text_cap: int = 128
    num_ref_tokens: int = 64
    cond_dim: int = 64
    max_refs: int = 28
    instruction: str = "Describe the common elements of these images:"
    instruction_suffix: str = ""
    use_instruction: bool = True
    use_prompt: bool = True
    # number of final blocks that see the reference tokens (1 = last layer only)
    ref_insert_depth: int = 1
    # "full": every token attends everywhere in aggregation blocks;
    # "refs_only": context rows stay causal and never see reference rows
    bidirectional: str = "full"
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.max_image_side % self.patch:
            raise ValueError("max_image_side must be a multiple of patch")
        if not 1 <= self.ref_insert_depth <= self.layers:
            raise ValueError("ref_insert_depth must lie in [1, layers]")
        if self.bidirectional not in ("full", "refs_only"):
            raise ValueError(f"unknown bidirectional mode {self.bidirectional!r}")


@dataclass
class TokenSequence:
    embeddings: Tensor
    segments: list[str]
    positions: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.positions is None:
            self.positions = np.arange(len(self.segments))
        if len(self.segments) != self.embeddings.shape[0]:
            raise ShapeError("segments length must equal the number of tokens")

    def __len__(self) -> int:
        return len(self.segments)


class VisionTower(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        grid = cfg.max_image_side // cfg.patch
        patch_dim = cfg.patch * cfg.patch * 3
        self.proj_w = Parameter(init_normal(rng, (patch_dim, cfg.dim), 1.0 / np.sqrt(patch_dim)))
        self.proj_b = Parameter(np.zeros(cfg.dim))
        self.pos = Parameter(init_normal(rng, (grid, grid, cfg.dim), 0.02))


class TextTower(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.char_emb = Parameter(init_normal(rng, (VOCAB_SIZE, cfg.dim), 1.0))
        self.pos = Parameter(init_normal(rng, (cfg.text_cap, cfg.dim), 0.02))


class ConditionProjector(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.ln = LayerNorm(d_in)
        self.mlp = MLP(d_in, 4 * d_in, d_out, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.mlp(self.ln(x))


def word_ids(text: str, buckets: int) -> np.ndarray:
    """Hashed lower-case word ids in ``[1, buckets)``; 0 is reserved for padding."""
    words = re.findall(r"[a-z0-9]+", text.lower())
    return np.array([1 + zlib.crc32(w.encode()) % (buckets - 1) for w in words], dtype=np.int64)


class TextConditioner(Module):
    """Prompt encoder for the denoiser's text branch (part of the base model).

    Prompts become hashed word ids padded to a fixed length, so every
    non-empty prompt gives ``length`` rows.  The empty prompt maps to a single
    learned null row.
    """

    def __init__(self, dim: int = 64, cond_dim: int = 64, heads: int = 4, length: int = 16,
                 buckets: int = 512, rng: np.random.Generator | None = None, seed: int = 2):
        rng = np.random.default_rng(seed) if rng is None else rng
        self.length = length
        self.buckets = buckets
        self.word_emb = Parameter(init_normal(rng, (buckets, dim), 1.0))
        self.pos = Parameter(init_normal(rng, (length, dim), 0.02))
        self.block = TransformerBlock(dim, heads, rng)
        self.proj = ConditionProjector(dim, cond_dim, rng)
        self.null = Parameter(init_normal(rng, (1, cond_dim), 0.02))

    def ids(self, prompt: str) -> np.ndarray:
        ids = word_ids(prompt, self.buckets)
        if len(ids) > self.length:
            raise ValueError(f"prompt longer than {self.length} words: {len(ids)}")
        return np.pad(ids, (0, self.length - len(ids)))

    def forward(self, prompt: str) -> Tensor:
        """``(length, cond_dim)`` condition for one prompt, ``(1, cond_dim)`` if empty."""
        if not word_ids(prompt, self.buckets).size:
            return self.null * 1.0
        x = self.word_emb[self.ids(prompt)] + self.pos
        return self.proj(self.block(x))


class ReferenceEncoder(Module):
    def __init__(self, cfg: EncoderConfig = EncoderConfig(), rng: np.random.Generator | None = None):
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        self.cfg = cfg
        self.vision = VisionTower(cfg, rng)
        self.text = TextTower(cfg, rng)
        self.segment = Parameter(init_normal(rng, (len(SEGMENT_IDS), cfg.dim), 0.02))
        n_context = cfg.layers - cfg.ref_insert_depth
        self.blocks = [TransformerBlock(cfg.dim, cfg.heads, rng, cfg.mlp_ratio) for _ in range(n_context)]
        self.agg = [TransformerBlock(cfg.dim, cfg.heads, rng, cfg.mlp_ratio)
                    for _ in range(cfg.ref_insert_depth)]
        self.ref_tokens = Parameter(init_normal(rng, (cfg.num_ref_tokens, cfg.dim), 1.0))
        self.cond_proj = ConditionProjector(cfg.dim, cfg.cond_dim, rng)

    @property
    def num_tokens(self) -> int:
        return self.cfg.num_ref_tokens

    # -- tokenisation ------------------------------------------------------
    def prepare_image(self, img: np.ndarray) -> np.ndarray:
        """Cap the longest side and pad (with black) to a patch multiple."""
        cfg = self.cfg
        img = np.asarray(img)
        if max(img.shape[:2]) > cfg.max_image_side:
            img = fit_to_cap(img, cfg.max_image_side, cfg.patch)
        h, w = img.shape[:2]
        ph, pw = -h % cfg.patch, -w % cfg.patch
        if ph or pw:
            img = np.pad(img, ((0, ph), (0, pw), (0, 0)), constant_values=-1.0)
        return img

    def tokenize_image(self, img: np.ndarray) -> Tensor:
        img = self.prepare_image(img)
        p = self.cfg.patch
        gh, gw = img.shape[0] // p, img.shape[1] // p
        patches = Tensor(patchify(img, p), dtype=self.vision.proj_w.dtype)
        pos = self.vision.pos[:gh, :gw].reshape(gh * gw, self.cfg.dim)
        return patches @ self.vision.proj_w + self.vision.proj_b + pos

    def tokenize_text(self, text: str) -> Tensor:
        if len(text) > self.cfg.text_cap:
            raise ValueError(f"text longer than cap {self.cfg.text_cap}: {len(text)} chars")
        ids = char_ids(text)
        return self.text.char_emb[ids] + self.text.pos[: len(ids)]

    def build_instruction_sequence(self, refs, prompt: str = "") -> TokenSequence:
        cfg = self.cfg
        refs = list(refs)
        if not refs:
            raise ValueError("at least one reference image is required")
        if len(refs) > cfg.max_refs:
            raise ValueError(f"too many references: {len(refs)} > cap {cfg.max_refs}")
        parts: list[Tensor] = []
        segments: list[str] = []
        kinds: list[int] = []

        def add(tokens: Tensor, tag: str, kind: str):
            if tokens.shape[0] == 0:
                return
            parts.append(tokens)
            segments.extend([tag] * tokens.shape[0])
            kinds.extend([SEGMENT_IDS[kind]] * tokens.shape[0])

        if cfg.use_instruction:
            add(self.tokenize_text(cfg.instruction), "instruction", "instruction")
        for k, img in enumerate(refs):
            add(self.tokenize_image(img), f"image({k})", "image")
        if cfg.use_instruction:
            add(self.tokenize_text(cfg.instruction_suffix), "instruction", "instruction")
        if cfg.use_prompt and prompt:
            add(self.tokenize_text(prompt), "prompt-text", "prompt")
        tokens = concat(parts, axis=0)
        positions = np.arange(len(segments))
        tokens = tokens + self.segment[np.asarray(kinds)] + sinusoidal(positions, cfg.dim, tokens.dtype)
        return TokenSequence(tokens, segments, positions)

    # -- transformer -------------------------------------------------------
    def encode_context(self, seq: TokenSequence) -> Tensor:
        """Causal context blocks; returns the hidden states fed to aggregation."""
        x = seq.embeddings
        if self.blocks:
            mask = causal_mask(len(seq), x.dtype)
            for block in self.blocks:
                x = block(x, mask=mask)
        return x

    def reference_inputs(self, context_len: int) -> Tensor:
        """Reference tokens with sequence positions continuing after the context."""
        positions = np.arange(context_len, context_len + self.cfg.num_ref_tokens)
        return self.ref_tokens + sinusoidal(positions, self.cfg.dim, self.ref_tokens.dtype)

    def aggregation_mask(self, context_len: int, dtype) -> np.ndarray | None:
        if self.cfg.bidirectional == "full":
            return None
        n = self.cfg.num_ref_tokens
        mask = np.zeros((context_len + n, context_len + n), dtype=dtype)
        mask[:context_len, :context_len] = causal_mask(context_len, dtype)
        mask[:context_len, context_len:] = -np.inf
        return mask

    def aggregate_references(self, context: Tensor) -> tuple[Tensor, Tensor]:
        """Append reference tokens, mix bi-directionally, split, and project.

        Returns the updated context rows and the image condition ``c_i``.
        """
        L = context.shape[0]
        x = concat([context, self.reference_inputs(L)], axis=0)
        mask = self.aggregation_mask(L, x.dtype)
        for block in self.agg:
            x = block(x, mask=mask)
        updated_context, updated_refs = x[:L], x[L:]
        return updated_context, self.cond_proj(updated_refs)

    def encode(self, refs, prompt: str = "") -> Tensor:
        """Image condition ``c_i`` of shape ``(N, cond_dim)`` for any number of refs."""
        seq = self.build_instruction_sequence(refs, prompt)
        _, c_i = self.aggregate_references(self.encode_context(seq))
        return c_i


def average_baseline(encoder: ReferenceEncoder, refs, prompt: str = "") -> Tensor:
    """Mean of per-image conditions, each encoded from a one-image sequence.

    Values are sorted along the reference axis before summation so the
    result is bit-identical under any permutation of ``refs``.
    """
    refs = list(refs)
    if not refs:
        raise ValueError("at least one reference image is required")
    per_image = stack([encoder.encode([img], prompt) for img in refs], axis=0)
    if len(refs) == 1:
        return per_image[0]
    order = np.argsort(per_image.data, axis=0, kind="stable")
    n, d = per_image.shape[1:]
    rows = np.arange(n)[None, :, None]
    cols = np.arange(d)[None, None, :]
    ordered = per_image[order, np.broadcast_to(rows, order.shape), np.broadcast_to(cols, order.shape)]
    return ordered.sum(axis=0) * (1.0 / len(refs))


def concat_baseline(encoder: ReferenceEncoder, refs, prompt: str = "") -> Tensor:
    """Per-image conditions stacked along the token axis: ``K * N`` rows."""
    refs = list(refs)
    if not refs:
        raise ValueError("at least one reference image is required")
    conds = [encoder.encode([img], prompt) for img in refs]
    return conds[0] if len(conds) == 1 else concat(conds, axis=0)
