"""Frozen embedding probes used only for scoring.

Probe A is a contrastive image-text model (image tower plus a
bag-of-words caption tower); it yields the image-image and image-text
similarity metrics.  Probe B is an image-only model trained for instance
discrimination under augmentation with a different window size and seed;
it yields the second image-image metric.  Both are trained on generator
data whose seed is disjoint from every evaluation set, and neither shares
weights with the conditioning encoder.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .. import checkpoint
from ..autodiff import Adam, Module, Parameter, Tensor, concat, default_dtype, log_softmax, no_grad
from ..images import resize
from ..layers import Linear, MLP
from .dataset import GenSpec, caption_vocabulary, generate_dataset, topic_key

_WORD = re.compile(r"[a-z]+")


def windows(img: np.ndarray, size: int, stride: int) -> np.ndarray:
    """All ``size x size`` windows at ``stride``, flattened: ``(n_windows, size*size*C)``."""
    img = np.asarray(img, dtype=np.float64)
    if min(img.shape[:2]) < size:
        img = resize(img, max(size, img.shape[0]), max(size, img.shape[1]))
    view = sliding_window_view(img, (size, size), axis=(0, 1))[::stride, ::stride]
    # view: (nh, nw, C, size, size)
    return view.transpose(0, 1, 3, 4, 2).reshape(-1, size * size * img.shape[2])


class ImageTower(Module):
    """Window MLP with mean and max pooling, then a linear head."""

    def __init__(self, window: int, stride: int, hidden: int, dim: int, rng: np.random.Generator):
        self.window = window
        self.stride = stride
        self.local = MLP(window * window * 3, hidden, hidden, rng)
        self.head = Linear(2 * hidden, dim, rng)

    def features(self, img: np.ndarray) -> np.ndarray:
        return windows(img, self.window, self.stride)

    def forward(self, batch: list[np.ndarray]) -> Tensor:
        pooled = []
        for img in batch:
            h = self.local(Tensor(self.features(img)))
            pooled.append(concat([h.mean(axis=0), h.max(axis=0)], axis=0).reshape(1, -1))
        return _normalize(self.head(concat(pooled, axis=0)))


class TextTower(Module):
    def __init__(self, vocab: list[str], dim: int, rng: np.random.Generator):
        self.vocab = {w: i for i, w in enumerate(vocab)}
        self.proj = MLP(len(vocab), 64, dim, rng)

    def bag(self, caption: str) -> np.ndarray:
        out = np.zeros(len(self.vocab))
        for word in _WORD.findall(caption.lower()):
            if word in self.vocab:
                out[self.vocab[word]] = 1.0
        return out

    def forward(self, captions: list[str]) -> Tensor:
        return _normalize(self.proj(Tensor(np.stack([self.bag(c) for c in captions]))))


def _normalize(x: Tensor) -> Tensor:
    return x / ((x * x).sum(axis=-1, keepdims=True) + 1e-12).sqrt()


def soft_infonce(a: Tensor, b: Tensor, same: np.ndarray, temperature: float) -> Tensor:
    """Cross-entropy of ``softmax(a b^T / tau)`` against uniform-over-positives targets."""
    logits = (a @ b.T) * (1.0 / temperature)
    target = same / same.sum(axis=1, keepdims=True)
    return -(log_softmax(logits, axis=-1) * target).sum() * (1.0 / len(same))


def augment(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random crop-and-resize, horizontal flip and brightness jitter."""
    h, w = img.shape[:2]
    ch, cw = int(rng.integers(int(0.7 * h), h + 1)), int(rng.integers(int(0.7 * w), w + 1))
    top, left = int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1))
    out = resize(img[top:top + ch, left:left + cw], h, w)
    if rng.random() < 0.5:
        out = out[:, ::-1]
    return np.clip(out + rng.normal(0, 0.05), -1, 1)


@dataclass(frozen=True)
class ProbeConfig:
    dim: int = 32
    hidden: int = 64
    window_a: int = 4
    stride_a: int = 2
    window_b: int = 5
    stride_b: int = 3
    seed_a: int = 11
    seed_b: int = 23
    data_seed: int = 9001
    groups: int = 300
    image_side: int = 16
    steps: int = 400
    batch: int = 48
    lr: float = 3e-3
    temperature: float = 0.1


class ProbeSet(Module):
    """The frozen metric encoders: ``embed_a``, ``embed_text`` and ``embed_b``."""

    def __init__(self, cfg: ProbeConfig = ProbeConfig()):
        self.cfg = cfg
        rng_a = np.random.default_rng(cfg.seed_a)
        rng_b = np.random.default_rng(cfg.seed_b)
        with default_dtype(np.float64):
            self.image_a = ImageTower(cfg.window_a, cfg.stride_a, cfg.hidden, cfg.dim, rng_a)
            self.text_a = TextTower(caption_vocabulary(), cfg.dim, rng_a)
            self.image_b = ImageTower(cfg.window_b, cfg.stride_b, cfg.hidden, cfg.dim, rng_b)
        self.assign_names()

    def freeze(self) -> None:
        self.set_trainable([])

    # -- embeddings ------------------------------------------------------------
    def _embed(self, tower, items) -> np.ndarray:
        with no_grad():
            return tower(items).data.astype(np.float64)

    def embed_a(self, img: np.ndarray) -> np.ndarray:
        return self._embed(self.image_a, [img])[0]

    def embed_b(self, img: np.ndarray) -> np.ndarray:
        return self._embed(self.image_b, [img])[0]

    def embed_text(self, caption: str) -> np.ndarray:
        return self._embed(self.text_a, [caption])[0]

    def embed_a_batch(self, imgs) -> np.ndarray:
        return self._embed(self.image_a, list(imgs))

    def embed_b_batch(self, imgs) -> np.ndarray:
        return self._embed(self.image_b, list(imgs))

    def save(self, path) -> None:
        checkpoint.save(path, self.state_dict())

    @classmethod
    def load(cls, path, cfg: ProbeConfig = ProbeConfig()) -> "ProbeSet":
        probes = cls(cfg)
        probes.load_state_dict(checkpoint.load(path))
        probes.freeze()
        return probes


def _probe_corpus(cfg: ProbeConfig):
    groups = generate_dataset(GenSpec(groups=cfg.groups, seed=cfg.data_seed, image_side=cfg.image_side))
    images, captions, keys = [], [], []
    for g in groups:
        for img, cap in zip(g.images, g.captions):
            images.append(resize(img, cfg.image_side, cfg.image_side))
            captions.append(cap)
            keys.append(topic_key(g.topic))
    caption_keys = [k[:3] + k[4:] for k in keys]  # captions omit the background colour
    return images, captions, keys, caption_keys


def train_probes(cfg: ProbeConfig = ProbeConfig(), progress=None) -> ProbeSet:
    """Train both probes on a generator seed disjoint from evaluation data."""
    probes = ProbeSet(cfg)
    images, captions, keys, caption_keys = _probe_corpus(cfg)
    key_ids = np.unique(np.array([str(k) for k in keys]), return_inverse=True)[1]
    cap_ids = np.unique(np.array([str(k) for k in caption_keys]), return_inverse=True)[1]
    rng = np.random.default_rng([cfg.data_seed, 1])
    with default_dtype(np.float64):
        params_a = probes.image_a.parameters() + probes.text_a.parameters()
        opt_a = Adam(params_a, lr=cfg.lr)
        opt_b = Adam(probes.image_b.parameters(), lr=cfg.lr)
        for step in range(cfg.steps):
            idx = rng.choice(len(images), size=cfg.batch, replace=False)
            pair = np.array([_same_topic_partner(i, key_ids, rng) for i in idx])
            batch = [images[i] for i in idx]
            # probe A: caption matching plus same-topic image matching
            opt_a.zero_grad()
            ea = probes.image_a(batch)
            ep = probes.image_a([images[i] for i in pair])
            et = probes.text_a([captions[i] for i in idx])
            same_cap = (cap_ids[idx][:, None] == cap_ids[idx][None, :]).astype(np.float64)
            same_key = (key_ids[idx][:, None] == key_ids[pair][None, :]).astype(np.float64)
            loss_a = (soft_infonce(ea, et, same_cap, cfg.temperature)
                      + soft_infonce(et, ea, same_cap.T, cfg.temperature)
                      + soft_infonce(ea, ep, same_key, cfg.temperature))
            loss_a.backward()
            opt_a.step()
            # probe B: two augmented views of the same image
            opt_b.zero_grad()
            v1 = probes.image_b([augment(img, rng) for img in batch])
            v2 = probes.image_b([augment(img, rng) for img in batch])
            eye = np.eye(len(idx))
            loss_b = soft_infonce(v1, v2, eye, cfg.temperature) + soft_infonce(v2, v1, eye, cfg.temperature)
            loss_b.backward()
            opt_b.step()
            if progress is not None:
                progress(step, float(loss_a.data), float(loss_b.data))
    probes.freeze()
    return probes


def _same_topic_partner(i: int, key_ids: np.ndarray, rng: np.random.Generator) -> int:
    options = np.flatnonzero(key_ids == key_ids[i])
    options = options[options != i]
    return int(rng.choice(options)) if len(options) else i


def load_or_train(path: str | Path | None, cfg: ProbeConfig = ProbeConfig()) -> ProbeSet:
    if path is not None and Path(path).exists():
        return ProbeSet.load(path, cfg)
    probes = train_probes(cfg)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        probes.save(path)
    return probes
