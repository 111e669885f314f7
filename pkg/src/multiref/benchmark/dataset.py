"""Procedural grouped image dataset, splits, consistency filtering and manifests.

A group shares one topic: a subject shape, colour and drawing style on a
background pattern and colour.  Images in a group vary the subject's
position, scale, the image aspect ratio and may carry a small random
distractor object.  Captions name the colour, style, shape and background
pattern but not the background colour, so references carry information the
caption does not.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import checkpoint
from ..images import read_ppm, write_ppm

SHAPES = ("circle", "square", "triangle", "diamond", "cross", "ring")
COLORS = {
    "red": (0.92, 0.15, 0.12),
    "green": (0.15, 0.80, 0.22),
    "blue": (0.20, 0.38, 0.98),
    "yellow": (0.96, 0.90, 0.15),
    "purple": (0.62, 0.22, 0.85),
    "orange": (1.00, 0.55, 0.08),
    "white": (0.96, 0.96, 0.96),
    "cyan": (0.10, 0.86, 0.90),
}
BACKGROUNDS = ("plain", "striped", "checkered", "gradient", "dotted")
BG_COLORS = {
    "black": (0.04, 0.04, 0.05),
    "navy": (0.05, 0.08, 0.38),
    "maroon": (0.38, 0.05, 0.08),
    "olive": (0.32, 0.32, 0.05),
    "teal": (0.03, 0.32, 0.32),
    "gray": (0.40, 0.40, 0.40),
}
STYLES = ("solid", "outlined")
SPLITS = ("train", "held-in", "held-out")
CAPTION_TEMPLATES = (
    "a {color} {style}{shape} on a {bg} background",
    "{color} {style}{shape}, {bg} background",
    "a picture of a {color} {style}{shape} over a {bg} background",
)
ASPECTS = ((16, 12), (12, 16), (16, 20), (20, 16))
_SUPERSAMPLE = 4


def caption_vocabulary() -> list[str]:
    words = set()
    for template in CAPTION_TEMPLATES:
        words.update(w.strip(",") for w in template.split() if "{" not in w)
    words.update(COLORS, SHAPES, BACKGROUNDS, ["outlined"])
    return sorted(words)


@dataclass
class GenSpec:
    groups: int = 200
    min_group_size: int = 2
    max_group_size: int = 8
    image_side: int = 16
    aspect_prob: float = 0.25
    # fraction of groups whose subject position varies freely; True means all
    misalignment: float | bool = 0.3
    distractor_prob: float = 0.3
    # iid per-pixel jitter (std, in [0, 1] units); off by default because it
    # only adds an irreducible floor to the denoising loss
    pixel_noise: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.min_group_size < 2:
            raise ValueError("groups need at least 2 images (min_group_size >= 2)")
        if self.max_group_size > 28:
            raise ValueError("groups hold at most 28 images (max_group_size <= 28)")
        if self.min_group_size > self.max_group_size:
            raise ValueError("min_group_size exceeds max_group_size")
        if self.groups < 1:
            raise ValueError("need at least one group")
        if self.image_side % 4:
            raise ValueError("image_side must be a multiple of 4")

    @property
    def misaligned_fraction(self) -> float:
        if isinstance(self.misalignment, bool):
            return 1.0 if self.misalignment else 0.0
        return float(self.misalignment)


@dataclass
class GroupRecord:
    group_id: str
    topic: dict
    images: list
    captions: list
    meta: list
    split: str = "train"
    targets: list = field(default_factory=list)

    def __post_init__(self):
        if not self.targets:
            self.targets = [bool(m.get("quality", True)) for m in self.meta]

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, keep) -> "GroupRecord":
        keep = list(keep)
        return replace(
            self,
            images=[self.images[i] for i in keep],
            captions=[self.captions[i] for i in keep],
            meta=[self.meta[i] for i in keep],
            targets=[self.targets[i] for i in keep],
        )


# -- rendering -------------------------------------------------------------
def _shape_mask(name: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if name == "circle":
        return u * u + v * v <= 1.0
    if name == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.85
    if name == "diamond":
        return np.abs(u) + np.abs(v) <= 1.15
    if name == "triangle":
        return (v >= -1.0) & (v <= 0.8) & (np.abs(u) <= (v + 1.0) / 1.8)
    if name == "cross":
        return ((np.abs(u) <= 0.32) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= 0.32) & (np.abs(u) <= 1.0))
    if name == "ring":
        r = np.sqrt(u * u + v * v)
        return (r >= 0.55) & (r <= 1.0)
    raise ValueError(f"unknown shape {name!r}")


def _coverage(name: str, style: str, h: int, w: int, cy: float, cx: float, radius: float) -> np.ndarray:
    s = _SUPERSAMPLE
    ys = (np.arange(h * s) + 0.5) / s
    xs = (np.arange(w * s) + 0.5) / s
    v = (ys[:, None] - cy) / radius
    u = (xs[None, :] - cx) / radius
    mask = _shape_mask(name, u, v)
    if style == "outlined":
        mask = mask & ~_shape_mask(name, u / 0.62, v / 0.62)
    return mask.reshape(h, s, w, s).mean(axis=(1, 3))


def _background(family: str, rgb: np.ndarray, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    base = np.broadcast_to(rgb, (h, w, 3)).copy()
    light = np.clip(rgb * 0.5 + 0.3, 0, 1)
    yy, xx = np.mgrid[0:h, 0:w]
    phase = int(rng.integers(0, 4))
    if family == "striped":
        sel = ((yy + phase) // 2) % 2 == 0
    elif family == "checkered":
        sel = (((yy + phase) // 3) + ((xx + phase) // 3)) % 2 == 0
    elif family == "dotted":
        sel = ((yy + phase) % 4 == 0) & ((xx + phase) % 4 == 0)
    elif family == "gradient":
        frac = (yy / max(h - 1, 1))[..., None]
        return base * (1 - frac) + light * frac
    else:
        return base
    base[sel] = light
    return base


def _luminance(rgb) -> float:
    r, g, b = rgb
    return 0.299 * r + 0.587 * g + 0.114 * b


def sample_topic(rng: np.random.Generator, misaligned: bool) -> dict:
    color = str(rng.choice(list(COLORS)))
    bg_color = str(rng.choice(list(BG_COLORS)))
    rgb = np.clip(np.array(COLORS[color]) + rng.normal(0, 0.04, 3), 0, 1)
    bg_rgb = np.clip(np.array(BG_COLORS[bg_color]) + rng.normal(0, 0.03, 3), 0, 1)
    return {
        "shape": str(rng.choice(SHAPES)),
        "color": color,
        "rgb": [float(x) for x in rgb],
        "background": str(rng.choice(BACKGROUNDS)),
        "bg_color": bg_color,
        "bg_rgb": [float(x) for x in bg_rgb],
        "style": str(rng.choice(STYLES)),
        "anchor": [float(x) for x in rng.uniform(0.35, 0.65, 2)],
        "scale": float(rng.uniform(0.2, 0.28)),
        "misaligned": bool(misaligned),
    }


def topic_key(topic: dict) -> tuple:
    return (topic["shape"], topic["color"], topic["background"], topic["bg_color"], topic["style"])


def make_caption(topic: dict, rng: np.random.Generator) -> str:
    template = CAPTION_TEMPLATES[int(rng.integers(len(CAPTION_TEMPLATES)))]
    style = "outlined " if topic["style"] == "outlined" else ""
    return template.format(color=topic["color"], style=style, shape=topic["shape"], bg=topic["background"])


def render_image(topic: dict, h: int, w: int, rng: np.random.Generator,
                 distractor_prob: float = 0.0, pixel_noise: float = 0.0) -> tuple[np.ndarray, dict]:
    """Draw one image of ``topic``; returns the image in [-1, 1] and metadata."""
    side = min(h, w)
    jitter_scale = 0.3 if topic["misaligned"] else 0.08
    radius = topic["scale"] * side * float(np.exp(rng.normal(0, jitter_scale)))
    radius = float(np.clip(radius, 2.0, side * 0.35))
    if topic["misaligned"]:
        cy = float(rng.uniform(radius, h - radius))
        cx = float(rng.uniform(radius, w - radius))
    else:
        ay, ax = topic["anchor"]
        cy = float(np.clip(ay * h + rng.normal(0, 0.03 * h), radius, h - radius))
        cx = float(np.clip(ax * w + rng.normal(0, 0.03 * w), radius, w - radius))
    img = _background(topic["background"], np.array(topic["bg_rgb"]), h, w, rng)
    distractor = None
    if rng.random() < distractor_prob:
        others = [c for c in COLORS if c != topic["color"]]
        d_color = str(rng.choice(others))
        d_shape = str(rng.choice(SHAPES))
        d_radius = float(rng.uniform(1.6, 2.2))
        d_cy = float(rng.uniform(d_radius, h - d_radius))
        d_cx = float(rng.uniform(d_radius, w - d_radius))
        cov = _coverage(d_shape, "solid", h, w, d_cy, d_cx, d_radius)[..., None]
        img = img * (1 - cov) + np.array(COLORS[d_color]) * cov
        distractor = {"shape": d_shape, "color": d_color, "center": [d_cy, d_cx], "radius": d_radius}
    cov = _coverage(topic["shape"], topic["style"], h, w, cy, cx, radius)
    img = img * (1 - cov[..., None]) + np.array(topic["rgb"]) * cov[..., None]
    if pixel_noise:
        img = img + rng.normal(0, pixel_noise, img.shape)
    img = np.clip(img * 2.0 - 1.0, -1.0, 1.0)
    rows, cols = np.nonzero(cov > 0)
    bbox = [int(rows.min()), int(cols.min()), int(rows.max()) + 1, int(cols.max()) + 1]
    contrast = abs(_luminance(topic["rgb"]) - _luminance(topic["bg_rgb"]))
    meta = {
        "center": [cy, cx],
        "radius": radius,
        "bbox": bbox,
        "size": [h, w],
        "distractor": distractor,
        "contrast": contrast,
        "quality": bool(contrast >= 0.12),
    }
    return img, meta


def _image_size(spec: GenSpec, rng: np.random.Generator) -> tuple[int, int]:
    if rng.random() < spec.aspect_prob:
        h, w = ASPECTS[int(rng.integers(len(ASPECTS)))]
        scale = spec.image_side / 16
        return int(h * scale), int(w * scale)
    return spec.image_side, spec.image_side


def render_group(topic: dict, size: int, spec: GenSpec, rng: np.random.Generator,
                 group_id: str) -> GroupRecord:
    images, captions, meta = [], [], []
    for _ in range(size):
        h, w = _image_size(spec, rng)
        img, m = render_image(topic, h, w, rng, spec.distractor_prob, spec.pixel_noise)
        images.append(img)
        captions.append(make_caption(topic, rng))
        meta.append(m)
    return GroupRecord(group_id, topic, images, captions, meta)


def generate_dataset(spec: GenSpec) -> list[GroupRecord]:
    """Deterministic grouped dataset; each group draws from its own seeded stream."""
    spec.validate()
    groups = []
    for g in range(spec.groups):
        rng = np.random.default_rng([spec.seed, g])
        misaligned = rng.random() < spec.misaligned_fraction
        topic = sample_topic(rng, misaligned)
        size = int(rng.integers(spec.min_group_size, spec.max_group_size + 1))
        groups.append(render_group(topic, size, spec, rng, f"g{spec.seed:03d}_{g:05d}"))
    return groups


def rerender(groups: list[GroupRecord], misaligned: bool, spec: GenSpec | None = None,
             seed: int = 0, suffix: str | None = None) -> list[GroupRecord]:
    """Redraw each group's topic with the subject aligned or freely placed.

    Group sizes, splits and captions' topics are kept; positions, scales and
    distractors are redrawn.  Used to build paired aligned/misaligned
    stressor splits.
    """
    spec = spec or GenSpec()
    suffix = suffix if suffix is not None else ("-mis" if misaligned else "-ali")
    out = []
    for i, group in enumerate(groups):
        rng = np.random.default_rng([seed, 7919, i])
        topic = dict(group.topic, misaligned=misaligned)
        redone = render_group(topic, len(group), spec, rng, group.group_id + suffix)
        redone.split = group.split
        redone.targets = [True] * len(redone) if group.split == "held-out" else list(redone.targets)
        out.append(redone)
    return out


def image_hash(img: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(img, dtype=np.float64).tobytes()).hexdigest()


# -- filtering -------------------------------------------------------------
@dataclass
class FilterThresholds:
    consistency_a: float = -1.0
    consistency_b: float = -1.0
    caption: float = -1.0


def consistency_scores(groups: list[GroupRecord], probes) -> list[dict]:
    """Per-image mean cosine similarity to the rest of its group, and caption score."""
    out = []
    for group in groups:
        ea = np.stack([probes.embed_a(img) for img in group.images])
        eb = np.stack([probes.embed_b(img) for img in group.images])
        et = np.stack([probes.embed_text(c) for c in group.captions])
        n = len(group)
        sa, sb = ea @ ea.T, eb @ eb.T
        off = ~np.eye(n, dtype=bool)
        out.append({
            "a": np.clip((sa * off).sum(1) / max(n - 1, 1), -1, 1),
            "b": np.clip((sb * off).sum(1) / max(n - 1, 1), -1, 1),
            "caption": np.clip((ea * et).sum(1), -1, 1),
        })
    return out


def filter_groups(groups: list[GroupRecord], probes, thresholds: FilterThresholds) -> list[GroupRecord]:
    """Drop inconsistent or badly captioned images, then groups left with < 2 images."""
    kept = []
    for group, s in zip(groups, consistency_scores(groups, probes)):
        keep = [i for i in range(len(group))
                if not (s["a"][i] < thresholds.consistency_a
                        or s["b"][i] < thresholds.consistency_b
                        or s["caption"][i] < thresholds.caption)]
        if len(keep) >= 2:
            kept.append(group if len(keep) == len(group) else group.subset(keep))
    return kept


# -- splits ----------------------------------------------------------------
def make_splits(groups: list[GroupRecord], held_out_groups: int = 12, held_in_groups: int = 30,
                seed: int = 0) -> list[GroupRecord]:
    """Label held-out, held-in and training groups and their target designations.

    Held-out: every image is an evaluation target.  Held-in: one random
    image is the evaluation target, the rest stay available for training.
    Training: targets are the quality-flagged images.
    """
    if held_out_groups + held_in_groups > len(groups) - 1:
        raise ValueError(
            f"insufficient groups: {len(groups)} for {held_out_groups} held-out + "
            f"{held_in_groups} held-in + at least 1 training group"
        )
    rng = np.random.default_rng([seed, 424242])
    order = rng.permutation(len(groups))
    out = [replace(g) for g in groups]
    for rank, idx in enumerate(order):
        g = out[idx]
        if rank < held_out_groups:
            g.split = "held-out"
            g.targets = [True] * len(g)
        elif rank < held_out_groups + held_in_groups:
            g.split = "held-in"
            pick = int(rng.integers(len(g)))
            g.targets = [i == pick for i in range(len(g))]
        else:
            g.split = "train"
            g.targets = [bool(m.get("quality", True)) for m in g.meta]
    return out


def training_images(groups: list[GroupRecord]):
    """Every image that training may touch: training groups plus held-in references."""
    for g in groups:
        if g.split == "train":
            yield from ((g, i) for i in range(len(g)))
        elif g.split == "held-in":
            yield from ((g, i) for i in range(len(g)) if not g.targets[i])


def audit_splits(groups: list[GroupRecord]) -> dict:
    """Count evaluation images that leak into the training view."""
    train_hashes = {image_hash(g.images[i]) for g, i in training_images(groups)}
    held_out = [image_hash(img) for g in groups if g.split == "held-out" for img in g.images]
    held_in_targets = [image_hash(g.images[i]) for g in groups if g.split == "held-in"
                       for i in range(len(g)) if g.targets[i]]
    bad_held_in = [g.group_id for g in groups if g.split == "held-in" and sum(g.targets) != 1]
    return {
        "held_out_images": len(held_out),
        "held_out_leaks": sum(h in train_hashes for h in held_out),
        "held_in_target_leaks": sum(h in train_hashes for h in held_in_targets),
        "held_in_bad_target_count": len(bad_held_in),
        "training_images": len(train_hashes),
        "ok": not any(h in train_hashes for h in held_out + held_in_targets) and not bad_held_in,
    }


# -- manifest I/O ----------------------------------------------------------
def save_manifest(groups: list[GroupRecord], out_dir: str | os.PathLike) -> Path:
    """Write ``manifest.jsonl`` plus one PPM and one tensor sidecar per image."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.jsonl"
    with open(path, "w") as fh:
        for g in groups:
            for i, img in enumerate(g.images):
                stem = f"images/{g.group_id}_{i:02d}"
                write_ppm(out_dir / f"{stem}.ppm", img)
                checkpoint.save(out_dir / f"{stem}.ezrf", {"image": img.astype(np.float64)})
                record = {
                    "group_id": g.group_id,
                    "index": i,
                    "image": f"{stem}.ppm",
                    "tensor": f"{stem}.ezrf",
                    "caption": g.captions[i],
                    "split": g.split,
                    "target": bool(g.targets[i]),
                    "topic": g.topic,
                    "meta": g.meta[i],
                }
                fh.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def load_manifest(path: str | os.PathLike) -> list[GroupRecord]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    root = path.parent
    groups: dict[str, GroupRecord] = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            sidecar = root / r["tensor"]
            img = checkpoint.load(sidecar)["image"] if sidecar.exists() else read_ppm(root / r["image"])
            g = groups.get(r["group_id"])
            if g is None:
                g = groups[r["group_id"]] = GroupRecord(r["group_id"], r["topic"], [], [], [], r["split"], [])
            g.images.append(img)
            g.captions.append(r["caption"])
            g.meta.append(r["meta"])
            g.targets.append(bool(r["target"]))
    return list(groups.values())
