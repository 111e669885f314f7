"""Progressive training: base pretraining, then three conditioning stages.

Stage 0 trains the toy base model (denoiser plus its text encoder) with
text conditioning only.  Stages 1-3 keep that base frozen and train the
reference pathway:

1. alignment on single images: aggregation block, reference tokens,
   condition projector and adapters;
2. single-reference finetuning with subject crops: the whole reference
   encoder, adapters and denoiser LoRA;
3. multi-reference finetuning on groups, same trainable set as stage 2.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .autodiff import Adam, stack
from .benchmark.dataset import GroupRecord, training_images
from .diffusion import training_loss
from .images import resize
from .model import ModelConfig, MultiRefModel

BASE_PREFIXES = ("denoiser.", "text_cond.")
STAGE_PATTERNS = {
    0: ("denoiser.*", "text_cond.*", "!*.adapter.*", "!*.lora.*"),
    1: ("encoder.agg.*", "encoder.ref_tokens", "encoder.cond_proj.*", "denoiser.*.adapter.*"),
    2: ("encoder.*", "denoiser.*.adapter.*", "denoiser.*.lora.*"),
    3: ("encoder.*", "denoiser.*.adapter.*", "denoiser.*.lora.*"),
}
STAGE_DATA = {0: "pairs", 1: "pairs", 2: "crops", 3: "groups"}
LOG_HEADER = ("step", "stage", "loss", "lr")


class MissingCheckpointError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class DropoutConfig:
    p_text: float = 0.05
    p_image: float = 0.05
    p_joint: float = 0.05

    def __post_init__(self):
        for name in ("p_text", "p_image", "p_joint"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")


@dataclass(frozen=True)
class StagePlan:
    stage: int
    trainable: tuple = ()
    data: str = ""
    steps: int = 2000
    lr: float = 1e-3
    dropout: DropoutConfig = field(default_factory=DropoutConfig)
    examples: int = 8
    noise_draws: int = 2
    grad_clip: float | None = 1.0
    crop_prob: float = 0.5
    augment: bool = True
    save_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGE_PATTERNS:
            raise ValueError(f"unknown stage {self.stage}; expected one of {sorted(STAGE_PATTERNS)}")
        if not self.trainable:
            object.__setattr__(self, "trainable", STAGE_PATTERNS[self.stage])
        if not self.data:
            object.__setattr__(self, "data", STAGE_DATA[self.stage])
        if self.data not in ("pairs", "crops", "groups"):
            raise ValueError(f"unknown data selector {self.data!r}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


def default_plan(stage: int, **overrides) -> StagePlan:
    base = {0: dict(steps=3000, lr=1e-3, examples=16, dropout=DropoutConfig(0.1, 0.0, 0.0)),
            1: dict(steps=2000, lr=5e-4),
            2: dict(steps=2000, lr=2e-4),
            3: dict(steps=2000, lr=2e-4)}[stage]
    base.update(overrides)
    return StagePlan(stage=stage, **base)


# -- condition dropout -----------------------------------------------------
def draw_dropout(cfg: DropoutConfig, rng: np.random.Generator) -> tuple[bool, bool]:
    """``(drop_text, drop_image)``: the joint coin first, then two independent coins.

    All three uniforms are always drawn so the stream position does not
    depend on the outcome.
    """
    joint, text, image = rng.random(3)
    both = joint < cfg.p_joint
    return bool(both or text < cfg.p_text), bool(both or image < cfg.p_image)


def apply_condition_dropout(c_t, c_i, cfg: DropoutConfig, rng: np.random.Generator, nulls):
    """Replace conditions by their nulls; ``nulls`` is ``(c_t_null, c_i_null)`` or a callable."""
    drop_t, drop_i = draw_dropout(cfg, rng)
    if drop_t or drop_i:
        null_t, null_i = nulls() if callable(nulls) else nulls
        c_t = null_t if drop_t else c_t
        c_i = null_i if drop_i else c_i
    return c_t, c_i


# -- examples --------------------------------------------------------------
def sample_multi_ref_batch(group: GroupRecord, rng: np.random.Generator, augment: bool = True):
    """``(refs, target_image, target_caption)`` from one group.

    The target is uniform over images flagged in ``group.targets``; the
    remaining images are the references, shuffled and contiguously
    truncated to a random length when ``augment`` is set.
    """
    n = len(group)
    if n < 2:
        raise ValueError(f"group {group.group_id} has {n} image(s); references need at least 2")
    eligible = [i for i in range(n) if group.targets[i]]
    if not eligible:
        raise ValueError(f"group {group.group_id} has no eligible target")
    target = eligible[int(rng.integers(len(eligible)))]
    rest = [i for i in range(n) if i != target]
    if augment:
        rest = [rest[i] for i in rng.permutation(len(rest))]
        keep = int(rng.integers(1, len(rest) + 1))
        start = int(rng.integers(0, len(rest) - keep + 1))
        rest = rest[start:start + keep]
    return [group.images[i] for i in rest], group.images[target], group.captions[target]


def subject_crop(img: np.ndarray, bbox, rng: np.random.Generator, margin: int = 1) -> tuple:
    """A random square window inside ``img`` that contains ``bbox = (y0, x0, y1, x1)``."""
    h, w = img.shape[:2]
    y0, x0, y1, x1 = [int(v) for v in bbox]
    y0, x0 = max(0, y0 - margin), max(0, x0 - margin)
    y1, x1 = min(h, y1 + margin), min(w, x1 + margin)
    need = max(y1 - y0, x1 - x0)
    side = int(rng.integers(need, min(h, w) + 1)) if need < min(h, w) else min(h, w)
    # a box wider than the window can only be partly covered; stay in bounds
    lo_y, lo_x = max(0, y1 - side), max(0, x1 - side)
    top = int(rng.integers(lo_y, max(lo_y, min(y0, h - side)) + 1))
    left = int(rng.integers(lo_x, max(lo_x, min(x0, w - side)) + 1))
    return img[top:top + side, left:left + side], (top, left, top + side, left + side)


def single_ref_batch(pair, rng: np.random.Generator, crop_prob: float = 0.0):
    """``(refs, target, caption)`` where the one reference is the image or a subject crop."""
    img, caption, meta = pair
    ref = img
    if crop_prob > 0 and rng.random() < crop_prob and meta and meta.get("bbox"):
        window, _ = subject_crop(img, meta["bbox"], rng)
        ref = resize(window, *img.shape[:2])
    return [ref], img, caption


def square_example(img: np.ndarray, meta: dict, side: int) -> tuple[np.ndarray, dict]:
    """Centre-crop to a square, resize to ``side``, and map the subject box along."""
    h, w = img.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    out = resize(img[top:top + s, left:left + s], side, side)
    meta = dict(meta or {})
    if meta.get("bbox"):
        k = side / s
        y0, x0, y1, x1 = meta["bbox"]
        box = [(y0 - top) * k, (x0 - left) * k, (y1 - top) * k, (x1 - left) * k]
        box = [int(np.floor(box[0])), int(np.floor(box[1])), int(np.ceil(box[2])), int(np.ceil(box[3]))]
        meta["bbox"] = [max(0, box[0]), max(0, box[1]), min(side, box[2]), min(side, box[3])]
    return out, meta


class TrainingData:
    """The training view of a split manifest.

    ``pairs`` are square single images (training groups plus held-in
    references); ``groups`` are the multi-image groups usable at stage 3,
    with held-in evaluation targets removed and targets restricted to
    quality-flagged images.
    """

    def __init__(self, groups: list[GroupRecord], image_side: int = 16):
        self.image_side = image_side
        self.pairs = []
        for g, i in training_images(groups):
            img, meta = square_example(g.images[i], g.meta[i], image_side)
            self.pairs.append((img, g.captions[i], meta))
        self.groups = []
        for g in groups:
            if g.split == "held-out":
                continue
            keep = [i for i in range(len(g)) if g.split == "train" or not g.targets[i]]
            if len(keep) < 2:
                continue
            sub = g.subset(keep)
            sub.targets = [bool(m.get("quality", True)) for m in sub.meta]
            if any(sub.targets):
                self.groups.append(sub)
        if not self.pairs:
            raise ValueError("no training images in manifest")

    def example(self, selector: str, rng: np.random.Generator, plan: StagePlan):
        if selector == "groups":
            if not self.groups:
                raise ValueError("no multi-image training groups in manifest")
            group = self.groups[int(rng.integers(len(self.groups)))]
            return sample_multi_ref_batch(group, rng, plan.augment)
        pair = self.pairs[int(rng.integers(len(self.pairs)))]
        return single_ref_batch(pair, rng, plan.crop_prob if selector == "crops" else 0.0)


# -- model construction ----------------------------------------------------
def new_training_model(cfg: ModelConfig = ModelConfig()) -> MultiRefModel:
    """A model with its full training structure (zero adapters, zero LoRA)."""
    model = MultiRefModel(cfg)
    model.install_adapters()
    model.install_lora()
    return model


def checkpoint_path(workdir, stage: int) -> Path:
    return Path(workdir) / f"stage{stage}.ezrf"


def resume_path(workdir, stage: int) -> Path:
    return Path(workdir) / f"stage{stage}.resume.ezrf"


def load_stage_input(plan: StagePlan, cfg: ModelConfig, init: str | os.PathLike | None,
                     workdir) -> MultiRefModel:
    model = new_training_model(cfg)
    if plan.stage == 0:
        return model
    path = Path(init) if init is not None else checkpoint_path(workdir, plan.stage - 1)
    if not path.exists():
        raise MissingCheckpointError(
            f"stage {plan.stage} needs the stage-{plan.stage - 1} checkpoint: {path} not found")
    tensors = checkpoint.load(path)
    if plan.stage == 1:
        # only the base model carries over; the reference pathway starts fresh
        model.load_state_dict({k: v for k, v in tensors.items() if k.startswith(BASE_PREFIXES)},
                              strict=False)
    else:
        model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("optim.")})
    return model


# -- the loop --------------------------------------------------------------
def step_rng(plan: StagePlan, step: int) -> np.random.Generator:
    return np.random.default_rng([plan.seed, plan.stage, step])


def training_step(model: MultiRefModel, data: TrainingData, plan: StagePlan,
                  rng: np.random.Generator) -> tuple:
    """Draw ``plan.examples`` examples and return ``(loss_tensor, examples)``.

    Each example gets its own dropout coins and ``plan.noise_draws``
    (timestep, noise) pairs.  Examples are bucketed by target and condition
    shape so variable-aspect targets can share a step; the loss is the mean
    over all rows.
    """
    examples = [data.example(plan.data, rng, plan) for _ in range(plan.examples)]
    drops = [draw_dropout(plan.dropout, rng) for _ in examples]
    d = plan.noise_draws
    nulls = None
    if plan.stage and any(dt or di for dt, di in drops):
        nulls = model.null_conditions()
    conds = []
    for (refs, target, caption), (drop_t, drop_i) in zip(examples, drops):
        if drop_t:
            c_t = nulls[0] if nulls else model.text_condition("")
        else:
            c_t = model.text_condition(caption)
        if plan.stage == 0:
            c_i = None
        else:
            c_i = nulls[1] if drop_i else model.image_condition(refs, caption)
        conds.append((c_t, c_i))
    buckets: dict = {}
    for k, ((_, target, _), (c_t, c_i)) in enumerate(zip(examples, conds)):
        key = (target.shape, c_t.shape, None if c_i is None else c_i.shape)
        buckets.setdefault(key, []).append(k)
    total, rows = None, len(examples) * d
    for key, members in buckets.items():
        shape = key[0]
        n = len(members) * d
        t = rng.integers(0, model.schedule.T, size=n)
        eps = rng.standard_normal((n,) + shape)
        x0 = np.repeat(np.stack([examples[k][1] for k in members]), d, axis=0)
        index = np.repeat(np.arange(len(members)), d)
        c_t = stack([conds[k][0] for k in members], axis=0)[index]
        c_i = None if key[2] is None else stack([conds[k][1] for k in members], axis=0)[index]
        loss = training_loss(model.eps, x0, c_t, c_i, t, eps, model.schedule) * (n / rows)
        total = loss if total is None else total + loss
    return total, examples


def _read_log(path: Path, before: int) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return [row for row in csv.DictReader(fh) if int(row["step"]) < before]


def run_stage(plan: StagePlan, data: TrainingData, workdir, cfg: ModelConfig = ModelConfig(),
              resume: bool = False, init=None, log_path=None, progress=None) -> tuple[MultiRefModel, list]:
    """Train one stage; writes ``stage{k}.ezrf``, a resume file and a loss CSV.

    Returns the trained model and the loss log rows ``(step, stage, loss, lr)``.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    log_path = Path(log_path) if log_path else workdir / f"stage{plan.stage}_loss.csv"
    model = load_stage_input(plan, cfg, init, workdir)
    model.set_trainable(plan.trainable)
    params = [p for _, p in model.named_parameters() if p.trainable]
    optim = Adam(params, lr=plan.lr, grad_clip=plan.grad_clip)
    start = 0
    if resume and resume_path(workdir, plan.stage).exists():
        extra = model.load(resume_path(workdir, plan.stage))
        model.set_trainable(plan.trainable)
        optim.load_state_arrays({k: v for k, v in extra.items() if k.startswith("optim.")})
        start = int(extra["train.step"][0])
    rows = _read_log(log_path, start) if start else []

    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
        for row in rows:
            writer.writerow([row[k] for k in LOG_HEADER])
        rows = [(int(r["step"]), plan.stage, float(r["loss"]), float(r["lr"])) for r in rows]
        for step in range(start, plan.steps):
            rng = step_rng(plan, step)
            optim.zero_grad()
            loss, _ = training_step(model, data, plan, rng)
            loss.backward()
            optim.step()
            value = float(loss.data)
            rows.append((step, plan.stage, value, plan.lr))
            writer.writerow([step, plan.stage, repr(value), repr(plan.lr)])
            if progress is not None:
                progress(step, value)
            if plan.save_every and (step + 1) % plan.save_every == 0 and step + 1 < plan.steps:
                fh.flush()
                _save_resume(model, optim, workdir, plan, step + 1)
    _save_resume(model, optim, workdir, plan, max(start, plan.steps))
    model.save(checkpoint_path(workdir, plan.stage))
    return model, rows


def _save_resume(model, optim, workdir, plan, step: int) -> None:
    extra = dict(optim.state_arrays())
    extra["train.step"] = np.array([step], dtype=np.float64)
    model.save(resume_path(workdir, plan.stage), extra)


def run_pipeline(data: TrainingData, workdir, cfg: ModelConfig = ModelConfig(), stages=(0, 1, 2, 3),
                 plans: dict | None = None, progress=None) -> dict:
    """Run the listed stages in order; returns ``{stage: loss rows}``."""
    logs = {}
    for stage in stages:
        plan = (plans or {}).get(stage) or default_plan(stage)
        _, logs[stage] = run_stage(plan, data, workdir, cfg, progress=progress)
    return logs


def loss_window_means(rows, window: int = 100) -> tuple[float, float]:
    losses = np.array([r[2] for r in rows])
    return float(losses[:window].mean()), float(losses[-window:].mean())


__all__ = [
    "DropoutConfig", "StagePlan", "TrainingData", "MissingCheckpointError", "STAGE_PATTERNS",
    "apply_condition_dropout", "draw_dropout", "default_plan", "new_training_model",
    "run_stage", "run_pipeline", "sample_multi_ref_batch", "single_ref_batch", "subject_crop",
    "square_example", "checkpoint_path", "resume_path", "loss_window_means", "training_step",
    "step_rng", "load_stage_input",
]
