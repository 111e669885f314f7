"""Flat ``section.key=value`` run configuration with typed, documented defaults."""

from __future__ import annotations

import os
from pathlib import Path

# key -> (default, type, description)
SETTINGS: dict[str, tuple] = {
    "seed": (0, int, "global seed"),
    # dataset generation and splits
    "data.groups": (200, int, "number of generated groups"),
    "data.min_group_size": (2, int, "smallest group (>= 2)"),
    "data.max_group_size": (8, int, "largest group (<= 28)"),
    "data.image_side": (16, int, "base image side in pixels"),
    "data.aspect_prob": (0.25, float, "probability of a non-square image"),
    "data.misalignment": (0.3, float, "fraction of groups with freely placed subjects"),
    "data.distractor_prob": (0.3, float, "probability of a distractor object per image"),
    "data.pixel_noise": (0.0, float, "std of iid per-pixel jitter"),
    "data.held_out_groups": (12, int, "groups reserved for zero-shot evaluation"),
    "data.held_in_groups": (30, int, "groups with one held-back evaluation target"),
    "data.filter": (False, bool, "apply probe-based consistency filtering"),
    "data.threshold_a": (0.3, float, "min group consistency under probe A"),
    "data.threshold_b": (0.3, float, "min group consistency under probe B"),
    "data.threshold_caption": (0.2, float, "min caption-image similarity under probe A"),
    # model
    "model.aggregation": ("tokens", str, "tokens | average | concat"),
    "model.num_ref_tokens": (64, int, "number of learned reference tokens N"),
    "model.ref_insert_depth": (1, int, "blocks from the end that see reference tokens"),
    "model.encoder_layers": (4, int, "reference encoder depth"),
    "model.bidirectional": ("full", str, "full | refs_only masking in aggregation blocks"),
    "model.lora_rank": (32, int, "LoRA rank for denoiser attention"),
    "model.T": (200, int, "diffusion timesteps"),
    # training
    "train.steps": (-1, int, "steps for the stage; -1 uses the stage default"),
    "train.lr": (-1.0, float, "learning rate; negative uses the stage default"),
    "train.examples": (0, int, "examples per step; 0 uses the stage default"),
    "train.noise_draws": (2, int, "noise/timestep draws per example"),
    "train.save_every": (500, int, "steps between resumable checkpoints"),
    "train.p_text": (0.05, float, "text-condition drop probability"),
    "train.p_image": (0.05, float, "image-condition drop probability"),
    "train.p_joint": (0.05, float, "joint drop probability"),
    "train.crop_prob": (0.5, float, "stage-2 probability of a subject-crop reference"),
    "train.augment": (True, bool, "stage-3 shuffle and truncation of references"),
    # sampling
    "sample.scale": (7.5, float, "classifier-free guidance scale"),
    "sample.steps": (30, int, "DDIM steps"),
    "sample.uncond": ("joint", str, "unconditional branch: joint | image | text"),
    "sample.num": (1, int, "images per invocation"),
    # evaluation
    "eval.samples": (2, int, "generated images per evaluation case"),
    "eval.workers": (1, int, "parallel evaluation workers"),
    "eval.max_cases": (0, int, "cap on evaluation cases; 0 means all"),
    "probe.steps": (400, int, "probe training steps"),
    "probe.groups": (300, int, "groups generated for probe training"),
    "probe.data_seed": (9001, int, "generator seed for probe data, disjoint from evaluation"),
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, value):
    default, kind, _ = SETTINGS[key]
    if isinstance(value, kind) and not (kind is int and isinstance(value, bool)):
        return value
    text = str(value).strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


class RunConfig:
    """Resolved settings: documented defaults, then a config file, then overrides."""

    def __init__(self, values: dict | None = None):
        self.values = {k: spec[0] for k, spec in SETTINGS.items()}
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key: str, value) -> None:
        if key not in SETTINGS:
            raise ConfigError(f"unknown setting {key!r}")
        self.values[key] = _coerce(key, value)

    def __getitem__(self, key: str):
        return self.values[key]

    def section(self, name: str) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            cfg.set(key, value)
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike | None, overrides: dict | None = None) -> "RunConfig":
        cfg = cls.parse(Path(path).read_text()) if path else cls()
        for key, value in (overrides or {}).items():
            if value is not None:
                cfg.set(key, value)
        return cfg

    def dumps(self) -> str:
        lines = []
        for key, (_, _, doc) in SETTINGS.items():
            value = self.values[key]
            text = str(value).lower() if isinstance(value, bool) else repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{key}={text}  # {doc}")
        return "\n".join(lines) + "\n"

    def echo(self, out_dir, name: str = "config.resolved.txt") -> Path:
        path = Path(out_dir) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path


def documented_defaults() -> str:
    return RunConfig().dumps()
