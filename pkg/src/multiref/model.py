"""Encoder + denoiser bundle with a selectable multi-reference aggregation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import checkpoint
from .autodiff import Module, Tensor, flop_scope, no_grad
from .denoiser import Denoiser, DenoiserConfig, has_lora, install_adapters, lora_wrap
from .diffusion import GuidanceConfig, NoiseSchedule, ddim_sample, make_noise_schedule, null_conditions
from .encoder import EncoderConfig, ReferenceEncoder, TextConditioner, average_baseline, concat_baseline

AGGREGATIONS = ("tokens", "average", "concat")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    aggregation: str = "tokens"
    image_side: int = 16
    lora_rank: int = 32
    T: int = 200
    # None: the 1000-step endpoints rescaled to T
    beta_start: float | None = None
    beta_end: float | None = None

    def __post_init__(self):
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        if self.encoder.cond_dim != self.denoiser.cond_dim:
            raise ValueError("encoder and denoiser condition widths differ")

    def without_aggregation(self) -> dict:
        out = asdict(self)
        out.pop("aggregation")
        return out


class MultiRefModel(Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        self.encoder = ReferenceEncoder(cfg.encoder)
        self.text_cond = TextConditioner(cfg.encoder.dim, cfg.encoder.cond_dim, cfg.encoder.heads,
                                         seed=cfg.denoiser.seed + 1)
        self.denoiser = Denoiser(cfg.denoiser)
        self._schedule = make_noise_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
        self.assign_names()

    @property
    def schedule(self) -> NoiseSchedule:
        return self._schedule

    def with_aggregation(self, aggregation: str) -> "MultiRefModel":
        """A new model sharing nothing, same weights, different aggregation."""
        other = MultiRefModel(replace(self.cfg, aggregation=aggregation))
        other.match_structure(self)
        other.load_state_dict(self.state_dict())
        return other

    # -- structure -----------------------------------------------------------
    def install_adapters(self) -> None:
        install_adapters(self.denoiser)
        self.assign_names()

    def install_lora(self, rank: int | None = None) -> None:
        lora_wrap(self.denoiser, rank or self.cfg.lora_rank)
        self.assign_names()

    @property
    def has_adapters(self) -> bool:
        return self.denoiser.has_adapters

    @property
    def has_lora(self) -> bool:
        return has_lora(self.denoiser)

    def match_structure(self, other: "MultiRefModel") -> None:
        if other.has_adapters and not self.has_adapters:
            self.install_adapters()
        if other.has_lora and not self.has_lora:
            self.install_lora()

    def ensure_structure(self, adapters: bool, lora: bool) -> None:
        if adapters and not self.has_adapters:
            self.install_adapters()
        if lora and not self.has_lora:
            self.install_lora()

    # -- conditioning --------------------------------------------------------
    def text_condition(self, prompt: str) -> Tensor:
        with flop_scope("text"):
            return self.text_cond(prompt)

    def image_condition(self, refs, prompt: str = "") -> Tensor:
        refs = list(refs)
        with flop_scope("encoder"):
            if self.cfg.aggregation == "average":
                return average_baseline(self.encoder, refs, prompt)
            if self.cfg.aggregation == "concat":
                return concat_baseline(self.encoder, refs, prompt)
            return self.encoder.encode(refs, prompt)

    def token_count(self, num_refs: int) -> int:
        """Rows of ``c_i`` for ``num_refs`` references under this aggregation."""
        n = self.cfg.encoder.num_ref_tokens
        return n * num_refs if self.cfg.aggregation == "concat" else n

    def null_conditions(self):
        return null_conditions(self.text_condition, self.image_condition, self.cfg.image_side)

    def eps(self, x_t, t, c_t: Tensor, c_i: Tensor | None) -> Tensor:
        with flop_scope("denoiser"):
            return self.denoiser(x_t, t, c_t, c_i)

    __call__ = eps

    def forward(self, x_t, t, c_t, c_i):
        return self.eps(x_t, t, c_t, c_i)

    # -- sampling ------------------------------------------------------------
    def sample(self, refs, prompt: str, guidance: GuidanceConfig = GuidanceConfig(),
               seed: int = 0, shape: tuple | None = None, num_samples: int = 1) -> np.ndarray:
        """Generate ``num_samples`` images of ``shape = (H, W, C)``.

        With no references the image branch receives the black-image null.
        """
        refs = list(refs)
        shape = shape or (self.cfg.image_side, self.cfg.image_side, 3)
        with no_grad():
            nulls = self.null_conditions()
            c_t = self.text_condition(prompt)
            c_i = self.image_condition(refs, prompt) if refs else nulls[1]
            return ddim_sample(self.eps, c_t, c_i, guidance, self.schedule, seed,
                               (num_samples,) + tuple(shape), nulls=nulls)

    # -- persistence ---------------------------------------------------------
    def save(self, path, extra: dict | None = None) -> None:
        tensors = dict(self.state_dict())
        if extra:
            tensors.update(extra)
        checkpoint.save(path, tensors)

    @staticmethod
    def structure_of(tensors: dict) -> tuple[bool, bool]:
        names = list(tensors)
        return (any(".adapter." in n for n in names), any(".lora." in n for n in names))

    def load(self, path, strict: bool = True) -> dict:
        """Load model tensors from ``path``; returns any non-model records."""
        tensors = checkpoint.load(path)
        adapters, lora = self.structure_of(tensors)
        self.ensure_structure(adapters, lora)
        own = {n for n, _ in self.named_parameters()}
        model_part = {k: v for k, v in tensors.items() if k in own or k.startswith(("encoder.", "text_cond.", "denoiser."))}
        self.load_state_dict(model_part, strict=strict)
        return {k: v for k, v in tensors.items() if k not in model_part}
