"""Pixel-space DDPM noising, the epsilon-prediction loss, and a guided DDIM sampler.

Timesteps index the schedule tables ``0 .. T-1``.  The clean boundary
(``alpha_bar = 1``) is addressed as ``t = -1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor, mse_loss, no_grad
from .images import black_image


@dataclass(frozen=True)
class NoiseSchedule:
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta: np.ndarray
    posterior_sigma: np.ndarray

    @property
    def T(self) -> int:
        return len(self.alpha)

    def alpha_bar_at(self, t) -> np.ndarray:
        t = np.asarray(t)
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t + 1]


REFERENCE_T = 1000
REFERENCE_BETAS = (1e-4, 0.02)


def scaled_betas(T: int) -> tuple[float, float]:
    """The 1000-step endpoints ``(1e-4, 0.02)`` rescaled so that ``T`` steps reach
    about the same terminal noise level."""
    k = REFERENCE_T / T
    return REFERENCE_BETAS[0] * k, min(REFERENCE_BETAS[1] * k, 0.999)


def make_noise_schedule(T: int = 200, beta_start: float | None = None,
                        beta_end: float | None = None) -> NoiseSchedule:
    """Linear-beta schedule with running-product ``alpha_bar`` (float64).

    Omitted endpoints default to :func:`scaled_betas`.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    default_start, default_end = scaled_betas(T)
    beta_start = default_start if beta_start is None else beta_start
    beta_end = default_end if beta_end is None else beta_end
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_sigma = np.sqrt((1.0 - prev) / (1.0 - alpha_bar) * beta)
    return NoiseSchedule(alpha, alpha_bar, beta, posterior_sigma)


def _check_t(t, schedule: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < -1) or np.any(t >= schedule.T):
        raise ValueError(f"timestep out of range [-1, {schedule.T}): {t}")
    return t


def forward_diffuse(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Sample ``x_t`` from ``q(x_t | x_0)`` given the noise ``eps``.

    ``t`` may be a scalar or one timestep per leading batch entry.
    """
    t = _check_t(t, schedule)
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    ab = schedule.alpha_bar_at(t)
    ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    out = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return out.astype(np.result_type(x0.dtype, eps.dtype), copy=False)


def forward_step(x_prev, t, noise, schedule: NoiseSchedule) -> np.ndarray:
    """One transition of the Markov chain ``q(x_t | x_{t-1})``."""
    t = _check_t(t, schedule)
    a = schedule.alpha[t]
    return np.sqrt(a) * np.asarray(x_prev) + np.sqrt(1.0 - a) * np.asarray(noise)


def training_loss(model: Callable, x0, c_t, c_i, t, eps,
                  schedule: NoiseSchedule) -> Tensor:
    """Mean squared error between ``eps`` and the model's noise prediction."""
    x_t = forward_diffuse(x0, t, eps, schedule)
    pred = model(x_t, np.asarray(t), c_t, c_i)
    if not isinstance(pred, Tensor):
        pred = Tensor(pred)
    if pred.shape != np.shape(eps):
        raise ValueError(f"prediction shape {pred.shape} != noise shape {np.shape(eps)}")
    return mse_loss(pred, np.asarray(eps, dtype=pred.dtype))


def cfg_predict(eps_cond, eps_uncond, scale: float):
    """Classifier-free guidance: ``eps_uncond + scale * (eps_cond - eps_uncond)``.

    Written as a convex-style blend so that scales 0 and 1 return their
    operand exactly.
    """
    return (1.0 - scale) * eps_uncond + scale * eps_cond


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 7.5
    steps: int = 30
    eta: float = 0.0
    uncond: str = "joint"
    clip_denoised: bool = True

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError(f"guidance scale must be >= 0, got {self.scale}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.eta != 0.0:
            raise ValueError("only deterministic DDIM (eta=0) is supported")
        if self.uncond not in ("joint", "image", "text"):
            raise ValueError(f"unknown unconditional branch {self.uncond!r}")


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Evenly spaced timesteps over ``[0, T)``, returned in descending order."""
    if steps > T:
        raise ValueError(f"steps ({steps}) cannot exceed T ({T})")
    ts = np.round(np.linspace(0, T - 1, steps)).astype(np.int64)
    return ts[::-1].copy()


def unconditional_pair(c_t, c_i, nulls, mode: str):
    """Conditions for the guidance branch, given the ``(text, image)`` nulls."""
    c_t_null, c_i_null = nulls
    if mode == "joint":
        return c_t_null, c_i_null
    if mode == "image":
        return c_t, c_i_null
    return c_t_null, c_i


def ddim_sample(model: Callable, c_t, c_i, cfg: GuidanceConfig,
                schedule: NoiseSchedule, seed: int, shape: tuple,
                nulls=None) -> np.ndarray:
    """Deterministic DDIM with classifier-free guidance.

    ``model(x_t, t, c_t, c_i)`` predicts noise for a batch; ``shape`` is the
    batched image shape ``(B, H, W, C)``.  ``nulls`` supplies the
    unconditional ``(c_t, c_i)``; it may be omitted when ``cfg.scale == 1``.
    """
    ts = ddim_timesteps(schedule.T, cfg.steps)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    guided = cfg.scale != 1.0
    if guided and nulls is None:
        raise ValueError("guidance scale != 1 needs null conditions")
    if guided:
        u_t, u_i = unconditional_pair(c_t, c_i, nulls, cfg.uncond)
    batch = shape[0]
    with no_grad():
        for i, t in enumerate(ts):
            tt = np.full(batch, t, dtype=np.int64)
            eps = _as_array(model(x, tt, c_t, c_i))
            if guided:
                eps = cfg_predict(eps, _as_array(model(x, tt, u_t, u_i)), cfg.scale)
            ab = schedule.alpha_bar[t]
            ab_prev = schedule.alpha_bar[ts[i + 1]] if i + 1 < len(ts) else 1.0
            x0 = (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
            if cfg.clip_denoised:
                # keep the update consistent with the clipped estimate
                x0 = np.clip(x0, -1.0, 1.0)
                eps = (x - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
            x = np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps
    return np.clip(x, -1.0, 1.0)


def _as_array(value) -> np.ndarray:
    return value.data.astype(np.float64) if isinstance(value, Tensor) else np.asarray(value, np.float64)


def null_conditions(text_condition: Callable, image_condition: Callable, image_side: int = 16):
    """Text null (empty prompt) and image null (black square, empty prompt).

    Training-time condition dropout and the guidance branch both take their
    nulls from here.
    """
    return text_condition(""), image_condition([black_image(image_side)], "")
