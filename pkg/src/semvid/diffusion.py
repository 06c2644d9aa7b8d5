"""Diffusion schedule, channel-aligned forward process and reverse sampling.

The forward process injects noise through the equalized-noise diagonal hn, so
that at the matched step m (abar_m = 1/(1 + sigma^2)) the diffusion state is
distributed like the normalized channel output.  The reverse step is the
deterministic-capable update

    z_{t-1} = sqrt(abar_{t-1}) * (z_t - sqrt(1-abar_t) hn*eps) / sqrt(abar_t)
            + sqrt(1 - abar_{t-1} - sigma_t^2) hn*eps + sigma_t * xi

optionally followed by energy-gradient steering toward previously
reconstructed frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .channel import ChannelRealization

__all__ = [
    "NoiseSchedule",
    "SteeringConfig",
    "NoisePredictor",
    "build_schedule",
    "find_start_step",
    "forward_sample",
    "reverse_step_reference",
    "steering_term",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Noise decay hyperparameters a_t and their running products abar_t.

    alpha has length T (a_1..a_T); alpha_bar has length T+1 with
    alpha_bar[0] = 1 by convention (t = 0 means clean).
    """

    total_steps: int
    alpha: np.ndarray
    alpha_bar: np.ndarray
    betas: np.ndarray = field(repr=False)

    def abar(self, t: int) -> float:
        return float(self.alpha_bar[t])


class NoisePredictor(Protocol):
    """Anything that estimates the injected noise at step t."""

    def predict(
        self, z: np.ndarray, t: int, context: Optional[Sequence[np.ndarray]] = None
    ) -> np.ndarray: ...


@dataclass
class SteeringConfig:
    """Energy-gradient steering: scale k(t) and the energy choices.

    v1_kind "mse_prev" uses V1(z) = (1/L) ||z - f_prev||^2 against the most
    recent previously reconstructed frame; "none" disables steering.  V2 is
    identically zero (the hook is kept for future energies and evaluated
    lazily at the pre-steering candidate).
    """

    k_of_t: Callable[[int], float] = lambda t: 0.0
    v1_kind: str = "mse_prev"
    v2_grad: Optional[Callable[[np.ndarray, int], np.ndarray]] = None


def build_schedule(
    total_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    """Linear beta schedule; a_t = 1 - beta_t, abar_t = prod a_i."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )
    betas = np.linspace(beta_start, beta_end, total_steps)
    alpha = 1.0 - betas
    alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
    return NoiseSchedule(
        total_steps=total_steps, alpha=alpha, alpha_bar=alpha_bar, betas=betas
    )


def find_start_step(sigma2: float, sched: NoiseSchedule) -> int:
    """Step m whose abar_m is closest to 1/(1 + sigma2); ties go to smaller m.

    At that step the forward distribution matches the normalized received
    frame, so reverse sampling can start from the channel output directly.
    """
    if sigma2 < 0:
        raise ValueError(f"sigma2 must be >= 0, got {sigma2}")
    target = 1.0 / (1.0 + sigma2)
    return int(np.argmin(np.abs(sched.alpha_bar - target)))


def forward_sample(
    z_start: np.ndarray,
    t: int,
    eps: np.ndarray,
    chan: ChannelRealization,
    sched: NoiseSchedule,
) -> np.ndarray:
    """sqrt(abar_t) z_start + sqrt(1-abar_t) hn*eps.  t = 0 returns z_start."""
    if not 0 <= t <= sched.total_steps:
        raise ValueError(f"t must be in [0, {sched.total_steps}], got {t}")
    ab = sched.abar(t)
    return np.sqrt(ab) * z_start + np.sqrt(1.0 - ab) * (chan.hn * eps)


def reverse_step_reference(
    z_t: np.ndarray,
    t: int,
    predictor: NoisePredictor,
    chan: ChannelRealization,
    sched: NoiseSchedule,
    sigma_t: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    eps_out: Optional[list] = None,
) -> np.ndarray:
    """One unconditional reverse step for the reference (I-frame) chain.

    With sigma_t = 0 the step is deterministic.  If eps_out is given, the
    predicted noise is appended to it (used to cache base noise per GoP).
    """
    if not 1 <= t <= sched.total_steps:
        raise ValueError(f"t must be in [1, {sched.total_steps}], got {t}")
    if sigma_t < 0:
        raise ValueError(f"sigma_t must be >= 0, got {sigma_t}")
    ab_t = sched.abar(t)
    ab_prev = sched.abar(t - 1)
    if 1.0 - ab_prev - sigma_t**2 < 0:
        raise ValueError(
            f"sigma_t^2 = {sigma_t**2} exceeds 1 - abar_(t-1) = {1 - ab_prev}"
        )
    eps = predictor.predict(z_t, t)
    if eps_out is not None:
        eps_out.append(eps)
    scaled = chan.hn * eps
    x0_est = (z_t - np.sqrt(1.0 - ab_t) * scaled) / np.sqrt(ab_t)
    out = np.sqrt(ab_prev) * x0_est + np.sqrt(1.0 - ab_prev - sigma_t**2) * scaled
    if sigma_t > 0:
        if rng is None:
            raise ValueError("sigma_t > 0 requires an rng")
        out = out + sigma_t * rng.normal(0.0, 1.0, out.shape)
    return out


def steering_term(
    z_t: np.ndarray,
    previous_frames: Sequence[np.ndarray],
    cfg: SteeringConfig,
    t: int,
) -> np.ndarray:
    """k(t) * grad V1(z_t), pulling the sample toward the latest frame.

    V1(z) = (1/L) ||z - f_prev||^2 with f_prev the most recent previously
    reconstructed semantic frame, so the gradient is (2/L) (z - f_prev).
    The V2 hook contributes nothing here (it acts on the candidate z_{t-1}
    and is zero in the default configuration).
    """
    k = cfg.k_of_t(t)
    if k < 0:
        raise ValueError(f"k(t) must be >= 0, got {k}")
    if cfg.v1_kind == "none" or k == 0.0:
        return np.zeros_like(z_t)
    if cfg.v1_kind != "mse_prev":
        raise ValueError(f"unknown v1_kind {cfg.v1_kind!r}")
    if len(previous_frames) == 0:
        raise ValueError("v1_kind 'mse_prev' requires at least one previous frame")
    f_prev = previous_frames[-1]
    return k * (2.0 / z_t.shape[0]) * (z_t - f_prev)
