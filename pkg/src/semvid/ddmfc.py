"""Decoupled diffusion multi-frame compensation.

Each P frame is regenerated at the receiver from the received I frame and its
received residual.  The diffusion target and the injected noise are both
split with sqrt(lambda) / sqrt(1-lambda) weights into a base part (shared
across the GoP, derived from the I-frame chain) and a per-frame residual
part.  The base chain runs once per GoP; its predicted noises are cached and
reused by every P-frame chain, which makes the P frames independent of each
other given the cache.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .channel import ChannelRealization
from .diffusion import (
    NoiseSchedule,
    NoisePredictor,
    SteeringConfig,
    reverse_step_reference,
    steering_term,
)

__all__ = [
    "CompensationParams",
    "DdmfcTrace",
    "compose_p_frame",
    "start_point",
    "combine_noise",
    "remove_base_noise",
    "reverse_step_p",
    "final_step",
    "run_base_chain",
    "ddmfc_sample",
]


@dataclass
class CompensationParams:
    """Sampling hyperparameters: frame weight, steering scale, variance, depth."""

    lambda_i: float = 0.7
    k_of_t: Callable[[int], float] = lambda t: 0.3
    sigma_t: float = 0.0
    start_step: int = 10

    def __post_init__(self):
        if not 0.0 <= self.lambda_i <= 1.0:
            raise ValueError(f"lambda_i must be in [0, 1], got {self.lambda_i}")
        if self.sigma_t < 0:
            raise ValueError(f"sigma_t must be >= 0, got {self.sigma_t}")
        if self.start_step < 0:
            raise ValueError(f"start_step must be >= 0, got {self.start_step}")


@dataclass
class DdmfcTrace:
    """Optional per-step diagnostics for one P-frame chain."""

    t: list = field(default_factory=list)
    z_t: list = field(default_factory=list)
    z_prime_t: list = field(default_factory=list)
    base_noise: list = field(default_factory=list)
    residual_noise: list = field(default_factory=list)
    steering_mag: list = field(default_factory=list)

    def record(self, t, z_t, z_prime_t, base, residual, steer_mag):
        self.t.append(t)
        self.z_t.append(np.array(z_t))
        self.z_prime_t.append(np.array(z_prime_t))
        self.base_noise.append(np.array(base))
        self.residual_noise.append(np.array(residual))
        self.steering_mag.append(float(steer_mag))

    def __len__(self) -> int:
        return len(self.t)


def _check_lambda(lambda_i: float):
    if not 0.0 <= lambda_i <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lambda_i}")


def compose_p_frame(
    f_ref: np.ndarray, r_i: np.ndarray, lambda_i: float
) -> np.ndarray:
    """sqrt(lambda) f_ref + sqrt(1-lambda) r_i, the decoupled diffusion target."""
    _check_lambda(lambda_i)
    if f_ref.shape != r_i.shape:
        raise ValueError(f"shape mismatch {f_ref.shape} vs {r_i.shape}")
    return np.sqrt(lambda_i) * f_ref + np.sqrt(1.0 - lambda_i) * r_i


def start_point(
    f_ref_rx: np.ndarray, r_rx: np.ndarray, lambda_i: float, sigma2: float
) -> np.ndarray:
    """Normalized received composite frame: the z_m of the P-frame chain.

    (1/sqrt(1+sigma^2)) (sqrt(lambda) f_ref_rx + sqrt(1-lambda) r_rx); the
    normalization matches the forward-process distribution at the step m
    where abar_m = 1/(1+sigma^2).
    """
    composite = compose_p_frame(f_ref_rx, r_rx, lambda_i)
    return composite / np.sqrt(1.0 + sigma2)


def combine_noise(
    eps_ref: np.ndarray, phi: np.ndarray, lambda_i: float
) -> np.ndarray:
    """Total noise sqrt(lambda) eps_ref + sqrt(1-lambda) phi."""
    _check_lambda(lambda_i)
    if eps_ref.shape != phi.shape:
        raise ValueError(f"shape mismatch {eps_ref.shape} vs {phi.shape}")
    return np.sqrt(lambda_i) * eps_ref + np.sqrt(1.0 - lambda_i) * phi


def remove_base_noise(
    z_t: np.ndarray,
    eps_ref_t: np.ndarray,
    lambda_i: float,
    t: int,
    sched: NoiseSchedule,
    chan: ChannelRealization,
) -> np.ndarray:
    """Strip the shared base-noise contribution before residual prediction."""
    _check_lambda(lambda_i)
    if not 1 <= t <= sched.total_steps:
        raise ValueError(f"t must be in [1, {sched.total_steps}], got {t}")
    ab = sched.abar(t)
    return z_t - np.sqrt(lambda_i) * np.sqrt(1.0 - ab) * (chan.hn * eps_ref_t)


def reverse_step_p(
    z_t: np.ndarray,
    z_prime_t: np.ndarray,
    eps_ref_t: np.ndarray,
    residual_predictor: NoisePredictor,
    previous_frames: Sequence[np.ndarray],
    params: CompensationParams,
    t: int,
    sched: NoiseSchedule,
    chan: ChannelRealization,
    rng: Optional[np.random.Generator] = None,
    trace: Optional[DdmfcTrace] = None,
) -> np.ndarray:
    """One decoupled reverse step for a P frame (t >= 2).

    The residual predictor sees the base-stripped sample z'_t; its output is
    recombined with the cached base noise and applied through the same update
    as the reference chain, minus the multi-frame steering term.
    """
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    phi = residual_predictor.predict(z_prime_t, t, context=previous_frames)
    eps_total = combine_noise(eps_ref_t, phi, params.lambda_i)

    ab_t = sched.abar(t)
    ab_prev = sched.abar(t - 1)
    sig = params.sigma_t
    if 1.0 - ab_prev - sig**2 < 0:
        raise ValueError(f"sigma_t^2 = {sig**2} exceeds 1 - abar_(t-1) = {1 - ab_prev}")
    scaled = chan.hn * eps_total
    x0_est = (z_t - np.sqrt(1.0 - ab_t) * scaled) / np.sqrt(ab_t)
    out = np.sqrt(ab_prev) * x0_est + np.sqrt(1.0 - ab_prev - sig**2) * scaled
    if sig > 0:
        if rng is None:
            raise ValueError("sigma_t > 0 requires an rng")
        out = out + sig * rng.normal(0.0, 1.0, out.shape)

    cfg = SteeringConfig(
        k_of_t=params.k_of_t,
        v1_kind="mse_prev" if len(previous_frames) > 0 else "none",
    )
    steer = steering_term(z_t, previous_frames, cfg, t)
    out = out - steer
    if trace is not None:
        trace.record(t, z_t, z_prime_t, eps_ref_t, phi, np.linalg.norm(steer))
    return out


def final_step(
    z_1: np.ndarray,
    z_prime_1: np.ndarray,
    eps_ref_1: np.ndarray,
    residual_predictor: NoisePredictor,
    previous_frames: Sequence[np.ndarray],
    params: CompensationParams,
    sched: NoiseSchedule,
    chan: ChannelRealization,
    trace: Optional[DdmfcTrace] = None,
) -> np.ndarray:
    """Closing inversion at t = 1: (z_1 - sqrt(1-abar_1) hn*eps_1) / sqrt(abar_1)."""
    phi = residual_predictor.predict(z_prime_1, 1, context=previous_frames)
    eps_total = combine_noise(eps_ref_1, phi, params.lambda_i)
    ab1 = sched.abar(1)
    out = (z_1 - np.sqrt(1.0 - ab1) * (chan.hn * eps_total)) / np.sqrt(ab1)
    if trace is not None:
        trace.record(1, z_1, z_prime_1, eps_ref_1, phi, 0.0)
    return out


def run_base_chain(
    f_ref_rx: np.ndarray,
    base_predictor: NoisePredictor,
    params: CompensationParams,
    sched: NoiseSchedule,
    chan: ChannelRealization,
    rng: Optional[np.random.Generator] = None,
) -> dict:
    """Run the reference chain from z_m = f_ref_rx, caching eps_t^ref.

    Returns {t: eps_ref_t} for t = m..1.  The cache is computed once per GoP
    and shared by all P frames, so the base predictor runs exactly m times
    regardless of how many P frames the GoP has.
    """
    m = params.start_step
    if m > sched.total_steps:
        raise ValueError(f"start_step {m} exceeds total_steps {sched.total_steps}")
    cache: dict = {}
    z = np.asarray(f_ref_rx, dtype=float)
    for t in range(m, 0, -1):
        eps_out: list = []
        z = reverse_step_reference(
            z, t, base_predictor, chan, sched,
            sigma_t=params.sigma_t, rng=rng, eps_out=eps_out,
        )
        cache[t] = eps_out[0]
    return cache


def ddmfc_sample(
    f_ref_rx: np.ndarray,
    r_rx: np.ndarray,
    previous_frames: Sequence[np.ndarray],
    base_predictor: NoisePredictor,
    residual_predictor: NoisePredictor,
    params: CompensationParams,
    sched: NoiseSchedule,
    chan: ChannelRealization,
    rng: Optional[np.random.Generator] = None,
    base_cache: Optional[dict] = None,
    record_trace: bool = False,
) -> tuple[np.ndarray, DdmfcTrace]:
    """Full compensation of one P frame (the sampling loop of the receiver).

    Runs (or reuses) the base chain cache, then the P-frame chain from the
    normalized received composite down to t = 1.  With start_step = 0 the
    start point is returned unchanged (nothing to sample).  A GoP whose first
    P frame has no reconstructed history falls back to unsteered sampling.
    """
    m = params.start_step
    if m > sched.total_steps:
        raise ValueError(f"start_step {m} exceeds total_steps {sched.total_steps}")
    trace = DdmfcTrace()
    z = start_point(f_ref_rx, r_rx, params.lambda_i, chan.sigma2)
    if m == 0:
        return z, trace

    if base_cache is None:
        base_cache = run_base_chain(f_ref_rx, base_predictor, params, sched, chan, rng)

    eff = params
    if len(previous_frames) == 0:
        eff = CompensationParams(
            lambda_i=params.lambda_i, k_of_t=lambda t: 0.0,
            sigma_t=params.sigma_t, start_step=params.start_step,
        )
    tr = trace if record_trace else None
    for t in range(m, 1, -1):
        z_prime = remove_base_noise(z, base_cache[t], eff.lambda_i, t, sched, chan)
        z = reverse_step_p(
            z, z_prime, base_cache[t], residual_predictor, previous_frames,
            eff, t, sched, chan, rng=rng, trace=tr,
        )
    z_prime = remove_base_noise(z, base_cache[1], eff.lambda_i, 1, sched, chan)
    out = final_step(
        z, z_prime, base_cache[1], residual_predictor, previous_frames,
        eff, sched, chan, trace=tr,
    )
    if not record_trace:
        # still report step count without holding per-step arrays
        trace.t = list(range(m, 0, -1))
    return out, trace
