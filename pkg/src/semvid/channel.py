"""Rayleigh fading channel with MMSE equalization.

The channel carries real vectors of even length L, interpreted as L/2 complex
symbols (first half = real parts, second half = imaginary parts).  One fading
realization is drawn per GoP and reused for every frame in it.  Equalization
folds the fading and the MMSE coefficients into two real diagonals:

    hs[j] = g_j^2 / (g_j^2 + 2 sigma^2)     (signal gain)
    hn[j] = g_j   / (g_j^2 + 2 sigma^2)     (noise gain)

with g = [|h|; |h|] the magnitude of the fading taps stacked twice, so the
received frame is  hs * f + hn * n  with n ~ N(0, sigma^2) per real dimension
(the real/imaginary split of complex noise CN(0, 2 sigma^2)).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ChannelRealization",
    "sample_rayleigh",
    "snr_to_sigma2",
    "make_realization",
    "transmit_equalized",
    "pack_complex",
    "unpack_complex",
]


@dataclass(frozen=True)
class ChannelRealization:
    """Immutable per-GoP channel state: fading taps plus equalizer diagonals."""

    h: np.ndarray        # complex, length L/2
    sigma2: float        # per-real-dimension noise variance
    hs: np.ndarray = field(repr=False)  # real, length L
    hn: np.ndarray = field(repr=False)  # real, length L

    @property
    def length(self) -> int:
        return 2 * self.h.shape[0]

    @property
    def h_d(self) -> np.ndarray:
        """Stacked tap magnitudes [|h|; |h|], length L."""
        g = np.abs(self.h)
        return np.concatenate([g, g])


def sample_rayleigh(rng: np.random.Generator, half_len: int) -> np.ndarray:
    """Draw L/2 i.i.d. CN(0,1) fading taps (E|h|^2 = 1)."""
    if half_len < 1:
        raise ValueError(f"half_len must be >= 1, got {half_len}")
    re = rng.normal(0.0, np.sqrt(0.5), half_len)
    im = rng.normal(0.0, np.sqrt(0.5), half_len)
    return re + 1j * im


def snr_to_sigma2(snr_db: float) -> float:
    """Noise variance per real dimension for unit-power complex symbols.

    SNR = 1 / (2 sigma^2), so sigma^2 = 10^(-snr_db/10) / 2.  +inf dB maps
    to exactly 0 (noiseless).
    """
    return float(10.0 ** (-snr_db / 10.0) / 2.0)


def make_realization(h: np.ndarray, sigma2: float) -> ChannelRealization:
    """Build the equalized channel for fading taps h and noise variance sigma2."""
    if sigma2 < 0:
        raise ValueError(f"sigma2 must be >= 0, got {sigma2}")
    h = np.asarray(h, dtype=complex)
    g = np.abs(h)
    g = np.concatenate([g, g])  # h_d, length L
    denom = g * g + 2.0 * sigma2
    with np.errstate(invalid="ignore", divide="ignore"):
        hs = np.where(denom > 0, g * g / denom, 0.0)
        hn = np.where(denom > 0, g / denom, 0.0)
    return ChannelRealization(h=h, sigma2=float(sigma2), hs=hs, hn=hn)


def transmit_equalized(
    f: np.ndarray, chan: ChannelRealization, rng: np.random.Generator
) -> np.ndarray:
    """Send a length-L real frame through the equalized channel.

    Returns hs * f + hn * n with n_j ~ N(0, sigma^2) i.i.d.  With sigma2 = 0
    this is the identity map (no rng consumption is still performed for the
    noise draw, keeping rng usage independent of sigma2).
    """
    f = np.asarray(f, dtype=float)
    if f.shape != chan.hs.shape:
        raise ValueError(
            f"frame length {f.shape} does not match channel length {chan.hs.shape}"
        )
    n = rng.normal(0.0, 1.0, f.shape[0]) * np.sqrt(chan.sigma2)
    return chan.hs * f + chan.hn * n


def pack_complex(re_im: np.ndarray) -> np.ndarray:
    """Fold a length-L real vector into L/2 complex symbols.

    First half carries the real parts, second half the imaginary parts.
    """
    re_im = np.asarray(re_im)
    n = re_im.shape[0]
    if n % 2 != 0:
        raise ValueError(f"length must be even, got {n}")
    half = n // 2
    return re_im[:half] + 1j * re_im[half:]


def unpack_complex(symbols: np.ndarray) -> np.ndarray:
    """Inverse of pack_complex: [Re(s); Im(s)] as one real vector."""
    symbols = np.asarray(symbols)
    return np.concatenate([symbols.real, symbols.imag])
