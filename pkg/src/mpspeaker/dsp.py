"""Framing, windowing, real FFTs, paired spectra, and cepstral smoothing.

This module is the numeric substrate for both feature front ends.  The
group-delay path needs two short-time spectra per frame: the transform X of
the windowed frame x[n] and the transform Y of the index-weighted sequence
n*x[n].  The spectral envelope used to tame the group-delay denominator
comes from low-quefrency cepstral liftering.

All transforms work on arbitrary even lengths (the 25 ms frame at 16 kHz is
400 samples, not a power of two) and return the L/2 + 1 nonnegative bins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class FrameSpec:
    """Analysis framing parameters.

    Defaults follow 25 ms windows with 10 ms shift at 16 kHz.  Pre-emphasis
    is applied inside each frame before windowing; the phase path should use
    ``preemphasis=0.0`` because the filter distorts the x[n] / n*x[n] pair.
    """

    frame_len: int = 400
    hop: int = 160
    window: str = "hamming"
    preemphasis: float = 0.97

    def __post_init__(self):
        if not (0 < self.hop <= self.frame_len):
            raise ValueError(f"need 0 < hop <= frame_len, got {self.hop}/{self.frame_len}")
        if self.frame_len % 2 != 0:
            raise ValueError(f"frame_len must be even, got {self.frame_len}")
        if not (0.0 <= self.preemphasis < 1.0):
            raise ValueError(f"preemphasis must be in [0, 1), got {self.preemphasis}")
        if self.window not in _WINDOWS:
            raise ValueError(f"unknown window {self.window!r}, want one of {sorted(_WINDOWS)}")

    def window_values(self):
        return _WINDOWS[self.window](self.frame_len)


_WINDOWS = {
    "hamming": np.hamming,
    "hann": np.hanning,
    "rect": np.ones,
}


def frame_signal(samples, spec: FrameSpec) -> np.ndarray:
    """Slice a signal into overlapping frames, pre-emphasize, and window.

    Returns a (T, frame_len) array with T = floor((N - frame_len)/hop) + 1.
    Pre-emphasis y[n] = x[n] - k*x[n-1] uses the sample just before the
    frame for the first difference (zero at the very start of the signal).
    """
    x = np.asarray(getattr(samples, "samples", samples), dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-d signal, got shape {x.shape}")
    n = len(x)
    L, hop = spec.frame_len, spec.hop
    if n < L:
        raise ValueError(f"signal of {n} samples is shorter than one {L}-sample frame")

    count = (n - L) // hop + 1
    offsets = np.arange(count) * hop
    frames = x[offsets[:, None] + np.arange(L)[None, :]]

    if spec.preemphasis > 0.0:
        prev = np.where(offsets > 0, x[np.maximum(offsets - 1, 0)], 0.0)
        shifted = np.empty_like(frames)
        shifted[:, 0] = prev
        shifted[:, 1:] = frames[:, :-1]
        frames = frames - spec.preemphasis * shifted

    return frames * spec.window_values()[None, :]


def rfft(frame, n=None) -> np.ndarray:
    """Real-input DFT returning bins k = 0 .. L/2.

    ``frame`` may be a single frame or a (T, L) stack; the transform runs
    along the last axis.  The transform length (after optional zero padding
    to ``n``) must be even and at least 2.
    """
    x = np.asarray(frame, dtype=np.float64)
    length = n if n is not None else x.shape[-1]
    if length < 2 or length % 2 != 0:
        raise ValueError(f"transform length must be even and >= 2, got {length}")
    return np.fft.rfft(x, n=length, axis=-1)


def irfft(spectrum, n) -> np.ndarray:
    """Inverse of :func:`rfft`, back to an even length-``n`` real signal."""
    if n < 2 or n % 2 != 0:
        raise ValueError(f"signal length must be even and >= 2, got {n}")
    return np.fft.irfft(np.asarray(spectrum), n=n, axis=-1)


def stft_pair(frame):
    """Spectra (X, Y) of a windowed frame and of its index-weighted copy.

    X is the transform of x[n], Y the transform of n*x[n] with n the
    within-frame index 0 .. L-1.  Analytically Y(w) = i * dX/dw, which is
    what makes the pair usable for group-delay computation.  Accepts a
    single frame or a (T, L) stack.
    """
    x = np.asarray(frame, dtype=np.float64)
    ramp = np.arange(x.shape[-1], dtype=np.float64)
    return rfft(x), rfft(x * ramp)


def cepstral_envelope(spectrum, lifter_len=30, floor_eps=1e-10) -> np.ndarray:
    """Smooth spectral envelope |S| via low-quefrency cepstral liftering.

    The log magnitude (floored at ``floor_eps``) is transformed to the
    cepstrum, quefrencies |q| < lifter_len are kept with unit weight, and
    the result is mapped back and exponentiated.  ``lifter_len=None``
    bypasses smoothing entirely and returns |X| + floor_eps, which is the
    identity setting used when the raw squared magnitude is wanted in a
    denominator.  Output is strictly positive for any finite input.

    Accepts a complex half-spectrum (or magnitude array) of length L/2 + 1,
    or a (T, L/2+1) stack.
    """
    mag = np.abs(np.asarray(spectrum))
    if lifter_len is None:
        return mag + floor_eps

    L = 2 * (mag.shape[-1] - 1)
    if not (0 < lifter_len < L // 2):
        raise ValueError(f"need 0 < lifter_len < {L // 2}, got {lifter_len}")

    log_mag = np.log(mag + floor_eps)
    ceps = irfft(log_mag, n=L)
    q = np.arange(L)
    keep = np.minimum(q, L - q) < lifter_len
    smooth_log = rfft(ceps * keep).real
    return np.exp(smooth_log)
