"""The two network inputs: 192-dim FBank(+deltas, CMVN) and 201-dim MODGD.

FBank path: 25 ms / 10 ms frames with 0.97 pre-emphasis and a Hamming
window, zero-padded to a 512-point transform, 64 peak-normalized mel
triangles over 0..8 kHz, log energies, delta and double-delta appended,
then utterance-level CMVN per dimension.

MODGD path: same framing but no pre-emphasis, 400-point transform (so the
spectrum has exactly 201 bins), group delay from the (X, Y) spectrum pair
with a cepstrally smoothed denominator raised to 2*gamma, spike compression
tau * |tau|^(alpha-1), and per-bin standardization over the utterance.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from mpspeaker import dsp
from mpspeaker.dsp import FrameSpec

N_MELS = 64
FBANK_NFFT = 512
FBANK_DIM = 3 * N_MELS
MODGD_DIM = 201

LOG_FLOOR = 1e-10
VAR_FLOOR = 1e-8

FBANK_KIND = "fbank192"
MODGD_KIND = "modgd201"
_KIND_TAGS = {FBANK_KIND: 1, MODGD_KIND: 2}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}
_MAGIC = b"MPF1"


def fbank_frame_spec() -> FrameSpec:
    return FrameSpec(frame_len=400, hop=160, window="hamming", preemphasis=0.97)


def modgd_frame_spec() -> FrameSpec:
    return FrameSpec(frame_len=400, hop=160, window="hamming", preemphasis=0.0)


def hz_to_mel(f):
    """Map Hz to mel: 2595 * log10(1 + f/700)."""
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("frequency must be nonnegative")
    return 2595.0 * np.log10(1.0 + f / 700.0)


def mel_to_hz(m):
    """Inverse of :func:`hz_to_mel`."""
    m = np.asarray(m, dtype=np.float64)
    if np.any(m < 0):
        raise ValueError("mel value must be nonnegative")
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


@dataclass
class MelFilterbank:
    """Triangular mel filters sampled on the FFT bin grid.

    Each filter is normalized so its largest sampled weight is exactly 1;
    centers (in Hz) are strictly increasing and weights vanish outside the
    triangle support.
    """

    n_filters: int
    n_fft: int
    sample_rate: int
    f_low: float
    f_high: float
    weights: np.ndarray      # (n_filters, n_fft//2 + 1)
    centers_hz: np.ndarray   # (n_filters,)
    start_bin: np.ndarray
    peak_bin: np.ndarray
    end_bin: np.ndarray


def mel_filterbank(
    n_filters=N_MELS, n_fft=FBANK_NFFT, sample_rate=16000, f_low=0.0, f_high=8000.0
) -> MelFilterbank:
    """Build peak-normalized triangular filters on mel-spaced centers."""
    n_bins = n_fft // 2 + 1
    mel_pts = np.linspace(hz_to_mel(f_low), hz_to_mel(f_high), n_filters + 2)
    hz_pts = mel_to_hz(mel_pts)
    bin_hz = np.arange(n_bins) * (sample_rate / n_fft)

    weights = np.zeros((n_filters, n_bins))
    for i in range(n_filters):
        lo, center, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        rising = (bin_hz - lo) / (center - lo)
        falling = (hi - bin_hz) / (hi - center)
        tri = np.maximum(0.0, np.minimum(rising, falling))
        peak = tri.max()
        if peak <= 0.0:
            raise ValueError(
                f"mel filter {i} has empty support; fewer filters or a larger n_fft needed"
            )
        weights[i] = tri / peak

    start = np.array([np.flatnonzero(w > 0)[0] for w in weights])
    end = np.array([np.flatnonzero(w > 0)[-1] for w in weights])
    peak = weights.argmax(axis=1)
    return MelFilterbank(
        n_filters, n_fft, sample_rate, f_low, f_high,
        weights, hz_pts[1:-1], start, peak, end,
    )


_DEFAULT_FBANK = None


def default_mel_filterbank() -> MelFilterbank:
    global _DEFAULT_FBANK
    if _DEFAULT_FBANK is None:
        _DEFAULT_FBANK = mel_filterbank()
    return _DEFAULT_FBANK


def fbank_static(samples, spec: FrameSpec | None = None, bank: MelFilterbank | None = None):
    """Log mel energies per frame, before deltas and CMVN.  Shape (T, 64)."""
    spec = spec or fbank_frame_spec()
    bank = bank or default_mel_filterbank()
    frames = dsp.frame_signal(samples, spec)
    spectrum = dsp.rfft(frames, n=bank.n_fft)
    power = spectrum.real**2 + spectrum.imag**2
    return np.log(power @ bank.weights.T + LOG_FLOOR)


def delta(m, window=2):
    """Regression deltas with replicate padding at the edges.

    d_t = sum_{n=1..window} n * (c_{t+n} - c_{t-n}) / (2 * sum n^2)
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1:
        raise ValueError(f"expected a nonempty (T, F) matrix, got shape {m.shape}")
    padded = np.concatenate(
        [np.repeat(m[:1], window, axis=0), m, np.repeat(m[-1:], window, axis=0)], axis=0
    )
    denom = 2.0 * sum(n * n for n in range(1, window + 1))
    T = m.shape[0]
    out = np.zeros_like(m)
    for n in range(1, window + 1):
        out += n * (padded[window + n : window + n + T] - padded[window - n : window - n + T])
    return out / denom


def cmvn(m):
    """Per-dimension zero mean, unit variance over the utterance.

    Uses a variance floor of 1e-8 so constant dimensions map to zero.
    """
    m = np.asarray(m, dtype=np.float64)
    mean = m.mean(axis=0, keepdims=True)
    var = m.var(axis=0, keepdims=True)
    return (m - mean) / np.sqrt(var + VAR_FLOOR)


@dataclass
class FeatureMatrix:
    """T x F feature values plus their kind and framing provenance."""

    values: np.ndarray
    feature_kind: str
    frame_spec: FrameSpec = field(default_factory=FrameSpec)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"feature matrix must be 2-d, got shape {self.values.shape}")
        if self.feature_kind not in _KIND_TAGS:
            raise ValueError(f"unknown feature kind {self.feature_kind!r}")
        want = FBANK_DIM if self.feature_kind == FBANK_KIND else MODGD_DIM
        if self.values.shape[1] != want:
            raise ValueError(
                f"{self.feature_kind} wants {want} columns, got {self.values.shape[1]}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature matrix contains non-finite values")

    @property
    def shape(self):
        return self.values.shape


def compute_fbank(samples, spec: FrameSpec | None = None) -> FeatureMatrix:
    """192-dim FBank features: 64 log mel energies + delta + double delta, CMVN'd."""
    spec = spec or fbank_frame_spec()
    static = fbank_static(samples, spec)
    d1 = delta(static)
    d2 = delta(d1)
    feats = cmvn(np.concatenate([static, d1, d2], axis=1))
    return FeatureMatrix(feats, FBANK_KIND, spec)


@dataclass
class ModgdParams:
    """Shape parameters of the modified group delay.

    ``alpha`` compresses spikes (tau * |tau|^(alpha-1)), ``gamma`` shapes the
    smoothed-envelope denominator |S|^(2*gamma).  ``lifter_len=None`` skips
    cepstral smoothing (identity envelope), which recovers the raw
    group-delay formula when gamma is 1.  The denominator floor is relative
    to the frame's largest denominator value so results are gain invariant.
    """

    alpha: float = 0.4
    gamma: float = 0.9
    lifter_len: int | None = 30
    denom_floor: float = 1e-8

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.denom_floor <= 0.0:
            raise ValueError(f"denom_floor must be positive, got {self.denom_floor}")


def compute_group_delay(X, Y, params: ModgdParams | None = None):
    """Group delay tau from the paired spectra of x[n] and n*x[n].

    tau = (Re X * Re Y + Im X * Im Y) / max(|S|^(2*gamma), floor), where |S|
    is the cepstrally smoothed envelope of |X| and the floor is
    ``denom_floor`` times the largest denominator value in the frame.
    Operates on single spectra or (T, bins) stacks.
    """
    params = params or ModgdParams()
    X = np.asarray(X)
    Y = np.asarray(Y)
    if X.shape != Y.shape:
        raise ValueError(f"spectra must share a shape, got {X.shape} vs {Y.shape}")
    envelope = dsp.cepstral_envelope(X, lifter_len=params.lifter_len)
    denom = envelope ** (2.0 * params.gamma)
    floor = params.denom_floor * denom.max(axis=-1, keepdims=True)
    numer = X.real * Y.real + X.imag * Y.imag
    return numer / np.maximum(denom, floor)


def spike_compress(tau, alpha):
    """tau * |tau|^(alpha - 1), evaluated as sign(tau) * |tau|^alpha.

    The direct expression is a 0 * inf form at tau = 0; its limit is 0 for
    any alpha > 0, and the sign of tau is preserved.
    """
    return np.sign(tau) * np.abs(tau) ** alpha


def standardize_per_bin(m):
    """Zero mean, unit variance per frequency bin over the utterance."""
    return cmvn(m)


def compute_modgd(
    samples, params: ModgdParams | None = None, spec: FrameSpec | None = None
) -> FeatureMatrix:
    """201-dim standardized modified group delay features."""
    params = params or ModgdParams()
    spec = spec or modgd_frame_spec()
    frames = dsp.frame_signal(samples, spec)
    X, Y = dsp.stft_pair(frames)
    tau = compute_group_delay(X, Y, params)
    compressed = spike_compress(tau, params.alpha)
    return FeatureMatrix(standardize_per_bin(compressed), MODGD_KIND, spec)


def write_features(path, fm: FeatureMatrix):
    """Serialize a feature matrix: magic MPF1, u32 rows/cols, u8 kind, f32 data."""
    rows, cols = fm.values.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIB", rows, cols, _KIND_TAGS[fm.feature_kind]))
        fh.write(fm.values.astype("<f4").tobytes())


def read_features(path) -> FeatureMatrix:
    """Parse a feature file written by :func:`write_features`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, want {_MAGIC!r}")
    rows, cols, tag = struct.unpack("<IIB", blob[4:13])
    if tag not in _TAG_KINDS:
        raise ValueError(f"{path}: unknown feature kind tag {tag}")
    need = rows * cols * 4
    payload = blob[13 : 13 + need]
    if len(payload) != need:
        raise ValueError(f"{path}: truncated payload, want {need} bytes, got {len(payload)}")
    values = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
    return FeatureMatrix(values.astype(np.float64), _TAG_KINDS[tag])
