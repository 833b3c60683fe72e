"""PCM audio ingestion, dataset manifests, and sliding-window segmentation.

The accepted audio contract is deliberately narrow: RIFF/WAVE containers
holding 16-bit signed PCM, mono, 16 kHz.  Anything else is rejected with a
specific error so golden tests stay bit-exact.  Samples are scaled by
1/32768 (symmetric-negative convention), so the stored value 32767 maps to
32767/32768 and -32768 maps to -1.0.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

SAMPLE_RATE = 16000
PCM_SCALE = 32768.0

SEGMENT_SECONDS = 3.0
SEGMENT_HOP_SECONDS = 1.0


class WavFormatError(Exception):
    """A WAV file violates the accepted container contract."""


class UnsupportedEncodingError(WavFormatError):
    """Format tag is not plain PCM or the sample width is not 16 bit."""


class ChannelCountError(WavFormatError):
    """The file is not mono."""


class SampleRateError(WavFormatError):
    """The file is not sampled at 16 kHz."""


class TruncatedFileError(WavFormatError):
    """A declared chunk extends past the end of the file."""


class ManifestError(ValueError):
    """A manifest or trial-list line could not be parsed."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


@dataclass
class Waveform:
    """Mono PCM samples in [-1, 1) plus their sample rate."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    def duration(self):
        return len(self.samples) / self.sample_rate


@dataclass
class Segment:
    """Fixed-length training slice of a waveform.

    ``source_offset`` is the sample index in the source waveform where the
    slice starts (0 for the padded short-utterance case).
    """

    samples: np.ndarray
    source_offset: int

    def __len__(self):
        return len(self.samples)


@dataclass
class Manifest:
    """Ordered (speaker_id, utterance_path) records."""

    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def speaker_ids(self):
        """Unique speaker ids in first-seen order."""
        seen = {}
        for spk, _ in self.entries:
            seen.setdefault(spk, None)
        return list(seen)


@dataclass
class TrialList:
    """Verification trials: (is_target, enroll_ref, test_ref)."""

    trials: list = field(default_factory=list)

    def __len__(self):
        return len(self.trials)

    def target_flags(self):
        return np.array([t[0] for t in self.trials], dtype=bool)


def read_wav(path) -> Waveform:
    """Read a 16 kHz / 16-bit / mono PCM RIFF file.

    Raises a distinct :class:`WavFormatError` subclass for each contract
    violation: encoding, channel count, sample rate, or truncation.
    """
    with open(path, "rb") as fh:
        blob = fh.read()

    if len(blob) < 12 or blob[0:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise UnsupportedEncodingError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(blob):
        chunk_id = blob[pos : pos + 4]
        (chunk_size,) = struct.unpack("<I", blob[pos + 4 : pos + 8])
        body_start = pos + 8
        if body_start + chunk_size > len(blob):
            raise TruncatedFileError(
                f"{path}: chunk {chunk_id!r} declares {chunk_size} bytes but only "
                f"{len(blob) - body_start} remain"
            )
        body = blob[body_start : body_start + chunk_size]
        if chunk_id == b"fmt ":
            fmt = body
        elif chunk_id == b"data":
            data = body
        # chunks are word aligned; skip the pad byte on odd sizes
        pos = body_start + chunk_size + (chunk_size & 1)

    if fmt is None or len(fmt) < 16:
        raise UnsupportedEncodingError(f"{path}: missing or short fmt chunk")
    audio_format, channels, rate, _byte_rate, _block_align, bits = struct.unpack(
        "<HHIIHH", fmt[:16]
    )
    if audio_format != 1 or bits != 16:
        raise UnsupportedEncodingError(
            f"{path}: want 16-bit PCM (format tag 1), got tag {audio_format} / {bits} bit"
        )
    if channels != 1:
        raise ChannelCountError(f"{path}: want mono, got {channels} channels")
    if rate != SAMPLE_RATE:
        raise SampleRateError(f"{path}: want {SAMPLE_RATE} Hz, got {rate} Hz")
    if data is None:
        raise TruncatedFileError(f"{path}: missing data chunk")
    if len(data) % 2 != 0:
        raise TruncatedFileError(f"{path}: data chunk has an odd byte count")

    pcm = np.frombuffer(data, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / PCM_SCALE, SAMPLE_RATE)


def write_wav(path, samples, sample_rate=SAMPLE_RATE):
    """Write float samples as 16-bit mono PCM, quantizing by round(x * 32768)."""
    samples = np.asarray(samples, dtype=np.float64)
    pcm = np.clip(np.rint(samples * PCM_SCALE), -32768, 32767).astype("<i2")
    data = pcm.tobytes()
    fmt = struct.pack("<HHIIHH", 1, 1, sample_rate, sample_rate * 2, 2, 16)
    with open(path, "wb") as fh:
        fh.write(b"RIFF")
        fh.write(struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(data)))
        fh.write(b"WAVE")
        fh.write(b"fmt ")
        fh.write(struct.pack("<I", len(fmt)))
        fh.write(fmt)
        fh.write(b"data")
        fh.write(struct.pack("<I", len(data)))
        fh.write(data)
        if len(data) % 2:
            fh.write(b"\x00")


def segment_sliding(w: Waveform, win_s=SEGMENT_SECONDS, hop_s=SEGMENT_HOP_SECONDS):
    """Cut a waveform into fixed windows of ``win_s`` seconds every ``hop_s``.

    Utterances shorter than one window yield a single segment padded by
    cyclic repetition of the input, so every segment has exactly
    round(win_s * sample_rate) samples.
    """
    x = w.samples
    if len(x) == 0:
        raise ValueError("cannot segment an empty waveform")
    win = int(round(win_s * w.sample_rate))
    hop = int(round(hop_s * w.sample_rate))
    if len(x) < win:
        reps = int(np.ceil(win / len(x)))
        padded = np.tile(x, reps)[:win]
        return [Segment(padded, 0)]
    count = (len(x) - win) // hop + 1
    return [Segment(x[t * hop : t * hop + win].copy(), t * hop) for t in range(count)]


def parse_manifest(path) -> Manifest:
    """Parse ``<speaker_id> <path>`` lines; blank lines are ignored."""
    entries = []
    seen_paths = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ManifestError(path, line_no, f"want 'speaker path', got {line!r}")
            spk, utt = parts
            if utt in seen_paths:
                raise ManifestError(path, line_no, f"duplicate utterance path {utt!r}")
            seen_paths.add(utt)
            entries.append((spk, utt))
    return Manifest(entries)


def parse_trials(path) -> TrialList:
    """Parse ``<0|1> <enroll_path> <test_path>`` lines (1 marks a target trial)."""
    trials = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3 or parts[0] not in ("0", "1"):
                raise ManifestError(
                    path, line_no, f"want '0|1 enroll test', got {line!r}"
                )
            trials.append((parts[0] == "1", parts[1], parts[2]))
    return TrialList(trials)
