"""Magnitude- and phase-based speaker embedding toolkit.

Two feature front ends (64-mel FBank with deltas, 201-bin MODGD), Thin
ResNet34 dual-branch embedders fused through channel co-attention, and
the scoring stack (cosine trials, decision fusion, EER, minDCF, Top-1).
Everything runs on a small self-contained float64 autodiff engine so the
whole pipeline is verifiable on one CPU.
"""

__version__ = "0.1.0"

from mpspeaker.audio_io import (
    Manifest,
    Segment,
    TrialList,
    Waveform,
    parse_manifest,
    parse_trials,
    read_wav,
    segment_sliding,
    write_wav,
)
from mpspeaker.features import (
    FeatureMatrix,
    ModgdParams,
    compute_fbank,
    compute_modgd,
    read_features,
    write_features,
)
from mpspeaker.scoring import cosine, decision_fuse, eer, min_dcf, top1_accuracy
