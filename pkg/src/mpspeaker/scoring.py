"""Cosine trial scoring, decision-level fusion, and the evaluation metrics.

EER comes from a threshold sweep over all distinct scores with linear
interpolation between the two sweep points where FAR - FRR changes sign.
minDCF is the normalized detection cost min_t (c_miss*p*FRR + c_fa*(1-p)*FAR)
divided by min(c_miss*p, c_fa*(1-p)).  The accept rule at a threshold t is
score >= t; both conventions are frozen so results are reproducible.
"""

from __future__ import annotations

import numpy as np

from mpspeaker.audio_io import TrialList


class EnrollDB:
    """Enrolled speaker embeddings: one row per speaker id."""

    def __init__(self, embeddings, ids):
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        self.ids = list(ids)
        if self.embeddings.ndim != 2 or len(self.ids) != self.embeddings.shape[0]:
            raise ValueError(
                f"need one id per embedding row, got {len(self.ids)} ids for shape {self.embeddings.shape}"
            )
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("enrolled speaker ids must be unique")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("enrolled embeddings contain non-finite values")

    def __len__(self):
        return len(self.ids)


def cosine(a, b):
    """Cosine similarity of two vectors; rejects zero vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine is undefined for a zero vector")
    return float(a @ b / (na * nb))


def score_identification(test_embeddings, db: EnrollDB):
    """Mean cosine of a test speaker's utterances against every enrolled row."""
    if len(test_embeddings) == 0:
        raise ValueError("need at least one test utterance embedding")
    scores = np.zeros(len(db))
    for emb in test_embeddings:
        emb = np.asarray(emb, dtype=np.float64)
        norm = np.linalg.norm(emb)
        if norm == 0.0:
            raise ValueError("cosine is undefined for a zero vector")
        row_norms = np.linalg.norm(db.embeddings, axis=1)
        scores += (db.embeddings @ emb) / (row_norms * norm)
    return scores / len(test_embeddings)


def decision_fuse(scores_g, scores_f, ratio=0.5):
    """Convex score combination ratio*s_g + (1-ratio)*s_f."""
    scores_g = np.asarray(scores_g, dtype=np.float64)
    scores_f = np.asarray(scores_f, dtype=np.float64)
    if scores_g.shape != scores_f.shape:
        raise ValueError(f"score shapes differ: {scores_g.shape} vs {scores_f.shape}")
    if not (0.0 <= ratio <= 1.0):
        raise ValueError(f"fusion ratio must be in [0, 1], got {ratio}")
    return ratio * scores_g + (1.0 - ratio) * scores_f


def top1_accuracy(score_matrix, true_ids):
    """Percentage of rows whose argmax (first index on ties) is the true id."""
    scores = np.asarray(score_matrix, dtype=np.float64)
    true_ids = np.asarray(true_ids)
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise ValueError(f"need a nonempty (tests, N) score matrix, got shape {scores.shape}")
    if true_ids.shape != (scores.shape[0],):
        raise ValueError(f"need one true id per row, got {true_ids.shape}")
    predicted = scores.argmax(axis=1)
    return float((predicted == true_ids).mean() * 100.0)


def _split_scores(scores, trials):
    scores = np.asarray(scores, dtype=np.float64)
    flags = trials.target_flags() if isinstance(trials, TrialList) else np.asarray(trials, dtype=bool)
    if scores.shape != flags.shape:
        raise ValueError(f"{scores.shape[0]} scores for {flags.shape[0]} trials")
    targets = np.sort(scores[flags])
    nontargets = np.sort(scores[~flags])
    if len(targets) == 0 or len(nontargets) == 0:
        raise ValueError("need at least one target and one nontarget trial")
    return targets, nontargets


def _sweep(targets, nontargets, thresholds):
    """FAR(t) = fraction of nontargets >= t, FRR(t) = fraction of targets < t."""
    far = (len(nontargets) - np.searchsorted(nontargets, thresholds, side="left")) / len(nontargets)
    frr = np.searchsorted(targets, thresholds, side="left") / len(targets)
    return far, frr


def roc_sweep(scores, trials):
    """(thresholds, FAR, FRR) over all distinct scores plus a reject-all point."""
    targets, nontargets = _split_scores(scores, trials)
    thresholds = np.unique(np.concatenate([targets, nontargets]))
    thresholds = np.append(thresholds, np.inf)
    far, frr = _sweep(targets, nontargets, thresholds)
    return thresholds, far, frr


def eer(scores, trials):
    """Equal error rate in [0, 1] via linear interpolation on the ROC sweep."""
    _, far, frr = roc_sweep(scores, trials)
    diff = far - frr
    idx = int(np.argmax(diff <= 0.0))
    if diff[idx] == 0.0:
        return float(far[idx])
    lam = diff[idx - 1] / (diff[idx - 1] - diff[idx])
    return float(far[idx - 1] + lam * (far[idx] - far[idx - 1]))


def min_dcf(scores, trials, p_target=0.05, c_miss=1.0, c_fa=1.0):
    """Minimum normalized detection cost over the threshold sweep.

    Normalization divides by min(c_miss*p_target, c_fa*(1-p_target)), the
    cost of the better trivial accept-all/reject-all system.
    """
    _, far, frr = roc_sweep(scores, trials)
    cost = c_miss * p_target * frr + c_fa * (1.0 - p_target) * far
    return float(cost.min() / min(c_miss * p_target, c_fa * (1.0 - p_target)))


def write_scores(path, scores):
    """One score per line, aligned with the trial list; repr round-trips exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in np.asarray(scores, dtype=np.float64):
            fh.write(f"{float(s)!r}\n")


def read_scores(path):
    values = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                values.append(float(line))
            except ValueError as exc:
                raise ValueError(f"{path}:{line_no}: not a number: {line!r}") from exc
    return np.array(values)


def write_report(path, metrics):
    """Key-value evaluation report, one metric per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in metrics.items():
            fh.write(f"{key} {value:.6f}\n")
