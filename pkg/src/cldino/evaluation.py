"""Cosine scoring of verification trials, EER and minDCF."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Manifest, TrialList
from .encoder import Encoder, embed
from .errors import ConfigError
from .frontend import FrontendConfig, Waveform, mfcc


@dataclass
class ScoreSet:
    target_scores: np.ndarray
    nontarget_scores: np.ndarray

    def __post_init__(self):
        self.target_scores = np.asarray(self.target_scores, dtype=np.float64).ravel()
        self.nontarget_scores = np.asarray(self.nontarget_scores, dtype=np.float64).ravel()
        if not len(self.target_scores) or not len(self.nontarget_scores):
            raise ValueError("a score set needs at least one target and one nontarget score")
        if not (np.all(np.isfinite(self.target_scores))
                and np.all(np.isfinite(self.nontarget_scores))):
            raise ValueError("scores must be finite")


def cosine(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= 1e-12 or nb <= 1e-12:
        raise ValueError("cannot score a zero embedding")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def trial_scores(lookup, trials: TrialList) -> np.ndarray:
    """Cosine score per trial; ``lookup`` maps utt_id -> embedding."""
    out = np.empty(len(trials))
    for i, (a, b, _) in enumerate(trials):
        for u in (a, b):
            if u not in lookup:
                raise KeyError(f"no embedding for utterance {u!r}")
        out[i] = cosine(lookup[a], lookup[b])
    return out


def score_trials(lookup, trials: TrialList) -> ScoreSet:
    scores = trial_scores(lookup, trials)
    labels = np.array([t for _, _, t in trials], dtype=bool)
    return ScoreSet(scores[labels], scores[~labels])


def _operating_points(scores: ScoreSet):
    """Miss and false-alarm rates at every distinct score used as threshold, plus +inf.

    A trial is accepted when its score is >= the threshold, so the first
    point (lowest score) has miss rate 0 and the last (+inf) has FA rate 0.
    """
    tgt = np.sort(scores.target_scores)
    non = np.sort(scores.nontarget_scores)
    thr = np.append(np.unique(np.concatenate([tgt, non])), np.inf)
    p_miss = np.searchsorted(tgt, thr, side="left") / len(tgt)
    p_fa = 1.0 - np.searchsorted(non, thr, side="left") / len(non)
    return thr, p_miss, p_fa


def eer(scores: ScoreSet) -> tuple[float, float]:
    """Equal error rate and the threshold where it occurs.

    Miss rate rises and false-alarm rate falls as the threshold sweeps the
    sorted scores. If they meet exactly at a score, that is the EER;
    otherwise both curves are interpolated linearly between the two
    bracketing operating points.
    """
    thr, frr, far = _operating_points(scores)
    i = int(np.argmax(frr >= far))  # first point where the curves have crossed
    if frr[i] == far[i] or i == 0:
        t = thr[i] if np.isfinite(thr[i]) else thr[i - 1]
        return float(frr[i]), float(t)
    a0, a1, b0, b1 = frr[i - 1], frr[i], far[i - 1], far[i]
    lam = (b0 - a0) / ((a1 - a0) - (b1 - b0))
    value = a0 + lam * (a1 - a0)
    hi = thr[i] if np.isfinite(thr[i]) else thr[i - 1]
    return float(value), float(thr[i - 1] + lam * (hi - thr[i - 1]))


def min_dcf(scores: ScoreSet, p_target: float = 0.05, c_miss: float = 1.0, c_fa: float = 1.0,
            normalize: bool = True) -> float:
    """Minimum over thresholds of c_miss*P_miss*p + c_fa*P_fa*(1-p), normalized by default.

    Normalization divides by min(c_miss*p, c_fa*(1-p)), the cost of always
    accepting or always rejecting, so an uninformative system scores 1.
    """
    if not 0 < p_target < 1 or c_miss <= 0 or c_fa <= 0:
        raise ConfigError("need 0 < p_target < 1 and positive costs")
    _, p_miss, p_fa = _operating_points(scores)
    cost = c_miss * p_miss * p_target + c_fa * p_fa * (1.0 - p_target)
    best = float(cost.min())
    if normalize:
        best /= min(c_miss * p_target, c_fa * (1.0 - p_target))
    return best


def embed_manifest(encoder: Encoder, manifest: Manifest, utt_ids=None,
                   frontend: FrontendConfig = FrontendConfig()) -> dict:
    """Full-length, clean, eval-mode embeddings keyed by utt_id."""
    out = {}
    for u in (manifest.ids if utt_ids is None else utt_ids):
        utt = manifest[u]
        feats = mfcc(Waveform(manifest.load(u), utt.sample_rate), frontend)
        out[u] = embed(encoder, feats)
    return out


def evaluate(encoder: Encoder, manifest: Manifest, trials: TrialList,
             frontend: FrontendConfig = FrontendConfig(), p_target: float = 0.05,
             report_path=None, scores_path=None) -> dict:
    trials.validate(manifest)
    needed = sorted({u for a, b, _ in trials for u in (a, b)})
    lookup = embed_manifest(encoder, manifest, needed, frontend)
    raw = trial_scores(lookup, trials)
    labels = np.array([t for _, _, t in trials], dtype=bool)
    ss = ScoreSet(raw[labels], raw[~labels])
    value, threshold = eer(ss)
    report = {"eer": value, "min_dcf": min_dcf(ss, p_target), "n_trials": len(trials),
              "n_target": int(labels.sum()), "n_nontarget": int((~labels).sum()),
              "eer_threshold": threshold, "p_target": p_target}
    if report_path is not None:
        Path(report_path).write_text(json.dumps(report, indent=2) + "\n")
    if scores_path is not None:
        with open(scores_path, "w") as fh:
            for (a, b, t), s in zip(trials, raw):
                fh.write(f"{a} {b} {s!r} {int(t)}\n")
    return report
