"""k-means over utterance embeddings, cluster-proportional subset selection, speaker coverage."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Manifest
from .errors import ConfigError, ShapeError
from .frontend import FrontendConfig, Waveform, mfcc


@dataclass
class ClusteringResult:
    centroids: np.ndarray   # k x D
    assignments: np.ndarray  # N, ints in [0, k)
    inertia: float
    ids: list = field(default_factory=list)
    history: list = field(default_factory=list)  # inertia after each assignment step
    n_iter: int = 0

    @property
    def k(self) -> int:
        return len(self.centroids)


def _sq_dists(x, c):
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _plusplus(x, k, rng):
    n = len(x)
    centers = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[centers])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:  # fewer distinct points than k; pick any unused point
            unused = np.setdiff1d(np.arange(n), centers)
            nxt = int(unused[0])
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        centers.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[[nxt]])[:, 0])
    return x[centers].copy()


def kmeans(points, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6,
           ids=None) -> ClusteringResult:
    """k-means++ seeding followed by Lloyd iterations.

    Stops when no centroid moves more than ``tol`` or after ``max_iter``
    rounds. An empty cluster is re-seeded at the point farthest from its
    current centroid. Inertia is checked to be non-increasing every round.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected an N x D point matrix, got shape {x.shape}")
    n = len(x)
    if not 1 <= k <= n:
        raise ConfigError(f"need 1 <= k <= N, got k={k}, N={n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("points contain non-finite values")
    rng = np.random.default_rng([seed, 0xC1])
    c = _plusplus(x, k, rng)
    history, it = [], 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, c)
        assign = d.argmin(1)
        inertia = float(d[np.arange(n), assign].sum())
        if history and inertia > history[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"k-means inertia rose from {history[-1]} to {inertia}")
        history.append(inertia)
        new = c.copy()
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(c)
        np.add.at(sums, assign, x)
        full = counts > 0
        new[full] = sums[full] / counts[full, None]
        point_d = d[np.arange(n), assign]
        for j in np.flatnonzero(~full):
            far = int(point_d.argmax())
            new[j] = x[far]
            point_d[far] = 0.0
        shift = float(np.sqrt(((new - c) ** 2).sum(1)).max())
        c = new
        if shift < tol:
            break
    d = _sq_dists(x, c)
    assign = d.argmin(1)
    inertia = float(d[np.arange(n), assign].sum())
    history.append(inertia)
    ids = list(ids) if ids is not None else [str(i) for i in range(n)]
    if len(ids) != n:
        raise ShapeError(f"{len(ids)} ids for {n} points")
    return ClusteringResult(c, assign, inertia, ids, history, it)


def n_selected(k: int, proportion: float) -> int:
    return int(math.floor(proportion * k + 0.5))


def selected_clusters(result: ClusteringResult, proportion: float, seed: int = 0) -> np.ndarray:
    """Cluster indices kept at ``proportion``: a prefix of one seed-fixed permutation."""
    if not 0.0 < proportion <= 1.0:
        raise ConfigError(f"cluster proportion must be in (0, 1], got {proportion}")
    m = n_selected(result.k, proportion)
    if m == 0:
        raise ConfigError(f"proportion {proportion} of {result.k} clusters rounds to zero clusters")
    perm = np.random.default_rng([seed, 0x5E1]).permutation(result.k)
    return np.sort(perm[:m])


def utterances_in(result: ClusteringResult, clusters) -> list[str]:
    keep = np.isin(result.assignments, np.asarray(clusters, dtype=int))
    return [u for u, k in zip(result.ids, keep) if k]


def select_clusters(result: ClusteringResult, proportion: float, seed: int = 0) -> list[str]:
    """All utterances whose cluster is among the chosen round(proportion * k)."""
    return utterances_in(result, selected_clusters(result, proportion, seed))


def speaker_coverage(selected, manifest: Manifest) -> float:
    """Share of the corpus' speakers that appear in ``selected`` (labels used for analysis only)."""
    if not manifest.has_labels:
        raise ConfigError("speaker coverage needs a labelled manifest")
    total = set(manifest.speakers)
    seen = {manifest.speaker_of(u) for u in selected}
    return len(seen) / len(total)


COVERAGE_COLUMNS = ("proportion", "n_clusters_selected", "n_utterances", "speaker_coverage")


def coverage_table(result: ClusteringResult, manifest: Manifest, proportions, seed: int = 0):
    rows = []
    for p in proportions:
        chosen = selected_clusters(result, p, seed)
        utts = utterances_in(result, chosen)
        rows.append((float(p), len(chosen), len(utts), speaker_coverage(utts, manifest)))
    return rows


def write_coverage_csv(rows, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COVERAGE_COLUMNS)
    for p, m, n, cov in rows:
        w.writerow((repr(p), m, n, repr(cov)))
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def mfcc_mean_embeddings(manifest: Manifest, frontend: FrontendConfig | None = None) -> np.ndarray:
    """Per-utterance mean (and std) of MFCCs, computed without mean subtraction.

    This is the label-free fallback embedding used when no trained model is
    available. CMS would zero the mean, so it is switched off here.
    """
    cfg = frontend or FrontendConfig(cms=False)
    if cfg.cms:
        cfg = FrontendConfig(**{**cfg.__dict__, "cms": False, "cmvn": False})
    rows = []
    for utt in manifest:
        f = mfcc(Waveform(manifest.load(utt.utt_id), utt.sample_rate), cfg).frames
        rows.append(np.concatenate([f.mean(0), f.std(0)]))
    return np.stack(rows)


def cluster_manifest(manifest: Manifest, k: int, seed: int = 0, embeddings=None,
                     standardize: bool = True) -> ClusteringResult:
    emb = mfcc_mean_embeddings(manifest) if embeddings is None else np.asarray(embeddings)
    if standardize:
        emb = (emb - emb.mean(0)) / np.maximum(emb.std(0), 1e-12)
    return kmeans(emb, k, seed=seed, ids=manifest.ids)
