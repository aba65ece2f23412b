"""Data-portion and augmentation-proportion curricula.

A course is a step function of the epoch. Data courses control how much of
the training set is visible; augmentation courses control what share of each
mini-batch gets noise or reverberation. Both only ever grow.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Manifest
from .errors import ConfigError
from .schedule import LrConfig, sgdr_lr

DATA_PRESETS = {
    "CL_D1": (0.6, 0.7, 0.8, 0.9, 1.0),
    "CL_D2": (0.4, 0.55, 0.7, 0.85, 1.0),
    "CL_D3": (0.2, 0.4, 0.6, 0.8, 1.0),
}
AUG_PRESETS = {
    "CL_A2": (0.2, 0.4, 0.6, 0.8, 1.0),
}
N_BLOCKS = 5


@dataclass(frozen=True)
class Course:
    name: str
    breakpoints: tuple  # ((start_epoch, fraction), ...)

    def __post_init__(self):
        object.__setattr__(self, "breakpoints",
                           tuple((int(e), float(f)) for e, f in self.breakpoints))
        self.validate()

    def validate(self):
        bp = self.breakpoints
        if not bp or bp[0][0] != 0:
            raise ConfigError(f"course {self.name!r}: first breakpoint must start at epoch 0")
        starts = [e for e, _ in bp]
        fracs = [f for _, f in bp]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigError(f"course {self.name!r}: start epochs must be strictly increasing")
        if any(not 0.0 <= f <= 1.0 for f in fracs):
            raise ConfigError(f"course {self.name!r}: fractions must lie in [0, 1]")
        if any(b < a for a, b in zip(fracs, fracs[1:])):
            raise ConfigError(f"course {self.name!r}: fractions must be non-decreasing")
        if fracs[-1] != 1.0:
            raise ConfigError(f"course {self.name!r}: final fraction must be 1.0")
        return self

    def to_list(self) -> list:
        return [[e, f] for e, f in self.breakpoints]


def blockwise(name: str, fractions, block: int) -> Course:
    return Course(name, tuple((i * block, f) for i, f in enumerate(fractions)))


def linear_ramp(name: str, ramp_epochs: int) -> Course:
    """Per-epoch ramp 0 -> 1 reaching 1.0 at ``ramp_epochs``."""
    return Course(name, tuple((e, e / ramp_epochs) for e in range(ramp_epochs + 1)))


def preset(name: str, block: int = 16) -> Course:
    """Named course. ``none``/``baseline`` is the constant-1 course."""
    if block < 1:
        raise ConfigError(f"block length must be >= 1, got {block}")
    if name in ("none", "baseline", "base"):
        return Course("baseline", ((0, 1.0),))
    if name in DATA_PRESETS:
        return blockwise(name, DATA_PRESETS[name], block)
    if name in AUG_PRESETS:
        return blockwise(name, AUG_PRESETS[name], block)
    if name == "CL_A1":
        # 0 at the first epoch, 1 at the last epoch of the run
        return linear_ramp(name, N_BLOCKS * block - 1)
    raise ConfigError(f"unknown course {name!r}; choose from "
                      f"{['none'] + sorted(DATA_PRESETS) + ['CL_A1'] + sorted(AUG_PRESETS)}")


def course_value(course: Course, epoch: int) -> float:
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    value = 1.0
    for start, frac in course.breakpoints:
        if start > epoch:
            break
        value = frac
    return value


def _count(fraction: float, n: int) -> int:
    # ceil with a guard against 0.6 * 800 = 480.00000000000006
    return min(n, max(1, math.ceil(fraction * n - 1e-9)))


def subset_order(manifest: Manifest, seed: int) -> list[str]:
    perm = np.random.default_rng([seed, 0x5B5E7]).permutation(len(manifest))
    ids = manifest.ids
    return [ids[i] for i in perm]


def epoch_subset(manifest: Manifest, fraction: float, strategy: str = "random", seed: int = 0,
                 clustering=None) -> list[str]:
    """Utterance ids visible at a given data fraction.

    Every strategy nests: the subset for a smaller fraction is contained in
    the subset for a larger one (same seed), so data is never dropped.
    ``fixed_speakers`` needs labels and is for analysis runs only.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"data fraction must be in (0, 1], got {fraction}")
    if strategy == "random":
        return subset_order(manifest, seed)[: _count(fraction, len(manifest))]
    if strategy == "fixed_speakers":
        if not manifest.has_labels:
            raise ConfigError("fixed_speakers selection needs speaker labels")
        order = subset_order(manifest, seed)
        first, rest, seen = [], [], set()
        for utt_id in order:
            spk = manifest.speaker_of(utt_id)
            (rest if spk in seen else first).append(utt_id)
            seen.add(spk)
        n = max(_count(fraction, len(manifest)), len(first))
        return (first + rest)[:n]
    if strategy == "cluster":
        from .selection import select_clusters

        if clustering is None:
            raise ConfigError("cluster strategy needs a clustering result")
        return select_clusters(clustering, fraction, seed)
    raise ConfigError(f"unknown subset strategy {strategy!r}")


def aug_count(batch_size: int, fraction: float) -> int:
    return int(math.floor(fraction * batch_size + 0.5))


def aug_mask(batch_size: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask with exactly round(fraction * batch_size) entries set (halves round up)."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"augmentation fraction must be in [0, 1], got {fraction}")
    mask = np.zeros(batch_size, dtype=bool)
    mask[rng.permutation(batch_size)[: aug_count(batch_size, fraction)]] = True
    return mask


TRACE_COLUMNS = ("epoch", "data_fraction", "aug_fraction", "lr_at_epoch_start")


def schedule_rows(data_course: Course, aug_course: Course, lr_cfg: LrConfig, n_epochs: int):
    return [(e, course_value(data_course, e), course_value(aug_course, e), sgdr_lr(e, 0.0, lr_cfg))
            for e in range(n_epochs)]


def emit_schedule_trace(data_course: Course, aug_course: Course, lr_cfg: LrConfig = LrConfig(),
                        n_epochs: int = 80, path=None) -> str:
    """CSV text (and optionally a file), one row per epoch."""
    if n_epochs < 1:
        raise ConfigError("n_epochs must be >= 1")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for e, d, a, lr in schedule_rows(data_course, aug_course, lr_cfg, n_epochs):
        w.writerow((e, repr(d), repr(a), repr(lr)))
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
