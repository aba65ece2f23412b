"""Cosine learning-rate schedule with warm restarts (SGDR)."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class LrConfig:
    lr_max: float = 0.001
    restart_period: int = 16
    decay: float = 0.8
    lr_min: float = 0.0
    mode: str = "restarts"  # or "single_cosine"
    total_epochs: int = 80  # only used by single_cosine

    def validate(self):
        if not 0 < self.decay <= 1:
            raise ConfigError(f"decay must be in (0, 1], got {self.decay}")
        if self.restart_period < 1:
            raise ConfigError(f"restart_period must be >= 1, got {self.restart_period}")
        if self.mode not in ("restarts", "single_cosine"):
            raise ConfigError(f"unknown lr mode {self.mode!r}")
        if self.lr_max < 0 or self.lr_min < 0 or self.lr_min > self.lr_max:
            raise ConfigError(f"need 0 <= lr_min <= lr_max, got {self.lr_min}/{self.lr_max}")
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be >= 1")
        return self


def sgdr_lr(epoch: int, frac: float = 0.0, cfg: LrConfig = LrConfig()) -> float:
    """Learning rate at ``epoch + frac`` (``frac`` in [0, 1) is progress through the epoch).

    Restart block ``b`` covers epochs ``[b*P, (b+1)*P)`` and starts from
    ``lr_max * decay**b``; inside a block the rate follows half a cosine down
    to ``lr_min``. ``single_cosine`` is one such half-cosine over
    ``total_epochs`` with no restart.
    """
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    if cfg.mode == "single_cosine":
        peak, t = cfg.lr_max, min((epoch + frac) / cfg.total_epochs, 1.0)
    else:
        block = epoch // cfg.restart_period
        peak = cfg.lr_max * cfg.decay ** block
        t = (epoch - block * cfg.restart_period + frac) / cfg.restart_period
    return max(cfg.lr_min + 0.5 * (peak - cfg.lr_min) * (1.0 + math.cos(math.pi * t)), 0.0)
