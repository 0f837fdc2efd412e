"""Noise mechanisms for outgoing residual shards.

Both mechanisms clamp to [-clip, clip] first and touch only the transmitted
values; shard ids and shapes pass through unchanged.  Noise is deterministic
per (seed, round, sender, receiver) so reruns reproduce byte-identical
traffic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PrivacyConfig:
    mechanism: str = "none"   # none | gaussian | interval
    clip: float = 1.0
    sigma: float = 0.1
    width: float = 0.5
    seed: int = 0

    def validate(self):
        if self.mechanism not in ("none", "gaussian", "interval"):
            raise ValueError(f"unknown privacy mechanism {self.mechanism!r}")
        if self.clip <= 0:
            raise ValueError("clip bound must be positive")
        if self.mechanism == "gaussian" and self.sigma < 0:
            raise ValueError("noise scale must be non-negative")
        if self.mechanism == "interval" and self.width <= 0:
            raise ValueError("interval width must be positive")
        return self


def _stream(cfg: PrivacyConfig, round_t, sender, receiver):
    return np.random.default_rng(
        np.random.SeedSequence([cfg.seed, round_t, sender, receiver]))


def _gaussian(values, cfg, rng):
    clipped = np.clip(np.asarray(values, dtype=np.float64), -cfg.clip, cfg.clip)
    if cfg.sigma == 0.0:
        return clipped
    return clipped + rng.normal(0.0, cfg.sigma, size=clipped.shape)


def _interval(values, cfg, rng):
    # Tile the line with width-w intervals at a per-message random offset and
    # report each clamped value's interval midpoint.
    clipped = np.clip(np.asarray(values, dtype=np.float64), -cfg.clip, cfg.clip)
    offset = rng.uniform(0.0, cfg.width)
    index = np.floor((clipped - offset) / cfg.width)
    return offset + (index + 0.5) * cfg.width


def gaussian_values(values, cfg: PrivacyConfig, round_t=0, sender=0, receiver=0):
    """Clamp then perturb with independent Gaussian noise of scale sigma."""
    return _gaussian(values, cfg, _stream(cfg, round_t, sender, receiver))


def interval_values(values, cfg: PrivacyConfig, round_t=0, sender=0, receiver=0):
    """Replace each clamped value by the midpoint of its containing interval."""
    return _interval(values, cfg, _stream(cfg, round_t, sender, receiver))


def apply_mechanism(shard, cfg: PrivacyConfig | None):
    """Perturb a shard's values in place according to the configured mechanism."""
    if cfg is None or cfg.mechanism == "none":
        return shard
    cfg.validate()
    fn = _gaussian if cfg.mechanism == "gaussian" else _interval
    rng = _stream(cfg, shard.round_t, shard.sender, shard.receiver)
    if len(shard.cell_vals):
        shard.cell_vals = fn(shard.cell_vals, cfg, rng)
    if shard.rect_vals.size:
        shard.rect_vals = fn(shard.rect_vals, cfg, rng)
    return shard


def gaussian_mechanism(shard, cfg: PrivacyConfig):
    if cfg.mechanism != "gaussian":
        raise ValueError("config does not select the gaussian mechanism")
    return apply_mechanism(shard, cfg)


def interval_mechanism(shard, cfg: PrivacyConfig):
    if cfg.mechanism != "interval":
        raise ValueError("config does not select the interval mechanism")
    return apply_mechanism(shard, cfg)
