"""Dataclass configs for model shape, training and runs."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

D_RAW = 12  # fixed per-joint raw token width across the whole corpus


@dataclass(frozen=True)
class ModelConfig:
    width: int = 512
    layers: int = 6          # per component transformer (f_s, f_m, g, h)
    heads: int = 4
    window: int = 10         # positional-embedding capacity of causal stacks
    history: int = 10        # frames of history actually consumed (<= window)
    rank: int = 16           # low-rank PEFT rank
    d_raw: int = D_RAW
    match_mode: str = "cross_attention"  # or "cosine_softmax"
    cosine_tau: float = 10.0

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError(f"heads {self.heads} must divide width {self.width}")
        if not 1 <= self.history <= self.window:
            raise ValueError(f"history {self.history} outside [1, window={self.window}]")
        if self.match_mode not in ("cross_attention", "cosine_softmax"):
            raise ValueError(f"unknown match_mode {self.match_mode!r}")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 200_000
    warmup: int = 1000
    base_lr: float = 2e-4
    poly_power: float = 0.9
    global_batch: int = 64          # episodes per meta-train step
    support_size: int = 4           # demonstrations conditioning each episode
    query_anchors: int = 16         # sampled (t, window) anchors per episode
    segment_size: int = 10          # temporal segment of the buffer per episode
    match_stride: int = 1           # subsampling stride for matching keys
    finetune_iterations: int = 10_000
    finetune_lr: float = 2e-4       # constant during fine-tuning
    eval_every: int = 1000          # evaluation cadence inside finetune
    checkpoint_every: int = 1000
    seed: int = 0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0 <= self.warmup < self.iterations:
            raise ValueError("warmup must satisfy 0 <= warmup < iterations")
        for name in ("iterations", "base_lr", "global_batch", "support_size",
                     "query_anchors", "segment_size", "match_stride",
                     "finetune_iterations", "finetune_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


# Table-scale values vs. a configuration sized for a laptop-class CPU.
PAPER_MODEL = ModelConfig()
DESK_MODEL = ModelConfig(width=128, layers=3, history=6)

PAPER_TRAIN = TrainConfig()
DESK_TRAIN = TrainConfig(
    iterations=20_000,
    warmup=500,
    base_lr=1e-3,            # scaled up with the smaller width/batch
    global_batch=4,
    query_anchors=2,
    match_stride=12,
    finetune_iterations=2000,
    finetune_lr=1e-3,
    eval_every=500,
    checkpoint_every=1000,
)

PRESETS = {
    "paper": (PAPER_MODEL, PAPER_TRAIN),
    "desk": (DESK_MODEL, DESK_TRAIN),
}


def preset(name: str) -> tuple[ModelConfig, TrainConfig]:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def with_overrides(cfg, **overrides):
    """Return a copy of a (frozen) config dataclass with fields replaced."""
    known = {f.name for f in dataclasses.fields(cfg)}
    bad = set(overrides) - known
    if bad:
        raise KeyError(f"unknown config key(s): {sorted(bad)}")
    return dataclasses.replace(cfg, **overrides)
