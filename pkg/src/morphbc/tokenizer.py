"""Joint-level tokenization of raw simulator observations.

Every embodiment's observation is converted to a fixed-width array of per-joint
tokens plus an optional extrasensory vector. Hinge-family positions are
standardized against the world up-axis as (sin, cos) of the absolute link
angle; slide positions stay linear. Features are min-max normalized to [-1, 1]
per embodiment; structurally absent and degenerate features are zero-padded and
masked.

Token slot layout (d_raw = 12):
    0 pos_a   hinge/free: sin(angle from up)    slide: position
    1 pos_b   hinge/free: cos(angle from up)    slide: absent
    2 vel     joint velocity
    3 axis_x  joint axis in the parent frame
    4 axis_y
    5 is_hinge
    6 is_slide
    7 is_free
    8 limit_lo  (absent when the joint is unlimited or free)
    9 limit_hi
   10 pad
   11 pad
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .config import D_RAW
from . import simkit
from .simkit import DemoBuffer, Embodiment

KIND_INDEX = {simkit.HINGE: 0, simkit.SLIDE: 1, simkit.FREE: 2}

SLOT_POS_A, SLOT_POS_B, SLOT_VEL = 0, 1, 2
SLOT_AXIS_X, SLOT_AXIS_Y = 3, 4
SLOT_IS_HINGE, SLOT_IS_SLIDE, SLOT_IS_FREE = 5, 6, 7
SLOT_LIMIT_LO, SLOT_LIMIT_HI = 8, 9


class TokenizerError(ValueError):
    pass


class EmptyBuffer(TokenizerError):
    pass


class DimensionMismatch(TokenizerError):
    pass


class UnfittedStats(TokenizerError):
    pass


class OutOfRange(TokenizerError):
    pass


@dataclass
class StateFrame:
    tokens: np.ndarray          # [..., J, d_raw] normalized features
    types: np.ndarray           # [J] joint-kind index (hinge/slide/free)
    presence_mask: np.ndarray   # [J, d_raw] bool; False entries are exactly 0
    extrasensory: Optional[np.ndarray]  # [..., extrasensory_dim] or None


@dataclass
class ActionFrame:
    actions: np.ndarray         # [J] scalars in [-1, 1], 0 at free joints


@dataclass
class NormStats:
    """Per-embodiment min-max statistics in token space, pooled over joints."""

    token_min: np.ndarray       # [d_raw]
    token_max: np.ndarray       # [d_raw]
    extra_min: np.ndarray       # [extrasensory_dim]
    extra_max: np.ndarray
    d_raw: int = D_RAW

    def __post_init__(self):
        if np.any(self.token_min > self.token_max) or np.any(self.extra_min > self.extra_max):
            raise TokenizerError("stats must satisfy min <= max elementwise")

    @property
    def token_degenerate(self) -> np.ndarray:
        return self.token_min == self.token_max

    @property
    def extra_degenerate(self) -> np.ndarray:
        return self.extra_min == self.extra_max

    def merge(self, other: "NormStats") -> "NormStats":
        return NormStats(
            token_min=np.minimum(self.token_min, other.token_min),
            token_max=np.maximum(self.token_max, other.token_max),
            extra_min=np.minimum(self.extra_min, other.extra_min),
            extra_max=np.maximum(self.extra_max, other.extra_max),
        )

    def save(self, path) -> None:
        doc = {
            "d_raw": int(self.d_raw),
            "token_min": self.token_min.tolist(),
            "token_max": self.token_max.tolist(),
            "extra_min": self.extra_min.tolist(),
            "extra_max": self.extra_max.tolist(),
        }
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "NormStats":
        doc = json.loads(Path(path).read_text())
        if doc["d_raw"] != D_RAW:
            raise TokenizerError(
                f"stats d_raw {doc['d_raw']} does not match the corpus constant {D_RAW}"
            )
        return cls(
            token_min=np.asarray(doc["token_min"], dtype=np.float64),
            token_max=np.asarray(doc["token_max"], dtype=np.float64),
            extra_min=np.asarray(doc["extra_min"], dtype=np.float64),
            extra_max=np.asarray(doc["extra_max"], dtype=np.float64),
        )


# ---------------------------------------------------------------------------
# Absolute hinge-angle standardization


def hinge_abs_angles(emb: Embodiment, q: np.ndarray) -> np.ndarray:
    """Absolute link angle measured from the world up-axis, per joint.

    Supports batched q of shape [..., J]; slide joints report their parent's
    orientation (they do not rotate).
    """
    q = np.asarray(q, dtype=np.float64)
    alpha = np.zeros(q.shape)
    for i in emb.topo:
        p = emb.parent[i]
        parent = alpha[..., p] if p >= 0 else 0.0
        if emb.is_slide[i]:
            alpha[..., i] = parent
        else:
            alpha[..., i] = parent + emb.axis_angle[i] + q[..., i]
    return alpha - np.pi / 2.0  # 0 = pointing up


def hinge_angles_to_q(emb: Embodiment, abs_angles: np.ndarray) -> np.ndarray:
    """Inverse of hinge_abs_angles for rotating joints (slide entries pass through)."""
    abs_angles = np.asarray(abs_angles, dtype=np.float64)
    phi = abs_angles + np.pi / 2.0
    q = np.zeros(phi.shape)
    alpha = np.zeros(phi.shape)
    for i in emb.topo:
        p = emb.parent[i]
        parent = alpha[..., p] if p >= 0 else 0.0
        if emb.is_slide[i]:
            alpha[..., i] = parent
            q[..., i] = abs_angles[..., i]
        else:
            q[..., i] = phi[..., i] - parent - emb.axis_angle[i]
            alpha[..., i] = phi[..., i]
    return q


# ---------------------------------------------------------------------------
# Raw token assembly


def presence_mask(emb: Embodiment) -> np.ndarray:
    """Structural presence of each token slot, before degeneracy masking."""
    J = emb.n_joints
    mask = np.zeros((J, D_RAW), dtype=bool)
    mask[:, SLOT_POS_A] = True
    mask[:, SLOT_POS_B] = ~emb.is_slide
    mask[:, SLOT_VEL] = True
    mask[:, SLOT_AXIS_X] = True
    mask[:, SLOT_AXIS_Y] = True
    mask[:, SLOT_IS_HINGE] = True
    mask[:, SLOT_IS_SLIDE] = True
    mask[:, SLOT_IS_FREE] = True
    limited = np.isfinite(emb.limit_lo) & np.isfinite(emb.limit_hi) & ~emb.is_free
    mask[:, SLOT_LIMIT_LO] = limited
    mask[:, SLOT_LIMIT_HI] = limited
    return mask


def raw_tokens(obs: np.ndarray, emb: Embodiment) -> tuple:
    """Unnormalized token array [..., J, d_raw] plus the structural mask."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[-1] != emb.obs_dim:
        raise DimensionMismatch(
            f"observation dim {obs.shape[-1]} != embodiment obs_dim {emb.obs_dim}"
        )
    J = emb.n_joints
    q = obs[..., :J]
    qdot = obs[..., J:2 * J]
    toks = np.zeros(obs.shape[:-1] + (J, D_RAW))
    ang = hinge_abs_angles(emb, q)
    rot = emb.rotational
    toks[..., rot, SLOT_POS_A] = np.sin(ang[..., rot])
    toks[..., rot, SLOT_POS_B] = np.cos(ang[..., rot])
    toks[..., ~rot, SLOT_POS_A] = q[..., ~rot]
    toks[..., SLOT_VEL] = qdot
    toks[..., SLOT_AXIS_X] = emb.axis[:, 0]
    toks[..., SLOT_AXIS_Y] = emb.axis[:, 1]
    toks[..., SLOT_IS_HINGE] = emb.is_hinge.astype(float)
    toks[..., SLOT_IS_SLIDE] = emb.is_slide.astype(float)
    toks[..., SLOT_IS_FREE] = emb.is_free.astype(float)
    mask = presence_mask(emb)
    limited = mask[:, SLOT_LIMIT_LO]
    toks[..., limited, SLOT_LIMIT_LO] = emb.limit_lo[limited]
    toks[..., limited, SLOT_LIMIT_HI] = emb.limit_hi[limited]
    toks *= mask
    return toks, mask


def _normalize(x, lo, hi):
    span = hi - lo
    safe = np.where(span == 0, 1.0, span)
    out = 2.0 * (x - lo) / safe - 1.0
    return np.where(span == 0, 0.0, out)


# ---------------------------------------------------------------------------
# Operations


def fit_stats(buffer: DemoBuffer) -> NormStats:
    """Elementwise token-space min/max over every observation in the buffer."""
    if len(buffer) == 0:
        raise EmptyBuffer("cannot fit stats on an empty buffer")
    emb = buffer.emb
    tok_lo = np.full(D_RAW, np.inf)
    tok_hi = np.full(D_RAW, -np.inf)
    e = emb.spec.extrasensory_dim
    ext_lo = np.full(e, np.inf)
    ext_hi = np.full(e, -np.inf)
    mask = presence_mask(emb)
    for demo in buffer.demos:
        toks, _ = raw_tokens(demo.states, emb)
        flat = toks.reshape(-1, emb.n_joints, D_RAW)
        # Pool only structurally present entries per slot.
        for s in range(D_RAW):
            present = mask[:, s]
            if not present.any():
                continue
            vals = flat[:, present, s]
            tok_lo[s] = min(tok_lo[s], float(vals.min()))
            tok_hi[s] = max(tok_hi[s], float(vals.max()))
        if e:
            extra = demo.states[:, 2 * emb.n_joints:]
            ext_lo = np.minimum(ext_lo, extra.min(axis=0))
            ext_hi = np.maximum(ext_hi, extra.max(axis=0))
    absent = ~np.isfinite(tok_lo)
    tok_lo[absent] = 0.0
    tok_hi[absent] = 0.0
    return NormStats(token_min=tok_lo, token_max=tok_hi,
                     extra_min=ext_lo, extra_max=ext_hi)


def tokenize_state(obs: np.ndarray, emb: Embodiment, stats: NormStats) -> StateFrame:
    """Normalized joint-level state tokens for one observation (or a batch)."""
    if stats is None:
        raise UnfittedStats("tokenize_state requires fitted NormStats")
    toks, mask = raw_tokens(obs, emb)
    normed = _normalize(toks, stats.token_min, stats.token_max)
    mask = mask & ~stats.token_degenerate[None, :]
    normed = normed * mask
    extra = None
    if emb.spec.extrasensory_dim:
        extra = pack_extrasensory(obs, emb, stats)
    types = np.array([KIND_INDEX[k] for k in emb.kinds], dtype=np.int64)
    return StateFrame(
        tokens=normed.astype(np.float32),
        types=types,
        presence_mask=mask,
        extrasensory=None if extra is None else extra.astype(np.float32),
    )


def pack_extrasensory(obs: np.ndarray, emb: Embodiment,
                      stats: Optional[NormStats] = None) -> np.ndarray:
    """Extrasensory vector (goal coordinates, then derived distances).

    The concatenation order is fixed by the observation builder; with stats the
    vector is min-max normalized, without it the raw values pass through.
    """
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[-1] != emb.obs_dim:
        raise DimensionMismatch(
            f"observation dim {obs.shape[-1]} != embodiment obs_dim {emb.obs_dim}"
        )
    extra = obs[..., 2 * emb.n_joints:]
    if extra.shape[-1] != emb.spec.extrasensory_dim:
        raise DimensionMismatch("extrasensory slice does not match extrasensory_dim")
    if stats is None:
        return extra
    out = _normalize(extra, stats.extra_min, stats.extra_max)
    return out * ~stats.extra_degenerate


def detokenize_action(frame, emb: Embodiment) -> np.ndarray:
    """Identity pass-through with free-joint entries forced to zero."""
    acts = frame.actions if isinstance(frame, ActionFrame) else np.asarray(frame, dtype=np.float64)
    if acts.shape[-1] != emb.n_joints:
        raise DimensionMismatch(f"action dim {acts.shape[-1]} != J ({emb.n_joints})")
    if np.any(np.abs(acts) > 1.0):
        j = int(np.argmax(np.abs(acts) > 1.0))
        raise OutOfRange(f"action at joint {j} outside [-1, 1]")
    return np.where(emb.is_free, 0.0, acts)
