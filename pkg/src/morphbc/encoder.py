"""Structure-motion state encoder with embodiment/task-adaptive parameters.

The encoder runs in two stages: a bi-directional transformer over the joint
axis of each state frame (morphology), then a causal transformer over the
temporal axis of each joint's feature stream (dynamics). Shared block weights
capture corpus-wide knowledge; small adaptive sets (positional rows, PEFT
slots, extrasensory projection) specialize it per embodiment and per
(embodiment, task) and are the only trainables during few-shot fine-tuning.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn

from .config import ModelConfig
from . import netcore as nc
from .netcore import BlockParams, PeftParams, ShapeMismatch


class MissingProjection(ValueError):
    pass


class WindowOverflow(ValueError):
    pass


class SharedEncoderParams(nn.Module):
    """Corpus-shared encoder weights; frozen bit-exactly during fine-tuning."""

    def __init__(self, cfg: ModelConfig, gen: torch.Generator, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.hinge_embed = nc._init(w, cfg.d_raw, gen, dtype=dtype)
        self.slide_embed = nc._init(w, cfg.d_raw, gen, dtype=dtype)
        self.free_embed = nc._init(w, cfg.d_raw, gen, dtype=dtype)
        self.theta_s = nn.ModuleList(
            BlockParams(w, cfg.heads, gen, dtype=dtype, depth=cfg.layers)
            for _ in range(cfg.layers)
        )
        self.theta_m = nn.ModuleList(
            BlockParams(w, cfg.heads, gen, dtype=dtype, depth=cfg.layers)
            for _ in range(cfg.layers)
        )
        self.p_m = nc._init(cfg.window, w, gen, dtype=dtype)

    @property
    def type_embeds(self):
        return (self.hinge_embed, self.slide_embed, self.free_embed)


class EmbodimentAdaptive(nn.Module):
    """Embodiment-specific parameters: joint positional rows, structure-encoder
    PEFT slots and (when needed) the extrasensory projection."""

    def __init__(self, cfg: ModelConfig, n_tokens: int, extrasensory_dim: int,
                 gen: torch.Generator, dtype=torch.float32, fresh_p_scale: float = 0.02):
        super().__init__()
        self.n_tokens = n_tokens
        self.extrasensory_dim = extrasensory_dim
        p = torch.empty(n_tokens, cfg.width, dtype=dtype)
        p.normal_(0.0, fresh_p_scale, generator=gen)
        self.p_s = nn.Parameter(p)
        self.s_peft = nn.ModuleList(
            PeftParams(cfg.width, cfg.rank, gen, dtype=dtype) for _ in range(cfg.layers)
        )
        if extrasensory_dim > 0:
            self.extra_proj = nc._init(cfg.width, extrasensory_dim, gen, dtype=dtype)
        else:
            self.extra_proj = None


class TaskAdaptive(nn.Module):
    """(Embodiment, task)-specific PEFT slots for the motion encoder."""

    def __init__(self, cfg: ModelConfig, gen: torch.Generator, dtype=torch.float32):
        super().__init__()
        self.m_peft = nn.ModuleList(
            PeftParams(cfg.width, cfg.rank, gen, dtype=dtype) for _ in range(cfg.layers)
        )


@dataclass
class AdaptiveParamSet:
    """(E, T)-scoped view pairing the embodiment part with the task part."""

    emb_params: EmbodimentAdaptive
    task_params: TaskAdaptive

    def parameters(self):
        yield from self.emb_params.parameters()
        yield from self.task_params.parameters()

    def scalar_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def neutralize(adaptive: AdaptiveParamSet) -> AdaptiveParamSet:
    """Zero the positional rows and reset PEFT to the identity point (used by
    the neutral-adaptive equivalence tests)."""
    with torch.no_grad():
        adaptive.emb_params.p_s.zero_()
        for peft in list(adaptive.emb_params.s_peft) + list(adaptive.task_params.m_peft):
            for t in nc.PEFT_TARGETS:
                getattr(peft, f"bias_{t}").zero_()
                getattr(peft, f"up_{t}").zero_()
            peft.ls_attn.fill_(1.0)
            peft.ls_mlp.fill_(1.0)
    return adaptive


# ---------------------------------------------------------------------------
# Batched internals


def embed_frames(tokens: torch.Tensor, types: torch.Tensor,
                 extra: Optional[torch.Tensor],
                 adaptive: AdaptiveParamSet, shared: SharedEncoderParams) -> torch.Tensor:
    """Type-separated token embedding plus positional rows.

    tokens [..., J, d_raw], types [J], extra [..., e] or None. Returns
    [..., K, width] where K = J (+1 when an extrasensory token is appended).
    """
    emb = adaptive.emb_params
    out = torch.zeros(tokens.shape[:-1] + (shared.cfg.width,),
                      dtype=tokens.dtype, device=tokens.device)
    for kind, weight in enumerate(shared.type_embeds):
        sel = types == kind
        if sel.any():
            out[..., sel, :] = tokens[..., sel, :] @ weight.T
    if extra is not None and extra.shape[-1] > 0:
        if emb.extra_proj is None:
            raise MissingProjection(
                "embodiment has extrasensory observations but no projection row"
            )
        g = (extra @ emb.extra_proj.T).unsqueeze(-2)
        out = torch.cat([out, g], dim=-2)
    if out.shape[-2] != emb.n_tokens:
        raise ShapeMismatch(
            f"token count {out.shape[-2]} != adaptive rows {emb.n_tokens}"
        )
    return out + emb.p_s


def structure_features(x: torch.Tensor, adaptive: AdaptiveParamSet,
                       shared: SharedEncoderParams,
                       joint_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Bi-directional blocks over the joint axis; joint_mask [..., K] (bool)
    hides padded rows from attention keys."""
    mask = None
    if joint_mask is not None:
        mask = nc.key_padding_mask(joint_mask, dtype=x.dtype)
    return nc.block_stack(x, shared.theta_s, mask=mask, pefts=list(adaptive.emb_params.s_peft))


def motion_features(z: torch.Tensor, adaptive: AdaptiveParamSet,
                    shared: SharedEncoderParams) -> torch.Tensor:
    """Causal blocks over a trailing window [..., w, width]; returns the last
    position's feature [..., width]."""
    w = z.shape[-2]
    if w > shared.cfg.window:
        raise WindowOverflow(f"window {w} exceeds capacity {shared.cfg.window}")
    x = z + shared.p_m[:w]
    mask = nc.causal_mask(w, dtype=z.dtype, device=z.device)
    x = nc.block_stack(x, shared.theta_m, mask=mask, pefts=list(adaptive.task_params.m_peft))
    return x[..., -1, :]


def motion_last_padded(z_win: torch.Tensor, lengths: torch.Tensor,
                       adaptive: AdaptiveParamSet,
                       shared: SharedEncoderParams) -> torch.Tensor:
    """Motion feature at the last valid position of right-padded windows.

    z_win [B, Hmax, width] holds each window's frames at slots 0..L-1 (pad
    after); causal masking keeps pad slots out of every valid position, so the
    readout at L-1 is exactly the unpadded window's output.
    """
    w = z_win.shape[-2]
    if w > shared.cfg.window:
        raise WindowOverflow(f"window {w} exceeds capacity {shared.cfg.window}")
    x = z_win + shared.p_m[:w]
    mask = nc.causal_mask(w, dtype=z_win.dtype, device=z_win.device)
    x = nc.block_stack(x, shared.theta_m, mask=mask, pefts=list(adaptive.task_params.m_peft))
    idx = (lengths - 1).view(-1, 1, 1).expand(-1, 1, x.shape[-1])
    return x.gather(-2, idx).squeeze(-2)


def window_indices(t_index: torch.Tensor, history: int) -> tuple:
    """Right-aligned trailing-window gather indices.

    Returns (idx [n, history], lengths [n], valid [n, history]); slot s of row
    i holds frame index max(t_i - L_i + 1, 0) + s, valid while s < L_i.
    """
    t_index = torch.as_tensor(t_index, dtype=torch.long)
    lengths = torch.clamp(t_index + 1, max=history)
    slots = torch.arange(history)
    start = t_index - lengths + 1
    idx = start.unsqueeze(1) + slots
    valid = slots.unsqueeze(0) < lengths.unsqueeze(1)
    return idx.clamp_min(0), lengths, valid


def motion_at_times(z_seq: torch.Tensor, t_index: torch.Tensor,
                    adaptive: AdaptiveParamSet, shared: SharedEncoderParams,
                    history: Optional[int] = None,
                    lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Motion features at selected timesteps of a structure-feature sequence.

    z_seq [T, J, width]; each t gets the trailing window of length
    min(t + 1, history) (or an explicit per-t length). Short early-episode
    prefixes keep exact causal semantics via right padding.
    Returns [len(t_index), J, width].
    """
    history = history or shared.cfg.history
    t_index = torch.as_tensor(t_index, dtype=torch.long)
    if lengths is None:
        idx, lengths, valid = window_indices(t_index, history)
    else:
        slots = torch.arange(history)
        start = t_index - lengths + 1
        idx = (start.unsqueeze(1) + slots).clamp_min(0)
        valid = slots.unsqueeze(0) < lengths.unsqueeze(1)
    idx = idx.clamp_max(z_seq.shape[0] - 1)              # pad slots may overrun
    zw = z_seq[idx] * valid[..., None, None]             # [n, hist, J, width]
    n, H, J, w = zw.shape
    flat = zw.permute(0, 2, 1, 3).reshape(n * J, H, w)
    out = motion_last_padded(flat, lengths.repeat_interleave(J), adaptive, shared)
    return out.reshape(n, J, w)


# ---------------------------------------------------------------------------
# Spec surfaces (single-sample wrappers)


def embed_tokens(frame, adaptive: AdaptiveParamSet,
                 shared: SharedEncoderParams) -> torch.Tensor:
    """Embed one tokenized StateFrame into [K, width]."""
    dtype = shared.p_m.dtype
    tokens = torch.as_tensor(frame.tokens, dtype=dtype)
    types = torch.as_tensor(frame.types, dtype=torch.long)
    extra = None
    if frame.extrasensory is not None and frame.extrasensory.shape[-1] > 0:
        extra = torch.as_tensor(frame.extrasensory, dtype=dtype)
    return embed_frames(tokens, types, extra, adaptive, shared)


def structure_forward(embedded: torch.Tensor, adaptive: AdaptiveParamSet,
                      shared: SharedEncoderParams,
                      joint_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    return structure_features(embedded, adaptive, shared, joint_mask)


def motion_forward(z_window: torch.Tensor, adaptive: AdaptiveParamSet,
                   shared: SharedEncoderParams) -> torch.Tensor:
    return motion_features(z_window, adaptive, shared)


def encode_states(frames: Sequence, adaptive: AdaptiveParamSet,
                  shared: SharedEncoderParams,
                  history: Optional[int] = None) -> torch.Tensor:
    """Full pipeline over a state-frame sequence s_<=t; returns per-joint
    motion features m_t [J, width].

    The extrasensory token participates in structure attention but is dropped
    before the temporal stage (it has no action stream). Only the trailing
    `history` frames influence the output.
    """
    history = history or shared.cfg.history
    window = frames[-history:]
    zs = []
    for frame in window:
        z = structure_forward(embed_tokens(frame, adaptive, shared), adaptive, shared)
        n_joints = frame.tokens.shape[-2]
        zs.append(z[:n_joints])
    z_seq = torch.stack(zs, dim=0)              # [w, J, width]
    per_joint = z_seq.transpose(0, 1)           # [J, w, width]
    return motion_features(per_joint, adaptive, shared)
