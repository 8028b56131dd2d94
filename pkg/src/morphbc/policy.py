"""Matching-based policy: action encoder, joint-wise matching, action decoder.

Demonstration state/action streams are encoded per joint into key/value
features ("local motor skills"); the current state's motion feature queries
them with multi-head cross-attention (or a cosine-softmax variant) and a
causal decoder turns the matched-feature window into the next action token.
Matching accumulates in f64 so the output is exactly invariant to the order of
the demonstrations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from . import netcore as nc
from . import encoder as enc
from . import tokenizer as tk
from .encoder import AdaptiveParamSet, SharedEncoderParams, WindowOverflow
from .netcore import BlockParams, ShapeMismatch


class EmptyDemonstrationSet(ValueError):
    pass


class StaleCache(RuntimeError):
    pass


class PolicyParams(nn.Module):
    """Task-agnostic policy weights; frozen during fine-tuning."""

    def __init__(self, cfg: ModelConfig, gen: torch.Generator, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.a_embed = nc._init(w, 1, gen, dtype=dtype)
        self.p_g = nc._init(cfg.window, w, gen, dtype=dtype)
        self.g_blocks = nn.ModuleList(
            BlockParams(w, cfg.heads, gen, dtype=dtype, depth=cfg.layers)
            for _ in range(cfg.layers)
        )
        self.match_q = nc._init(w, w, gen, dtype=dtype)
        self.match_k = nc._init(w, w, gen, dtype=dtype)
        self.match_v = nc._init(w, w, gen, dtype=dtype)
        self.match_o = nc._init(w, w, gen, dtype=dtype)
        self.h_blocks = nn.ModuleList(
            BlockParams(w, cfg.heads, gen, dtype=dtype, depth=cfg.layers)
            for _ in range(cfg.layers)
        )
        self.head = nc._init(1, w, gen, std=0.02, dtype=dtype)


# ---------------------------------------------------------------------------
# Action encoder g


def encode_actions_batch(actions: torch.Tensor, params: PolicyParams) -> torch.Tensor:
    """Scalar action windows [..., w] -> last-position features [..., width]."""
    w = actions.shape[-1]
    if w > params.cfg.window:
        raise WindowOverflow(f"window {w} exceeds capacity {params.cfg.window}")
    x = actions.unsqueeze(-1) @ params.a_embed.T + params.p_g[:w]
    mask = nc.causal_mask(w, dtype=x.dtype, device=x.device)
    x = nc.block_stack(x, params.g_blocks, mask=mask)
    return x[..., -1, :]


def encode_actions(actions: Sequence[float], params: PolicyParams) -> torch.Tensor:
    seq = torch.as_tensor(np.asarray(actions), dtype=params.a_embed.dtype)
    return encode_actions_batch(seq, params)


# ---------------------------------------------------------------------------
# Matching sigma


def match_batched(queries: torch.Tensor, keys: torch.Tensor, values: torch.Tensor,
                  mode: str, params: Optional[PolicyParams] = None,
                  tau: float = 10.0, heads: int = 4,
                  return_weights: bool = False):
    """Similarity-weighted pooling of value features.

    queries [..., Q, w], keys/values [..., K, w]. All reductions run in f64 and
    are cast back, which makes the result exact under permutations of the key
    set at the working precision.
    """
    if keys.shape[-2] == 0:
        raise EmptyDemonstrationSet("matching requires at least one demonstration key")
    in_dtype = queries.dtype
    q64, k64, v64 = queries.double(), keys.double(), values.double()
    if mode == "cross_attention":
        if params is None:
            raise ValueError("cross_attention mode requires PolicyParams")
        wq, wk = params.match_q.double(), params.match_k.double()
        wv, wo = params.match_v.double(), params.match_o.double()
        q = q64 @ wq.T
        k = k64 @ wk.T
        v = v64 @ wv.T
        out = nc.attention(q, k, v, heads=heads, w_o=wo)
        weights = None
        if return_weights:
            w = queries.shape[-1]
            d = w // heads
            qs = q.reshape(*q.shape[:-1], heads, d).transpose(-3, -2)
            ks = k.reshape(*k.shape[:-1], heads, d).transpose(-3, -2)
            weights = torch.softmax(qs @ ks.transpose(-1, -2) / d ** 0.5, dim=-1)
    elif mode == "cosine_softmax":
        qn = q64 / q64.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        kn = k64 / k64.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        weights = torch.softmax(tau * (qn @ kn.transpose(-1, -2)), dim=-1)
        out = weights @ v64
    else:
        raise ValueError(f"unknown matching mode {mode!r}")
    out = out.to(in_dtype)
    if return_weights:
        return out, weights
    return out


def match(m_query: torch.Tensor, keys, values, mode: str = "cross_attention",
          params: Optional[PolicyParams] = None, tau: float = 10.0,
          heads: int = 4) -> torch.Tensor:
    """Single-query surface over lists of aligned key/value features."""
    keys = torch.stack(list(keys)) if not torch.is_tensor(keys) else keys
    values = torch.stack(list(values)) if not torch.is_tensor(values) else values
    if keys.shape != values.shape:
        raise ShapeMismatch("keys and values must align 1:1")
    if keys.shape[0] == 0:
        raise EmptyDemonstrationSet("matching requires at least one demonstration key")
    out = match_batched(m_query.reshape(1, 1, -1), keys.unsqueeze(0), values.unsqueeze(0),
                        mode=mode, params=params, tau=tau, heads=heads)
    return out[0, 0]


# ---------------------------------------------------------------------------
# Action decoder h


def decode_actions_batch(vhat: torch.Tensor, params: PolicyParams) -> torch.Tensor:
    """Matched-feature windows [..., w, width] -> raw action scalars [..., w]
    for every causal position (clip only at execution time)."""
    w = vhat.shape[-2]
    if w > params.cfg.window:
        raise WindowOverflow(f"window {w} exceeds capacity {params.cfg.window}")
    mask = nc.causal_mask(w, dtype=vhat.dtype, device=vhat.device)
    x = nc.block_stack(vhat, params.h_blocks, mask=mask)
    return (x @ params.head.T).squeeze(-1)


def decode_actions(vhat_window: torch.Tensor, params: PolicyParams) -> torch.Tensor:
    """Last-position raw action scalar for one window [w, width]."""
    return decode_actions_batch(vhat_window.unsqueeze(0), params)[0, -1]


# ---------------------------------------------------------------------------
# Demonstration feature cache


@dataclass
class DemoFeatureCache:
    keys: torch.Tensor       # [J, n_keys, width] state features m^i_{j,t'}
    values: torch.Tensor     # [J, n_keys, width] action features v^i_{j,t'}
    stride: int
    param_version: int

    @property
    def n_keys(self) -> int:
        return self.keys.shape[1]


def encode_actions_last_padded(a_win: torch.Tensor, lengths: torch.Tensor,
                               params: PolicyParams) -> torch.Tensor:
    """Action feature at the last valid slot of right-padded windows
    [B, Hmax] (same causal-padding scheme as the motion encoder)."""
    w = a_win.shape[-1]
    if w > params.cfg.window:
        raise WindowOverflow(f"window {w} exceeds capacity {params.cfg.window}")
    x = a_win.unsqueeze(-1) @ params.a_embed.T + params.p_g[:w]
    mask = nc.causal_mask(w, dtype=x.dtype, device=x.device)
    x = nc.block_stack(x, params.g_blocks, mask=mask)
    idx = (lengths - 1).view(-1, 1, 1).expand(-1, 1, x.shape[-1])
    return x.gather(-2, idx).squeeze(-2)


def action_features_at_times(actions: torch.Tensor, t_index: torch.Tensor,
                             params: PolicyParams,
                             history: Optional[int] = None) -> torch.Tensor:
    """Action-history features at selected timesteps; actions [T, J] ->
    [len(t_index), J, width], window length min(t + 1, history) per t."""
    history = history or params.cfg.history
    idx, lengths, valid = enc.window_indices(t_index, history)
    idx = idx.clamp_max(actions.shape[0] - 1)
    aw = actions[idx] * valid[..., None]                  # [n, hist, J]
    n, H, J = aw.shape
    flat = aw.permute(0, 2, 1).reshape(n * J, H)
    out = encode_actions_last_padded(flat, lengths.repeat_interleave(J), params)
    return out.reshape(n, J, -1)


def structure_sequence(states: np.ndarray, emb, adaptive: AdaptiveParamSet,
                       shared: SharedEncoderParams, stats) -> torch.Tensor:
    """Structure features for a whole observation stream [T, obs_dim] ->
    [T, J, width] (the extrasensory token is dropped after attention)."""
    dtype = shared.p_m.dtype
    frame = tk.tokenize_state(states, emb, stats)
    tokens = torch.as_tensor(frame.tokens, dtype=dtype)
    types = torch.as_tensor(frame.types, dtype=torch.long)
    extra = None
    if frame.extrasensory is not None and frame.extrasensory.shape[-1] > 0:
        extra = torch.as_tensor(frame.extrasensory, dtype=dtype)
    z = enc.structure_features(
        enc.embed_frames(tokens, types, extra, adaptive, shared), adaptive, shared
    )
    return z[..., :emb.n_joints, :]


def demo_key_times(T: int, stride: int, history: int) -> torch.Tensor:
    """Times whose trailing windows serve as matching keys."""
    first = min(history - 1, T - 1)
    return torch.arange(first, T, stride)


def encode_demo_features(demos, emb, adaptive: AdaptiveParamSet,
                         shared: SharedEncoderParams, policy: PolicyParams,
                         stats, stride: int = 1, history: Optional[int] = None,
                         param_version: int = 0) -> DemoFeatureCache:
    """Encode every demonstration's state/action streams into matching keys
    and values at the given temporal stride."""
    if len(demos) == 0:
        raise EmptyDemonstrationSet("no demonstrations to encode")
    history = history or shared.cfg.history
    dtype = shared.p_m.dtype
    all_keys, all_vals = [], []
    for demo in demos:
        z = structure_sequence(demo.states, emb, adaptive, shared, stats)
        t_idx = demo_key_times(z.shape[0], stride, history)
        m = enc.motion_at_times(z, t_idx, adaptive, shared, history)
        acts = torch.as_tensor(demo.actions, dtype=dtype)
        v = action_features_at_times(acts, t_idx, policy, history)
        all_keys.append(m)
        all_vals.append(v)
    keys = torch.cat(all_keys, dim=0).transpose(0, 1).contiguous()   # [J, n_keys, width]
    values = torch.cat(all_vals, dim=0).transpose(0, 1).contiguous()
    return DemoFeatureCache(keys=keys, values=values, stride=stride,
                            param_version=param_version)


# ---------------------------------------------------------------------------
# Full policy forward (reference path used by rollouts)


def policy_forward(frames: Sequence, demos, emb, adaptive: AdaptiveParamSet,
                   shared: SharedEncoderParams, policy: PolicyParams,
                   cache: Optional[DemoFeatureCache] = None,
                   stats=None, mode: str = "cross_attention", tau: float = 10.0,
                   param_version: int = 0, stride: int = 1) -> tk.ActionFrame:
    """Predict the current ActionFrame from state history and demonstrations.

    Either a fresh cache or the raw demonstrations (for re-encoding) must be
    supplied; free joints are forced to zero.
    """
    if cache is not None and cache.param_version != param_version:
        raise StaleCache(
            f"cache was built at parameter version {cache.param_version}, "
            f"current is {param_version}"
        )
    if cache is None:
        if demos is None or len(demos) == 0:
            raise EmptyDemonstrationSet("policy_forward needs demonstrations or a cache")
        cache = encode_demo_features(demos, emb, adaptive, shared, policy, stats,
                                     stride=stride, param_version=param_version)

    history = shared.cfg.history
    dtype = shared.p_m.dtype
    F = len(frames)
    n_dec = min(F, history)

    # One structure pass over the frames feeding any decode-position window.
    keep = min(F, 2 * history - 1)
    window_frames = frames[-keep:]
    tokens = torch.as_tensor(np.stack([f.tokens for f in window_frames]), dtype=dtype)
    types = torch.as_tensor(window_frames[0].types, dtype=torch.long)
    extra = None
    if window_frames[0].extrasensory is not None and window_frames[0].extrasensory.shape[-1] > 0:
        extra = torch.as_tensor(np.stack([f.extrasensory for f in window_frames]), dtype=dtype)
    z = enc.structure_features(
        enc.embed_frames(tokens, types, extra, adaptive, shared), adaptive, shared
    )[..., :emb.n_joints, :]                                  # [keep, J, width]

    # Window lengths are taken relative to the true stream, so early steps
    # keep their short causal prefixes.
    t_global = torch.arange(F - n_dec, F)
    t_local = t_global - (F - keep)
    lengths = torch.clamp(t_global + 1, max=history)
    m = enc.motion_at_times(z, t_local, adaptive, shared, history,
                            lengths=lengths)                  # [n_dec, J, width]
    q = m.transpose(0, 1)                                     # [J, n_dec, width]
    vhat = match_batched(q, cache.keys, cache.values, mode=mode,
                         params=policy, tau=tau, heads=policy.cfg.heads)
    raw = decode_actions_batch(vhat, policy)[..., -1]         # [J]
    acts = raw.detach().cpu().numpy().astype(np.float64)
    acts = np.clip(acts, -1.0, 1.0)
    acts = np.where(emb.is_free, 0.0, acts)
    return tk.ActionFrame(actions=acts)
