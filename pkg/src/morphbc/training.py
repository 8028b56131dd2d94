"""Episodic meta-learning over the multi-embodiment corpus and few-shot
fine-tuning of adaptive parameters.

Each episode samples a control problem, a temporal segment of its replay
buffer, support demonstrations to condition the matching policy and query
state-action pairs to imitate. The meta objective is the flat mean squared
error over all query action tokens in the batch; fine-tuning optimizes the
same objective with the shared parameters bit-frozen.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .config import ModelConfig, TrainConfig
from . import encoder as enc
from . import policy as pol
from . import simkit as sk
from . import tokenizer as tk
from .model import MetaModel


class BufferTooSmall(ValueError):
    pass


class TooFewDemos(ValueError):
    pass


class NonFiniteLoss(ArithmeticError):
    pass


@dataclass
class CorpusEntry:
    """One (embodiment, task) buffer with its tokenization precomputed."""

    emb: sk.Embodiment
    task: sk.TaskSpec
    demos: list
    stats: tk.NormStats
    tokens: torch.Tensor          # [N, T, J, d_raw]
    extra: Optional[torch.Tensor]  # [N, T, e] or None
    types: torch.Tensor           # [J]
    actions: torch.Tensor         # [N, T, J]

    @property
    def n_tokens(self) -> int:
        return self.emb.n_joints + (1 if self.emb.spec.extrasensory_dim > 0 else 0)


def corpus_entry(buffer: sk.DemoBuffer, stats: Optional[tk.NormStats] = None,
                 dtype=torch.float32) -> CorpusEntry:
    stats = stats or tk.fit_stats(buffer)
    emb = buffer.emb
    frames = [tk.tokenize_state(d.states, emb, stats) for d in buffer.demos]
    tokens = torch.as_tensor(np.stack([f.tokens for f in frames]), dtype=dtype)
    extra = None
    if emb.spec.extrasensory_dim > 0:
        extra = torch.as_tensor(np.stack([f.extrasensory for f in frames]), dtype=dtype)
    types = torch.as_tensor(frames[0].types, dtype=torch.long)
    actions = torch.as_tensor(np.stack([d.actions for d in buffer.demos]), dtype=dtype)
    return CorpusEntry(emb=emb, task=buffer.task, demos=list(buffer.demos),
                       stats=stats, tokens=tokens, extra=extra, types=types,
                       actions=actions)


def load_corpus(corpus_dir, dtype=torch.float32) -> dict:
    """Load every DemoBuffer directory under corpus_dir, keyed (emb, task)."""
    corpus = {}
    for sub in sorted(Path(corpus_dir).iterdir()):
        if not (sub / "demos.bin").exists():
            continue
        buffer = sk.DemoBuffer.load(sub)
        stats_path = sub / "stats.json"
        stats = tk.NormStats.load(stats_path) if stats_path.exists() else None
        entry = corpus_entry(buffer, stats, dtype=dtype)
        corpus[(entry.emb.name, entry.task.name)] = entry
    if not corpus:
        raise FileNotFoundError(f"no demo buffers found under {corpus_dir}")
    return corpus


# ---------------------------------------------------------------------------
# Episode sampling


@dataclass(frozen=True)
class Episode:
    emb_name: str
    task_name: str
    support_idx: tuple
    query_idx: int
    segment_origin: int
    anchors: tuple


def sample_episode(corpus: dict, rng: np.random.Generator,
                   config: TrainConfig) -> Episode:
    """Uniform (E, T); support and query demos drawn without replacement from
    one temporal segment; query timesteps subsampled uniformly."""
    keys = sorted(corpus.keys())
    key = keys[rng.integers(len(keys))]
    entry = corpus[key]
    n = len(entry.demos)
    seg = config.segment_size
    if n < seg:
        raise BufferTooSmall(
            f"buffer {key} holds {n} demos; episodic sampling needs >= {seg}"
        )
    origin = int(rng.integers(0, n - seg + 1))
    picks = rng.choice(seg, size=config.support_size + 1, replace=False) + origin
    support = tuple(int(i) for i in picks[:-1])
    query = int(picks[-1])
    T = entry.tokens.shape[1]
    anchors = tuple(int(t) for t in rng.integers(0, T, size=config.query_anchors))
    return Episode(emb_name=key[0], task_name=key[1], support_idx=support,
                   query_idx=query, segment_origin=origin, anchors=anchors)


# ---------------------------------------------------------------------------
# Batched episode loss


def _structure_all(tokens: torch.Tensor, types: torch.Tensor,
                   extra: Optional[torch.Tensor], adaptive, shared) -> torch.Tensor:
    """Structure features for stacked demos [..., T, J, d] -> [..., T, J, width]."""
    lead = tokens.shape[:-2]
    J = tokens.shape[-2]
    flat_tokens = tokens.reshape(-1, J, tokens.shape[-1])
    flat_extra = None
    if extra is not None:
        flat_extra = extra.reshape(-1, extra.shape[-1])
    x = enc.embed_frames(flat_tokens, types, flat_extra, adaptive, shared)
    z = enc.structure_features(x, adaptive, shared)
    return z[..., :J, :].reshape(*lead, J, shared.cfg.width)


def group_loss(entry: CorpusEntry, episodes: Sequence[Episode], model: MetaModel,
               config: TrainConfig) -> tuple:
    """Squared-error sum and token count for episodes sharing one (E, T)."""
    shared, policy = model.shared, model.policy
    cfg = model.cfg
    adaptive = model.adaptive(entry.emb.name, entry.task.name)
    history = cfg.history
    J = entry.emb.n_joints
    n_ep = len(episodes)
    T = entry.tokens.shape[1]

    if T < history:
        raise BufferTooSmall(
            f"demos of length {T} are shorter than the history window {history}"
        )
    sup_idx = torch.tensor([e.support_idx for e in episodes])          # [n_ep, Ns]
    qry_idx = torch.tensor([e.query_idx for e in episodes])            # [n_ep]
    Ns = sup_idx.shape[1]

    # Support keys/values (gradients flow through this path too). Structure
    # features are computed only for frames inside key windows, so the cost is
    # independent of the demo horizon (frames recur when stride < history).
    t_keys = pol.demo_key_times(T, config.match_stride, history)
    K_t = t_keys.numel()
    offs = torch.arange(-(history - 1), 1)
    win_idx = (t_keys.unsqueeze(1) + offs).reshape(-1)                 # [K_t * hist]
    sup_tokens = entry.tokens[sup_idx][:, :, win_idx]                  # [n_ep, Ns, K_t*h, J, d]
    sup_extra = entry.extra[sup_idx][:, :, win_idx] if entry.extra is not None else None
    z_sup = _structure_all(sup_tokens, entry.types, sup_extra, adaptive, shared)
    zw = z_sup.reshape(n_ep, Ns, K_t, history, J, cfg.width)
    zw = zw.permute(0, 1, 2, 4, 3, 5).reshape(-1, history, cfg.width)
    keys = enc.motion_features(zw, adaptive, shared).reshape(n_ep, Ns, K_t, J, cfg.width)
    aw = entry.actions[sup_idx][:, :, win_idx].reshape(n_ep, Ns, K_t, history, J)
    vals = pol.encode_actions_batch(
        aw.permute(0, 1, 2, 4, 3).reshape(-1, history), policy
    ).reshape(n_ep, Ns, K_t, J, cfg.width)
    keys = keys.permute(0, 3, 1, 2, 4).reshape(n_ep, J, Ns * K_t, cfg.width)
    vals = vals.permute(0, 3, 1, 2, 4).reshape(n_ep, J, Ns * K_t, cfg.width)

    # Query side: one contiguous frame span per anchor covers every decode
    # position's motion window.
    anchors = torch.tensor([e.anchors for e in episodes])              # [n_ep, A]
    A = anchors.shape[1]
    u_idx, dec_len, dec_valid = enc.window_indices(anchors.reshape(-1), history)
    n_anchor = u_idx.shape[0]                                          # n_ep * A
    ep_of_anchor = torch.arange(n_ep).repeat_interleave(A)

    span = 2 * history - 1
    span_start = (anchors.reshape(-1) - span + 1).clamp_min(0)         # [n_anchor]
    span_idx = (span_start.unsqueeze(1) + torch.arange(span)).clamp_max(T - 1)
    qry_tokens = entry.tokens[qry_idx]                                 # [n_ep, T, J, d]
    qry_extra = entry.extra[qry_idx] if entry.extra is not None else None
    span_tokens = qry_tokens[ep_of_anchor.unsqueeze(1), span_idx]      # [n_anchor, span, J, d]
    span_extra = None
    if qry_extra is not None:
        span_extra = qry_extra[ep_of_anchor.unsqueeze(1), span_idx]
    z_span = _structure_all(span_tokens, entry.types, span_extra, adaptive, shared)

    u_flat = u_idx.reshape(-1)                                         # [n_anchor * H]
    anchor_flat = torch.arange(n_anchor).repeat_interleave(history)
    ep_flat = ep_of_anchor.repeat_interleave(history)
    m_len = torch.clamp(u_flat + 1, max=history)
    m_start_local = (u_flat - m_len + 1) - span_start[anchor_flat]     # >= 0 by construction
    m_idx_local = (m_start_local.unsqueeze(1) + torch.arange(history)).clamp(0, span - 1)
    m_valid = torch.arange(history).unsqueeze(0) < m_len.unsqueeze(1)
    zw_q = z_span[anchor_flat.unsqueeze(1), m_idx_local] * m_valid[..., None, None]
    R = zw_q.shape[0]
    m_rows = enc.motion_last_padded(
        zw_q.permute(0, 2, 1, 3).reshape(R * J, history, cfg.width),
        m_len.repeat_interleave(J), adaptive, shared,
    ).reshape(R, J, cfg.width)

    # Joint-wise matching against the owning episode's keys.
    q = m_rows.unsqueeze(2)                                            # [R, J, 1, w]
    vhat = pol.match_batched(q, keys[ep_flat], vals[ep_flat], mode=cfg.match_mode,
                             params=policy, tau=cfg.cosine_tau,
                             heads=cfg.heads).squeeze(2)               # [R, J, w]

    # Causal decoding over each anchor's matched-feature window; supervise
    # every valid position.
    vh = vhat.reshape(n_anchor, history, J, cfg.width).permute(0, 2, 1, 3)
    preds = pol.decode_actions_batch(
        vh.reshape(n_anchor * J, history, cfg.width), policy
    ).reshape(n_anchor, J, history)
    qry_actions = entry.actions[qry_idx]                               # [n_ep, T, J]
    tgt = qry_actions[ep_flat, u_flat].reshape(n_anchor, history, J)
    mask = dec_valid.unsqueeze(1)                                      # [n_anchor, 1, H]
    sq = ((preds - tgt.transpose(1, 2)) ** 2) * mask
    return sq.sum(), int(mask.sum()) * J


def batch_loss(corpus: dict, episodes: Sequence[Episode], model: MetaModel,
               config: TrainConfig) -> torch.Tensor:
    """Flat token-mean MSE over all query action tokens in the batch."""
    groups = {}
    for e in episodes:
        groups.setdefault((e.emb_name, e.task_name), []).append(e)
    total = torch.zeros((), dtype=model.dtype)
    count = 0
    for key, eps in sorted(groups.items()):
        sq, n = group_loss(corpus[key], eps, model, config)
        total = total + sq
        count += n
    return total / count


def meta_train_step(corpus: dict, episodes: Sequence[Episode], model: MetaModel,
                    optimizer: torch.optim.Optimizer, config: TrainConfig) -> float:
    loss = batch_loss(corpus, episodes, model, config)
    if not torch.isfinite(loss):
        dump = "; ".join(
            f"({e.emb_name}/{e.task_name} sup={e.support_idx} qry={e.query_idx} "
            f"seg={e.segment_origin} anchors={e.anchors})" for e in episodes
        )
        raise NonFiniteLoss(f"non-finite loss on episodes {dump}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    model.param_version += 1
    return float(loss.detach())


def poly_lr(step: int, config: TrainConfig) -> float:
    """Linear warmup to base_lr, then polynomial decay to zero."""
    if step <= config.warmup:
        return config.base_lr * step / config.warmup
    frac = (step - config.warmup) / (config.iterations - config.warmup)
    return config.base_lr * (1.0 - frac) ** config.poly_power


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def init_adaptive(model: MetaModel, emb: sk.Embodiment, task_name: str,
                  donor: Optional[str] = None, correspondence=None,
                  check_budget: bool = True):
    """Register adaptive parameters for a (possibly new) (E, T) pair."""
    n_tokens = emb.n_joints + (1 if emb.spec.extrasensory_dim > 0 else 0)
    return model.init_adaptive(emb.name, task_name, n_tokens,
                               emb.spec.extrasensory_dim, donor=donor,
                               correspondence=correspondence,
                               check_budget=check_budget)


# ---------------------------------------------------------------------------
# Stage 1: episodic meta-learning


def meta_train(corpus: dict, model: MetaModel, config: TrainConfig,
               out_dir, log_every: int = 1,
               stop_fn: Optional[Callable[[int, float], bool]] = None) -> list:
    """Run Stage 1; writes metrics.csv (one row per iteration), periodic
    checkpoints and a run.json config echo. Returns the loss trace."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for key, entry in corpus.items():
        if not model.has_adaptive(*key):
            init_adaptive(model, entry.emb, entry.task.name, check_budget=False)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.base_lr,
                                 betas=config.adam_betas, eps=config.adam_eps,
                                 foreach=True)
    rng = np.random.default_rng(config.seed)
    (out_dir / "run.json").write_text(json.dumps({
        "config": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in vars(config).items()},
        "model": {k: v for k, v in vars(model.cfg).items()},
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }, indent=2) + "\n")

    trace = []
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "lr"])
        for step in range(1, config.iterations + 1):
            lr = poly_lr(step, config)
            _set_lr(optimizer, lr)
            episodes = [sample_episode(corpus, rng, config)
                        for _ in range(config.global_batch)]
            loss = meta_train_step(corpus, episodes, model, optimizer, config)
            trace.append(loss)
            writer.writerow([step, f"{loss:.8e}", f"{lr:.8e}"])
            if step % config.checkpoint_every == 0 or step == config.iterations:
                model.save(out_dir / f"ckpt_{step:07d}.mck")
            if stop_fn is not None and stop_fn(step, loss):
                model.save(out_dir / f"ckpt_{step:07d}.mck")
                break
    return trace


# ---------------------------------------------------------------------------
# Stage 2: few-shot fine-tuning


def finetune(model: MetaModel, demos: Sequence[sk.Demonstration], emb: sk.Embodiment,
             task: sk.TaskSpec, config: TrainConfig,
             stats: Optional[tk.NormStats] = None,
             eval_fn: Optional[Callable] = None,
             out_dir=None,
             trainable: str = "adaptive",
             donor: Optional[str] = None,
             correspondence=None,
             check_budget: bool = True,
             rng: Optional[np.random.Generator] = None):
    """Adapt to a new (E, T) from N demonstrations.

    Every iteration resplits the demonstrations into disjoint support/query
    halves and takes one Adam step at the constant fine-tune rate. With
    trainable="adaptive" only the adaptive set updates and the shared
    parameters are verified bit-frozen; trainable="all" realizes the
    from-scratch baseline. Returns (adaptive set, [(step, loss, score)] trace).
    """
    n = len(demos)
    if n < 2:
        raise TooFewDemos(f"fine-tuning needs >= 2 demonstrations, got {n}")
    rng = rng or np.random.default_rng(config.seed)
    if stats is None:
        stats = tk.fit_stats(sk.DemoBuffer(emb, task, list(demos)))
    if not model.has_adaptive(emb.name, task.name):
        init_adaptive(model, emb, task.name, donor=donor,
                      correspondence=correspondence, check_budget=check_budget)
    adaptive = model.adaptive(emb.name, task.name)

    buffer = sk.DemoBuffer(emb, task, list(demos))
    entry = corpus_entry(buffer, stats, dtype=model.dtype)
    corpus = {(emb.name, task.name): entry}

    if trainable == "adaptive":
        params = list(adaptive.parameters())
        frozen_before = model.shared_checksum()
        for p in model.shared_parameters():
            p.requires_grad_(False)
    elif trainable == "all":
        params = [p for p in model.parameters() if p.requires_grad]
        frozen_before = None
    else:
        raise ValueError(f"unknown trainable selector {trainable!r}")
    optimizer = torch.optim.Adam(params, lr=config.finetune_lr,
                                 betas=config.adam_betas, eps=config.adam_eps,
                                 foreach=True)

    T = entry.tokens.shape[1]
    trace = []
    writer = None
    fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(out_dir / "finetune_metrics.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "eval_score"])
    try:
        for step in range(1, config.finetune_iterations + 1):
            perm = rng.permutation(n)
            k = int(rng.choice([n // 2, n - n // 2]))
            support = tuple(int(i) for i in perm[:k])
            query_pool = perm[k:]
            query = int(query_pool[rng.integers(len(query_pool))])
            anchors = tuple(int(t) for t in rng.integers(0, T, size=config.query_anchors))
            episode = Episode(emb_name=emb.name, task_name=task.name,
                              support_idx=support, query_idx=query,
                              segment_origin=0, anchors=anchors)
            loss = meta_train_step(corpus, [episode], model, optimizer, config)
            score = ""
            if eval_fn is not None and step % config.eval_every == 0:
                score_val = eval_fn(model, adaptive, step)
                trace.append((step, loss, score_val))
                score = f"{score_val:.6f}"
            if writer is not None:
                writer.writerow([step, f"{loss:.8e}", score])
    finally:
        if fh is not None:
            fh.close()
        if trainable == "adaptive":
            for p in model.shared_parameters():
                p.requires_grad_(True)
    if trainable == "adaptive":
        assert model.shared_checksum() == frozen_before, \
            "shared parameters changed during fine-tuning"
    return adaptive, trace
