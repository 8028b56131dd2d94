"""Rollout harness, normalized scores, best-checkpoint selection, rank search,
the from-scratch baseline and report generation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable, Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np
import torch

from .config import TrainConfig
from . import policy as pol
from . import simkit as sk
from . import tokenizer as tk
from . import training as tr
from .model import MetaModel

EVAL_SEEDS = tuple(range(20))       # fixed evaluation seeds, below 1000
REF_SEEDS = tuple(range(sk.REF_SEED_BASE, sk.REF_SEED_BASE + 100))


class DegenerateRefs(ValueError):
    pass


class SeedRangeError(ValueError):
    pass


@dataclass
class ScoreRefs:
    random_return: float
    expert_return: float

    def __post_init__(self):
        if not self.expert_return > self.random_return:
            raise DegenerateRefs(
                f"expert return {self.expert_return} must exceed random "
                f"return {self.random_return}; the task is degenerate"
            )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ScoreRefs":
        doc = json.loads(Path(path).read_text())
        return cls(random_return=doc["random_return"], expert_return=doc["expert_return"])


@dataclass
class EvalResult:
    returns: list                 # 20 per-seed raw returns
    mean_return: float
    mean_score: float             # normalized, x100 scale
    stderr: float                 # of the normalized score
    checkpoint_step: int = 0
    rank: int = 0
    shots: int = 0
    embodiment: str = ""
    task: str = ""
    method: str = ""

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "EvalResult":
        return cls(**json.loads(Path(path).read_text()))


def compute_refs(emb: sk.Embodiment, task: sk.TaskSpec,
                 seeds: Sequence[int] = REF_SEEDS) -> ScoreRefs:
    """Mean returns of the uniform-random policy and the scripted expert."""
    expert_rets, random_rets = [], []
    for s in seeds:
        expert_rets.append(
            sk.run_episode(lambda st, o: sk.expert_action(task, st, emb),
                           emb, task, seed=s).episode_return
        )
        rng = np.random.default_rng([s, 0xA5])
        random_rets.append(
            sk.run_episode(lambda st, o: rng.uniform(-1.0, 1.0, emb.n_joints),
                           emb, task, seed=s).episode_return
        )
    return ScoreRefs(random_return=float(np.mean(random_rets)),
                     expert_return=float(np.mean(expert_rets)))


def normalized_score(ret: float, refs: ScoreRefs) -> float:
    """100 * (return - random) / (expert - random); may leave [0, 100]."""
    return 100.0 * (ret - refs.random_return) / (refs.expert_return - refs.random_return)


# ---------------------------------------------------------------------------
# Rollouts


class ModelPolicy:
    """Adapts the matching policy to the simulator loop, maintaining the
    tokenized frame history and a demonstration feature cache."""

    def __init__(self, model: MetaModel, adaptive, demos, emb: sk.Embodiment,
                 stats: tk.NormStats, stride: int = 1):
        self.model = model
        self.adaptive = adaptive
        self.emb = emb
        self.stats = stats
        self.cache = pol.encode_demo_features(
            demos, emb, adaptive, model.shared, model.policy, stats,
            stride=stride, param_version=model.param_version,
        )
        self.frames = []

    def reset(self) -> None:
        self.frames = []

    def __call__(self, state: sk.SimState, obs: np.ndarray) -> np.ndarray:
        self.frames.append(tk.tokenize_state(obs, self.emb, self.stats))
        keep = 2 * self.model.cfg.history
        if len(self.frames) > keep:
            self.frames = self.frames[-keep:]
        with torch.no_grad():
            frame = pol.policy_forward(
                self.frames, None, self.emb, self.adaptive, self.model.shared,
                self.model.policy, cache=self.cache,
                mode=self.model.cfg.match_mode, tau=self.model.cfg.cosine_tau,
                param_version=self.model.param_version,
            )
        return tk.detokenize_action(frame, self.emb)


def rollout(policy_fn: Callable, emb: sk.Embodiment, task: sk.TaskSpec, seed: int,
            noise_level: float = 0.0, noise_seed: int = 0,
            frame_dump: Optional[Path] = None) -> sk.Demonstration:
    """One evaluation episode; optional uniform execution noise
    eps ~ U[-n, n] with n expressed as a fraction of the action range."""
    if seed >= sk.DEMO_SEED_BASE:
        raise SeedRangeError(f"evaluation seeds must stay below {sk.DEMO_SEED_BASE}")
    if hasattr(policy_fn, "reset"):
        policy_fn.reset()
    wrapped = policy_fn
    if noise_level > 0.0:
        rng = np.random.default_rng([noise_seed, seed])
        n = noise_level * 2.0    # fraction of the [-1, 1] action range

        def wrapped(state, obs, _inner=policy_fn):
            a = np.asarray(_inner(state, obs), dtype=np.float64)
            return np.clip(a + rng.uniform(-n, n, a.shape), -1.0, 1.0)

    if frame_dump is not None:
        with open(frame_dump, "w") as fh:
            return sk.run_episode(wrapped, emb, task, seed=seed, frame_dump=fh)
    return sk.run_episode(wrapped, emb, task, seed=seed)


def evaluate(policy_fn: Callable, emb: sk.Embodiment, task: sk.TaskSpec,
             refs: ScoreRefs, seeds: Sequence[int] = EVAL_SEEDS,
             noise_level: float = 0.0, **meta) -> EvalResult:
    """Mean +/- standard error of the normalized score over the fixed seeds."""
    returns = [
        rollout(policy_fn, emb, task, seed=s, noise_level=noise_level).episode_return
        for s in seeds
    ]
    scores = np.array([normalized_score(r, refs) for r in returns])
    stderr = float(scores.std(ddof=1) / math.sqrt(len(scores))) if len(scores) > 1 else 0.0
    return EvalResult(
        returns=[float(r) for r in returns],
        mean_return=float(np.mean(returns)),
        mean_score=float(scores.mean()),
        stderr=stderr,
        embodiment=emb.name,
        task=task.name,
        **meta,
    )


def evaluate_model(model: MetaModel, adaptive, demos, emb, task, stats, refs,
                   seeds: Sequence[int] = EVAL_SEEDS, stride: int = 1,
                   noise_level: float = 0.0, **meta) -> EvalResult:
    policy_fn = ModelPolicy(model, adaptive, demos, emb, stats, stride=stride)
    return evaluate(policy_fn, emb, task, refs, seeds=seeds,
                    noise_level=noise_level, **meta)


# ---------------------------------------------------------------------------
# Fine-tune + evaluate flows


def finetune_and_evaluate(model: MetaModel, demos, emb, task, config: TrainConfig,
                          refs: ScoreRefs, stats=None, donor=None,
                          correspondence=None, out_dir=None, stride: int = 1,
                          trainable: str = "adaptive", seeds=EVAL_SEEDS,
                          check_budget: bool = True):
    """Fine-tune, evaluating every config.eval_every steps; the reported
    result is the best point of the evaluation trace, never unconditionally
    the final checkpoint."""
    stats = stats or tk.fit_stats(sk.DemoBuffer(emb, task, list(demos)))

    def eval_fn(m, adaptive, step):
        res = evaluate_model(m, adaptive, demos, emb, task, stats, refs,
                             seeds=seeds, stride=stride)
        return res.mean_score

    adaptive, trace = tr.finetune(
        model, demos, emb, task, config, stats=stats, eval_fn=eval_fn,
        out_dir=out_dir, donor=donor, correspondence=correspondence,
        trainable=trainable, check_budget=check_budget,
    )
    if not trace:
        raise ValueError("finetune produced no evaluation trace; "
                         "check eval_every vs finetune_iterations")
    best_step, _, best_score = max(trace, key=lambda r: r[2])
    final = evaluate_model(model, adaptive, demos, emb, task, stats, refs,
                           seeds=seeds, stride=stride)
    result = EvalResult(
        returns=final.returns, mean_return=final.mean_return,
        mean_score=float(best_score),
        stderr=final.stderr, checkpoint_step=int(best_step),
        rank=model.cfg.rank, shots=len(demos),
        embodiment=emb.name, task=task.name, method="meta",
    )
    return adaptive, result, trace


def rank_search(checkpoint_path, demos, emb, task, config: TrainConfig,
                refs: ScoreRefs, ranks=(4, 8, 16), stats=None, donor=None,
                stride: int = 1, seeds=EVAL_SEEDS, check_budget: bool = True):
    """Fine-tune once per rank; returns (best_rank, EvalResult, per-rank dict).
    Ties break toward the smaller rank."""
    results = {}
    for r in sorted(ranks):
        model = _with_rank(MetaModel.load(checkpoint_path), checkpoint_path, r)
        _, res, _ = finetune_and_evaluate(
            model, demos, emb, task, config, refs, stats=stats, donor=donor,
            stride=stride, seeds=seeds, check_budget=check_budget,
        )
        res.rank = r
        results[r] = res
    # max() keeps the first (smallest) rank on ties.
    best_rank = max(sorted(results), key=lambda r: results[r].mean_score)
    return best_rank, results[best_rank], results


def _with_rank(model: MetaModel, checkpoint_path, rank: int) -> MetaModel:
    """Reload a checkpoint with a different fine-tuning LoRA rank (fresh
    adaptive sets inherit the new rank; trained ones keep their records)."""
    if model.cfg.rank == rank:
        return model
    import dataclasses
    cfg = dataclasses.replace(model.cfg, rank=rank)
    fresh = MetaModel(cfg, seed=0, dtype=model.dtype)
    records = dict(model.named_shared_tensors())
    with torch.no_grad():
        for name, p in fresh.named_shared_tensors().items():
            p.copy_(records[name].detach().to(p.dtype))
    return fresh


def baseline_from_scratch(demos, emb, task, config: TrainConfig, refs: ScoreRefs,
                          model_cfg, stats=None, seed: int = 0, stride: int = 1,
                          seeds=EVAL_SEEDS):
    """Same architecture, random init, all parameters trained on the few
    demonstrations; evaluated identically to the meta run."""
    model = MetaModel(model_cfg, seed=seed)
    stats = stats or tk.fit_stats(sk.DemoBuffer(emb, task, list(demos)))
    adaptive, result, trace = finetune_and_evaluate(
        model, demos, emb, task, config, refs, stats=stats,
        trainable="all", stride=stride, seeds=seeds, check_budget=False,
    )
    result.method = "from_scratch"
    return adaptive, result, trace


# ---------------------------------------------------------------------------
# Reporting


REPORT_COLUMNS = ["embodiment", "task", "method", "rank", "shots",
                  "mean_score", "stderr", "checkpoint_step"]


def report(results: Sequence[EvalResult], out_dir) -> Path:
    """Write results.csv plus one SVG bar chart per task."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "results.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for r in results:
            writer.writerow([r.embodiment, r.task, r.method, r.rank, r.shots,
                             f"{r.mean_score:.4f}", f"{r.stderr:.4f}",
                             r.checkpoint_step])
    by_task = {}
    for r in results:
        by_task.setdefault(r.task, []).append(r)
    for task_name, rows in by_task.items():
        svg = _bar_chart_svg(task_name, rows)
        (out_dir / f"scores_{task_name}.svg").write_text(svg)
    return csv_path


def _bar_chart_svg(task_name: str, rows) -> str:
    width, height, pad = 640, 360, 60
    n = len(rows)
    bar_w = (width - 2 * pad) / max(n, 1) * 0.7
    lo = min(0.0, min(r.mean_score for r in rows))
    hi = max(100.0, max(r.mean_score for r in rows))

    def y_of(v):
        return height - pad - (v - lo) / (hi - lo) * (height - 2 * pad)

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{width}" height="{height}">',
        f'<text x="{width/2:.0f}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="16">'
        f'{escape(task_name)}: mean normalized score</text>',
        f'<line x1="{pad}" y1="{y_of(0):.1f}" x2="{width-pad}" y2="{y_of(0):.1f}" '
        'stroke="#333" stroke-width="1"/>',
    ]
    for i, r in enumerate(rows):
        x = pad + (i + 0.15) * (width - 2 * pad) / max(n, 1)
        y = y_of(max(r.mean_score, 0.0))
        h = abs(y_of(0) - y_of(r.mean_score))
        parts.append(
            f'<rect x="{x:.1f}" y="{min(y, y_of(0)):.1f}" width="{bar_w:.1f}" '
            f'height="{h:.1f}" fill="#4878cf"/>'
        )
        label = f"{r.embodiment}/{r.method}"
        parts.append(
            f'<text x="{x + bar_w/2:.1f}" y="{height - pad + 18}" '
            f'text-anchor="middle" font-family="sans-serif" font-size="11">'
            f'{escape(label)}</text>'
        )
        parts.append(
            f'<text x="{x + bar_w/2:.1f}" y="{min(y, y_of(0)) - 6:.1f}" '
            f'text-anchor="middle" font-family="sans-serif" font-size="11">'
            f'{r.mean_score:.1f}&#177;{r.stderr:.1f}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)
