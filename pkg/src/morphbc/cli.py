"""Command-line entry point: gen-data, meta-train, finetune, eval, report.

Exit codes: 0 success, 2 configuration error, 3 data/precondition error,
4 numerical failure. MC_THREADS caps worker threads.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


def _setup_threads() -> None:
    import torch
    cap = os.environ.get("MC_THREADS")
    if cap:
        torch.set_num_threads(max(1, int(cap)))


def _load_toml(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _require(doc: dict, key: str):
    if key not in doc:
        raise ConfigError(f"config is missing required key: {key}")
    return doc[key]


def _split_overrides(doc: dict):
    """Partition flat config keys into model / train overrides."""
    from .config import ModelConfig, TrainConfig
    model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    reserved = {"preset", "corpus_dir", "out_dir", "checkpoint", "shots", "seed",
                "demos_dir", "stride"}
    model_ov, train_ov = {}, {}
    for k, v in doc.items():
        if k in reserved:
            continue
        if k in model_keys:
            model_ov[k] = v
        elif k in train_keys:
            train_ov[k] = tuple(v) if isinstance(v, list) else v
        else:
            raise ConfigError(f"unknown config key: {k}")
    return model_ov, train_ov


def _resolve_configs(doc: dict, seed=None):
    from .config import preset, with_overrides
    name = doc.get("preset", "desk")
    try:
        model_cfg, train_cfg = preset(name)
    except KeyError as e:
        raise ConfigError(str(e)) from None
    model_ov, train_ov = _split_overrides(doc)
    if seed is not None:
        train_ov["seed"] = seed
    model_cfg = with_overrides(model_cfg, **model_ov)
    train_cfg = with_overrides(train_cfg, **train_ov)
    return model_cfg, train_cfg


def _load_suite(path) -> list:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"suite file not found: {path}")
    doc = json.loads(path.read_text())
    pairs = []
    for item in doc["pairs"]:
        emb_path = (path.parent / item["embodiment"]).resolve()
        task_path = (path.parent / item["task"]).resolve()
        for p in (emb_path, task_path):
            if not p.exists():
                raise ConfigError(f"suite references missing spec file: {p}")
        pairs.append((emb_path, task_path))
    return pairs


def builtin_suite(name: str) -> Path:
    from importlib.resources import files
    p = files("morphbc").joinpath(f"data/suites/{name}.json")
    return Path(str(p))


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_data(args) -> int:
    from . import evalkit as ek
    from . import simkit as sk
    from . import tokenizer as tk

    suite = _load_suite(args.suite)
    out = Path(args.out)
    for emb_path, task_path in suite:
        emb = sk.build_embodiment(sk.load_embodiment_spec(emb_path))
        task = sk.load_task_spec(task_path)
        buf = sk.generate_demos(emb, task, count=args.demos, seed=args.seed)
        buf_dir = out / f"{emb.name}__{task.name}"
        buf.save(buf_dir)
        tk.fit_stats(buf).save(buf_dir / "stats.json")
        refs = ek.compute_refs(emb, task)
        refs.save(buf_dir / "refs.json")
        kept = [d.episode_return for d in buf.demos]
        print(f"{emb.name}/{task.name}: kept {len(buf)}/{args.demos} demos, "
              f"expert mean return {refs.expert_return:.2f}, "
              f"buffer mean {np.mean(kept):.2f}")
    return 0


def cmd_meta_train(args) -> int:
    import torch
    from . import training as tr
    from .model import MetaModel

    doc = _load_toml(args.config)
    corpus_dir = _require(doc, "corpus_dir")
    out_dir = Path(_require(doc, "out_dir"))
    model_cfg, train_cfg = _resolve_configs(doc)
    torch.manual_seed(train_cfg.seed)
    corpus = tr.load_corpus(corpus_dir)
    model = MetaModel(model_cfg, seed=train_cfg.seed)
    trace = tr.meta_train(corpus, model, train_cfg, out_dir)
    print(f"meta-training done: {len(trace)} iterations, "
          f"final loss {trace[-1]:.6f}, checkpoints in {out_dir}")
    return 0


def _load_buffer_bundle(demos_dir):
    from . import evalkit as ek
    from . import simkit as sk
    from . import tokenizer as tk
    demos_dir = Path(demos_dir)
    if not (demos_dir / "demos.bin").exists():
        raise DataError(f"no demo buffer at {demos_dir}")
    buf = sk.DemoBuffer.load(demos_dir)
    stats_path = demos_dir / "stats.json"
    stats = tk.NormStats.load(stats_path) if stats_path.exists() else tk.fit_stats(buf)
    refs_path = demos_dir / "refs.json"
    refs = ek.ScoreRefs.load(refs_path) if refs_path.exists() \
        else ek.compute_refs(buf.emb, buf.task)
    return buf, stats, refs


def cmd_finetune(args) -> int:
    import torch
    from . import evalkit as ek
    from .config import with_overrides
    from .model import MetaModel, UnknownDonor, save_adaptive

    doc = _load_toml(args.config) if args.config else {}
    _, train_cfg = _resolve_configs(doc, seed=args.seed)
    torch.manual_seed(train_cfg.seed)
    buf, stats, refs = _load_buffer_bundle(args.demos)
    if args.shots < 2:
        raise DataError(f"fine-tuning needs at least 2 shots, got {args.shots}")
    if len(buf) < args.shots:
        raise DataError(f"buffer holds {len(buf)} demos < requested {args.shots} shots")
    demos = buf.demos[-args.shots:]          # the last N demonstrations
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.donor is not None:
        probe = MetaModel.load(args.checkpoint)
        if args.donor not in probe.emb_adaptive:
            raise UnknownDonor(f"donor embodiment {args.donor!r} not in the checkpoint")
        del probe

    if args.rank == "search":
        best_rank, result, per_rank = ek.rank_search(
            args.checkpoint, demos, buf.emb, buf.task, train_cfg, refs,
            stats=stats, donor=args.donor, stride=args.stride,
        )
        model = ek._with_rank(MetaModel.load(args.checkpoint), args.checkpoint, best_rank)
        adaptive, result, _ = ek.finetune_and_evaluate(
            model, demos, buf.emb, buf.task, train_cfg, refs, stats=stats,
            donor=args.donor, out_dir=out_dir, stride=args.stride,
        )
        result.rank = best_rank
        print("rank search:", {r: f"{res.mean_score:.1f}" for r, res in per_rank.items()})
    else:
        rank = int(args.rank)
        model = ek._with_rank(MetaModel.load(args.checkpoint), args.checkpoint, rank)
        adaptive, result, _ = ek.finetune_and_evaluate(
            model, demos, buf.emb, buf.task, train_cfg, refs, stats=stats,
            donor=args.donor, out_dir=out_dir, stride=args.stride,
        )
        result.rank = rank
    save_adaptive(model, buf.emb.name, buf.task.name, out_dir / "adaptive.mck")
    result.method = "meta"
    result.save(out_dir / "eval_result.json")
    print(f"{buf.emb.name}/{buf.task.name}: best score {result.mean_score:.1f} "
          f"± {result.stderr:.1f} at step {result.checkpoint_step} (rank {result.rank})")
    return 0


def cmd_eval(args) -> int:
    import torch
    from . import evalkit as ek
    from .model import MetaModel, load_adaptive

    if args.shots < 1:
        raise DataError(f"--shots must be >= 1, got {args.shots}")
    buf, stats, refs = _load_buffer_bundle(args.demos)
    if len(buf) < args.shots:
        raise DataError(f"buffer holds {len(buf)} demos < requested {args.shots} shots")
    model = MetaModel.load(args.checkpoint)
    emb_name, task_name = load_adaptive(model, args.adaptive)
    if emb_name != buf.emb.name or task_name != buf.task.name:
        raise DataError(
            f"adaptive file targets ({emb_name}, {task_name}) but the buffer "
            f"is ({buf.emb.name}, {buf.task.name})"
        )
    adaptive = model.adaptive(emb_name, task_name)
    demos = buf.demos[-args.shots:]
    result = ek.evaluate_model(model, adaptive, demos, buf.emb, buf.task, stats,
                               refs, stride=args.stride, shots=args.shots,
                               rank=model.cfg.rank, method="meta")
    if args.out:
        result.save(args.out)
    if args.frame_dump:
        Path(args.frame_dump).mkdir(parents=True, exist_ok=True)
        policy_fn = ek.ModelPolicy(model, adaptive, demos, buf.emb, stats,
                                   stride=args.stride)
        for seed in ek.EVAL_SEEDS[:3]:
            ek.rollout(policy_fn, buf.emb, buf.task, seed,
                       frame_dump=Path(args.frame_dump) / f"rollout_{seed}.csv")
    print(f"{buf.emb.name}/{buf.task.name}: normalized score "
          f"{result.mean_score:.2f} ± {result.stderr:.2f} over {len(result.returns)} seeds")
    return 0


def cmd_report(args) -> int:
    from . import evalkit as ek
    in_dir = Path(args.in_dir)
    if not in_dir.exists():
        raise DataError(f"input directory not found: {in_dir}")
    results = []
    for p in sorted(in_dir.rglob("eval_result*.json")):
        results.append(ek.EvalResult.load(p))
    csv_path = ek.report(results, in_dir)
    print(f"wrote {csv_path} ({len(results)} results)")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="morphbc",
        description="Few-shot behavior cloning across planar robot morphologies",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate expert demonstration buffers")
    p.add_argument("--suite", required=True, help="JSON suite file of (embodiment, task) pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--demos", type=int, default=40, help="pre-filter rollouts per pair")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("meta-train", help="stage-1 episodic meta-learning")
    p.add_argument("--config", required=True, help="TOML config file")
    p.set_defaults(fn=cmd_meta_train)

    p = sub.add_parser("finetune", help="stage-2 few-shot fine-tuning")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--demos", required=True, help="demo buffer directory")
    p.add_argument("--out", required=True)
    p.add_argument("--shots", type=int, default=5)
    p.add_argument("--donor", default=None, help="donor embodiment name")
    p.add_argument("--rank", default="16", help="LoRA rank or 'search'")
    p.add_argument("--stride", type=int, default=1, help="matching key stride")
    p.add_argument("--config", default=None, help="optional TOML overrides")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a fine-tuned model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--adaptive", required=True)
    p.add_argument("--demos", required=True)
    p.add_argument("--shots", type=int, default=5)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--out", default=None, help="write EvalResult JSON here")
    p.add_argument("--frame-dump", default=None,
                   help="write per-step link coordinates CSVs here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="aggregate results into CSV + SVG charts")
    p.add_argument("--in", dest="in_dir", required=True)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    _setup_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    from . import netcore as nc
    from . import simkit as sk
    from . import training as tr
    from . import tokenizer as tk
    from .model import UnknownDonor
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, UnknownDonor, tr.TooFewDemos, tr.BufferTooSmall,
            sk.InsufficientDemos, sk.SimSpecError, tk.TokenizerError,
            nc.CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (tr.NonFiniteLoss, sk.NonFiniteState, nc.NonFiniteGradient) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
