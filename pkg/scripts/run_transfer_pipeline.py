#!/usr/bin/env python3
"""End-to-end desk-scale transfer experiment driven through the CLI.

Generates demonstration buffers for the built-in training suite, meta-trains
the desk preset, fine-tunes on the held-out chain-3 reach buffer (5-shot, with
chain-2 as the donor embodiment), evaluates, and writes a report. Expect a few
hours on a 2-core CPU; pass --iterations to shorten the meta stage.
"""

import argparse
import subprocess
import sys
from pathlib import Path


def run(cmd):
    print("+", " ".join(str(c) for c in cmd), flush=True)
    subprocess.run([str(c) for c in cmd], check=True)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--workdir", default="runs/transfer")
    ap.add_argument("--demos", type=int, default=40)
    ap.add_argument("--iterations", type=int, default=8000)
    ap.add_argument("--finetune-iterations", type=int, default=1500)
    ap.add_argument("--shots", type=int, default=5)
    ap.add_argument("--stride", type=int, default=6)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    from morphbc.cli import builtin_suite

    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    corpus = work / "corpus"
    holdout = work / "holdout"
    run_dir = work / "meta"

    run(["morphbc", "gen-data", "--suite", builtin_suite("train"), "--out", corpus,
         "--demos", args.demos, "--seed", args.seed])
    run(["morphbc", "gen-data", "--suite", builtin_suite("holdout"), "--out", holdout,
         "--demos", max(args.shots + 5, 12), "--seed", args.seed + 1])

    cfg = work / "train.toml"
    cfg.write_text(
        f'corpus_dir = "{corpus}"\n'
        f'out_dir = "{run_dir}"\n'
        'preset = "desk"\n'
        f"iterations = {args.iterations}\n"
        f"finetune_iterations = {args.finetune_iterations}\n"
        f"eval_every = {max(args.finetune_iterations // 4, 1)}\n"
        f"seed = {args.seed}\n"
    )
    run(["morphbc", "meta-train", "--config", cfg])

    ckpt = sorted(run_dir.glob("ckpt_*.mck"))[-1]
    ft = work / "finetune_chain3"
    run(["morphbc", "finetune", "--checkpoint", ckpt,
         "--demos", holdout / "chain-3__reach", "--out", ft,
         "--shots", args.shots, "--donor", "chain-2",
         "--rank", "16", "--stride", args.stride, "--config", cfg])
    run(["morphbc", "eval", "--checkpoint", ckpt, "--adaptive", ft / "adaptive.mck",
         "--demos", holdout / "chain-3__reach", "--shots", args.shots,
         "--stride", args.stride, "--out", ft / "eval_result_final.json"])
    run(["morphbc", "report", "--in", work])
    print(f"done; see {work / 'results.csv'}")


if __name__ == "__main__":
    sys.exit(main())
