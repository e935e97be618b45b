"""Synthesize a corpus, train a toy model, embed the held-out split and score trials.

    python3 scripts/toy_experiment.py --out /tmp/toy --epochs 30

Defaults mirror the acceptance run (20 speakers x 50 utterances, B=3 R=2 C=64).
"""
import argparse
import sys
from pathlib import Path

from titanet.cli import main


def step(argv):
    print("$ titanet " + " ".join(argv), flush=True)
    code = main(argv)
    if code:
        sys.exit(code)


def run():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("toy_run"))
    ap.add_argument("--speakers", type=int, default=20)
    ap.add_argument("--utterances", type=int, default=50)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--trials", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = args.out
    step(["synth", "--out", str(out / "corpus"), "--speakers", str(args.speakers),
          "--utterances", str(args.utterances), "--seed", str(args.seed)])
    step(["train", "--manifest", str(out / "corpus" / "manifest.tsv"), "--out", str(out / "run"),
          "--preset", "toy", "--mega-blocks", "3", "--repeats", "2", "--channels", "64",
          "--epochs", str(args.epochs), "--batch-size", "32", "--lr", "0.08", "--min-lr", "1e-4",
          "--crop-frames", "64", "--val-fraction", "0.2", "--trials", str(args.trials),
          "--seed", str(args.seed), "--verbose"])
    step(["embed", "--ckpt", str(out / "run" / "best.ckpt"),
          "--manifest", str(out / "run" / "heldout.tsv"), "--out", str(out / "heldout.emb")])
    step(["verify", "--trials", str(out / "run" / "trials.txt"), "--embeddings", str(out / "heldout.emb"),
          "--out-dir", str(out / "verify")])


if __name__ == "__main__":
    run()
