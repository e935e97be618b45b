"""Diarize a synthetic two-speaker conversation with a trained checkpoint.

    python3 scripts/diarization_demo.py --ckpt /tmp/toy/run/best.ckpt --out /tmp/diar

The conversation is built from the same synthetic voices the checkpoint was
trained on, so --corpus-speakers/--corpus-seed must match the synth step.
"""
import argparse
import sys
from pathlib import Path

from titanet import io
from titanet.cli import main
from titanet.features import write_wav
from titanet.train import SyntheticCorpus, synthesize_conversation


def run():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ckpt", type=Path, required=True)
    ap.add_argument("--out", type=Path, default=Path("diar_demo"))
    ap.add_argument("--speakers", type=int, nargs="+", default=[0, 1], help="voice indices in the corpus")
    ap.add_argument("--turns", type=int, default=12)
    ap.add_argument("--corpus-speakers", type=int, default=20)
    ap.add_argument("--corpus-seed", type=int, default=0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--known-k", action="store_true", help="pass the true speaker count")
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    corpus = SyntheticCorpus(n_speakers=args.corpus_speakers, seed=args.corpus_seed)
    audio, ref = synthesize_conversation(corpus, args.speakers, n_turns=args.turns, seed=args.seed)
    write_wav(args.out / "conv.wav", audio)
    io.write_rttm(args.out / "ref.rttm", {"conv": ref})
    print(f"{len(ref)} turns, {audio.samples.size / audio.sample_rate:.1f} s of audio")

    argv = ["diarize", "--ckpt", str(args.ckpt), "--audio", str(args.out / "conv.wav"),
            "--rttm", str(args.out / "ref.rttm"), "--out", str(args.out / "hyp.rttm"), "--domain", "telephonic"]
    if args.known_k:
        argv += ["--known-k", str(len(set(args.speakers)))]
    sys.exit(main(argv))


if __name__ == "__main__":
    run()
