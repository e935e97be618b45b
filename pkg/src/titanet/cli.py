"""Command line: synth, train, embed, verify, diarize, score-der, params.

Every flag can also come from ``--config FILE``, a flat ``key=value`` file
whose keys are the flag names (dashes or underscores). Flags given on the
command line win over the file.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .diarize import DOMAIN_PRESETS, DerConfig, compute_der, diarize
from .encoder import REPORTED_PARAM_COUNTS, PRESETS, preset
from .errors import TitaNetError
from .features import extract_features, load_wav
from .pooldec import build_model, extract_embedding, parameter_breakdown
from .train import AAMConfig, SyntheticCorpus, TrainConfig, generate_synthetic_corpus, train
from .verify import (DcfConfig, build_trials, compute_eer, compute_min_dcf, det_points,
                     score_trials, write_det_csv)

log = logging.getLogger("titanet")


def _bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {v!r}")


def _common(p: argparse.ArgumentParser, default_preset="toy"):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", default=default_preset, choices=sorted(PRESETS))
    p.add_argument("--config", help="key=value file mirroring these flags")
    p.add_argument("--channels", type=int, help="override encoder width C")
    p.add_argument("--repeats", type=int, help="override sub-blocks per mega block R")
    p.add_argument("--mega-blocks", type=int, help="override number of mega blocks B")
    p.add_argument("--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="titanet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-speaker corpus")
    _common(p)
    p.add_argument("--out")
    p.add_argument("--speakers", type=int, default=20)
    p.add_argument("--utterances", type=int, default=50)
    p.add_argument("--min-duration", type=float, default=1.5)
    p.add_argument("--max-duration", type=float, default=2.5)

    p = sub.add_parser("train", help="train a speaker model on a manifest")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.08)
    p.add_argument("--min-lr", type=float, default=1e-4)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--crop-frames", type=int)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--margin", type=float, default=0.2)
    p.add_argument("--scale", type=float, default=30.0)
    p.add_argument("--trials", type=int, default=500, help="held-out trials to write")

    p = sub.add_parser("embed", help="manifest -> embedding store")
    _common(p)
    p.add_argument("--ckpt")
    p.add_argument("--manifest")
    p.add_argument("--out")

    p = sub.add_parser("verify", help="score trials, report EER and MinDCF")
    _common(p)
    p.add_argument("--trials")
    p.add_argument("--embeddings")
    p.add_argument("--out-dir")
    p.add_argument("--p-target", type=float, default=0.01)
    p.add_argument("--c-fa", type=float, default=1.0)
    p.add_argument("--c-miss", type=float, default=1.0)

    p = sub.add_parser("diarize", help="audio + oracle RTTM -> hypothesis RTTM and DER")
    _common(p)
    p.add_argument("--ckpt")
    p.add_argument("--audio")
    p.add_argument("--rttm", help="reference RTTM; its union gives the speech regions")
    p.add_argument("--out")
    p.add_argument("--session", help="session id (needed when the RTTM holds several)")
    p.add_argument("--domain", default="telephonic", choices=sorted(DOMAIN_PRESETS))
    p.add_argument("--max-speakers", type=int, default=8)
    p.add_argument("--known-k", type=int)
    p.add_argument("--collar", type=float, default=0.25)
    p.add_argument("--ignore-overlap", type=_bool, default=True)

    p = sub.add_parser("score-der", help="DER between reference and hypothesis RTTM")
    _common(p)
    p.add_argument("--ref")
    p.add_argument("--hyp")
    p.add_argument("--collar", type=float, default=0.25)
    p.add_argument("--ignore-overlap", type=_bool, default=True)

    p = sub.add_parser("params", help="parameter count of a preset")
    _common(p, default_preset="titanet_l")
    p.add_argument("--classes", type=int, default=0, help="size of the class head, listed apart")
    return parser


def _apply_config(parser, argv):
    """Re-parse with file values as defaults so command-line flags still win."""
    args = parser.parse_args(argv)
    if args.config:
        args = _merge_config(parser, args, argv)
    missing = ["--" + d.replace("_", "-") for d in _REQUIRED.get(args.command, ())
               if getattr(args, d) is None]
    if missing:
        parser.error(f"{args.command}: missing required {', '.join(missing)}")
    return args


def _merge_config(parser, args, argv):
    values = io.read_config(args.config)
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in subparser._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, raw in values.items():
        if key not in actions:
            parser.error(f"{args.config}: unknown key {key!r} for '{args.command}'")
        a = actions[key]
        try:
            if isinstance(a, argparse._StoreTrueAction):
                defaults[key] = _bool(raw)
            else:
                defaults[key] = a.type(raw) if a.type else raw
        except (ValueError, argparse.ArgumentTypeError) as exc:
            parser.error(f"{args.config}: bad value for {key}: {exc}")
        if a.choices is not None and defaults[key] not in a.choices:
            parser.error(f"{args.config}: {key}={raw} is not one of {sorted(a.choices)}")
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


_REQUIRED = {
    "synth": ("out",), "train": ("manifest", "out"), "embed": ("ckpt", "manifest", "out"),
    "verify": ("trials", "embeddings", "out_dir"), "diarize": ("ckpt", "audio", "rttm", "out"),
    "score-der": ("ref", "hyp"),
}


def _encoder_cfg(args):
    over = {k: getattr(args, k) for k in ("channels", "repeats", "mega_blocks")
            if getattr(args, k) is not None}
    return preset(args.preset, **over)


def _fmt_m(n: float) -> str:
    return f"{n / 1e6:.2f}M"


# ----------------------------------------------------------------- commands

def cmd_synth(args):
    corpus = SyntheticCorpus(args.speakers, args.utterances, args.min_duration, args.max_duration,
                           seed=args.seed)
    out = Path(args.out)
    rows = generate_synthetic_corpus(corpus, out / "wav")
    io.write_manifest(out / "manifest.tsv", rows)
    print(f"wrote {len(rows)} utterances from {corpus.n_speakers} speakers to {out / 'manifest.tsv'}")


def cmd_train(args):
    rows = io.read_manifest(args.manifest)
    speakers = sorted({r.speaker for r in rows})
    cfg = _encoder_cfg(args)
    tcfg = TrainConfig(epochs=args.epochs, initial_lr=args.lr, min_lr=args.min_lr,
                       momentum=args.momentum, batch_size=args.batch_size, seed=args.seed,
                       crop_frames=args.crop_frames, val_fraction=args.val_fraction)
    aam = AAMConfig(args.margin, args.scale)
    model = build_model(cfg, len(speakers), seed=args.seed)
    out = Path(args.out)
    res = train(model, rows, tcfg, aam, out_dir=out)
    final = res.final
    model.meta.update(final_train_acc=final["train_acc"], final_train_loss=final["train_loss"])
    io.save_checkpoint(model, out / "model.ckpt")

    by_path = {r.path: r for r in rows}
    val_rows = [by_path[p] for p in res.val_ids]
    io.write_manifest(out / "heldout.tsv", val_rows)
    trials = build_trials({r.path: r.speaker for r in val_rows}, args.trials, seed=args.seed)
    io.write_trials(out / "trials.txt", trials)
    print(f"epochs {len(res.log)}  final train_acc {final['train_acc']:.4f}  "
          f"train_loss {final['train_loss']:.4f}")
    print(f"best epoch {res.best_epoch}  val_acc {res.best_val_acc:.4f}")
    print(f"wrote {out / 'model.ckpt'}, {out / 'heldout.tsv'}, {out / 'trials.txt'} ({len(trials)} trials)")


def cmd_embed(args):
    model = io.load_checkpoint(args.ckpt)
    rows = io.read_manifest(args.manifest)
    store = {r.path: extract_embedding(model, extract_features(load_wav(r.path))) for r in rows}
    io.write_embeddings(args.out, store)
    print(f"wrote {len(store)} embeddings to {args.out}")


def cmd_verify(args):
    trials = io.read_trials(args.trials)
    store = io.read_embeddings(args.embeddings)
    st = score_trials(trials, store)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_scores(out / "scores.txt", trials, st.scores)
    write_det_csv(det_points(st), out / "det.csv")
    eer, eer_thr = compute_eer(st)
    dcf_cfg = DcfConfig(args.p_target, args.c_fa, args.c_miss)
    dcf, dcf_thr = compute_min_dcf(st, dcf_cfg)
    print(f"trials {len(trials)}  target {int(st.targets.sum())}  nontarget {int((~st.targets).sum())}")
    print(f"EER {100 * eer:.4f}%  threshold {eer_thr:.6f}")
    print(f"MinDCF {dcf:.6f}  threshold {dcf_thr:.6f}  (p_target={dcf_cfg.p_target:g})")


def _der_table(results):
    lines = [f"{'session':<16} {'DER':>8} {'missed':>9} {'falarm':>9} {'confusion':>9} {'scored':>9}"]
    tot = np.zeros(4)
    for sess, r in results:
        lines.append(f"{sess:<16} {100 * r.der:7.2f}% {r.missed:9.3f} {r.falarm:9.3f} "
                     f"{r.confusion:9.3f} {r.scored:9.3f}")
        tot += (r.missed, r.falarm, r.confusion, r.scored)
    der = (tot[0] + tot[1] + tot[2]) / tot[3] if tot[3] > 0 else 0.0
    lines.append(f"{'ALL':<16} {100 * der:7.2f}% {tot[0]:9.3f} {tot[1]:9.3f} {tot[2]:9.3f} {tot[3]:9.3f}")
    print("\n".join(lines))
    return der


def cmd_diarize(args):
    ref = io.parse_rttm(args.rttm)
    if not ref:
        raise TitaNetError(f"{args.rttm}: no SPEAKER lines")
    if args.session is None:
        if len(ref) != 1:
            raise TitaNetError(f"{args.rttm} holds {len(ref)} sessions; pick one with --session")
        session = next(iter(ref))
    else:
        session = args.session
        if session not in ref:
            raise TitaNetError(f"session {session!r} not in {args.rttm}")
    model = io.load_checkpoint(args.ckpt)
    audio = load_wav(args.audio)
    regions = io.speech_regions(ref[session])
    hyp, res = diarize(model, audio, regions, args.domain, args.max_speakers, args.known_k, args.seed)
    io.write_rttm(args.out, {session: hyp.segments})
    print(f"speakers {res.estimated_k}  p {res.chosen_p}  segments {len(hyp.segments)}")
    der = compute_der(ref[session], hyp, DerConfig(args.collar, args.ignore_overlap))
    _der_table([(session, der)])


def cmd_score_der(args):
    ref = io.parse_rttm(args.ref)
    hyp = io.parse_rttm(args.hyp)
    if not ref:
        raise TitaNetError(f"{args.ref}: no SPEAKER lines")
    extra = sorted(set(hyp) - set(ref))
    if extra:
        raise TitaNetError(f"hypothesis sessions missing from reference: {', '.join(extra)}")
    cfg = DerConfig(args.collar, args.ignore_overlap)
    _der_table([(s, compute_der(ref[s], hyp.get(s, []), cfg)) for s in sorted(ref)])


def cmd_params(args):
    cfg = _encoder_cfg(args)
    br = parameter_breakdown(cfg, args.classes)
    print(f"preset {args.preset}: C={cfg.channels} B={cfg.mega_blocks} R={cfg.repeats} "
          f"kernels={list(cfg.mega_kernels)} E={cfg.epilogue_channels}")
    for k, v in br.items():
        if k not in ("total", "head"):
            print(f"  {k:<10} {v:>12,d}")
    print(f"  {'total':<10} {br['total']:>12,d}  ({_fmt_m(br['total'])})")
    if args.classes:
        print(f"  {'head':<10} {br['head']:>12,d}  (cosine head for {args.classes} classes, not in total)")
    ref = REPORTED_PARAM_COUNTS.get(args.preset)
    if ref is not None:
        print(f"reference {_fmt_m(ref)}  (ratio {br['total'] / ref:.3f})")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "embed": cmd_embed, "verify": cmd_verify,
            "diarize": cmd_diarize, "score-der": cmd_score_der, "params": cmd_params}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except (TitaNetError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def cli(argv=None) -> int:
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
