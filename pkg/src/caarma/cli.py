"""Command-line entry points: generate, train, evaluate, selftest.

Every command prints one JSON summary on stdout. Exit codes: 0 success,
1 runtime error, 2 usage error. Log verbosity comes from ``CAARMA_LOG_LEVEL``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import mixup, selftest
from .datamodel import MODES, load_config, read_manifest, read_trials, write_trials
from .errors import CaarmaError
from .evaluation import build_trials, score_trials, summarize, write_scores
from .features import generate_corpus, write_corpus
from .trainer import Corpus, embed_corpus, load_checkpoint, read_metrics, train

logger = logging.getLogger("caarma")

_FAULTS = {"mix-coeff": 0.6}


@dataclass
class CommandResult:
    exit_code: int
    summary: dict = field(default_factory=dict)


def cmd_generate(args) -> CommandResult:
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.out_dir)
    n_train = cfg.corpus_speakers - cfg.corpus_heldout
    tr_entries, tr_waves = generate_corpus(n_train, cfg.corpus_utts, cfg, seed)
    ho_entries, ho_waves = [], {}
    if cfg.corpus_heldout:
        ho_entries, ho_waves = generate_corpus(cfg.corpus_heldout, cfg.corpus_utts, cfg, seed,
                                               first_speaker=n_train)
    train_manifest, train_hash = write_corpus(tr_entries, tr_waves, out, "train.txt", cfg.sample_rate)
    summary = {
        "command": "generate",
        "seed": seed,
        "train_manifest": str(train_manifest),
        "train_speakers": n_train,
        "heldout_speakers": cfg.corpus_heldout,
        "utterances_per_speaker": cfg.corpus_utts,
        "utterances": len(tr_entries) + len(ho_entries),
    }
    digest = hashlib.sha256(train_hash.encode())
    if ho_entries:
        heldout_manifest, heldout_hash = write_corpus(ho_entries, ho_waves, out, "heldout.txt",
                                                      cfg.sample_rate)
        trials = build_trials(ho_entries, cfg.corpus_trials, seed)
        trials_path = out / "trials.txt"
        write_trials(trials, trials_path)
        digest.update(heldout_hash.encode())
        digest.update(trials_path.read_bytes())
        summary.update(heldout_manifest=str(heldout_manifest), trials=str(trials_path),
                       n_trials=len(trials.trials))
    summary["corpus_hash"] = digest.hexdigest()
    return CommandResult(0, summary)


def cmd_train(args) -> CommandResult:
    cfg = load_config(args.config)
    changes = {"mode": args.mode}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    cfg = cfg.replace(**changes)
    corpus = Corpus.from_manifest(args.manifest, cfg)
    out = Path(args.out_dir)
    trainer = train(cfg, corpus, out, resume_from=args.resume, stop_after_epoch=args.stop_after_epoch)
    rows = read_metrics(out / "metrics.jsonl")
    return CommandResult(0, {
        "command": "train",
        "mode": cfg.mode,
        "seed": cfg.seed,
        "steps": trainer.step,
        "epochs": trainer.state.epoch,
        "num_classes": corpus.num_classes,
        "metrics": str(out / "metrics.jsonl"),
        "checkpoint": str(out / "checkpoints" / f"epoch_{trainer.state.epoch:03d}"),
        "final": rows[-1] if rows else None,
    })


def cmd_evaluate(args) -> CommandResult:
    trainer = load_checkpoint(args.checkpoint)
    entries = read_manifest(args.manifest)
    trials = read_trials(args.trials)
    known = {e.utt_id for e in entries}
    missing = [u for u in trials.utterance_ids() if u not in known]
    if missing:
        raise CaarmaError("trial ids not in manifest: " + ", ".join(missing))
    needed = set(trials.utterance_ids())
    corpus = Corpus([e for e in entries if e.utt_id in needed], trainer.cfg,
                    root=Path(args.manifest).parent)
    st = score_trials(trials, embed_corpus(trainer, corpus))
    write_scores(trials, st, args.scores)
    summary = {"command": "evaluate", "scores": str(args.scores)}
    summary.update(summarize(st, trainer.cfg))
    return CommandResult(0, summary)


def cmd_selftest(args) -> CommandResult:
    if args.inject_fault is not None:
        mixup._MIX_WEIGHT = _FAULTS[args.inject_fault]
    results = selftest.run_all()
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        detail = f"  ({r.detail})" if r.detail else ""
        print(f"{status} {r.name} [{r.seconds:.2f}s]{detail}", file=sys.stderr)
    failed = [r.name for r in results if not r.passed]
    return CommandResult(1 if failed else 0, {
        "command": "selftest",
        "properties": {r.name: r.passed for r in results},
        "failed": failed,
    })


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="caarma", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesise a speaker corpus with manifests and trials")
    p.add_argument("config")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int, help="corpus seed (defaults to the config seed)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one ablation mode")
    p.add_argument("config")
    p.add_argument("manifest")
    p.add_argument("out_dir")
    p.add_argument("--mode", choices=MODES, default="full")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--stop-after-epoch", type=int, help="stop early after this epoch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a trial list with a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("trials")
    p.add_argument("--scores", default="scores.txt", help="score file to write")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("selftest", help="run the property suite")
    p.add_argument("--inject-fault", choices=sorted(_FAULTS), help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CAARMA_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)  # exits 2 on usage errors
    try:
        result = args.func(args)
    except (CaarmaError, OSError, ValueError, KeyError) as exc:
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        print(f"caarma {args.command}: error: {message}", file=sys.stderr)
        result = CommandResult(1, {"command": args.command, "error": str(message)})
    print(json.dumps(result.summary, sort_keys=True))
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
