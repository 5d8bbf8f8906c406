"""Desk-scale experiment: generated speakers, train one mode, score held-out trials."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

from .datamodel import ExperimentConfig, TrialList
from .evaluation import build_trials, score_trials, summarize
from .features import generate_corpus
from .trainer import Corpus, embed_corpus, train

logger = logging.getLogger(__name__)


@dataclass
class DeskCorpus:
    train: Corpus
    heldout: Corpus
    trials: TrialList


def make_desk_corpus(cfg: ExperimentConfig, corpus_seed: int) -> DeskCorpus:
    """Training speakers first, held-out speakers after them, all from one seed."""
    n_train = cfg.corpus_speakers - cfg.corpus_heldout
    tr_entries, tr_waves = generate_corpus(n_train, cfg.corpus_utts, cfg, corpus_seed)
    ho_entries, ho_waves = generate_corpus(cfg.corpus_heldout, cfg.corpus_utts, cfg, corpus_seed,
                                           first_speaker=n_train)
    trials = build_trials(ho_entries, cfg.corpus_trials, corpus_seed)
    return DeskCorpus(Corpus(tr_entries, cfg, waveforms=tr_waves),
                      Corpus(ho_entries, cfg, waveforms=ho_waves), trials)


def evaluate_trainer(trainer, heldout: Corpus, trials: TrialList) -> dict:
    embeddings = embed_corpus(trainer, heldout)
    return summarize(score_trials(trials, embeddings), trainer.cfg)


def run_mode(cfg: ExperimentConfig, desk: DeskCorpus, out_dir, **train_kwargs) -> dict:
    trainer = train(cfg, desk.train, Path(out_dir), **train_kwargs)
    summary = evaluate_trainer(trainer, desk.heldout, desk.trials)
    summary.update(mode=cfg.mode, seed=cfg.seed, steps=trainer.step)
    logger.info("%s seed=%d eer=%.4f mindcf=%.4f", cfg.mode, cfg.seed, summary["eer"], summary["mindcf"])
    return summary
