"""Alternating encoder / discriminator training, checkpoints and metrics logs.

One step: filterbanks -> embeddings -> real AM-Softmax -> mixup -> discriminator
update on detached embeddings -> generator loss -> adaptive weight -> encoder
and head update on the total loss.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import features
from .datamodel import (
    EmbeddingBatch,
    ExperimentConfig,
    dumps_config,
    loads_config,
    read_manifest,
    speaker_index,
    validate_config,
)
from .discriminator import build_discriminator, trainable_parameters
from .encoder import ClassificationHead, ReferenceEncoder, cosine_logits, encode
from .errors import VersionError
from .losses import (
    LossReport,
    adapt_lambda,
    am_softmax,
    discriminator_loss,
    generator_loss,
    synthetic_loss,
    total_loss,
)
from .mixup import sl_mixup

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = "caarma-checkpoint 1"
METRIC_FIELDS = ("step", "epoch", "l_real", "l_syn", "l_d", "l_g", "l_total",
                 "lambda_adv", "ratio_ema", "lr_enc", "lr_disc")


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0  # completed epochs
    ratio_ema: float = 1.0
    lambda_adv: float = 0.0


def build_models(cfg: ExperimentConfig, num_classes: int):
    """Encoder, head and (mode permitting) discriminator, seeded from ``cfg.seed``.

    The encoder and head are created first, so their initial weights do not
    depend on the mode.
    """
    torch.manual_seed(cfg.seed)
    encoder = ReferenceEncoder(cfg.fbank_dims, cfg.encoder_channels, cfg.embed_dim)
    head = ClassificationHead(cfg.embed_dim, num_classes)
    disc = build_discriminator(cfg)
    return encoder, head, disc


def encoder_lr(cfg: ExperimentConfig, update: int) -> float:
    """Learning rate for the ``update``-th encoder update (1-based), linear warmup."""
    if cfg.warmup_steps <= 0:
        return cfg.lr_encoder
    return cfg.lr_encoder * min(1.0, update / cfg.warmup_steps)


def batch_frames(waveforms, cfg: ExperimentConfig) -> torch.Tensor:
    frames = [features.extract_fbank(w, cfg).frames for w in waveforms]
    return torch.from_numpy(np.stack(frames).astype(np.float32))


class Trainer:
    """Owns the models, both optimizers and the training RNG streams."""

    def __init__(self, cfg: ExperimentConfig, num_classes: int, lambda_speakers: int | None = None):
        self.cfg = validate_config(cfg)
        self.num_classes = num_classes
        self.lambda_speakers = lambda_speakers or cfg.lambda_speakers or num_classes
        self.encoder, self.head, self.discriminator = build_models(cfg, num_classes)
        self.encoder_params = list(self.encoder.parameters()) + list(self.head.parameters())
        self.enc_opt = torch.optim.AdamW(self.encoder_params, lr=cfg.lr_encoder,
                                         weight_decay=cfg.weight_decay)
        self.disc_opt = None
        if self.discriminator is not None:
            self.disc_opt = torch.optim.AdamW(trainable_parameters(self.discriminator),
                                              lr=cfg.lr_discriminator, weight_decay=cfg.weight_decay)
        self.rng = np.random.default_rng([cfg.seed, 3])
        self.state = TrainState()
        self.last_synthetic = None
        self.last_lrs = (0.0, cfg.lr_discriminator)

    @property
    def step(self) -> int:
        return self.state.step

    def train_step(self, frames: torch.Tensor, labels: torch.Tensor) -> LossReport:
        """One alternating update on a batch of filterbank frames [B, T, F]."""
        cfg = self.cfg
        self.encoder.train()
        e = self.encoder(frames)
        W = self.head.W
        l_real = am_softmax(cosine_logits(e, W), labels, cfg.scale, cfg.margin)

        zero = e.new_zeros(())
        l_syn = l_d = l_g = zero
        syn = None
        wants_syn = cfg.uses_syn_loss or cfg.uses_adversary
        if wants_syn:
            if torch.unique(labels).numel() >= 2:
                syn = sl_mixup(EmbeddingBatch(e, labels), W, cfg)
            else:
                logger.warning("step %d: single-class batch, mixup skipped", self.state.step + 1)
        self.last_synthetic = syn

        lambda_adv = 0.0
        if syn is not None and self.discriminator is not None:
            self.discriminator.train()
            d_real = self.discriminator(e.detach())
            d_syn = self.discriminator(syn.embeddings.detach())
            l_d = discriminator_loss(d_real, d_syn)
            self.disc_opt.zero_grad(set_to_none=True)
            l_d.backward()
            torch.nn.utils.clip_grad_norm_(trainable_parameters(self.discriminator), cfg.grad_clip)
            self.disc_opt.step()

            l_g = generator_loss(self.discriminator(e), self.discriminator(syn.embeddings),
                                 cfg.gen_real_term)
            lambda_adv, self.state.ratio_ema = adapt_lambda(
                l_real.item(), l_g.item(), self.state.ratio_ema, cfg)
        if syn is not None and cfg.uses_syn_loss:
            l_syn = synthetic_loss(syn, W, cfg.scale, cfg.margin, cfg.syn_scoring)

        l_total = total_loss(l_real, cfg.syn_weight * l_syn, l_g, lambda_adv, self.lambda_speakers)
        self.enc_opt.zero_grad(set_to_none=True)
        l_total.backward()
        torch.nn.utils.clip_grad_norm_(self.encoder_params, cfg.grad_clip)
        lr = encoder_lr(cfg, self.state.step + 1)
        for group in self.enc_opt.param_groups:
            group["lr"] = lr
        self.enc_opt.step()
        if self.disc_opt is not None:
            # generator-loss gradients must not reach the discriminator
            self.disc_opt.zero_grad(set_to_none=True)

        self.state.step += 1
        self.state.lambda_adv = lambda_adv
        self.last_lrs = (lr, cfg.lr_discriminator)
        return LossReport(
            l_real=l_real.item(), l_syn=l_syn.item(), l_d=l_d.item(), l_g=l_g.item(),
            l_total=l_total.item(), lambda_adv=lambda_adv, ratio_ema=self.state.ratio_ema,
        )

    # -- data -------------------------------------------------------------------

    def epoch_batches(self, n_items: int) -> list[np.ndarray]:
        """Shuffled index batches for one epoch; a trailing partial batch is dropped."""
        perm = self.rng.permutation(n_items)
        bs = self.cfg.batch_size
        return [perm[i:i + bs] for i in range(0, n_items - bs + 1, bs)]

    def segment_batch(self, waveforms) -> torch.Tensor:
        segs = [features.random_segment(w, self.cfg, self.rng) for w in waveforms]
        return batch_frames(segs, self.cfg)

    def embed(self, frames) -> torch.Tensor:
        return encode(self.encoder, frames)

    # -- checkpoints --------------------------------------------------------------

    def named_tensors(self) -> dict[str, torch.Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.state_dict().items()}
        out.update({f"head.{k}": v for k, v in self.head.state_dict().items()})
        if self.discriminator is not None:
            out.update({f"disc.{k}": v for k, v in self.discriminator.state_dict().items()})
        return out


class Corpus:
    """Manifest entries with their float waveforms cached in memory."""

    def __init__(self, entries, cfg: ExperimentConfig, root=None, waveforms=None):
        self.entries = list(entries)
        self.cfg = cfg
        self.root = root
        self.labels_map = speaker_index(self.entries)
        self.labels = np.array([self.labels_map[e.speaker] for e in self.entries], dtype=np.int64)
        self._pcm = {}
        if waveforms is not None:
            for e in self.entries:
                self._pcm[e.utt_id] = features.pcm_to_float(waveforms[e.utt_id])

    @classmethod
    def from_manifest(cls, path, cfg):
        path = Path(path)
        return cls(read_manifest(path), cfg, root=path.parent)

    @property
    def num_classes(self) -> int:
        return len(self.labels_map)

    def waveform(self, i: int) -> np.ndarray:
        e = self.entries[i]
        if e.utt_id not in self._pcm:
            self._pcm[e.utt_id] = features.load_waveform(e.source, self.cfg, self.root)
        return self._pcm[e.utt_id]

    def __len__(self):
        return len(self.entries)


def _atomic_dir_write(target: Path, write):
    tmp = target.with_name(target.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    write(tmp)
    if target.exists():
        shutil.rmtree(target)
    os.replace(tmp, target)


def save_checkpoint(trainer: Trainer, path) -> Path:
    """Write the complete training state to directory ``path`` (atomically)."""
    path = Path(path)

    def write(d: Path):
        (d / "VERSION").write_text(CHECKPOINT_VERSION + "\n")
        (d / "config.txt").write_text(dumps_config(trainer.cfg))
        meta = dict(asdict(trainer.state), num_classes=trainer.num_classes,
                    lambda_speakers=trainer.lambda_speakers,
                    numpy_rng=trainer.rng.bit_generator.state)
        (d / "state.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
        torch.save(trainer.named_tensors(), d / "params.pt")
        optim = {"encoder": trainer.enc_opt.state_dict()}
        if trainer.disc_opt is not None:
            optim["discriminator"] = trainer.disc_opt.state_dict()
        torch.save(optim, d / "optim.pt")
        torch.save({"torch_rng": torch.get_rng_state()}, d / "rng.pt")

    _atomic_dir_write(path, write)
    return path


def load_checkpoint(path, cfg: ExperimentConfig | None = None) -> Trainer:
    """Rebuild a Trainer from a checkpoint directory.

    If ``cfg`` is given, its model-shaping fields must agree with the stored config.
    """
    path = Path(path)
    version_file = path / "VERSION"
    if not version_file.exists():
        raise FileNotFoundError(f"{path}: not a checkpoint (VERSION missing)")
    if version_file.read_text().strip() != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint format {version_file.read_text().strip()!r}")
    stored = loads_config((path / "config.txt").read_text())
    if cfg is not None:
        for name in ("embed_dim", "encoder_channels", "fbank_dims", "mode", "disc_hidden",
                     "backbone_layers", "backbone_depth", "pool_heads", "pseudo_seq_len"):
            if getattr(cfg, name) != getattr(stored, name):
                raise VersionError(f"checkpoint {name}={getattr(stored, name)!r} "
                                   f"does not match config {name}={getattr(cfg, name)!r}")
    try:
        meta = json.loads((path / "state.json").read_text())
        params = torch.load(path / "params.pt", weights_only=True)
        optim = torch.load(path / "optim.pt", weights_only=True)
        rng = torch.load(path / "rng.pt", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:  # truncated zip, bad pickle, bad json
        raise VersionError(f"{path}: corrupt checkpoint ({type(exc).__name__}: {exc})") from exc

    trainer = Trainer(stored, meta["num_classes"], meta["lambda_speakers"])
    try:
        trainer.encoder.load_state_dict(_strip(params, "encoder."))
        trainer.head.load_state_dict(_strip(params, "head."))
        if trainer.discriminator is not None:
            trainer.discriminator.load_state_dict(_strip(params, "disc."))
            trainer.disc_opt.load_state_dict(optim["discriminator"])
        trainer.enc_opt.load_state_dict(optim["encoder"])
    except (KeyError, RuntimeError) as exc:
        raise VersionError(f"{path}: parameter mismatch ({exc})") from exc
    trainer.state = TrainState(step=meta["step"], epoch=meta["epoch"],
                               ratio_ema=meta["ratio_ema"], lambda_adv=meta["lambda_adv"])
    trainer.rng.bit_generator.state = meta["numpy_rng"]
    torch.set_rng_state(rng["torch_rng"])
    return trainer


def _strip(params: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def checkpoint_name(epoch: int) -> str:
    return f"epoch_{epoch:03d}"


def _metrics_row(trainer: Trainer, epoch: int, report: LossReport) -> dict:
    row = {"step": trainer.step, "epoch": epoch}
    row.update(report.as_dict())
    row["lr_enc"], row["lr_disc"] = trainer.last_lrs
    return {k: row[k] for k in METRIC_FIELDS}


def read_metrics(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def train(cfg: ExperimentConfig, corpus: Corpus, out_dir, resume_from=None,
          stop_after_epoch: int | None = None, on_step=None) -> Trainer:
    """Run (or resume) the epoch loop, logging every step and checkpointing every epoch.

    ``on_step(trainer, report)`` is called after each step.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "metrics.jsonl"
    if resume_from is not None:
        trainer = load_checkpoint(resume_from, cfg)
        kept = [r for r in read_metrics(log_path) if r["step"] <= trainer.step]
        log_path.write_text("".join(json.dumps(r) + "\n" for r in kept))
    else:
        trainer = Trainer(cfg, corpus.num_classes)
        log_path.write_text("")
    if trainer.num_classes != corpus.num_classes:
        raise VersionError(f"checkpoint has {trainer.num_classes} classes, corpus has {corpus.num_classes}")

    with log_path.open("a") as log:
        for epoch in range(trainer.state.epoch, cfg.epochs):
            for idx in trainer.epoch_batches(len(corpus)):
                frames = trainer.segment_batch([corpus.waveform(int(i)) for i in idx])
                labels = torch.from_numpy(corpus.labels[idx])
                report = trainer.train_step(frames, labels)
                log.write(json.dumps(_metrics_row(trainer, epoch + 1, report)) + "\n")
                if on_step is not None:
                    on_step(trainer, report)
            log.flush()
            trainer.state.epoch = epoch + 1
            save_checkpoint(trainer, out / "checkpoints" / checkpoint_name(epoch + 1))
            logger.info("epoch %d done at step %d", epoch + 1, trainer.step)
            if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch:
                break
    return trainer


def embed_corpus(trainer_or_encoder, corpus: Corpus) -> dict[str, torch.Tensor]:
    """Inference embeddings of whole utterances (no cropping), keyed by utterance id."""
    encoder = getattr(trainer_or_encoder, "encoder", trainer_or_encoder)
    cfg = corpus.cfg
    return {e.utt_id: encode(encoder, features.extract_fbank(corpus.waveform(i), cfg).frames.astype(np.float32))
            for i, e in enumerate(corpus.entries)}


def step_invariant_violations(trainer: Trainer, report: LossReport) -> list[str]:
    """Per-step health checks: finite losses, weight bounds, label ranges, attention sums."""
    problems = []
    if not report.is_finite():
        problems.append("finite_losses")
    lo, hi = trainer.cfg.lambda_adv_bounds
    if trainer.discriminator is not None and trainer.last_synthetic is not None:
        if not lo <= report.lambda_adv <= hi:
            problems.append("lambda_bounds")
    syn = trainer.last_synthetic
    if syn is not None and int(syn.labels.min()) < trainer.num_classes:
        problems.append("synthetic_labels")
    comb = getattr(trainer.discriminator, "combination", None)
    if comb is not None and syn is not None:
        for alpha in comb.last_alphas:
            if not torch.allclose(alpha.sum(-1), torch.ones(()), atol=1e-6, rtol=0):
                problems.append("attention_sum")
                break
    return problems
