"""Core records shared by every module, plus their text file formats.

Config files are flat ``key = value`` text with ``#`` comments. Parsing is
strict: an unknown key is an error rather than a warning.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .errors import ParseError, ValidationError

MODES = ("baseline", "lsyn", "at", "lsyn+at", "at+sd", "full")
SYN_SCORING = ("concat", "syn_only")


@dataclass(frozen=True)
class ExperimentConfig:
    # front end
    sample_rate: int = 16000
    fbank_dims: int = 80
    window_ms: float = 25.0
    hop_ms: float = 10.0
    segment_s: float = 3.0
    n_fft: int = 512
    mel_fmin: float = 20.0
    mel_fmax: float = 7600.0
    # encoder + AM-Softmax
    embed_dim: int = 192
    encoder_channels: int = 64
    margin: float = 0.2
    scale: float = 30.0
    # 0 means "number of real training classes", resolved by the trainer
    lambda_speakers: int = 0
    # extra multiplier on the synthetic term (1 = plain 1/lambda weighting)
    syn_weight: float = 1.0
    # adversarial weighting
    lambda_adv_base: float = 0.1
    lambda_adv_bounds: tuple[float, float] = (0.01, 1.0)
    ema_beta: float = 0.9
    # optimisation
    lr_encoder: float = 1e-3
    lr_discriminator: float = 2e-4
    weight_decay: float = 1e-7
    warmup_steps: int = 2000
    grad_clip: float = 5.0
    batch_size: int = 50
    epochs: int = 30
    # discriminator
    backbone_layers: tuple[int, ...] = (7, 9, 11, 12)
    backbone_depth: int = 12
    disc_hidden: int = 64
    pool_heads: int = 4
    pseudo_seq_len: int = 4
    dropout: float = 0.1
    # ablation switches
    mode: str = "full"
    syn_scoring: str = "concat"
    gen_real_term: bool = True
    # evaluation
    mindcf_p_target: float = 0.01
    mindcf_c_miss: float = 1.0
    mindcf_c_fa: float = 1.0
    # generated corpus
    corpus_speakers: int = 70
    corpus_heldout: int = 20
    corpus_utts: int = 20
    corpus_utt_s: float = 3.5
    corpus_trials: int = 200
    seed: int = 0

    @property
    def window_samples(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000))

    @property
    def hop_samples(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000))

    @property
    def segment_samples(self) -> int:
        return int(round(self.segment_s * self.sample_rate))

    @property
    def uses_syn_loss(self) -> bool:
        return self.mode in ("lsyn", "lsyn+at", "full")

    @property
    def uses_adversary(self) -> bool:
        return self.mode in ("at", "lsyn+at", "at+sd", "full")

    @property
    def uses_semantic_discriminator(self) -> bool:
        return self.mode in ("at+sd", "full")

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)


def desk_profile(**overrides) -> ExperimentConfig:
    """Settings sized for a single CPU and the generated corpus."""
    base = dict(embed_dim=32, batch_size=16, epochs=10, warmup_steps=100)
    base.update(overrides)
    return validate_config(ExperimentConfig(**base))


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Return ``cfg`` unchanged, or raise ValidationError naming the first bad field."""
    checks = [
        ("sample_rate", cfg.sample_rate > 0),
        ("fbank_dims", cfg.fbank_dims >= 1),
        ("window_ms", cfg.window_ms > 0),
        ("hop_ms", cfg.hop_ms > 0),
        ("segment_s", cfg.segment_s > 0),
        ("n_fft", cfg.n_fft >= cfg.window_samples),
        ("mel_fmin", 0 <= cfg.mel_fmin < cfg.mel_fmax),
        ("mel_fmax", cfg.mel_fmax <= cfg.sample_rate / 2),
        ("embed_dim", cfg.embed_dim >= 1),
        ("encoder_channels", cfg.encoder_channels >= 4 and cfg.encoder_channels % 4 == 0),
        ("margin", cfg.margin >= 0),
        ("scale", cfg.scale > 0),
        ("lambda_speakers", cfg.lambda_speakers >= 0),
        ("syn_weight", cfg.syn_weight >= 0),
        ("lambda_adv_base", cfg.lambda_adv_base >= 0),
        ("lambda_adv_bounds", len(cfg.lambda_adv_bounds) == 2
         and 0 <= cfg.lambda_adv_bounds[0] <= cfg.lambda_adv_bounds[1]),
        ("ema_beta", 0 < cfg.ema_beta < 1),
        ("lr_encoder", cfg.lr_encoder > 0),
        ("lr_discriminator", cfg.lr_discriminator > 0),
        ("weight_decay", cfg.weight_decay >= 0),
        ("warmup_steps", cfg.warmup_steps >= 0),
        ("grad_clip", cfg.grad_clip > 0),
        ("batch_size", cfg.batch_size >= 2),
        ("epochs", cfg.epochs >= 1),
        ("backbone_depth", cfg.backbone_depth >= 1),
        ("backbone_layers", len(cfg.backbone_layers) >= 1
         and all(1 <= l <= cfg.backbone_depth for l in cfg.backbone_layers)
         and len(set(cfg.backbone_layers)) == len(cfg.backbone_layers)),
        ("disc_hidden", cfg.disc_hidden >= 1),
        ("pool_heads", cfg.pool_heads >= 1),
        ("pseudo_seq_len", cfg.pseudo_seq_len >= 1),
        ("dropout", 0 <= cfg.dropout < 1),
        ("mode", cfg.mode in MODES),
        ("syn_scoring", cfg.syn_scoring in SYN_SCORING),
        ("mindcf_p_target", 0 < cfg.mindcf_p_target < 1),
        ("mindcf_c_miss", cfg.mindcf_c_miss > 0),
        ("mindcf_c_fa", cfg.mindcf_c_fa > 0),
        ("corpus_speakers", cfg.corpus_speakers >= 2),
        ("corpus_heldout", 0 <= cfg.corpus_heldout <= cfg.corpus_speakers - 2),
        ("corpus_utts", cfg.corpus_utts >= 1),
        ("corpus_utt_s", cfg.corpus_utt_s * 1000 >= cfg.window_ms),
        ("corpus_trials", cfg.corpus_trials >= 2),
    ]
    for name, ok in checks:
        if not ok:
            raise ValidationError(name, f"invalid value {getattr(cfg, name)!r}")
    return cfg


# -- config text format -----------------------------------------------------

_HINTS = typing.get_type_hints(ExperimentConfig)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(text: str, kind):
    if kind is bool:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def _parse_value(text: str, hint):
    if typing.get_origin(hint) is tuple:
        args = typing.get_args(hint)
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_parse_scalar(p, args[0]) for p in parts)
        if len(parts) != len(args):
            raise ValueError(f"expected {len(args)} values, got {len(parts)}")
        return tuple(_parse_scalar(p, a) for p, a in zip(parts, args))
    return _parse_scalar(text, hint)


def dumps_config(cfg: ExperimentConfig) -> str:
    lines = ["# experiment configuration"]
    for f in dataclasses.fields(cfg):
        lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def loads_config(text: str) -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _HINTS:
            raise ParseError(f"unknown key {key!r}", line=lineno, key=key)
        if key in values:
            raise ParseError(f"duplicate key {key!r}", line=lineno, key=key)
        try:
            values[key] = _parse_value(value, _HINTS[key])
        except ValueError as exc:
            raise ParseError(f"bad value for {key!r}: {exc}", line=lineno, key=key) from None
    return validate_config(ExperimentConfig(**values))


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps_config(cfg))


def load_config(path) -> ExperimentConfig:
    return loads_config(Path(path).read_text())


# -- tensors records ----------------------------------------------------------


@dataclass(frozen=True)
class EmbeddingBatch:
    embeddings: torch.Tensor  # [B, d]
    labels: torch.Tensor  # [B] int64
    is_synthetic: bool = False

    def __post_init__(self):
        if self.embeddings.dim() != 2 or self.embeddings.shape[0] < 1:
            raise ValidationError("embeddings", "expected a non-empty [B, d] matrix")
        if self.labels.shape != (self.embeddings.shape[0],):
            raise ValidationError("labels", "length must match the embedding rows")
        if not torch.isfinite(self.embeddings).all():
            raise ValidationError("embeddings", "non-finite entries")
        if (self.labels < 0).any():
            raise ValidationError("labels", "negative label")

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]


@dataclass(frozen=True)
class ClassifierWeights:
    W: torch.Tensor  # [d, C], one column per class

    def __post_init__(self):
        if self.W.dim() != 2:
            raise ValidationError("W", "expected a [d, C] matrix")
        if not torch.isfinite(self.W).all():
            raise ValidationError("W", "non-finite entries")

    @property
    def num_classes(self) -> int:
        return self.W.shape[1]


@dataclass(frozen=True)
class SyntheticBatch:
    embeddings: torch.Tensor  # [B', d]
    labels: torch.Tensor  # [B'], every value >= num_real_classes
    weights: torch.Tensor  # [d, B'], one column per synthetic row
    pair_map: tuple[tuple[int, int], ...]  # (own label, neighbour label) per row
    partner_index: tuple[int, ...]  # row of the batch mixed into each row
    num_real_classes: int
    pairs: tuple[tuple[int, int], ...] = field(default=())  # registry, sorted pairs

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    def pair_columns(self, W: torch.Tensor) -> torch.Tensor:
        """One weight column per registered pair, ordered as the synthetic labels."""
        if not self.pairs:
            return W.new_zeros((W.shape[0], 0))
        a = torch.tensor([p[0] for p in self.pairs])
        b = torch.tensor([p[1] for p in self.pairs])
        return 0.5 * W[:, a] + 0.5 * W[:, b]


def synthetic_violations(batch: EmbeddingBatch, weights: ClassifierWeights,
                         syn: SyntheticBatch) -> list[str]:
    """Check a SyntheticBatch against the real batch it came from.

    Returns the names of violated invariants (empty when all hold).
    """
    problems = []
    e, y, W = batch.embeddings, batch.labels.tolist(), weights.W
    C = weights.num_classes
    if syn.size > batch.size:
        problems.append("size")
    if syn.size and int(syn.labels.min()) < C:
        problems.append("label_disjointness")
    first_row = {}
    for i, lab in enumerate(y):
        first_row.setdefault(lab, i)
    midpoint_ok = weight_ok = True
    for i, (l1, l2) in enumerate(syn.pair_map):
        if l1 == l2 or l1 != y[i] or l2 not in first_row:
            midpoint_ok = False
            continue
        j = first_row[l2]
        if not torch.equal(syn.embeddings[i], 0.5 * e[i] + 0.5 * e[j]):
            midpoint_ok = False
        if not torch.equal(syn.weights[:, i], 0.5 * W[:, l1] + 0.5 * W[:, l2]):
            weight_ok = False
    if not midpoint_ok:
        problems.append("midpoint")
    if not weight_ok:
        problems.append("weight_midpoint")
    return problems


# -- trial lists and manifests --------------------------------------------------


@dataclass(frozen=True)
class TrialList:
    trials: tuple[tuple[bool, str, str], ...]

    def __post_init__(self):
        if not self.trials:
            raise ValidationError("trials", "empty trial list")
        flags = {t[0] for t in self.trials}
        if flags != {True, False}:
            raise ValidationError("trials", "need at least one target and one nontarget trial")

    def __len__(self):
        return len(self.trials)

    def utterance_ids(self) -> list[str]:
        seen = {}
        for _, a, b in self.trials:
            seen.setdefault(a, None)
            seen.setdefault(b, None)
        return list(seen)


def read_trials(path) -> TrialList:
    trials = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = raw.split()
        if not parts:
            continue
        if len(parts) != 3 or parts[0] not in ("0", "1"):
            raise ParseError(f"expected 'label enroll_id test_id', got {raw!r}", line=lineno)
        trials.append((parts[0] == "1", parts[1], parts[2]))
    return TrialList(tuple(trials))


def write_trials(trials: TrialList, path) -> None:
    lines = [f"{int(t)} {a} {b}" for t, a, b in trials.trials]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class ManifestEntry:
    utt_id: str
    speaker: str
    source: str  # wav path (relative to the manifest) or a generator spec


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        if len(parts) != 3:
            raise ParseError(f"expected 'utterance_id speaker_label source', got {raw!r}",
                             line=lineno)
        entries.append(ManifestEntry(*parts))
    if not entries:
        raise ParseError("empty manifest")
    return entries


def write_manifest(entries, path) -> None:
    lines = [f"{e.utt_id} {e.speaker} {e.source}" for e in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def speaker_index(entries) -> dict[str, int]:
    """Map speaker labels to contiguous class ids 0..C-1 in sorted order."""
    return {spk: i for i, spk in enumerate(sorted({e.speaker for e in entries}))}
