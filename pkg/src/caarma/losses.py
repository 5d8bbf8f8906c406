"""Training objectives: AM-Softmax on real and synthetic classes, the adversarial
BCE pair, the adaptive adversarial weight and the total encoder loss."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .datamodel import SyntheticBatch
from .encoder import cosine_logits

PROB_EPS = 1e-7
RATIO_FLOOR = 1e-8


@dataclass(frozen=True)
class LossReport:
    l_real: float
    l_syn: float
    l_d: float
    l_g: float
    l_total: float
    lambda_adv: float
    ratio_ema: float

    def as_dict(self) -> dict:
        return asdict(self)

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in asdict(self).values())


def am_softmax(logits: torch.Tensor, targets: torch.Tensor, s: float, m: float) -> torch.Tensor:
    """Additive-margin softmax cross-entropy, averaged over the batch.

    The margin is subtracted from the target cosine in both numerator and
    denominator (the standard form).
    """
    C = logits.shape[1]
    if targets.numel() and (int(targets.min()) < 0 or int(targets.max()) >= C):
        raise IndexError(f"target out of range [0, {C})")
    margin = F.one_hot(targets, C).to(logits.dtype) * m
    return F.cross_entropy(s * (logits - margin), targets)


def synthetic_loss(syn: SyntheticBatch, W: torch.Tensor, s: float, m: float,
                   scoring: str = "concat") -> torch.Tensor:
    """AM-Softmax of synthetic rows against ``[W | one column per synthetic class]``.

    With ``scoring="syn_only"`` the real columns are left out.
    """
    C = syn.num_real_classes
    labels = syn.labels.tolist()
    first = {}
    for i, lab in enumerate(labels):
        first.setdefault(lab, i)
    cols = syn.weights[:, [first[C + k] for k in range(len(first))]]
    if scoring == "concat":
        return am_softmax(cosine_logits(syn.embeddings, torch.cat([W, cols], dim=1)), syn.labels, s, m)
    if scoring == "syn_only":
        return am_softmax(cosine_logits(syn.embeddings, cols), syn.labels - C, s, m)
    raise ValueError(f"unknown scoring {scoring!r}")


def bce(p, target):
    """Binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    if not torch.is_tensor(p):
        p = torch.as_tensor(p, dtype=torch.float64)
    p = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    if target == 1:
        return -torch.log(p)
    if target == 0:
        return -torch.log1p(-p)
    return -(target * torch.log(p) + (1 - target) * torch.log1p(-p))


def discriminator_loss(d_real, d_syn):
    """Real rows labelled 1, synthetic rows 0; mean within each term, terms summed."""
    return bce(d_real, 1).mean() + bce(d_syn, 0).mean()


def generator_loss(d_real, d_syn, real_term: bool = True):
    """Labels of the discriminator loss swapped. ``real_term=False`` drops BCE(D(e), 0)."""
    loss = bce(d_syn, 1).mean()
    if real_term:
        loss = loss + bce(d_real, 0).mean()
    return loss


def adapt_lambda(l_real: float, l_g: float, ratio_ema: float, cfg) -> tuple[float, float]:
    """EMA of the real/generator loss ratio mapped linearly to the adversarial weight.

    Returns ``(lambda_adv, new_ratio_ema)``; the weight is clipped to the configured bounds.
    """
    beta = cfg.ema_beta
    ratio = float(l_real) / max(float(l_g), RATIO_FLOOR)
    new_ema = beta * ratio_ema + (1.0 - beta) * ratio
    lo, hi = cfg.lambda_adv_bounds
    return min(max(cfg.lambda_adv_base * new_ema, lo), hi), new_ema


def total_loss(l_real, l_syn, l_g, lambda_adv: float, num_speakers: int):
    return l_real + (1.0 / num_speakers) * l_syn + lambda_adv * l_g
