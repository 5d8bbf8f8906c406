"""Fast property suite run by ``caarma selftest``.

Each property returns ``None`` when it holds and raises ``AssertionError``
(with a short reason) when it does not.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import oracles
from .datamodel import ClassifierWeights, EmbeddingBatch, desk_profile, synthetic_violations
from .discriminator import (
    Adapter,
    MultiHeadAttentivePooling,
    SemanticDiscriminator,
    spectral_normalize,
)
from .encoder import cosine_logits
from .evaluation import ScoredTrials, compute_eer, compute_mindcf
from .features import extract_fbank
from .losses import adapt_lambda, am_softmax, bce, discriminator_loss, generator_loss
from .mixup import sl_mixup

PROPERTIES = []


def prop(fn):
    PROPERTIES.append(fn)
    return fn


def _random_batch(gen: torch.Generator, B=8, C=5, d=6, dtype=torch.float64):
    labels = torch.randint(0, C, (B,), generator=gen)
    labels[:2] = torch.tensor([0, 1])  # at least two classes
    e = torch.randn(B, d, generator=gen, dtype=dtype)
    W = torch.randn(d, C, generator=gen, dtype=dtype)
    return EmbeddingBatch(e, labels), W


def _mixup_problems(n=20):
    gen = torch.Generator().manual_seed(11)
    found = set()
    for _ in range(n):
        batch, W = _random_batch(gen)
        syn = sl_mixup(batch, W)
        found.update(synthetic_violations(batch, ClassifierWeights(W), syn))
    return found


@prop
def midpoint():
    bad = _mixup_problems()
    assert "midpoint" not in bad, "synthetic rows are not midpoints of their source pair"


@prop
def weight_midpoint():
    bad = _mixup_problems()
    assert "weight_midpoint" not in bad, "synthetic weight columns are not midpoints"


@prop
def label_disjointness():
    bad = _mixup_problems()
    assert "label_disjointness" not in bad, "a synthetic label collides with a real class"


@prop
def mixup_oracle():
    gen = torch.Generator().manual_seed(12)
    for _ in range(20):
        batch, W = _random_batch(gen)
        syn = sl_mixup(batch, W)
        e_ref, y_ref, w_ref = oracles.mixup_reference(batch.embeddings, batch.labels, W)
        assert torch.equal(syn.embeddings, e_ref), "embeddings differ from brute force"
        assert torch.equal(syn.labels, y_ref), "labels differ from brute force"
        assert torch.equal(syn.weights, w_ref), "weight columns differ from brute force"


@prop
def am_softmax_closed_form():
    logits = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    target = torch.tensor([0])
    got = am_softmax(logits, target, 1.0, 0.0).item()
    assert abs(got - math.log1p(math.exp(-1))) < 1e-12
    got = am_softmax(logits, target, 1.0, 0.2).item()
    assert abs(got + math.log(math.exp(0.8) / (math.exp(0.8) + 1))) < 1e-12
    uniform = torch.zeros(3, 7, dtype=torch.float64)
    assert abs(am_softmax(uniform, torch.tensor([0, 3, 6]), 30.0, 0.0).item() - math.log(7)) < 1e-12


@prop
def am_softmax_gradient():
    gen = torch.Generator().manual_seed(13)
    logits = (torch.rand(4, 5, generator=gen, dtype=torch.float64) * 2 - 1).requires_grad_()
    target = torch.randint(0, 5, (4,), generator=gen)
    err = oracles.gradient_relative_error(lambda: am_softmax(logits, target, 30.0, 0.2), [logits])
    assert err < 1e-4, f"relative error {err:.2e}"


@prop
def adversarial_losses():
    assert abs(bce(torch.tensor([0.5]), 1).item() - math.log(2)) < 1e-6
    d_real = torch.tensor([0.9], dtype=torch.float64)
    d_syn = torch.tensor([0.2], dtype=torch.float64)
    assert abs(discriminator_loss(d_real, d_syn).item() - 0.32850) < 1e-5
    assert abs(generator_loss(d_real, d_syn).item() - 3.91202) < 1e-5
    # swapping the roles of real and synthetic turns one loss into the other
    assert abs(discriminator_loss(d_syn, d_real).item() - generator_loss(d_real, d_syn).item()) < 1e-12


@prop
def adversarial_gradient():
    gen = torch.Generator().manual_seed(14)
    d_real = (0.05 + 0.9 * torch.rand(6, generator=gen, dtype=torch.float64)).requires_grad_()
    d_syn = (0.05 + 0.9 * torch.rand(6, generator=gen, dtype=torch.float64)).requires_grad_()
    for fn in (discriminator_loss, generator_loss):
        err = oracles.gradient_relative_error(lambda: fn(d_real, d_syn), [d_real, d_syn])
        assert err < 1e-4, f"{fn.__name__} relative error {err:.2e}"


@prop
def lambda_bounds():
    cfg = desk_profile()
    lo, hi = cfg.lambda_adv_bounds
    rng = np.random.default_rng(15)
    ema = 1.0
    for _ in range(200):
        lam, ema = adapt_lambda(float(rng.exponential(3)), float(rng.exponential(0.5)), ema, cfg)
        assert lo <= lam <= hi, f"lambda_adv {lam} outside [{lo}, {hi}]"


@prop
def cosine_scale_invariance():
    gen = torch.Generator().manual_seed(16)
    e = torch.randn(5, 6, generator=gen, dtype=torch.float64)
    W = torch.randn(6, 4, generator=gen, dtype=torch.float64)
    base = cosine_logits(e, W)
    scaled = cosine_logits(3.7 * e, 0.2 * W)
    assert (base - scaled).abs().max().item() < 1e-12
    assert base.abs().max().item() <= 1.0


@prop
def attention_sums_to_one():
    torch.manual_seed(17)
    pool = MultiHeadAttentivePooling(8, heads=4).double()
    pool(torch.randn(3, 6, 8, dtype=torch.float64))
    sums = pool.last_alpha.sum(-1)
    assert (sums - 1).abs().max().item() < 1e-6


@prop
def adapter_composition():
    torch.manual_seed(18)
    adapter = Adapter(8, 8, dropout=0.1).double().eval()
    x = torch.randn(4, 8, dtype=torch.float64)
    lin1, lin2 = adapter.intermediate[0], adapter.intermediate[3]
    h = x @ adapter.down.normalized_weight().t() + adapter.down.bias
    h = F.layer_norm(h, (8,), adapter.norm1.weight, adapter.norm1.bias)
    h = F.linear(F.gelu(F.linear(h, lin1.weight, lin1.bias)), lin2.weight, lin2.bias)
    h = F.layer_norm(h, (8,), adapter.norm2.weight, adapter.norm2.bias)
    assert (adapter(x) - (h + x)).abs().max().item() < 1e-12
    with torch.no_grad():
        for p in adapter.intermediate.parameters():
            p.zero_()
    assert torch.equal(adapter(x), x), "zeroed transform must reduce to the skip path"


@prop
def spectral_norm_svd():
    gen = torch.Generator().manual_seed(19)
    W = torch.randn(8, 8, generator=gen, dtype=torch.float64)
    u0 = torch.randn(8, generator=gen, dtype=torch.float64)
    Wn, _ = spectral_normalize(W, u0, n_iter=200)
    sigma = torch.linalg.svdvals(Wn)[0].item()
    assert abs(sigma - 1.0) < 1e-3, f"top singular value {sigma}"


@prop
def discriminator_gradient():
    torch.manual_seed(20)
    disc = SemanticDiscriminator(4, hidden=8, layers=(1, 2), depth=2, heads=2, seq_len=2,
                                 dropout=0.1).double().eval()
    e = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    params = [e] + [p for p in disc.parameters() if p.requires_grad]
    err = oracles.gradient_relative_error(lambda: disc(e).log().sum(), params, step=1e-6)
    assert err < 1e-3, f"relative error {err:.2e}"


@prop
def eer_oracle():
    rng = np.random.default_rng(21)
    for _ in range(50):
        scores = rng.normal(size=12)
        labels = rng.integers(0, 2, 12).astype(bool)
        if labels.all() or not labels.any():
            continue
        st = ScoredTrials(scores, labels)
        assert compute_eer(st)[0] == oracles.eer_reference(scores, labels)


@prop
def mindcf_oracle():
    rng = np.random.default_rng(22)
    for _ in range(50):
        scores = rng.normal(size=12)
        labels = rng.integers(0, 2, 12).astype(bool)
        if labels.all() or not labels.any():
            continue
        st = ScoredTrials(scores, labels)
        assert compute_mindcf(st, 0.01) == oracles.mindcf_reference(scores, labels, 0.01)


@prop
def metric_monotone_invariance():
    rng = np.random.default_rng(23)
    scores = rng.normal(size=40)
    labels = np.arange(40) % 2 == 0
    a, b = ScoredTrials(scores, labels), ScoredTrials(np.exp(2 * scores) + 1, labels)
    assert abs(compute_eer(a)[0] - compute_eer(b)[0]) < 1e-12
    assert abs(compute_mindcf(a) - compute_mindcf(b)) < 1e-12


@prop
def fbank_frame_count():
    cfg = desk_profile()
    assert extract_fbank(np.zeros(48000), cfg).frames.shape == (298, cfg.fbank_dims)
    assert extract_fbank(np.zeros(cfg.window_samples), cfg).frames.shape[0] == 1


@dataclass
class PropertyResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def run_all() -> list[PropertyResult]:
    results = []
    for fn in PROPERTIES:
        start = time.perf_counter()
        try:
            fn()
            passed, detail = True, ""
        except AssertionError as exc:
            passed, detail = False, str(exc) or "assertion failed"
        except Exception as exc:  # a crash is a failure too
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(PropertyResult(fn.__name__, passed, detail, time.perf_counter() - start))
    return results
