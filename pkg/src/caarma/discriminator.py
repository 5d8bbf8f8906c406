"""Real-vs-synthetic discriminators over embeddings.

The semantic discriminator lifts an embedding into a frozen multi-layer
backbone through an adapter, pools selected hidden layers with multi-head
attentive pooling, mixes them with learned layer weights and classifies the
result with a spectrally normalised residual head.
"""

from __future__ import annotations

import math
from typing import Protocol

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import MissingLayerError

_NORM_EPS = 1e-12


def _l2normalize(x: torch.Tensor) -> torch.Tensor:
    return x / (x.norm() + _NORM_EPS)


@torch.no_grad()
def power_iteration(weight: torch.Tensor, u: torch.Tensor, n_iter: int = 1):
    """Left/right singular vector estimates ``(u, v)`` after ``n_iter`` steps."""
    w = weight.detach()
    for _ in range(max(1, n_iter)):
        v = _l2normalize(w.t() @ u)
        u = _l2normalize(w @ v)
    return u, v


def spectral_normalize(weight: torch.Tensor, u: torch.Tensor, n_iter: int = 1):
    """Divide ``weight`` by its power-iteration estimate of the top singular value.

    Returns the normalised matrix and the updated left vector. Gradients flow
    through ``weight`` only; the singular vectors are treated as constants.
    """
    u, v = power_iteration(weight, u, n_iter)
    sigma = torch.dot(u, weight @ v)
    return weight / sigma.clamp_min(_NORM_EPS), u


class SNLinear(nn.Module):
    """Linear layer whose weight is spectrally normalised on every forward.

    Training mode advances the power iteration by one step; eval mode reuses the
    stored vectors, so the forward map is a fixed differentiable function of the
    weight.
    """

    def __init__(self, in_features: int, out_features: int, bias: bool = True, warmup_iters: int = 10):
        super().__init__()
        lin = nn.Linear(in_features, out_features, bias=bias)
        self.weight = lin.weight
        self.bias = lin.bias
        u, v = power_iteration(self.weight, _l2normalize(torch.randn(out_features)), warmup_iters)
        self.register_buffer("u", u)
        self.register_buffer("v", v)

    def normalized_weight(self) -> torch.Tensor:
        if self.training:
            # rebind rather than copy_: earlier graphs in the same step hold the old vectors
            self.u, self.v = power_iteration(self.weight, self.u, 1)
        sigma = torch.dot(self.u, self.weight @ self.v)
        return self.weight / sigma.clamp_min(_NORM_EPS)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.normalized_weight(), self.bias)


class Adapter(nn.Module):
    """Spectrally normalised down-projection, LayerNorm, two-layer GELU block,
    LayerNorm, plus a skip connection from the input.

    When the input and hidden sizes differ the skip is a fixed zero-padded or
    truncated copy of the input.
    """

    def __init__(self, in_dim: int, hidden: int, dropout: float = 0.1, expansion: int = 2):
        super().__init__()
        self.in_dim, self.hidden = in_dim, hidden
        self.down = SNLinear(in_dim, hidden)
        self.norm1 = nn.LayerNorm(hidden)
        self.intermediate = nn.Sequential(
            nn.Linear(hidden, expansion * hidden),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(expansion * hidden, hidden),
            nn.Dropout(dropout),
        )
        self.norm2 = nn.LayerNorm(hidden)

    def transform(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm2(self.intermediate(self.norm1(self.down(x))))

    def skip(self, x: torch.Tensor) -> torch.Tensor:
        if self.in_dim == self.hidden:
            return x
        if self.in_dim > self.hidden:
            return x[..., : self.hidden]
        return F.pad(x, (0, self.hidden - self.in_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.transform(x) + self.skip(x)


class BackboneInterface(Protocol):
    depth: int
    frozen: bool

    def __call__(self, seq: torch.Tensor) -> dict[int, torch.Tensor]:
        """Hidden states ``{layer: [B, T, h]}`` for layers 1..depth."""
        ...


class StubBackbone(nn.Module):
    """Frozen, randomly initialised residual MLP stack standing in for a
    pretrained speech model. Weights come from ``seed`` only."""

    frozen = True

    def __init__(self, hidden: int, depth: int = 12, seed: int = 0):
        super().__init__()
        self.depth = depth
        gen = torch.Generator().manual_seed(seed)
        scale = 1.0 / math.sqrt(hidden)
        self.weights = nn.ParameterList(
            nn.Parameter(torch.randn(hidden, hidden, generator=gen) * scale, requires_grad=False)
            for _ in range(depth)
        )
        self.biases = nn.ParameterList(
            nn.Parameter(0.1 * torch.randn(hidden, generator=gen), requires_grad=False)
            for _ in range(depth)
        )

    def forward(self, seq: torch.Tensor) -> dict[int, torch.Tensor]:
        states = {}
        h = seq
        for layer, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            h = h + torch.tanh(F.linear(h, w, b))
            states[layer] = h
        return states


class MultiHeadAttentivePooling(nn.Module):
    """Per head: ``alpha_t = softmax_t(v . tanh(W h_t + b))`` and ``mu = sum_t alpha_t h_t``.

    Heads are concatenated, giving ``heads * hidden`` outputs. The last attention
    weights are kept on ``last_alpha`` ([B, heads, T]) for inspection.
    """

    def __init__(self, hidden: int, heads: int = 4, attn_dim: int | None = None):
        super().__init__()
        attn_dim = attn_dim or hidden
        self.heads = heads
        self.W = nn.Parameter(torch.randn(heads, attn_dim, hidden) / math.sqrt(hidden))
        self.b = nn.Parameter(torch.zeros(heads, attn_dim))
        self.v = nn.Parameter(torch.randn(heads, attn_dim) / math.sqrt(attn_dim))
        self.last_alpha = None

    def forward(self, hs: torch.Tensor) -> torch.Tensor:
        z = torch.tanh(torch.einsum("bth,kah->bkta", hs, self.W) + self.b[None, :, None, :])
        alpha = torch.softmax(torch.einsum("bkta,ka->bkt", z, self.v), dim=-1)
        self.last_alpha = alpha.detach()
        mu = torch.einsum("bkt,bth->bkh", alpha, hs)
        return mu.reshape(hs.shape[0], -1)


def mhap(hidden: torch.Tensor, pool: MultiHeadAttentivePooling) -> torch.Tensor:
    """Pool a single sequence [T, h] (or a batch [B, T, h])."""
    if hidden.dim() == 2:
        return pool(hidden[None])[0]
    return pool(hidden)


class LayerCombination(nn.Module):
    """LayerNorm and spectrally normalised projection per selected layer, plus
    one learnable mixing weight per layer (initialised to 1 / L)."""

    def __init__(self, layers, hidden: int):
        super().__init__()
        self.layers = tuple(int(l) for l in layers)
        self.norms = nn.ModuleList(nn.LayerNorm(hidden) for _ in self.layers)
        self.projections = nn.ModuleList(SNLinear(hidden, hidden) for _ in self.layers)
        self.w_layer = nn.Parameter(torch.full((len(self.layers),), 1.0 / len(self.layers)))
        self.last_alphas = []


def combine_layers(states: dict, comb: LayerCombination, pool: MultiHeadAttentivePooling) -> torch.Tensor:
    """Weighted sum over selected layers of the pooled projected states."""
    out = None
    alphas = []
    for k, layer in enumerate(comb.layers):
        if layer not in states:
            raise MissingLayerError(layer)
        pooled = pool(comb.projections[k](comb.norms[k](states[layer])))
        alphas.append(pool.last_alpha)
        term = comb.w_layer[k] * pooled
        out = term if out is None else out + term
    comb.last_alphas = alphas
    return out


class ResidualHead(nn.Module):
    def __init__(self, in_dim: int, hidden: int, blocks: int = 2, dropout: float = 0.1, slope: float = 0.2):
        super().__init__()
        self.inp = SNLinear(in_dim, hidden)
        self.blocks = nn.ModuleList(SNLinear(hidden, hidden) for _ in range(blocks))
        self.out = SNLinear(hidden, 1)
        self.drop = nn.Dropout(dropout)
        self.slope = slope

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.inp(x)
        for block in self.blocks:
            h = h + block(self.drop(F.leaky_relu(h, self.slope)))
        return self.out(self.drop(F.leaky_relu(h, self.slope))).squeeze(-1)


class SemanticDiscriminator(nn.Module):
    """adapter -> pseudo-sequence -> frozen backbone -> layer combination -> head."""

    def __init__(self, embed_dim: int, hidden: int = 64, layers=(7, 9, 11, 12), depth: int = 12,
                 heads: int = 4, seq_len: int = 4, dropout: float = 0.1, backbone=None,
                 backbone_seed: int = 0):
        super().__init__()
        self.adapter = Adapter(embed_dim, hidden, dropout)
        # learned offsets turn the single adapted vector into a short sequence
        self.positions = nn.Parameter(0.1 * torch.randn(seq_len, hidden))
        self.backbone = backbone if backbone is not None else StubBackbone(hidden, depth, backbone_seed)
        self.combination = LayerCombination(layers, hidden)
        self.pool = MultiHeadAttentivePooling(hidden, heads)
        self.head = ResidualHead(heads * hidden, hidden, dropout=dropout)

    def features(self, e: torch.Tensor) -> torch.Tensor:
        seq = self.adapter(e)[:, None, :] + self.positions[None]
        return combine_layers(self.backbone(seq), self.combination, self.pool)

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.head(self.features(e)))


class PlainDiscriminator(nn.Module):
    """Three spectrally normalised fully connected layers on the raw embedding."""

    def __init__(self, embed_dim: int, hidden: int = 64, dropout: float = 0.1, slope: float = 0.2):
        super().__init__()
        self.fc1 = SNLinear(embed_dim, hidden)
        self.fc2 = SNLinear(hidden, hidden)
        self.fc3 = SNLinear(hidden, 1)
        self.drop = nn.Dropout(dropout)
        self.slope = slope

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        h = self.drop(F.leaky_relu(self.fc1(e), self.slope))
        h = self.drop(F.leaky_relu(self.fc2(h), self.slope))
        return torch.sigmoid(self.fc3(h).squeeze(-1))


def build_discriminator(cfg, embed_dim: int | None = None) -> nn.Module | None:
    embed_dim = embed_dim or cfg.embed_dim
    if not cfg.uses_adversary:
        return None
    if cfg.uses_semantic_discriminator:
        return SemanticDiscriminator(
            embed_dim, cfg.disc_hidden, cfg.backbone_layers, cfg.backbone_depth,
            cfg.pool_heads, cfg.pseudo_seq_len, cfg.dropout, backbone_seed=cfg.seed,
        )
    return PlainDiscriminator(embed_dim, cfg.disc_hidden, cfg.dropout)


def discriminate(e: torch.Tensor, model: nn.Module) -> torch.Tensor:
    """Probability that each embedding row is real, shape [B]."""
    return model(e)


def trainable_parameters(model: nn.Module):
    return [p for p in model.parameters() if p.requires_grad]
