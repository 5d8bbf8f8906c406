"""Embedding encoders and the cosine classification head."""

from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import ClassifierWeights
from .errors import DegenerateError, DimensionError

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12


class ReferenceEncoder(nn.Module):
    """Small frame encoder: two temporal convolutions, one self-attention block,
    mean pooling over frames and a linear projection to the embedding.

    Input is ``[B, T, n_mels]`` for any T >= 1. There is no dropout and no batch
    statistics, so outputs are deterministic and independent across the batch.
    """

    def __init__(self, n_mels: int = 80, channels: int = 64, embed_dim: int = 32, heads: int = 4):
        super().__init__()
        self.n_mels = n_mels
        self.embed_dim = embed_dim
        self.conv1 = nn.Conv1d(n_mels, channels, kernel_size=5, padding=2)
        self.conv2 = nn.Conv1d(channels, channels, kernel_size=3, padding=2, dilation=2)
        self.norm1 = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(channels)
        self.proj = nn.Linear(channels, embed_dim)
        self.num_parameters = sum(p.numel() for p in self.parameters())
        logger.debug("ReferenceEncoder with %d parameters", self.num_parameters)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.n_mels:
            raise DimensionError(f"expected {self.n_mels} filterbank dims, got {x.shape[-1]}")
        x = x - x.mean(dim=1, keepdim=True)
        h = F.relu(self.conv1(x.transpose(1, 2)))
        h = h + F.relu(self.conv2(h))
        h = self.norm1(h.transpose(1, 2))
        a, _ = self.attn(h, h, h, need_weights=False)
        h = self.norm2(h + a)
        return self.proj(h.mean(dim=1))


class ClassificationHead(nn.Module):
    """Class anchors ``W`` of shape [d, C]; columns are normalised only inside the logits."""

    def __init__(self, embed_dim: int, num_classes: int):
        super().__init__()
        self.W = nn.Parameter(torch.randn(embed_dim, num_classes))

    @property
    def num_classes(self) -> int:
        return self.W.shape[1]

    def weights(self) -> ClassifierWeights:
        return ClassifierWeights(self.W)

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        return cosine_logits(e, self.W)


def cosine_logits(e: torch.Tensor, W) -> torch.Tensor:
    """Cosine similarity between each row of ``e`` [B, d] and each column of ``W`` [d, C]."""
    if isinstance(W, ClassifierWeights):
        W = W.W
    if e.shape[-1] != W.shape[0]:
        raise DimensionError(f"embedding dim {e.shape[-1]} != weight dim {W.shape[0]}")
    e_norm = e.norm(dim=1, keepdim=True)
    w_norm = W.norm(dim=0, keepdim=True)
    if e.shape[0] and float(e_norm.detach().min()) < NORM_EPS:
        raise DegenerateError("zero-norm embedding row")
    if W.shape[1] and float(w_norm.detach().min()) < NORM_EPS:
        raise DegenerateError("zero-norm weight column")
    return ((e / e_norm) @ (W / w_norm)).clamp(-1.0, 1.0)


def as_frames(frames) -> torch.Tensor:
    """Accept an FbankMatrix, ndarray or tensor of shape [T, F] or [B, T, F]."""
    frames = getattr(frames, "frames", frames)
    if isinstance(frames, np.ndarray):
        frames = torch.from_numpy(np.ascontiguousarray(frames))
    return frames


@torch.no_grad()
def encode(encoder: nn.Module, frames) -> torch.Tensor:
    """Inference-mode embedding of a single utterance's frames, shape [d]."""
    x = as_frames(frames)
    param = next(encoder.parameters())
    if x.dim() != 2:
        raise DimensionError(f"expected [T, F] frames, got shape {tuple(x.shape)}")
    was_training = encoder.training
    encoder.eval()
    try:
        return encoder(x.to(param.dtype)[None])[0]
    finally:
        encoder.train(was_training)
