"""Synthetic-label mixup: new classes as midpoints of weight-space neighbours.

Every batch row is mixed with the first row of its label's nearest neighbour
class (nearest by raw weight columns, searched among labels in the batch).
The unordered label pair becomes a fresh class id, ``C + k`` for the k-th
distinct pair seen in the batch.
"""

from __future__ import annotations

import torch

from .datamodel import ClassifierWeights, EmbeddingBatch, SyntheticBatch
from .errors import SingleClassError

# fixed mixing weight; tests and the self-test fault hook read it from here
_MIX_WEIGHT = 0.5


def _as_matrix(W) -> torch.Tensor:
    return W.W if isinstance(W, ClassifierWeights) else W


def compute_neighbors(labels, W) -> dict[int, int]:
    """Nearest other label for each label, by L2 distance between raw weight columns.

    Ties go to the smallest label.
    """
    labels = sorted({int(l) for l in labels})
    if len(labels) < 2:
        raise SingleClassError(f"need two distinct labels, got {labels}")
    cols = _as_matrix(W).detach().to(torch.float64)[:, labels]
    diff = cols[:, :, None] - cols[:, None, :]
    dist2 = (diff * diff).sum(dim=0)
    dist2.fill_diagonal_(float("inf"))
    # argmin returns the first minimum, i.e. the smallest label on ties
    nearest = torch.argmin(dist2, dim=1).tolist()
    return {l: labels[k] for l, k in zip(labels, nearest)}


def sl_mixup(batch: EmbeddingBatch, W, cfg=None) -> SyntheticBatch:
    """Mix each row with its neighbour class and register synthetic labels.

    Gradients flow into both the embeddings and ``W``.
    """
    W = _as_matrix(W)
    C = W.shape[1]
    y = batch.labels.tolist()
    neighbors = compute_neighbors(y, W)

    first_row = {}
    for i, lab in enumerate(y):
        first_row.setdefault(lab, i)

    registry: dict[tuple[int, int], int] = {}
    pair_map, partner, syn_labels = [], [], []
    for i, l1 in enumerate(y):
        l2 = neighbors[l1]
        key = (min(l1, l2), max(l1, l2))
        pos = registry.setdefault(key, len(registry))
        pair_map.append((l1, l2))
        partner.append(first_row[l2])
        syn_labels.append(C + pos)

    w = _MIX_WEIGHT
    e = batch.embeddings
    idx = torch.tensor(partner, dtype=torch.long)
    own = torch.tensor([p[0] for p in pair_map], dtype=torch.long)
    other = torch.tensor([p[1] for p in pair_map], dtype=torch.long)
    e_syn = w * e + (1 - w) * e[idx]
    W_syn = w * W[:, own] + (1 - w) * W[:, other]
    return SyntheticBatch(
        embeddings=e_syn,
        labels=torch.tensor(syn_labels, dtype=torch.long),
        weights=W_syn,
        pair_map=tuple(pair_map),
        partner_index=tuple(partner),
        num_real_classes=C,
        pairs=tuple(registry),
    )
