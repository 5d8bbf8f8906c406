"""Brute-force reference computations used to cross-check the fast paths.

Nothing here calls into the code it checks; each routine recomputes its
answer by direct enumeration.
"""

from __future__ import annotations

import math
from fractions import Fraction

import torch


def mixup_reference(e: torch.Tensor, labels, W: torch.Tensor):
    """Row-by-row synthetic-label mixup by exhaustive pair search.

    Returns ``(e_syn, y_syn, W_syn)`` with ``W_syn`` shaped [d, B].
    """
    y = [int(v) for v in labels]
    C = W.shape[1]
    cols = W.detach().double().t().tolist()
    e_rows, w_cols, y_syn, registry = [], [], [], {}
    for i in range(len(y)):
        l1 = y[i]
        best_label, best_dist = None, math.inf
        for j in range(len(y)):
            cand = y[j]
            if cand == l1:
                continue
            dist = math.dist(cols[l1], cols[cand])
            if dist < best_dist or (dist == best_dist and cand < best_label):
                best_label, best_dist = cand, dist
        l2 = best_label
        partner = y.index(l2)
        e_rows.append(0.5 * e[i] + 0.5 * e[partner])
        w_cols.append(0.5 * W[:, l1] + 0.5 * W[:, l2])
        key = (min(l1, l2), max(l1, l2))
        if key not in registry:
            registry[key] = len(registry)
        y_syn.append(C + registry[key])
    return torch.stack(e_rows), torch.tensor(y_syn), torch.stack(w_cols, dim=1)


def _counts(scores, labels, threshold):
    miss = fa = 0
    for s, is_target in zip(scores, labels):
        accepted = s >= threshold
        if is_target and not accepted:
            miss += 1
        elif not is_target and accepted:
            fa += 1
    return miss, fa


def eer_reference(scores, labels) -> float:
    """Equal error rate by sweeping every threshold with exact rational arithmetic."""
    scores = [float(s) for s in scores]
    labels = [bool(l) for l in labels]
    n_tar = sum(labels)
    n_non = len(labels) - n_tar
    if n_tar == 0 or n_non == 0:
        raise ValueError("degenerate trial set")
    points = []
    for t in sorted(set(scores)) + [math.inf]:
        miss, fa = _counts(scores, labels, t)
        points.append((Fraction(fa, n_non), Fraction(miss, n_tar)))
    prev = None
    for fa, miss in points:
        if miss == fa:
            return float(miss)
        if miss > fa:
            pfa, pmiss = prev
            # intersect the segment prev -> current with the diagonal
            a = (pfa - pmiss) / ((pfa - pmiss) - (fa - miss))
            return float(pfa + a * (fa - pfa))
        prev = (fa, miss)
    raise AssertionError("sweep never crossed the diagonal")


def mindcf_reference(scores, labels, p_target, c_miss=1.0, c_fa=1.0) -> float:
    scores = [float(s) for s in scores]
    labels = [bool(l) for l in labels]
    n_tar = sum(labels)
    n_non = len(labels) - n_tar
    best = math.inf
    for t in sorted(set(scores)) + [math.inf]:
        miss, fa = _counts(scores, labels, t)
        cost = c_miss * (miss / n_tar) * p_target + c_fa * (fa / n_non) * (1 - p_target)
        best = min(best, cost)
    return best / min(c_miss * p_target, c_fa * (1 - p_target))


def finite_difference_grads(loss_fn, params, step: float = 1e-5):
    """Central differences of scalar ``loss_fn()`` w.r.t. each tensor in ``params``."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + step
                up = float(loss_fn())
                flat[k] = orig - step
                down = float(loss_fn())
                flat[k] = orig
                gflat[k] = (up - down) / (2 * step)
            grads.append(g)
    return grads


def gradient_relative_error(loss_fn, params, step: float = 1e-5) -> float:
    """max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8) over all entries,
    measured per tensor on the largest-magnitude scale."""
    for p in params:
        p.grad = None
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    numeric = finite_difference_grads(loss_fn, params, step)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = torch.zeros_like(n) if a is None else a
        scale = max(a.abs().max().item(), n.abs().max().item(), 1e-8)
        worst = max(worst, (a - n).abs().max().item() / scale)
    return worst


def sampled_gradient_error(loss_fn, params, n_coords: int, gen: torch.Generator,
                           step: float = 1e-5) -> float:
    """Like ``gradient_relative_error`` but on ``n_coords`` randomly chosen entries
    (drawn uniformly over all entries of all ``params``)."""
    for p in params:
        p.grad = None
    analytic = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    sizes = torch.tensor([p.numel() for p in params])
    offsets = torch.cumsum(sizes, 0) - sizes
    picks = torch.randperm(int(sizes.sum()), generator=gen)[:n_coords]
    a_vals, n_vals = [], []
    with torch.no_grad():
        for flat_idx in picks.tolist():
            t = int(torch.searchsorted(offsets, flat_idx, right=True)) - 1
            k = flat_idx - int(offsets[t])
            flat = params[t].view(-1)
            orig = flat[k].item()
            flat[k] = orig + step
            up = float(loss_fn())
            flat[k] = orig - step
            down = float(loss_fn())
            flat[k] = orig
            a = analytic[t]
            a_vals.append(0.0 if a is None else a.reshape(-1)[k].item())
            n_vals.append((up - down) / (2 * step))
    a_vals, n_vals = torch.tensor(a_vals, dtype=torch.float64), torch.tensor(n_vals, dtype=torch.float64)
    scale = max(a_vals.abs().max().item(), n_vals.abs().max().item(), 1e-8)
    return (a_vals - n_vals).abs().max().item() / scale
