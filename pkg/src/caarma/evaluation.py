"""Zero-shot verification scoring: cosine trials, EER, minDCF and accuracy.

A trial is accepted when ``score >= threshold``. Thresholds are swept over
every distinct score plus +inf (reject everything).
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .datamodel import ManifestEntry, TrialList
from .errors import DegenerateTrialsError, MissingUtteranceError


@dataclass(frozen=True)
class ScoredTrials:
    scores: np.ndarray  # float64 [N]
    labels: np.ndarray  # bool [N], True = target

    def __post_init__(self):
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels differ in length")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("non-finite trial score")

    @classmethod
    def from_lists(cls, target_scores, nontarget_scores) -> ScoredTrials:
        tar = np.asarray(target_scores, dtype=np.float64)
        non = np.asarray(nontarget_scores, dtype=np.float64)
        return cls(np.concatenate([tar, non]),
                   np.concatenate([np.ones(tar.size, bool), np.zeros(non.size, bool)]))


def _vec(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def cosine(a, b) -> float:
    a, b = _vec(a), _vec(b)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def score_trials(trials: TrialList, embeddings: dict) -> ScoredTrials:
    scores, labels = [], []
    for is_target, enroll, test in trials.trials:
        for uid in (enroll, test):
            if uid not in embeddings:
                raise MissingUtteranceError(uid)
        scores.append(cosine(embeddings[enroll], embeddings[test]))
        labels.append(bool(is_target))
    return ScoredTrials(np.array(scores, dtype=np.float64), np.array(labels, dtype=bool))


def _error_counts(st: ScoredTrials):
    """Thresholds and the miss / false-accept counts at each of them."""
    tar = np.sort(st.scores[st.labels])
    non = np.sort(st.scores[~st.labels])
    if tar.size == 0 or non.size == 0:
        raise DegenerateTrialsError("need at least one target and one nontarget trial")
    thresholds = np.append(np.unique(st.scores), np.inf)
    miss = np.searchsorted(tar, thresholds, side="left")
    fa = non.size - np.searchsorted(non, thresholds, side="left")
    return thresholds, miss, fa, tar.size, non.size


def compute_eer(st: ScoredTrials) -> tuple[float, float]:
    """Equal error rate and the threshold where it occurs.

    Interpolates linearly between adjacent ROC points when the miss and
    false-accept rates never coincide exactly.
    """
    thresholds, miss, fa, n_tar, n_non = _error_counts(st)
    # sign of P_miss - P_fa in exact integer arithmetic; nondecreasing in the threshold
    diff = miss * n_non - fa * n_tar
    k = int(np.flatnonzero(diff >= 0)[0])
    if diff[k] == 0:
        return float(Fraction(int(miss[k]), n_tar)), float(thresholds[k])
    fa_a, miss_a = Fraction(int(fa[k - 1]), n_non), Fraction(int(miss[k - 1]), n_tar)
    fa_b, miss_b = Fraction(int(fa[k]), n_non), Fraction(int(miss[k]), n_tar)
    gap_a, gap_b = fa_a - miss_a, fa_b - miss_b
    a = gap_a / (gap_a - gap_b)
    eer = fa_a + a * (fa_b - fa_a)
    t_lo, t_hi = thresholds[k - 1], thresholds[k]
    threshold = t_lo if not np.isfinite(t_hi) else t_lo + float(a) * (t_hi - t_lo)
    return float(eer), float(threshold)


def compute_mindcf(st: ScoredTrials, p_target: float = 0.01, c_miss: float = 1.0,
                   c_fa: float = 1.0) -> float:
    """Minimum detection cost, normalised by the cheaper trivial decision."""
    _, miss, fa, n_tar, n_non = _error_counts(st)
    p_miss = miss / n_tar
    p_fa = fa / n_non
    dcf = c_miss * p_miss * p_target + c_fa * p_fa * (1 - p_target)
    return float(np.min(dcf) / min(c_miss * p_target, c_fa * (1 - p_target)))


def identification_accuracy(logits, targets) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the target."""
    logits = _vec(logits)
    targets = np.asarray(targets if not hasattr(targets, "numpy") else targets.numpy())
    if logits.shape[0] < 1:
        raise ValueError("need at least one row")
    return float(np.mean(np.argmax(logits, axis=1) == targets))


def build_trials(entries: list[ManifestEntry], n_trials: int, seed: int) -> TrialList:
    """Balanced random trial list (half target, half nontarget) over distinct utterance pairs."""
    rng = np.random.default_rng([seed, 2])
    by_spk: dict[str, list[str]] = {}
    for e in entries:
        by_spk.setdefault(e.speaker, []).append(e.utt_id)
    speakers = sorted(by_spk)
    multi = [s for s in speakers if len(by_spk[s]) >= 2]
    if len(speakers) < 2 or not multi:
        raise DegenerateTrialsError("need two speakers, one with at least two utterances")
    n_target = n_trials // 2
    seen, trials = set(), []

    def add(flag, a, b):
        key = (min(a, b), max(a, b))
        if key in seen:
            return False
        seen.add(key)
        trials.append((flag, a, b))
        return True

    made, attempts = 0, 0
    while made < n_target and attempts < 100 * n_trials:
        attempts += 1
        spk = multi[rng.integers(len(multi))]
        a, b = rng.choice(len(by_spk[spk]), size=2, replace=False)
        made += add(True, by_spk[spk][a], by_spk[spk][b])
    made, attempts = 0, 0
    while made < n_trials - n_target and attempts < 100 * n_trials:
        attempts += 1
        s1, s2 = rng.choice(len(speakers), size=2, replace=False)
        u1 = by_spk[speakers[s1]][rng.integers(len(by_spk[speakers[s1]]))]
        u2 = by_spk[speakers[s2]][rng.integers(len(by_spk[speakers[s2]]))]
        made += add(False, u1, u2)
    return TrialList(tuple(trials))


def summarize(st: ScoredTrials, cfg) -> dict:
    eer, threshold = compute_eer(st)
    return {
        "eer": eer,
        "mindcf": compute_mindcf(st, cfg.mindcf_p_target, cfg.mindcf_c_miss, cfg.mindcf_c_fa),
        "threshold": threshold,
        "n_trials": int(st.scores.size),
        "n_target": int(st.labels.sum()),
        "n_nontarget": int((~st.labels).sum()),
    }


def write_scores(trials: TrialList, st: ScoredTrials, path) -> None:
    """One line per trial: ``enroll_id test_id score label``."""
    lines = [f"{a} {b} {s!r} {int(t)}" for (t, a, b), s in zip(trials.trials, st.scores.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")
