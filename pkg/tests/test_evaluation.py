import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from caarma.datamodel import ManifestEntry, TrialList, desk_profile
from caarma.errors import DegenerateTrialsError, MissingUtteranceError
from caarma.evaluation import (
    ScoredTrials,
    build_trials,
    compute_eer,
    compute_mindcf,
    cosine,
    identification_accuracy,
    score_trials,
    summarize,
    write_scores,
)
from caarma.oracles import eer_reference, mindcf_reference


class TestCosine:
    def test_values(self):
        assert cosine([1.0, 2.0], [1.0, 2.0]) == pytest.approx(1.0)
        assert cosine([1.0, 2.0], [-1.0, -2.0]) == pytest.approx(-1.0)
        assert cosine(torch.tensor([1.0, 0.0]), np.array([1.0, 1.0])) == pytest.approx(0.70711, abs=1e-5)

    def test_score_trials(self):
        emb = {"a": torch.tensor([1.0, 0.0]), "b": torch.tensor([1.0, 1.0]), "c": torch.tensor([0.0, 1.0])}
        st_ = score_trials(TrialList(((True, "a", "b"), (False, "a", "c"))), emb)
        assert st_.scores.tolist() == pytest.approx([2 ** -0.5, 0.0])
        assert st_.labels.tolist() == [True, False]
        with pytest.raises(MissingUtteranceError) as err:
            score_trials(TrialList(((True, "a", "zz"), (False, "a", "c"))), emb)
        assert err.value.utt_id == "zz"


class TestEer:
    def test_perfect_separation(self):
        assert compute_eer(ScoredTrials.from_lists([0.9, 0.8], [0.7, 0.1]))[0] == 0.0

    def test_half(self):
        assert compute_eer(ScoredTrials.from_lists([0.9, 0.4], [0.6, 0.1]))[0] == 0.5

    def test_inverted(self):
        assert compute_eer(ScoredTrials.from_lists([0.1, 0.2], [0.8, 0.9]))[0] == 1.0

    def test_degenerate(self):
        with pytest.raises(DegenerateTrialsError):
            compute_eer(ScoredTrials.from_lists([0.1, 0.2], []))

    def test_interpolated_threshold_lies_between_scores(self):
        st_ = ScoredTrials.from_lists([0.9, 0.5, 0.45], [0.6, 0.2, 0.1, 0.05])
        eer, thr = compute_eer(st_)
        assert eer == eer_reference(st_.scores, st_.labels)
        assert 0.0 < eer < 1.0 and 0.05 <= thr <= 0.9

    def test_exhaustive_labels(self):
        scores = np.random.default_rng(0).normal(size=8)
        for bits in itertools.product([False, True], repeat=8):
            labels = np.array(bits)
            if labels.all() or not labels.any():
                continue
            assert compute_eer(ScoredTrials(scores, labels))[0] == eer_reference(scores, labels)

    def test_ties(self):
        scores = np.array([0.5, 0.5, 0.5, 0.2, 0.8, 0.5])
        labels = np.array([True, False, True, False, True, False])
        assert compute_eer(ScoredTrials(scores, labels))[0] == eer_reference(scores, labels)


class TestMinDcf:
    def test_perfect(self):
        assert compute_mindcf(ScoredTrials.from_lists([0.9, 0.8], [0.1])) == 0.0

    def test_no_threshold_beats_trivial(self):
        assert compute_mindcf(ScoredTrials.from_lists([0.1], [0.9]), p_target=0.5) == 1.0

    def test_random_instance(self):
        rng = np.random.default_rng(1)
        scores = rng.normal(size=100)
        labels = rng.random(100) < 0.4
        for p in (0.01, 0.05, 0.5):
            got = compute_mindcf(ScoredTrials(scores, labels), p, 1.0, 1.0)
            assert got == mindcf_reference(scores, labels, p)
        got = compute_mindcf(ScoredTrials(scores, labels), 0.05, 10.0, 1.0)
        assert got == mindcf_reference(scores, labels, 0.05, 10.0, 1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(-500, 500), min_size=2, max_size=30), st.integers(0, 2**32 - 1))
    def test_monotone_invariance(self, scores, seed):
        # a 0.01 grid keeps the transform strictly increasing in floating point
        scores = np.array(scores) / 100
        labels = np.random.default_rng(seed).random(scores.size) < 0.5
        labels[0], labels[1] = True, False
        a = ScoredTrials(scores, labels)
        b = ScoredTrials(np.tanh(scores / 3) * 2 + 7, labels)
        assert abs(compute_eer(a)[0] - compute_eer(b)[0]) < 1e-12
        assert abs(compute_mindcf(a) - compute_mindcf(b)) < 1e-12
        assert 0.0 <= compute_mindcf(a) <= 1.0


class TestAccuracy:
    def test_counts(self):
        eye = np.eye(3)
        assert identification_accuracy(eye, [0, 1, 2]) == 1.0
        assert identification_accuracy(eye, [1, 2, 0]) == 0.0
        assert identification_accuracy(eye, [0, 1, 0]) == pytest.approx(2 / 3)

    def test_ties_take_lowest_index(self):
        assert identification_accuracy(np.array([[0.5, 0.5]]), [0]) == 1.0


class TestTrials:
    def entries(self):
        return [ManifestEntry(f"s{s}-u{u}", f"s{s}", "x") for s in range(5) for u in range(4)]

    def test_balanced_unique_and_deterministic(self):
        a = build_trials(self.entries(), 40, seed=3)
        b = build_trials(self.entries(), 40, seed=3)
        assert a == b
        assert sum(t for t, _, _ in a.trials) == 20 and len(a) == 40
        keys = {(min(x, y), max(x, y)) for _, x, y in a.trials}
        assert len(keys) == 40
        for is_target, x, y in a.trials:
            assert (x.split("-")[0] == y.split("-")[0]) == is_target and x != y

    def test_degenerate(self):
        with pytest.raises(DegenerateTrialsError):
            build_trials([ManifestEntry("a", "s", "x"), ManifestEntry("b", "s", "x")], 4, 0)

    def test_summary_and_score_file(self, tmp_path):
        trials = TrialList(((True, "a", "b"), (False, "a", "c")))
        st_ = ScoredTrials(np.array([0.25, -0.5]), np.array([True, False]))
        out = summarize(st_, desk_profile())
        assert out["eer"] == 0.0 and out["n_trials"] == 2 and out["n_target"] == 1
        assert set(out) == {"eer", "mindcf", "threshold", "n_trials", "n_target", "n_nontarget"}
        write_scores(trials, st_, tmp_path / "s.txt")
        assert (tmp_path / "s.txt").read_text() == "a b 0.25 1\na c -0.5 0\n"
