import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from caarma import mixup
from caarma.datamodel import ClassifierWeights, EmbeddingBatch, synthetic_violations
from caarma.errors import SingleClassError
from caarma.mixup import compute_neighbors, sl_mixup
from caarma.oracles import mixup_reference

f64 = torch.float64


def example_weights():
    # columns w1, w2, w3 at indices 1, 2, 3; column 0 unused
    return torch.tensor([[9.0, 1.0, 0.0, 0.9], [9.0, 0.0, 1.0, 0.1]], dtype=f64)


class TestNeighbors:
    def test_nearest_by_column_distance(self):
        assert compute_neighbors([1, 2, 3], example_weights())[1] == 3

    def test_two_labels_pair_up(self):
        assert compute_neighbors([2, 1, 1], example_weights()) == {1: 2, 2: 1}

    def test_tie_goes_to_smallest_label(self):
        W = torch.tensor([[0.0, 1.0, -1.0], [0.0, 0.0, 0.0]], dtype=f64)
        assert compute_neighbors([0, 1, 2], W)[0] == 1
        assert compute_neighbors([2, 0, 1], W)[0] == 1

    def test_only_batch_labels_are_candidates(self):
        # label 0 is closest to label 1 overall, but 0 is absent from the batch
        W = torch.tensor([[0.0, 0.1, 5.0, 9.0]], dtype=f64)
        assert compute_neighbors([1, 2, 3], W)[1] == 2

    def test_single_class_rejected(self):
        with pytest.raises(SingleClassError):
            compute_neighbors([4, 4], torch.randn(3, 5))


class TestSlMixup:
    def test_midpoint_example(self):
        W = example_weights()
        e = torch.tensor([[2.0, 0.0], [0.0, 2.0], [5.0, 5.0]], dtype=f64)
        syn = sl_mixup(EmbeddingBatch(e, torch.tensor([1, 3, 2])), W)
        assert syn.pair_map[0] == (1, 3)
        assert syn.embeddings[0].tolist() == [1.0, 1.0]
        assert syn.weights[:, 0].tolist() == pytest.approx([0.95, 0.05])

    def test_two_rows_share_one_label(self):
        W = torch.randn(3, 12, dtype=f64)
        syn = sl_mixup(EmbeddingBatch(torch.randn(2, 3, dtype=f64), torch.tensor([5, 9])), W)
        assert syn.labels.tolist() == [12, 12]
        assert syn.pairs == ((5, 9),)

    def test_small_batch_matches_brute_force(self):
        gen = torch.Generator().manual_seed(0)
        e = torch.randn(6, 4, generator=gen, dtype=f64)
        W = torch.randn(4, 3, generator=gen, dtype=f64)
        labels = torch.tensor([0, 1, 2, 2, 1, 0])
        syn = sl_mixup(EmbeddingBatch(e, labels), W)
        e_ref, y_ref, w_ref = mixup_reference(e, labels, W)
        assert torch.equal(syn.embeddings, e_ref)
        assert torch.equal(syn.labels, y_ref)
        assert torch.equal(syn.weights, w_ref)

    def test_float32_matches_brute_force(self):
        gen = torch.Generator().manual_seed(1)
        e = torch.randn(8, 5, generator=gen)
        W = torch.randn(5, 4, generator=gen)
        labels = torch.tensor([3, 1, 1, 0, 2, 3, 0, 2])
        syn = sl_mixup(EmbeddingBatch(e, labels), W)
        e_ref, y_ref, w_ref = mixup_reference(e, labels, W)
        assert torch.equal(syn.embeddings, e_ref) and torch.equal(syn.weights, w_ref)

    def test_gradients_reach_embeddings_and_weights(self):
        e = torch.randn(4, 3, dtype=f64, requires_grad=True)
        W = torch.randn(3, 3, dtype=f64, requires_grad=True)
        syn = sl_mixup(EmbeddingBatch(e, torch.tensor([0, 1, 2, 0])), W)
        (syn.embeddings.sum() + syn.weights.sum()).backward()
        assert e.grad.abs().sum() > 0 and W.grad.abs().sum() > 0

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 16), st.integers(2, 8), st.integers(1, 16), st.integers(0, 2**31 - 1))
    def test_invariants(self, B, C, d, seed):
        gen = torch.Generator().manual_seed(seed)
        labels = torch.randint(0, C, (B,), generator=gen)
        if labels.unique().numel() < 2:
            labels[0] = (labels[1] + 1) % C
        e = torch.randn(B, d, generator=gen)
        W = torch.randn(d, C, generator=gen)
        syn = sl_mixup(EmbeddingBatch(e, labels), W)
        assert synthetic_violations(EmbeddingBatch(e, labels), ClassifierWeights(W), syn) == []
        assert syn.size == B
        assert int(syn.labels.min()) >= C
        # labels are C + 0..k-1 with no gaps, one per distinct unordered pair
        assert sorted(set(syn.labels.tolist())) == list(range(C, C + len(syn.pairs)))
        for (l1, l2), lab in zip(syn.pair_map, syn.labels.tolist()):
            assert syn.pairs[lab - C] == (min(l1, l2), max(l1, l2))

    def test_wrong_mix_weight_breaks_midpoint(self, monkeypatch):
        monkeypatch.setattr(mixup, "_MIX_WEIGHT", 0.6)
        e = torch.randn(4, 3, dtype=f64)
        W = torch.randn(3, 2, dtype=f64)
        batch = EmbeddingBatch(e, torch.tensor([0, 1, 0, 1]))
        assert "midpoint" in synthetic_violations(batch, ClassifierWeights(W), sl_mixup(batch, W))

    def test_pair_columns_follow_registry(self):
        W = torch.randn(3, 4, dtype=f64)
        syn = sl_mixup(EmbeddingBatch(torch.randn(5, 3, dtype=f64), torch.tensor([0, 1, 2, 3, 1])), W)
        cols = syn.pair_columns(W)
        for i, lab in enumerate(syn.labels.tolist()):
            assert torch.equal(cols[:, lab - 4], syn.weights[:, i])
