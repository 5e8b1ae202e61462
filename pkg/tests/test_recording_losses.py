import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from genreplay.errors import ConfigurationError, DegenerateBatchError
from genreplay.models import BNStats
from genreplay.recording import (
    BNStatCollector,
    GeneratedBatch,
    RecordingLossWeights,
    bn_alignment_loss,
    class_diversity_loss,
    one_hot_loss,
    pair_diversity_loss,
    recording_loss,
    sample_pairs,
)


def batch_of(rows):
    return GeneratedBatch.from_probabilities(rows)


def bn(mean, var):
    return BNStats(torch.tensor(mean, dtype=torch.float64), torch.tensor(var, dtype=torch.float64))


def stats(mean, var):
    return (torch.tensor(mean, dtype=torch.float64), torch.tensor(var, dtype=torch.float64))


class TestOneHotLoss:
    def test_exact_one_hot_rows_give_zero(self):
        rows = torch.eye(4, dtype=torch.float64)
        assert float(one_hot_loss(batch_of(rows))) == pytest.approx(0.0, abs=1e-12)

    def test_uniform_rows(self):
        rows = torch.full((3, 20), 1 / 20, dtype=torch.float64)
        assert float(one_hot_loss(batch_of(rows))) == pytest.approx(math.log(20), rel=1e-9)

    def test_single_row(self):
        assert float(one_hot_loss(batch_of([[0.7, 0.2, 0.1]]))) == pytest.approx(-math.log(0.7), rel=1e-9)
        assert float(one_hot_loss(batch_of([[0.7, 0.2, 0.1]]))) == pytest.approx(0.3567, abs=1e-4)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (6, 5), elements=st.floats(-8, 8)))
    def test_non_negative_and_matches_oracle(self, logits):
        b = GeneratedBatch(None, torch.from_numpy(logits))
        rows = [oracles.softmax(list(r)) for r in logits]
        assert float(one_hot_loss(b)) >= 0
        assert float(one_hot_loss(b)) == pytest.approx(oracles.one_hot_loss(rows), rel=1e-6, abs=1e-12)

    def test_zero_only_for_one_hot(self):
        # a row with any mass off its argmax must give a strictly positive loss
        rows = torch.eye(3, dtype=torch.float64)
        rows[1] = torch.tensor([0.01, 0.98, 0.01], dtype=torch.float64)
        assert float(one_hot_loss(batch_of(rows))) > 0


class TestClassDiversityLoss:
    def test_uniform_mean(self):
        rows = torch.eye(20, dtype=torch.float64)
        assert float(class_diversity_loss(batch_of(rows))) == pytest.approx(-math.log(20), rel=1e-9)

    def test_point_mass(self):
        rows = torch.zeros(5, 4, dtype=torch.float64)
        rows[:, 2] = 1
        assert float(class_diversity_loss(batch_of(rows))) == pytest.approx(0.0, abs=1e-9)

    def test_two_classes(self):
        assert float(class_diversity_loss(batch_of([[1.0, 0.0], [0.0, 1.0]]))) == pytest.approx(
            -math.log(2), rel=1e-9
        )

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (7, 4), elements=st.floats(-6, 6)))
    def test_range_and_oracle(self, logits):
        b = GeneratedBatch(None, torch.from_numpy(logits))
        v = float(class_diversity_loss(b))
        assert -math.log(4) - 1e-9 <= v <= 1e-12
        rows = [oracles.softmax(list(r)) for r in logits]
        assert v == pytest.approx(oracles.class_diversity_loss(rows), rel=1e-6, abs=1e-12)

    def test_decreases_toward_uniform(self):
        skewed = torch.tensor([[0.9, 0.05, 0.05]] * 4, dtype=torch.float64)
        uniform = torch.full((4, 3), 1 / 3, dtype=torch.float64)
        vals = [float(class_diversity_loss(batch_of((1 - a) * skewed + a * uniform))) for a in (0.0, 0.4, 0.8)]
        assert vals[0] > vals[1] > vals[2]


class TestBNAlignmentLoss:
    def test_equal_statistics(self):
        stored = [bn([0.1, -0.2], [1.0, 2.0]), bn([0.0], [0.5])]
        batch = [stats([0.1, -0.2], [1.0, 2.0]), stats([0.0], [0.5])]
        assert float(bn_alignment_loss(batch, stored)) == 0.0

    def test_scalar_mean_shift(self):
        assert float(bn_alignment_loss([stats([1.0], [1.0])], [bn([0.0], [1.0])])) == pytest.approx(1.0)

    def test_euclidean_norm(self):
        got = bn_alignment_loss([stats([3.0, 4.0], [1.0, 1.0])], [bn([0.0, 0.0], [1.0, 1.0])])
        assert float(got) == pytest.approx(5.0, rel=1e-12)

    def test_layer_count_mismatch(self):
        with pytest.raises(ConfigurationError):
            bn_alignment_loss([stats([0.0], [1.0])], [bn([0.0], [1.0]), bn([0.0], [1.0])])

    def test_channel_mismatch(self):
        with pytest.raises(ConfigurationError):
            bn_alignment_loss([stats([0.0, 1.0], [1.0, 1.0])], [bn([0.0], [1.0])])

    def test_monotone_in_mean_shift(self):
        stored = [bn([0.0, 0.0, 0.0], [1.0, 1.0, 1.0])]
        vals = [float(bn_alignment_loss([stats([s] * 3, [1.0] * 3)], stored)) for s in (0.0, 0.5, 1.0, 2.0)]
        assert all(a < b for a, b in zip(vals, vals[1:]))

    def test_matches_oracle(self, rng):
        stored_np = [(rng.normal(size=c), rng.uniform(0.1, 2, size=c)) for c in (3, 5)]
        batch_np = [(rng.normal(size=c), rng.uniform(0.1, 2, size=c)) for c in (3, 5)]
        got = bn_alignment_loss([stats(m, v) for m, v in batch_np], [bn(m, v) for m, v in stored_np])
        want = oracles.bn_alignment_loss(
            [(list(m), list(v)) for m, v in batch_np], [(list(m), list(v)) for m, v in stored_np]
        )
        assert float(got) == pytest.approx(want, rel=1e-9)

    def test_zero_on_batch_with_copied_statistics(self):
        # build activations whose biased statistics equal the stored ones exactly
        torch.manual_seed(0)
        conv = torch.nn.Conv2d(2, 3, 1).double()
        bnl = torch.nn.BatchNorm2d(3).double()
        bnl.eval()
        x = torch.randn(8, 2, 4, 4, dtype=torch.float64)
        model = torch.nn.Sequential(conv, bnl)
        with BNStatCollector(model) as col:
            model(x)
        (m, v), = col.stats
        stored = [BNStats(m.detach().clone(), v.detach().clone())]
        assert bn_alignment_loss(col.stats, stored).item() == pytest.approx(0.0, abs=1e-12)

    def test_collector_uses_biased_variance(self):
        layer = torch.nn.BatchNorm2d(1).double().eval()
        x = torch.tensor([1.0, 3.0], dtype=torch.float64).view(2, 1, 1, 1)
        with BNStatCollector(layer) as col:
            layer(x)
        (m, v), = col.stats
        assert float(m) == 2.0 and float(v) == 1.0


class TestPairDiversityLoss:
    def test_identical_samples(self, rng):
        rows = torch.tensor([[0.3, 0.7]] * 10, dtype=torch.float64)
        assert float(pair_diversity_loss(batch_of(rows), 200, rng)) == pytest.approx(0.0, abs=1e-12)

    def test_two_point_closed_form(self, rng):
        got = float(pair_diversity_loss(batch_of([[0.9, 0.1], [0.1, 0.9]]), 200, rng))
        assert got == pytest.approx(-0.8 * math.log(9), rel=1e-9)
        assert got == pytest.approx(-1.7578, abs=1e-4)

    def test_symmetric_under_swap(self):
        rows = torch.tensor([[0.6, 0.3, 0.1], [0.2, 0.2, 0.6]], dtype=torch.float64)
        a = pair_diversity_loss(batch_of(rows), 1, np.random.default_rng(0))
        b = pair_diversity_loss(batch_of(rows.flip(0)), 1, np.random.default_rng(0))
        assert float(a) == pytest.approx(float(b), rel=1e-12)

    def test_degenerate_batch(self, rng):
        with pytest.raises(DegenerateBatchError):
            pair_diversity_loss(batch_of([[0.5, 0.5]]), 200, rng)

    def test_pairs_are_distinct_and_unordered(self):
        first, second = sample_pairs(30, 200, np.random.default_rng(3))
        pairs = set(zip(first.tolist(), second.tolist()))
        assert len(pairs) == 200
        assert all(i < j for i, j in pairs)

    def test_pair_count_capped_by_batch(self):
        first, _ = sample_pairs(5, 200, np.random.default_rng(3))
        assert len(first) == 10

    def test_matches_oracle_on_sampled_pairs(self):
        g = np.random.default_rng(7)
        logits = g.normal(size=(12, 4)) * 3
        b = GeneratedBatch(None, torch.from_numpy(logits))
        first, second = sample_pairs(12, 20, np.random.default_rng(11))
        rows = [oracles.softmax(list(r)) for r in logits]
        want = oracles.pair_diversity(rows, list(zip(first, second)))
        got = pair_diversity_loss(b, 20, np.random.default_rng(11))
        assert float(got) == pytest.approx(want, rel=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (6, 3), elements=st.floats(-5, 5)))
    def test_non_positive(self, logits):
        b = GeneratedBatch(None, torch.from_numpy(logits))
        assert float(pair_diversity_loss(b, 10, np.random.default_rng(0))) <= 1e-12

    def test_pixel_space_variant(self, rng):
        imgs = torch.rand(6, 1, 4, 4, dtype=torch.float64) * 2 - 1
        b = GeneratedBatch(imgs, torch.zeros(6, 3, dtype=torch.float64))
        assert float(pair_diversity_loss(b, 10, rng, space="pixel")) < 0
        same = GeneratedBatch(imgs[:1].repeat(6, 1, 1, 1), torch.zeros(6, 3, dtype=torch.float64))
        assert float(pair_diversity_loss(same, 10, rng, space="pixel")) == pytest.approx(0.0, abs=1e-12)


class TestRecordingLoss:
    def _batch(self):
        g = np.random.default_rng(5)
        logits = torch.from_numpy(g.normal(size=(8, 3)))
        return GeneratedBatch(None, logits, [stats([0.5, 0.1], [1.2, 0.9])])

    def test_weighted_sum(self):
        b = self._batch()
        stored = [bn([0.0, 0.0], [1.0, 1.0])]
        w = RecordingLossWeights(5, 20, 0.1, pair_count=10)
        total, t = recording_loss(b, stored, w, np.random.default_rng(0))
        assert t["total"] == pytest.approx(t["oh"] + 5 * t["cd"] + 20 * t["bn"] + 0.1 * t["div"], abs=1e-9)
        assert float(total) == pytest.approx(t["total"], abs=1e-12)
        assert t["oh"] == pytest.approx(float(one_hot_loss(b)))
        assert t["bn"] == pytest.approx(float(bn_alignment_loss(b.bn_stats, stored)))

    def test_zero_weights_leave_one_hot_term(self):
        b = self._batch()
        w = RecordingLossWeights(0, 0, 0, pair_count=10)
        total, t = recording_loss(b, [bn([0.0, 0.0], [1.0, 1.0])], w, np.random.default_rng(0))
        assert float(total) == pytest.approx(t["oh"], abs=1e-15)

    def test_published_weights_are_defaults(self):
        w = RecordingLossWeights()
        assert (w.lambda1, w.lambda2, w.lambda3, w.pair_count) == (5.0, 20.0, 0.1, 200)

    def test_bn_term_required_when_weighted(self):
        b = GeneratedBatch(None, torch.zeros(4, 2, dtype=torch.float64))
        with pytest.raises(ConfigurationError):
            recording_loss(b, [], RecordingLossWeights(), np.random.default_rng(0))

    @pytest.mark.parametrize("kw", [{"lambda1": -1}, {"pair_count": 0}, {"div_space": "latent"}])
    def test_invalid_weights(self, kw):
        with pytest.raises(ConfigurationError):
            RecordingLossWeights(**kw)
