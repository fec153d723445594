"""Tests for negative sampling, the local/global constraints (against naive
double-loop references), summarization, and the combined penalty."""

import math

import numpy as np
import pytest

from infomaxqa.autodiff import Tensor, grad_check
from infomaxqa.mi import BilinearDiscriminator
from infomaxqa.model import EncodedExample
from infomaxqa.regularizer import (
    LocalPair,
    NegativeAssignment,
    RegularizerWeights,
    global_constraint,
    global_rest,
    local_constraint,
    qainfomax_loss,
    sample_local_pairs,
    shuffle_negatives,
    summarize,
)

TWO_LN_TWO = 1.3862943611198906


def make_disc(d, w=None, seed=0):
    disc = BilinearDiscriminator(d, np.random.default_rng(seed))
    if w is not None:
        disc.W.data = np.asarray(w, dtype=np.float64)
    return disc


def naive_constraint(W, x, ctx, neg_x, neg_ctx):
    """Pure-python double loop over pairs, mirroring the constraint formula."""
    def g(a, b):
        s = float(a @ W @ b)
        return 1.0 / (1.0 + math.exp(-s))

    t1 = sum(math.log(max(g(x, c), 1e-12)) for c in ctx) / len(ctx)
    t2 = sum(math.log(max(1.0 - g(x, c), 1e-12)) for c in neg_ctx) / (2 * len(neg_ctx))
    t3 = sum(math.log(max(1.0 - g(neg_x, c), 1e-12)) for c in ctx) / (2 * len(ctx))
    return t1 + t2 + t3


def random_batch(rng, size, d=6, min_passage=6, max_passage=14):
    batch = []
    for _ in range(size):
        k = int(rng.integers(2, 5))
        n = int(rng.integers(min_passage, max_passage))
        length = int(rng.integers(1, min(5, n) + 1))
        start = int(rng.integers(0, n - length + 1))
        batch.append(EncodedExample(
            r_q=Tensor(rng.normal(size=(k, d))),
            r_p=Tensor(rng.normal(size=(n, d))),
            span=(start, start + length - 1)))
    return batch


class TestShuffleNegatives:
    def test_batch_of_two_is_the_swap(self):
        a = shuffle_negatives(2, np.random.default_rng(0))
        np.testing.assert_array_equal(a.permutation, [1, 0])

    def test_batch_of_one_rejected(self):
        with pytest.raises(ValueError, match="size 1"):
            shuffle_negatives(1, np.random.default_rng(0))

    def test_no_fixed_points_over_many_draws(self):
        rng = np.random.default_rng(23)
        ident = np.arange(6)
        for _ in range(10000):
            perm = shuffle_negatives(6, rng).permutation
            assert not np.any(perm == ident)
            assert sorted(perm.tolist()) == list(range(6))

    def test_assignment_validation(self):
        with pytest.raises(ValueError, match="fixed points"):
            NegativeAssignment(np.array([0, 2, 1]))
        with pytest.raises(ValueError, match="permutation"):
            NegativeAssignment(np.array([1, 1, 0]))


class TestSampleLocalPairs:
    def test_window_clipped_at_passage_start(self):
        rng = np.random.default_rng(0)
        batch = random_batch(rng, 2, min_passage=8)
        batch[0] = EncodedExample(batch[0].r_q, batch[0].r_p, span=(0, 0))
        assignment = NegativeAssignment(np.array([1, 0]))
        pairs = sample_local_pairs(batch, assignment, rng, context_window=2)
        assert pairs[0].x_index == 0
        assert pairs[0].context_indices == (1, 2)

    def test_zero_window_uses_remaining_span_words(self):
        rng = np.random.default_rng(1)
        batch = random_batch(rng, 2, min_passage=8)
        batch[0] = EncodedExample(batch[0].r_q, batch[0].r_p, span=(2, 4))
        batch[1] = EncodedExample(batch[1].r_q, batch[1].r_p, span=(0, 2))
        assignment = NegativeAssignment(np.array([1, 0]))
        pairs = sample_local_pairs(batch, assignment, rng, context_window=0)
        expected = tuple(i for i in (2, 3, 4) if i != pairs[0].x_index)
        assert 2 <= pairs[0].x_index <= 4
        assert pairs[0].context_indices == expected

    def test_window_never_reaches_question(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            batch = random_batch(rng, 3)
            assignment = shuffle_negatives(3, rng)
            for p in sample_local_pairs(batch, assignment, rng, context_window=50):
                assert min(p.context_indices) >= 0

    def test_seeded_replay_is_identical(self):
        def run():
            rng = np.random.default_rng(11)
            batch = random_batch(rng, 4)
            assignment = shuffle_negatives(4, rng)
            return sample_local_pairs(batch, assignment, rng, context_window=5)

        first, second = run(), run()
        for a, b in zip(first, second):
            assert a.x_index == b.x_index
            assert a.context_indices == b.context_indices
            assert np.array_equal(a.x.data, b.x.data)
            assert np.array_equal(a.neg_context.data, b.neg_context.data)

    def test_single_example_batch_rejected(self):
        rng = np.random.default_rng(3)
        batch = random_batch(rng, 2)[:1]
        with pytest.raises(ValueError, match="at least 2"):
            sample_local_pairs(batch, NegativeAssignment(np.array([1, 0])), rng)

    def test_empty_context_rejected(self):
        rng = np.random.default_rng(4)
        r = Tensor(rng.normal(size=(1, 6)))
        batch = [EncodedExample(Tensor(rng.normal(size=(2, 6))), r, (0, 0)),
                 EncodedExample(Tensor(rng.normal(size=(2, 6))), r, (0, 0))]
        with pytest.raises(ValueError, match="empty context"):
            sample_local_pairs(batch, NegativeAssignment(np.array([1, 0])), rng,
                               context_window=0)


class TestLocalConstraint:
    def test_uninformative_discriminator_fixed_point(self):
        rng = np.random.default_rng(5)
        disc = make_disc(6, np.zeros((6, 6)))
        val = local_constraint(Tensor(rng.normal(size=(1, 6))),
                               Tensor(rng.normal(size=(4, 6))),
                               Tensor(rng.normal(size=(1, 6))),
                               Tensor(rng.normal(size=(7, 6))), disc)
        assert val.item() == pytest.approx(-TWO_LN_TWO, abs=1e-12)

    def test_perfect_discrimination_supremum(self):
        disc = make_disc(2, 50.0 * np.eye(2))
        x = Tensor([[10.0, 0.0]])
        ctx = Tensor([[10.0, 0.0], [9.0, 0.0]])
        val = local_constraint(x, ctx, Tensor([[-10.0, 0.0]]),
                               Tensor([[-10.0, 0.0], [-9.0, 0.0]]), disc)
        assert val.item() == 0.0

    def test_matches_naive_double_loop_seed42(self):
        rng = np.random.default_rng(42)
        d = 6
        disc = make_disc(d, rng.normal(size=(d, d)) * 0.4)
        x = rng.normal(size=(1, d))
        ctx = rng.normal(size=(4, d))
        neg_x = rng.normal(size=(1, d))
        neg_ctx = rng.normal(size=(6, d))
        got = local_constraint(Tensor(x), Tensor(ctx), Tensor(neg_x),
                               Tensor(neg_ctx), disc).item()
        want = naive_constraint(disc.W.data, x[0], ctx, neg_x[0], neg_ctx)
        assert got == pytest.approx(want, abs=1e-9)

    def test_gradient_at_random_point(self):
        rng = np.random.default_rng(3)
        d = 5
        pts = [Tensor(rng.normal(size=(1, d))), Tensor(rng.normal(size=(3, d))),
               Tensor(rng.normal(size=(1, d))), Tensor(rng.normal(size=(4, d))),
               Tensor(rng.normal(size=(d, d)) * 0.3)]

        def f(x, ctx, nx, nctx, w):
            disc = make_disc(d)
            disc.W = w
            return local_constraint(x, ctx, nx, nctx, disc)

        assert grad_check(f, pts) < 1e-4

    def test_nonpositive_on_random_inputs(self):
        rng = np.random.default_rng(6)
        for _ in range(1000):
            d = int(rng.integers(2, 8))
            disc = make_disc(d, rng.normal(size=(d, d)))
            val = local_constraint(Tensor(rng.normal(size=(1, d))),
                                   Tensor(rng.normal(size=(rng.integers(1, 6), d))),
                                   Tensor(rng.normal(size=(1, d))),
                                   Tensor(rng.normal(size=(rng.integers(1, 6), d))),
                                   disc)
            assert val.item() <= 0.0


class TestSummarize:
    def test_mean_of_zero_slice_is_half(self):
        out = summarize(Tensor(np.zeros((3, 5))), "mean")
        np.testing.assert_array_equal(out.data, np.full((1, 5), 0.5))

    def test_single_word_mean_is_sigmoid_of_row(self):
        row = np.array([[0.3, -1.2, 2.0]])
        out = summarize(Tensor(row), "mean")
        np.testing.assert_allclose(out.data, 1 / (1 + np.exp(-row)), atol=1e-15)

    def test_max_of_two_rows(self):
        rows = Tensor(np.array([[1.0, 1.0], [3.0, 3.0]]))
        out = summarize(rows, "max")
        np.testing.assert_allclose(out.data, np.full((1, 2), 0.95257412682243322),
                                   atol=1e-15)

    def test_sample_returns_a_member_row(self):
        rng = np.random.default_rng(7)
        rows = rng.normal(size=(4, 6))
        for _ in range(20):
            out = summarize(Tensor(rows), "sample", rng)
            assert any(np.array_equal(out.data[0], r) for r in rows)

    def test_mean_and_max_land_in_unit_interval(self):
        rng = np.random.default_rng(8)
        rows = Tensor(rng.normal(size=(5, 4)) * 3)
        for kind in ("mean", "max"):
            out = summarize(rows, kind)
            assert np.all(out.data > 0) and np.all(out.data < 1)

    def test_errors(self):
        with pytest.raises(ValueError, match="empty"):
            summarize(Tensor(np.zeros((0, 4))), "mean")
        with pytest.raises(ValueError, match="unknown kind"):
            summarize(Tensor(np.zeros((2, 4))), "median")
        with pytest.raises(ValueError, match="generator"):
            summarize(Tensor(np.zeros((2, 4))), "sample")


class TestGlobalConstraint:
    def test_uninformative_discriminator_fixed_point(self):
        rng = np.random.default_rng(9)
        disc = make_disc(6, np.zeros((6, 6)))
        val = global_constraint(Tensor(rng.normal(size=(1, 6))),
                                Tensor(rng.normal(size=(9, 6))),
                                Tensor(rng.normal(size=(1, 6))),
                                Tensor(rng.normal(size=(11, 6))), disc)
        assert val.item() == pytest.approx(-TWO_LN_TWO, abs=1e-12)

    def test_perfect_discrimination_supremum(self):
        disc = make_disc(2, 50.0 * np.eye(2))
        s = Tensor([[10.0, 0.0]])
        rest = Tensor([[10.0, 0.0], [8.0, 0.0]])
        val = global_constraint(s, rest, Tensor([[-10.0, 0.0]]),
                                Tensor([[-8.0, 0.0]]), disc)
        assert val.item() == 0.0

    def test_matches_naive_double_loop_seed42(self):
        rng = np.random.default_rng(42)
        d = 6
        disc = make_disc(d, rng.normal(size=(d, d)) * 0.4)
        s = rng.normal(size=(1, d))
        rest = rng.normal(size=(9, d))
        neg_s = rng.normal(size=(1, d))
        neg_rest = rng.normal(size=(12, d))
        got = global_constraint(Tensor(s), Tensor(rest), Tensor(neg_s),
                                Tensor(neg_rest), disc).item()
        want = naive_constraint(disc.W.data, s[0], rest, neg_s[0], neg_rest)
        assert got == pytest.approx(want, abs=1e-9)

    def test_gradient_at_random_point(self):
        rng = np.random.default_rng(4)
        d = 5
        pts = [Tensor(rng.normal(size=(1, d))), Tensor(rng.normal(size=(6, d))),
               Tensor(rng.normal(size=(1, d))), Tensor(rng.normal(size=(5, d))),
               Tensor(rng.normal(size=(d, d)) * 0.3)]

        def f(s, rest, ns, nrest, w):
            disc = make_disc(d)
            disc.W = w
            return global_constraint(s, rest, ns, nrest, disc)

        assert grad_check(f, pts) < 1e-4

    def test_global_rest_excludes_span(self):
        rng = np.random.default_rng(10)
        ex = EncodedExample(Tensor(rng.normal(size=(3, 4))),
                            Tensor(rng.normal(size=(8, 4))), span=(2, 4))
        rest = global_rest(ex)
        assert rest.shape == (3 + 8 - 3, 4)
        np.testing.assert_array_equal(rest.data[:3], ex.r_q.data)
        np.testing.assert_array_equal(rest.data[3:], ex.r_p.data[[0, 1, 5, 6, 7]])

    def test_global_rest_empty_rejected(self):
        ex = EncodedExample(Tensor(np.zeros((0, 4))),
                            Tensor(np.ones((3, 4))), span=(0, 2))
        with pytest.raises(ValueError, match="whole passage"):
            global_rest(ex)


class TestCombinedLoss:
    def test_disabled_regularizer_is_zero(self):
        rng = np.random.default_rng(12)
        batch = random_batch(rng, 4)
        weights = RegularizerWeights(alpha=0.0, beta=0.0)
        loss, breakdown = qainfomax_loss(batch, weights, None, None, rng)
        assert loss.item() == 0.0
        assert breakdown == {"lc": None, "gc": None}

    def test_uninformative_discriminators_frozen_value(self):
        rng = np.random.default_rng(13)
        batch = random_batch(rng, 5)
        zero = make_disc(6, np.zeros((6, 6)))
        weights = RegularizerWeights(alpha=1.0, beta=0.5)
        loss, breakdown = qainfomax_loss(batch, weights, zero, zero, rng)
        assert loss.item() == pytest.approx(2.0794415416798359, abs=1e-9)
        assert breakdown["lc"] == pytest.approx(-TWO_LN_TWO, abs=1e-12)
        assert breakdown["gc"] == pytest.approx(-TWO_LN_TWO, abs=1e-12)

    def test_penalty_nonnegative_and_terms_nonpositive(self):
        rng = np.random.default_rng(14)
        for _ in range(50):
            batch = random_batch(rng, int(rng.integers(2, 7)))
            disc = make_disc(6, rng.normal(size=(6, 6)))
            loss, breakdown = qainfomax_loss(batch, RegularizerWeights(), disc,
                                             make_disc(6, rng.normal(size=(6, 6))),
                                             rng)
            assert loss.item() >= 0.0
            assert breakdown["lc"] <= 0.0 and breakdown["gc"] <= 0.0

    def test_matches_naive_reference_on_random_batches(self):
        master = np.random.default_rng(15)
        for trial in range(20):
            seed = int(master.integers(1 << 30))
            b = int(master.integers(2, 9))
            data_rng = np.random.default_rng(seed)
            batch = random_batch(data_rng, b)
            lc_disc = make_disc(6, data_rng.normal(size=(6, 6)) * 0.5)
            gc_disc = make_disc(6, data_rng.normal(size=(6, 6)) * 0.5)
            weights = RegularizerWeights(alpha=1.0, beta=0.5, context_window=3)

            loss, _ = qainfomax_loss(batch, weights, lc_disc, gc_disc,
                                     np.random.default_rng(seed + 1))

            replay = np.random.default_rng(seed + 1)
            assignment = shuffle_negatives(b, replay)
            pairs = sample_local_pairs(batch, assignment, replay, 3)
            total = 0.0
            for i, p in enumerate(pairs):
                total += weights.alpha * naive_constraint(
                    lc_disc.W.data, p.x.data[0], p.context.data,
                    p.neg_x.data[0], p.neg_context.data)
            summaries, rests = [], []
            for ex in batch:
                rows = ex.r_p.data[ex.span[0]:ex.span[1] + 1]
                summaries.append(1 / (1 + np.exp(-rows.mean(axis=0))))
                outside = np.concatenate([ex.r_p.data[:ex.span[0]],
                                          ex.r_p.data[ex.span[1] + 1:]])
                rests.append(np.concatenate([ex.r_q.data, outside]))
            for i in range(b):
                j = assignment.permutation[i]
                total += weights.beta * naive_constraint(
                    gc_disc.W.data, summaries[i], rests[i], summaries[j], rests[j])
            assert loss.item() == pytest.approx(-total / b, abs=1e-9), f"trial {trial}"

    def test_same_seed_bit_stable(self):
        data_rng = np.random.default_rng(16)
        batch = random_batch(data_rng, 4)
        disc_w = data_rng.normal(size=(6, 6))

        def run():
            loss, _ = qainfomax_loss(batch, RegularizerWeights(), make_disc(6, disc_w),
                                     make_disc(6, disc_w), np.random.default_rng(99))
            return loss.item()

        assert run() == run()

    def test_batch_of_one_rejected(self):
        rng = np.random.default_rng(17)
        with pytest.raises(ValueError, match="at least 2"):
            qainfomax_loss(random_batch(rng, 2)[:1], RegularizerWeights(),
                           make_disc(6), make_disc(6), rng)

    def test_weight_validation(self):
        with pytest.raises(ValueError, match="non-negative"):
            RegularizerWeights(alpha=-1.0)
        with pytest.raises(ValueError, match="context_window"):
            RegularizerWeights(context_window=-2)
