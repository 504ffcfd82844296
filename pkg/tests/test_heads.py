import math

import numpy as np
import pytest

from hmtgin import autodiff as ad
from hmtgin.autodiff import Tensor, grad_check
from hmtgin.heads import (
    ClfTaskParams,
    LinkPairs,
    LinkTaskParams,
    RankSample,
    RankTaskParams,
    clf_logits,
    clf_loss,
    link_loss,
    link_score,
    link_scores,
    rank_loss,
    rank_scores,
)

LN2 = math.log(2.0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def embeddings(rng, n_q=6, n_a=20, k=5):
    return {
        "question": Tensor(rng.uniform(-1, 1, (n_q, k))),
        "answer": Tensor(rng.uniform(-1, 1, (n_a, k))),
    }


class TestLinkScore:
    def test_zero_vector_scores_zero(self, rng):
        p = LinkTaskParams(Tensor(rng.standard_normal(4)))
        s = link_score(Tensor(np.zeros(4)), Tensor(rng.uniform(-1, 1, 4)), p)
        assert s.item() == 0.0

    def test_hand_value(self):
        p = LinkTaskParams(Tensor(np.array([1.0, 1.0])))
        s = link_score(Tensor(np.array([1.0, 2.0])), Tensor(np.array([3.0, 4.0])), p)
        assert s.item() == pytest.approx(11.0, abs=0)

    def test_swap_symmetry(self, rng):
        # diagonal bilinear form is symmetric in its arguments
        p = LinkTaskParams(Tensor(rng.standard_normal(6)))
        for _ in range(50):
            a = Tensor(rng.uniform(-3, 3, 6))
            b = Tensor(rng.uniform(-3, 3, 6))
            assert abs(link_score(a, b, p).item()
                       - link_score(b, a, p).item()) < 1e-12

    def test_width_mismatch(self, rng):
        p = LinkTaskParams(Tensor(rng.standard_normal(4)))
        with pytest.raises(ad.ShapeError):
            link_score(Tensor(np.zeros(3)), Tensor(np.zeros(4)), p)


def mp_bce(scores, labels, w):
    mp = pytest.importorskip("mpmath")
    mp.mp.dps = 50
    total = mp.mpf(0)
    for s, y in zip(scores, labels):
        f = 1 / (1 + mp.e ** (-mp.mpf(s)))
        total += w * y * mp.log(f) + (1 - y) * mp.log(1 - f)
    return float(-total / len(scores))


class TestLinkLoss:
    def make(self, rng, n_pos, n_neg, k=4):
        emb = {"q": Tensor(rng.uniform(-1, 1, (8, k))),
               "t": Tensor(rng.uniform(-1, 1, (8, k)))}
        pos = LinkPairs("q", "t", rng.integers(0, 8, n_pos), rng.integers(0, 8, n_pos))
        neg = LinkPairs("q", "t", rng.integers(0, 8, n_neg), rng.integers(0, 8, n_neg))
        return emb, pos, neg

    def test_single_pair_each_at_zero_score(self):
        # both scores 0, unit weight: the mean of two ln 2 terms
        emb = {"q": Tensor(np.zeros((1, 3))), "t": Tensor(np.ones((1, 3)))}
        pos = LinkPairs("q", "t", [0], [0])
        neg = LinkPairs("q", "t", [0], [0])
        p = LinkTaskParams(Tensor(np.ones(3)), positive_weight=1.0)
        assert link_loss(pos, neg, emb, p).item() == pytest.approx(LN2, abs=1e-12)

    def test_saturated_scores_drive_loss_to_zero(self):
        emb = {"q": Tensor(np.array([[30.0], [-30.0]])),
               "t": Tensor(np.array([[30.0], [30.0]]))}
        p = LinkTaskParams(Tensor(np.ones(1)), positive_weight=1.0)
        loss = link_loss(LinkPairs("q", "t", [0], [0]),
                         LinkPairs("q", "t", [1], [1]), emb, p)
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_matches_naive_extended_precision(self, rng):
        emb, pos, neg = self.make(rng, 4, 6)
        p = LinkTaskParams(Tensor(rng.standard_normal(4)), positive_weight=2.0)
        got = link_loss(pos, neg, emb, p).item()
        scores = []
        for pairs in (pos, neg):
            hi = emb["q"].data[pairs.src]
            hj = emb["t"].data[pairs.dst]
            scores.extend((hi * hj) @ p.diag.data)
        expect = mp_bce(scores, [1] * 4 + [0] * 6, 2.0)
        assert got == pytest.approx(expect, abs=1e-12)

    def test_unit_weight_equals_plain_mean_bce(self, rng):
        emb, pos, neg = self.make(rng, 5, 10)
        p = LinkTaskParams(Tensor(rng.standard_normal(4)), positive_weight=1.0)
        got = link_loss(pos, neg, emb, p).item()
        scores = []
        for pairs in (pos, neg):
            hi = emb["q"].data[pairs.src]
            hj = emb["t"].data[pairs.dst]
            scores.extend((hi * hj) @ p.diag.data)
        expect = mp_bce(scores, [1] * 5 + [0] * 10, 1.0)
        assert got == pytest.approx(expect, abs=1e-12)

    def test_empty_union_rejected(self, rng):
        emb, _, _ = self.make(rng, 1, 1)
        empty = LinkPairs("q", "t", [], [])
        with pytest.raises(ValueError, match="empty"):
            link_loss(empty, empty, emb, rng_params(rng))

    def test_gradient(self, rng):
        emb, pos, neg = self.make(rng, 3, 6)
        p = LinkTaskParams(Tensor(rng.standard_normal(4), requires_grad=True))
        report = grad_check(lambda: link_loss(pos, neg, emb, p),
                            [("D", p.diag)])
        assert report.passed, str(report)


def rng_params(rng):
    return LinkTaskParams(Tensor(rng.standard_normal(4)))


class TestRankScores:
    def test_zero_params_zero_scores(self, rng):
        emb = embeddings(rng)
        p = RankTaskParams(Tensor(np.zeros(10)), Tensor(0.0))
        s = rank_scores(RankSample(0, np.arange(8), 2), emb, p)
        np.testing.assert_array_equal(s.data, np.zeros(8))

    def test_negative_bias_passes_through_slope(self, rng):
        emb = embeddings(rng)
        p = RankTaskParams(Tensor(np.zeros(10)), Tensor(-1.0), slope=0.01)
        s = rank_scores(RankSample(0, np.arange(8), 2), emb, p)
        np.testing.assert_allclose(s.data, np.full(8, -0.01), rtol=1e-12)

    def test_permuting_answers_permutes_scores(self, rng):
        emb = embeddings(rng)
        p = RankTaskParams(Tensor(rng.uniform(-1, 1, 10)), Tensor(0.3))
        answers = np.arange(8)
        perm = rng.permutation(8)
        s1 = rank_scores(RankSample(1, answers, 0), emb, p).data
        s2 = rank_scores(RankSample(1, answers[perm], 0), emb, p).data
        np.testing.assert_array_equal(s1[perm], s2)


class TestRankLoss:
    def test_equal_scores_nine_answers(self, rng):
        # all margins are 0, so each of the 8 pairwise terms is ln 2 and
        # the stated denominator is the full list length 9
        emb = embeddings(rng, n_a=9)
        p = RankTaskParams(Tensor(np.zeros(10)), Tensor(0.0))
        loss = rank_loss([RankSample(0, np.arange(9), 4)], emb, p)
        assert loss.item() == pytest.approx(8 * LN2 / 9, abs=1e-12)

    def test_saturated_margin_drives_loss_to_zero(self):
        emb = {"question": Tensor(np.zeros((1, 1))),
               "answer": Tensor(np.array([[50.0]] + [[-50.0]] * 7))}
        p = RankTaskParams(Tensor(np.array([0.0, 1.0])), Tensor(0.0))
        loss = rank_loss([RankSample(0, np.arange(8), 0)], emb, p)
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_matches_naive_per_pair_loop(self, rng):
        mp = pytest.importorskip("mpmath")
        mp.mp.dps = 50
        emb = embeddings(rng, n_a=30)
        p = RankTaskParams(Tensor(rng.uniform(-1, 1, 10)), Tensor(0.2))
        samples = [RankSample(0, np.arange(9), 3),
                   RankSample(2, np.arange(10, 22), 7)]
        got = rank_loss(samples, emb, p).item()
        total = mp.mpf(0)
        for s in samples:
            scores = rank_scores(s, emb, p).data
            term = mp.mpf(0)
            for j in range(len(s.answers)):
                if j == s.accepted_pos:
                    continue
                m = mp.mpf(scores[s.accepted_pos]) - mp.mpf(scores[j])
                term -= mp.log(1 / (1 + mp.e ** (-m)))
            total += term / len(s.answers)
        assert got == pytest.approx(float(total / len(samples)), abs=1e-12)

    def test_reorder_invariance_with_remapped_label(self, rng):
        emb = embeddings(rng)
        p = RankTaskParams(Tensor(rng.uniform(-1, 1, 10)), Tensor(0.0))
        answers = np.array([3, 5, 7, 9, 11, 13, 15, 17])
        perm = rng.permutation(8)
        s1 = rank_loss([RankSample(1, answers, 2)], emb, p).item()
        s2 = rank_loss([RankSample(1, answers[perm],
                                   int(np.argwhere(perm == 2)[0][0]))],
                       emb, p).item()
        assert s1 == pytest.approx(s2, abs=1e-12)

    def test_monotone_in_accepted_score(self):
        # raising the accepted answer's score strictly lowers the loss
        p = RankTaskParams(Tensor(np.array([0.0, 1.0])), Tensor(0.0))
        losses = []
        for bump in (0.0, 0.5, 1.0):
            emb = {"question": Tensor(np.zeros((1, 1))),
                   "answer": Tensor(np.concatenate(
                       [[[bump]], np.zeros((7, 1))]))}
            losses.append(rank_loss([RankSample(0, np.arange(8), 0)],
                                    emb, p).item())
        assert losses[0] > losses[1] > losses[2]

    def test_empty_samples_rejected(self, rng):
        with pytest.raises(ValueError):
            rank_loss([], embeddings(rng), RankTaskParams(Tensor(np.zeros(10)),
                                                          Tensor(0.0)))

    def test_short_answer_list_label_validation(self):
        with pytest.raises(ValueError):
            RankSample(0, np.arange(5), 5)

    def test_gradient(self, rng):
        emb = embeddings(rng)
        p = RankTaskParams(Tensor(rng.uniform(-1, 1, 10), requires_grad=True),
                           Tensor(0.1, requires_grad=True))
        samples = [RankSample(0, np.arange(8), 1),
                   RankSample(3, np.arange(8, 17), 4)]
        report = grad_check(lambda: rank_loss(samples, emb, p),
                            [("w", p.w), ("b", p.b)])
        assert report.passed, str(report)


class TestClassification:
    def test_zero_params_uniform_loss(self, rng):
        emb = {"answer": Tensor(rng.uniform(-1, 1, (10, 5)))}
        p = ClfTaskParams(Tensor(np.zeros((4, 5))), Tensor(np.zeros(4)))
        loss = clf_loss(np.arange(10), rng.integers(0, 4, 10), emb, p, "answer")
        assert loss.item() == pytest.approx(math.log(4), abs=1e-12)

    def test_confident_correct_logit_gives_zero_loss(self):
        emb = {"answer": Tensor(np.array([[1.0]]))}
        p = ClfTaskParams(Tensor(np.array([[1000.0], [0.0]])), Tensor(np.zeros(2)))
        loss = clf_loss([0], [0], emb, p, "answer")
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_logits_are_affine(self, rng):
        p = ClfTaskParams(Tensor(rng.uniform(-1, 1, (3, 4))),
                          Tensor(rng.uniform(-1, 1, 3)))
        h = rng.uniform(-1, 1, 4)
        out = clf_logits(Tensor(h), p)
        np.testing.assert_allclose(out.data, p.W.data @ h + p.b.data, rtol=1e-12)

    def test_matches_naive_oracle(self, rng):
        mp = pytest.importorskip("mpmath")
        mp.mp.dps = 50
        emb = {"user": Tensor(rng.uniform(-2, 2, (20, 6)))}
        p = ClfTaskParams(Tensor(rng.uniform(-1, 1, (5, 6))),
                          Tensor(rng.uniform(-1, 1, 5)))
        labels = rng.integers(0, 5, 20)
        got = clf_loss(np.arange(20), labels, emb, p, "user").item()
        total = mp.mpf(0)
        for i, y in enumerate(labels):
            logits = p.W.data @ emb["user"].data[i] + p.b.data
            denom = sum(mp.e ** mp.mpf(v) for v in logits)
            total -= mp.log(mp.e ** mp.mpf(logits[y]) / denom)
        assert got == pytest.approx(float(total / 20), abs=1e-12)

    def test_label_out_of_range(self, rng):
        emb = {"answer": Tensor(rng.uniform(-1, 1, (3, 2)))}
        p = ClfTaskParams(Tensor(np.zeros((2, 2))), Tensor(np.zeros(2)))
        with pytest.raises(ValueError):
            clf_loss([0, 1, 2], [0, 1, 2], emb, p, "answer")

    def test_gradient(self, rng):
        emb = {"answer": Tensor(rng.uniform(-1, 1, (12, 4)))}
        p = ClfTaskParams(Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True),
                          Tensor(rng.uniform(-0.5, 0.5, 3), requires_grad=True))
        labels = rng.integers(0, 3, 12)
        report = grad_check(
            lambda: clf_loss(np.arange(12), labels, emb, p, "answer"),
            [("W", p.W), ("b", p.b)])
        assert report.passed, str(report)
