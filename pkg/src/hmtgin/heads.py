"""Task-specific output heads and losses.

Link prediction scores node pairs with a diagonal bilinear form and
trains with weighted binary cross-entropy; ranking scores
question-answer pairs with an affine map plus Leaky ReLU and trains
with a pairwise log-sigmoid margin loss; classification is a one-layer
perceptron under softmax cross-entropy. All log-likelihood terms go
through the stable log-sigmoid / log-sum-exp forms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .mrgin import DEFAULT_SLOPE


@dataclass
class LinkTaskParams:
    diag: Tensor  # length k, the diagonal of the bilinear form
    positive_weight: float = 2.0


@dataclass
class RankTaskParams:
    w: Tensor  # length 2k
    b: Tensor  # rank-0
    slope: float = DEFAULT_SLOPE


@dataclass
class ClfTaskParams:
    W: Tensor  # (K, k)
    b: Tensor  # (K,)


@dataclass
class RankSample:
    """A question, the ordered list of its answers, and the position of
    the accepted answer within that list."""

    question: int
    answers: np.ndarray  # local answer indices
    accepted_pos: int

    def __post_init__(self):
        self.answers = np.asarray(self.answers, dtype=np.int64)
        if not 0 <= self.accepted_pos < len(self.answers):
            raise ValueError(
                f"accepted position {self.accepted_pos} outside answer list "
                f"of length {len(self.answers)}"
            )


@dataclass
class LinkPairs:
    """Typed node-pair set for one link task."""

    src_type: str
    dst_type: str
    src: np.ndarray
    dst: np.ndarray

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.int64)
        self.dst = np.asarray(self.dst, dtype=np.int64)
        if self.src.shape != self.dst.shape:
            raise ValueError("src/dst index arrays differ in length")

    def __len__(self) -> int:
        return len(self.src)

    def take(self, idx: np.ndarray) -> "LinkPairs":
        return LinkPairs(self.src_type, self.dst_type, self.src[idx], self.dst[idx])


def init_link_params(k: int, rng: np.random.Generator,
                     positive_weight: float = 2.0) -> LinkTaskParams:
    # the diagonal starts from a standard normal draw
    return LinkTaskParams(Tensor(rng.standard_normal(k), requires_grad=True),
                          positive_weight)


def init_rank_params(k: int, rng: np.random.Generator,
                     slope: float = DEFAULT_SLOPE) -> RankTaskParams:
    bound = 1.0 / np.sqrt(2 * k)
    return RankTaskParams(
        Tensor(rng.uniform(-bound, bound, size=2 * k), requires_grad=True),
        Tensor(0.0, requires_grad=True),
        slope,
    )


def init_clf_params(k: int, n_classes: int, rng: np.random.Generator) -> ClfTaskParams:
    bound = 1.0 / np.sqrt(k)
    return ClfTaskParams(
        Tensor(rng.uniform(-bound, bound, size=(n_classes, k)), requires_grad=True),
        Tensor(np.zeros(n_classes), requires_grad=True),
    )


# ---------------------------------------------------------------------------
# link prediction


def link_scores(h_i: Tensor, h_j: Tensor, params: LinkTaskParams) -> Tensor:
    """Diagonal bilinear scores for row-aligned embedding matrices: (P, 1)."""
    k = params.diag.shape[0]
    if h_i.shape[1] != k or h_j.shape[1] != k:
        raise ad.ShapeError(
            f"link_scores: widths {h_i.shape[1]}, {h_j.shape[1]} != diagonal {k}"
        )
    return ad.matmul(ad.mul(h_i, h_j), ad.reshape(params.diag, (k, 1)))


def link_score(h_i: Tensor, h_j: Tensor, params: LinkTaskParams) -> Tensor:
    """Scalar score for a single pair of width-k vectors."""
    k = params.diag.shape[0]
    if h_i.shape != (k,) or h_j.shape != (k,):
        raise ad.ShapeError(f"link_score: expected vectors of length {k}")
    s = link_scores(ad.reshape(h_i, (1, k)), ad.reshape(h_j, (1, k)), params)
    return ad.reshape(s, ())


def link_loss(
    pos: LinkPairs,
    neg: LinkPairs,
    embeddings: dict[str, Tensor],
    params: LinkTaskParams,
) -> Tensor:
    """Weighted binary cross-entropy over the pooled pair sets.

    Positive terms carry weight ``params.positive_weight``; the sum is
    divided by the pooled pair count.
    """
    total = len(pos) + len(neg)
    if total == 0:
        raise ValueError("link_loss: empty pair sets")
    terms = []
    if len(pos):
        s = link_scores(ad.gather_rows(embeddings[pos.src_type], pos.src),
                        ad.gather_rows(embeddings[pos.dst_type], pos.dst), params)
        terms.append(ad.scale(ad.sum_all(ad.log_sigmoid(s)), params.positive_weight))
    if len(neg):
        s = link_scores(ad.gather_rows(embeddings[neg.src_type], neg.src),
                        ad.gather_rows(embeddings[neg.dst_type], neg.dst), params)
        terms.append(ad.sum_all(ad.log_sigmoid(ad.scale(s, -1.0))))
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return ad.scale(acc, -1.0 / total)


# ---------------------------------------------------------------------------
# ranking


def _pair_rows(
    embeddings: dict[str, Tensor],
    question_type: str,
    answer_type: str,
    q_idx: np.ndarray,
    a_idx: np.ndarray,
) -> Tensor:
    return ad.concat(
        [ad.gather_rows(embeddings[question_type], q_idx),
         ad.gather_rows(embeddings[answer_type], a_idx)],
        axis=1,
    )


def rank_scores_flat(
    embeddings: dict[str, Tensor],
    question_type: str,
    answer_type: str,
    q_idx: np.ndarray,
    a_idx: np.ndarray,
    params: RankTaskParams,
) -> Tensor:
    """Scores for aligned (question, answer) index arrays: (P, 1) after
    the affine map and Leaky ReLU."""
    rows = _pair_rows(embeddings, question_type, answer_type, q_idx, a_idx)
    k2 = params.w.shape[0]
    affine = ad.add(ad.matmul(rows, ad.reshape(params.w, (k2, 1))),
                    ad.reshape(params.b, (1, 1)))
    return ad.leaky_relu(affine, params.slope)


def rank_scores(
    sample: RankSample,
    embeddings: dict[str, Tensor],
    params: RankTaskParams,
    question_type: str = "question",
    answer_type: str = "answer",
) -> Tensor:
    """Ranking scores of one sample's answers, shape (|A|,)."""
    m = len(sample.answers)
    q_idx = np.full(m, sample.question, dtype=np.int64)
    s = rank_scores_flat(embeddings, question_type, answer_type,
                         q_idx, sample.answers, params)
    return ad.reshape(s, (m,))


def rank_loss(
    samples: Sequence[RankSample],
    embeddings: dict[str, Tensor],
    params: RankTaskParams,
    question_type: str = "question",
    answer_type: str = "answer",
) -> Tensor:
    """Mean over samples of the pairwise margin loss.

    Per sample the accepted answer's score is compared against every
    other answer; the per-sample sum is divided by the full answer-list
    length |A|, not |A| - 1.
    """
    if not samples:
        raise ValueError("rank_loss: no samples")
    q_idx, a_idx, acc_pair, other_pair, weights = _rank_batch(samples)
    scores = rank_scores_flat(embeddings, question_type, answer_type,
                              q_idx, a_idx, params)
    margins = ad.sub(ad.gather_rows(scores, acc_pair),
                     ad.gather_rows(scores, other_pair))
    weighted = ad.mul(ad.log_sigmoid(margins), Tensor(weights[:, None]))
    return ad.scale(ad.sum_all(weighted), -1.0 / len(samples))


def _rank_batch(samples: Sequence[RankSample]):
    """Flatten samples into aligned index arrays for one batched pass."""
    q_idx, a_idx = [], []
    acc_pair, other_pair, weights = [], [], []
    offset = 0
    for s in samples:
        m = len(s.answers)
        q_idx.append(np.full(m, s.question, dtype=np.int64))
        a_idx.append(s.answers)
        acc = offset + s.accepted_pos
        for j in range(m):
            if j == s.accepted_pos:
                continue
            acc_pair.append(acc)
            other_pair.append(offset + j)
            weights.append(1.0 / m)
        offset += m
    return (
        np.concatenate(q_idx),
        np.concatenate(a_idx),
        np.asarray(acc_pair, dtype=np.int64),
        np.asarray(other_pair, dtype=np.int64),
        np.asarray(weights),
    )


# ---------------------------------------------------------------------------
# classification


def clf_logits(h: Tensor, params: ClfTaskParams) -> Tensor:
    """Logit vector (K,) for a single width-k embedding."""
    k = params.W.shape[1]
    if h.shape != (k,):
        raise ad.ShapeError(f"clf_logits: expected a vector of length {k}")
    out = ad.add(ad.matmul(ad.reshape(h, (1, k)), ad.transpose(params.W)),
                 ad.reshape(params.b, (1, params.b.shape[0])))
    return ad.reshape(out, (params.b.shape[0],))


def clf_logits_batch(h_rows: Tensor, params: ClfTaskParams) -> Tensor:
    return ad.add(ad.matmul(h_rows, ad.transpose(params.W)),
                  ad.reshape(params.b, (1, params.b.shape[0])))


def clf_loss(
    indices: np.ndarray,
    labels: np.ndarray,
    embeddings: dict[str, Tensor],
    params: ClfTaskParams,
    node_type: str,
) -> Tensor:
    """Mean softmax cross-entropy over the given nodes of one type."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("clf_loss: no samples")
    logits = clf_logits_batch(ad.gather_rows(embeddings[node_type], idx), params)
    return ad.softmax_cross_entropy(logits, labels)
