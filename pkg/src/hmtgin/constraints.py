"""Cross-task consistency losses tying the classification heads to the
answer-ranking head.

The first constraint pushes the answers the score classifier is most
confident about toward high ranking scores; the second does the same
for answers whose owner the reputation classifier rates highest. The
winner selection is detached: gradients flow through the selected
ranking scores into the ranking head and the embeddings, never through
the argmax itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .heads import ClfTaskParams, RankSample, RankTaskParams, rank_scores_flat


@dataclass
class ConstraintSampleList:
    """Question/answer-list samples evaluated by the constraint losses;
    built once before training (the ranking task's training samples,
    labels ignored)."""

    samples: list[RankSample]
    question_type: str = "question"
    answer_type: str = "answer"

    def __len__(self) -> int:
        return len(self.samples)


def scalar_logit(logits: np.ndarray) -> np.ndarray:
    """Collapse per-row logit vectors to the most confident class score."""
    return logits.max(axis=1)


def argmax_ties(values: np.ndarray) -> np.ndarray:
    """Positions attaining the maximum, under exact float equality."""
    return np.flatnonzero(values == values.max())


def _detached_clf_scalars(rows: np.ndarray, params: ClfTaskParams) -> np.ndarray:
    logits = rows @ params.W.data.T + params.b.data
    return scalar_logit(logits)


def select_by_score_head(
    sample_list: ConstraintSampleList,
    embeddings: dict[str, Tensor],
    clf_params: ClfTaskParams,
) -> list[np.ndarray]:
    """Per sample, the answer positions whose classifier logit attains
    the maximum (ties included). Computed outside the tape."""
    emb = embeddings[sample_list.answer_type].data
    selection = []
    for s in sample_list.samples:
        scalars = _detached_clf_scalars(emb[s.answers], clf_params)
        selection.append(argmax_ties(scalars))
    return selection


def select_by_owner_head(
    sample_list: ConstraintSampleList,
    embeddings: dict[str, Tensor],
    clf_params: ClfTaskParams,
    owner_of: np.ndarray,
    user_type: str = "user",
) -> list[np.ndarray]:
    """Per sample, the answer positions whose owner's classifier logit
    attains the maximum. A user owning several answers puts all of them
    into the selection."""
    emb = embeddings[user_type].data
    selection = []
    for s in sample_list.samples:
        owners = owner_of[s.answers]
        if np.any(owners < 0):
            missing = s.answers[owners < 0]
            raise ValueError(f"answer(s) {missing.tolist()} have no owner edge")
        scalars = _detached_clf_scalars(emb[owners], clf_params)
        selection.append(argmax_ties(scalars))
    return selection


def _selection_loss(
    sample_list: ConstraintSampleList,
    embeddings: dict[str, Tensor],
    ar_params: RankTaskParams,
    selection: list[np.ndarray],
) -> Tensor:
    q_idx, a_idx, weights = [], [], []
    for s, sel in zip(sample_list.samples, selection):
        q_idx.append(np.full(len(sel), s.question, dtype=np.int64))
        a_idx.append(s.answers[sel])
        weights.append(np.full(len(sel), 1.0 / len(sel)))
    scores = rank_scores_flat(
        embeddings,
        sample_list.question_type,
        sample_list.answer_type,
        np.concatenate(q_idx),
        np.concatenate(a_idx),
        ar_params,
    )
    weighted = ad.mul(ad.log_sigmoid(scores), Tensor(np.concatenate(weights)[:, None]))
    return ad.scale(ad.sum_all(weighted), -1.0 / len(sample_list.samples))


def constraint1_loss(
    sample_list: ConstraintSampleList,
    embeddings: dict[str, Tensor],
    asc_params: ClfTaskParams,
    ar_params: RankTaskParams,
    frozen_selection: list[np.ndarray] | None = None,
) -> Tensor:
    """Mean negative log-likelihood of the ranking scores of the answers
    the score classifier rates highest in each sample.

    ``frozen_selection`` pins the detached winner set, e.g. while
    finite-difference checking gradients.
    """
    if not len(sample_list):
        raise ValueError("constraint1_loss: empty sample list")
    selection = frozen_selection
    if selection is None:
        selection = select_by_score_head(sample_list, embeddings, asc_params)
    return _selection_loss(sample_list, embeddings, ar_params, selection)


def constraint2_loss(
    sample_list: ConstraintSampleList,
    embeddings: dict[str, Tensor],
    urc_params: ClfTaskParams,
    ar_params: RankTaskParams,
    owner_of: np.ndarray,
    user_type: str = "user",
    frozen_selection: list[np.ndarray] | None = None,
) -> Tensor:
    """Like the first constraint, but winners are the answers whose owner
    the reputation classifier rates highest. ``owner_of`` maps answer
    local index to user local index (-1 for missing)."""
    if not len(sample_list):
        raise ValueError("constraint2_loss: empty sample list")
    selection = frozen_selection
    if selection is None:
        selection = select_by_owner_head(
            sample_list, embeddings, urc_params, owner_of, user_type
        )
    return _selection_loss(sample_list, embeddings, ar_params, selection)


def owner_map(g, owner_edge_type: str) -> np.ndarray:
    """answer local index -> user local index from the owner edge type;
    raises unless every answer has exactly one owner."""
    et = g.schema.edge_type(owner_edge_type)
    n = g.node_counts[et.dst]
    owners = np.full(n, -1, dtype=np.int64)
    counts = np.zeros(n, dtype=np.int64)
    e = g.edges[owner_edge_type]
    for u, a in e:
        owners[a] = u
        counts[a] += 1
    if np.any(counts > 1):
        raise ValueError(
            f"{int((counts > 1).sum())} nodes have multiple owner edges in "
            f"{owner_edge_type}"
        )
    return owners
