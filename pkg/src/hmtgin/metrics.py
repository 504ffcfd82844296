"""Evaluation metrics and the per-split evaluation driver.

Link tasks report accuracy and F1 at the 0.5 probability threshold,
ranking reports hit ratio and NDCG over the top 3, classification
reports accuracy and macro F1. One shared embedding pass feeds every
task of a report.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .heads import RankSample
from .tasks import CLASSIFICATION, LINK, RANKING, TaskSpec


def binary_accuracy_f1(predictions, labels) -> tuple[float, float]:
    """F1 is 0 when precision + recall is 0."""
    p = np.asarray(predictions, dtype=bool)
    y = np.asarray(labels, dtype=bool)
    if p.shape != y.shape or p.size == 0:
        raise ValueError("predictions/labels must be equal-length and non-empty")
    tp = int(np.sum(p & y))
    fp = int(np.sum(p & ~y))
    fn = int(np.sum(~p & y))
    accuracy = float(np.mean(p == y))
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
    return accuracy, f1


def macro_f1(predictions, labels, n_classes: int) -> float:
    """Unweighted mean of per-class F1; a class absent from both sides
    contributes 0."""
    p = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.size == 0:
        raise ValueError("empty input")
    scores = []
    for c in range(n_classes):
        tp = int(np.sum((p == c) & (y == c)))
        fp = int(np.sum((p == c) & (y != c)))
        fn = int(np.sum((p != c) & (y == c)))
        scores.append(2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0)
    return float(np.mean(scores))


def hr_ndcg_at_3(rank: int) -> tuple[float, float]:
    """Hit ratio and NDCG truncated at 3 for a single relevant item at
    the given 1-based rank; the ideal DCG is 1."""
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if rank > 3:
        return 0.0, 0.0
    return 1.0, 1.0 / math.log2(rank + 1)


def accepted_rank(scores: np.ndarray, accepted_pos: int) -> int:
    """Pessimistic rank of the accepted answer: 1 plus the number of
    other answers scoring at least as high (ties count against it)."""
    s = np.asarray(scores, dtype=np.float64)
    others = np.delete(s, accepted_pos)
    return 1 + int(np.sum(others >= s[accepted_pos]))


@dataclass
class MetricReport:
    values: dict[str, dict[str, float]] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    split: str = ""

    def average(self) -> float:
        all_values = [v for task in self.values.values() for v in task.values()]
        return float(np.mean(all_values)) if all_values else 0.0

    def table(self) -> str:
        lines = [f"split={self.split}"]
        for task in sorted(self.values):
            cells = "  ".join(
                f"{m}={v:.4f}" for m, v in sorted(self.values[task].items())
            )
            lines.append(f"{task:24s} n={self.counts[task]:<5d} {cells}")
        return "\n".join(lines)

    def machine_lines(self) -> list[str]:
        return [
            f"metric={task}.{m} value={'%.17g' % v}"
            for task in sorted(self.values)
            for m, v in sorted(self.values[task].items())
        ]


def parse_machine_lines(lines) -> dict[str, float]:
    out = {}
    for line in lines:
        line = line.strip()
        if not line:
            continue
        left, right = line.split()
        if not left.startswith("metric=") or not right.startswith("value="):
            raise ValueError(f"bad metric line {line!r}")
        out[left[len("metric="):]] = float(right[len("value="):])
    return out


def _eval_link(task: TaskSpec, embeddings, head, idx: np.ndarray):
    # pooled sample index convention: positives first, then negatives
    pos, neg = task.samples
    n_pos = len(pos)
    labels = idx < n_pos
    src = np.empty(len(idx), dtype=np.int64)
    dst = np.empty(len(idx), dtype=np.int64)
    src[labels] = pos.src[idx[labels]]
    dst[labels] = pos.dst[idx[labels]]
    src[~labels] = neg.src[idx[~labels] - n_pos]
    dst[~labels] = neg.dst[idx[~labels] - n_pos]
    hi = embeddings[pos.src_type].data[src]
    hj = embeddings[pos.dst_type].data[dst]
    scores = (hi * hj) @ head.diag.data
    predictions = scores > 0.0  # sigmoid(s) > 0.5 iff s > 0
    accuracy, f1 = binary_accuracy_f1(predictions, labels)
    return {"accuracy": accuracy, "f1": f1}


def _eval_ranking(task: TaskSpec, embeddings, head, idx: np.ndarray,
                  question_type="question", answer_type="answer"):
    hrs, ndcgs = [], []
    qe = embeddings[question_type].data
    ae = embeddings[answer_type].data
    w, b, slope = head.w.data, float(head.b.data), head.slope
    for i in idx:
        s: RankSample = task.samples[i]
        rows = np.concatenate(
            [np.repeat(qe[s.question][None, :], len(s.answers), axis=0),
             ae[s.answers]], axis=1)
        affine = rows @ w + b
        scores = np.where(affine > 0, affine, slope * affine)
        rank = accepted_rank(scores, s.accepted_pos)
        hr, ndcg = hr_ndcg_at_3(rank)
        hrs.append(hr)
        ndcgs.append(ndcg)
    return {"hr3": float(np.mean(hrs)), "ndcg3": float(np.mean(ndcgs))}


def _eval_clf(task: TaskSpec, embeddings, head, idx: np.ndarray):
    cs = task.samples
    h = embeddings[cs.node_type].data[cs.indices[idx]]
    logits = h @ head.W.data.T + head.b.data
    predictions = logits.argmax(axis=1)
    labels = cs.labels[idx]
    n_classes = task.n_classes or int(cs.labels.max()) + 1
    accuracy = float(np.mean(predictions == labels))
    return {"accuracy": accuracy, "macro_f1": macro_f1(predictions, labels, n_classes)}


def evaluate_all(embeddings, tasks: dict[str, TaskSpec], heads, split: str) -> MetricReport:
    """Metrics for every task on one split, from a shared embedding pass.

    ``embeddings`` is the per-type tensor dict from the embedding
    generator; ``heads`` maps task name to its head parameters.
    """
    if split not in ("train", "dev", "test"):
        raise ValueError(f"unknown split {split!r}")
    report = MetricReport(split=split)
    for name in sorted(tasks):
        task = tasks[name]
        idx = task.splits[split]
        if idx.size == 0:
            raise ValueError(f"task {name} has no samples in split {split!r}")
        head = heads[name]
        if task.kind == LINK:
            values = _eval_link(task, embeddings, head, idx)
        elif task.kind == RANKING:
            values = _eval_ranking(task, embeddings, head, idx)
        elif task.kind == CLASSIFICATION:
            values = _eval_clf(task, embeddings, head, idx)
        else:
            raise ValueError(f"unknown task kind {task.kind!r}")
        report.values[name] = values
        report.counts[name] = int(idx.size)
    return report
