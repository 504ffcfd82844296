"""Task dataset construction: negative sampling, label bucketing,
ranking-sample extraction, 8:1:1 splits, the task file format, and a
synthetic question-answering graph generator with planted signals.

The generator emits a graph whose features statistically determine tag
membership, answer scores, user reputations and answer acceptance, so
the tasks are recoverable at desk scale. Acceptance probability
increases with both the answer's score and its owner's reputation,
which keeps the cross-task constraints satisfiable.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .heads import LinkPairs, RankSample
from .multigraph import MultiRelationalGraph, Schema

LINK, RANKING, CLASSIFICATION = "link", "ranking", "classification"

# default loss coefficients; duplicate detection and answer score
# classification are weighted up, everything else sits at 1
DEFAULT_ALPHAS = {"duplicate_detection": 7.0, "answer_score": 7.0}

SPLIT_NAMES = ("train", "dev", "test")


class DatasetError(ValueError):
    pass


@dataclass
class ClfSamples:
    node_type: str
    indices: np.ndarray
    labels: np.ndarray


@dataclass
class TaskSpec:
    """One task: its kind, samples, labels and split membership."""

    name: str
    kind: str
    samples: object  # (LinkPairs pos, LinkPairs neg) | list[RankSample] | ClfSamples
    splits: dict[str, np.ndarray]
    target: str | tuple[str, str] | None = None
    n_classes: int = 0
    alpha: float = 1.0

    @property
    def n_samples(self) -> int:
        if self.kind == LINK:
            pos, neg = self.samples
            return len(pos) + len(neg)
        if self.kind == RANKING:
            return len(self.samples)
        return len(self.samples.indices)


def split_indices(n: int, seed: int, ratios=(8, 1, 1)) -> dict[str, np.ndarray]:
    """Disjoint covering train/dev/test index sets, sizes 8:1:1 up to
    rounding, deterministic per seed."""
    if n < 10:
        raise DatasetError(f"need at least 10 samples to split, got {n}")
    total = sum(ratios)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(n * ratios[0] / total)
    n_dev = int(n * ratios[1] / total)
    return {
        "train": np.sort(perm[:n_train]),
        "dev": np.sort(perm[n_train:n_train + n_dev]),
        "test": np.sort(perm[n_train + n_dev:]),
    }


def negative_sample(
    g: MultiRelationalGraph,
    edge_type: str,
    ratio: int = 2,
    seed: int = 0,
    symmetric: bool = False,
) -> np.ndarray:
    """Draw ratio * |E| distinct type-correct non-edges of ``edge_type``.

    Collisions with existing edges or earlier draws are rejected and
    redrawn. ``symmetric`` treats (i, j) and (j, i) as the same pair and
    returns canonical i < j pairs; self pairs are never drawn for
    same-type relations.
    """
    et = g.schema.edge_type(edge_type)
    e = g.edges[edge_type]
    ns, nd = g.node_counts[et.src], g.node_counts[et.dst]
    same_type = et.src == et.dst
    if symmetric and not same_type:
        raise DatasetError("symmetric sampling needs matching endpoint types")
    n_pos = e.shape[0]
    need = ratio * n_pos
    if symmetric:
        universe = ns * (ns - 1) // 2
    elif same_type:
        universe = ns * nd - ns
    else:
        universe = ns * nd
    if universe - n_pos < need:
        raise DatasetError(
            f"cannot draw {need} negatives for {edge_type}: only "
            f"{universe - n_pos} non-edges exist"
        )
    taken = set()
    for i, j in e:
        taken.add((min(i, j), max(i, j)) if symmetric else (int(i), int(j)))
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < need:
        i = int(rng.integers(ns))
        j = int(rng.integers(nd))
        if same_type and i == j:
            continue
        pair = (min(i, j), max(i, j)) if symmetric else (i, j)
        if pair in taken:
            continue
        taken.add(pair)
        out.append(pair)
    return np.asarray(out, dtype=np.int64)


def quantile_thresholds(values: np.ndarray, n_classes: int) -> np.ndarray:
    """Interior cut points splitting ``values`` into n_classes equal-mass
    intervals."""
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise DatasetError("bucket values must be finite")
    qs = np.arange(1, n_classes) / n_classes
    thresholds = np.quantile(values, qs)
    if len(np.unique(values)) < n_classes:
        warnings.warn(
            f"fewer than {n_classes} distinct values; some buckets are degenerate",
            stacklevel=2,
        )
    return thresholds


def apply_thresholds(values: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    # values equal to a cut point fall into the lower bucket
    return np.searchsorted(thresholds, np.asarray(values, dtype=np.float64),
                           side="left").astype(np.int64)


def bucket_labels(values: np.ndarray, n_classes: int) -> np.ndarray:
    """Quantile-based monotone binning into n_classes labels."""
    return apply_thresholds(values, quantile_thresholds(values, n_classes))


def build_ranking_samples(
    g: MultiRelationalGraph,
    accepted_answer_of: dict[int, int],
    answer_edge_type: str = "answer_to",
    min_answers: int = 8,
) -> tuple[list[RankSample], int]:
    """One sample per question with at least ``min_answers`` answers and
    a recorded accepted answer; answers are ordered by local index.

    ``accepted_answer_of`` maps question local index to the accepted
    answer's local index. Returns (samples, skipped) where skipped
    counts questions with enough answers but no accepted answer.
    """
    et = g.schema.edge_type(answer_edge_type)
    n_questions = g.node_counts[et.dst]
    answers_of: list[list[int]] = [[] for _ in range(n_questions)]
    for a, q in g.edges[answer_edge_type]:
        answers_of[q].append(int(a))
    samples, skipped = [], 0
    for q in range(n_questions):
        ans = sorted(answers_of[q])
        if len(ans) < min_answers:
            continue
        acc = accepted_answer_of.get(q)
        if acc is None or acc not in ans:
            skipped += 1
            continue
        samples.append(RankSample(q, np.asarray(ans), ans.index(acc)))
    return samples, skipped


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SyntheticSpec:
    """Knobs of the planted-signal generator. Signal strengths scale how
    strongly features encode the latent quantity they are planted with;
    noise scales the independent per-feature jitter."""

    seed: int = 3
    questions: int = 42
    users: int = 80
    tags: int = 8
    min_answers: int = 8
    max_answers: int = 9
    d_init: int = 16
    min_tags: int = 2
    max_tags: int = 3
    duplicate_rate: float = 0.15
    comment_rate: float = 0.5
    tag_signal: float = 5.0
    score_signal: float = 2.5
    reputation_signal: float = 5.0
    topic_mix: float = 0.5
    feature_noise: float = 0.12
    duplicate_noise: float = 0.1
    acceptance_score_weight: float = 1.0
    acceptance_reputation_weight: float = 0.6
    acceptance_noise: float = 0.15
    score_classes: int = 4
    reputation_classes: int = 5

    def validate(self) -> None:
        if self.min_answers < 8:
            raise DatasetError(
                f"min_answers must be at least 8, got {self.min_answers}"
            )
        if self.max_answers < self.min_answers:
            raise DatasetError("max_answers < min_answers")
        if not (1 <= self.min_tags <= self.max_tags <= self.tags):
            raise DatasetError("tag count range inconsistent with tag pool")
        if min(self.questions, self.users) < 10:
            raise DatasetError("need at least 10 questions and users to split 8:1:1")
        if self.tags < 2:
            raise DatasetError("need at least 2 tags")
        if not 0.0 <= self.duplicate_rate <= 0.5:
            raise DatasetError("duplicate_rate outside [0, 0.5]")
        if self.tags > _hadamard_order(self.d_init - 3):
            raise DatasetError(
                f"feature width {self.d_init} fits at most "
                f"{_hadamard_order(self.d_init - 3)} orthogonal tag patterns, "
                f"got {self.tags} tags"
            )


@dataclass
class GroundTruth:
    """Raw attribute values backing the labels, plus acceptance."""

    answer_score: np.ndarray
    user_reputation: np.ndarray
    accepted_answer_of: dict[int, int]


@dataclass
class GeneratedDataset:
    graph: MultiRelationalGraph
    tasks: dict[str, TaskSpec]
    truth: GroundTruth
    disabled: list[str] = field(default_factory=list)


def cqa_schema() -> Schema:
    return Schema.with_reverses(
        ("question", "answer", "user", "tag"),
        [
            ("answer_to", "answer", "question"),
            ("tagged_with", "question", "tag"),
            ("owner_of_question", "user", "question"),
            ("owner_of_answer", "user", "answer"),
            ("comment_on_question", "user", "question"),
            ("comment_on_answer", "user", "answer"),
            ("duplicate", "question", "question"),
        ],
    )


def _hadamard_order(n: int) -> int:
    """Largest power of two not exceeding n."""
    return 1 << (int(n).bit_length() - 1) if n >= 1 else 0


def _hadamard(m: int) -> np.ndarray:
    h = np.ones((1, 1))
    while h.shape[0] < m:
        h = np.block([[h, h], [h, -h]])
    return h


def generate_synthetic(spec: SyntheticSpec) -> GeneratedDataset:
    """Build the graph and derive all five task datasets from it.

    Link-task negatives avoid every positive pair; dev/test membership
    lives in the split index sets of the task files."""
    spec.validate()
    schema = cqa_schema()
    root = np.random.SeedSequence(spec.seed)
    rng_feat, rng_struct, rng_tasks = [
        np.random.default_rng(s) for s in root.spawn(3)
    ]
    # feature layout: coordinate 1 encodes answer score, coordinate 2
    # user reputation; tags are rows of a Hadamard matrix spread over
    # the next block of coordinates, so a matching question-tag pair
    # has a positive product in every tag coordinate while non-matching
    # pairs cancel exactly. Coordinate 0 and everything after the tag
    # block hold a constant 1: together they give the bias-free
    # bilinear link head a decision threshold it can reach from any
    # random start within the learning-rate budget.
    d = spec.d_init
    m = _hadamard_order(d - 3)
    tag_protos = np.zeros((spec.tags, d))
    order = rng_feat.permutation(m)[: spec.tags]
    tag_protos[:, 3:3 + m] = _hadamard(m)[order] / np.sqrt(m)
    intercept_coords = np.r_[0, np.arange(3 + m, d)]
    score_dir = np.zeros(d)
    score_dir[1] = 1.0
    rep_dir = np.zeros(d)
    rep_dir[2] = 1.0

    # reputations and scores are right-skewed, like their real-world
    # counterparts; the wide top quantile class makes the most
    # reputable/highest-scored items also the most confidently
    # classifiable ones
    reputation = rng_feat.exponential(1.0, spec.users) - 1.0
    f_user = (spec.reputation_signal * reputation[:, None] * rep_dir
              + spec.feature_noise * rng_feat.standard_normal((spec.users, d)))

    # question topics: each question mixes a few tag prototypes
    tags_of: list[np.ndarray] = []
    for _ in range(spec.questions):
        k = int(rng_struct.integers(spec.min_tags, spec.max_tags + 1))
        tags_of.append(np.sort(rng_struct.choice(spec.tags, size=k, replace=False)))
    base_q = np.stack([
        tag_protos[t].sum(axis=0) / np.sqrt(len(t)) for t in tags_of
    ])
    f_question = (spec.tag_signal * base_q
                  + spec.feature_noise * rng_feat.standard_normal((spec.questions, d)))

    # duplicate pairs: the second member becomes a noisy clone of the first
    n_dup = int(round(spec.duplicate_rate * spec.questions))
    dup_pairs: list[tuple[int, int]] = []
    if n_dup:
        chosen = rng_struct.choice(spec.questions, size=2 * n_dup, replace=False)
        for a, b in zip(chosen[:n_dup], chosen[n_dup:]):
            i, j = int(min(a, b)), int(max(a, b))
            tags_of[j] = tags_of[i]
            f_question[j] = (f_question[i]
                             + spec.duplicate_noise * rng_feat.standard_normal(d))
            dup_pairs.append((i, j))
        dup_pairs.sort()

    # answers: owner, latent score (correlated with owner reputation), features
    answers_per_q = rng_struct.integers(spec.min_answers, spec.max_answers + 1,
                                        size=spec.questions)
    n_answers = int(answers_per_q.sum())
    question_of = np.repeat(np.arange(spec.questions), answers_per_q)
    owner_of = rng_struct.integers(spec.users, size=n_answers)
    score = (0.6 * reputation[owner_of]
             + 0.8 * (rng_feat.exponential(1.0, n_answers) - 1.0))
    f_answer = (spec.score_signal * score[:, None] * score_dir
                + spec.topic_mix * base_q[question_of]
                + spec.feature_noise * rng_feat.standard_normal((n_answers, d)))

    # acceptance favors high score and reputable owners
    starts = np.concatenate(([0], np.cumsum(answers_per_q)))
    accepted_answer_of: dict[int, int] = {}
    utility = (spec.acceptance_score_weight * score
               + spec.acceptance_reputation_weight * reputation[owner_of]
               + spec.acceptance_noise * rng_feat.standard_normal(n_answers))
    for q in range(spec.questions):
        lo, hi = starts[q], starts[q + 1]
        accepted_answer_of[q] = int(lo + np.argmax(utility[lo:hi]))

    f_tag = (spec.tag_signal * tag_protos
             + spec.feature_noise * rng_feat.standard_normal((spec.tags, d)))

    for f in (f_question, f_answer, f_user, f_tag):
        f[:, intercept_coords] = 1.0

    edges = {
        "answer_to": np.column_stack([np.arange(n_answers), question_of]),
        "tagged_with": np.asarray(
            [(q, t) for q in range(spec.questions) for t in tags_of[q]],
            dtype=np.int64,
        ),
        "owner_of_question": np.column_stack(
            [rng_struct.integers(spec.users, size=spec.questions),
             np.arange(spec.questions)]
        ),
        "owner_of_answer": np.column_stack([owner_of, np.arange(n_answers)]),
        "comment_on_question": _random_pairs(
            rng_struct, spec.users, spec.questions,
            int(spec.comment_rate * spec.questions)),
        "comment_on_answer": _random_pairs(
            rng_struct, spec.users, n_answers, int(spec.comment_rate * n_answers)),
        "duplicate": np.asarray(dup_pairs, dtype=np.int64).reshape(-1, 2),
    }
    for name in list(edges):
        e = edges[name]
        et = schema.edge_type(name)
        edges[et.name + "_rev"] = e[:, ::-1]

    counts = {"question": spec.questions, "answer": n_answers,
              "user": spec.users, "tag": spec.tags}
    features = {"question": f_question, "answer": f_answer,
                "user": f_user, "tag": f_tag}
    graph = MultiRelationalGraph(schema, counts, edges, features)

    truth = GroundTruth(score, reputation, accepted_answer_of)
    seeds = root.spawn(1)[0].generate_state(6)
    tasks, disabled = _build_tasks(graph, truth, spec, seeds)
    return GeneratedDataset(graph, tasks, truth, disabled)


def _random_pairs(rng: np.random.Generator, ns: int, nd: int, m: int) -> np.ndarray:
    seen = set()
    while len(seen) < min(m, ns * nd):
        i, j = int(rng.integers(ns)), int(rng.integers(nd))
        seen.add((i, j))
    return np.asarray(sorted(seen), dtype=np.int64).reshape(-1, 2)


def _build_tasks(g, truth: GroundTruth, spec: SyntheticSpec, seeds):
    tasks: dict[str, TaskSpec] = {}
    disabled: list[str] = []

    def link_task(name, edge_type, symmetric, seed):
        e = g.edges[edge_type]
        if e.shape[0] == 0:
            disabled.append(name)
            return
        if symmetric:
            keep = e[:, 0] < e[:, 1]
            e = e[keep]
        neg = negative_sample(g, edge_type, ratio=2, seed=seed, symmetric=symmetric)
        et = g.schema.edge_type(edge_type)
        pos_pairs = LinkPairs(et.src, et.dst, e[:, 0], e[:, 1])
        neg_pairs = LinkPairs(et.src, et.dst, neg[:, 0], neg[:, 1])
        n = len(pos_pairs) + len(neg_pairs)
        tasks[name] = TaskSpec(
            name, LINK, (pos_pairs, neg_pairs),
            split_indices(n, seed + 1), target=edge_type,
        )

    link_task("tag_recommendation", "tagged_with", False, int(seeds[0]))
    link_task("duplicate_detection", "duplicate", True, int(seeds[1]))

    samples, _ = build_ranking_samples(g, truth.accepted_answer_of,
                                       min_answers=spec.min_answers)
    if samples:
        tasks["answer_ranking"] = TaskSpec(
            "answer_ranking", RANKING, samples,
            split_indices(len(samples), int(seeds[2])),
        )
    else:
        disabled.append("answer_ranking")

    def clf_task(name, node_type, values, n_classes, seed):
        n = len(values)
        splits = split_indices(n, seed)
        thresholds = quantile_thresholds(values[splits["train"]], n_classes)
        labels = apply_thresholds(values, thresholds)
        tasks[name] = TaskSpec(
            name, CLASSIFICATION,
            ClfSamples(node_type, np.arange(n), labels), splits,
            target=(node_type, name), n_classes=n_classes,
        )

    clf_task("answer_score", "answer", truth.answer_score,
             spec.score_classes, int(seeds[3]))
    clf_task("user_reputation", "user", truth.user_reputation,
             spec.reputation_classes, int(seeds[4]))

    for name, task in tasks.items():
        task.alpha = DEFAULT_ALPHAS.get(name, 1.0)
    return tasks, disabled


# ---------------------------------------------------------------------------
# task file format


def _fmt_idx_line(idx: np.ndarray) -> str:
    return " ".join(str(int(i)) for i in idx)


def save_task(task: TaskSpec, path) -> None:
    lines = [f"task {task.name} {task.kind}"]
    if task.kind == LINK:
        pos, neg = task.samples
        for i, j in zip(pos.src, pos.dst):
            lines.append(f"pos {pos.src_type} {i} {pos.dst_type} {j}")
        for i, j in zip(neg.src, neg.dst):
            lines.append(f"neg {neg.src_type} {i} {neg.dst_type} {j}")
    elif task.kind == RANKING:
        for s in task.samples:
            answers = " ".join(str(int(a)) for a in s.answers)
            lines.append(f"sample {s.question} {answers} | {s.accepted_pos}")
    elif task.kind == CLASSIFICATION:
        cs: ClfSamples = task.samples
        for i, y in zip(cs.indices, cs.labels):
            lines.append(f"label {cs.node_type} {i} {y}")
    else:
        raise DatasetError(f"unknown task kind {task.kind!r}")
    for split in SPLIT_NAMES:
        lines.append(f"split {split}")
        lines.append(_fmt_idx_line(task.splits[split]))
    lines.append("end")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_task(path) -> TaskSpec:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].startswith("task "):
        raise DatasetError(f"{path}: missing task header")
    _, name, kind = lines[0].split()
    body = lines[1:]
    split_at = next((i for i, ln in enumerate(body) if ln.startswith("split ")),
                    len(body))
    sample_lines, tail = body[:split_at], body[split_at:]
    if len(tail) != 7 or tail[-1] != "end":
        raise DatasetError(f"{path}: expected three split sections and 'end'")
    splits = {}
    for i, split in enumerate(SPLIT_NAMES):
        if tail[2 * i] != f"split {split}":
            raise DatasetError(f"{path}: expected 'split {split}', got {tail[2*i]!r}")
        text = tail[2 * i + 1].split()
        splits[split] = np.asarray([int(v) for v in text], dtype=np.int64)

    if kind == LINK:
        pos_rows, neg_rows, types = [], [], None
        for ln in sample_lines:
            parts = ln.split()
            if len(parts) != 5 or parts[0] not in ("pos", "neg"):
                raise DatasetError(f"{path}: malformed link line {ln!r}")
            types = (parts[1], parts[3])
            (pos_rows if parts[0] == "pos" else neg_rows).append(
                (int(parts[2]), int(parts[4]))
            )
        if types is None:
            raise DatasetError(f"{path}: link task has no samples")
        pos_rows = np.asarray(pos_rows, dtype=np.int64).reshape(-1, 2)
        neg_rows = np.asarray(neg_rows, dtype=np.int64).reshape(-1, 2)
        samples = (
            LinkPairs(types[0], types[1], pos_rows[:, 0], pos_rows[:, 1]),
            LinkPairs(types[0], types[1], neg_rows[:, 0], neg_rows[:, 1]),
        )
        return TaskSpec(name, LINK, samples, splits,
                        alpha=DEFAULT_ALPHAS.get(name, 1.0))
    if kind == RANKING:
        samples = []
        for ln in sample_lines:
            if not ln.startswith("sample ") or " | " not in ln:
                raise DatasetError(f"{path}: malformed ranking line {ln!r}")
            left, y = ln[len("sample "):].split(" | ")
            nums = [int(v) for v in left.split()]
            samples.append(RankSample(nums[0], np.asarray(nums[1:]), int(y)))
        return TaskSpec(name, RANKING, samples, splits,
                        alpha=DEFAULT_ALPHAS.get(name, 1.0))
    if kind == CLASSIFICATION:
        node_type, idx, labels = None, [], []
        for ln in sample_lines:
            parts = ln.split()
            if len(parts) != 4 or parts[0] != "label":
                raise DatasetError(f"{path}: malformed label line {ln!r}")
            node_type = parts[1]
            idx.append(int(parts[2]))
            labels.append(int(parts[3]))
        if node_type is None:
            raise DatasetError(f"{path}: classification task has no samples")
        labels = np.asarray(labels, dtype=np.int64)
        cs = ClfSamples(node_type, np.asarray(idx, dtype=np.int64), labels)
        return TaskSpec(name, CLASSIFICATION, cs, splits,
                        target=(node_type, name),
                        n_classes=int(labels.max()) + 1,
                        alpha=DEFAULT_ALPHAS.get(name, 1.0))
    raise DatasetError(f"{path}: unknown task kind {kind!r}")


def save_tasks(tasks: dict[str, TaskSpec], directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, task in tasks.items():
        save_task(task, directory / f"{name}.task")


def load_tasks(directory) -> dict[str, TaskSpec]:
    directory = Path(directory)
    files = sorted(directory.glob("*.task"))
    if not files:
        raise DatasetError(f"no .task files in {directory}")
    tasks = {}
    for f in files:
        task = load_task(f)
        tasks[task.name] = task
    return tasks


# ---------------------------------------------------------------------------
# ground-truth tables


def save_truth(truth: GroundTruth, path) -> None:
    lines = ["GROUNDTRUTH 1", "attr answer score"]
    lines += [f"{i} {'%.17g' % v}" for i, v in enumerate(truth.answer_score)]
    lines.append("end")
    lines.append("attr user reputation")
    lines += [f"{i} {'%.17g' % v}" for i, v in enumerate(truth.user_reputation)]
    lines.append("end")
    lines.append("attr question accepted_answer")
    lines += [f"{q} {a}" for q, a in sorted(truth.accepted_answer_of.items())]
    lines.append("end")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_truth(path) -> GroundTruth:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().split("\n") if ln != ""]
    if not lines or lines[0] != "GROUNDTRUTH 1":
        raise DatasetError(f"{path}: bad ground-truth header")
    sections: dict[str, list[tuple[int, str]]] = {}
    i = 1
    while i < len(lines):
        if not lines[i].startswith("attr "):
            raise DatasetError(f"{path}: expected attr line, got {lines[i]!r}")
        key = lines[i][len("attr "):]
        rows = []
        i += 1
        while lines[i] != "end":
            a, b = lines[i].split()
            rows.append((int(a), b))
            i += 1
        sections[key] = rows
        i += 1
    score = np.asarray([float(v) for _, v in sections["answer score"]])
    rep = np.asarray([float(v) for _, v in sections["user reputation"]])
    accepted = {q: int(v) for q, v in sections["question accepted_answer"]}
    return GroundTruth(score, rep, accepted)
