import numpy as np
import pytest

from hmtgin.multigraph import load_graph, save_graph
from hmtgin.tasks import (
    CLASSIFICATION,
    DatasetError,
    LINK,
    RANKING,
    SyntheticSpec,
    apply_thresholds,
    bucket_labels,
    build_ranking_samples,
    cqa_schema,
    generate_synthetic,
    load_tasks,
    negative_sample,
    quantile_thresholds,
    save_tasks,
    save_truth,
    load_truth,
    split_indices,
)


class TestSplitIndices:
    def test_ten_samples(self):
        s = split_indices(10, seed=0)
        assert (len(s["train"]), len(s["dev"]), len(s["test"])) == (8, 1, 1)

    def test_hundred_samples(self):
        s = split_indices(100, seed=0)
        assert (len(s["train"]), len(s["dev"]), len(s["test"])) == (80, 10, 10)

    def test_disjoint_and_covering(self):
        for seed in range(5):
            n = int(np.random.default_rng(seed).integers(10, 200))
            s = split_indices(n, seed=seed)
            merged = np.concatenate([s["train"], s["dev"], s["test"]])
            assert len(merged) == n
            assert set(merged.tolist()) == set(range(n))

    def test_deterministic_per_seed(self):
        a, b = split_indices(57, seed=9), split_indices(57, seed=9)
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_too_small_rejected(self):
        with pytest.raises(DatasetError):
            split_indices(9, seed=0)


class TestNegativeSample:
    def graph(self):
        return generate_synthetic(SyntheticSpec()).graph

    def test_exact_count_and_disjointness(self):
        g = self.graph()
        neg = negative_sample(g, "tagged_with", ratio=2, seed=5)
        pos = {(int(i), int(j)) for i, j in g.edges["tagged_with"]}
        assert len(neg) == 2 * len(pos)
        drawn = set(map(tuple, neg.tolist()))
        assert len(drawn) == len(neg)
        assert not (drawn & pos)

    def test_type_correct_endpoints(self):
        g = self.graph()
        neg = negative_sample(g, "tagged_with", seed=1)
        assert neg[:, 0].max() < g.node_counts["question"]
        assert neg[:, 1].max() < g.node_counts["tag"]

    def test_deterministic(self):
        g = self.graph()
        a = negative_sample(g, "answer_to", seed=3)
        b = negative_sample(g, "answer_to", seed=3)
        np.testing.assert_array_equal(a, b)

    def test_symmetric_mode_canonicalizes(self):
        g = self.graph()
        neg = negative_sample(g, "duplicate", seed=2, symmetric=True)
        assert (neg[:, 0] < neg[:, 1]).all()

    def test_insufficient_non_edges(self):
        # a complete bipartite relation leaves nothing to draw
        from hmtgin.multigraph import MultiRelationalGraph, Schema

        schema = Schema.with_reverses(("q", "t"), [("qt", "q", "t")])
        e = np.array([(i, j) for i in range(3) for j in range(2)])
        g = MultiRelationalGraph(schema, {"q": 3, "t": 2},
                                 {"qt": e, "qt_rev": e[:, ::-1]},
                                 {"q": np.zeros((3, 1)), "t": np.zeros((2, 1))})
        with pytest.raises(DatasetError, match="non-edges"):
            negative_sample(g, "qt", seed=0)


class TestBucketLabels:
    def test_quantiles_of_a_range(self):
        labels = bucket_labels(np.arange(100, dtype=float), 4)
        expect = np.repeat([0, 1, 2, 3], 25)
        np.testing.assert_array_equal(labels, expect)

    def test_all_equal_degenerates_to_zero_with_warning(self):
        with pytest.warns(UserWarning, match="degenerate"):
            labels = bucket_labels(np.full(20, 7.0), 4)
        assert (labels == 0).all()

    def test_monotone(self):
        rng = np.random.default_rng(0)
        values = rng.normal(size=200)
        labels = bucket_labels(values, 5)
        order = np.argsort(values)
        assert (np.diff(labels[order]) >= 0).all()
        assert labels.max() < 5

    def test_train_split_thresholds_apply_everywhere(self):
        rng = np.random.default_rng(1)
        values = rng.exponential(size=100)
        thresholds = quantile_thresholds(values[:80], 4)
        labels = apply_thresholds(values, thresholds)
        assert labels.min() >= 0 and labels.max() <= 3

    def test_non_finite_rejected(self):
        with pytest.raises(DatasetError):
            bucket_labels(np.array([1.0, np.nan]), 2)


class TestBuildRankingSamples:
    def test_matches_scan_oracle_and_excludes_short_lists(self):
        data = generate_synthetic(SyntheticSpec())
        g = data.graph
        samples, skipped = build_ranking_samples(g, data.truth.accepted_answer_of)
        by_question = {}
        for a, q in g.edges["answer_to"]:
            by_question.setdefault(int(q), []).append(int(a))
        expect = sum(1 for q, ans in by_question.items()
                     if len(ans) >= 8 and data.truth.accepted_answer_of.get(q) in ans)
        assert len(samples) == expect
        assert skipped == 0
        for s in samples:
            assert len(s.answers) >= 8
            assert list(s.answers) == sorted(s.answers)

    def test_accepted_position_is_list_index(self):
        data = generate_synthetic(SyntheticSpec())
        samples, _ = build_ranking_samples(data.graph,
                                           data.truth.accepted_answer_of)
        for s in samples[:10]:
            acc_local = data.truth.accepted_answer_of[s.question]
            assert s.answers[s.accepted_pos] == acc_local

    def test_question_without_acceptance_skipped(self):
        data = generate_synthetic(SyntheticSpec())
        accepted = dict(data.truth.accepted_answer_of)
        dropped = next(iter(accepted))
        del accepted[dropped]
        samples, skipped = build_ranking_samples(data.graph, accepted)
        assert skipped == 1
        assert all(s.question != dropped for s in samples)


class TestSyntheticSpec:
    def test_min_answers_floor(self):
        with pytest.raises(DatasetError, match="at least 8"):
            SyntheticSpec(min_answers=7).validate()

    def test_tag_pool_must_fit_width(self):
        with pytest.raises(DatasetError, match="tag patterns"):
            SyntheticSpec(tags=9).validate()


class TestGenerator:
    def test_graph_invariants_and_counts(self):
        spec = SyntheticSpec()
        data = generate_synthetic(spec)
        g = data.graph
        g.validate()
        assert g.node_counts["question"] == spec.questions
        assert g.node_counts["user"] == spec.users
        total = sum(g.node_counts.values())
        assert 400 <= total <= 600

    def test_five_tasks_present(self):
        data = generate_synthetic(SyntheticSpec())
        assert sorted(data.tasks) == [
            "answer_ranking", "answer_score", "duplicate_detection",
            "tag_recommendation", "user_reputation"]
        assert data.tasks["tag_recommendation"].kind == LINK
        assert data.tasks["answer_ranking"].kind == RANKING
        assert data.tasks["answer_score"].kind == CLASSIFICATION

    def test_negative_ratio_two_to_one(self):
        data = generate_synthetic(SyntheticSpec())
        for name in ("tag_recommendation", "duplicate_detection"):
            pos, neg = data.tasks[name].samples
            assert len(neg) == 2 * len(pos)

    def test_zero_duplicate_rate_disables_task(self):
        data = generate_synthetic(SyntheticSpec(duplicate_rate=0.0))
        assert "duplicate_detection" in data.disabled
        assert "duplicate_detection" not in data.tasks

    def test_seed_determinism_bytes(self, tmp_path):
        p1, p2 = tmp_path / "a.mrg", tmp_path / "b.mrg"
        save_graph(generate_synthetic(SyntheticSpec(seed=11)).graph, p1)
        save_graph(generate_synthetic(SyntheticSpec(seed=11)).graph, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_planted_acceptance_rank_correlation(self):
        # acceptance indicator must track the score attribute strongly
        data = generate_synthetic(SyntheticSpec())
        score = data.truth.answer_score
        accepted = np.zeros(len(score), dtype=bool)
        for q, a in data.truth.accepted_answer_of.items():
            accepted[a] = True
        ranks = np.empty(len(score))
        ranks[np.argsort(score)] = np.arange(len(score))
        r_acc = ranks[accepted].mean()
        r_rest = ranks[~accepted].mean()
        # normalized rank separation in [-1, 1]; > 0.5 means accepted
        # answers sit in the top ranks
        separation = 2 * (r_acc - r_rest) / len(score)
        assert separation > 0.5

    def test_owner_structure_complete(self):
        data = generate_synthetic(SyntheticSpec())
        e = data.graph.edges["owner_of_answer"]
        assert len(e) == data.graph.node_counts["answer"]
        assert len(set(e[:, 1].tolist())) == len(e)

    def test_masked_attributes_not_feature_columns(self):
        # the label-bearing latents appear only through their dedicated
        # noisy channels, never as the bucketed label value itself
        data = generate_synthetic(SyntheticSpec())
        labels = data.tasks["answer_score"].samples.labels
        f = data.graph.features["answer"]
        for col in range(f.shape[1]):
            assert not np.array_equal(f[:, col], labels.astype(float))


class TestTaskFiles:
    def test_roundtrip(self, tmp_path):
        data = generate_synthetic(SyntheticSpec())
        save_tasks(data.tasks, tmp_path / "tasks")
        loaded = load_tasks(tmp_path / "tasks")
        assert sorted(loaded) == sorted(data.tasks)
        for name, task in data.tasks.items():
            got = loaded[name]
            assert got.kind == task.kind
            for split in ("train", "dev", "test"):
                np.testing.assert_array_equal(got.splits[split],
                                              task.splits[split])
            if task.kind == LINK:
                np.testing.assert_array_equal(got.samples[0].src,
                                              task.samples[0].src)
                np.testing.assert_array_equal(got.samples[1].dst,
                                              task.samples[1].dst)
            elif task.kind == RANKING:
                for a, b in zip(got.samples, task.samples):
                    assert a.question == b.question
                    np.testing.assert_array_equal(a.answers, b.answers)
                    assert a.accepted_pos == b.accepted_pos
            else:
                np.testing.assert_array_equal(got.samples.labels,
                                              task.samples.labels)

    def test_save_is_deterministic(self, tmp_path):
        data = generate_synthetic(SyntheticSpec())
        save_tasks(data.tasks, tmp_path / "t1")
        save_tasks(data.tasks, tmp_path / "t2")
        for f1 in sorted((tmp_path / "t1").glob("*.task")):
            f2 = tmp_path / "t2" / f1.name
            assert f1.read_bytes() == f2.read_bytes()

    def test_default_alphas_applied_on_load(self, tmp_path):
        data = generate_synthetic(SyntheticSpec())
        save_tasks(data.tasks, tmp_path / "tasks")
        loaded = load_tasks(tmp_path / "tasks")
        assert loaded["duplicate_detection"].alpha == 7.0
        assert loaded["answer_score"].alpha == 7.0
        assert loaded["tag_recommendation"].alpha == 1.0

    def test_truth_roundtrip(self, tmp_path):
        data = generate_synthetic(SyntheticSpec())
        path = tmp_path / "truth.txt"
        save_truth(data.truth, path)
        loaded = load_truth(path)
        np.testing.assert_array_equal(loaded.answer_score,
                                      data.truth.answer_score)
        np.testing.assert_array_equal(loaded.user_reputation,
                                      data.truth.user_reputation)
        assert loaded.accepted_answer_of == data.truth.accepted_answer_of

    def test_missing_directory_rejected(self, tmp_path):
        with pytest.raises(DatasetError):
            load_tasks(tmp_path / "nope")


class TestSchemaShape:
    def test_four_node_types_with_reverses(self):
        s = cqa_schema()
        assert s.node_types == ("question", "answer", "user", "tag")
        forward = [e for e in s.edge_types if not e.is_reverse]
        reverse = [e for e in s.edge_types if e.is_reverse]
        assert len(forward) == len(reverse) == 7
