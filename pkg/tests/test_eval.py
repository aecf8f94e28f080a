import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from audiomlm import audio
from audiomlm.config import EncoderConfig
from audiomlm.data import Featurizer, ManifestRow, ensure_mel_stats, load_manifest
from audiomlm.encoder import EncoderModel
from audiomlm.errors import ContractError, DataError
from audiomlm.evaluate import (
    ProbeTask,
    accuracy,
    average_precision,
    append_result,
    finetune_classifier,
    linear_probe,
    make_probe_task,
    mean_average_precision,
    per_class_average_precision,
    pooled_features,
    probe_over_seeds,
    results_to_csv,
    split_indices,
)


def _rows(labels):
    return [ManifestRow(f"r{i}", f"p{i}.wav", 1.0, label=l) for i, l in enumerate(labels)]


def _single_task(labels, classes):
    return ProbeTask(rows=_rows(labels), mode="single", metric="accuracy", classes=classes)


class TestMetrics:
    def test_accuracy_bounds_and_exactness(self):
        assert accuracy(np.array([1, 2, 3]), np.array([1, 2, 3])) == 1.0
        assert accuracy(np.array([1, 2, 3]), np.array([1, 2, 0])) == pytest.approx(2 / 3)

    def test_perfect_ranking_map_is_one(self):
        scores = np.array([[0.9], [0.8], [0.1]])
        labels = np.array([[1], [1], [0]])
        assert mean_average_precision(scores, labels) == 1.0

    def test_hand_enumerated_ap(self):
        scores = np.array([0.9, 0.8, 0.1])
        labels = np.array([1, 0, 1])
        assert average_precision(scores, labels) == pytest.approx((1 / 1 + 2 / 3) / 2)

    def test_reversed_ranking_single_positive(self):
        scores = np.array([0.9, 0.8, 0.7, 0.1])
        labels = np.array([0, 0, 0, 1])
        assert average_precision(scores, labels) == pytest.approx(0.25)

    def test_zero_positive_class_skipped_with_warning(self):
        scores = np.array([[0.9, 0.5], [0.1, 0.6]])
        labels = np.array([[1, 0], [0, 0]])
        with pytest.warns(UserWarning, match="skipped"):
            value = mean_average_precision(scores, labels)
        assert value == 1.0
        aps, skipped = per_class_average_precision(scores, labels)
        assert skipped == [1] and set(aps) == {0}

    def test_all_classes_empty_raises(self):
        with pytest.raises(DataError):
            with pytest.warns(UserWarning):
                mean_average_precision(np.ones((2, 1)), np.zeros((2, 1)))

    @given(st.integers(0, 1000), st.floats(0.1, 3.0), st.floats(-2.0, 2.0))
    @settings(max_examples=30, deadline=None)
    def test_map_invariant_to_monotone_transforms(self, seed, scale, shift):
        rng = np.random.default_rng(seed)
        scores = rng.standard_normal((12, 3))
        labels = (rng.random((12, 3)) < 0.4).astype(int)
        labels[0] = 1  # every class has a positive
        base = mean_average_precision(scores, labels)
        transformed = mean_average_precision(scale * scores + shift, labels)
        assert base == pytest.approx(transformed)


class TestSplit:
    def test_deterministic_and_disjoint(self):
        labels = ["a", "b"] * 50
        tr1, va1, te1 = split_indices(labels, 100, seed=3)
        tr2, va2, te2 = split_indices(labels, 100, seed=3)
        np.testing.assert_array_equal(tr1, tr2)
        all_idx = np.concatenate([tr1, va1, te1])
        assert sorted(all_idx) == list(range(100))

    def test_stratified(self):
        labels = ["a"] * 40 + ["b"] * 40
        tr, va, te = split_indices(labels, 80, seed=0)
        tr_labels = [labels[i] for i in tr]
        assert abs(tr_labels.count("a") - tr_labels.count("b")) <= 2


class TestLinearProbe:
    def test_separable_features_reach_99(self):
        rng = np.random.default_rng(0)
        n = 200
        labels = ["c0"] * (n // 2) + ["c1"] * (n // 2)
        features = rng.standard_normal((n, 8)) * 0.1
        features[: n // 2, 0] += 4.0
        task = _single_task(labels, ["c0", "c1"])
        acc, _ = linear_probe(features, task, {"epochs": 200, "lr": 0.1})
        assert acc >= 0.99

    def test_shuffled_labels_hit_chance(self):
        rng = np.random.default_rng(1)
        n = 2000
        features = rng.standard_normal((n, 8))
        features[:, 0] += np.repeat([0.0, 4.0], n // 2)
        shuffled = list(np.array(["c0", "c1"])[rng.integers(2, size=n)])
        task = _single_task(shuffled, ["c0", "c1"])
        acc, _ = linear_probe(features, task, {"epochs": 100, "lr": 0.1})
        assert abs(acc - 0.5) < 0.05

    def test_identical_features_bounded_by_prior(self):
        n = 200
        labels = ["c0"] * (n // 2) + ["c1"] * (n // 2)
        features = np.ones((n, 4))
        task = _single_task(labels, ["c0", "c1"])
        acc, _ = linear_probe(features, task, {"epochs": 50, "lr": 0.1})
        assert acc <= 0.5 + 0.02

    def test_multi_label_probe_uses_map(self):
        rng = np.random.default_rng(2)
        n = 120
        features = rng.standard_normal((n, 6))
        rows = []
        for i in range(n):
            labels = []
            if features[i, 0] > 0:
                labels.append("up")
            if features[i, 1] > 0:
                labels.append("right")
            rows.append(ManifestRow(f"r{i}", "p.wav", 1.0, label=labels or ["none"]))
        task = ProbeTask(rows=rows, mode="multi", metric="mAP",
                         classes=["none", "right", "up"])
        value, _ = linear_probe(features, task, {"epochs": 150, "lr": 0.1})
        assert 0.8 < value <= 1.0

    def test_probe_reproducible_across_repeat_runs(self):
        rng = np.random.default_rng(3)
        features = rng.standard_normal((80, 5))
        labels = ["c0", "c1"] * 40
        task = _single_task(labels, ["c0", "c1"])
        mean1, vals1 = probe_over_seeds(features, task, {"epochs": 60, "lr": 0.05}, seeds=2)
        mean2, vals2 = probe_over_seeds(features, task, {"epochs": 60, "lr": 0.05}, seeds=2)
        assert vals1 == vals2


class TestTaskConstruction:
    def test_make_probe_task_single(self, small_tone_corpus):
        manifest = load_manifest(small_tone_corpus)
        task = make_probe_task(manifest)
        assert task.mode == "single" and task.metric == "accuracy"
        assert task.classes == ["c0", "c1", "c2", "c3"]
        y = task.label_matrix()
        assert y.shape == (24,) and y.max() == 3

    def test_multi_label_task_implies_map(self):
        rows = [ManifestRow("a", "p", 1.0, label=["x", "y"]), ManifestRow("b", "p", 1.0, label="x")]
        from audiomlm.data import Manifest

        task = make_probe_task(Manifest(rows=rows))
        assert task.mode == "multi" and task.metric == "mAP"
        assert task.label_matrix().shape == (2, 2)


class TestFinetune:
    def test_finetune_improves_over_chance_on_tiny_task(self, small_tone_corpus, tmp_path):
        manifest = load_manifest(small_tone_corpus)
        stats = ensure_mel_stats(small_tone_corpus, manifest)
        mean, std = audio.load_stats(stats)
        featurizer = Featurizer(manifest, mean, std)
        cfg = EncoderConfig(hidden=16, ffn=32, layers=1, heads=4, codebook_size=8)
        model = EncoderModel(cfg, np.random.default_rng(0))
        task = make_probe_task(manifest)
        value, detail = finetune_classifier(
            model, featurizer, task, {"epochs": 4, "head_lr": 5e-3, "encoder_lr_scale": 0.1,
                                      "batch_clips": 8}, seed=0
        )
        assert 0.0 <= value <= 1.0
        assert "val_metric" in detail


class TestResultsFiles:
    def test_append_and_csv_export(self, tmp_path):
        path = tmp_path / "results.jsonl"
        append_result(path, "probe:synth", "accuracy", 0.93, 0, "abc123")
        append_result(path, "probe:synth", "accuracy", 0.95, 1, "abc123")
        csv_path = results_to_csv(path, tmp_path / "results.csv")
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "task,metric,value,seed,checkpoint_hash"
        assert len(lines) == 3

    def test_pooling_modes(self, small_tone_corpus):
        manifest = load_manifest(small_tone_corpus)
        stats = ensure_mel_stats(small_tone_corpus, manifest)
        mean, std = audio.load_stats(stats)
        featurizer = Featurizer(manifest, mean, std)
        cfg = EncoderConfig(hidden=16, ffn=32, layers=1, heads=4, codebook_size=8)
        model = EncoderModel(cfg, np.random.default_rng(0))
        rows = manifest.rows[:4]
        mean_feats = pooled_features(model, featurizer, rows, pooling="mean")
        max_feats = pooled_features(model, featurizer, rows, pooling="max")
        assert mean_feats.shape == (4, 16) and max_feats.shape == (4, 16)
        assert not np.allclose(mean_feats, max_feats)
        with pytest.raises(ContractError):
            pooled_features(model, featurizer, rows, pooling="median")
