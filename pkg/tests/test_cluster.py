"""k-means fitting/assignment against closed forms and a brute-force oracle."""

import itertools

import numpy as np
import pytest

from seralign.cluster import (
    ClusterProvenance,
    Codebook,
    PseudoLabelSeq,
    cluster_diagnostics,
    kmeans_assign,
    kmeans_fit,
    load_codebook,
    load_pseudo_labels,
    save_codebook,
    save_pseudo_labels,
)
from seralign.corpus import GenerationSpec, generate_corpus
from seralign.errors import ConfigurationError, CoverageError, ParseError


def brute_force_two_cluster_inertia(points: np.ndarray) -> float:
    """Exhaustive minimum over all assignments of points to two non-empty
    clusters, scoring each by within-cluster sum of squared distances."""
    n = len(points)
    best = np.inf
    for bits in itertools.product((0, 1), repeat=n):
        labels = np.asarray(bits)
        if labels.min() == labels.max():
            continue
        inertia = 0.0
        for c in (0, 1):
            members = points[labels == c]
            inertia += float(((members - members.mean(axis=0)) ** 2).sum())
        best = min(best, inertia)
    return best


class TestFit:
    def test_single_cluster_closed_form(self):
        rng = np.random.default_rng(0)
        points = rng.normal(size=(40, 3))
        codebook = kmeans_fit(points, k=1, seed=0)
        np.testing.assert_allclose(codebook.centroids[0], points.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(codebook.inertia, ((points - points.mean(axis=0)) ** 2).sum(), rtol=1e-12)

    def test_one_cluster_per_point_has_zero_inertia(self):
        rng = np.random.default_rng(1)
        points = rng.normal(size=(9, 2))
        codebook = kmeans_fit(points, k=9, seed=3)
        assert codebook.inertia == pytest.approx(0.0, abs=1e-20)
        assert len(np.unique(codebook.fit_codes)) == 9

    def test_two_gaussian_blobs_recovered(self):
        rng = np.random.default_rng(2)
        blob_a = rng.normal(-5.0, 0.5, size=(100, 2))
        blob_b = rng.normal(5.0, 0.5, size=(100, 2))
        codebook = kmeans_fit(np.vstack([blob_a, blob_b]), k=2, seed=0)
        centered = sorted(codebook.centroids[:, 0])
        assert abs(centered[0] - blob_a.mean(axis=0)[0]) < 0.2
        assert abs(centered[1] - blob_b.mean(axis=0)[0]) < 0.2

    def test_matches_brute_force_partition_oracle(self):
        # 12 points, K = 2: the best inertia over 20 seeded runs must equal
        # the exhaustive optimum over all two-part assignments
        rng = np.random.default_rng(3)
        points = rng.normal(size=(12, 2))
        optimum = brute_force_two_cluster_inertia(points)
        best = min(kmeans_fit(points, k=2, seed=s).inertia for s in range(20))
        assert best == pytest.approx(optimum, rel=1e-9)

    def test_inertia_non_increasing_across_iteration_budgets(self):
        rng = np.random.default_rng(4)
        points = rng.normal(size=(60, 4))
        inertias = [kmeans_fit(points, k=5, seed=7, max_iters=m).inertia for m in range(1, 8)]
        assert all(b <= a + 1e-9 for a, b in zip(inertias, inertias[1:]))

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(5)
        points = rng.normal(size=(50, 3))
        one = kmeans_fit(points, k=4, seed=11)
        two = kmeans_fit(points, k=4, seed=11)
        assert np.array_equal(one.centroids, two.centroids)
        assert one.inertia == two.inertia
        assert one.codebook_id == two.codebook_id

    def test_more_clusters_than_points_rejected(self):
        with pytest.raises(ConfigurationError):
            kmeans_fit(np.zeros((3, 2)), k=4, seed=0)

    def test_duplicate_points_fit_without_empty_clusters(self):
        # ten copies of two distinct points still yield two centroids
        points = np.vstack([np.zeros((10, 2)), np.ones((10, 2))])
        codebook = kmeans_fit(points, k=2, seed=0)
        assert codebook.inertia == pytest.approx(0.0, abs=1e-20)
        assert sorted(codebook.centroids[:, 0]) == [0.0, 1.0]


class TestAssign:
    def test_point_at_centroid_gets_its_code(self):
        centroids = np.array([[0.0, 0.0], [2.0, 0.0], [4.0, 0.0], [6.0, 0.0]])
        codebook = Codebook(
            centroids=centroids, k=4, provenance=ClusterProvenance("base_features", seed=0), inertia=0.0
        )
        seq = kmeans_assign(codebook, centroids[3][None, :], "u")
        assert seq.codes == (3,)

    def test_equidistant_tie_breaks_to_lower_index(self):
        centroids = np.array([[0.0], [-1.0], [1.0]])
        codebook = Codebook(
            centroids=centroids[1:], k=2, provenance=ClusterProvenance("base_features", seed=0), inertia=0.0
        )
        # frame at 0 is exactly between centroid 0 (-1) and centroid 1 (+1)
        seq = kmeans_assign(codebook, np.array([[0.0]]), "u")
        assert seq.codes == (0,)

    def test_assigning_fit_set_reproduces_final_lloyd_assignment(self):
        rng = np.random.default_rng(6)
        points = rng.normal(size=(80, 3))
        codebook = kmeans_fit(points, k=6, seed=2)
        seq = kmeans_assign(codebook, points, "fitset")
        assert np.array_equal(np.asarray(seq.codes), codebook.fit_codes)

    def test_translation_leaves_codes_unchanged(self):
        rng = np.random.default_rng(7)
        points = rng.normal(size=(30, 4))
        codebook = kmeans_fit(points, k=3, seed=1)
        shift = np.array([10.0, -3.0, 0.5, 2.0])
        shifted = Codebook(
            centroids=codebook.centroids + shift,
            k=codebook.k,
            provenance=codebook.provenance,
            inertia=codebook.inertia,
        )
        original = kmeans_assign(codebook, points, "u").codes
        translated = kmeans_assign(shifted, points + shift, "u").codes
        assert original == translated

    def test_dimension_mismatch_rejected(self):
        codebook = kmeans_fit(np.random.default_rng(8).normal(size=(10, 3)), k=2, seed=0)
        with pytest.raises(ConfigurationError):
            kmeans_assign(codebook, np.zeros((5, 4)), "u")

    def test_assignment_is_pure(self):
        rng = np.random.default_rng(9)
        points = rng.normal(size=(25, 2))
        codebook = kmeans_fit(points, k=3, seed=5)
        assert kmeans_assign(codebook, points, "u") == kmeans_assign(codebook, points, "u")


def _label_corpus():
    return generate_corpus(
        GenerationSpec(sessions=5, utterances_per_speaker=4, feature_dim=6, frames_min=40, frames_max=60, seed=13)
    )


class TestDiagnostics:
    def test_codes_equal_to_truth_give_perfect_purity(self):
        corpus = _label_corpus()
        labels = {
            u.id: PseudoLabelSeq(u.id, tuple(int(t) for t in u.frame_truth), "cb")
            for u in corpus.utterances
        }
        diag = cluster_diagnostics(labels, corpus, k=4)
        assert diag.purity == pytest.approx(1.0)

    def test_uniform_random_codes_approach_chance_purity(self):
        corpus = _label_corpus()
        purities = []
        for seed in range(10):
            rng = np.random.default_rng(seed)
            labels = {
                u.id: PseudoLabelSeq(u.id, tuple(int(c) for c in rng.integers(0, 4, u.num_frames)), "cb")
                for u in corpus.utterances
            }
            purities.append(cluster_diagnostics(labels, corpus, k=4).purity)
        assert abs(np.mean(purities) - 0.25) < 0.03

    def test_single_cluster_purity_is_max_class_frequency(self):
        corpus = _label_corpus()
        labels = {u.id: PseudoLabelSeq(u.id, (0,) * u.num_frames, "cb") for u in corpus.utterances}
        diag = cluster_diagnostics(labels, corpus, k=1)
        truth = np.concatenate([[int(t) for t in u.frame_truth] for u in corpus.utterances])
        expected = np.bincount(truth, minlength=4).max() / truth.size
        assert diag.purity == pytest.approx(expected)

    def test_missing_utterances_listed(self):
        corpus = _label_corpus()
        labels = {
            u.id: PseudoLabelSeq(u.id, (0,) * u.num_frames, "cb") for u in corpus.utterances[:-2]
        }
        with pytest.raises(CoverageError) as err:
            cluster_diagnostics(labels, corpus)
        for utt in corpus.utterances[-2:]:
            assert utt.id in str(err.value)

    def test_transition_rate_of_constant_codes_is_zero(self):
        corpus = _label_corpus()
        labels = {u.id: PseudoLabelSeq(u.id, (2,) * u.num_frames, "cb") for u in corpus.utterances}
        assert cluster_diagnostics(labels, corpus, k=4).code_transition_rate == 0.0


class TestPersistence:
    def test_codebook_round_trip(self, tmp_path):
        rng = np.random.default_rng(10)
        codebook = kmeans_fit(
            rng.normal(size=(30, 4)),
            k=3,
            seed=9,
            provenance=ClusterProvenance(
                feature_kind="transformer_layer",
                seed=9,
                tap_layer=2,
                source_checkpoint="abc123",
                fold_index=1,
                train_speakers=("ses01_F", "ses01_M"),
            ),
        )
        path = tmp_path / "codebook.json"
        save_codebook(codebook, path)
        loaded = load_codebook(path)
        assert loaded == codebook
        assert loaded.codebook_id == codebook.codebook_id

    def test_pseudo_label_round_trip(self, tmp_path):
        labels = [PseudoLabelSeq(f"u{i}", tuple(range(i + 1)), "cb42") for i in range(5)]
        path = tmp_path / "labels.jsonl"
        save_pseudo_labels(labels, path)
        assert load_pseudo_labels(path) == labels

    def test_tampered_codebook_rejected(self, tmp_path):
        codebook = kmeans_fit(np.random.default_rng(11).normal(size=(10, 2)), k=2, seed=0)
        path = tmp_path / "codebook.json"
        save_codebook(codebook, path)
        body = path.read_text()
        first_value = str(codebook.centroids[0, 0])
        path.write_text(body.replace(first_value, str(codebook.centroids[0, 0] + 1.0), 1))
        with pytest.raises(ParseError):
            load_codebook(path)

    def test_mixed_codebook_ids_rejected_on_save(self, tmp_path):
        labels = [PseudoLabelSeq("a", (0,), "cb1"), PseudoLabelSeq("b", (1,), "cb2")]
        with pytest.raises(ConfigurationError):
            save_pseudo_labels(labels, tmp_path / "labels.jsonl")
