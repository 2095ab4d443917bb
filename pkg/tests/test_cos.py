import numpy as np
import pytest

from cosoc.cos import (
    ForegroundTable,
    ImageFusionRow,
    PatchEntry,
    fusion_row,
    fusion_sample,
    foreground_scores,
    kmeans_fit,
    membership_ratio,
    prune_clusters,
    score_class,
    topk_and_fusion,
)
from cosoc.crops import CropRect
from cosoc.errors import InsufficientData, TooFewPoints
from cosoc.features import normalize_rows


class TestKMeans:
    def test_exact_fit_three_points(self):
        pts = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
        model = kmeans_fit(pts, 3, seed=0)
        assert model.inertia == pytest.approx(0.0, abs=1e-12)
        assert sorted(model.assignment.tolist()) == [0, 1, 2]
        recovered = {tuple(c) for c in model.centroids}
        assert recovered == {(0.0, 0.0), (5.0, 0.0), (0.0, 5.0)}

    def test_two_separated_piles(self):
        pts = np.array([[0.0, 0.0]] * 5 + [[10.0, 10.0]] * 5)
        model = kmeans_fit(pts, 2, seed=1)
        centroids = sorted(map(tuple, model.centroids))
        assert centroids[0] == pytest.approx((0.0, 0.0), abs=1e-9)
        assert centroids[1] == pytest.approx((10.0, 10.0), abs=1e-9)

    def test_single_cluster_is_global_mean(self):
        rng = np.random.default_rng(2)
        pts = rng.standard_normal((40, 3))
        model = kmeans_fit(pts, 1, seed=0)
        np.testing.assert_allclose(model.centroids[0], pts.mean(axis=0), atol=1e-12)

    def test_too_few_points(self):
        with pytest.raises(TooFewPoints):
            kmeans_fit(np.ones((2, 2)), 3)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(3)
        pts = rng.standard_normal((60, 4))
        m1 = kmeans_fit(pts, 4, seed=9)
        m2 = kmeans_fit(pts, 4, seed=9)
        np.testing.assert_array_equal(m1.centroids, m2.centroids)
        np.testing.assert_array_equal(m1.assignment, m2.assignment)

    def test_centroids_are_member_means(self):
        rng = np.random.default_rng(4)
        pts = rng.standard_normal((80, 5))
        model = kmeans_fit(pts, 3, seed=0)
        for j in range(3):
            members = pts[model.assignment == j]
            np.testing.assert_allclose(model.centroids[j], members.mean(axis=0), atol=1e-6)

    def test_every_point_at_nearest_centroid(self):
        rng = np.random.default_rng(5)
        pts = rng.standard_normal((70, 4))
        model = kmeans_fit(pts, 4, seed=2)
        d = np.linalg.norm(pts[:, None, :] - model.centroids[None], axis=2)
        np.testing.assert_array_equal(model.assignment, np.argmin(d, axis=1))

    def test_identical_points_any_h(self):
        pts = np.tile([1.0, 2.0], (10, 1))
        model = kmeans_fit(pts, 3, seed=0)
        assert model.inertia == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(model.centroids, np.tile([1.0, 2.0], (3, 1)))


class TestMembershipRatio:
    def _model(self, assignment, h=3):
        return type(
            "M", (),
            {"centroids": np.zeros((h, 2)), "assignment": np.array(assignment)},
        )()

    def test_full_membership(self):
        model = self._model([0, 1, 0, 2, 0, 0])
        per_image = [[0, 1], [2, 3], [4, 5]]
        ratios = membership_ratio(model, per_image)
        assert ratios[0] == pytest.approx(1.0)

    def test_partial_counting(self):
        assignment = [1] * 3 + [0] * 7
        per_image = [[i] for i in range(10)]
        ratios = membership_ratio(self._model(assignment, h=2), per_image)
        assert ratios[1] == pytest.approx(0.3)
        assert ratios[0] == pytest.approx(0.7)

    def test_set_semantics_two_crops_count_once(self):
        one_crop = membership_ratio(self._model([0, 1], h=2), [[0], [1]])
        two_crops = membership_ratio(self._model([0, 0, 1], h=2), [[0, 1], [2]])
        np.testing.assert_allclose(one_crop, two_crops)


class TestPruneClusters:
    def _model(self, h):
        return type("M", (), {"centroids": np.arange(h * 2.0).reshape(h, 2)})()

    def test_gamma_half(self):
        pruned = prune_clusters(self._model(3), np.array([0.9, 0.4, 0.6]), gamma=0.5)
        assert pruned.indices.tolist() == [0, 2]

    def test_tiny_gamma_keeps_all(self):
        pruned = prune_clusters(self._model(3), np.array([0.2, 0.1, 0.3]), gamma=1e-9)
        assert pruned.indices.tolist() == [0, 1, 2]

    def test_fallback_to_argmax(self):
        pruned = prune_clusters(self._model(3), np.array([0.3, 0.3, 0.25]), gamma=0.5)
        assert pruned.indices.tolist() == [0]
        assert pruned.centroids.shape == (1, 2)


def _pruned(centroids):
    c = np.asarray(centroids, dtype=np.float64)
    return prune_clusters(
        type("M", (), {"centroids": c})(), np.ones(c.shape[0]), gamma=0.5
    )


class TestForegroundScores:
    def test_hand_example_single_centroid(self):
        retained = _pruned([[1.0, 0.0]])
        crops = np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]])
        scores = foreground_scores(crops, retained)
        eta = np.sqrt(2.0)
        assert scores[0] == pytest.approx(1.0, abs=1e-12)
        assert scores[1] == pytest.approx(0.0, abs=1e-12)
        assert scores[2] == pytest.approx(1.0 - np.sqrt(0.8) / eta, abs=1e-9)
        assert scores[2] == pytest.approx(0.3675, abs=5e-4)

    def test_crop_on_centroid_scores_one(self):
        rng = np.random.default_rng(0)
        centroids = normalize_rows(rng.standard_normal((2, 6)))
        crops = np.vstack([centroids[1], rng.standard_normal((4, 6))])
        scores = foreground_scores(crops, _pruned(centroids))
        assert scores[0] == pytest.approx(1.0, abs=1e-12)

    def test_identical_crops_identical_scores(self):
        crops = np.array([[0.3, 0.4], [0.3, 0.4], [2.0, 1.0]])
        scores = foreground_scores(crops, _pruned([[1.0, 0.0]]))
        assert scores[0] == scores[1]

    def test_degenerate_eta_all_ones(self):
        crops = np.tile([0.0, 1.0], (4, 1))
        scores = foreground_scores(crops, _pruned([[0.0, 1.0]]))
        np.testing.assert_array_equal(scores, np.ones(4))

    def test_min_score_is_zero_and_range(self):
        rng = np.random.default_rng(1)
        for trial in range(20):
            crops = rng.standard_normal((15, 5))
            centroids = rng.standard_normal((3, 5))
            scores = foreground_scores(crops, _pruned(centroids))
            assert scores.min() == pytest.approx(0.0, abs=1e-12)
            assert np.all((scores >= 0.0) & (scores <= 1.0))

    def test_matches_bruteforce_oracle(self):
        # exhaustive nearest-centroid recomputation, scalar loops only
        rng = np.random.default_rng(2)
        for trial in range(50):
            n_images = int(rng.integers(2, 21))
            n_crops = int(rng.integers(1, 11))
            h = int(rng.integers(1, 5))
            crops = rng.standard_normal((n_images * n_crops, 6))
            centroids = rng.standard_normal((h, 6))
            scores = foreground_scores(crops, _pruned(centroids))

            dists = []
            for v in crops:
                dists.append(min(np.sqrt(np.sum((v - z) ** 2)) for z in centroids))
            eta = max(dists)
            expected = [1.0 - d / eta for d in dists]
            np.testing.assert_allclose(scores, expected, atol=1e-9)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(3)
        crops = rng.standard_normal((12, 6))
        centroids = rng.standard_normal((3, 6))
        q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        base = foreground_scores(crops, _pruned(centroids))
        rotated = foreground_scores(crops @ q.T, _pruned(centroids @ q.T))
        np.testing.assert_allclose(base, rotated, atol=1e-9)


class TestTopkAndFusion:
    def test_hand_example(self):
        row = fusion_row([("a", 0.9), ("b", 0.6), ("c", 0.5)], k=3)
        assert row.p_original == pytest.approx(0.1, abs=1e-12)
        probs = {p.crop_id: p.prob for p in row.patches}
        assert probs["a"] == pytest.approx(0.405, abs=1e-12)
        assert probs["b"] == pytest.approx(0.27, abs=1e-12)
        assert probs["c"] == pytest.approx(0.225, abs=1e-12)
        assert sum(row.probabilities()) == pytest.approx(1.0, abs=1e-12)

    def test_all_ones_uniform(self):
        row = fusion_row([("a", 1.0), ("b", 1.0), ("c", 1.0), ("d", 1.0)], k=4)
        assert row.p_original == pytest.approx(0.0, abs=1e-12)
        for p in row.patches:
            assert p.prob == pytest.approx(0.25, abs=1e-12)

    def test_all_zero_scores(self):
        row = fusion_row([("a", 0.0), ("b", 0.0), ("c", 0.0)], k=2)
        assert row.p_original == 1.0
        assert all(p.prob == 0.0 for p in row.patches)

    def test_topk_selection_and_tiebreak(self):
        row = fusion_row([("d", 0.5), ("b", 0.7), ("a", 0.5), ("c", 0.9)], k=3)
        assert [p.crop_id for p in row.patches] == ["c", "b", "a"]

    def test_too_few_crops(self):
        with pytest.raises(InsufficientData):
            fusion_row([("a", 0.5)], k=3)

    def test_simplex_property_bulk(self):
        rng = np.random.default_rng(4)
        for trial in range(10_000):
            k = int(rng.integers(1, 6))
            n = k + int(rng.integers(0, 4))
            mode = trial % 50
            if mode == 0:
                scores = np.zeros(n)
            elif mode == 1:
                scores = np.ones(n)
            else:
                scores = rng.random(n)
            row = fusion_row([(f"c{i}", float(s)) for i, s in enumerate(scores)], k=k)
            probs = row.probabilities()
            assert np.all(probs >= 0.0)
            assert abs(probs.sum() - 1.0) < 1e-12

    def test_topk_and_fusion_maps_images(self):
        table = topk_and_fusion(
            {"i1": [("a", 0.2), ("b", 0.8)], "i2": [("a", 0.0), ("b", 0.0)]}, k=2
        )
        assert set(table) == {"i1", "i2"}
        assert table["i2"].p_original == 1.0


class TestFusionSample:
    def test_point_mass_on_original(self):
        row = ImageFusionRow(p_original=1.0, patches=[PatchEntry("a", 0.0, 0.0)])
        for seed in range(10):
            assert fusion_sample(row, seed).kind == "original"

    def test_deterministic_given_seed(self):
        row = fusion_row([("a", 0.9), ("b", 0.4)], k=2)
        picks1 = [fusion_sample(row, s).crop_id for s in range(20)]
        picks2 = [fusion_sample(row, s).crop_id for s in range(20)]
        assert picks1 == picks2

    def test_monte_carlo_matches_simplex(self):
        row = fusion_row([("a", 0.9), ("b", 0.6), ("c", 0.5)], k=3)
        rng = np.random.default_rng(123)
        n = 100_000
        counts = {"original": 0, "a": 0, "b": 0, "c": 0}
        for _ in range(n):
            choice = fusion_sample(row, rng)
            counts[choice.crop_id or "original"] += 1
        probs = {"original": row.p_original, **{p.crop_id: p.prob for p in row.patches}}
        for key, p in probs.items():
            sigma = np.sqrt(n * p * (1.0 - p))
            assert abs(counts[key] - n * p) < 3.0 * sigma + 1e-9

    def test_rect_post_processed(self):
        row = ImageFusionRow(p_original=0.0, patches=[PatchEntry("a", 1.0, 1.0)])
        rects = {"a": CropRect(0.4, 0.4, 0.1, 0.1)}
        choice = fusion_sample(row, 0, rects=rects, min_area_ratio=0.25)
        assert choice.kind == "crop"
        assert choice.rect.area == pytest.approx(0.25, abs=1e-9)


class TestScoreClass:
    def test_identical_pile_scores(self):
        # a tight pile in every image plus one far crop in a single image:
        # the far crop's cluster covers 1/3 < gamma of images, so it is pruned
        # and the far crop lands at distance eta, scoring exactly 0
        pile = np.tile([1.0, 0.0, 0.0], (9, 1))
        outlier = np.array([[0.0, 1.0, 0.0]])
        crops = {
            "i1": np.vstack([pile[:3], outlier]),
            "i2": pile[3:7],
            "i3": pile[7:9],
        }
        scores = score_class(crops, gamma=0.5, n_clusters=2, seed=0)
        assert scores["i1"][:3] == pytest.approx(1.0)
        assert scores["i1"][3] == pytest.approx(0.0)

    def test_insufficient_crops_for_clusters(self):
        with pytest.raises(InsufficientData):
            score_class({"i1": np.ones((2, 3))}, gamma=0.5, n_clusters=5, seed=0)


class TestForegroundTableJson:
    def test_round_trip(self):
        table = ForegroundTable(
            gamma=0.5,
            n_clusters=5,
            top_k=3,
            classes={
                "c": {
                    "i": ImageFusionRow(
                        p_original=0.1,
                        patches=[PatchEntry("a", 0.9, 0.9)],
                    )
                }
            },
        )
        again = ForegroundTable.from_json(table.to_json())
        assert again == table
