"""Clustering-based foreground scoring over per-class crop embeddings.

Pipeline per class: k-means over all crop features, keep clusters that cover
at least a ``gamma`` fraction of the class's images, score each crop by its
distance to the nearest retained centroid, then turn the top-k scores of each
image into a sampling simplex over {original image, top-k patches}.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .crops import CropRect, enforce_min_area
from .errors import InsufficientData, TooFewPoints
from .features import FeatureStore, normalize_rows
from .rng import derive_rng

DEFAULT_GAMMA = 0.5
DEFAULT_CLUSTERS = 5
DEFAULT_TOP_K = 3


@dataclass
class ClusterModel:
    """Converged k-means state; ``assignment[i]`` indexes ``centroids`` for point i."""

    centroids: np.ndarray
    assignment: np.ndarray
    inertia: float
    n_iter: int
    converged: bool


def _squared_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # ||p - c||^2 expanded; clamped at 0 against rounding.
    sq = (
        np.sum(points**2, axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + np.sum(centroids**2, axis=1)[None, :]
    )
    return np.maximum(sq, 0.0)


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            # all remaining mass sits on already-chosen points
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((points - points[idx]) ** 2, axis=1))
    return points[chosen].copy()


def kmeans_fit(
    vectors: np.ndarray,
    n_clusters: int,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> ClusterModel:
    """Lloyd's algorithm with seeded k-means++ init.

    Empty clusters are repaired by re-seeding their centroid at the point
    farthest from its assigned centroid. Inertia is asserted non-increasing
    across iterations; convergence is assignment stability or centroid shift
    below ``tol``.
    """
    points = np.asarray(vectors, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("vectors must be a 2-d array")
    n = points.shape[0]
    if n_clusters < 1:
        raise ValueError("n_clusters must be >= 1")
    if n < n_clusters:
        raise TooFewPoints(f"{n} points < {n_clusters} clusters")

    rng = derive_rng(seed, "kmeans")
    centroids = _kmeanspp_init(points, n_clusters, rng)
    assignment = np.full(n, -1, dtype=np.int64)
    prev_inertia = np.inf
    converged = False
    n_iter = 0

    for n_iter in range(1, max_iter + 1):
        d2 = _squared_dists(points, centroids)
        new_assignment = np.argmin(d2, axis=1)
        point_d2 = d2[np.arange(n), new_assignment]

        counts = np.bincount(new_assignment, minlength=n_clusters)
        stolen: list[int] = []
        for j in np.flatnonzero(counts == 0):
            order = np.argsort(-point_d2, kind="stable")
            far = next(int(i) for i in order if int(i) not in stolen)
            stolen.append(far)
            centroids[j] = points[far]
            new_assignment[far] = j
            point_d2[far] = 0.0
            counts = np.bincount(new_assignment, minlength=n_clusters)

        inertia = float(point_d2.sum())
        assert inertia <= prev_inertia + 1e-9, "k-means inertia increased"
        stable = bool(np.array_equal(new_assignment, assignment))
        assignment = new_assignment
        prev_inertia = inertia

        new_centroids = centroids.copy()
        for j in range(n_clusters):
            members = points[assignment == j]
            if len(members):
                new_centroids[j] = members.mean(axis=0)
        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if stable or shift < tol:
            converged = True
            break

    return ClusterModel(
        centroids=centroids,
        assignment=assignment,
        inertia=prev_inertia,
        n_iter=n_iter,
        converged=converged,
    )


def membership_ratio(
    model: ClusterModel, crops_per_image: Sequence[Sequence[int]]
) -> np.ndarray:
    """Fraction of images with at least one crop assigned to each cluster.

    ``crops_per_image[i]`` lists the flat point indices belonging to image i;
    multiple crops of one image in the same cluster count once.
    """
    h = model.centroids.shape[0]
    counts = np.zeros(h, dtype=np.int64)
    for indices in crops_per_image:
        clusters = {int(model.assignment[i]) for i in indices}
        for j in clusters:
            counts[j] += 1
    return counts / float(len(crops_per_image))


@dataclass
class PrunedClusters:
    """Centroids whose image-coverage ratio survived the gamma threshold."""

    centroids: np.ndarray
    ratios: np.ndarray
    indices: np.ndarray  # original cluster ids, ascending


def prune_clusters(model: ClusterModel, ratios: np.ndarray, gamma: float) -> PrunedClusters:
    """Keep clusters with coverage >= gamma; fall back to the best one if none pass."""
    if not (0.0 < gamma <= 1.0):
        raise ValueError("gamma must be in (0, 1]")
    ratios = np.asarray(ratios, dtype=np.float64)
    keep = np.flatnonzero(ratios >= gamma)
    if keep.size == 0:
        keep = np.array([int(np.argmax(ratios))])
    return PrunedClusters(
        centroids=model.centroids[keep].copy(), ratios=ratios[keep].copy(), indices=keep
    )


def foreground_scores(vectors: np.ndarray, retained: PrunedClusters) -> np.ndarray:
    """Score each crop as 1 - (distance to nearest retained centroid) / eta.

    ``eta`` is the largest such distance over the class, so scores land in
    [0, 1] with the farthest crop at exactly 0. If every crop sits on a
    centroid (eta == 0) all scores degenerate to 1.
    """
    points = np.asarray(vectors, dtype=np.float64)
    if points.shape[0] < 1:
        raise InsufficientData("no crops to score")
    if retained.centroids.shape[0] < 1:
        raise InsufficientData("no retained centroids")
    d = np.sqrt(_squared_dists(points, retained.centroids)).min(axis=1)
    eta = float(d.max())
    if eta <= 0.0:
        return np.ones(points.shape[0])
    return 1.0 - d / eta


@dataclass
class PatchEntry:
    crop_id: str
    score: float
    prob: float


@dataclass
class ImageFusionRow:
    """Sampling simplex for one image: original-vs-patch probabilities."""

    p_original: float
    patches: list[PatchEntry]

    def probabilities(self) -> np.ndarray:
        return np.array([self.p_original] + [p.prob for p in self.patches])


def fusion_row(scored: Sequence[tuple[str, float]], k: int) -> ImageFusionRow:
    """Build one image's simplex from its (crop_id, score) pairs.

    Top-k patches by score (ties to the lower crop id) share probability mass
    ``max(scores)`` proportionally to their scores; the original image keeps
    ``1 - max(scores)``. All-zero scores put the whole mass on the original.
    """
    if len(scored) < k:
        raise InsufficientData(f"need >= {k} scored crops, got {len(scored)}")
    top = sorted(scored, key=lambda item: (-item[1], item[0]))[:k]
    scores = np.array([s for _, s in top], dtype=np.float64)
    if np.any(scores < 0.0) or np.any(scores > 1.0):
        raise ValueError("scores must lie in [0, 1]")
    s_max = float(scores.max())
    total = float(scores.sum())
    if total <= 0.0:
        return ImageFusionRow(p_original=1.0, patches=[PatchEntry(c, 0.0, 0.0) for c, _ in top])
    probs = scores / total * s_max
    return ImageFusionRow(
        p_original=1.0 - s_max,
        patches=[
            PatchEntry(crop_id, float(score), float(prob))
            for (crop_id, _), score, prob in zip(top, scores, probs)
        ],
    )


def topk_and_fusion(
    scores_by_image: Mapping[str, Sequence[tuple[str, float]]], k: int
) -> dict[str, ImageFusionRow]:
    """Per-image fusion rows for one class."""
    return {image_id: fusion_row(scored, k) for image_id, scored in scores_by_image.items()}


@dataclass
class ForegroundTable:
    """Fusion rows for every image, grouped by class, plus the scoring config."""

    gamma: float
    n_clusters: int
    top_k: int
    classes: dict[str, dict[str, ImageFusionRow]]

    def to_json(self) -> dict:
        return {
            "gamma": self.gamma,
            "H": self.n_clusters,
            "k": self.top_k,
            "classes": {
                cls: {
                    image_id: {
                        "p_original": row.p_original,
                        "patches": [
                            {"crop_id": p.crop_id, "score": p.score, "prob": p.prob}
                            for p in row.patches
                        ],
                    }
                    for image_id, row in images.items()
                }
                for cls, images in self.classes.items()
            },
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "ForegroundTable":
        return cls(
            gamma=float(d["gamma"]),
            n_clusters=int(d["H"]),
            top_k=int(d["k"]),
            classes={
                name: {
                    image_id: ImageFusionRow(
                        p_original=float(row["p_original"]),
                        patches=[
                            PatchEntry(str(p["crop_id"]), float(p["score"]), float(p["prob"]))
                            for p in row["patches"]
                        ],
                    )
                    for image_id, row in images.items()
                }
                for name, images in d["classes"].items()
            },
        )


def score_class(
    crops_per_image: Mapping[str, np.ndarray],
    gamma: float,
    n_clusters: int,
    seed: int,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> dict[str, np.ndarray]:
    """Foreground scores for one class, keyed by image id.

    ``crops_per_image`` maps image id to a (n_crops, dim) block; features are
    re-normalized before clustering.
    """
    image_ids = list(crops_per_image)
    blocks = [normalize_rows(crops_per_image[i]) for i in image_ids]
    flat = np.concatenate(blocks, axis=0)
    if flat.shape[0] < n_clusters:
        raise InsufficientData(
            f"class has {flat.shape[0]} crops; need >= {n_clusters} for clustering"
        )
    model = kmeans_fit(flat, n_clusters, seed=seed, max_iter=max_iter, tol=tol)
    index_lists = []
    cursor = 0
    for block in blocks:
        index_lists.append(range(cursor, cursor + block.shape[0]))
        cursor += block.shape[0]
    ratios = membership_ratio(model, index_lists)
    retained = prune_clusters(model, ratios, gamma)
    scores = foreground_scores(flat, retained)
    out: dict[str, np.ndarray] = {}
    cursor = 0
    for image_id, block in zip(image_ids, blocks):
        out[image_id] = scores[cursor : cursor + block.shape[0]]
        cursor += block.shape[0]
    return out


def score_store(
    store: FeatureStore,
    gamma: float = DEFAULT_GAMMA,
    n_clusters: int = DEFAULT_CLUSTERS,
    top_k: int = DEFAULT_TOP_K,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> ForegroundTable:
    """Run the full scoring pipeline over every class of a store."""
    classes: dict[str, dict[str, ImageFusionRow]] = {}
    for cls in store.classes:
        crops = {img.id: img.features for img in cls.images}
        try:
            scores = score_class(crops, gamma, n_clusters, seed=seed, max_iter=max_iter, tol=tol)
        except (InsufficientData, TooFewPoints) as exc:
            raise InsufficientData(f"class {cls.name!r}: {exc}") from exc
        scored_by_image = {
            img.id: list(zip(img.crop_ids, scores[img.id].tolist())) for img in cls.images
        }
        try:
            classes[cls.name] = topk_and_fusion(scored_by_image, top_k)
        except InsufficientData as exc:
            raise InsufficientData(f"class {cls.name!r}: {exc}") from exc
    return ForegroundTable(gamma=gamma, n_clusters=n_clusters, top_k=top_k, classes=classes)


@dataclass
class FusionChoice:
    """Outcome of one fusion draw: the original image or a specific patch."""

    kind: str  # "original" | "crop"
    crop_id: str | None = None
    rect: CropRect | None = None


def fusion_sample(
    row: ImageFusionRow,
    rng: np.random.Generator | int,
    rects: Mapping[str, CropRect] | None = None,
    min_area_ratio: float | None = None,
) -> FusionChoice:
    """Draw from an image's fusion simplex.

    With ``rects`` given, a chosen patch's rect is returned after
    ``enforce_min_area`` (using ``min_area_ratio``, if set).
    """
    if isinstance(rng, (int, np.integer)):
        rng = derive_rng(int(rng), "fusion")
    probs = row.probabilities()
    cum = np.cumsum(probs)
    idx = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    idx = min(idx, len(probs) - 1)
    if idx == 0:
        return FusionChoice(kind="original")
    patch = row.patches[idx - 1]
    rect = None
    if rects is not None:
        rect = rects[patch.crop_id]
        if min_area_ratio is not None:
            rect = enforce_min_area(rect, min_area_ratio)
    return FusionChoice(kind="crop", crop_id=patch.crop_id, rect=rect)
