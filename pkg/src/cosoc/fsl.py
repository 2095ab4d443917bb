"""Episodic few-shot benchmark harness.

Episodes are N-way K-shot tasks drawn from a feature store with per-task
derived RNG streams, so any task is reproducible on its own and parallel
evaluation is order-independent. Classifiers: nearest-prototype cosine
softmax (``cc`` / ``pn-proto``), the same over per-image crop averages
(``multicrop-cc``), and shared-object matching (``soc``).
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import soc
from .errors import CosocError, InsufficientData, MissingGroundTruth, TooFewValues, ZeroVector
from .features import FeatureStore, l2_normalize, normalize_rows
from .rng import derive_rng, seed_sequence

CLASSIFIERS = ("cc", "pn-proto", "soc", "multicrop-cc")

DEFAULT_N_WAY = 5
DEFAULT_K_SHOT = 5
DEFAULT_M_QUERY = 15
DEFAULT_TASKS = 2000
DEFAULT_REPEATS = 5
DEFAULT_CROPS = 7
DEFAULT_ALPHA = 0.8
DEFAULT_BETA = 0.8


@dataclass
class Episode:
    index: int
    classes: list[str]
    support: list[tuple[str, str]]  # (class, image id)
    query: list[tuple[str, str]]


def _class_image_ids(store: FeatureStore) -> dict[str, list[str]]:
    return {cls.name: [img.id for img in cls.images] for cls in store.classes}


def sample_episode(
    class_images: Mapping[str, Sequence[str]],
    n_way: int,
    k_shot: int,
    m_query: int,
    seed: int,
    task_index: int,
) -> Episode:
    """One episode from the per-task RNG stream (seed, task_index)."""
    names = list(class_images)
    rng = derive_rng(seed, "episode", task_index)
    chosen = [names[i] for i in rng.choice(len(names), size=n_way, replace=False)]
    support: list[tuple[str, str]] = []
    query: list[tuple[str, str]] = []
    for cls in chosen:
        ids = class_images[cls]
        perm = rng.permutation(len(ids))
        support.extend((cls, ids[i]) for i in perm[:k_shot])
        query.extend((cls, ids[i]) for i in perm[k_shot : k_shot + m_query])
    return Episode(index=task_index, classes=chosen, support=support, query=query)


def sample_episodes(
    store: FeatureStore | Mapping[str, Sequence[str]],
    n_way: int,
    k_shot: int,
    m_query: int,
    tasks: int,
    seed: int,
) -> list[Episode]:
    """Episodes with disjoint support/query image sets per class."""
    class_images = _class_image_ids(store) if isinstance(store, FeatureStore) else dict(store)
    if len(class_images) < n_way:
        raise InsufficientData(f"{len(class_images)} classes < n_way={n_way}")
    for cls, ids in class_images.items():
        if len(ids) < k_shot + m_query:
            raise InsufficientData(
                f"class {cls!r} has {len(ids)} images; need >= {k_shot + m_query}"
            )
    return [
        sample_episode(class_images, n_way, k_shot, m_query, seed, t) for t in range(tasks)
    ]


def cc_pn_score(query_feature: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Log-softmax over cosine similarities to the class prototypes."""
    scores = _log_softmax_rows(
        np.atleast_2d(np.asarray(query_feature, dtype=np.float64)), np.asarray(prototypes)
    )[0]
    return scores


def _log_softmax_rows(queries: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    cos = normalize_rows(queries) @ normalize_rows(prototypes).T
    shifted = cos - cos.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - log_z
    total = np.exp(out).sum(axis=1)
    assert np.all(np.abs(total - 1.0) < 1e-9), "softmax rows must sum to 1"
    return out


def cc_loss(
    feature: np.ndarray, label: int, weights: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Cosine-softmax cross entropy with analytic gradients.

    Returns ``(loss, grad_feature, grad_weights)`` for learnable per-class
    weight vectors; gradients match central finite differences to < 1e-4
    relative error.
    """
    f = np.asarray(feature, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    n_classes = w.shape[0]
    if not (0 <= label < n_classes):
        raise ValueError(f"label {label} outside [0, {n_classes})")
    f_norm = float(np.linalg.norm(f))
    w_norms = np.linalg.norm(w, axis=1)
    if f_norm < 1e-12 or np.any(w_norms < 1e-12):
        raise ZeroVector("feature and weights must be nonzero")
    f_hat = f / f_norm
    w_hat = w / w_norms[:, None]
    cos = w_hat @ f_hat
    shifted = cos - cos.max()
    z = np.exp(shifted)
    p = z / z.sum()
    loss = float(np.log(z.sum()) - shifted[label])
    dcos = p.copy()
    dcos[label] -= 1.0
    grad_f = (w_hat.T @ dcos - float(cos @ dcos) * f_hat) / f_norm
    grad_w = dcos[:, None] * (f_hat[None, :] - cos[:, None] * w_hat) / w_norms[:, None]
    return loss, grad_f, grad_w


def pn_episode_loss(
    support: np.ndarray, query_features: np.ndarray, query_labels: Sequence[int]
) -> float:
    """Mean negative log-probability of the true class over the episode's queries.

    ``support`` is (n_way, k_shot, d); prototypes are per-class support means.
    """
    sup = np.asarray(support, dtype=np.float64)
    q = np.atleast_2d(np.asarray(query_features, dtype=np.float64))
    labels = np.asarray(query_labels, dtype=np.int64)
    if sup.ndim != 3 or sup.shape[0] < 1 or q.shape[0] < 1 or q.shape[0] != labels.shape[0]:
        raise InsufficientData("episode needs support (N,K,d) and matching query labels")
    prototypes = sup.mean(axis=1)
    scores = _log_softmax_rows(q, prototypes)
    return float(-scores[np.arange(q.shape[0]), labels].mean())


def infonce_loss(
    query: np.ndarray, key: np.ndarray, negatives: np.ndarray | None, tau: float
) -> float:
    """Contrastive loss: pick the key among the negatives at temperature tau."""
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    q = l2_normalize(query)
    sims = [float(q @ l2_normalize(key))]
    if negatives is not None and len(negatives):
        neg = normalize_rows(np.asarray(negatives, dtype=np.float64))
        sims.extend((neg @ q).tolist())
    logits = np.array(sims) / tau
    shifted = logits - logits.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[0])


def multicrop_average(crop_features: np.ndarray) -> np.ndarray:
    """Normalized mean of an image's crop features."""
    crops = np.atleast_2d(np.asarray(crop_features, dtype=np.float64))
    if crops.shape[0] < 1:
        raise InsufficientData("need at least one crop")
    return l2_normalize(crops.mean(axis=0))


def mean_ci(values: Sequence[float]) -> tuple[float, float]:
    """Mean and normal-approximation 95% half-width (1.96 * s / sqrt(n))."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        raise TooFewValues("need at least 2 values")
    return float(arr.mean()), float(1.96 * arr.std(ddof=1) / np.sqrt(arr.size))


@dataclass
class EvalReport:
    repeat_accuracies: list[float]
    mean: float
    ci95: float
    task_ci95: float  # CI over individual task accuracies, for comparison
    per_class_accuracy: dict[str, float]
    config: dict

    def to_json(self) -> dict:
        return {
            "repeat_accuracies": self.repeat_accuracies,
            "mean": self.mean,
            "ci95": self.ci95,
            "task_ci95": self.task_ci95,
            "per_class_accuracy": dict(sorted(self.per_class_accuracy.items())),
            "config": self.config,
        }


# --- feature selection ----------------------------------------------------

Roles = Mapping[str, Mapping[str, Mapping[str, str]]]  # class -> image -> crop -> role


def _role_indices(crop_ids: Sequence[str], roles: Mapping[str, str], role: str) -> list[int]:
    return [i for i, cid in enumerate(crop_ids) if roles.get(cid) == role]


def _single_feature(
    crop_ids: Sequence[str], feats: np.ndarray, variant: str, roles: Mapping[str, str] | None
) -> np.ndarray:
    if variant == "ori":
        if roles:
            idx = _role_indices(crop_ids, roles, "original")
            return feats[idx[0]] if idx else feats[0]
        return feats[0]
    if variant == "fg":
        if not roles:
            raise MissingGroundTruth("fg variant needs per-crop roles")
        idx = _role_indices(crop_ids, roles, "foreground")
        if not idx:
            raise MissingGroundTruth("image has no foreground-role crop")
        return feats[idx[0]]
    raise ValueError(f"unknown variant {variant!r}")


def _crop_bag(
    crop_ids: Sequence[str],
    feats: np.ndarray,
    variant: str,
    roles: Mapping[str, str] | None,
    n_crops: int,
) -> np.ndarray:
    if variant == "fg":
        if not roles:
            raise MissingGroundTruth("fg variant needs per-crop roles")
        idx = _role_indices(crop_ids, roles, "foreground")
        if not idx:
            raise MissingGroundTruth("image has no foreground-role crop")
        bag = feats[idx]
    else:
        bag = feats
    if bag.shape[0] < n_crops:
        raise InsufficientData(f"image has {bag.shape[0]} crops; need >= {n_crops}")
    return bag[:n_crops]


def prepare_features(
    store: FeatureStore,
    classifier: str,
    n_crops: int,
    variant: str = "ori",
    roles: Roles | None = None,
    embedding: np.ndarray | None = None,
) -> dict[str, dict[str, np.ndarray]]:
    """Per-image feature blocks ready for episode evaluation.

    For ``cc``/``pn-proto`` each image maps to a single vector; for
    ``multicrop-cc`` to the normalized mean of its crop bag; for ``soc`` to
    the (n_crops, d) bag itself. An optional linear embedding is applied,
    followed by re-normalization.
    """
    if classifier not in CLASSIFIERS:
        raise ValueError(f"unknown classifier {classifier!r}")
    out: dict[str, dict[str, np.ndarray]] = {}
    for cls in store.classes:
        cls_roles = roles.get(cls.name, {}) if roles else {}
        per_image: dict[str, np.ndarray] = {}
        for img in cls.images:
            feats = np.asarray(img.features, dtype=np.float64)
            if embedding is not None:
                feats = feats @ np.asarray(embedding, dtype=np.float64).T
            feats = normalize_rows(feats)
            img_roles = cls_roles.get(img.id)
            if classifier in ("cc", "pn-proto"):
                per_image[img.id] = _single_feature(img.crop_ids, feats, variant, img_roles)
            elif classifier == "multicrop-cc":
                bag = _crop_bag(img.crop_ids, feats, variant, img_roles, n_crops)
                per_image[img.id] = multicrop_average(bag)
            else:  # soc
                per_image[img.id] = _crop_bag(img.crop_ids, feats, variant, img_roles, n_crops)
        out[cls.name] = per_image
    return out


# --- episode evaluation ---------------------------------------------------


def _evaluate_episode(
    episode: Episode,
    features: Mapping[str, Mapping[str, np.ndarray]],
    classifier: str,
    alpha: float,
    beta: float,
    classify_fn: Callable[[Episode, np.ndarray], Sequence[int]] | None = None,
) -> tuple[dict[str, int], dict[str, int]]:
    """Return (correct, total) query counts per class name."""
    classes = sorted(episode.classes)
    query_feats = np.stack([features[cls][img] for cls, img in episode.query])
    true_labels = np.array([classes.index(cls) for cls, _ in episode.query])

    if classify_fn is not None:
        predicted = np.asarray(classify_fn(episode, query_feats))
    elif classifier in ("cc", "pn-proto", "multicrop-cc"):
        support = {cls: [] for cls in classes}
        for cls, img in episode.support:
            support[cls].append(features[cls][img])
        prototypes = np.stack([np.mean(support[cls], axis=0) for cls in classes])
        scores = _log_softmax_rows(query_feats, prototypes)
        predicted = np.argmax(scores, axis=1)  # first max -> lowest class id on ties
    elif classifier == "soc":
        protos = []
        for cls in classes:
            bags = [features[cls][img] for c, img in episode.support if c == cls]
            protos.append(soc.extract_sorted_prototypes(bags, class_id=cls))
        totals = np.stack(
            [soc.match_totals_batch(query_feats, p, alpha, beta) for p in protos], axis=1
        )
        predicted = np.argmax(totals, axis=1)
    else:
        raise ValueError(f"unknown classifier {classifier!r}")

    correct: dict[str, int] = {cls: 0 for cls in classes}
    total: dict[str, int] = {cls: 0 for cls in classes}
    for pred, true in zip(predicted, true_labels):
        cls = classes[true]
        total[cls] += 1
        if pred == true:
            correct[cls] += 1
    return correct, total


# Worker-process state for parallel evaluation; populated by the initializer.
_WORKER: dict = {}


def _worker_init(payload: dict) -> None:
    _WORKER.update(payload)


def _run_task(args: tuple[int, int]) -> tuple[int, int, int, int, dict[str, int], dict[str, int]]:
    repeat, task = args
    p = _WORKER
    episode = sample_episode(
        p["class_images"], p["n_way"], p["k_shot"], p["m_query"], p["repeat_seeds"][repeat], task
    )
    try:
        correct, total = _evaluate_episode(
            episode, p["features"], p["classifier"], p["alpha"], p["beta"]
        )
    except CosocError as exc:
        raise type(exc)(f"task {task} (repeat {repeat}): {exc}") from exc
    return repeat, task, sum(correct.values()), sum(total.values()), correct, total


def run_benchmark(
    store: FeatureStore,
    classifier: str,
    n_way: int = DEFAULT_N_WAY,
    k_shot: int = DEFAULT_K_SHOT,
    m_query: int = DEFAULT_M_QUERY,
    tasks: int = DEFAULT_TASKS,
    repeats: int = DEFAULT_REPEATS,
    seed: int = 0,
    alpha: float = DEFAULT_ALPHA,
    beta: float = DEFAULT_BETA,
    n_crops: int = DEFAULT_CROPS,
    variant: str = "ori",
    roles: Roles | None = None,
    embedding: np.ndarray | None = None,
    workers: int | None = 1,
    config_extra: Mapping | None = None,
    classify_fn: Callable | None = None,
) -> EvalReport:
    """Evaluate ``classifier`` over ``repeats x tasks`` episodes.

    Results are bit-identical for a fixed seed regardless of ``workers``:
    every task derives its own RNG stream and the fold over task results is
    ordered. ``classify_fn`` is a test hook (single-process only) mapping
    (episode, query features) to predicted label indices.
    """
    class_images = _class_image_ids(store)
    if len(class_images) < n_way:
        raise InsufficientData(f"{len(class_images)} classes < n_way={n_way}")
    for cls_name, ids in class_images.items():
        if len(ids) < k_shot + m_query:
            raise InsufficientData(
                f"class {cls_name!r} has {len(ids)} images; need >= {k_shot + m_query}"
            )
    features = prepare_features(
        store, classifier, n_crops, variant=variant, roles=roles, embedding=embedding
    )
    repeat_seeds = [
        int(seed_sequence(seed, "repeat", r).generate_state(1)[0]) for r in range(repeats)
    ]
    payload = {
        "class_images": class_images,
        "features": features,
        "classifier": classifier,
        "n_way": n_way,
        "k_shot": k_shot,
        "m_query": m_query,
        "alpha": alpha,
        "beta": beta,
        "repeat_seeds": repeat_seeds,
    }
    jobs = [(r, t) for r in range(repeats) for t in range(tasks)]

    if classify_fn is not None or workers is None or workers <= 1:
        _worker_init(payload)
        results = []
        for repeat, task in jobs:
            episode = sample_episode(
                class_images, n_way, k_shot, m_query, repeat_seeds[repeat], task
            )
            try:
                correct, total = _evaluate_episode(
                    episode, features, classifier, alpha, beta, classify_fn=classify_fn
                )
            except CosocError as exc:
                raise type(exc)(f"task {task} (repeat {repeat}): {exc}") from exc
            results.append((repeat, task, sum(correct.values()), sum(total.values()), correct, total))
    else:
        chunk = max(1, len(jobs) // (workers * 8))
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_worker_init, initargs=(payload,)
        ) as pool:
            results = list(pool.map(_run_task, jobs, chunksize=chunk))

    results.sort(key=lambda r: (r[0], r[1]))
    task_acc: dict[int, list[float]] = {r: [] for r in range(repeats)}
    class_correct: dict[str, int] = {}
    class_total: dict[str, int] = {}
    for repeat, _task, n_correct, n_total, correct, total in results:
        task_acc[repeat].append(n_correct / n_total)
        for cls, n in correct.items():
            class_correct[cls] = class_correct.get(cls, 0) + n
        for cls, n in total.items():
            class_total[cls] = class_total.get(cls, 0) + n

    repeat_accuracies = [float(np.mean(task_acc[r])) for r in range(repeats)]
    if repeats >= 2:
        grand_mean, ci = mean_ci(repeat_accuracies)
    else:
        grand_mean, ci = repeat_accuracies[0], 0.0
    all_tasks = [a for r in range(repeats) for a in task_acc[r]]
    task_ci = mean_ci(all_tasks)[1] if len(all_tasks) >= 2 else 0.0
    per_class = {
        cls: class_correct.get(cls, 0) / class_total[cls] for cls in sorted(class_total)
    }
    config = {
        "classifier": classifier,
        "n": n_way,
        "k": k_shot,
        "m": m_query,
        "tasks": tasks,
        "repeats": repeats,
        "alpha": alpha,
        "beta": beta,
        "crops": n_crops,
        "variant": variant,
        "seed": seed,
    }
    if config_extra:
        config.update(config_extra)
    return EvalReport(
        repeat_accuracies=repeat_accuracies,
        mean=grand_mean,
        ci95=ci,
        task_ci95=task_ci,
        per_class_accuracy=per_class,
        config=config,
    )


def soc_episode_traces(
    store: FeatureStore,
    n_way: int = DEFAULT_N_WAY,
    k_shot: int = DEFAULT_K_SHOT,
    m_query: int = DEFAULT_M_QUERY,
    seed: int = 0,
    alpha: float = DEFAULT_ALPHA,
    beta: float = DEFAULT_BETA,
    n_crops: int = DEFAULT_CROPS,
    variant: str = "ori",
    roles: Roles | None = None,
    embedding: np.ndarray | None = None,
    task: int = 0,
    repeat: int = 0,
) -> list[dict]:
    """Full shared-object match traces for one episode (audit/visualization).

    Uses the same per-task RNG stream as ``run_benchmark``, so the traced
    episode is the one the benchmark actually evaluated.
    """
    features = prepare_features(
        store, "soc", n_crops, variant=variant, roles=roles, embedding=embedding
    )
    class_images = _class_image_ids(store)
    rep_seed = int(seed_sequence(seed, "repeat", repeat).generate_state(1)[0])
    episode = sample_episode(class_images, n_way, k_shot, m_query, rep_seed, task)
    classes = sorted(episode.classes)
    protos = []
    for cls in classes:
        bags = [features[cls][img] for c, img in episode.support if c == cls]
        protos.append(soc.extract_sorted_prototypes(bags, class_id=cls))
    traces = []
    for true_cls, img in episode.query:
        per_class = [soc.match_query(features[true_cls][img], p, alpha, beta) for p in protos]
        best = max(per_class, key=lambda t: t.total)
        traces.append(
            {
                "task": task,
                "repeat": repeat,
                "query_class": true_cls,
                "query_image": img,
                "predicted_class": best.class_id,
                "matches": [t.to_json() for t in per_class],
            }
        )
    return traces


def default_workers() -> int:
    return os.cpu_count() or 1
