"""Shared-object prototype extraction and weighted matching for support/query crops.

Step 1 finds, per class, one direction per round that the support images'
remaining crops agree on — exactly (assignment enumeration) when the search
space is small, otherwise by projected gradient ascent on the unit sphere —
removing the matched crop of every image between rounds. Step 2 greedily
matches query crops against the resulting rank-ordered prototypes with
exponentially decaying belief weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import CountMismatch, EnumerationCapExceeded, KTooSmall, RaggedCrops
from .features import normalize_rows
from .rng import derive_rng

ENUMERATION_CAP = 10**6


def assignment_objective(crop_sets: Sequence[np.ndarray], assignment: Sequence[int]) -> float:
    """Sum of pairwise cosines between the selected crop of every image pair."""
    chosen = normalize_rows(np.stack([np.asarray(c)[i] for c, i in zip(crop_sets, assignment)]))
    total = 0.0
    for i in range(len(chosen)):
        for j in range(i + 1, len(chosen)):
            total += float(chosen[i] @ chosen[j])
    return total


def shared_prototype_bruteforce(
    crop_sets: Sequence[np.ndarray], cap: int = ENUMERATION_CAP
) -> tuple[np.ndarray, np.ndarray]:
    """Exact shared prototype: best one-crop-per-image assignment.

    Returns ``(omega, assignment)`` where ``assignment[k]`` indexes image k's
    crops, the assignment maximizes the sum of pairwise cosines (ties broken
    by the lexicographically smallest index tuple), and ``omega`` is the raw
    mean of the selected unit vectors.
    """
    sets = [normalize_rows(np.asarray(c, dtype=np.float64)) for c in crop_sets]
    k = len(sets)
    if k < 2:
        raise KTooSmall("need at least 2 support images")
    sizes = [s.shape[0] for s in sets]
    total = math.prod(sizes)
    if total > cap:
        raise EnumerationCapExceeded(f"{total} assignments exceed cap {cap}")

    objective = np.zeros(sizes)
    for i in range(k):
        for j in range(i + 1, k):
            shape = [1] * k
            shape[i], shape[j] = sizes[i], sizes[j]
            objective = objective + (sets[i] @ sets[j].T).reshape(shape)
    # np.argmax returns the first maximum in C order == smallest index tuple
    assignment = np.array(np.unravel_index(int(np.argmax(objective)), objective.shape))
    omega = np.mean([sets[i][assignment[i]] for i in range(k)], axis=0)
    return omega, assignment


@dataclass
class IterativeResult:
    vector: np.ndarray
    objective: float
    converged: bool
    n_iter: int


def _sharedness(omega: np.ndarray, sets: Sequence[np.ndarray]) -> float:
    return float(sum(np.max(s @ omega) for s in sets))


_MAX_STARTS = 33


def _gradient_ascend(
    omega: np.ndarray,
    sets: Sequence[np.ndarray],
    lr: float,
    max_iter: int,
    tol: float,
) -> IterativeResult:
    """Projected gradient ascent from one start; objective never decreases."""
    value = _sharedness(omega, sets)
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        grad = np.zeros_like(omega)
        for s in sets:
            grad += s[int(np.argmax(s @ omega))]
        grad -= (grad @ omega) * omega  # tangential component on the sphere

        step = lr
        accepted = False
        for _ in range(30):
            candidate = omega + step * grad
            cnorm = float(np.linalg.norm(candidate))
            if cnorm >= 1e-12:
                candidate = candidate / cnorm
                cand_value = _sharedness(candidate, sets)
                if cand_value >= value:
                    accepted = True
                    break
            step /= 2.0
        if not accepted:
            converged = True  # no ascent direction left at any step size
            break
        delta = cand_value - value
        omega, value = candidate, cand_value
        if delta < tol:
            converged = True
            break

    # alternating-maximization polish: re-anchor on the mean of the currently
    # matched crops while that strictly raises the objective
    for _ in range(max_iter):
        anchor = np.zeros_like(omega)
        for s in sets:
            anchor += s[int(np.argmax(s @ omega))]
        anorm = float(np.linalg.norm(anchor))
        if anorm < 1e-12:
            break
        anchor /= anorm
        anchor_value = _sharedness(anchor, sets)
        if anchor_value <= value + 1e-15:
            break
        omega, value = anchor, anchor_value
    return IterativeResult(vector=omega, objective=value, converged=converged, n_iter=n_iter)


def shared_prototype_iterative(
    crop_sets: Sequence[np.ndarray],
    seed: int = 0,
    lr: float = 0.1,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> IterativeResult:
    """Approximate shared prototype by multi-start ascent on the unit sphere.

    Maximizes the sum over images of the best cosine between the candidate
    direction and that image's crops. The objective is multimodal, so ascent
    runs from the normalized crop mean and from (a bounded round-robin of)
    the crops themselves; the best final objective wins deterministically.
    Returns the best iterate with ``converged=False`` if the winning start
    exhausted ``max_iter``.
    """
    sets = [normalize_rows(np.asarray(c, dtype=np.float64)) for c in crop_sets]
    if len(sets) < 2:
        raise KTooSmall("need at least 2 support images")

    stacked = np.concatenate(sets, axis=0)
    mean = stacked.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm < 1e-12:
        rng = derive_rng(seed, "soc-init")
        mean = rng.standard_normal(stacked.shape[1])
        norm = float(np.linalg.norm(mean))
    starts = [mean / norm]
    max_v = max(s.shape[0] for s in sets)
    for n in range(max_v):  # round-robin so every image seeds early
        for s in sets:
            if n < s.shape[0] and len(starts) < _MAX_STARTS:
                starts.append(s[n])

    best: IterativeResult | None = None
    for omega0 in starts:
        result = _gradient_ascend(omega0, sets, lr, max_iter, tol)
        if best is None or result.objective > best.objective + 1e-15:
            best = result
    return best


@dataclass
class SortedPrototypes:
    """Rank-ordered class prototypes from step 1.

    ``ranks`` keeps each prototype's extraction order (1-based) for belief
    weighting; ``weighted=False`` (the single-support-image case) gives every
    prototype full weight since no extraction order exists.
    """

    class_id: str
    vectors: np.ndarray
    ranks: np.ndarray
    weighted: bool = True

    def __len__(self) -> int:
        return self.vectors.shape[0]


def extract_sorted_prototypes(
    crop_sets: Sequence[np.ndarray],
    class_id: str = "",
    method: str = "auto",
    cap: int = ENUMERATION_CAP,
    seed: int = 0,
    lr: float = 0.1,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> SortedPrototypes:
    """Run step 1: one prototype per round, removing each image's matched crop.

    ``method`` is ``exact`` (assignment enumeration; removes the assigned
    crops), ``iterative`` (sphere ascent; removes each image's most similar
    crop), or ``auto`` (exact while the enumeration fits under ``cap``).
    A single support image skips the search: its crops are the prototypes.
    """
    sets = [normalize_rows(np.asarray(c, dtype=np.float64)) for c in crop_sets]
    if not sets:
        raise KTooSmall("need at least 1 support image")
    v = sets[0].shape[0]
    if any(s.shape[0] != v for s in sets):
        raise RaggedCrops([s.shape[0] for s in sets])
    if method not in ("auto", "exact", "iterative"):
        raise ValueError(f"unknown method {method!r}")

    ranks = np.arange(1, v + 1)
    if len(sets) == 1:
        return SortedPrototypes(class_id=class_id, vectors=sets[0], ranks=ranks, weighted=False)

    if method == "auto":
        method = "exact" if len(sets[0]) ** len(sets) <= cap else "iterative"

    remaining = [s.copy() for s in sets]
    omegas = []
    for _ in range(v):
        if method == "exact":
            omega, assignment = shared_prototype_bruteforce(remaining, cap=cap)
            removed = assignment
        else:
            omega = shared_prototype_iterative(
                remaining, seed=seed, lr=lr, max_iter=max_iter, tol=tol
            ).vector
            removed = [int(np.argmax(s @ omega)) for s in remaining]
        omegas.append(omega)
        remaining = [np.delete(s, idx, axis=0) for s, idx in zip(remaining, removed)]
    return SortedPrototypes(
        class_id=class_id, vectors=np.stack(omegas), ranks=ranks, weighted=True
    )


@dataclass
class MatchRound:
    query_index: int
    proto_rank: int
    cosine: float
    score: float  # alpha-weighted cosine


@dataclass
class MatchTrace:
    """Audit trail of one query-vs-class matching: per-round picks and the total."""

    class_id: str
    rounds: list[MatchRound] = field(default_factory=list)
    total: float = 0.0

    def recompute_total(self, beta: float) -> float:
        return float(sum(beta**n * r.score for n, r in enumerate(self.rounds)))

    def to_json(self) -> dict:
        return {
            "class": self.class_id,
            "total": self.total,
            "rounds": [
                {
                    "query_index": r.query_index,
                    "proto_rank": r.proto_rank,
                    "cosine": r.cosine,
                    "score": r.score,
                }
                for r in self.rounds
            ],
        }


def _check_factors(alpha: float, beta: float) -> None:
    if not (0.0 < alpha <= 1.0):
        raise ValueError("alpha must be in (0, 1]")
    if not (0.0 < beta <= 1.0):
        raise ValueError("beta must be in (0, 1]")


def _proto_weights(protos: SortedPrototypes, alpha: float) -> np.ndarray:
    if not protos.weighted:
        return np.ones(len(protos))
    return alpha ** (protos.ranks.astype(np.float64) - 1.0)


def match_query(
    query_crops: np.ndarray, protos: SortedPrototypes, alpha: float, beta: float
) -> MatchTrace:
    """Greedy weighted matching of query crops against class prototypes.

    Each round picks the remaining (crop, prototype) pair with the highest
    alpha-weighted cosine (weights use the prototype's original rank; ties go
    to the smaller (rank, crop index)), removes both, and adds the pick with
    a beta-decayed round weight.
    """
    _check_factors(alpha, beta)
    q = normalize_rows(np.asarray(query_crops, dtype=np.float64))
    if q.shape[0] != len(protos):
        raise CountMismatch(f"{q.shape[0]} query crops vs {len(protos)} prototypes")
    v = q.shape[0]
    cos = q @ normalize_rows(protos.vectors).T  # (crop, proto)
    weighted = (cos * _proto_weights(protos, alpha)[None, :]).T.copy()  # (proto, crop)

    trace = MatchTrace(class_id=protos.class_id)
    total = 0.0
    for n in range(v):
        flat = int(np.argmax(weighted))  # first max in (rank, crop) order
        j, i = divmod(flat, v)
        score = float(weighted[j, i])
        trace.rounds.append(
            MatchRound(
                query_index=i,
                proto_rank=int(protos.ranks[j]),
                cosine=float(cos[i, j]),
                score=score,
            )
        )
        total += beta**n * score
        weighted[j, :] = -np.inf
        weighted[:, i] = -np.inf
    trace.total = total
    return trace


def match_totals_batch(
    queries: np.ndarray, protos: SortedPrototypes, alpha: float, beta: float
) -> np.ndarray:
    """Vectorized ``match_query(...).total`` for a (n_queries, V, d) stack."""
    _check_factors(alpha, beta)
    q = np.asarray(queries, dtype=np.float64)
    nq, v, _ = q.shape
    if v != len(protos):
        raise CountMismatch(f"{v} query crops vs {len(protos)} prototypes")
    qn = q / np.linalg.norm(q, axis=2, keepdims=True)
    cos = np.einsum("qvd,pd->qpv", qn, normalize_rows(protos.vectors))
    weighted = np.ascontiguousarray(cos * _proto_weights(protos, alpha)[None, :, None])
    totals = np.zeros(nq)
    rows = np.arange(nq)
    for n in range(v):
        flat = weighted.reshape(nq, v * v)  # view; masking below writes through
        idx = np.argmax(flat, axis=1)
        totals += beta**n * flat[rows, idx]
        j, i = np.divmod(idx, v)
        weighted[rows, j, :] = -np.inf
        weighted[rows, :, i] = -np.inf
    return totals


def classify_query(
    query_crops: np.ndarray,
    class_protos: Sequence[SortedPrototypes],
    alpha: float,
    beta: float,
) -> tuple[str, dict[str, float]]:
    """Score a query against every class and pick the best (ties: lower class id)."""
    if not class_protos:
        raise ValueError("need at least one class")
    ordered = sorted(class_protos, key=lambda p: p.class_id)
    scores = {p.class_id: match_query(query_crops, p, alpha, beta).total for p in ordered}
    best = max(ordered, key=lambda p: scores[p.class_id])  # max keeps the first on ties
    return best.class_id, scores
