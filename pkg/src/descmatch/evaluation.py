"""Retrieval evaluation: recall metrics, hierarchy-aware diagnostics,
and report files.

Rankings sort by descending similarity with ties broken toward the lower
index, so every metric is deterministic for a given matrix.  Recalls are
percentages; RSUM is the six-way sum of R@{1,5,10} in both directions,
accumulated with math.fsum so the reported value is the correctly rounded
float64 sum of its terms.
"""

from __future__ import annotations

import csv
import json
import math
import warnings

import numpy as np
from scipy import stats

from . import geometry

KS = (1, 5, 10)


def ranked_indices(scores: np.ndarray) -> np.ndarray:
    """Indices ordered by descending score; equal scores keep index order."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.shape[0]), -scores))


def recall_at_k(sims: np.ndarray, image_of_text: np.ndarray, k: int,
                direction: str) -> float:
    """Percentage of queries whose top-k contains a relevant item.

    direction "i2t": each image queries the texts it owns (any hit
    counts).  direction "t2i": each text queries its single owning image.
    """
    sims = np.asarray(sims, dtype=np.float64)
    owners = np.asarray(image_of_text, dtype=np.int64)
    n_img, n_txt = sims.shape
    if owners.shape != (n_txt,):
        raise ValueError("image_of_text must have one entry per text")
    if k < 1:
        raise ValueError("k must be >= 1")
    if direction == "i2t":
        hits = sum(
            1 for i in range(n_img)
            if np.any(owners[ranked_indices(sims[i])[:k]] == i)
        )
        return 100.0 * hits / n_img
    if direction == "t2i":
        hits = sum(
            1 for j in range(n_txt)
            if owners[j] in ranked_indices(sims[:, j])[:k]
        )
        return 100.0 * hits / n_txt
    raise ValueError(f"unknown direction {direction!r}")


def recall_suite(sims: np.ndarray, image_of_text: np.ndarray,
                 ks: tuple[int, ...] = KS) -> dict:
    out = {}
    for direction in ("i2t", "t2i"):
        out[direction] = {k: recall_at_k(sims, image_of_text, k, direction)
                          for k in ks}
    return out


def rsum_from_recalls(recalls) -> float:
    """Correctly rounded float64 sum of the six recall percentages."""
    vals = list(recalls)
    if len(vals) != 6:
        raise ValueError("rsum needs exactly six recall values")
    return math.fsum(vals)


def rsum(sims: np.ndarray, image_of_text: np.ndarray,
         ks: tuple[int, ...] = KS) -> float:
    suite = recall_suite(sims, image_of_text, ks)
    return rsum_from_recalls(
        [suite["i2t"][k] for k in ks] + [suite["t2i"][k] for k in ks])


def fold_slices(n_images: int, n_folds: int) -> list[tuple[int, int]]:
    """Contiguous image ranges, sizes differing by at most one."""
    if not 1 <= n_folds <= n_images:
        raise ValueError("need at least one image per fold")
    base, extra = divmod(n_images, n_folds)
    slices = []
    start = 0
    for f in range(n_folds):
        size = base + (1 if f < extra else 0)
        slices.append((start, start + size))
        start += size
    return slices


def folded_recall_suite(image_embs: np.ndarray, text_embs: np.ndarray,
                        image_of_text: np.ndarray, n_folds: int = 5,
                        ks: tuple[int, ...] = KS) -> dict:
    """Evaluate each contiguous image fold against its own texts, then
    average the recalls and RSUM arithmetically over folds."""
    owners = np.asarray(image_of_text, dtype=np.int64)
    folds = []
    for start, stop in fold_slices(image_embs.shape[0], n_folds):
        keep = np.flatnonzero((owners >= start) & (owners < stop))
        if keep.size == 0:
            raise ValueError("a fold has no texts")
        sims = geometry.sim_matrix(image_embs[start:stop], text_embs[keep])
        suite = recall_suite(sims, owners[keep] - start, ks)
        suite["rsum"] = rsum_from_recalls(
            [suite["i2t"][k] for k in ks] + [suite["t2i"][k] for k in ks])
        folds.append(suite)
    mean = {
        d: {k: float(np.mean([f[d][k] for f in folds])) for k in ks}
        for d in ("i2t", "t2i")
    }
    mean["rsum"] = float(np.mean([f["rsum"] for f in folds]))
    return {"folds": folds, "mean": mean}


# ---------------------------------------------------------------------------
# Hierarchy-aware diagnostics


def nearest_candidate(point: np.ndarray, candidates: np.ndarray) -> int:
    """Index of the Euclidean-closest candidate; ties go to the lower index."""
    diffs = candidates - point
    return int(np.argmin(np.einsum("ij,ij->i", diffs, diffs)))


def hierarchical_traverse(image_emb: np.ndarray, candidates: np.ndarray,
                          root_emb: np.ndarray, n_points: int = 50) -> list[int]:
    """Walk the segment from the image's nearest candidate to the root and
    collect the top-1 candidate at n_points equally spaced stations.

    The interpolated points are used as-is (no re-normalization), and the
    result keeps first-encounter order without duplicates: specific
    retrievals appear before generic ones.
    """
    if n_points < 2:
        raise ValueError("need at least the two endpoints")
    start = candidates[nearest_candidate(image_emb, candidates)]
    seen: list[int] = []
    for t in np.linspace(0.0, 1.0, n_points):
        point = (1.0 - t) * start + t * root_emb
        idx = nearest_candidate(point, candidates)
        if idx not in seen:
            seen.append(idx)
    return seen


def set_precision_recall(retrieved, relevant) -> tuple[float, float]:
    """Set overlap as percentages; empty inputs score zero."""
    retrieved_set, relevant_set = set(retrieved), set(relevant)
    inter = len(retrieved_set & relevant_set)
    precision = 100.0 * inter / len(retrieved_set) if retrieved_set else 0.0
    recall = 100.0 * inter / len(relevant_set) if relevant_set else 0.0
    return precision, recall


def centroid_root(text_embs: np.ndarray) -> np.ndarray:
    """Embedding standing in for the empty description: the normalized
    centroid of the candidate texts."""
    mean = np.asarray(text_embs, dtype=np.float64).mean(axis=0)
    return geometry.l2_normalize(mean[None, :])[0]


def hierarchical_report(image_embs: np.ndarray, text_embs: np.ndarray,
                        image_of_text: np.ndarray, root_emb: np.ndarray | None = None,
                        n_points: int = 50) -> dict:
    """Mean set precision/recall of the traversal retrieval per image,
    with every text as candidate and the image's own texts as relevant."""
    owners = np.asarray(image_of_text, dtype=np.int64)
    if root_emb is None:
        root_emb = centroid_root(text_embs)
    precisions, recalls = [], []
    for i in range(image_embs.shape[0]):
        relevant = np.flatnonzero(owners == i)
        if relevant.size == 0:
            continue
        retrieved = hierarchical_traverse(image_embs[i], text_embs, root_emb,
                                          n_points)
        p, r = set_precision_recall(retrieved, relevant.tolist())
        precisions.append(p)
        recalls.append(r)
    if not precisions:
        raise ValueError("no image owns any text")
    return {"precision": float(np.mean(precisions)),
            "recall": float(np.mean(recalls)),
            "n_points": n_points}


def d_corr(image_embs: np.ndarray, text_embs: np.ndarray,
           image_of_text: np.ndarray, levels: np.ndarray) -> float:
    """Mean over images of the Spearman correlation between a text's
    hierarchy level and its negated distance to the owning image, times
    100.  Deeper levels should sit closer, so perfect ordering scores 100.
    Undefined correlations (single text, constant ranks) count as 0.
    """
    owners = np.asarray(image_of_text, dtype=np.int64)
    levels = np.asarray(levels, dtype=np.int64)
    scores = []
    for i in range(image_embs.shape[0]):
        mine = np.flatnonzero(owners == i)
        if mine.size == 0:
            continue
        dists = np.array([geometry.euclid_dist(image_embs[i], text_embs[j])
                          for j in mine])
        with warnings.catch_warnings():
            # single or constant inputs yield nan, which counts as 0 below
            warnings.simplefilter("ignore", stats.ConstantInputWarning)
            rho = stats.spearmanr(levels[mine], -dists).statistic
        scores.append(0.0 if math.isnan(rho) else float(rho))
    if not scores:
        raise ValueError("no image owns any text")
    return 100.0 * float(np.mean(scores))


def per_level_recall(sims: np.ndarray, image_of_text: np.ndarray,
                     levels: np.ndarray, k: int = 1) -> dict[int, float]:
    """Text-to-image R@k pooled over all texts of each level."""
    sims = np.asarray(sims, dtype=np.float64)
    owners = np.asarray(image_of_text, dtype=np.int64)
    levels = np.asarray(levels, dtype=np.int64)
    out: dict[int, float] = {}
    for level in sorted(set(int(v) for v in levels if v >= 0)):
        members = np.flatnonzero(levels == level)
        hits = sum(
            1 for j in members
            if owners[j] in ranked_indices(sims[:, j])[:k]
        )
        out[level] = 100.0 * hits / members.size
    return out


def distance_by_level(image_embs: np.ndarray, text_embs: np.ndarray,
                      image_of_text: np.ndarray,
                      levels: np.ndarray) -> dict[int, float]:
    """Mean image-to-owned-text Euclidean distance per hierarchy level."""
    owners = np.asarray(image_of_text, dtype=np.int64)
    levels = np.asarray(levels, dtype=np.int64)
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for j in range(text_embs.shape[0]):
        if levels[j] < 0:
            continue
        d = geometry.euclid_dist(image_embs[int(owners[j])], text_embs[j])
        level = int(levels[j])
        sums[level] = sums.get(level, 0.0) + d
        counts[level] = counts.get(level, 0) + 1
    return {level: sums[level] / counts[level] for level in sorted(sums)}


# ---------------------------------------------------------------------------
# Full report


def evaluate(image_embs: np.ndarray, text_embs: np.ndarray,
             image_of_text: np.ndarray, levels: np.ndarray | None = None,
             root_emb: np.ndarray | None = None, ks: tuple[int, ...] = KS,
             n_points: int = 50, n_folds: int | None = None) -> dict:
    """One-call evaluation over a split.  Level diagnostics appear only
    when levels are provided; fold averaging only when n_folds is set.
    """
    owners = np.asarray(image_of_text, dtype=np.int64)
    sims = geometry.sim_matrix(image_embs, text_embs)
    suite = recall_suite(sims, owners, ks)
    report = {
        "n_images": int(image_embs.shape[0]),
        "n_texts": int(text_embs.shape[0]),
        "recall": suite,
        "rsum": rsum_from_recalls(
            [suite["i2t"][k] for k in ks] + [suite["t2i"][k] for k in ks]),
        "hierarchical": hierarchical_report(image_embs, text_embs, owners,
                                            root_emb, n_points),
    }
    if n_folds is not None:
        report["folded"] = folded_recall_suite(image_embs, text_embs, owners,
                                               n_folds, ks)
    if levels is not None:
        levels = np.asarray(levels, dtype=np.int64)
        if np.any(levels >= 0):
            report["d_corr"] = d_corr(image_embs, text_embs, owners, levels)
            report["per_level_recall"] = per_level_recall(sims, owners, levels)
            report["distance_by_level"] = distance_by_level(
                image_embs, text_embs, owners, levels)
    return report


def write_report_json(path, report: dict) -> None:
    def _clean(obj):
        if isinstance(obj, dict):
            return {str(k): _clean(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [_clean(v) for v in obj]
        if isinstance(obj, (np.integer,)):
            return int(obj)
        if isinstance(obj, (np.floating,)):
            return float(obj)
        return obj

    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_clean(report), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_distance_csv(path, dist: dict[int, float]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["level", "mean_distance"])
        for level in sorted(dist):
            writer.writerow([level, repr(float(dist[level]))])
