"""Classification accuracy, retrieval ranking, AP/mAP, precision-recall."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RECALL_LEVELS = np.linspace(0.0, 1.0, 11)


class EvaluationError(ValueError):
    """Empty input or dimension mismatch."""


def classify(logits, n_classes):
    """1-based argmax over the first n_classes logits; ties -> lowest index.

    The adversarial logit (position n_classes, if present) is ignored.
    """
    logits = np.asarray(logits, dtype=np.float64)
    return int(np.argmax(logits[:n_classes])) + 1


def accuracy(predictions, labels):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise EvaluationError("predictions and labels differ in length")
    if predictions.size == 0:
        raise EvaluationError("empty input")
    return float((predictions == labels).mean())


@dataclass(frozen=True)
class RetrievalResult:
    query_id: str
    ranked_ids: list
    relevant: list  # bool per rank (same class as the query)


def retrieve(query_id, query_vec, gallery_ids, gallery_vecs, gallery_labels,
             query_label, metric="euclidean"):
    """Rank the gallery (query excluded) by ascending descriptor distance.

    Ties are broken by ascending shape id so the ranking is independent
    of gallery input order.
    """
    query_vec = np.asarray(query_vec, dtype=np.float64)
    gallery_vecs = np.asarray(gallery_vecs, dtype=np.float64)
    if len(gallery_ids) == 0:
        raise EvaluationError("empty gallery")
    if gallery_vecs.shape[1] != query_vec.shape[0]:
        raise EvaluationError(
            f"descriptor dimension mismatch: query {query_vec.shape[0]}, "
            f"gallery {gallery_vecs.shape[1]}"
        )
    if metric == "euclidean":
        dists = np.linalg.norm(gallery_vecs - query_vec, axis=1)
    elif metric == "cosine":
        qn = query_vec / max(np.linalg.norm(query_vec), 1e-300)
        gn = gallery_vecs / np.maximum(
            np.linalg.norm(gallery_vecs, axis=1, keepdims=True), 1e-300
        )
        dists = 1.0 - gn @ qn
    else:
        raise EvaluationError(f"unknown metric {metric!r}")
    entries = [
        (dists[i], gallery_ids[i], gallery_labels[i])
        for i in range(len(gallery_ids))
        if gallery_ids[i] != query_id
    ]
    entries.sort(key=lambda e: (e[0], e[1]))
    return RetrievalResult(
        query_id=query_id,
        ranked_ids=[e[1] for e in entries],
        relevant=[e[2] == query_label for e in entries],
    )


def average_precision(result: RetrievalResult):
    """Mean of precision-at-r over the relevant ranks r; None if no relevant."""
    hits = 0
    precisions = []
    for rank, rel in enumerate(result.relevant, start=1):
        if rel:
            hits += 1
            precisions.append(hits / rank)
    if not precisions:
        return None
    return float(np.mean(precisions))


def mean_ap(results):
    """mAP over queries; queries with no relevant gallery item are excluded."""
    aps = []
    excluded = 0
    for r in results:
        ap = average_precision(r)
        if ap is None:
            excluded += 1
        else:
            aps.append(ap)
    if not aps:
        raise EvaluationError("no query had a relevant gallery item")
    return float(np.mean(aps)), excluded


@dataclass(frozen=True)
class PrCurve:
    recall: np.ndarray  # per rank, non-decreasing
    precision: np.ndarray


def pr_curve(result: RetrievalResult) -> PrCurve:
    rel = np.asarray(result.relevant, dtype=np.float64)
    total = rel.sum()
    if total == 0:
        raise EvaluationError("no relevant items for PR curve")
    cum = np.cumsum(rel)
    ranks = np.arange(1, len(rel) + 1)
    return PrCurve(recall=cum / total, precision=cum / ranks)


def interpolated_precision(curve: PrCurve, levels=RECALL_LEVELS):
    """Max precision at recall >= level, for each of the 11 standard levels."""
    out = np.zeros(len(levels))
    for i, level in enumerate(levels):
        mask = curve.recall >= level - 1e-12
        out[i] = curve.precision[mask].max() if mask.any() else 0.0
    return out


def macro_pr(results):
    """Mean 11-point interpolated curve across queries with relevant items."""
    rows = [
        interpolated_precision(pr_curve(r))
        for r in results
        if any(r.relevant)
    ]
    if not rows:
        raise EvaluationError("no query had a relevant gallery item")
    return np.mean(rows, axis=0)


def pr_csv(result: RetrievalResult) -> str:
    curve = pr_curve(result)
    lines = ["rank,recall,precision"]
    for i in range(len(curve.recall)):
        lines.append(f"{i + 1},{curve.recall[i]:.17g},{curve.precision[i]:.17g}")
    return "\n".join(lines) + "\n"


def macro_pr_csv(results) -> str:
    avg = macro_pr(results)
    lines = ["recall_level,precision"]
    for level, p in zip(RECALL_LEVELS, avg):
        lines.append(f"{level:.1f},{p:.17g}")
    return "\n".join(lines) + "\n"


def leave_one_out_retrieval(ids, vecs, labels, metric="euclidean"):
    """Each shape queries all the others; returns one result per query."""
    return [
        retrieve(ids[i], vecs[i], ids, vecs, labels, labels[i], metric=metric)
        for i in range(len(ids))
    ]


def summary_text(values: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())
