"""Class-wise FIFO memory of high-quality projected teacher features.

Candidates come from labeled images only: a feature survives the quality
filter when the teacher's classifier is correct at its stride-8 position and
confident above phi. Survivors are ranked by a per-class attention score and
at most a per-image quota of them enters the queue. Stored vectors are plain
float32 arrays, i.e. constants to the optimizer.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class FeatureRecord:
    vector: np.ndarray          # (D,) float32, little-endian
    class_id: int
    confidence: float
    rank_score: float
    iteration: int


@dataclass
class Candidates:
    """Quality-filter survivors for one class, in row-major grid order."""
    vectors: np.ndarray         # (n, D) float32
    confidences: np.ndarray     # (n,)
    positions: np.ndarray       # (n,) flat row-major indices into the grid


def quality_filter(features: np.ndarray, pred_argmax: np.ndarray,
                   pred_confidence: np.ndarray, gt_labels_ds: np.ndarray,
                   phi: float, ignore_index: int = 255) -> dict[int, Candidates]:
    """Keep positions with a correct, confident prediction; group by class.

    Args:
        features: (h, w, D) teacher projection vectors on the stride-8 grid
        pred_argmax: (h, w) teacher classifier argmax
        pred_confidence: (h, w) max softmax probability
        gt_labels_ds: (h, w) downsampled ground truth
        phi: confidence threshold; survival requires confidence strictly > phi
    """
    h, w = gt_labels_ds.shape
    if features.shape[:2] != (h, w) or pred_argmax.shape != (h, w) \
            or pred_confidence.shape != (h, w):
        raise ValueError("quality_filter inputs must share the stride-8 grid")
    keep = (pred_argmax == gt_labels_ds) & (gt_labels_ds != ignore_index) \
        & (pred_confidence > phi)
    flat = np.flatnonzero(keep.ravel())
    labels = gt_labels_ds.ravel()[flat]
    vecs = features.reshape(h * w, -1)[flat]
    confs = pred_confidence.ravel()[flat]
    out = {}
    for c in np.unique(labels):
        m = labels == c
        out[int(c)] = Candidates(vecs[m].astype(np.float32, copy=False),
                                 confs[m], flat[m])
    return out


def per_image_quota(psi: int, n_labeled: int) -> int:
    """k = max(1, floor(psi / n_labeled)) vectors per image, class, iteration."""
    if psi < 1 or n_labeled < 1:
        raise ValueError("psi and n_labeled must be >= 1")
    return max(1, psi // n_labeled)


def rank_and_select(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k highest-scoring candidates.

    Ties keep grid scan order (candidates arrive row-major), hence the stable
    sort on negated scores. Fewer than k candidates means all are returned.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    order = np.argsort(-np.asarray(scores), kind="stable")
    return order[:min(k, order.size)]


class MemoryBank:
    """C bounded FIFO queues of FeatureRecord."""

    def __init__(self, class_count: int, capacity: int):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.class_count = class_count
        self.capacity = capacity
        self.queues: list[deque[FeatureRecord]] = \
            [deque(maxlen=capacity) for _ in range(class_count)]

    def enqueue(self, class_id: int, records: list[FeatureRecord]) -> None:
        for r in records:
            if r.class_id != class_id:
                raise ValueError(f"record carries class {r.class_id}, "
                                 f"enqueued under {class_id}")
            self.queues[class_id].append(r)

    def targets(self, class_id: int) -> np.ndarray:
        """Snapshot of stored vectors for a class, shape (n, D); n may be 0."""
        q = self.queues[class_id]
        if not q:
            return np.empty((0, 0), dtype=np.float32)
        return np.stack([r.vector for r in q]).astype(np.float32, copy=True)

    def sizes(self) -> list[int]:
        return [len(q) for q in self.queues]

    # checkpoint round-trip: per-class struct-of-arrays, vectors as '<f4'
    def state_dict(self) -> dict:
        state = {"class_count": self.class_count, "capacity": self.capacity,
                 "queues": []}
        for q in self.queues:
            if q:
                state["queues"].append({
                    "vectors": np.stack([r.vector for r in q]).astype("<f4"),
                    "confidence": np.array([r.confidence for r in q], dtype="<f4"),
                    "rank_score": np.array([r.rank_score for r in q], dtype="<f4"),
                    "iteration": np.array([r.iteration for r in q], dtype=np.int64),
                })
            else:
                state["queues"].append(None)
        return state

    @classmethod
    def from_state_dict(cls, state: dict) -> "MemoryBank":
        bank = cls(state["class_count"], state["capacity"])
        for c, q in enumerate(state["queues"]):
            if q is None:
                continue
            records = [FeatureRecord(q["vectors"][i], c, float(q["confidence"][i]),
                                     float(q["rank_score"][i]), int(q["iteration"][i]))
                       for i in range(q["vectors"].shape[0])]
            bank.enqueue(c, records)
        return bank
