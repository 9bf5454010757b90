"""Two-threshold region classifier separating DoH from other HTTPS flows.

A flow is DoH iff ``avg_payload <= max_avg_payload`` and
``packet_count >= min_packet_count``. Both bounds are inclusive. The score
is ``1 / (1 + exp(-4 m))`` where ``m`` is the smaller of the log-ratio
margins ``ln(max_avg_payload / avg_payload)`` and
``ln(packet_count / min_packet_count)``, so the score is 0.5 exactly on the
boundary and above 0.5 strictly inside the region.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.metrics import balanced_accuracy_score
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ..flows.assemble import Flow
from .points import RatioPoint, points_matrix

DOH = "DoH"
NON_DOH = "NonDoH"
MODEL_SCHEMA = "dohmeter.model/1"
DEFAULT_MODEL_RESOURCE = "default_model.json"


class SingleClassInput(ValueError):
    pass


def region_margin(packet_count, avg_payload, max_avg_payload: float, min_packet_count: int):
    """Signed margin (>= 0 inside the region); works on scalars or arrays."""
    pk = np.asarray(packet_count, dtype=float)
    avg = np.asarray(avg_payload, dtype=float)
    with np.errstate(divide="ignore"):
        m_avg = np.log(max_avg_payload) - np.log(avg) if math.isfinite(max_avg_payload) else np.full_like(avg, np.inf)
        m_pk = np.log(pk) - np.log(float(min_packet_count))
    return np.minimum(m_avg, m_pk)


def region_score(margin):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-4.0 * np.asarray(margin, dtype=float)))


def _threshold_grid(values: np.ndarray, max_candidates: int) -> np.ndarray:
    """Midpoints between consecutive distinct values plus the maximum."""
    unique = np.unique(values)
    grid = np.append((unique[:-1] + unique[1:]) / 2.0, unique[-1])
    if len(grid) > max_candidates:
        grid = np.unique(np.quantile(grid, np.linspace(0.0, 1.0, max_candidates), method="nearest"))
    return grid


def _count_grid(values: np.ndarray, max_candidates: int) -> np.ndarray:
    unique = np.unique(values.astype(np.int64))
    if len(unique) > max_candidates:
        unique = np.unique(np.quantile(unique, np.linspace(0.0, 1.0, max_candidates), method="nearest"))
    return unique


class RegionClassifier(ClassifierMixin, BaseEstimator):
    """Grid-searched region model over [packet_count, avg_payload] features.

    ``fit`` evaluates every pair of candidate thresholds (distinct packet
    counts for the lower bound, midpoints between distinct avg payloads for
    the upper bound, each capped at ``max_candidates`` quantiles) and keeps
    the pair with the highest balanced accuracy. Ties are broken
    deterministically: the smallest tied packet bound wins, then the median
    of the payload thresholds tied at that bound, which keeps the payload
    boundary centred in the gap between the classes.
    """

    def __init__(self, pos_label=DOH, max_candidates: int = 512):
        self.pos_label = pos_label
        self.max_candidates = max_candidates

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float, ensure_min_samples=1)
        if X.shape[1] != 2:
            raise ValueError("expected 2 features: packet_count, avg_payload")
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise SingleClassInput("both DoH and non-DoH samples are required")
        if len(self.classes_) > 2:
            raise ValueError(f"expected two labels, got {list(self.classes_)}")
        positive = self._positive_label()
        self.negative_label_ = next(c for c in self.classes_ if c != positive)
        is_pos = y == positive
        n_pos, n_neg = int(is_pos.sum()), int((~is_pos).sum())
        pk, avg = X[:, 0], X[:, 1]
        counts = _count_grid(pk, self.max_candidates)
        thresholds = _threshold_grid(avg, self.max_candidates)
        best = -1.0
        tied: list[tuple[int, float]] = []
        for c in counts:
            inside = pk >= c
            pos_avg = np.sort(avg[inside & is_pos])
            neg_avg = np.sort(avg[inside & ~is_pos])
            tp = np.searchsorted(pos_avg, thresholds, side="right")
            fp = np.searchsorted(neg_avg, thresholds, side="right")
            ba = (tp / n_pos + (n_neg - fp) / n_neg) / 2.0
            top = ba.max()
            if top > best + 1e-12:
                best, tied = top, []
            if abs(top - best) <= 1e-12:
                tied.extend((int(c), float(t)) for t in thresholds[np.abs(ba - best) <= 1e-12])
        # Loosest packet bound first, then the middle of that bound's tied payload thresholds.
        c_best = min(c for c, _ in tied)
        t_tied = sorted(t for c, t in tied if c == c_best)
        self.min_packet_count_, self.max_avg_payload_ = c_best, t_tied[(len(t_tied) - 1) // 2]
        self.balanced_accuracy_ = float(best)
        self.n_features_in_ = 2
        return self

    def _positive_label(self):
        if self.pos_label in self.classes_:
            return self.pos_label
        for candidate in (True, 1, 1.0):
            if candidate in self.classes_:
                return self.classes_[list(self.classes_).index(candidate)]
        raise ValueError(f"positive label {self.pos_label!r} not among {list(self.classes_)}")

    def _features(self, X) -> np.ndarray:
        check_is_fitted(self, ["max_avg_payload_", "min_packet_count_"])
        X = check_array(X, dtype=float)
        if X.shape[1] != 2:
            raise ValueError("expected 2 features: packet_count, avg_payload")
        return X

    def inside(self, X) -> np.ndarray:
        X = self._features(X)
        return (X[:, 1] <= self.max_avg_payload_) & (X[:, 0] >= self.min_packet_count_)

    def predict(self, X) -> np.ndarray:
        inside = self.inside(X)
        return np.where(inside, self._positive_label(), self.negative_label_).astype(self.classes_.dtype)

    def decision_function(self, X) -> np.ndarray:
        X = self._features(X)
        return region_margin(X[:, 0], X[:, 1], self.max_avg_payload_, self.min_packet_count_)

    def predict_score(self, X) -> np.ndarray:
        """Region membership score in [0, 1]; >= 0.5 exactly for DoH predictions."""
        return region_score(self.decision_function(X))

    def balanced_accuracy(self, X, y) -> float:
        return float(balanced_accuracy_score(y, self.predict(X)))

    def to_model(self, reference_curves: Optional[dict[str, float]] = None) -> "ClassifierModel":
        check_is_fitted(self, ["max_avg_payload_", "min_packet_count_"])
        return ClassifierModel(
            max_avg_payload=self.max_avg_payload_,
            min_packet_count=self.min_packet_count_,
            reference_curves=dict(reference_curves or {}),
            training_balanced_accuracy=self.balanced_accuracy_,
        )


@dataclass(frozen=True)
class ClassifierModel:
    """Serializable region thresholds.

    JSON fields: ``schema``, ``max_avg_payload`` (bytes per packet, null for
    unbounded), ``min_packet_count``, ``reference_curves`` (group to tail
    estimate), ``training_balanced_accuracy`` (null when not fitted).
    """

    max_avg_payload: float
    min_packet_count: int
    reference_curves: dict[str, float] = field(default_factory=dict)
    training_balanced_accuracy: Optional[float] = None

    def __post_init__(self) -> None:
        if not self.max_avg_payload > 0:
            raise ValueError("max_avg_payload must be > 0")
        if self.min_packet_count < 1:
            raise ValueError("min_packet_count must be >= 1")

    def classify(self, packet_count: int, avg_payload: float) -> tuple[str, float]:
        label = DOH if avg_payload <= self.max_avg_payload and packet_count >= self.min_packet_count else NON_DOH
        margin = region_margin(packet_count, avg_payload, self.max_avg_payload, self.min_packet_count)
        return label, float(region_score(margin))

    def nearest_reference(self, avg_payload: float) -> Optional[str]:
        """Group whose tail estimate is closest to ``avg_payload``."""
        if not self.reference_curves:
            return None
        return min(sorted(self.reference_curves), key=lambda g: abs(self.reference_curves[g] - avg_payload))

    def to_json(self) -> dict:
        return {
            "schema": MODEL_SCHEMA,
            "max_avg_payload": self.max_avg_payload if math.isfinite(self.max_avg_payload) else None,
            "min_packet_count": self.min_packet_count,
            "reference_curves": dict(sorted(self.reference_curves.items())),
            "training_balanced_accuracy": self.training_balanced_accuracy,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ClassifierModel":
        limit = data.get("max_avg_payload")
        return cls(
            max_avg_payload=math.inf if limit is None else float(limit),
            min_packet_count=int(data["min_packet_count"]),
            reference_curves={str(k): float(v) for k, v in data.get("reference_curves", {}).items()},
            training_balanced_accuracy=data.get("training_balanced_accuracy"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ClassifierModel":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def default_model() -> ClassifierModel:
    """The shipped thresholds, fit on the fixture dataset produced by
    ``dohmeter.testing.lab.fit_default_model`` (see that function to
    regenerate them)."""
    text = resources.files(__package__).joinpath(DEFAULT_MODEL_RESOURCE).read_text(encoding="utf-8")
    return ClassifierModel.from_json(json.loads(text))


def is_doh_group(group: str, doh_groups: Optional[Sequence[str]] = None) -> bool:
    """Default labeling rule for unlabeled points: a group is DoH when it is
    listed in ``doh_groups`` or, without a list, when its name starts with
    "doh" (case-insensitive)."""
    if doh_groups is not None:
        return group in doh_groups
    return group.lower().startswith("doh")


def point_label(point: RatioPoint, doh_groups: Optional[Sequence[str]] = None) -> str:
    if point.label:
        return DOH if point.label.lower() in ("doh", "true", "1") else NON_DOH
    return DOH if is_doh_group(point.group, doh_groups) else NON_DOH


def fit_region(labeled_points: Iterable[RatioPoint | tuple[RatioPoint, str]],
               doh_groups: Optional[Sequence[str]] = None, max_candidates: int = 512) -> ClassifierModel:
    points, labels = [], []
    for item in labeled_points:
        if isinstance(item, tuple):
            point, label = item
            label = DOH if label in (DOH, True, 1) else NON_DOH
        else:
            point, label = item, point_label(item, doh_groups)
        points.append(point)
        labels.append(label)
    if len(set(labels)) < 2:
        raise SingleClassInput("both DoH and non-DoH points are required")
    clf = RegionClassifier(max_candidates=max_candidates).fit(points_matrix(points), np.asarray(labels))
    return clf.to_model()


def classify_flow(flow: Flow, model: ClassifierModel) -> tuple[str, float]:
    return model.classify(flow.packet_count, flow.payload_bytes / flow.packet_count)
