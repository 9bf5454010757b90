"""Per-flow ratio points: (packet count, average transport payload)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array

from ..flows.assemble import Flow, by_group

POINT_COLUMNS = ("group", "packet_count", "avg_payload")


@dataclass(frozen=True)
class RatioPoint:
    packet_count: int
    avg_payload: float
    group: str = ""
    label: Optional[str] = None

    def __post_init__(self) -> None:
        if self.packet_count < 1:
            raise ValueError("packet_count must be >= 1")
        if self.avg_payload < 0:
            raise ValueError("avg_payload must be >= 0")

    @classmethod
    def of(cls, flow: Flow, group: str = "") -> "RatioPoint":
        return cls(flow.packet_count, flow.payload_bytes / flow.packet_count, group)


def ratio_points(flows: Iterable[Flow], grouping: Callable[[Flow], Optional[str]] = by_group,
                 include_ungrouped: bool = False) -> list[RatioPoint]:
    """One point per flow, in input order. Flows whose grouping returns None
    are dropped unless ``include_ungrouped`` (then their group is "")."""
    points = []
    for flow in flows:
        group = grouping(flow)
        if group is None and not include_ungrouped:
            continue
        points.append(RatioPoint.of(flow, group or ""))
    return points


def points_matrix(points: Iterable[RatioPoint]) -> np.ndarray:
    """(n, 2) float array of [packet_count, avg_payload]."""
    rows = [(p.packet_count, p.avg_payload) for p in points]
    return np.asarray(rows, dtype=float).reshape(-1, 2)


class RatioFeatures(TransformerMixin, BaseEstimator):
    """Turn flow counters into the ratio feature pair.

    Input is either a sequence of Flow objects or an (n, 2) array of
    [packet_count, payload_bytes]; output is [packet_count, avg_payload].
    Stateless: ``fit`` only records the input width.
    """

    def fit(self, X, y=None):
        self.n_features_in_ = 2
        return self

    def transform(self, X):
        if len(X) and isinstance(X[0], Flow):
            X = [(f.packet_count, f.payload_bytes) for f in X]
        X = check_array(np.asarray(X, dtype=float).reshape(-1, 2), ensure_min_samples=0)
        if np.any(X[:, 0] < 1):
            raise ValueError("packet_count must be >= 1")
        return np.column_stack([X[:, 0], X[:, 1] / X[:, 0]])


def write_points(path: str | Path, points: Iterable[RatioPoint]) -> int:
    points = list(points)
    with_label = any(p.label is not None for p in points)
    columns = POINT_COLUMNS + (("label",) if with_label else ())
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for p in points:
            row = [p.group, p.packet_count, repr(float(p.avg_payload))]
            if with_label:
                row.append(p.label or "")
            writer.writerow(row)
    return len(points)


def read_points(path: str | Path) -> list[RatioPoint]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not set(POINT_COLUMNS) <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns {','.join(POINT_COLUMNS)}")
        return [
            RatioPoint(int(row["packet_count"]), float(row["avg_payload"]), row["group"],
                       (row.get("label") or None))
            for row in reader
        ]
