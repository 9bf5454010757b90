"""Per-group characterization curves and their tail estimate."""

from __future__ import annotations

import statistics
import warnings
from dataclasses import dataclass
from typing import Iterable, Optional

from .points import RatioPoint

DEFAULT_THRESHOLD = 1000
MIN_TAIL_POINTS = 5


class InsufficientTail(UserWarning):
    """Fewer than the required number of points reach the tail threshold."""


@dataclass(frozen=True)
class CharacterizationCurve:
    """Points of one group sorted by packet count.

    The tail estimate is the mean avg_payload over points with at least
    ``threshold`` packets, where the handshake cost is amortized; it is None
    when fewer than ``min_tail_points`` points qualify.
    """

    group: str
    points: tuple[RatioPoint, ...]
    threshold: int
    tail_points: int
    tail_estimate: Optional[float]

    @property
    def short_points(self) -> tuple[RatioPoint, ...]:
        return tuple(p for p in self.points if p.packet_count < self.threshold)

    def to_json(self) -> dict:
        return {
            "group": self.group,
            "points": len(self.points),
            "threshold": self.threshold,
            "tail_points": self.tail_points,
            "tail_estimate": self.tail_estimate,
        }


def curve_summary(points: Iterable[RatioPoint], threshold: int = DEFAULT_THRESHOLD,
                  min_tail_points: int = MIN_TAIL_POINTS) -> dict[str, CharacterizationCurve]:
    """Build one curve per group; warns InsufficientTail for groups without
    a tail estimate."""
    groups: dict[str, list[RatioPoint]] = {}
    for p in points:
        groups.setdefault(p.group, []).append(p)
    curves = {}
    for name in sorted(groups):
        ordered = tuple(sorted(groups[name], key=lambda p: (p.packet_count, p.avg_payload)))
        tail = [p.avg_payload for p in ordered if p.packet_count >= threshold]
        estimate = statistics.fmean(tail) if len(tail) >= min_tail_points else None
        if estimate is None:
            warnings.warn(
                f"group {name!r}: {len(tail)} points with >= {threshold} packets, "
                f"need {min_tail_points} for a tail estimate",
                InsufficientTail, stacklevel=2)
        curves[name] = CharacterizationCurve(name, ordered, threshold, len(tail), estimate)
    return curves
