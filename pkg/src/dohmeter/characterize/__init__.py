"""DoH traffic fingerprinting from per-flow ratio points."""

from .curves import CharacterizationCurve, InsufficientTail, curve_summary
from .headers import HeaderOverheadReport, header_overhead_report
from .points import RatioFeatures, RatioPoint, points_matrix, ratio_points, read_points, write_points
from .region import (
    DOH,
    NON_DOH,
    ClassifierModel,
    RegionClassifier,
    SingleClassInput,
    classify_flow,
    default_model,
    fit_region,
    is_doh_group,
    point_label,
)
