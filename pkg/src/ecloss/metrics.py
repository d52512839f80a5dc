"""Channel explainability metrics: part IoU, location consistency, peak counts.

Feature maps are post-ReLU channels of the constrained layer.  For the part
metrics each channel is bilinearly upsampled to the image size and only its
top 10% of pixels is kept; the kept positive pixels form the channel's
activation region.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .errors import DomainError
from .parallel import ordered_map
from .viz import bilinear_matrix

__all__ = [
    "ThresholdedMap",
    "AssignmentMatrix",
    "MetricsReport",
    "top10_threshold",
    "iou",
    "channel_ious",
    "part_explainability",
    "assignment",
    "location_consistency",
    "default_prominence",
    "count_peaks",
    "activation_robustness",
    "evaluate",
    "report_rows",
    "compare_rows",
    "format_summary",
]

TOP_FRACTION = 0.1
PROMINENCE_FRACTION = 0.05


@dataclass(frozen=True, eq=False)
class ThresholdedMap:
    values: np.ndarray
    threshold: float
    retained_fraction: float
    degenerate: bool = False

    @property
    def region(self):
        """Binary activation region: kept pixels with a positive value."""
        return self.values > 0


def _keep_count(n_pixels, fraction=TOP_FRACTION):
    # smallest count whose share of the map is >= fraction
    k = math.ceil(round(fraction * n_pixels, 9))
    return min(max(k, 1), n_pixels)


def top10_threshold(x, fraction=TOP_FRACTION) -> ThresholdedMap:
    """Zero everything below the largest ``t`` keeping at least 10% of pixels.

    All pixels tied at ``t`` are kept.  A constant map keeps every pixel and
    is flagged ``degenerate``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DomainError("empty map")
    flat = x.ravel()
    k = _keep_count(flat.size, fraction)
    t = float(np.partition(flat, flat.size - k)[flat.size - k])
    keep = x >= t
    degenerate = bool(flat.max() == flat.min())
    return ThresholdedMap(
        values=np.where(keep, x, 0.0),
        threshold=t,
        retained_fraction=float(keep.sum()) / flat.size,
        degenerate=degenerate,
    )


def _region(activation):
    if isinstance(activation, ThresholdedMap):
        return activation.region
    return np.asarray(activation) > 0


def iou(mask, activation) -> float:
    """``|mask & region| / |mask | region|``; 0 when both are empty."""
    m = np.asarray(mask, dtype=bool)
    a = _region(activation)
    if m.shape != a.shape:
        raise DomainError(f"mask {m.shape} and activation {a.shape} differ in shape")
    union = np.logical_or(m, a).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(m, a).sum() / union)


def _regions(features, size):
    """Top-10% regions of every channel at image resolution, ``(c, H*W)`` bool."""
    f = np.asarray(features, dtype=np.float64)
    c, h, w = f.shape
    H, W = size
    up = bilinear_matrix(h, H) @ f @ bilinear_matrix(w, W).T
    flat = up.reshape(c, -1)
    k = _keep_count(H * W)
    t = np.partition(flat, H * W - k, axis=1)[:, H * W - k]
    return (flat >= t[:, None]) & (flat > 0)


def channel_ious(features, masks):
    """IoU of each channel's region with each part mask.

    ``features`` is ``(c, h, w)``, ``masks`` ``(K, H, W)``.  Returns the
    ``(c, K)`` IoU matrix and a ``(c,)`` flag marking channels whose region is
    empty (no positive activation).
    """
    m = np.asarray(masks, dtype=bool)
    if m.ndim != 3 or m.shape[0] == 0:
        raise DomainError("masks must be a non-empty (K, H, W) stack")
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 3:
        raise DomainError(f"features must be (c, h, w), got {f.shape}")
    region = _regions(f, m.shape[1:])
    mflat = m.reshape(m.shape[0], -1)
    inter = region.astype(np.int64) @ mflat.T.astype(np.int64)
    union = region.sum(axis=1)[:, None] + mflat.sum(axis=1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    return out, ~region.any(axis=1)


def part_explainability(features, masks) -> float:
    """Mean over channels of the best IoU against any part."""
    ious, _ = channel_ious(features, masks)
    return float(ious.max(axis=1).mean())


@dataclass(frozen=True, eq=False)
class AssignmentMatrix:
    """``a[i, k]``: share of images where channel ``channels[i]`` best matches part ``k``.

    Channels that never had a non-empty region are left out.
    """

    a: np.ndarray
    channels: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        if a.ndim != 2 or np.any(a < 0) or (a.size and not np.allclose(a.sum(axis=1), 1.0, atol=1e-9)):
            raise DomainError("assignment rows must be non-negative and sum to 1")


def _assignment_from(ious_list, empty_list, n_parts):
    c = ious_list[0].shape[0]
    counts = np.zeros((c, n_parts))
    for ious, empty in zip(ious_list, empty_list):
        # argmax takes the lowest part index on ties
        best = ious.argmax(axis=1)
        live = ~empty
        counts[np.nonzero(live)[0], best[live]] += 1
    totals = counts.sum(axis=1)
    keep = np.nonzero(totals > 0)[0]
    return AssignmentMatrix(counts[keep] / totals[keep, None], keep)


def assignment(features, masks) -> AssignmentMatrix:
    """Assignment matrix over an image set.

    ``features`` is ``(N, c, h, w)``; ``masks`` is ``(N, K, H, W)``.
    """
    features = np.asarray(features)
    masks = np.asarray(masks)
    if len(features) == 0 or len(features) != len(masks):
        raise DomainError("need one mask stack per image and at least one image")
    res = [channel_ious(f, m) for f, m in zip(features, masks)]
    return _assignment_from([r[0] for r in res], [r[1] for r in res], masks.shape[1])


def location_consistency(a, literal=False):
    """Per-channel spread ``S_i`` and its mean ``LS``.

    ``S_i = sqrt(sum_k (A_ik - 1/K)^2) / K``: zero for a uniform row, largest
    for a one-hot row.  ``literal=True`` drops the square, as the metric is
    sometimes printed; the inner sum of a stochastic row is then zero, and a
    negative sum raises :class:`DomainError`.
    """
    mat = np.asarray(getattr(a, "a", a), dtype=np.float64)
    if mat.ndim != 2:
        raise DomainError("assignment matrix must be 2-D")
    if mat.shape[0] == 0:
        return np.zeros(0), 0.0
    k = mat.shape[1]
    dev = mat - 1.0 / k
    if literal:
        inner = dev.sum(axis=1)
        if np.any(inner < -1e-12):
            raise DomainError("literal form takes the root of a negative number")
        s = np.sqrt(np.maximum(inner, 0.0)) / k
    else:
        s = np.sqrt((dev ** 2).sum(axis=1)) / k
    return s, float(s.mean())


def default_prominence(x):
    x = np.asarray(x)
    return PROMINENCE_FRACTION * float(x.max() - x.min())


def count_peaks(x, prominence_min=None) -> int:
    """Number of local maxima (8-connected) whose prominence exceeds ``prominence_min``.

    ``None`` means 5% of the map's value range.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DomainError("count_peaks expects a 2-D map")
    if not np.all(np.isfinite(x)):
        raise DomainError("map has non-finite values")
    if prominence_min is None:
        prominence_min = default_prominence(x)
    return K.count_peaks(x, float(prominence_min))


def _peak_counts(maps, prominence_min):
    return [count_peaks(m, prominence_min) for m in maps]


def activation_robustness(maps, prominence_min=None):
    """Mean and standard error of the peak count over all maps.

    ``maps`` is any array whose last two axes are the map; needs >= 2 maps.
    """
    maps = np.asarray(maps, dtype=np.float64)
    flat = maps.reshape(-1, *maps.shape[-2:])
    if len(flat) < 2:
        raise DomainError("need at least two maps for a standard error")
    counts = np.array(_peak_counts(flat, prominence_min), dtype=np.float64)
    return _mean_stderr(counts)


def _mean_stderr(counts):
    mean = math.fsum(counts.tolist()) / len(counts)
    stderr = float(np.std(counts, ddof=1) / math.sqrt(len(counts)))
    return mean, stderr


@dataclass(eq=False)
class MetricsReport:
    pe_per_image: np.ndarray
    pe_mean: float
    ls: float
    s_per_channel: np.ndarray
    assignment: AssignmentMatrix
    peak_mean: float
    peak_stderr: float
    peak_counts: np.ndarray
    n_images: int
    n_channels: int
    n_empty: int
    n_degenerate: int
    extra: dict = field(default_factory=dict)


def _image_metrics(args):
    features, masks, prominence_min = args
    ious, empty = channel_ious(features, masks)
    degenerate = sum(bool(np.ptp(f) == 0) for f in features)
    peaks = _peak_counts(features, prominence_min)
    return ious, empty, degenerate, peaks


def evaluate(features, masks, prominence_min=None, literal_ls=False) -> MetricsReport:
    """All three metrics over ``N`` images.

    ``features`` is ``(N, c, h, w)`` post-ReLU maps; ``masks`` is
    ``(N, K, H, W)``.  Images are processed in parallel and reduced in input
    order.
    """
    features = np.asarray(features, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    if features.ndim != 4 or masks.ndim != 4 or len(features) != len(masks):
        raise DomainError("features (N, c, h, w) and masks (N, K, H, W) must pair up")
    if len(features) == 0:
        raise DomainError("no images to evaluate")
    n, c = features.shape[:2]
    if n * c < 2:
        raise DomainError("need at least two maps")
    results = ordered_map(_image_metrics, [(f, m, prominence_min) for f, m in zip(features, masks)])
    pe = np.array([r[0].max(axis=1).mean() for r in results])
    amat = _assignment_from([r[0] for r in results], [r[1] for r in results], masks.shape[1])
    s, ls = location_consistency(amat, literal=literal_ls)
    counts = np.array([p for r in results for p in r[3]], dtype=np.float64)
    peak_mean, peak_stderr = _mean_stderr(counts)
    return MetricsReport(
        pe_per_image=pe,
        pe_mean=math.fsum(pe.tolist()) / n,
        ls=ls,
        s_per_channel=s,
        assignment=amat,
        peak_mean=peak_mean,
        peak_stderr=peak_stderr,
        peak_counts=counts.reshape(n, c),
        n_images=n,
        n_channels=c,
        n_empty=int(sum(r[1].sum() for r in results)),
        n_degenerate=int(sum(r[2] for r in results)),
    )


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def report_rows(report: MetricsReport, scope="model"):
    """``(metric, scope, value)`` rows for the metrics CSV."""
    rows = [
        ("pe_mean", scope, report.pe_mean),
        ("ls", scope, report.ls),
        ("peak_mean", scope, report.peak_mean),
        ("peak_stderr", scope, report.peak_stderr),
        ("n_images", scope, report.n_images),
        ("n_channels", scope, report.n_channels),
        ("n_assigned_channels", scope, len(report.assignment.channels)),
        ("n_empty_maps", scope, report.n_empty),
        ("n_degenerate_maps", scope, report.n_degenerate),
    ]
    for ch, s in zip(report.assignment.channels.tolist(), report.s_per_channel.tolist()):
        rows.append(("s_channel", f"{scope}:c{ch}", s))
    for key, value in report.extra.items():
        rows.append((key, scope, value))
    return [(m, sc, _fmt(v)) for m, sc, v in rows]


def compare_rows(model: MetricsReport, baseline: MetricsReport):
    """Side-by-side rows plus ``delta = model - baseline`` for the headline metrics."""
    rows = report_rows(model, "ecloss") + report_rows(baseline, "baseline")
    for name in ("pe_mean", "ls", "peak_mean"):
        rows.append((name, "delta", _fmt(getattr(model, name) - getattr(baseline, name))))
    return rows


def format_summary(reports):
    """Plain-text table of PE, LS and peak count (mean +/- s.e.) per model."""
    lines = [f"{'model':<12} {'PE':>8} {'LS':>9} {'peaks (mean +/- s.e.)':>24}"]
    for name, r in reports.items():
        lines.append(
            f"{name:<12} {r.pe_mean:8.4f} {r.ls:9.5f} {r.peak_mean:13.3f} +/- {r.peak_stderr:.3f}"
        )
    return "\n".join(lines)
