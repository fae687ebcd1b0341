"""Probabilistic detection quality with Gaussian corner uncertainty.

Each detection is turned into a per-pixel probability of covering the pixel:
the top-left and bottom-right corners are independent 2D Gaussians taken from
the diagonal 2x2 blocks of the XYXY covariance, and

    P(pixel) = P(x1 <= u, y1 <= v) * P(x2 >= u, y2 >= v)

evaluated at pixel centers. The ground-truth box stands in for the
segmentation mask. Spatial quality is ``exp(-(L_fg + L_bg))`` where both
losses are normalized by the number of ground-truth pixels; label quality is
the probability mass on the ground-truth class. Detections and ground truth
are paired per image by maximum-quality assignment.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional

import numpy as np
from scipy.special import ndtr, owens_t

from detens.aggregation import ProbabilisticDetection
from detens.errors import DataError
from detens.geometry import BoxFormat, convert, covariance_convert
from detens.metrics.common import GroundTruthInstance, GroundTruthStore, ImageInfo, group_by_image
from detens.metrics.hungarian import hungarian_assign

DEFAULT_EPS = 1.0  # corner std floor, pixels
_SMALL = 1e-14
_ROI_SIGMAS = 10.0


@dataclass
class PdqResult:
    pdq: float
    tp: int = 0
    fp: int = 0
    fn: int = 0
    avg_spatial_quality: float = 0.0
    avg_label_quality: float = 0.0
    avg_pairwise_quality: float = 0.0
    avg_fg_quality: float = 0.0
    avg_bg_quality: float = 0.0
    per_class: Dict[int, Dict[str, int]] = field(default_factory=dict)


@dataclass
class _ImageScore:
    total_quality: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    spatial: List[float] = field(default_factory=list)
    label: List[float] = field(default_factory=list)
    fg: List[float] = field(default_factory=list)
    bg: List[float] = field(default_factory=list)
    per_class: Dict[int, Dict[str, int]] = field(default_factory=dict)


def bivariate_normal_cdf(h, k, rho):
    """Standard bivariate normal CDF ``P(X <= h, Y <= k)`` with correlation ``rho``.

    Uses the Owen's T representation, vectorized over ``h`` and ``k``.
    """
    h = np.asarray(h, dtype=float)
    k = np.asarray(k, dtype=float)
    if rho == 0.0:
        return ndtr(h) * ndtr(k)
    # the representation is singular at 0; both one-sided limits agree
    h = np.where(h == 0.0, 1e-300, h)
    k = np.where(k == 0.0, 1e-300, k)
    s = np.sqrt(1.0 - rho * rho)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        a_h = (k - rho * h) / (h * s)
        a_k = (h - rho * k) / (k * s)
    beta = np.where(h * k < 0, 0.5, 0.0)
    out = 0.5 * ndtr(h) + 0.5 * ndtr(k) - owens_t(h, a_h) - owens_t(k, a_k) - beta
    return np.clip(out, 0.0, 1.0)


def _floor_cov(block: np.ndarray, eps: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh((block + block.T) / 2)
    vals = np.maximum(vals, eps * eps)
    return (vecs * vals) @ vecs.T


def _corner_prob(xs, ys, mean, cov, upper: bool) -> np.ndarray:
    """``P(corner <= (x, y))`` (top-left) or ``P(corner >= (x, y))`` (bottom-right) on a grid."""
    sx, sy = np.sqrt(cov[0, 0]), np.sqrt(cov[1, 1])
    rho = float(np.clip(cov[0, 1] / (sx * sy), -1 + 1e-12, 1 - 1e-12))
    hx = (xs - mean[0]) / sx
    hy = (ys - mean[1]) / sy
    if upper:
        hx, hy = -hx, -hy
    hx, hy = np.broadcast_arrays(hx[None, :], hy[:, None])
    return bivariate_normal_cdf(hx, hy, rho)


def spatial_probability(det: ProbabilisticDetection, image: ImageInfo, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Per-pixel coverage probability, shape ``(H, W)``."""
    width, height = int(round(image.width)), int(round(image.height))
    box = convert(det.box, BoxFormat.XYXY, image.size)
    cov = covariance_convert(det.covariance, det.box, BoxFormat.XYXY, image.size)
    x1, y1, x2, y2 = box.coords
    tl = _floor_cov(cov[:2, :2], eps)
    br = _floor_cov(cov[2:, 2:], eps)
    pad_x = _ROI_SIGMAS * np.sqrt(max(tl[0, 0], br[0, 0]))
    pad_y = _ROI_SIGMAS * np.sqrt(max(tl[1, 1], br[1, 1]))
    # outside this window the product is far below the log clip
    c0 = max(int(np.floor(min(x1, x2) - pad_x)), 0)
    c1 = min(int(np.ceil(max(x1, x2) + pad_x)) + 1, width)
    r0 = max(int(np.floor(min(y1, y2) - pad_y)), 0)
    r1 = min(int(np.ceil(max(y1, y2) + pad_y)) + 1, height)
    heat = np.zeros((height, width))
    if c0 >= c1 or r0 >= r1:
        return heat
    xs = np.arange(c0, c1) + 0.5
    ys = np.arange(r0, r1) + 0.5
    heat[r0:r1, c0:c1] = _corner_prob(xs, ys, (x1, y1), tl, upper=False) * _corner_prob(xs, ys, (x2, y2), br, upper=True)
    return heat


def _summed_area(a: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    out[1:, 1:] = a.cumsum(0).cumsum(1)
    return out


def _pixel_span(lo: float, hi: float, size: int):
    """Indices of pixels whose centers lie in the closed interval [lo, hi]."""
    first = max(int(np.ceil(lo - 0.5)), 0)
    last = min(int(np.floor(hi - 0.5)), size - 1)
    return first, last + 1


def pairwise_quality(heat: np.ndarray, det: ProbabilisticDetection, gts: List[GroundTruthInstance]):
    """Spatial, label, foreground and background qualities against each ground truth."""
    height, width = heat.shape
    log_p = np.log(np.clip(heat, _SMALL, 1.0))
    log_q = np.log(np.clip(1.0 - heat, _SMALL, 1.0))
    sat_p = _summed_area(log_p)
    sat_q = _summed_area(log_q)
    total_q = sat_q[-1, -1]
    rows = []
    for gt in gts:
        x1, y1, x2, y2 = gt.box.coords
        c0, c1 = _pixel_span(x1, x2, width)
        r0, r1 = _pixel_span(y1, y2, height)
        n_pix = max(c1 - c0, 0) * max(r1 - r0, 0)
        label_q = det.confidence if det.label == gt.label else 0.0
        if n_pix == 0:
            rows.append((0.0, label_q, 0.0, 0.0))
            continue
        fg_sum = sat_p[r1, c1] - sat_p[r0, c1] - sat_p[r1, c0] + sat_p[r0, c0]
        in_q = sat_q[r1, c1] - sat_q[r0, c1] - sat_q[r1, c0] + sat_q[r0, c0]
        fg_loss = -fg_sum / n_pix
        bg_loss = -(total_q - in_q) / n_pix
        rows.append((float(np.exp(-(fg_loss + bg_loss))), label_q, float(np.exp(-fg_loss)), float(np.exp(-bg_loss))))
    return rows


def score_image(dets: List[ProbabilisticDetection], gts: List[GroundTruthInstance], image: ImageInfo, eps: float = DEFAULT_EPS) -> _ImageScore:
    out = _ImageScore()
    for gt in gts:
        out.per_class.setdefault(gt.label, {"tp": 0, "fp": 0, "fn": 0})
    for d in dets:
        out.per_class.setdefault(d.label, {"tp": 0, "fp": 0, "fn": 0})
    if not dets or not gts:
        out.fp, out.fn = len(dets), len(gts)
        for d in dets:
            out.per_class[d.label]["fp"] += 1
        for g in gts:
            out.per_class[g.label]["fn"] += 1
        return out

    quality = np.zeros((len(dets), len(gts)))
    details = {}
    for i, det in enumerate(dets):
        rows = pairwise_quality(spatial_probability(det, image, eps), det, gts)
        for j, (spatial, label, fg, bg) in enumerate(rows):
            quality[i, j] = np.sqrt(spatial * label)
            details[i, j] = (spatial, label, fg, bg)

    assignment = hungarian_assign(-quality)
    matched_dets, matched_gts = set(), set()
    for i, j in sorted(assignment.items()):
        if quality[i, j] <= 0:
            continue
        matched_dets.add(i)
        matched_gts.add(j)
        out.total_quality += quality[i, j]
        out.tp += 1
        out.per_class[gts[j].label]["tp"] += 1
        spatial, label, fg, bg = details[i, j]
        out.spatial.append(spatial)
        out.label.append(label)
        out.fg.append(fg)
        out.bg.append(bg)
    for i, d in enumerate(dets):
        if i not in matched_dets:
            out.fp += 1
            out.per_class[d.label]["fp"] += 1
    for j, g in enumerate(gts):
        if j not in matched_gts:
            out.fn += 1
            out.per_class[g.label]["fn"] += 1
    return out


def compute_pdq(
    detections: Iterable[ProbabilisticDetection],
    store: GroundTruthStore,
    conf_threshold: float = 0.3,
    eps: float = DEFAULT_EPS,
    threads: int = 1,
) -> PdqResult:
    """PDQ over all images; detections below ``conf_threshold`` are dropped first."""
    if eps <= 0:
        raise ValueError(f"covariance floor must be positive, got {eps}")
    by_image = group_by_image(detections, store)
    for dets in by_image.values():
        for d in dets:
            if getattr(d, "covariance", None) is None:
                raise DataError(f"detection on image {d.image_id} has no covariance")

    def work(image_id):
        dets = [d for d in by_image[image_id] if d.confidence >= conf_threshold]
        return score_image(dets, store.for_image(image_id), store.images[image_id], eps)

    ids = store.image_ids()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scores = list(pool.map(work, ids))
    else:
        scores = [work(i) for i in ids]

    total = sum(s.total_quality for s in scores)
    tp = sum(s.tp for s in scores)
    fp = sum(s.fp for s in scores)
    fn = sum(s.fn for s in scores)
    per_class: Dict[int, Dict[str, int]] = {}
    for s in scores:
        for k, counts in s.per_class.items():
            acc = per_class.setdefault(k, {"tp": 0, "fp": 0, "fn": 0})
            for key in acc:
                acc[key] += counts[key]

    def mean(attr):
        vals = [v for s in scores for v in getattr(s, attr)]
        return float(np.mean(vals)) if vals else 0.0

    denom = tp + fp + fn
    return PdqResult(
        pdq=float(total / denom) if denom else 0.0,
        tp=tp,
        fp=fp,
        fn=fn,
        avg_spatial_quality=mean("spatial"),
        avg_label_quality=mean("label"),
        avg_pairwise_quality=float(total / tp) if tp else 0.0,
        avg_fg_quality=mean("fg"),
        avg_bg_quality=mean("bg"),
        per_class=dict(sorted(per_class.items())),
    )
