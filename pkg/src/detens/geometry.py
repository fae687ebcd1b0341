"""Box parameterizations, conversions, overlap and covariance reparameterization.

Two parameterizations are supported:

* ``BoxFormat.CXCYWH``: center-x, center-y, width, height normalized by the
  image size. This is the decoder's output space and the space in which
  cluster means and covariances are computed.
* ``BoxFormat.XYXY``: absolute pixel corners (x-min, y-min, x-max, y-max),
  used by the evaluation code and the file formats.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from detens.errors import CovarianceError, DimensionError, ParameterizationError

ImageSize = Tuple[float, float]  # (width, height) in pixels

SYMMETRY_TOL = 1e-9
PSD_TOL = 1e-9

# d(x1, y1, x2, y2) / d(cx, cy, w, h) for unit image size
_CXCYWH_TO_XYXY = np.array(
    [
        [1.0, 0.0, -0.5, 0.0],
        [0.0, 1.0, 0.0, -0.5],
        [1.0, 0.0, 0.5, 0.0],
        [0.0, 1.0, 0.0, 0.5],
    ]
)


class BoxFormat(str, enum.Enum):
    CXCYWH = "cxcywh"
    XYXY = "xyxy"


@dataclass(frozen=True)
class Box:
    """An axis-aligned box; zero-area boxes are rejected."""

    coords: Tuple[float, float, float, float]
    fmt: BoxFormat = BoxFormat.CXCYWH

    def __post_init__(self):
        coords = tuple(float(c) for c in self.coords)
        if len(coords) != 4:
            raise DimensionError(f"a box has 4 coordinates, got {len(coords)}")
        if not all(np.isfinite(coords)):
            raise ValueError(f"non-finite box coordinates {coords}")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "fmt", BoxFormat(self.fmt))
        a, b, c, d = coords
        if self.fmt is BoxFormat.CXCYWH:
            if not (c > 0 and d > 0):
                raise ValueError(f"degenerate box: width={c}, height={d}")
        elif not (c > a and d > b):
            raise ValueError(f"degenerate box: {coords}")

    @classmethod
    def cxcywh(cls, cx, cy, w, h) -> "Box":
        return cls((cx, cy, w, h), BoxFormat.CXCYWH)

    @classmethod
    def xyxy(cls, x1, y1, x2, y2) -> "Box":
        return cls((x1, y1, x2, y2), BoxFormat.XYXY)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.coords, dtype=float)

    @property
    def area(self) -> float:
        a, b, c, d = self.coords
        if self.fmt is BoxFormat.CXCYWH:
            return c * d
        return (c - a) * (d - b)

    def corners(self) -> Tuple[float, float, float, float]:
        """Corner coordinates in this box's own units."""
        a, b, c, d = self.coords
        if self.fmt is BoxFormat.XYXY:
            return a, b, c, d
        return a - c / 2, b - d / 2, a + c / 2, b + d / 2


def _check_image_size(image_size: ImageSize) -> Tuple[float, float]:
    try:
        width, height = (float(v) for v in image_size)
    except (TypeError, ValueError) as exc:
        raise DimensionError(f"bad image size {image_size!r}") from exc
    if not (width > 0 and height > 0) or not np.isfinite([width, height]).all():
        raise DimensionError(f"image size must be positive, got {image_size!r}")
    return width, height


def iou(a: Box, b: Box) -> float:
    """Intersection over union; boxes touching along an edge score 0."""
    if a.fmt is not b.fmt:
        raise ParameterizationError(f"cannot compare {a.fmt.value} with {b.fmt.value}")
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # areas from the same corners as the intersection, so iou(a, a) == 1 exactly
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return min(1.0, max(0.0, inter / union))


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two arrays of XYXY boxes, shapes (n, 4) and (m, 4)."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(inter > 0, inter / union, 0.0)
    return np.clip(out, 0.0, 1.0)


def convert(box: Box, target: BoxFormat, image_size: ImageSize) -> Box:
    """Convert between normalized CXCYWH and absolute XYXY.

    No clamping is performed, so conversions round-trip.
    """
    width, height = _check_image_size(image_size)
    target = BoxFormat(target)
    if box.fmt is target:
        return box
    a, b, c, d = box.coords
    if target is BoxFormat.XYXY:
        return Box.xyxy(
            (a - c / 2) * width,
            (b - d / 2) * height,
            (a + c / 2) * width,
            (b + d / 2) * height,
        )
    return Box.cxcywh(
        (a + c) / (2 * width),
        (b + d) / (2 * height),
        (c - a) / width,
        (d - b) / height,
    )


def clamp_to_image(box: Box, image_size: ImageSize) -> Box:
    """Clip an XYXY box to ``[0, W] x [0, H]``."""
    width, height = _check_image_size(image_size)
    if box.fmt is not BoxFormat.XYXY:
        raise ParameterizationError("clamp_to_image expects an XYXY box")
    x1, y1, x2, y2 = box.coords
    return Box.xyxy(
        min(max(x1, 0.0), width),
        min(max(y1, 0.0), height),
        min(max(x2, 0.0), width),
        min(max(y2, 0.0), height),
    )


def conversion_jacobian(source: BoxFormat, target: BoxFormat, image_size: ImageSize) -> np.ndarray:
    """Constant Jacobian of the coordinate change ``source -> target``."""
    width, height = _check_image_size(image_size)
    source, target = BoxFormat(source), BoxFormat(target)
    if source is target:
        return np.eye(4)
    scale = np.diag([width, height, width, height])
    forward = scale @ _CXCYWH_TO_XYXY
    if target is BoxFormat.XYXY:
        return forward
    return np.linalg.inv(forward)


def check_covariance(cov, tol: float = PSD_TOL) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (4, 4):
        raise DimensionError(f"box covariance must be 4x4, got {cov.shape}")
    if not np.isfinite(cov).all():
        raise CovarianceError("covariance has non-finite entries")
    scale = max(1.0, float(np.abs(cov).max()))
    if np.abs(cov - cov.T).max() > SYMMETRY_TOL * scale:
        raise CovarianceError("covariance is not symmetric")
    if np.linalg.eigvalsh(cov).min() < -tol * scale:
        raise CovarianceError("covariance is not positive semi-definite")
    return cov


def covariance_convert(cov, box: Box, target: BoxFormat, image_size: ImageSize) -> np.ndarray:
    """Map a box covariance into another parameterization: ``J cov J^T``.

    The coordinate change is linear, so ``J`` does not depend on the box
    itself; ``box`` only supplies the source parameterization.
    """
    cov = check_covariance(cov)
    jac = conversion_jacobian(box.fmt, target, image_size)
    out = jac @ cov @ jac.T
    return (out + out.T) / 2


def boxes_to_xyxy(boxes: Sequence[Box], image_size: ImageSize) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4))
    return np.array([convert(b, BoxFormat.XYXY, image_size).coords for b in boxes])
