"""Seeded synthetic scenes and simulated ensemble detection sets.

Stands in for a trained detector: each of the G groups re-detects every
ground-truth object with size-relative box jitter, a noisy confidence and a
chance of missing it, then adds Poisson-distributed low-confidence false
positives. Group ``g`` of image ``i`` draws from its own stream keyed by
``(seed, i, g)``, so the first G groups are identical whatever the total
group count, and noise scales are applied to shared standard-normal draws.
Box errors can be partly common to all groups (``box_correlation``), as
groups that share one encoder tend to err in the same direction; each
detection's jitter keeps standard deviation ``box_sigma`` either way.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from detens.clustering import Detection
from detens.errors import CapacityError, ConfigurationError
from detens.geometry import Box, BoxFormat, convert, iou
from detens.metrics.common import GroundTruthInstance, GroundTruthStore, ImageInfo

MAX_REJECTIONS = 10_000

_TAG_SCENE, _TAG_GROUP, _TAG_SHARED = 21, 22, 23

DetectionSetGroup = List[List[Detection]]


@dataclass(frozen=True)
class SceneParams:
    image_size: Tuple[int, int] = (256, 192)
    min_objects: int = 1
    max_objects: int = 3
    num_classes: int = 3
    min_box_size: float = 16.0
    max_box_size: float = 96.0
    overlap_limit: float = 0.3
    seed: int = 0

    def __post_init__(self):
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise ConfigurationError(f"image size must be positive, got {self.image_size}")
        if self.min_objects < 0 or self.max_objects < self.min_objects:
            raise ConfigurationError("object count range must satisfy 0 <= min <= max")
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")
        if not 0 < self.min_box_size <= self.max_box_size:
            raise ConfigurationError("box size range must satisfy 0 < min <= max")
        if self.min_box_size > min(w, h):
            raise ConfigurationError("min_box_size does not fit in the image")
        if not 0.0 <= self.overlap_limit < 1.0:
            raise ConfigurationError(f"overlap_limit must lie in [0, 1), got {self.overlap_limit}")


@dataclass(frozen=True)
class EnsembleNoise:
    box_sigma: float = 0.05
    conf_base: float = 0.85
    conf_jitter: float = 0.1
    miss_prob: float = 0.1
    fp_rate: float = 0.5
    fp_conf_range: Tuple[float, float] = (0.05, 0.5)
    fp_size_range: Tuple[float, float] = (0.05, 0.4)  # fraction of image side
    box_correlation: float = 0.4  # share of jitter variance common to all groups
    seed: int = 0

    def __post_init__(self):
        if self.box_sigma < 0 or self.conf_jitter < 0:
            raise ConfigurationError("noise scales must be non-negative")
        if not 0.0 <= self.conf_base <= 1.0:
            raise ConfigurationError("conf_base must lie in [0, 1]")
        if not 0.0 <= self.miss_prob <= 1.0:
            raise ConfigurationError("miss_prob must lie in [0, 1]")
        if self.fp_rate < 0:
            raise ConfigurationError("fp_rate must be non-negative")
        lo, hi = self.fp_conf_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigurationError("fp_conf_range must be a sub-interval of [0, 1]")
        lo, hi = self.fp_size_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigurationError("fp_size_range must be a sub-interval of (0, 1]")
        if not 0.0 <= self.box_correlation <= 1.0:
            raise ConfigurationError("box_correlation must lie in [0, 1]")


def generate_scene(params: SceneParams, image_id: Optional[int] = None) -> List[GroundTruthInstance]:
    """Rejection-sample non-overlapping (up to ``overlap_limit``) ground-truth boxes."""
    image_id = params.seed if image_id is None else image_id
    rng = np.random.default_rng([params.seed, _TAG_SCENE])
    width, height = params.image_size
    count = int(rng.integers(params.min_objects, params.max_objects + 1))
    max_w = min(params.max_box_size, width)
    max_h = min(params.max_box_size, height)
    placed: List[GroundTruthInstance] = []
    for idx in range(count):
        for _ in range(MAX_REJECTIONS):
            w = rng.uniform(params.min_box_size, max_w)
            h = rng.uniform(params.min_box_size, max_h)
            x1 = rng.uniform(0, width - w)
            y1 = rng.uniform(0, height - h)
            box = Box.xyxy(x1, y1, x1 + w, y1 + h)
            if all(iou(box, other.box) <= params.overlap_limit for other in placed):
                break
        else:
            raise CapacityError(f"could not place object {idx + 1} of {count} after {MAX_REJECTIONS} tries")
        label = int(rng.integers(1, params.num_classes + 1))
        placed.append(GroundTruthInstance(image_id, label, box, idx + 1))
    return placed


def _jittered_box(gt: Box, z, sigma: float, image_size) -> Box:
    x1, y1, x2, y2 = gt.coords
    w, h = x2 - x1, y2 - y1
    dx, dy = sigma * w * z[0], sigma * h * z[1]
    dw, dh = sigma * w * z[2], sigma * h * z[3]
    nx1, nx2 = x1 + dx - dw / 2, x2 + dx + dw / 2
    ny1, ny2 = y1 + dy - dh / 2, y2 + dy + dh / 2
    # keep a sliver of width if the jitter collapses the box
    if nx2 - nx1 <= 1e-3 * w:
        mid = (nx1 + nx2) / 2
        nx1, nx2 = mid - 5e-4 * w, mid + 5e-4 * w
    if ny2 - ny1 <= 1e-3 * h:
        mid = (ny1 + ny2) / 2
        ny1, ny2 = mid - 5e-4 * h, mid + 5e-4 * h
    width, height = image_size
    nx1, nx2 = np.clip([nx1, nx2], 0.0, width)
    ny1, ny2 = np.clip([ny1, ny2], 0.0, height)
    if nx2 <= nx1 or ny2 <= ny1:
        return gt  # pushed entirely outside; fall back to the unjittered box
    return Box.xyxy(nx1, ny1, nx2, ny2)


def _random_box(rng, size_range, image_size) -> Box:
    width, height = image_size
    w = rng.uniform(*size_range) * width
    h = rng.uniform(*size_range) * height
    x1 = rng.uniform(0, width - w)
    y1 = rng.uniform(0, height - h)
    return Box.xyxy(x1, y1, x1 + w, y1 + h)


def shared_box_errors(num_objects: int, noise: EnsembleNoise, image_id: int) -> np.ndarray:
    """Per-object standard-normal box errors common to every group."""
    rng = np.random.default_rng([noise.seed, image_id, _TAG_SHARED])
    return rng.standard_normal((num_objects, 4))


def simulate_group(gts: List[GroundTruthInstance], group: int, noise: EnsembleNoise, image: ImageInfo, num_classes: int) -> List[Detection]:
    rng = np.random.default_rng([noise.seed, image.id, _TAG_GROUP, group])
    shared = shared_box_errors(len(gts), noise, image.id)
    rho = noise.box_correlation
    dets: List[Detection] = []
    for idx, gt in enumerate(gts):
        # fixed draw count per object keeps the stream aligned across noise settings
        u_miss = rng.random()
        z_box = np.sqrt(rho) * shared[idx] + np.sqrt(1.0 - rho) * rng.standard_normal(4)
        z_conf = rng.standard_normal()
        if u_miss < noise.miss_prob:
            continue
        box = _jittered_box(gt.box, z_box, noise.box_sigma, image.size)
        conf = float(np.clip(noise.conf_base + noise.conf_jitter * z_conf, 0.0, 1.0))
        dets.append(Detection(convert(box, BoxFormat.CXCYWH, image.size), gt.label, conf, group, len(dets)))
    for _ in range(int(rng.poisson(noise.fp_rate))):
        box = _random_box(rng, noise.fp_size_range, image.size)
        label = int(rng.integers(1, num_classes + 1))
        conf = float(rng.uniform(*noise.fp_conf_range))
        dets.append(Detection(convert(box, BoxFormat.CXCYWH, image.size), label, conf, group, len(dets)))
    return dets


def simulate_ensemble(
    gts: List[GroundTruthInstance],
    num_groups: int,
    noise: EnsembleNoise,
    image: ImageInfo,
    num_classes: int = 3,
) -> DetectionSetGroup:
    """G simulated detection sets (CXCYWH-normalized boxes) for one image."""
    if num_groups < 1:
        raise ConfigurationError(f"num_groups must be >= 1, got {num_groups}")
    return [simulate_group(gts, g, noise, image, num_classes) for g in range(1, num_groups + 1)]


def synthetic_dataset(params: SceneParams, num_images: int = 1) -> GroundTruthStore:
    """``num_images`` scenes; image ``i`` uses scene seed ``params.seed + i``."""
    from dataclasses import replace

    store = GroundTruthStore(categories={k: f"class_{k}" for k in range(1, params.num_classes + 1)})
    width, height = params.image_size
    for i in range(num_images):
        image_id = params.seed + i
        store.images[image_id] = ImageInfo(image_id, width, height, f"synthetic_{image_id:06d}.png")
        store.instances[image_id] = generate_scene(replace(params, seed=image_id), image_id)
    return store
