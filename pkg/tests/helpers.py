import numpy as np

from detens.aggregation import ProbabilisticDetection
from detens.geometry import Box, BoxFormat, convert
from detens.metrics.common import GroundTruthInstance, GroundTruthStore, ImageInfo


def make_store(gt_by_image, size=(64, 64), categories=(1, 2, 3)):
    """gt_by_image: {image_id: [(xyxy, label), ...]}."""
    store = GroundTruthStore(categories={k: f"c{k}" for k in categories})
    for image_id, gts in gt_by_image.items():
        store.images[image_id] = ImageInfo(image_id, *size)
        store.instances[image_id] = [GroundTruthInstance(image_id, lab, Box.xyxy(*b), i + 1) for i, (b, lab) in enumerate(gts)]
    return store


def pdet(xyxy, label, conf, image_id=0, size=(64, 64), cov=None, support=1):
    box = convert(Box.xyxy(*xyxy), BoxFormat.CXCYWH, size)
    return ProbabilisticDetection(box, np.zeros((4, 4)) if cov is None else np.asarray(cov, float), label, conf, support, image_id)


def int_box(rng, size=64, max_side=24):
    x, y = rng.integers(0, size - max_side, size=2)
    w, h = rng.integers(2, max_side, size=2)
    return (int(x), int(y), int(x + w), int(y + h))
