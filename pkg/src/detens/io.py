"""File formats: COCO ground truth, raw ensemble detections, probabilistic
detections with covariances, and CSV tables.

Detections are written COCO-results style (``bbox`` = absolute ``[x, y, w, h]``).
Probabilistic detections add ``support`` and a row-major 4x4 ``covariance``
over the absolute corner coordinates ``(x1, y1, x2, y2)`` in pixel^2.
All writers are atomic: data goes to a temporary file that is then renamed.
"""

from __future__ import annotations

import csv
import io as _io
import json
import os
import tempfile
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

import numpy as np

from detens.aggregation import ProbabilisticDetection
from detens.clustering import Detection
from detens.errors import DanglingReferenceError, ValidationError
from detens.geometry import Box, BoxFormat, convert, covariance_convert
from detens.metrics.common import GroundTruthInstance, GroundTruthStore, ImageInfo

SIG_DIGITS = 12
COV_SYMMETRY_TOL = 1e-6


def round_sig(x: float) -> float:
    """Round to ``SIG_DIGITS`` significant digits for stable text output."""
    return float(f"{float(x):.{SIG_DIGITS}g}")


_num = round_sig


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(obj, path) -> None:
    atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=False) + "\n")


def write_csv(rows: Sequence[Mapping], fieldnames: Sequence[str], path) -> None:
    buf = _io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(fieldnames), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    atomic_write_text(path, buf.getvalue())


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from None


def _xywh_to_box(bbox, where: str) -> Box:
    if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
        raise ValidationError(f"{where}: bbox must be [x, y, w, h]")
    try:
        x, y, w, h = (float(v) for v in bbox)
    except (TypeError, ValueError):
        raise ValidationError(f"{where}: bbox entries must be numbers") from None
    if not np.isfinite([x, y, w, h]).all() or w <= 0 or h <= 0:
        raise ValidationError(f"{where}: bbox needs finite values and positive width/height, got {bbox}")
    return Box.xyxy(x, y, x + w, y + h)


def _box_to_xywh(box: Box) -> List[float]:
    x1, y1, x2, y2 = box.coords
    return [_num(x1), _num(y1), _num(x2 - x1), _num(y2 - y1)]


def _parse_images(records) -> Dict[int, ImageInfo]:
    images = {}
    for idx, rec in enumerate(records or []):
        try:
            info = ImageInfo(int(rec["id"]), float(rec["width"]), float(rec["height"]), str(rec.get("file_name", "")))
        except (KeyError, TypeError, ValueError):
            raise ValidationError(f"images[{idx}]: needs integer id and numeric width/height") from None
        if info.width <= 0 or info.height <= 0:
            raise ValidationError(f"images[{idx}]: width and height must be positive")
        images[info.id] = info
    return images


def _images_payload(images: Mapping[int, ImageInfo]) -> List[dict]:
    return [
        {"id": i.id, "width": i.width, "height": i.height, "file_name": i.file_name}
        for i in sorted(images.values(), key=lambda i: i.id)
    ]


# -- ground truth ---------------------------------------------------------


def load_coco_gt(path) -> GroundTruthStore:
    """Read a COCO detection ground-truth file; boxes become absolute XYXY."""
    data = _read_json(path)
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: top level must be an object")
    images = _parse_images(data.get("images"))
    categories = {}
    for idx, rec in enumerate(data.get("categories") or []):
        try:
            categories[int(rec["id"])] = str(rec.get("name", rec["id"]))
        except (KeyError, TypeError, ValueError):
            raise ValidationError(f"categories[{idx}]: needs an integer id") from None
    store = GroundTruthStore(images=images, instances={i: [] for i in images}, categories=categories)
    for idx, rec in enumerate(data.get("annotations") or []):
        where = f"annotations[{idx}]"
        try:
            image_id = int(rec["image_id"])
            category_id = int(rec["category_id"])
        except (KeyError, TypeError, ValueError):
            raise ValidationError(f"{where}: needs integer image_id and category_id") from None
        if image_id not in images:
            raise DanglingReferenceError("image", image_id)
        if category_id not in categories:
            raise DanglingReferenceError("category", category_id)
        box = _xywh_to_box(rec.get("bbox"), where)
        store.instances[image_id].append(GroundTruthInstance(image_id, category_id, box, int(rec.get("id", idx))))
    for gts in store.instances.values():
        gts.sort(key=lambda g: (g.instance_id, g.label, g.box.coords))
    return store


def save_coco_gt(store: GroundTruthStore, path) -> None:
    annotations = []
    for image_id in store.image_ids():
        for gt in store.for_image(image_id):
            x, y, w, h = _box_to_xywh(gt.box)
            annotations.append(
                {
                    "id": gt.instance_id,
                    "image_id": image_id,
                    "category_id": gt.label,
                    "bbox": [x, y, w, h],
                    "area": _num(w * h),
                    "iscrowd": 0,
                }
            )
    payload = {
        "images": _images_payload(store.images),
        "annotations": annotations,
        "categories": [{"id": k, "name": v} for k, v in sorted(store.categories.items())],
    }
    write_json(payload, path)


# -- raw ensemble detections ----------------------------------------------


def save_raw_detections(sets_by_image: Mapping[int, Sequence[Sequence[Detection]]], images: Mapping[int, ImageInfo], num_groups: int, path) -> None:
    """Per-group detections before clustering."""
    records = []
    for image_id in sorted(sets_by_image):
        size = images[image_id].size
        for dets in sets_by_image[image_id]:
            for d in dets:
                records.append(
                    {
                        "image_id": image_id,
                        "group": d.group,
                        "query": d.query,
                        "category_id": d.label,
                        "bbox": _box_to_xywh(convert(d.box, BoxFormat.XYXY, size)),
                        "score": _num(d.confidence),
                    }
                )
    write_json({"num_groups": num_groups, "images": _images_payload(images), "detections": records}, path)


def load_raw_detections(path) -> Tuple[int, Dict[int, ImageInfo], Dict[int, List[List[Detection]]]]:
    data = _read_json(path)
    try:
        num_groups = int(data["num_groups"])
    except (KeyError, TypeError, ValueError):
        raise ValidationError(f"{path}: missing integer num_groups") from None
    if num_groups < 1:
        raise ValidationError(f"{path}: num_groups must be >= 1")
    images = _parse_images(data.get("images"))
    sets = {i: [[] for _ in range(num_groups)] for i in images}
    for idx, rec in enumerate(data.get("detections") or []):
        where = f"detections[{idx}]"
        try:
            image_id = int(rec["image_id"])
            group = int(rec.get("group", 1))
            score = float(rec["score"])
            label = int(rec["category_id"])
        except (KeyError, TypeError, ValueError):
            raise ValidationError(f"{where}: needs image_id, category_id and score") from None
        if image_id not in images:
            raise DanglingReferenceError("image", image_id)
        if not 1 <= group <= num_groups:
            raise ValidationError(f"{where}: group {group} outside 1..{num_groups}")
        if not 0.0 <= score <= 1.0:
            raise ValidationError(f"{where}: score {score} outside [0, 1]")
        box = convert(_xywh_to_box(rec.get("bbox"), where), BoxFormat.CXCYWH, images[image_id].size)
        sets[image_id][group - 1].append(Detection(box, label, score, group, int(rec.get("query", idx))))
    return num_groups, images, sets


# -- probabilistic detections ---------------------------------------------


def save_prob_detections(dets: Iterable[ProbabilisticDetection], path, images: Mapping[int, ImageInfo]) -> None:
    records = []
    used = set()
    for d in dets:
        if d.image_id not in images:
            raise DanglingReferenceError("image", d.image_id)
        size = images[d.image_id].size
        used.add(d.image_id)
        cov = covariance_convert(d.covariance, d.box, BoxFormat.XYXY, size)
        records.append(
            {
                "image_id": d.image_id,
                "category_id": d.label,
                "bbox": _box_to_xywh(convert(d.box, BoxFormat.XYXY, size)),
                "score": _num(d.confidence),
                "support": int(d.support),
                "covariance": [_num(v) for v in cov.ravel()],
            }
        )
    payload = {"images": _images_payload(images), "detections": records}
    write_json(payload, path)


def load_prob_detections(path, images: Mapping[int, ImageInfo] = None) -> List[ProbabilisticDetection]:
    """Inverse of :func:`save_prob_detections`; boxes come back as normalized CXCYWH.

    Image sizes are taken from the file's ``images`` table, or from ``images``
    when the file has none (plain COCO results files).
    """
    data = _read_json(path)
    if isinstance(data, list):
        data = {"detections": data}
    table = _parse_images(data.get("images")) or dict(images or {})
    out = []
    for idx, rec in enumerate(data.get("detections") or []):
        where = f"detections[{idx}]"
        try:
            image_id = int(rec["image_id"])
            label = int(rec["category_id"])
            score = float(rec["score"])
        except (KeyError, TypeError, ValueError):
            raise ValidationError(f"{where}: needs image_id, category_id and score") from None
        if image_id not in table:
            raise DanglingReferenceError("image", image_id)
        if not 0.0 <= score <= 1.0:
            raise ValidationError(f"{where}: score {score} outside [0, 1]")
        raw_cov = rec.get("covariance")
        if raw_cov is None:
            raise ValidationError(f"{where}: missing covariance")
        cov = np.asarray(raw_cov, dtype=float)
        if cov.size != 16:
            raise ValidationError(f"{where}: covariance needs 16 numbers, got {cov.size}")
        cov = cov.reshape(4, 4)
        scale = max(1.0, float(np.abs(cov).max()))
        if np.abs(cov - cov.T).max() > COV_SYMMETRY_TOL * scale:
            raise ValidationError(f"{where}: covariance is not symmetric")
        cov = (cov + cov.T) / 2
        size = table[image_id].size
        xyxy = _xywh_to_box(rec.get("bbox"), where)
        out.append(
            ProbabilisticDetection(
                box=convert(xyxy, BoxFormat.CXCYWH, size),
                covariance=covariance_convert(cov, xyxy, BoxFormat.CXCYWH, size),
                label=label,
                confidence=score,
                support=int(rec.get("support", 1)),
                image_id=image_id,
            )
        )
    return out


def load_images_table(path) -> Dict[int, ImageInfo]:
    data = _read_json(path)
    return _parse_images(data.get("images") if isinstance(data, dict) else None)


# -- tables ---------------------------------------------------------------

RELIABILITY_FIELDS = ("lo", "hi", "mean_conf", "precision", "count")


def write_reliability_csv(result, path) -> None:
    rows = [
        {
            "lo": _num(b.lo),
            "hi": _num(b.hi),
            "mean_conf": "" if b.count == 0 else _num(b.mean_conf),
            "precision": "" if b.count == 0 else _num(b.precision),
            "count": b.count,
        }
        for b in result.bins
    ]
    write_csv(rows, RELIABILITY_FIELDS, path)
