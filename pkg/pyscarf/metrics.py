from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence

import numpy as np
from attr import attrib
from attr import dataclass

from pyscarf.models.common import BaseModel
from pyscarf.models.detector import Detection
from pyscarf.models.detector import GroundTruth
from pyscarf.models.detector import iou_matrix


@dataclass
class APReport(BaseModel):
    """
    :param per_class: Average precision per class id with ground truth
    :param map: Mean over per_class, 0 when no class has ground truth
    :param iou_thr: Overlap needed for a true positive
    :param images: Number of evaluated images
    """

    per_class: Dict[int, float] = attrib(factory=dict)
    map: float = 0.0
    iou_thr: float = 0.5
    images: int = 0

    def to_dict(self) -> Dict:
        return {
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "map": self.map,
            "iou_thr": self.iou_thr,
            "images": self.images,
        }


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the monotone precision envelope, all points."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def class_tp_fp(
    dets: Sequence[Sequence[Detection]],
    gts: Sequence[Sequence[GroundTruth]],
    class_id: int,
    iou_thr: float,
):
    """True/false positive flags of one class's detections in descending
    score order, and that class's ground truth count."""
    boxes = [np.asarray([g.box for g in image if g.class_id == class_id]) for image in gts]
    total = sum(len(b) for b in boxes)
    used = [np.zeros(len(b), dtype=bool) for b in boxes]

    ranked = [
        (d.score, image, order, d)
        for image, items in enumerate(dets)
        for order, d in enumerate(items)
        if d.class_id == class_id
    ]
    ranked.sort(key=lambda r: (-r[0], r[1], r[2]))

    tp = np.zeros(len(ranked))
    for rank, (_, image, _, det) in enumerate(ranked):
        if not len(boxes[image]):
            continue
        overlaps = iou_matrix([det.box], boxes[image])[0]
        best = int(overlaps.argmax())
        if overlaps[best] >= iou_thr and not used[image][best]:
            used[image][best] = True
            tp[rank] = 1.0
    return tp, 1.0 - tp, total


def eval_map(
    dets: Sequence[Sequence[Detection]],
    gts: Sequence[Sequence[GroundTruth]],
    iou_thr: float = 0.5,
    classes: Optional[List[int]] = None,
) -> APReport:
    """
    VOC style mean average precision.

    Detections of a class are ranked by score over all images and matched
    greedily to the best overlapping unused ground truth of their image.
    Classes without ground truth are left out of the mean.

    :param dets: Detections per image
    :param gts: Ground truth per image, same order as dets
    :param classes: Class ids to evaluate, default every ground truth class
    """
    if len(dets) != len(gts):
        raise ValueError(f"{len(dets)} detection lists for {len(gts)} images.")

    if classes is None:
        classes = sorted({g.class_id for image in gts for g in image})

    per_class = {}
    for class_id in classes:
        tp, fp, total = class_tp_fp(dets, gts, class_id, iou_thr)
        if total == 0:
            continue
        tp, fp = np.cumsum(tp), np.cumsum(fp)
        recall = tp / total
        precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
        per_class[class_id] = average_precision(recall, precision)

    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return APReport(per_class, mean, iou_thr, len(gts))
