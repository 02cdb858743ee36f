"""
Single stage anchor head, anchor matching, losses and decoding.
"""
import json
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np
from attr import attrib
from attr import dataclass

from pyscarf import nn
from pyscarf import tensor as T
from pyscarf.constants import ANCHOR_RATIOS
from pyscarf.constants import BACKGROUND
from pyscarf.constants import BOX_VARIANCES
from pyscarf.exceptions import ArgumentError
from pyscarf.exceptions import ShapeError
from pyscarf.tensor import Tensor

IGNORE = -1

Box = Tuple[float, float, float, float]


def _box(value) -> Box:
    return tuple(float(v) for v in value)  # type: ignore


@dataclass(frozen=True)
class Anchor:
    level: int
    cx: float
    cy: float
    w: float
    h: float

    @property
    def box(self) -> Box:
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )


@dataclass
class AnchorSet:
    """
    Every anchor of a pyramid in head output order: level, row, column,
    aspect variant.

    :param centers: [N, 4] anchors as (cx, cy, w, h)
    :param levels: [N] pyramid level of every anchor
    """

    centers: np.ndarray
    levels: np.ndarray

    def __len__(self) -> int:
        return len(self.centers)

    def __getitem__(self, index: int) -> Anchor:
        return Anchor(int(self.levels[index]), *(float(v) for v in self.centers[index]))

    @property
    def corners(self) -> np.ndarray:
        return center_to_corners(self.centers)

    @classmethod
    def generate(
        cls,
        sizes: Sequence[Tuple[int, int]],
        strides: Sequence[int],
        scale: float = 4.0,
        ratios: Sequence[float] = ANCHOR_RATIOS,
    ) -> "AnchorSet":
        centers, levels = [], []
        for level, ((height, width), stride) in enumerate(zip(sizes, strides)):
            base = scale * stride
            for row in range(height):
                for col in range(width):
                    for ratio in ratios:
                        root = np.sqrt(ratio)
                        centers.append(
                            ((col + 0.5) * stride, (row + 0.5) * stride, base * root, base / root)
                        )
                        levels.append(level)
        return cls(np.asarray(centers, dtype=np.float64), np.asarray(levels, dtype=np.int64))


@dataclass(frozen=True)
class GroundTruth:
    """
    :param class_id: Object class, 1 based, 0 is background
    :param box: (x1, y1, x2, y2) in pixels
    """

    class_id: int
    box: Box = attrib(converter=_box)

    def to_dict(self) -> Dict:
        return {"class": self.class_id, "box": list(self.box)}

    @classmethod
    def from_dict(cls, data: Dict) -> "GroundTruth":
        return cls(int(data["class"]), data["box"])


@dataclass(frozen=True)
class Detection:
    """
    :param class_id: Predicted class, 1 based
    :param score: Softmax probability of the class
    :param box: (x1, y1, x2, y2) in pixels
    :param anchor: Index of the anchor the box was decoded from
    """

    class_id: int
    score: float
    box: Box = attrib(converter=_box)
    anchor: int = -1

    def to_dict(self, image_id=None) -> Dict:
        return {
            "image_id": image_id,
            "class": self.class_id,
            "score": self.score,
            "box": list(self.box),
        }


def export_detections(path: str, detections: Dict[str, List[Detection]]):
    """Write detections as json lines, one detection per line."""
    with open(path, "w", encoding="utf-8") as f:
        for image_id, items in detections.items():
            for detection in items:
                f.write(json.dumps(detection.to_dict(image_id), sort_keys=True))
                f.write("\n")


@dataclass
class MatchResult:
    """
    :param labels: Per anchor class, 0 background, -1 ignored
    :param targets: Per anchor encoded box offsets, zero unless positive
    :param matched_gt: Per anchor ground truth index, -1 unless positive
    """

    labels: np.ndarray
    targets: np.ndarray
    matched_gt: np.ndarray

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels > BACKGROUND)

    @property
    def negatives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == BACKGROUND)


def center_to_corners(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    half = boxes[:, 2:] / 2
    return np.concatenate([boxes[:, :2] - half, boxes[:, :2] + half], axis=1)


def corners_to_center(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    size = boxes[:, 2:] - boxes[:, :2]
    return np.concatenate([boxes[:, :2] + size / 2, size], axis=1)


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two (x1, y1, x2, y2) boxes."""
    return float(iou_matrix([a], [b])[0, 0])


def iou_matrix(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    low = np.maximum(a[:, None, :2], b[None, :, :2])
    high = np.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = np.prod(np.clip(high - low, 0, None), axis=2)
    area_a = np.prod(a[:, 2:] - a[:, :2], axis=1)
    area_b = np.prod(b[:, 2:] - b[:, :2], axis=1)
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def encode_boxes(gt_corners: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Offsets of corner boxes relative to (cx, cy, w, h) anchors."""
    gt = corners_to_center(gt_corners)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    centre = (gt[:, :2] - anchors[:, :2]) / anchors[:, 2:] / BOX_VARIANCES[0]
    size = np.log(gt[:, 2:] / anchors[:, 2:]) / BOX_VARIANCES[1]
    return np.concatenate([centre, size], axis=1)


def decode_boxes(offsets: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    centre = anchors[:, :2] + offsets[:, :2] * BOX_VARIANCES[0] * anchors[:, 2:]
    size = anchors[:, 2:] * np.exp(np.clip(offsets[:, 2:] * BOX_VARIANCES[1], None, 10.0))
    return center_to_corners(np.concatenate([centre, size], axis=1))


def match_anchors(
    anchors: AnchorSet,
    gts: Sequence[GroundTruth],
    pos_thr: float = 0.5,
    neg_thr: float = 0.4,
) -> MatchResult:
    """
    Assign every anchor a class, the background or the ignore label.

    Anchors with IoU >= pos_thr take their best ground truth (lowest index on
    ties), anchors below neg_thr are background, the rest is ignored. Every
    ground truth then claims its best anchor not claimed by an earlier one.
    """
    if not 0 <= neg_thr <= pos_thr <= 1:
        raise ArgumentError(f"Invalid thresholds neg={neg_thr} pos={pos_thr}.")

    count = len(anchors)
    labels = np.full(count, BACKGROUND, dtype=np.int64)
    matched = np.full(count, -1, dtype=np.int64)
    targets = np.zeros((count, 4), dtype=np.float64)
    if not gts:
        return MatchResult(labels, targets, matched)

    boxes = np.asarray([g.box for g in gts], dtype=np.float64)
    classes = np.asarray([g.class_id for g in gts], dtype=np.int64)
    overlaps = iou_matrix(anchors.corners, boxes)
    best_gt = overlaps.argmax(axis=1)
    best = overlaps[np.arange(count), best_gt]

    positive = best >= pos_thr
    labels[(best >= neg_thr) & ~positive] = IGNORE
    matched[positive] = best_gt[positive]

    claimed = set()
    for index in range(len(gts)):
        order = np.lexsort((np.arange(count), -overlaps[:, index]))
        anchor = next((int(a) for a in order if int(a) not in claimed), None)
        if anchor is None:
            break
        claimed.add(anchor)
        matched[anchor] = index

    positives = matched >= 0
    labels[positives] = classes[matched[positives]]
    targets[positives] = encode_boxes(boxes[matched[positives]], anchors.centers[positives])
    return MatchResult(labels, targets, matched)


@dataclass
class LossTerms:
    total: Tensor
    cls: Tensor
    reg: Tensor


def mine_negatives(logits: np.ndarray, match: MatchResult, neg_ratio: int = 3) -> np.ndarray:
    """Background anchors with the highest classification loss, at most
    neg_ratio per positive and never fewer than one."""
    negatives = match.negatives
    budget = min(len(negatives), neg_ratio * max(len(match.positives), 1))
    if budget == 0:
        return negatives[:0]
    losses = -T.log_softmax(np.asarray(logits, dtype=np.float64)[negatives])[:, BACKGROUND]
    order = np.lexsort((negatives, -losses))
    return np.sort(negatives[order[:budget]])


def detection_loss(
    cls_rows: Tensor, reg_rows: Tensor, match: MatchResult, neg_ratio: int = 3
) -> LossTerms:
    """
    Softmax cross entropy over positives and mined negatives plus smooth L1
    over positive offsets, both normalised by the positive count.

    :param cls_rows: [N, num_classes + 1] logits
    :param reg_rows: [N, 4] offsets
    :param match: Assignment of the same N anchors
    """
    count = len(match.labels)
    if cls_rows.dims[0] != count or reg_rows.dims != (count, 4):
        raise ShapeError("Head rows and anchor assignment differ.", cls_rows.dims, reg_rows.dims)

    positives = match.positives
    normaliser = 1.0 / max(len(positives), 1)
    selected = np.sort(np.concatenate([positives, mine_negatives(cls_rows.data, match, neg_ratio)]))

    cls_loss = T.scale(
        T.softmax_cross_entropy(
            T.gather_rows(cls_rows, selected), match.labels[selected], reduction="sum"
        ),
        normaliser,
    )
    if len(positives):
        reg_loss = T.scale(
            T.smooth_l1(
                T.gather_rows(reg_rows, positives),
                match.targets[positives].astype(reg_rows.data.dtype),
                reduction="sum",
            ),
            normaliser,
        )
    else:
        reg_loss = Tensor(0.0, dtype=cls_rows.data.dtype)
    return LossTerms(T.add(cls_loss, reg_loss), cls_loss, reg_loss)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thr: float = 0.45) -> List[int]:
    """
    Greedy suppression by descending score, ties by ascending index. A box is
    dropped when its IoU with a kept box exceeds iou_thr.

    :return: Kept indices in keep order
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = list(np.lexsort((np.arange(len(scores)), -scores)))
    overlaps = iou_matrix(boxes, boxes)
    keep: List[int] = []
    for index in order:
        if all(overlaps[index, kept] <= iou_thr for kept in keep):
            keep.append(int(index))
    return keep


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(T.log_softmax(np.asarray(logits, dtype=np.float64)))


def decode_nms(
    cls_rows,
    reg_rows,
    anchors: AnchorSet,
    conf_thr: float = 0.05,
    nms_iou: float = 0.45,
    topk: int = 100,
    image_size: Optional[Tuple[int, int]] = None,
) -> List[Detection]:
    """
    Turn head outputs into detections: per class softmax score filter and
    greedy NMS, then the topk overall by (score desc, class asc, anchor asc).

    :param image_size: Clip boxes to (height, width) when given
    """
    logits = cls_rows.data if isinstance(cls_rows, Tensor) else np.asarray(cls_rows)
    offsets = reg_rows.data if isinstance(reg_rows, Tensor) else np.asarray(reg_rows)
    if len(logits) != len(anchors) or len(offsets) != len(anchors):
        raise ShapeError("Head rows and anchors differ.", logits.shape, offsets.shape)

    probs = softmax(logits)
    boxes = decode_boxes(offsets, anchors.centers)
    if image_size is not None:
        height, width = image_size
        boxes = np.clip(boxes, 0, [width, height, width, height])
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])

    found: List[Detection] = []
    for class_id in range(1, probs.shape[1]):
        candidates = np.flatnonzero((probs[:, class_id] >= conf_thr) & valid)
        if not len(candidates):
            continue
        for kept in nms(boxes[candidates], probs[candidates, class_id], nms_iou):
            index = int(candidates[kept])
            found.append(Detection(class_id, float(probs[index, class_id]), boxes[index], index))

    found.sort(key=lambda d: (-d.score, d.class_id, d.anchor))
    return found[:topk]


class DetectionHead:
    """
    One 3x3 classification and one 3x3 regression convolution per level.

    :param in_channels: Channels of every fused level
    :param num_classes: Object classes, background excluded
    :param num_anchors: Aspect variants per cell
    """

    def __init__(
        self,
        in_channels: Sequence[int],
        num_classes: int,
        num_anchors: int = len(ANCHOR_RATIOS),
        name: str = "head",
    ):
        self.name = name
        self.in_channels = tuple(in_channels)
        self.num_classes = num_classes
        self.num_anchors = num_anchors

    def register(self, store: nn.ParamStore):
        for level, channels in enumerate(self.in_channels):
            nn.register_conv(
                store,
                f"{self.name}.level{level}.cls",
                channels,
                self.num_anchors * (self.num_classes + 1),
            )
            nn.register_conv(store, f"{self.name}.level{level}.reg", channels, self.num_anchors * 4)

    def rows(self, x: Tensor, width: int) -> Tensor:
        """[A * width, H, W] head map to [H * W * A, width] rows."""
        _, height, cols = x.dims
        x = T.reshape(x, (self.num_anchors, width, height, cols))
        return T.reshape(T.permute(x, (2, 3, 0, 1)), (height * cols * self.num_anchors, width))


def head_forward(
    x: Tensor, head: DetectionHead, level: int, store: nn.ParamStore
) -> Tuple[Tensor, Tensor]:
    """
    :raise: :class:`~pyscarf.exceptions.ShapeError` when the input width is
        not the configured one
    """
    if x.dims[0] != head.in_channels[level]:
        raise ShapeError(
            f"Head level {level} expects {head.in_channels[level]} channels.", x.dims
        )
    cls = nn.conv(store, f"{head.name}.level{level}.cls", x)
    reg = nn.conv(store, f"{head.name}.level{level}.reg", x)
    return cls, reg
