from typing import List
from typing import Optional
from typing import Tuple

from attr import dataclass

from pyscarf import nn
from pyscarf import tensor as T
from pyscarf.models.backbone import Backbone
from pyscarf.models.backbone import PyramidFeatures
from pyscarf.models.backbone import PyramidSpec
from pyscarf.models.common import TrainConfig
from pyscarf.models.detector import AnchorSet
from pyscarf.models.detector import decode_nms
from pyscarf.models.detector import Detection
from pyscarf.models.detector import DetectionHead
from pyscarf.models.detector import head_forward
from pyscarf.models.fusion import build_fusion
from pyscarf.models.fusion import Fusion
from pyscarf.tensor import Tensor


@dataclass
class NetworkOutput:
    """
    :param cls_rows: [N, num_classes + 1] logits over every anchor
    :param reg_rows: [N, 4] box offsets over every anchor
    :param pyramid: Backbone features X_l
    :param fused: Features after fusion X'_l
    """

    cls_rows: Tensor
    reg_rows: Tensor
    pyramid: PyramidFeatures
    fused: PyramidFeatures


class ScarfDetector:
    """
    Backbone, feature fusion and detection head assembled from a
    :class:`~pyscarf.models.common.TrainConfig`.
    """

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.spec = PyramidSpec(
            k=cfg.k,
            n=max(cfg.k, 5),
            channels=cfg.channels,
            input_size=(cfg.input_size, cfg.input_size),
        )
        self.backbone = Backbone(self.spec)
        self.fusion: Fusion = build_fusion(
            cfg.fusion,
            cfg.channels,
            d=cfg.d,
            out_channels=None if cfg.d_out is None else cfg.level_out_channels,
            mode=cfg.combine,
            reduction=cfg.reduction,
            per_level_attention=cfg.per_level_attention,
            attention=cfg.attention,
        )
        self.head = DetectionHead(self.fusion.out_channels, cfg.num_classes)
        self.anchors = AnchorSet.generate(self.spec.sizes, self.spec.strides, cfg.anchor_scale)

    def register(self, store: nn.ParamStore) -> nn.ParamStore:
        self.backbone.register(store)
        self.fusion.register(store)
        self.head.register(store)
        return store

    def create_store(self, seed: Optional[int] = None) -> nn.ParamStore:
        return self.register(nn.ParamStore(self.cfg.seed if seed is None else seed))

    def features(self, image: Tensor, store: nn.ParamStore) -> Tuple[PyramidFeatures, PyramidFeatures]:
        pyramid = self.backbone.forward(image, store)
        return pyramid, self.fusion.forward(pyramid, store)

    def forward(self, image: Tensor, store: nn.ParamStore) -> NetworkOutput:
        pyramid, fused = self.features(image, store)
        classes = self.cfg.num_classes + 1
        cls_rows: List[Tensor] = []
        reg_rows: List[Tensor] = []
        for level, x in enumerate(fused):
            cls, reg = head_forward(x, self.head, level, store)
            cls_rows.append(self.head.rows(cls, classes))
            reg_rows.append(self.head.rows(reg, 4))
        return NetworkOutput(T.concat_rows(cls_rows), T.concat_rows(reg_rows), pyramid, fused)

    def detect(self, image: Tensor, store: nn.ParamStore, **kwargs) -> List[Detection]:
        output = self.forward(image, store)
        size = (self.cfg.input_size, self.cfg.input_size)
        return decode_nms(output.cls_rows, output.reg_rows, self.anchors, image_size=size, **kwargs)
