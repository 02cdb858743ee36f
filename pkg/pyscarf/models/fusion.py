"""
Interchangeable feature fusions between the backbone and the detection heads.
"""
from typing import List
from typing import Optional
from typing import Sequence

from pyscarf import nn
from pyscarf import tensor as T
from pyscarf.constants import CombineMode
from pyscarf.constants import FusionKind
from pyscarf.exceptions import ArgumentError
from pyscarf.exceptions import ShapeError
from pyscarf.models.arnet import ArNet
from pyscarf.models.backbone import PyramidFeatures
from pyscarf.models.scnet import FusedFeatures
from pyscarf.models.scnet import MatchingBlock
from pyscarf.models.scnet import ScNet
from pyscarf.models.scnet import matching_forward


class Fusion:
    """
    Maps a pyramid to a pyramid with the same spatial dims per level.

    :param level_channels: Pyramid channels C_l
    """

    kind: FusionKind

    def __init__(self, level_channels: Sequence[int]):
        self.level_channels = tuple(level_channels)

    @property
    def out_channels(self) -> List[int]:
        return list(self.level_channels)

    def register(self, store: nn.ParamStore):
        pass

    def forward(self, pyramid: PyramidFeatures, store: nn.ParamStore) -> PyramidFeatures:
        raise NotImplementedError

    @staticmethod
    def check_levels(pyramid: PyramidFeatures):
        if len(pyramid) < 2:
            raise ArgumentError("Fusion needs at least two pyramid levels.")


class PlainFusion(Fusion):
    kind = FusionKind.plain

    def forward(self, pyramid, store=None):
        return pyramid


class ScarfFusion(Fusion):
    """
    ScNet followed by ArNet, also the unidirectional and attention free
    ablations.
    """

    def __init__(
        self,
        level_channels: Sequence[int],
        d: int,
        out_channels: Optional[Sequence[int]] = None,
        mode: CombineMode = CombineMode.concat,
        attention: bool = True,
        bidirectional: bool = True,
        reduction: int = 4,
        per_level_attention: bool = False,
    ):
        super().__init__(level_channels)
        self.scnet = ScNet(level_channels, d, bidirectional)
        self.arnet = ArNet(
            len(self.level_channels) * self.scnet.out_channels,
            level_channels,
            out_channels,
            mode,
            attention,
            reduction,
            per_level_attention,
        )
        if not bidirectional:
            self.kind = FusionKind.unilstm
        elif not attention:
            self.kind = FusionKind.scarf_no_attention
        else:
            self.kind = FusionKind.scarf_full

    @property
    def out_channels(self) -> List[int]:
        return self.arnet.combined_channels

    def register(self, store: nn.ParamStore):
        self.scnet.register(store)
        self.arnet.register(store)

    def fuse(self, pyramid: PyramidFeatures, store: nn.ParamStore) -> FusedFeatures:
        return self.scnet.forward(pyramid, store)

    def forward(self, pyramid, store):
        self.check_levels(pyramid)
        return self.arnet.forward(self.fuse(pyramid, store), pyramid, store)


class ConvFusion(Fusion):
    """
    The recurrent sweep replaced by one 1x1 convolution over the matched,
    concatenated levels. Redistribution is the same as ScarfFusion.
    """

    kind = FusionKind.conv_fusion

    def __init__(
        self,
        level_channels: Sequence[int],
        d: int,
        out_channels: Optional[Sequence[int]] = None,
        mode: CombineMode = CombineMode.concat,
        attention: bool = True,
        reduction: int = 4,
        per_level_attention: bool = False,
        name: str = "convfusion",
    ):
        super().__init__(level_channels)
        self.name = name
        self.d = d
        self.matching = MatchingBlock(f"{name}.match", level_channels, d)
        self.fused_channels = 2 * d * len(self.level_channels)
        self.arnet = ArNet(
            self.fused_channels,
            level_channels,
            out_channels,
            mode,
            attention,
            reduction,
            per_level_attention,
        )

    @property
    def out_channels(self) -> List[int]:
        return self.arnet.combined_channels

    def register(self, store: nn.ParamStore):
        self.matching.register(store)
        stacked = self.d * len(self.level_channels)
        nn.register_conv(store, f"{self.name}.mix", stacked, self.fused_channels, 1)
        self.arnet.register(store)

    def forward(self, pyramid, store):
        self.check_levels(pyramid)
        size = pyramid.sizes[0]
        matched = [
            matching_forward(x, self.matching, level, store, size)
            for level, x in enumerate(pyramid)
        ]
        z = nn.conv(store, f"{self.name}.mix", T.concat_channels(matched))
        return self.arnet.redistribute(z, pyramid, store)


class TopDownFusion(Fusion):
    """
    Lateral 1x1 projections summed with a 2x upsampled, 1x1 projected
    coarser output, from the top level down.
    """

    kind = FusionKind.topdown

    def __init__(
        self,
        level_channels: Sequence[int],
        out_channels: Optional[Sequence[int]] = None,
        name: str = "topdown",
    ):
        super().__init__(level_channels)
        self.name = name
        self.channels = tuple(out_channels or level_channels)

    @property
    def out_channels(self) -> List[int]:
        return list(self.channels)

    def register(self, store: nn.ParamStore):
        top = len(self.level_channels) - 1
        for level, (in_c, out_c) in enumerate(zip(self.level_channels, self.channels)):
            nn.register_conv(store, f"{self.name}.lateral{level}", in_c, out_c, 1)
            if level < top:
                nn.register_conv(
                    store, f"{self.name}.topdown{level}", self.channels[level + 1], out_c, 1
                )

    def forward(self, pyramid, store):
        self.check_levels(pyramid)
        top = len(pyramid) - 1
        outputs = [None] * len(pyramid)
        outputs[top] = nn.conv(store, f"{self.name}.lateral{top}", pyramid[top])
        for level in range(top - 1, -1, -1):
            height, width = pyramid[level].dims[1:]
            coarse = outputs[level + 1]
            if coarse.dims[1] * 2 != height or coarse.dims[2] * 2 != width:
                raise ShapeError(
                    f"Level {level} is not twice the size of level {level + 1}.",
                    pyramid[level].dims,
                    coarse.dims,
                )
            up = T.bilinear_resize(coarse, height, width)
            outputs[level] = T.add(
                nn.conv(store, f"{self.name}.lateral{level}", pyramid[level]),
                nn.conv(store, f"{self.name}.topdown{level}", up),
            )
        return pyramid.replace(outputs)


def build_fusion(
    kind: FusionKind,
    level_channels: Sequence[int],
    d: int = 32,
    out_channels: Optional[Sequence[int]] = None,
    mode: CombineMode = CombineMode.concat,
    reduction: int = 4,
    per_level_attention: bool = False,
    attention: bool = True,
) -> Fusion:
    """
    Create the fusion of the given kind. ``attention`` only matters for
    ConvFusion, the scarf kinds fix it themselves.
    """
    if kind == FusionKind.plain:
        return PlainFusion(level_channels)
    if kind == FusionKind.topdown:
        return TopDownFusion(level_channels, out_channels)
    if kind == FusionKind.conv_fusion:
        return ConvFusion(
            level_channels, d, out_channels, mode, attention, reduction, per_level_attention
        )
    return ScarfFusion(
        level_channels,
        d,
        out_channels,
        mode,
        attention=kind in (FusionKind.scarf_full, FusionKind.unilstm) and attention,
        bidirectional=kind != FusionKind.unilstm,
        reduction=reduction,
        per_level_attention=per_level_attention,
    )


def plain_forward(pyramid: PyramidFeatures) -> PyramidFeatures:
    return pyramid


def conv_fusion_forward(pyramid, fusion: ConvFusion, store) -> PyramidFeatures:
    return fusion.forward(pyramid, store)


def topdown_forward(pyramid, fusion: TopDownFusion, store) -> PyramidFeatures:
    return fusion.forward(pyramid, store)


def unilstm_forward(pyramid, fusion: ScarfFusion, store) -> PyramidFeatures:
    if fusion.scnet.bidirectional:
        raise ArgumentError("unilstm_forward needs a unidirectional ScarfFusion.")
    return fusion.forward(pyramid, store)
