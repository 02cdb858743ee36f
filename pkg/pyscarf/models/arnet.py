"""
Attentive redistribution: channel attention over the concatenated fused stack,
then per level resize, 1x1 projection and combination with the pyramid.
"""
from typing import List
from typing import Optional
from typing import Sequence

from pyscarf import nn
from pyscarf import tensor as T
from pyscarf.constants import CombineMode
from pyscarf.exceptions import ArgumentError
from pyscarf.exceptions import ConfigError
from pyscarf.exceptions import ShapeError
from pyscarf.models.backbone import PyramidFeatures
from pyscarf.models.scnet import FusedFeatures
from pyscarf.tensor import Tensor


class SeBlock:
    """
    Squeeze and excitation gate: pooled vector, two fully connected layers and
    a sigmoid.

    :param name: Parameter name prefix
    :param channels: Gated channels
    :param reduction: Hidden layer shrink ratio, must divide channels
    """

    def __init__(self, name: str, channels: int, reduction: int = 4):
        if reduction < 1 or channels % reduction:
            raise ConfigError(
                f"Reduction {reduction} does not divide {channels} channels.",
                ["reduction"],
            )
        self.name = name
        self.channels = channels
        self.reduction = reduction

    @property
    def hidden(self) -> int:
        return self.channels // self.reduction

    def register(self, store: nn.ParamStore):
        nn.register_linear(store, f"{self.name}.fc1", self.channels, self.hidden)
        nn.register_linear(store, f"{self.name}.fc2", self.hidden, self.channels)


def se_attention(z: Tensor, block: SeBlock, store: nn.ParamStore) -> Tensor:
    """
    Attention weights of a [channels, H, W] stack, a vector in (0, 1).

    :raise: :class:`~pyscarf.exceptions.ShapeError` on channel mismatch
    """
    if z.dims[0] != block.channels:
        raise ShapeError(
            f"{block.name} gates {block.channels} channels, got {z.dims[0]}.", z.dims
        )

    hidden = T.relu(nn.linear(store, f"{block.name}.fc1", T.global_avg_pool(z)))
    return T.sigmoid(nn.linear(store, f"{block.name}.fc2", hidden))


def combine(x: Tensor, m: Tensor, mode: CombineMode) -> Tensor:
    if mode == CombineMode.add:
        if x.dims != m.dims:
            raise ConfigError(
                f"Element-wise addition of {m.dims} onto {x.dims}.", ["d_out", "combine"]
            )
        return T.add(x, m)
    return T.concat_channels([x, m])


class ArNet:
    """
    Attentive redistribution network.

    :param fused_channels: Channels of the concatenated fused stack
    :param level_channels: Pyramid channels C_l
    :param out_channels: Redistributed channels per level, C_l when None
    :param mode: Combination with the original pyramid
    :param attention: Gate the stack with channel attention
    :param reduction: SE block reduction ratio
    :param per_level: One attention block per output level
    :param name: Parameter name prefix
    """

    def __init__(
        self,
        fused_channels: int,
        level_channels: Sequence[int],
        out_channels: Optional[Sequence[int]] = None,
        mode: CombineMode = CombineMode.concat,
        attention: bool = True,
        reduction: int = 4,
        per_level: bool = False,
        name: str = "arnet",
    ):
        self.name = name
        self.fused_channels = fused_channels
        self.level_channels = tuple(level_channels)
        self.out_channels = tuple(out_channels or level_channels)
        self.mode = mode
        self.attention = attention
        self.per_level = per_level

        if len(self.out_channels) != len(self.level_channels):
            raise ConfigError("One output channel count per level is required.", ["d_out"])
        if mode == CombineMode.add and self.out_channels != self.level_channels:
            raise ConfigError(
                "Element-wise addition needs d_out equal to every level's channels.",
                ["d_out", "combine"],
            )

        self.blocks: List[SeBlock] = []
        if attention:
            count = len(self.level_channels) if per_level else 1
            self.blocks = [
                SeBlock(f"{name}.se{i}" if per_level else f"{name}.se", fused_channels, reduction)
                for i in range(count)
            ]

    @property
    def combined_channels(self) -> List[int]:
        if self.mode == CombineMode.add:
            return list(self.level_channels)
        return [c + d for c, d in zip(self.level_channels, self.out_channels)]

    def register(self, store: nn.ParamStore):
        for block in self.blocks:
            block.register(store)
        for level, out_c in enumerate(self.out_channels):
            nn.register_conv(store, f"{self.name}.level{level}", self.fused_channels, out_c, 1)

    def gate(self, z: Tensor, level: int, store: nn.ParamStore) -> Tensor:
        if not self.blocks:
            return z
        block = self.blocks[level if self.per_level else 0]
        return T.hadamard(z, se_attention(z, block, store))

    def redistribute(
        self, z: Tensor, pyramid: PyramidFeatures, store: nn.ParamStore
    ) -> PyramidFeatures:
        """
        Gate a concatenated stack, bring it to every pyramid level and combine.

        :raise: :class:`~pyscarf.exceptions.ShapeError`
        """
        if z.dims[0] != self.fused_channels:
            raise ShapeError(
                f"{self.name} expects {self.fused_channels} fused channels.", z.dims
            )
        if pyramid.channels != self.level_channels:
            raise ShapeError("Pyramid channels differ from the configured ones.", pyramid.channels)

        shared = self.gate(z, 0, store) if not self.per_level else None
        levels = []
        for level, x in enumerate(pyramid):
            gated = shared if shared is not None else self.gate(z, level, store)
            height, width = x.dims[1:]
            if gated.dims[1:] != (height, width):
                gated = T.bilinear_resize(gated, height, width)
            m = nn.conv(store, f"{self.name}.level{level}", gated)
            levels.append(combine(x, m, self.mode))
        return pyramid.replace(levels)

    def forward(
        self, fused: FusedFeatures, pyramid: PyramidFeatures, store: nn.ParamStore
    ) -> PyramidFeatures:
        """
        :raise: :class:`~pyscarf.exceptions.ArgumentError` when the level
            counts differ
        """
        if len(fused) != len(pyramid):
            raise ArgumentError(
                f"{len(fused)} fused levels for a {len(pyramid)} level pyramid."
            )
        return self.redistribute(T.concat_channels(fused.levels), pyramid, store)


def arnet_forward(
    fused: FusedFeatures, pyramid: PyramidFeatures, arnet: ArNet, store: nn.ParamStore
) -> PyramidFeatures:
    return arnet.forward(fused, pyramid, store)
