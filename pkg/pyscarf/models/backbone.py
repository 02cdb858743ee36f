from typing import Iterator
from typing import List
from typing import Tuple

from attr import attrib
from attr import dataclass

from pyscarf import nn
from pyscarf import tensor as T
from pyscarf.exceptions import ArgumentError
from pyscarf.exceptions import ShapeError
from pyscarf.tensor import Tensor


def _ints(value) -> Tuple[int, ...]:
    return tuple(int(v) for v in value)


@dataclass(frozen=True)
class PyramidSpec:
    """
    Bottom-up pyramid layout.

    :param k: Levels read by the detector, the last k stages
    :param n: Total stages, stage l has stride 2**l
    :param channels: Channels of the k detection levels
    :param stem_channels: Channels of the n - k earlier stages
    :param input_size: Input (height, width)
    """

    k: int = 3
    n: int = 5
    channels: Tuple[int, ...] = attrib(default=(32, 64, 128), converter=_ints)
    stem_channels: int = 16
    input_size: Tuple[int, int] = attrib(default=(64, 64), converter=_ints)

    def __attrs_post_init__(self):
        if self.k < 2:
            raise ArgumentError("A pyramid needs at least two detection levels.")
        if self.k > self.n:
            raise ArgumentError(f"Cannot read {self.k} levels from {self.n} stages.")
        if len(self.channels) != self.k:
            raise ArgumentError("One channel count per detection level is required.")

    @property
    def strides(self) -> Tuple[int, ...]:
        return tuple(2 ** level for level in range(self.n - self.k + 1, self.n + 1))

    @property
    def stage_channels(self) -> Tuple[int, ...]:
        return (self.stem_channels,) * (self.n - self.k) + self.channels

    @property
    def sizes(self) -> List[Tuple[int, int]]:
        height, width = self.input_size
        return [(height // s, width // s) for s in self.strides]

    @property
    def max_stride(self) -> int:
        return 2 ** self.n


@dataclass
class PyramidFeatures:
    """
    Ordered feature maps, finest level first.

    :param levels: One [C_l, H_l, W_l] tensor per level
    :param strides: Input pixels per cell of every level
    """

    levels: List[Tensor]
    strides: Tuple[int, ...] = attrib(converter=_ints)

    def __attrs_post_init__(self):
        if len(self.levels) != len(self.strides):
            raise ArgumentError("One stride per pyramid level is required.")
        sizes = self.sizes
        if any(b[0] >= a[0] or b[1] >= a[1] for a, b in zip(sizes, sizes[1:])):
            raise ShapeError("Pyramid levels must shrink strictly.", *sizes)

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, index: int) -> Tensor:
        return self.levels[index]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.levels)

    @property
    def channels(self) -> Tuple[int, ...]:
        return tuple(x.dims[0] for x in self.levels)

    @property
    def sizes(self) -> List[Tuple[int, int]]:
        return [x.dims[1:] for x in self.levels]

    def replace(self, levels: List[Tensor]) -> "PyramidFeatures":
        return PyramidFeatures(levels, self.strides)


class Backbone:
    """
    Toy bottom-up CNN, every stage is conv3x3/2 -> relu -> conv3x3 -> relu.

    :param spec: The pyramid layout
    :param name: Parameter name prefix
    """

    def __init__(self, spec: PyramidSpec, name: str = "backbone", in_channels: int = 3):
        self.spec = spec
        self.name = name
        self.in_channels = in_channels

    def register(self, store: nn.ParamStore):
        channels = self.in_channels
        for stage, out_c in enumerate(self.spec.stage_channels, start=1):
            nn.register_conv(store, f"{self.name}.stage{stage}.down", channels, out_c)
            nn.register_conv(store, f"{self.name}.stage{stage}.conv", out_c, out_c)
            channels = out_c

    def forward(self, image: Tensor, store: nn.ParamStore) -> PyramidFeatures:
        """
        Run every stage and keep the last k outputs.

        :param image: [3, H0, W0] input, sides divisible by the max stride
        :raise: :class:`~pyscarf.exceptions.ShapeError`
        """
        _, height, width = image.dims
        stride = self.spec.max_stride
        if height % stride or width % stride:
            raise ShapeError(
                f"Input {height}x{width} is not divisible by stride {stride}.", image.dims
            )

        x = image
        outputs = []
        for stage in range(1, self.spec.n + 1):
            x = T.relu(nn.conv(store, f"{self.name}.stage{stage}.down", x, stride=2))
            x = T.relu(nn.conv(store, f"{self.name}.stage{stage}.conv", x))
            outputs.append(x)

        return PyramidFeatures(outputs[-self.spec.k :], self.spec.strides)


def backbone_forward(image: Tensor, spec: PyramidSpec, store: nn.ParamStore) -> PyramidFeatures:
    return Backbone(spec).forward(image, store)


def receptive_fields(spec: PyramidSpec) -> List[int]:
    """Receptive field of every detection level in input pixels."""
    field, jump, fields = 1, 1, []
    for _ in range(spec.n):
        field += 2 * jump
        jump *= 2
        field += 2 * jump
        fields.append(field)
    return fields[-spec.k :]
