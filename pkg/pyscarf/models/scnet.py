"""
Semantic combining: matching blocks and the bidirectional gated ConvLSTM sweep
over pyramid levels.
"""
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

from attr import attrib
from attr import dataclass

from pyscarf import nn
from pyscarf import tensor as T
from pyscarf.constants import InitScheme
from pyscarf.exceptions import ArgumentError
from pyscarf.exceptions import ShapeError
from pyscarf.models.backbone import PyramidFeatures
from pyscarf.tensor import Tensor

GATES = ("i", "f", "o")


class MatchingBlock:
    """
    Bilinear resize to a common spatial size followed by a per level 1x1
    convolution to a common channel count.

    :param name: Parameter name prefix
    :param in_channels: Channels of every registered level
    :param out_channels: Common output channels
    :param size: Common (height, width), None resizes to the finest input level
    """

    def __init__(
        self,
        name: str,
        in_channels: Sequence[int],
        out_channels: int,
        size: Optional[Tuple[int, int]] = None,
    ):
        self.name = name
        self.in_channels = tuple(in_channels)
        self.out_channels = out_channels
        self.size = size

    def register(self, store: nn.ParamStore):
        for level, channels in enumerate(self.in_channels):
            nn.register_conv(store, f"{self.name}.level{level}", channels, self.out_channels, 1)


def matching_forward(
    x: Tensor,
    block: MatchingBlock,
    level: int,
    store: nn.ParamStore,
    size: Optional[Tuple[int, int]] = None,
) -> Tensor:
    """
    Resize one pyramid level to the block's target size and project it to the
    block's channel count.

    :raise: :class:`~pyscarf.exceptions.ArgumentError` for unregistered levels
    """
    if not 0 <= level < len(block.in_channels):
        raise ArgumentError(f"Level {level} is not registered in {block.name}.")

    height, width = size or block.size or x.dims[1:]
    if x.dims[1:] != (height, width):
        x = T.bilinear_resize(x, height, width)
    return nn.conv(store, f"{block.name}.level{level}", x)


@dataclass
class LstmState:
    """
    Running state of the gated ConvLSTM.

    :param c: Cell state [d, H, W]
    :param h: Hidden output [d, H, W]
    :param gates: Input, forget and output gate vectors of the step that
        produced this state
    """

    c: Tensor
    h: Tensor
    gates: Optional[Tuple[Tensor, Tensor, Tensor]] = attrib(default=None, repr=False)

    @classmethod
    def zeros(cls, channels: int, height: int, width: int) -> "LstmState":
        zeros = Tensor.zeros((channels, height, width))
        return cls(zeros, zeros)


class ConvLstmCell:
    """
    Gated ConvLSTM cell whose gates are computed from globally pooled input
    and hidden state while the candidate uses full 3x3 convolutions.

    :param name: Parameter name prefix
    :param channels: State channels d
    """

    def __init__(self, name: str, channels: int):
        self.name = name
        self.channels = channels

    def register(self, store: nn.ParamStore):
        d = self.channels
        for gate in GATES:
            store.register(f"{self.name}.w_x{gate}", (d, d))
            store.register(f"{self.name}.w_h{gate}", (d, d))
            bias = 1.0 if gate == "f" else 0.0
            store.register(f"{self.name}.b_{gate}", (d,), InitScheme.constant, bias)
        store.register(f"{self.name}.w_xc", (d, d, 3, 3))
        store.register(f"{self.name}.w_hc", (d, d, 3, 3))
        store.register(f"{self.name}.b_c", (d,), InitScheme.zeros)

    def param_names(self) -> List[str]:
        names = []
        for gate in GATES:
            names += [f"{self.name}.w_x{gate}", f"{self.name}.w_h{gate}", f"{self.name}.b_{gate}"]
        return names + [f"{self.name}.w_xc", f"{self.name}.w_hc", f"{self.name}.b_c"]


def lstm_step(
    cell: ConvLstmCell, x: Tensor, prev: LstmState, store: nn.ParamStore
) -> LstmState:
    """
    Advance the cell by one pyramid level.

    :param cell: The cell whose weights are read from the store
    :param x: Matched input [d, H, W]
    :param prev: State of the previous level
    :raise: :class:`~pyscarf.exceptions.ShapeError`
    """
    if x.dims[0] != cell.channels or x.dims != prev.h.dims or x.dims != prev.c.dims:
        raise ShapeError(
            f"Cell {cell.name} expects matching [{cell.channels},H,W] input and state.",
            x.dims,
            prev.h.dims,
        )

    def w(key: str) -> Tensor:
        return store[f"{cell.name}.{key}"]

    x_bar = T.global_avg_pool(x)
    h_bar = T.global_avg_pool(prev.h)

    gates = []
    for gate in GATES:
        logit = T.add(T.fc(x_bar, w(f"w_x{gate}"), w(f"b_{gate}")), T.fc(h_bar, w(f"w_h{gate}")))
        gates.append(T.sigmoid(logit))
    i, f, o = gates

    candidate = T.tanh(
        T.add(
            T.conv2d(x, w("w_xc"), w("b_c"), pad=1),
            T.conv2d(prev.h, w("w_hc"), None, pad=1),
        )
    )
    c = T.add(T.hadamard(prev.c, f), T.hadamard(candidate, i))
    h = T.hadamard(T.tanh(c), o)
    return LstmState(c, h, (i, f, o))


def lstm_sweep(
    matched: Sequence[Tensor], cell: ConvLstmCell, store: nn.ParamStore
) -> List[LstmState]:
    """Run a cell over the matched levels in the given order from a zero
    state."""
    state = LstmState.zeros(*matched[0].dims)
    states = []
    for x in matched:
        state = lstm_step(cell, x, state, store)
        states.append(state)
    return states


def bilstm_sweep(
    matched: Sequence[Tensor],
    forward_cell: ConvLstmCell,
    backward_cell: Optional[ConvLstmCell],
    store: nn.ParamStore,
) -> List[Tensor]:
    """
    Forward sweep finest to coarsest, backward sweep coarsest to finest, the
    hidden outputs of both joined per level, forward first.
    """
    forward = [s.h for s in lstm_sweep(matched, forward_cell, store)]
    if backward_cell is None:
        return forward

    backward = [s.h for s in lstm_sweep(matched[::-1], backward_cell, store)][::-1]
    return [T.concat_channels([a, b]) for a, b in zip(forward, backward)]


@dataclass
class FusedFeatures:
    """
    ScNet output, one [2d, H, W] map per level (d when unidirectional) at the
    finest pyramid resolution.
    """

    levels: List[Tensor]

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, index: int) -> Tensor:
        return self.levels[index]

    @property
    def channels(self) -> int:
        return self.levels[0].dims[0]


class ScNet:
    """
    Semantic combining network.

    :param in_channels: Pyramid channels C_l
    :param d: Matched and LSTM state channels
    :param bidirectional: Add the coarse to fine sweep
    :param name: Parameter name prefix
    """

    def __init__(
        self,
        in_channels: Sequence[int],
        d: int,
        bidirectional: bool = True,
        name: str = "scnet",
    ):
        self.name = name
        self.d = d
        self.bidirectional = bidirectional
        self.matching = MatchingBlock(f"{name}.match", in_channels, d)
        self.forward_cell = ConvLstmCell(f"{name}.forward", d)
        self.backward_cell = ConvLstmCell(f"{name}.backward", d) if bidirectional else None

    @property
    def out_channels(self) -> int:
        return 2 * self.d if self.bidirectional else self.d

    @property
    def cells(self) -> List[ConvLstmCell]:
        return [c for c in (self.forward_cell, self.backward_cell) if c is not None]

    def register(self, store: nn.ParamStore):
        self.matching.register(store)
        for cell in self.cells:
            cell.register(store)

    def match(self, pyramid: PyramidFeatures, store: nn.ParamStore) -> List[Tensor]:
        size = pyramid.sizes[0]
        return [
            matching_forward(x, self.matching, level, store, size)
            for level, x in enumerate(pyramid)
        ]

    def forward(self, pyramid: PyramidFeatures, store: nn.ParamStore) -> FusedFeatures:
        """
        :raise: :class:`~pyscarf.exceptions.ArgumentError` with less than two
            levels
        """
        if len(pyramid) < 2:
            raise ArgumentError("ScNet needs at least two pyramid levels.")

        matched = self.match(pyramid, store)
        fused = bilstm_sweep(matched, self.forward_cell, self.backward_cell, store)
        return FusedFeatures(fused)


def scnet_forward(pyramid: PyramidFeatures, scnet: ScNet, store: nn.ParamStore) -> FusedFeatures:
    return scnet.forward(pyramid, store)
