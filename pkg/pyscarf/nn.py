from collections import OrderedDict
from typing import Dict
from typing import Iterator
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np

from pyscarf import tensor as T
from pyscarf.constants import InitScheme
from pyscarf.exceptions import ArgumentError
from pyscarf.exceptions import ConsistencyError
from pyscarf.models.common import SgdConfig
from pyscarf.tensor import Tensor


def fan_in(dims: Sequence[int]) -> int:
    return int(np.prod(dims[1:])) if len(dims) > 1 else int(dims[0])


def init_tensor(
    dims: Sequence[int],
    scheme: InitScheme = InitScheme.kaiming_uniform,
    seed: int = 0,
    constant: float = 0.0,
) -> Tensor:
    """
    Create a parameter tensor, deterministic given its arguments.

    :param dims: Tensor extents, the fan in is the product of all but the first
    :param scheme: Initialization scheme
    :param seed: Random seed for the kaiming scheme
    :param constant: Fill value for the constant scheme
    :rtype: :class:`~pyscarf.tensor.Tensor`
    """
    dims = tuple(int(d) for d in dims)
    dtype = T.default_dtype()
    if scheme == InitScheme.zeros:
        data = np.zeros(dims, dtype=dtype)
    elif scheme == InitScheme.constant:
        data = np.full(dims, constant, dtype=dtype)
    else:
        bound = np.sqrt(6.0 / fan_in(dims))
        rng = np.random.default_rng(seed)
        data = rng.uniform(-bound, bound, size=dims).astype(dtype)
    return Tensor(data, requires_grad=True, dtype=dtype)


class ParamStore:
    """
    Ordered, uniquely named trainable tensors plus their momentum buffers.

    :param rng_seed: Seed every registered tensor's own seed derives from
    """

    def __init__(self, rng_seed: int = 0):
        self.rng_seed = int(rng_seed)
        self.entries: Dict[str, Tensor] = OrderedDict()
        self.velocity: Dict[str, np.ndarray] = {}

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.entries[name]
        except KeyError:
            raise ArgumentError(f"Unknown parameter {name}.")

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def items(self):
        return self.entries.items()

    def names(self, prefix: Optional[str] = None):
        return [n for n in self.entries if prefix is None or n.startswith(prefix)]

    def register(
        self,
        name: str,
        dims: Sequence[int],
        scheme: InitScheme = InitScheme.kaiming_uniform,
        constant: float = 0.0,
    ) -> Tensor:
        if name in self.entries:
            raise ArgumentError(f"Parameter {name} is already registered.")

        seed = np.random.SeedSequence([self.rng_seed, len(self.entries)])
        value = init_tensor(dims, scheme, int(seed.generate_state(1)[0]), constant)
        self.entries[name] = value
        return value

    def assign(self, name: str, data):
        """Replace the value of a registered parameter, dims must not change."""
        current = self[name]
        data = np.asarray(data, dtype=current.data.dtype)
        if data.shape != current.dims:
            raise ConsistencyError(
                f"Parameter {name} has dims {current.dims}, got {data.shape}."
            )
        self.entries[name] = Tensor(data, requires_grad=True, dtype=current.data.dtype)

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.entries.items()}

    def load(self, params: Dict[str, np.ndarray]):
        """
        Assign every registered parameter from a name to array mapping.

        :raise: :class:`~pyscarf.exceptions.ConsistencyError` when names or
            dims differ
        """
        missing = [n for n in self.entries if n not in params]
        extra = [n for n in params if n not in self.entries]
        if missing or extra:
            raise ConsistencyError(
                f"Parameter names differ, missing={missing} unexpected={extra}."
            )
        for name in self.entries:
            self.assign(name, params[name])

    def gradients(self, grads: T.Gradients) -> Dict[str, np.ndarray]:
        return {name: grads[t] for name, t in self.entries.items()}


def param_count(store: ParamStore, prefix: Optional[str] = None) -> int:
    return sum(store[name].size for name in store.names(prefix))


def sgd_step(
    store: ParamStore, grads: Dict[str, np.ndarray], cfg: SgdConfig, iteration: int
):
    """
    One momentum SGD update with L2 weight decay.

    v = momentum * v + grad + weight_decay * param
    param = param - lr(iteration) * v

    :raise: :class:`~pyscarf.exceptions.ConsistencyError` when a parameter
        has no gradient
    """
    if iteration < 0:
        raise ArgumentError("Iteration must be non negative.")

    missing = [name for name in store if name not in grads]
    if missing:
        raise ConsistencyError(f"Missing gradients for {', '.join(missing)}.")

    lr = cfg.lr_at(iteration)
    for name in list(store):
        param = store[name].data
        step = grads[name] + cfg.weight_decay * param
        if name in store.velocity:
            step = cfg.momentum * store.velocity[name] + step
        store.velocity[name] = step
        store.assign(name, param - lr * step)


def conv(store: ParamStore, name: str, x: Tensor, stride: int = 1) -> Tensor:
    """Convolution with the registered ``name.weight``/``name.bias`` pair,
    "same" padding."""
    weight = store[f"{name}.weight"]
    bias = store[f"{name}.bias"] if f"{name}.bias" in store else None
    return T.conv2d(x, weight, bias, stride=stride, pad=(weight.dims[2] - 1) // 2)


def register_conv(
    store: ParamStore,
    name: str,
    in_c: int,
    out_c: int,
    kernel: int = 3,
    bias: bool = True,
    scheme: InitScheme = InitScheme.kaiming_uniform,
) -> Tuple[Tensor, Optional[Tensor]]:
    weight = store.register(f"{name}.weight", (out_c, in_c, kernel, kernel), scheme)
    if not bias:
        return weight, None
    return weight, store.register(f"{name}.bias", (out_c,), InitScheme.zeros)


def linear(store: ParamStore, name: str, x: Tensor) -> Tensor:
    bias = store[f"{name}.bias"] if f"{name}.bias" in store else None
    return T.fc(x, store[f"{name}.weight"], bias)


def register_linear(
    store: ParamStore,
    name: str,
    in_features: int,
    out_features: int,
    bias: bool = True,
    bias_value: float = 0.0,
):
    store.register(f"{name}.weight", (out_features, in_features))
    if bias:
        store.register(f"{name}.bias", (out_features,), InitScheme.constant, bias_value)
