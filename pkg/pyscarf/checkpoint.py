"""
Binary checkpoints of named float32 tensors plus the training config.

Layout, little endian: b"SCRF", u32 version, u32 tensor count, then per
tensor u16 name length, utf-8 name, u8 rank, u32 dims, float32 values, and
finally a u32 length prefixed utf-8 json blob {"config": ..., "iteration": ...}.
"""
import json
import logging
import struct
from collections import OrderedDict
from typing import Dict

import numpy as np
from attr import attrib
from attr import dataclass

from pyscarf.exceptions import CheckpointMagicError
from pyscarf.exceptions import CheckpointTruncatedError
from pyscarf.exceptions import CheckpointVersionError
from pyscarf.models.common import TrainConfig
from pyscarf.nn import ParamStore

logger = logging.getLogger(__name__)

MAGIC = b"SCRF"
VERSION = 1


@dataclass
class Checkpoint:
    """
    :param params: Parameter arrays by name, in registration order
    :param config: The config the parameters were trained with
    :param iteration: Completed training iterations
    """

    params: Dict[str, np.ndarray] = attrib(factory=OrderedDict)
    config: TrainConfig = attrib(factory=TrainConfig)
    iteration: int = 0

    @classmethod
    def from_store(cls, store: ParamStore, config: TrainConfig, iteration: int) -> "Checkpoint":
        params = OrderedDict(
            (name, t.data.astype(np.float32)) for name, t in store.items()
        )
        return cls(params, config, iteration)


def save_checkpoint(ckpt: Checkpoint, path: str):
    chunks = [MAGIC, struct.pack("<II", VERSION, len(ckpt.params))]
    for name, value in ckpt.params.items():
        encoded = name.encode("utf-8")
        value = np.asarray(value, dtype="<f4")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<B{value.ndim}I", value.ndim, *value.shape))
        chunks.append(value.tobytes())

    meta = json.dumps(
        {"config": ckpt.config.to_dict(), "iteration": ckpt.iteration}, sort_keys=True
    ).encode("utf-8")
    chunks.append(struct.pack("<I", len(meta)) + meta)

    with open(path, "wb") as f:
        f.write(b"".join(chunks))
    logger.debug("Saved %d tensors to %s", len(ckpt.params), path)


class _Reader:
    def __init__(self, raw: bytes, path: str):
        self.raw = raw
        self.path = path
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.raw):
            raise CheckpointTruncatedError(
                f"Checkpoint {self.path} ends at byte {len(self.raw)}, "
                f"expected {self.pos + count}.",
                self.path,
            )
        chunk = self.raw[self.pos : self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str) -> Checkpoint:
    """
    :raise: :class:`~pyscarf.exceptions.CheckpointMagicError`,
        :class:`~pyscarf.exceptions.CheckpointVersionError`,
        :class:`~pyscarf.exceptions.CheckpointTruncatedError`
    """
    with open(path, "rb") as f:
        reader = _Reader(f.read(), path)

    magic = reader.take(len(MAGIC)) if len(reader.raw) >= len(MAGIC) else reader.raw
    if magic != MAGIC:
        raise CheckpointMagicError(f"{path} is not a pyscarf checkpoint.", path)

    version, count = reader.unpack("<II")
    if version != VERSION:
        raise CheckpointVersionError(
            f"Checkpoint version {version} is not supported, expected {VERSION}.", path
        )

    params = OrderedDict()
    for _ in range(count):
        (length,) = reader.unpack("<H")
        name = reader.take(length).decode("utf-8")
        (rank,) = reader.unpack("<B")
        dims = reader.unpack(f"<{rank}I")
        size = int(np.prod(dims)) if rank else 1
        params[name] = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(dims).copy()

    (length,) = reader.unpack("<I")
    meta = json.loads(reader.take(length).decode("utf-8"))
    return Checkpoint(params, TrainConfig.from_dict(meta["config"]), int(meta["iteration"]))
