from typing import Sequence
from typing import Tuple

import numpy as np


def write_pnm(path: str, image: np.ndarray):
    """
    Write a binary PGM (P5) for [H, W] or PPM (P6) for [3, H, W] uint8 data.

    :param str path: Destination file
    :param image: Pixel values, uint8 or floats in [0, 1]
    """
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)

    if image.ndim == 2:
        magic, height, width, payload = b"P5", image.shape[0], image.shape[1], image
    elif image.ndim == 3 and image.shape[0] == 3:
        magic, height, width = b"P6", image.shape[1], image.shape[2]
        payload = np.transpose(image, (1, 2, 0))
    else:
        raise ValueError(f"Cannot write an image of shape {image.shape}.")

    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (width, height))
        f.write(np.ascontiguousarray(payload).tobytes())


def _tokens(raw: bytes, count: int) -> Tuple[list, int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while raw[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def read_pnm(path: str) -> np.ndarray:
    """
    Read a binary PGM/PPM file, [H, W] or [3, H, W] uint8.

    :param str path: Source file
    """
    with open(path, "rb") as f:
        raw = f.read()

    (magic, width, height, maxval), offset = _tokens(raw, 4)
    if magic not in (b"P5", b"P6") or int(maxval) != 255:
        raise ValueError(f"Unsupported image {path}, only 8 bit P5/P6 are read.")

    width, height = int(width), int(height)
    planes = 3 if magic == b"P6" else 1
    data = np.frombuffer(raw, dtype=np.uint8, count=width * height * planes, offset=offset)
    if magic == b"P5":
        return data.reshape(height, width)
    return np.transpose(data.reshape(height, width, 3), (2, 0, 1))


def mean_std(values: Sequence[float]) -> Tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    if not len(values):
        return 0.0, 0.0
    return float(values.mean()), float(values.std())
