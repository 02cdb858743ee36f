"""
Procedural shape scenes, the desk scale stand-in for a detection dataset.
"""
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import List
from typing import Tuple

import numpy as np
from attr import attrib
from attr import dataclass

from pyscarf.constants import Difficulty
from pyscarf.constants import Shape
from pyscarf.exceptions import ArgumentError
from pyscarf.models.common import Config
from pyscarf.models.detector import GroundTruth
from pyscarf.models.detector import iou_matrix
from pyscarf.tensor import Tensor
from pyscarf.utils import read_pnm
from pyscarf.utils import write_pnm

logger = logging.getLogger(__name__)

SUPERSAMPLE = 4
NOISE_SIGMA = 0.05
SMALL_SIZES = (6, 12)
LARGE_SIZES = (16, 32)
PLACEMENT_TRIES = 20


@dataclass
class SceneSample:
    """
    :param image: [3, H, W] values in [0, 1]
    :param gts: Objects of the scene
    :param seed: Generation seed
    :param difficulty: Generation difficulty
    """

    image: Tensor
    gts: List[GroundTruth]
    seed: int = 0
    difficulty: Difficulty = attrib(default=Difficulty.easy, converter=Difficulty)

    def to_dict(self):
        return {
            "seed": self.seed,
            "difficulty": self.difficulty.value,
            "objects": [g.to_dict() for g in self.gts],
        }


def _sizes(rng: np.random.Generator, difficulty: Difficulty) -> List[int]:
    if difficulty == Difficulty.easy:
        return [int(rng.integers(LARGE_SIZES[0], LARGE_SIZES[1] + 1)) for _ in range(rng.integers(1, 3))]

    sizes = [int(rng.integers(SMALL_SIZES[0], SMALL_SIZES[1] + 1))]
    for _ in range(int(rng.integers(1, 4))):
        low, high = SMALL_SIZES if rng.random() < 0.5 else LARGE_SIZES
        sizes.append(int(rng.integers(low, high + 1)))
    return sizes


def shape_mask(shape: Shape, box: Tuple[float, float, float, float], height: int, width: int) -> np.ndarray:
    """Fractional pixel coverage of a filled shape, box filtered from a
    SUPERSAMPLE times finer grid."""
    ys = (np.arange(height * SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    xs = (np.arange(width * SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    py, px = np.meshgrid(ys, xs, indexing="ij")
    x1, y1, x2, y2 = box
    cx, cy, half = (x1 + x2) / 2, (y1 + y2) / 2, (x2 - x1) / 2

    if shape == Shape.square:
        inside = (px >= x1) & (px < x2) & (py >= y1) & (py < y2)
    elif shape == Shape.circle:
        inside = (px - cx) ** 2 + (py - cy) ** 2 <= half ** 2
    else:
        depth = (py - y1) / (y2 - y1)
        inside = (py >= y1) & (py < y2) & (np.abs(px - cx) <= depth * half)

    fine = inside.astype(np.float64).reshape(height, SUPERSAMPLE, width, SUPERSAMPLE)
    return fine.mean(axis=(1, 3))


def gen_scene(seed: int, difficulty: Difficulty = Difficulty.easy, size: int = 64) -> SceneSample:
    """
    Render one scene, deterministic per seed.

    Easy scenes hold 1-2 objects of 16-32 px, hard scenes 2-4 objects, one
    of them always small (6-12 px).

    :param seed: Generation seed
    :param difficulty: Scene difficulty
    :param size: Square image side
    """
    difficulty = Difficulty(difficulty)
    rng = np.random.default_rng(seed)
    background = rng.uniform(0.0, 0.3, size=3)
    image = background[:, None, None] + rng.normal(0.0, NOISE_SIGMA, size=(3, size, size))
    image = np.clip(image, 0.0, 1.0)

    gts: List[GroundTruth] = []
    for side in _sizes(rng, difficulty):
        shape = Shape(int(rng.integers(1, len(Shape) + 1)))
        box = None
        for _ in range(PLACEMENT_TRIES):
            x1, y1 = rng.uniform(0, size - side, size=2)
            box = (float(x1), float(y1), float(x1 + side), float(y1 + side))
            if not gts or iou_matrix([box], [g.box for g in gts]).max() < 0.1:
                break

        color = rng.uniform(0.5, 1.0, size=3)
        alpha = shape_mask(shape, box, size, size)
        image = image * (1.0 - alpha) + color[:, None, None] * alpha
        gts.append(GroundTruth(shape.value, box))

    return SceneSample(Tensor(image), gts, seed, difficulty)


def generate_dataset(
    count: int, seed: int = 0, difficulty: Difficulty = Difficulty.easy, size: int = 64
) -> List[SceneSample]:
    """Scenes with seeds seed, seed + 1, ..., rendered on Config.workers
    threads."""
    seeds = range(seed, seed + count)
    workers = Config.instance().workers
    if workers <= 1:
        return [gen_scene(s, difficulty, size) for s in seeds]

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: gen_scene(s, difficulty, size), seeds))


def write_dataset(path: str, samples: List[SceneSample]):
    """Write one PPM image and one json sidecar per scene."""
    os.makedirs(path, exist_ok=True)
    for index, sample in enumerate(samples):
        stem = os.path.join(path, f"scene_{index:05d}")
        write_pnm(f"{stem}.ppm", sample.image.data)
        with open(f"{stem}.json", "w", encoding="utf-8") as f:
            json.dump(sample.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
    logger.info("Wrote %d scenes to %s", len(samples), path)


def load_image(path: str) -> Tensor:
    data = read_pnm(path)
    if data.ndim == 2:
        data = np.broadcast_to(data, (3,) + data.shape)
    return Tensor(data.astype(np.float64) / 255.0)


def load_dataset(path: str) -> List[SceneSample]:
    """
    Read the scenes written by :func:`write_dataset`.

    :raise: :class:`~pyscarf.exceptions.ArgumentError` for missing folders
    """
    if not os.path.isdir(path):
        raise ArgumentError(f"Dataset folder {path} does not exist.")

    samples = []
    for name in sorted(os.listdir(path)):
        if not name.endswith(".json"):
            continue
        stem = os.path.join(path, name[: -len(".json")])
        with open(f"{stem}.json", encoding="utf-8") as f:
            meta = json.load(f)
        samples.append(
            SceneSample(
                load_image(f"{stem}.ppm"),
                [GroundTruth.from_dict(o) for o in meta["objects"]],
                meta.get("seed", 0),
                meta.get("difficulty", Difficulty.easy.value),
            )
        )
    logger.info("Loaded %d scenes from %s", len(samples), path)
    return samples
