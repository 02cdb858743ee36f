import json
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence

import numpy as np
from attr import attrib
from attr import dataclass

from pyscarf import tensor as T
from pyscarf.checkpoint import Checkpoint
from pyscarf.constants import CombineMode
from pyscarf.constants import FusionKind
from pyscarf.constants import Stage
from pyscarf.data import generate_dataset
from pyscarf.data import load_dataset
from pyscarf.data import SceneSample
from pyscarf.exceptions import ArgumentError
from pyscarf.exceptions import NumericalError
from pyscarf.metrics import APReport
from pyscarf.metrics import eval_map
from pyscarf.models.common import BaseModel
from pyscarf.models.common import Config
from pyscarf.models.common import TrainConfig
from pyscarf.models.detector import detection_loss
from pyscarf.models.detector import match_anchors
from pyscarf.models.network import ScarfDetector
from pyscarf.nn import param_count
from pyscarf.nn import ParamStore
from pyscarf.nn import sgd_step
from pyscarf.tensor import Tape
from pyscarf.tensor import Tensor
from pyscarf.utils import mean_std
from pyscarf.utils import write_pnm

logger = logging.getLogger(__name__)

GRID_CHANNELS = (16, 32, 64)


def train_split(cfg: TrainConfig) -> List[SceneSample]:
    if cfg.train_dir:
        return load_dataset(cfg.train_dir)
    return generate_dataset(cfg.train_size, cfg.data_seed, cfg.difficulty, cfg.input_size)


def eval_split(cfg: TrainConfig) -> List[SceneSample]:
    if cfg.eval_dir:
        return load_dataset(cfg.eval_dir)
    seed = cfg.data_seed + cfg.train_size
    return generate_dataset(cfg.eval_size, seed, cfg.difficulty, cfg.input_size)


@dataclass
class TrainResult:
    """
    :param checkpoint: Final parameters, config and iteration counter
    :param log: One record per iteration: iter, lr, loss_cls, loss_reg, map
    """

    checkpoint: Checkpoint
    log: List[Dict] = attrib(factory=list)

    @property
    def final_map(self) -> Optional[float]:
        scores = [r["map"] for r in self.log if r["map"] is not None]
        return scores[-1] if scores else None


def _map(function, items: Sequence):
    workers = Config.instance().workers
    if workers <= 1:
        return [function(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(function, items))


def evaluate_network(
    network: ScarfDetector, store: ParamStore, samples: Sequence[SceneSample]
) -> APReport:
    if not samples:
        raise ArgumentError("Cannot evaluate an empty dataset.")

    detections = _map(lambda s: network.detect(s.image, store), samples)
    classes = list(range(1, network.cfg.num_classes + 1))
    return eval_map(detections, [s.gts for s in samples], classes=classes)


def train(
    cfg: TrainConfig,
    train_set: Optional[List[SceneSample]] = None,
    eval_set: Optional[List[SceneSample]] = None,
) -> TrainResult:
    """
    Train a detector end to end, deterministic given the config.

    :param cfg: Experiment settings
    :param train_set: Scenes to train on, default per config
    :param eval_set: Scenes for the periodic mAP, default per config
    :raise: :class:`~pyscarf.exceptions.NumericalError` on a non finite loss
    """
    train_set = train_split(cfg) if train_set is None else train_set
    if not train_set:
        raise ArgumentError("Cannot train on an empty dataset.")
    if cfg.eval_interval and eval_set is None:
        eval_set = eval_split(cfg)

    network = ScarfDetector(cfg)
    store = network.create_store()
    matches = [match_anchors(network.anchors, s.gts) for s in train_set]
    rng = np.random.default_rng(cfg.seed)
    batch_size = min(cfg.sgd.batch_size, len(train_set))
    report_every = max(1, cfg.iterations // 20)
    logger.info(
        "Training %s, %d parameters, %d iterations",
        cfg.fusion.value,
        param_count(store),
        cfg.iterations,
    )

    log = []
    for iteration in range(cfg.iterations):
        lr = cfg.sgd.lr_at(iteration)
        if iteration and lr != cfg.sgd.lr_at(iteration - 1):
            logger.info("Learning rate %g from iteration %d", lr, iteration)

        batch = rng.choice(len(train_set), size=batch_size, replace=False)
        with Tape():
            cls_terms, reg_terms = [], []
            for index in batch:
                output = network.forward(train_set[index].image, store)
                terms = detection_loss(output.cls_rows, output.reg_rows, matches[index])
                cls_terms.append(terms.cls)
                reg_terms.append(terms.reg)

            loss_cls = T.scale(_total(cls_terms), 1.0 / batch_size)
            loss_reg = T.scale(_total(reg_terms), 1.0 / batch_size)
            loss = T.add(loss_cls, loss_reg)
            components = {"loss_cls": loss_cls.item(), "loss_reg": loss_reg.item()}
            if not np.isfinite(loss.item()):
                raise NumericalError("Non finite training loss", iteration, lr, components)
            grads = T.backward(loss)

        sgd_step(store, store.gradients(grads), cfg.sgd, iteration)
        record = {"iter": iteration, "lr": lr, "map": None, **components}
        if cfg.eval_interval and (iteration + 1) % cfg.eval_interval == 0:
            record["map"] = evaluate_network(network, store, eval_set).map
        if (iteration + 1) % report_every == 0 or record["map"] is not None:
            logger.info(
                "iter %d lr %g cls %.4f reg %.4f map %s",
                iteration,
                lr,
                components["loss_cls"],
                components["loss_reg"],
                record["map"],
            )
        log.append(record)

    if cfg.log_path:
        write_log(cfg.log_path, log)
    return TrainResult(Checkpoint.from_store(store, cfg, cfg.iterations), log)


def _total(terms: List[Tensor]) -> Tensor:
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    return total


def write_log(path: str, log: List[Dict]):
    with open(path, "w", encoding="utf-8") as f:
        for record in log:
            f.write(json.dumps(record, sort_keys=True))
            f.write("\n")


def restore(ckpt: Checkpoint):
    """
    Rebuild the network of a checkpoint.

    :raise: :class:`~pyscarf.exceptions.ConsistencyError` when the parameters
        do not fit the checkpoint's config
    """
    network = ScarfDetector(ckpt.config)
    store = network.create_store()
    store.load(ckpt.params)
    return network, store


def evaluate(ckpt: Checkpoint, samples: Sequence[SceneSample]) -> APReport:
    network, store = restore(ckpt)
    return evaluate_network(network, store, samples)


@dataclass
class AblationRow(BaseModel):
    """
    :param name: Row label
    :param scores: Final mAP per seed
    :param wins: Seeds where this row scored at least the plain pyramid
    """

    name: str
    scores: List[float] = attrib(factory=list)
    wins: Optional[int] = None

    @property
    def mean(self) -> float:
        return mean_std(self.scores)[0]

    @property
    def std(self) -> float:
        return mean_std(self.scores)[1]

    def to_dict(self) -> Dict:
        return {
            "name": self.name,
            "scores": list(self.scores),
            "mean": self.mean,
            "std": self.std,
            "wins": self.wins,
        }


@dataclass
class AblationTable:
    seeds: List[int]
    rows: List[AblationRow] = attrib(factory=list)

    def row(self, name: str) -> AblationRow:
        return next(r for r in self.rows if r.name == name)

    def to_dict(self) -> Dict:
        return {"seeds": list(self.seeds), "rows": [r.to_dict() for r in self.rows]}

    def to_text(self) -> str:
        width = max(len(r.name) for r in self.rows) if self.rows else 4
        header = [f"{'fusion':<{width}}"] + [f"seed {s:>4}" for s in self.seeds]
        lines = [" | ".join(header + ["mean +- std", "wins"])]
        for r in self.rows:
            cells = [f"{r.name:<{width}}"] + [f"{v:9.4f}" for v in r.scores]
            wins = "-" if r.wins is None else f"{r.wins}/{len(r.scores)}"
            lines.append(" | ".join(cells + [f"{r.mean:.4f} +- {r.std:.4f}", wins]))
        return "\n".join(lines)


def _final_map(cfg: TrainConfig, train_set, eval_set) -> float:
    result = train(cfg.replace(eval_interval=0, log_path=None), train_set, eval_set)
    network, store = restore(result.checkpoint)
    return evaluate_network(network, store, eval_set).map


def ablate(base: TrainConfig, seeds: int, grid: bool = False) -> AblationTable:
    """
    Train every fusion kind for every seed on identical data and tabulate the
    final mAP. With grid, also sweep the full model over d and combine mode.

    :param base: Config shared by every cell
    :param seeds: Number of seeds, base.seed onwards
    """
    if seeds < 1:
        raise ArgumentError("At least one seed is required.")

    train_set, eval_set = train_split(base), eval_split(base)
    seed_values = [base.seed + s for s in range(seeds)]
    cells = [(kind.value, base.replace(fusion=kind)) for kind in FusionKind]
    if grid:
        cells += [
            (
                f"{FusionKind.scarf_full.value} d={d} {mode.value}",
                base.replace(fusion=FusionKind.scarf_full, d=d, d_out=None, combine=mode),
            )
            for d in GRID_CHANNELS
            for mode in CombineMode
        ]

    table = AblationTable(seed_values)
    for name, cfg in cells:
        row = AblationRow(name)
        for seed in seed_values:
            row.scores.append(_final_map(cfg.replace(seed=seed), train_set, eval_set))
            logger.info("%s seed %d map %.4f", name, seed, row.scores[-1])
        table.rows.append(row)

    plain = table.row(FusionKind.plain.value).scores
    for row in table.rows:
        row.wins = sum(a >= b for a, b in zip(row.scores, plain))
    return table


def select_channel(feature: np.ndarray) -> int:
    """Channel with the highest spatial mean, the lowest index on ties."""
    return int(np.argmax(feature.reshape(feature.shape[0], -1).mean(axis=1)))


def heatmap_image(plane: np.ndarray) -> np.ndarray:
    """Min-max normalise a [H, W] plane to uint8, constant planes map to 128."""
    plane = np.asarray(plane, dtype=np.float64)
    low, high = plane.min(), plane.max()
    if high <= low:
        return np.full(plane.shape, 128, dtype=np.uint8)
    return np.floor((plane - low) / (high - low) * 255.0 + 0.5).astype(np.uint8)


def visualize_heatmap(
    ckpt: Checkpoint, image: Tensor, level: int, stage: Stage, path: Optional[str] = None
) -> np.ndarray:
    """
    Heatmap of the most active channel of a pyramid level, before (pyramid)
    or after (scarf) fusion, at the level's native resolution.

    :param path: Write the heatmap as a binary PGM when given
    :raise: :class:`~pyscarf.exceptions.ArgumentError` for invalid levels
    """
    network, store = restore(ckpt)
    if not 0 <= level < network.cfg.k:
        raise ArgumentError(f"Level {level} outside [0, {network.cfg.k}).")

    pyramid, fused = network.features(image, store)
    source = pyramid if Stage(stage) == Stage.pyramid else fused
    feature = source[level].data
    heatmap = heatmap_image(feature[select_channel(feature)])
    if path:
        write_pnm(path, heatmap)
    return heatmap


def summary(cfg: TrainConfig) -> List[Dict]:
    """Parameter count of every fusion kind and its overhead over the plain
    pyramid."""
    counts = []
    for kind in FusionKind:
        network = ScarfDetector(cfg.replace(fusion=kind))
        counts.append((kind, param_count(network.create_store())))

    base = counts[0][1]
    return [
        {"fusion": kind.value, "params": count, "overhead": (count - base) / base}
        for kind, count in counts
    ]
