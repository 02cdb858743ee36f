import argparse
import json
import logging
import sys
from typing import List
from typing import Optional

from pyscarf import services
from pyscarf.checkpoint import load_checkpoint
from pyscarf.checkpoint import save_checkpoint
from pyscarf.constants import CombineMode
from pyscarf.constants import Difficulty
from pyscarf.constants import FusionKind
from pyscarf.constants import Stage
from pyscarf.data import generate_dataset
from pyscarf.data import load_dataset
from pyscarf.data import load_image
from pyscarf.data import write_dataset
from pyscarf.exceptions import ScarfError
from pyscarf.models.common import Config
from pyscarf.models.common import TrainConfig
from pyscarf.models.detector import export_detections

logger = logging.getLogger(__name__)


def _values(enum) -> List[str]:
    return [e.value for e in enum]


def parser() -> argparse.ArgumentParser:
    root = argparse.ArgumentParser(prog="pyscarf", description="Multiscale feature fusion lab")
    commands = root.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", help="render a synthetic scene dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--difficulty", choices=_values(Difficulty), default="easy")
    gen.add_argument("--size", type=int, default=64)

    train = commands.add_parser("train", help="train one detector")
    train.add_argument("--config")
    train.add_argument("--fusion", choices=_values(FusionKind))
    train.add_argument("--channels", type=int, help="ScNet channel dimension d")
    train.add_argument("--combine", choices=_values(CombineMode))
    train.add_argument("--attention", choices=("on", "off"))
    train.add_argument("--seed", type=int)
    train.add_argument("--iterations", type=int)
    train.add_argument("--log", help="metrics log destination")
    train.add_argument("--out", required=True)

    evaluate = commands.add_parser("eval", help="evaluate a checkpoint")
    evaluate.add_argument("--ckpt", required=True)
    evaluate.add_argument("--data", required=True)
    evaluate.add_argument("--out", required=True)
    evaluate.add_argument("--detections", help="also export detections as json lines")

    ablate = commands.add_parser("ablate", help="run the fusion ablation")
    ablate.add_argument("--config")
    ablate.add_argument("--seeds", type=int, default=5)
    ablate.add_argument("--grid", action="store_true", help="add the d x combine grid")
    ablate.add_argument("--out", required=True)

    viz = commands.add_parser("viz", help="write a feature heatmap")
    viz.add_argument("--ckpt", required=True)
    viz.add_argument("--image", required=True)
    viz.add_argument("--level", type=int, required=True)
    viz.add_argument("--stage", choices=_values(Stage), default="pyramid")
    viz.add_argument("--out", required=True)

    summary = commands.add_parser("summary", help="parameter overhead per fusion")
    summary.add_argument("--config")
    return root


def load_config(args: argparse.Namespace) -> TrainConfig:
    """The config file, if any, with the command line overrides applied."""
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    changes = {}
    if getattr(args, "fusion", None):
        changes["fusion"] = FusionKind(args.fusion)
    if getattr(args, "channels", None):
        changes["d"] = args.channels
    if getattr(args, "combine", None):
        changes["combine"] = CombineMode(args.combine)
    if getattr(args, "attention", None):
        changes["attention"] = args.attention == "on"
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "iterations", None):
        changes["iterations"] = args.iterations
    if getattr(args, "log", None):
        changes["log_path"] = args.log
    return cfg.replace(**changes) if changes else cfg


def _dump(path: str, data):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def run(args: argparse.Namespace):
    if args.command == "gen-data":
        samples = generate_dataset(args.count, args.seed, Difficulty(args.difficulty), args.size)
        write_dataset(args.out, samples)
    elif args.command == "train":
        result = services.train(load_config(args))
        save_checkpoint(result.checkpoint, args.out)
        logger.info("Saved checkpoint %s", args.out)
    elif args.command == "eval":
        ckpt = load_checkpoint(args.ckpt)
        samples = load_dataset(args.data)
        report = services.evaluate(ckpt, samples)
        _dump(args.out, report.to_dict())
        if args.detections:
            network, store = services.restore(ckpt)
            export_detections(
                args.detections,
                {str(i): network.detect(s.image, store) for i, s in enumerate(samples)},
            )
        logger.info("mAP %.4f", report.map)
    elif args.command == "ablate":
        table = services.ablate(load_config(args), args.seeds, args.grid)
        _dump(args.out, table.to_dict())
        print(table.to_text())
    elif args.command == "viz":
        services.visualize_heatmap(
            load_checkpoint(args.ckpt),
            load_image(args.image),
            args.level,
            Stage(args.stage),
            args.out,
        )
    elif args.command == "summary":
        for row in services.summary(load_config(args)):
            print(f"{row['fusion']:<20} {row['params']:>9} {row['overhead']:+.2%}")


def main(argv: Optional[List[str]] = None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(
        level=Config.instance().log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        run(args)
    except ScarfError as e:
        logger.error("%s", e)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
