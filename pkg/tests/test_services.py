import json
import os
import tempfile
import unittest

import numpy as np

from pyscarf import services
from pyscarf.checkpoint import save_checkpoint
from pyscarf.constants import CombineMode
from pyscarf.constants import Difficulty
from pyscarf.constants import FusionKind
from pyscarf.constants import Stage
from pyscarf.data import gen_scene
from pyscarf.data import SceneSample
from pyscarf.exceptions import ArgumentError
from pyscarf.exceptions import NumericalError
from pyscarf.metrics import eval_map
from pyscarf.models.common import SgdConfig
from pyscarf.models.common import TrainConfig
from pyscarf.models.network import ScarfDetector
from pyscarf.tensor import Tensor
from pyscarf.utils import read_pnm
from tests import ScarfTestCase
from tests import slow


def _read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


def tiny_config(**kwargs):
    defaults = dict(
        channels=(4, 4, 4),
        d=4,
        input_size=32,
        iterations=4,
        train_size=4,
        eval_size=2,
        eval_interval=2,
        sgd=SgdConfig(lr_schedule=((2, 1e-2), (4, 1e-3)), batch_size=2),
    )
    defaults.update(kwargs)
    return TrainConfig(**defaults)


class SplitTests(ScarfTestCase):
    def test_disjoint_seeds(self):
        cfg = tiny_config()
        train = services.train_split(cfg)
        evaluation = services.eval_split(cfg)
        self.assertEqual([1000, 1001, 1002, 1003], [s.seed for s in train])
        self.assertEqual([1004, 1005], [s.seed for s in evaluation])
        self.assertEqual((3, 32, 32), train[0].image.dims)


class TrainTests(ScarfTestCase):
    def test_log(self):
        result = services.train(tiny_config())
        self.assertEqual([0, 1, 2, 3], [r["iter"] for r in result.log])
        self.assertEqual([1e-2, 1e-2, 1e-3, 1e-3], [r["lr"] for r in result.log])
        self.assertEqual(
            [False, True, False, True], [r["map"] is not None for r in result.log]
        )
        for record in result.log:
            self.assertEqual({"iter", "lr", "map", "loss_cls", "loss_reg"}, set(record))
            self.assertTrue(np.isfinite(record["loss_cls"]))
        self.assertEqual(result.log[-1]["map"], result.final_map)
        self.assertEqual(4, result.checkpoint.iteration)

    def test_deterministic(self):
        cfg = tiny_config(fusion=FusionKind.scarf_full)
        with tempfile.TemporaryDirectory() as tmp:
            contents = []
            for run in ("first", "second"):
                result = services.train(cfg)
                log = os.path.join(tmp, f"{run}.jsonl")
                ckpt = os.path.join(tmp, f"{run}.ckpt")
                services.write_log(log, result.log)
                save_checkpoint(result.checkpoint, ckpt)
                contents.append([_read_bytes(log), _read_bytes(ckpt)])

        self.assertEqual(contents[0], contents[1])
        self.assertTrue(contents[0][0])
        self.assertTrue(contents[0][1].startswith(b"SCRF"))

    def test_parameters_move(self):
        cfg = tiny_config(eval_interval=0)
        result = services.train(cfg)
        initial = ScarfDetector(cfg).create_store()
        moved = [
            not np.array_equal(value.data.astype(np.float32), result.checkpoint.params[name])
            for name, value in initial.items()
        ]
        self.assertTrue(any(moved))
        self.assertIsNone(result.final_map)

    def test_log_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "metrics.jsonl")
            result = services.train(tiny_config(log_path=path))
            with open(path) as f:
                lines = [json.loads(line) for line in f]
        self.assertEqual(result.log, lines)

    def test_empty_dataset(self):
        with self.assertRaises(ArgumentError):
            services.train(tiny_config(), train_set=[])

    def test_non_finite_loss(self):
        broken = SceneSample(Tensor(np.full((3, 32, 32), np.nan)), gen_scene(0, size=32).gts)
        with self.assertRaises(NumericalError) as cm:
            services.train(tiny_config(eval_interval=0), train_set=[broken, broken])
        self.assertEqual(0, cm.exception.iteration)
        self.assertEqual(1e-2, cm.exception.lr)
        self.assertEqual({"loss_cls", "loss_reg"}, set(cm.exception.components))


class EvaluateTests(ScarfTestCase):
    def setUp(self):
        super().setUp()
        self.cfg = tiny_config(eval_interval=0)
        self.ckpt = services.train(self.cfg).checkpoint
        self.samples = services.eval_split(self.cfg)

    def test_matches_eval_map(self):
        report = services.evaluate(self.ckpt, self.samples)
        network, store = services.restore(self.ckpt)
        dets = [network.detect(s.image, store) for s in self.samples]
        expected = eval_map(dets, [s.gts for s in self.samples], classes=[1, 2, 3])
        self.assertEqual(expected.to_dict(), report.to_dict())
        self.assertEqual(2, report.images)

    def test_empty_dataset(self):
        with self.assertRaises(ArgumentError):
            services.evaluate(self.ckpt, [])

    @unittest.skipUnless(slow, "set PYSCARF_SLOW=1 to run the training experiments")
    def test_train_set_scores_higher(self):
        seen, held_out = [], []
        for seed in range(3):
            cfg = TrainConfig(
                fusion=FusionKind.plain,
                difficulty=Difficulty.easy,
                iterations=200,
                train_size=64,
                eval_size=64,
                eval_interval=0,
                seed=seed,
            )
            ckpt = services.train(cfg).checkpoint
            seen.append(services.evaluate(ckpt, services.train_split(cfg)).map)
            held_out.append(services.evaluate(ckpt, services.eval_split(cfg)).map)

        self.assertGreaterEqual(np.mean(seen), np.mean(held_out))


class AblateTests(ScarfTestCase):
    def test_table(self):
        base = tiny_config(d=16, iterations=2, eval_interval=0)
        table = services.ablate(base, seeds=1)

        self.assertEqual([0], table.seeds)
        self.assertEqual([kind.value for kind in FusionKind], [r.name for r in table.rows])
        for row in table.rows:
            self.assertEqual(1, len(row.scores))
            self.assertTrue(0.0 <= row.mean <= 1.0)
            self.assertEqual(0.0, row.std)
        self.assertEqual(1, table.row("plain").wins)

        text = table.to_text().splitlines()
        self.assertEqual(7, len(text))
        self.assertIn("mean +- std", text[0])
        data = table.to_dict()
        self.assertEqual({"seeds", "rows"}, set(data))
        self.assertEqual({"name", "scores", "mean", "std", "wins"}, set(data["rows"][0]))

    def test_grid(self):
        base = tiny_config(d=16, iterations=1, eval_interval=0)
        table = services.ablate(base, seeds=1, grid=True)
        self.assertEqual(12, len(table.rows))
        self.assertEqual(
            table.row("scarf_full").scores, table.row("scarf_full d=16 concat").scores
        )
        self.assertIn(f"scarf_full d=64 {CombineMode.add.value}", [r.name for r in table.rows])

    def test_seeds(self):
        with self.assertRaises(ArgumentError):
            services.ablate(tiny_config(), seeds=0)


class HeatmapTests(ScarfTestCase):
    def test_select_channel(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            feature = rng.uniform(0, 1, size=(6, 3, 3))
            means = [feature[c].mean() for c in range(6)]
            self.assertEqual(means.index(max(means)), services.select_channel(feature))
        self.assertEqual(0, services.select_channel(np.ones((3, 2, 2))))

    def test_constant(self):
        self.assertArrayEqual(np.full((2, 3), 128), services.heatmap_image(np.full((2, 3), 0.4)))

    def test_single_hot(self):
        plane = np.zeros((4, 4))
        plane[1, 2] = 3.0
        expected = np.zeros((4, 4))
        expected[1, 2] = 255
        self.assertArrayEqual(expected, services.heatmap_image(plane))

    def test_rescaling(self):
        feature = np.random.default_rng(1).uniform(0, 1, size=(4, 3, 3))
        feature[2] += 1.0
        channel = services.select_channel(feature)
        scaled = feature * np.array([0.5, 0.5, 2.0, 0.25])[:, None, None]
        self.assertEqual(channel, services.select_channel(scaled))
        self.assertArrayEqual(
            services.heatmap_image(feature[channel]),
            services.heatmap_image(scaled[services.select_channel(scaled)]),
        )

    def test_visualize(self):
        cfg = tiny_config(eval_interval=0)
        ckpt = services.train(cfg).checkpoint
        self.assertEqual(4, ckpt.iteration)
        image = gen_scene(2, Difficulty.hard, size=32).image
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "level0.pgm")
            heatmap = services.visualize_heatmap(ckpt, image, 0, Stage.pyramid, path)
            self.assertArrayEqual(heatmap, read_pnm(path))
        self.assertEqual((4, 4), heatmap.shape)
        self.assertEqual(np.uint8, heatmap.dtype)
        self.assertEqual((1, 1), services.visualize_heatmap(ckpt, image, 2, Stage.scarf).shape)

        with self.assertRaises(ArgumentError):
            services.visualize_heatmap(ckpt, image, 3, Stage.pyramid)

    def test_visualize_channel_oracle(self):
        cfg = tiny_config(eval_interval=0)
        ckpt = services.train(cfg).checkpoint
        image = gen_scene(5, Difficulty.hard, size=32).image
        network, store = services.restore(ckpt)
        pyramid, fused = network.features(image, store)

        for stage, source in ((Stage.pyramid, pyramid), (Stage.scarf, fused)):
            for level in range(cfg.k):
                with self.subTest(stage=stage.value, level=level):
                    feature = source[level].data
                    means = [feature[c].sum() / feature[c].size for c in range(len(feature))]
                    best = max(means)
                    channel = next(c for c, m in enumerate(means) if m == best)

                    self.assertEqual(channel, services.select_channel(feature))
                    self.assertArrayEqual(
                        services.heatmap_image(feature[channel]),
                        services.visualize_heatmap(ckpt, image, level, stage),
                    )


class SummaryTests(ScarfTestCase):
    def test_overhead(self):
        rows = services.summary(tiny_config())
        self.assertEqual([kind.value for kind in FusionKind], [r["fusion"] for r in rows])
        self.assertEqual(0.0, rows[0]["overhead"])
        params = {r["fusion"]: r["params"] for r in rows}
        self.assertGreater(params["scarf_full"], params["scarf_no_attention"])
        self.assertGreater(params["scarf_full"], params["unilstm"])
        self.assertGreater(params["scarf_no_attention"], params["plain"])


@unittest.skipUnless(slow, "set PYSCARF_SLOW=1 to run the training experiments")
class ExperimentTests(ScarfTestCase):
    def test_plain_loss_halves(self):
        for seed in range(3):
            with self.subTest(seed=seed):
                cfg = TrainConfig(
                    fusion=FusionKind.plain,
                    difficulty=Difficulty.easy,
                    iterations=200,
                    sgd=SgdConfig.desk(200),
                    train_size=64,
                    eval_interval=0,
                    seed=seed,
                )
                log = services.train(cfg).log
                first = log[0]["loss_cls"] + log[0]["loss_reg"]
                last = np.mean([r["loss_cls"] + r["loss_reg"] for r in log[-10:]])
                self.assertLess(last, 0.5 * first)

    def test_ablation_ordering(self):
        base = TrainConfig(difficulty=Difficulty.hard, eval_interval=0)
        table = services.ablate(base, seeds=5)
        full = table.row(FusionKind.scarf_full.value)
        no_attention = table.row(FusionKind.scarf_no_attention.value)
        plain = table.row(FusionKind.plain.value)

        self.assertEqual(2000, base.iterations)
        self.assertGreaterEqual(full.mean, no_attention.mean)
        self.assertGreaterEqual(no_attention.mean, plain.mean)
        self.assertGreater(full.mean - plain.mean, 0.0)
        self.assertGreaterEqual(full.wins, 3)
        self.assertEqual(5, plain.wins)
