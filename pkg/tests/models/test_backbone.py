import numpy as np

from pyscarf import nn
from pyscarf import tensor as T
from pyscarf.exceptions import ArgumentError
from pyscarf.exceptions import ShapeError
from pyscarf.models.backbone import Backbone
from pyscarf.models.backbone import backbone_forward
from pyscarf.models.backbone import PyramidFeatures
from pyscarf.models.backbone import PyramidSpec
from pyscarf.models.backbone import receptive_fields
from pyscarf.tensor import Tensor
from tests import ScarfTestCase


class PyramidSpecTests(ScarfTestCase):
    def test_defaults(self):
        spec = PyramidSpec()
        self.assertEqual((8, 16, 32), spec.strides)
        self.assertEqual([(8, 8), (4, 4), (2, 2)], spec.sizes)
        self.assertEqual((16, 16, 32, 64, 128), spec.stage_channels)
        self.assertEqual(32, spec.max_stride)

    def test_validation(self):
        with self.assertRaises(ArgumentError):
            PyramidSpec(k=1, channels=(8,))
        with self.assertRaises(ArgumentError):
            PyramidSpec(k=6, n=5, channels=(8,) * 6)
        with self.assertRaises(ArgumentError):
            PyramidSpec(channels=(8, 16))

    def test_receptive_fields(self):
        self.assertEqual([43, 91, 187], receptive_fields(PyramidSpec()))


class PyramidFeaturesTests(ScarfTestCase):
    def test_shrinking(self):
        levels = [Tensor.zeros((2, 4, 4)), Tensor.zeros((3, 2, 2))]
        features = PyramidFeatures(levels, [8, 16])
        self.assertEqual((2, 3), features.channels)
        self.assertEqual([(4, 4), (2, 2)], features.sizes)
        self.assertEqual(2, len(features))

        with self.assertRaises(ShapeError):
            PyramidFeatures([Tensor.zeros((2, 4, 4)), Tensor.zeros((2, 4, 4))], [8, 16])
        with self.assertRaises(ArgumentError):
            PyramidFeatures(levels, [8])


class BackboneTests(ScarfTestCase):
    def setUp(self):
        super().setUp()
        self.spec = PyramidSpec(channels=(8, 12, 16), stem_channels=4)
        self.backbone = Backbone(self.spec)
        self.store = nn.ParamStore(1)
        self.backbone.register(self.store)

    def test_register(self):
        self.assertEqual(20, len(self.store))
        self.assertEqual((4, 3, 3, 3), self.store["backbone.stage1.down.weight"].dims)
        self.assertEqual((16, 16, 3, 3), self.store["backbone.stage5.conv.weight"].dims)

    def test_shapes(self):
        image = Tensor(np.random.default_rng(0).uniform(0, 1, size=(3, 64, 64)))
        features = self.backbone.forward(image, self.store)
        self.assertEqual([(8, 8, 8), (12, 4, 4), (16, 2, 2)], [x.dims for x in features])
        self.assertEqual((8, 16, 32), features.strides)
        for x in features:
            self.assertGreaterEqual(x.data.min(), 0.0)

    def test_default_channels(self):
        store = nn.ParamStore()
        Backbone(PyramidSpec()).register(store)
        features = backbone_forward(Tensor.zeros((3, 64, 64)), PyramidSpec(), store)
        self.assertEqual([(32, 8, 8), (64, 4, 4), (128, 2, 2)], [x.dims for x in features])

    def test_zero_image(self):
        features = self.backbone.forward(Tensor.zeros((3, 64, 64)), self.store)
        for x in features:
            self.assertArrayEqual(np.zeros(x.dims), x.data)

    def test_indivisible(self):
        with self.assertRaises(ShapeError):
            self.backbone.forward(Tensor.zeros((3, 60, 64)), self.store)

    def test_gradient_reaches_first_stage(self):
        image = Tensor(np.random.default_rng(2).uniform(0, 1, size=(3, 32, 32)))
        spec = PyramidSpec(channels=(4, 4, 4), stem_channels=4, input_size=(32, 32))
        store = nn.ParamStore(3)
        Backbone(spec).register(store)
        with T.Tape():
            features = backbone_forward(image, spec, store)
            grads = T.backward(T.reduce_sum(features[0]))
        self.assertGreater(np.abs(grads[store["backbone.stage1.down.weight"]]).sum(), 0.0)
