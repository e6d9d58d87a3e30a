import json

import numpy as np
import pytest
from PIL import Image

from wsimil.interpretation import (
    AttributionMap,
    attention_heatmap,
    explain_baseline,
    integrated_gradients,
    localization_score,
    reference_image,
)
from wsimil.models import BaselineCNN, BaselineConfig
from wsimil.pooling import Bag

TINY = BaselineConfig(input_size=32, channels=(2, 2, 2, 2, 2), in_channels=1)


def _grid_bag(rows, cols, skip=()):
    coords = [(r, c) for r in range(rows) for c in range(cols) if (r, c) not in skip]
    return Bag("g", np.zeros((len(coords), 2)), coords, 0)


class TestHeatmap:
    def test_uniform(self):
        bag = _grid_bag(3, 4)
        m = attention_heatmap(bag, np.full(12, 1 / 12))
        assert m.values.shape == (3, 4)
        np.testing.assert_allclose(m.values, 1 / 12)

    def test_one_hot(self):
        bag = _grid_bag(3, 4)
        a = np.zeros(12)
        a[5] = 1
        m = attention_heatmap(bag, a)
        assert np.argwhere(m.values == 1).tolist() == [[1, 1]]
        assert m.values.sum() == 1

    def test_background_cells_zero(self):
        bag = _grid_bag(2, 2, skip={(0, 1)})
        m = attention_heatmap(bag, [0.5, 0.25, 0.25], grid_shape=(3, 3))
        assert m.values[0, 1] == 0 and m.values.shape == (3, 3)

    def test_wrong_length(self):
        with pytest.raises(ValueError):
            attention_heatmap(_grid_bag(2, 2), [1.0])

    def test_save_json_and_png(self, tmp_path):
        m = attention_heatmap(_grid_bag(2, 3), [0.1, 0.2, 0.3, 0.1, 0.2, 0.1])
        m.save(tmp_path / "m.json")
        back = AttributionMap.from_dict(json.loads((tmp_path / "m.json").read_text()))
        np.testing.assert_array_equal(back.values, m.values)
        note = m.save_image(tmp_path / "m.png")
        img = np.asarray(Image.open(tmp_path / "m.png"))
        assert img.shape == (2, 3) and img.max() == 255 and img.min() == 0
        assert "min-max" in note

    def test_localization_score(self):
        mask = np.array([True, False, False, False])
        assert localization_score([1, 0, 0, 0], mask) == 4.0
        assert localization_score([0.25] * 4, mask) == 1.0


class TestIntegratedGradients:
    def test_linear_model_exact(self, rng):
        c = rng.normal(size=(3, 5))
        x, ref = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))

        def vg(batch):
            return np.einsum("nij,ij->n", batch, c), np.broadcast_to(c, batch.shape)

        for steps in (1, 7, 256):
            np.testing.assert_allclose(integrated_gradients(vg, x, ref, steps), c * (x - ref),
                                       rtol=1e-12, atol=1e-14)

    def test_quadratic_midpoint_is_exact(self, rng):
        # F = sum(x^2): gradient is linear along the path, so the midpoint rule is exact
        x, ref = rng.normal(size=6), rng.normal(size=6)
        attr = integrated_gradients(lambda b: ((b ** 2).sum(1), 2 * b), x, ref, steps=3)
        np.testing.assert_allclose(attr, x ** 2 - ref ** 2, atol=1e-12)

    def test_identical_input_zero(self, rng):
        model = BaselineCNN(TINY)
        params = model.init_params(rng)
        x = rng.uniform(0, 255, size=(1, 32, 32))
        attr = integrated_gradients(lambda b: model.input_gradient(params, b), x, x.copy(), 16)
        assert np.all(attr == 0)

    def test_completeness_smooth_model(self, rng):
        # tanh network: smooth along the path, so 256 midpoint steps meet 1e-3
        w1, w2 = rng.normal(size=(16, 10)), rng.normal(size=16)

        def vg(b):
            h = np.tanh(b @ w1.T)
            return h @ w2, ((1 - h ** 2) * w2) @ w1

        x, ref = rng.normal(size=10), np.zeros(10)
        gap = float(vg(x[None])[0][0] - vg(ref[None])[0][0])
        attr = integrated_gradients(vg, x, ref, 256)
        assert abs(attr.sum() - gap) <= 1e-3 * abs(gap) + 1e-6
        a512 = integrated_gradients(vg, x, ref, 512)
        assert abs(attr.sum() - a512.sum()) <= 1e-3 * abs(gap) + 1e-6

    def test_baseline_converges_with_steps(self, rng):
        # SELU and max pooling put gradient kinks on the path; the error still shrinks with steps
        model = BaselineCNN(TINY)
        params = model.init_params(rng)
        x = rng.uniform(0, 255, size=(1, 32, 32))
        m = explain_baseline(model, params, x, "s", steps=64, reference="black")
        ref = reference_image(x.shape, "black")
        gap = float(model.forward(params, x[None])[0] - model.forward(params, ref[None])[0])
        assert m.values.shape == (32, 32, 1)
        errors = [abs(explain_baseline(model, params, x, "s", steps=s, reference="black").values.sum()
                      - gap) for s in (64, 512, 4096)]
        assert errors[0] > errors[1] > errors[2]
        assert errors[2] <= 1e-3 * abs(gap) + 1e-6

    def test_batching_does_not_change_result(self, rng):
        model = BaselineCNN(TINY)
        params = model.init_params(rng)
        x = rng.uniform(0, 255, size=(1, 32, 32))
        ref = reference_image(x.shape)
        vg = lambda b: model.input_gradient(params, b)  # noqa: E731
        np.testing.assert_allclose(integrated_gradients(vg, x, ref, 20, batch=3),
                                   integrated_gradients(vg, x, ref, 20, batch=64), rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            integrated_gradients(lambda b: (b, b), np.zeros(3), np.zeros(4))

    def test_bad_reference(self):
        with pytest.raises(ValueError):
            reference_image((1, 2, 2), "grey")
