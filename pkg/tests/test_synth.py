import numpy as np
import pytest

from wsimil.evaluation import auc
from wsimil.pooling import predict_max
from wsimil.synth import SynthSpec, generate_bags, generate_slide, grid_coords, render_bag
from wsimil.tiling import filter_background, tile_image


class TestBags:
    def test_signal_count_rounding(self):
        assert SynthSpec(K=50, signal_fraction=0.05).signal_count == 3
        assert SynthSpec(K=10, signal_fraction=0.01).signal_count == 1
        assert SynthSpec(K=50, signal_fraction=0.02).signal_count == 1
        assert SynthSpec(K=50, signal_fraction=0.2).signal_count == 10

    def test_full_signal(self):
        bags, masks = generate_bags(SynthSpec(n_bags=20, K=7, M=4, signal_fraction=1.0))
        for b, m in zip(bags, masks):
            assert m.all() if b.label else not m.any()

    def test_masks_consistent_with_labels(self):
        spec = SynthSpec(n_bags=200, K=50, M=8)
        bags, masks = generate_bags(spec)
        for b, m in zip(bags, masks):
            assert bool(m.any()) == bool(b.label)
            if b.label:
                assert m.sum() == 3
        rate = np.mean([b.label for b in bags])
        assert abs(rate - 0.77) < 0.08

    def test_deterministic(self):
        a, ma = generate_bags(SynthSpec(n_bags=5, K=6, M=3, seed=4))
        b, mb = generate_bags(SynthSpec(n_bags=5, K=6, M=3, seed=4))
        for x, y in zip(a, b):
            assert x.instances.tobytes() == y.instances.tobytes() and x.label == y.label
        for x, y in zip(ma, mb):
            np.testing.assert_array_equal(x, y)

    def test_bags_independent_of_count(self):
        a, _ = generate_bags(SynthSpec(n_bags=5, K=6, M=3, seed=4))
        b, _ = generate_bags(SynthSpec(n_bags=12, K=6, M=3, seed=4))
        for x, y in zip(a, b[:5]):
            np.testing.assert_array_equal(x.instances, y.instances)

    def test_float32_exact(self):
        bags, _ = generate_bags(SynthSpec(n_bags=3, K=4, M=5))
        for b in bags:
            np.testing.assert_array_equal(b.instances.astype(np.float32).astype(np.float64), b.instances)

    def test_signal_instances_shifted(self):
        spec = SynthSpec(n_bags=100, K=20, M=16, signal_fraction=0.1)
        from wsimil.synth import signal_direction
        u = signal_direction(spec)
        bags, masks = generate_bags(spec)
        sig = np.concatenate([b.instances[m] for b, m in zip(bags, masks) if m.any()])
        bg = np.concatenate([b.instances[~m] for b, m in zip(bags, masks)])
        assert abs((sig @ u).mean() - 2.0 * u @ u) < 0.2 * u @ u
        assert abs((bg @ u).mean()) < 0.1 * u @ u

    def test_zero_shift_is_null(self):
        spec = SynthSpec(n_bags=300, K=20, M=8, signal_shift=0.0, seed=3)
        bags, _ = generate_bags(spec)
        from wsimil.synth import signal_direction
        u = signal_direction(spec)
        scores = [predict_max(b, u)[0] for b in bags]
        assert abs(auc([b.label for b in bags], scores) - 0.5) < 0.1

    def test_invalid(self):
        with pytest.raises(ValueError):
            SynthSpec(signal_fraction=0.0)
        with pytest.raises(ValueError):
            SynthSpec(positive_rate=1.0)

    def test_grid_coords(self):
        c = grid_coords(50)
        assert c.shape == (50, 2) and c[:, 1].max() == 7 and c[-1].tolist() == [6, 1]
        assert len({tuple(x) for x in c}) == 50


class TestSlides:
    def test_blank_slide(self):
        s = generate_slide(64, 48, seed=1)
        assert s.label == 0
        assert s.pixels.shape == (48, 64, 3)
        assert abs(s.pixels.mean() - 230) < 2 and s.pixels.std() < 10

    def test_same_seed(self):
        a = generate_slide(40, 30, [(5, 5, 10, 10)], seed=2)
        b = generate_slide(40, 30, [(5, 5, 10, 10)], seed=2)
        np.testing.assert_array_equal(a.pixels, b.pixels)

    def test_lesion_patch_survives_filter(self):
        t = 16
        s = generate_slide(96, 64, [(2 * t, t, t, t)], seed=5)
        assert s.label == 1
        kept, _ = filter_background(tile_image(s, t), 0.95)
        cells = {(p.grid_row, p.grid_col) for p in kept}
        assert (1, 2) in cells
        assert len(cells) < 24

    def test_rect_out_of_bounds(self):
        with pytest.raises(ValueError, match="outside"):
            generate_slide(20, 20, [(15, 0, 10, 5)])


def test_render_bag():
    bags, _ = generate_bags(SynthSpec(n_bags=2, K=5, M=4))
    img = render_bag(bags[0])
    # 5 instances on a 3-column grid of 2x2 cells
    assert img.shape == (4, 6)
    assert np.all(img[2:4, 4:6] == 255)
    expected = np.clip(128 + 32 * bags[0].instances[0], 0, 255).reshape(2, 2)
    np.testing.assert_allclose(img[0:2, 0:2], expected)
