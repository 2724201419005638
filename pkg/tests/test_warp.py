import numpy as np
import pytest

from backend.services import autodiff as ad
from backend.services.autodiff import Tensor
from backend.services.star_geometry import build_star
from backend.services.warp import warp_backward, warp_forward, warp_tensor
from conftest import signed_weights


def x_ramp(height, width):
    return np.tile(np.arange(width, dtype=np.float64), (height, 1))


def test_constant_map_warps_to_constant():
    star = build_star((7.3, 8.9), 6.0, 12, 9)
    warped = warp_forward(np.full((20, 20), 2.5), star)
    np.testing.assert_array_equal(warped.g, np.full((12, 9), 2.5))


def test_axis_aligned_lines_read_the_ramp_exactly():
    star = build_star((20.0, 20.0), 8.0, 4, 8)
    g = warp_forward(x_ramp(41, 41), star).g
    m = np.arange(1, 9)
    np.testing.assert_array_equal(g[0], 20 + m)
    np.testing.assert_array_equal(g[1], np.full(8, 20.0))
    np.testing.assert_array_equal(g[2], 20 - m)


def test_points_past_the_border_clamp_to_the_edge():
    star = build_star((5.0, 5.0), 10.0, 4, 10)
    warped = warp_forward(x_ramp(10, 10), star)
    np.testing.assert_array_equal(warped.g[0], [6, 7, 8, 9, 9, 9, 9, 9, 9, 9])
    assert warped.source.min() >= 0
    assert warped.source[..., 0].max() <= 9 and warped.source[..., 1].max() <= 9


def test_warp_forward_rejects_empty_map():
    star = build_star((0.0, 0.0), 1.0, 4, 1)
    with pytest.raises(ValueError):
        warp_forward(np.zeros((0, 0)), star)


def test_backward_of_zero_is_zero():
    star = build_star((10.0, 10.0), 5.0, 6, 5)
    source = warp_forward(np.zeros((20, 20)), star).source
    np.testing.assert_array_equal(warp_backward(np.zeros((6, 5)), source, (20, 20)), np.zeros((20, 20)))


def test_backward_of_one_hot_marks_the_source_pixel():
    star = build_star((10.0, 10.0), 5.0, 6, 5)
    source = warp_forward(np.zeros((20, 20)), star).source
    grad = np.zeros((6, 5))
    grad[2, 3] = 1.0
    out = warp_backward(grad, source, (20, 20))
    x, y = source[2, 3]
    assert out[y, x] == 1.0
    assert out.sum() == 1.0


def test_backward_accumulates_shared_pixels():
    # every point of a tiny star rounds to the center pixel
    star = build_star((4.0, 4.0), 0.4, 4, 2)
    source = warp_forward(np.zeros((8, 8)), star).source
    out = warp_backward(np.ones((4, 2)), source, (8, 8))
    assert out[4, 4] == 8.0


def test_backward_rejects_shape_mismatch():
    star = build_star((10.0, 10.0), 5.0, 6, 5)
    source = warp_forward(np.zeros((20, 20)), star).source
    with pytest.raises(ValueError):
        warp_backward(np.zeros((5, 6)), source, (20, 20))
    with pytest.raises(ValueError):
        warp_backward(np.zeros((6, 5)), source, (5, 5))


def test_adjointness_is_exact(rng):
    for _ in range(100):
        height, width = rng.integers(8, 40, size=2)
        center = (rng.uniform(0, width), rng.uniform(0, height))
        num_lines, points = int(rng.integers(3, 20)), int(rng.integers(1, 12))
        star = build_star(center, rng.uniform(1.0, 30.0), num_lines, points, rng.uniform(0, 1))
        A = rng.integers(-50, 50, size=(height, width)).astype(np.float64)
        B = rng.integers(-50, 50, size=(num_lines, points)).astype(np.float64)
        warped = warp_forward(A, star)
        assert np.sum(warped.g * B) == np.sum(A * warp_backward(B, warped.source, A.shape))


def test_directional_derivative_matches_backward(rng):
    star = build_star((15.2, 14.7), 12.0, 16, 10, 0.3)
    A = rng.normal(size=(32, 32))
    D = rng.normal(size=(32, 32))
    B = rng.normal(size=(16, 10))
    eps = 1e-3
    source = warp_forward(A, star).source
    slope = (np.sum(warp_forward(A + eps * D, star).g * B) - np.sum(warp_forward(A - eps * D, star).g * B)) / (2 * eps)
    expected = np.sum(D * warp_backward(B, source, A.shape))
    assert slope == pytest.approx(expected, rel=1e-6)


def test_warp_tensor_gradient(rng):
    stars = [build_star((6.2, 5.9), 5.0, 4, 4), build_star((8.0, 7.0), 6.0, 4, 4, 0.2)]
    weights = Tensor(signed_weights(rng, (2, 1, 4, 4)))

    def loss(x):
        return ad.tensor_sum(ad.mul(warp_tensor(x, stars), weights))

    x = Tensor(rng.normal(size=(2, 1, 16, 16)))
    assert ad.grad_check(loss, x, h=1e-3) < 1e-6


def test_warp_tensor_needs_one_star_per_image():
    star = build_star((4.0, 4.0), 3.0, 4, 3)
    with pytest.raises(ValueError):
        warp_tensor(Tensor(np.zeros((2, 1, 8, 8))), [star])
