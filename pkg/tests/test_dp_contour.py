import math

import numpy as np
import pytest

from backend.services.dp_contour import (
    _dp_tables,
    _radial_derivative,
    brute_force_solve,
    build_energy,
    contour_cost,
    dp_solve,
    dp_solve_batch,
    dp_tables,
    orient_map,
    smooth_batch,
    smooth_indices,
)
from shared.exceptions import NumericalError
from shared.models import ContourIndices, EdgePolarity


def ring_map(num_lines, num_points, edge, inside=1.0, outside=0.0):
    """Every line reads `inside` up to point `edge` and `outside` after it."""
    g = np.full((num_lines, num_points), outside)
    g[:, :edge] = inside
    return g


@pytest.mark.parametrize(
    "shape, delta",
    [((2, 5), 1), ((4, 1), 1), ((4, 5), 0), ((4, 5), 5), ((4, 5), 7)],
)
def test_dp_rejects_bad_problems(shape, delta):
    with pytest.raises(ValueError):
        dp_solve(np.zeros(shape), delta)


def test_dp_rejects_wrong_rank():
    with pytest.raises(ValueError):
        dp_solve(np.zeros(10), 1)
    with pytest.raises(ValueError):
        dp_solve_batch(np.zeros((4, 5)), 1)


def test_zero_map_picks_innermost_points():
    v, cost = dp_solve(np.zeros((6, 5)), 2)
    np.testing.assert_array_equal(v.v, np.ones(6))
    assert cost == 0.0


def test_energy_shape_and_band():
    table = build_energy(np.zeros((5, 4)), 1)
    assert table.E.shape == (5, 4, 4)
    assert math.isinf(table.E[0, 0, 2])
    assert table.E[0, 1, 2] == 0.0


def test_energy_of_a_worked_example():
    g = np.array([[0.0, 1.0, 0.0], [0.0, 2.0, 0.0], [0.0, 3.0, 0.0]])
    # 1-based E[1][2][2] = (1 - 0) + (2 - 0)
    assert build_energy(g, 1).E[0, 1, 1] == 3.0


def test_energy_of_a_linear_ramp():
    g = np.tile(np.arange(1.0, 6.0), (4, 1))
    E = build_energy(g, 4).E
    np.testing.assert_array_equal(E[:, 1:, 1:], 2.0)
    np.testing.assert_array_equal(E[:, 0, 1:], 1.0)
    np.testing.assert_array_equal(E[:, 1:, 0], 1.0)
    np.testing.assert_array_equal(E[:, 0, 0], 0.0)


def test_ring_edge_is_found_on_every_line():
    g = ring_map(8, 10, edge=5)
    v, cost = dp_solve(g, 2)
    # the first sample past the bright-to-dark falloff
    np.testing.assert_array_equal(v.v, np.full(8, 6))
    assert cost == pytest.approx(-16.0)


def test_negated_polarity_finds_dark_to_bright_edge():
    dark_inside = ring_map(8, 10, edge=4, inside=0.0, outside=1.0)
    as_printed, _ = dp_solve(orient_map(dark_inside, EdgePolarity.AS_PRINTED), 2)
    negated, _ = dp_solve(orient_map(dark_inside, EdgePolarity.NEGATED), 2)
    np.testing.assert_array_equal(negated.v, np.full(8, 5))
    assert not np.array_equal(as_printed.v, negated.v)


def test_orient_map_accepts_plain_strings():
    g = np.arange(4.0)
    np.testing.assert_array_equal(orient_map(g, "negated"), -g)
    np.testing.assert_array_equal(orient_map(g, "as-printed"), g)


def test_dp_matches_exhaustive_search(rng):
    for _ in range(500):
        num_lines = int(rng.integers(3, 7))
        num_points = int(rng.integers(2, 9))
        delta = int(rng.integers(1, min(2, num_points - 1) + 1))
        g = rng.uniform(-1.0, 1.0, size=(num_lines, num_points))

        v, cost = dp_solve(g, delta)
        oracle, best = brute_force_solve(g, delta)
        assert cost == best
        np.testing.assert_array_equal(v.v, oracle.v)
        assert contour_cost(g, v, delta) == cost
        assert v.max_gap() <= delta


def test_dp_seeded_instance_matches_exhaustive_search():
    g = np.random.default_rng(7).uniform(-1.0, 1.0, size=(4, 3))
    v, cost = dp_solve(g, 1)
    oracle, best = brute_force_solve(g, 1)
    np.testing.assert_array_equal(v.v, oracle.v)
    assert cost == best


def test_adding_a_constant_changes_nothing(rng):
    g = rng.uniform(-1.0, 1.0, size=(6, 7))
    shifted = g + 3.0
    np.testing.assert_allclose(build_energy(shifted, 2).E, build_energy(g, 2).E, atol=1e-12)
    np.testing.assert_array_equal(dp_solve(shifted, 2)[0].v, dp_solve(g, 2)[0].v)


@pytest.mark.parametrize("scale, offset", [(0.5, 0.0), (3.0, -1.0), (10.0, 2.5)])
def test_order_preserving_relabel_keeps_the_contour(rng, scale, offset):
    for _ in range(50):
        g = rng.uniform(-1.0, 1.0, size=(5, 6))
        oracle, _ = brute_force_solve(g, 2)
        relabeled, _ = dp_solve(scale * g + offset, 2)
        np.testing.assert_array_equal(relabeled.v, oracle.v)


def test_dp_respects_delta_on_a_sharp_step():
    g = np.zeros((6, 10))
    g[0, 8] = -5.0
    v, _ = dp_solve(g, 1)
    assert v.max_gap() <= 1


def test_contour_cost_of_infeasible_contour_is_inf():
    g = np.zeros((3, 4))
    assert math.isinf(contour_cost(g, ContourIndices(v=[1, 4, 1], num_points=4), 1))


def test_contour_cost_sums_both_derivatives():
    g = np.array([[0.0, 1.0, 3.0], [0.0, 2.0, 2.0], [0.0, 0.0, 5.0]])
    v = ContourIndices(v=[2, 2, 3], num_points=3)
    # derivatives at the chosen points are 1, 2 and 5, each counted twice
    assert contour_cost(g, v, 2) == pytest.approx(16.0)


def test_dp_tables_shapes_and_index_base():
    tables = dp_tables(np.random.default_rng(0).normal(size=(5, 4)), 2)
    assert tables.U.shape == (4, 4, 4)
    assert tables.I.shape == (4, 4, 4)
    assert tables.I.min() >= 1 and tables.I.max() <= 4


def test_batch_solves_each_image_independently(rng):
    g = rng.normal(size=(5, 7, 6))
    v, cost = dp_solve_batch(g, 2)
    for b in range(5):
        single, single_cost = dp_solve(g[b], 2)
        np.testing.assert_array_equal(v[b], single.v)
        assert cost[b] == single_cost


def test_brute_force_guard():
    with pytest.raises(ValueError):
        brute_force_solve(np.zeros((8, 10)), 2)


@pytest.mark.parametrize(
    "v, num_points, window, expected",
    [
        ([1, 1, 1, 1, 10], 10, 3, [4, 1, 1, 4, 4]),
        ([1, 1, 6, 1, 1, 1], 6, 5, [2, 2, 2, 2, 2, 1]),
    ],
)
def test_smooth_indices_wraps_around(v, num_points, window, expected):
    smoothed = smooth_indices(ContourIndices(v=v, num_points=num_points), window)
    np.testing.assert_array_equal(smoothed.v, expected)


def test_smooth_window_one_is_identity():
    v = ContourIndices(v=[3, 1, 4, 1, 5], num_points=6)
    np.testing.assert_array_equal(smooth_indices(v, 1).v, v.v)


def test_smooth_constant_is_fixed():
    v = ContourIndices(v=[7] * 9, num_points=8)
    np.testing.assert_array_equal(smooth_indices(v, 5).v, v.v)


@pytest.mark.parametrize("window", [0, 2, -3])
def test_smooth_rejects_bad_window(window):
    with pytest.raises(ValueError):
        smooth_indices(ContourIndices(v=[1, 2, 3], num_points=3), window)


def test_smooth_batch_matches_rows(rng):
    v = rng.integers(1, 9, size=(4, 12))
    out = smooth_batch(v, 5, 8)
    for row, smoothed in zip(v, out):
        np.testing.assert_array_equal(smoothed, smooth_indices(ContourIndices(v=row, num_points=8), 5).v)


def test_non_finite_map_is_a_numerical_error():
    with pytest.raises(NumericalError):
        dp_solve(np.full((4, 5), np.nan), 1)


def test_solver_keeps_only_the_last_value_slab(rng):
    g = rng.uniform(-1.0, 1.0, size=(6, 5))
    U, I, last = _dp_tables(_radial_derivative(g)[None], 2)
    assert U is None
    tables = dp_tables(g, 2)
    np.testing.assert_array_equal(last[0], tables.U[-1])
    np.testing.assert_array_equal(I[:, 0] + 1, tables.I)
