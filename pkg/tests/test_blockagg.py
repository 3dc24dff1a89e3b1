import numpy as np
import pytest

from stfuse.blockagg import (
    AggregationError,
    GridSpec,
    centroid_members,
    compute_overlaps,
    method1,
    method2,
)
from stfuse.mesh import BlockGeometry

GRID = GridSpec(x0=0.0, y0=0.0, dx=1.0, dy=1.0, nx=4, ny=4)


def square(x0, y0, w, h):
    return np.array([[x0, y0], [x0 + w, y0], [x0 + w, y0 + h], [x0, y0 + h]])


def test_gridspec_layout():
    assert GRID.n_cells == 16
    cents = GRID.centroids()
    np.testing.assert_allclose(cents[0], [0.5, 0.5])
    np.testing.assert_allclose(cents[1], [1.5, 0.5])  # x fastest
    np.testing.assert_allclose(cents[4], [0.5, 1.5])
    with pytest.raises(AggregationError):
        GridSpec(0, 0, -1.0, 1.0, 2, 2)


def test_overlap_single_cell_block():
    block = BlockGeometry(id="one", rings=(square(1, 1, 1, 1),))
    table = compute_overlaps([block], GRID)
    cells, h = table.entries[0]
    assert cells.tolist() == [5]
    np.testing.assert_allclose(h, [1.0], atol=1e-12)


def test_overlap_two_cell_block():
    block = BlockGeometry(id="two", rings=(square(1, 1, 2, 1),))
    table = compute_overlaps([block], GRID)
    cells, h = table.entries[0]
    assert sorted(cells.tolist()) == [5, 6]
    np.testing.assert_allclose(h, [0.5, 0.5], atol=1e-12)


def test_overlap_triangle_against_shoelace_oracle():
    # right triangle with legs 2 (x) and 1 (y) anchored at (1, 1): covers half
    # of cells 5 and 6; clipped sub-areas computed by hand shoelace are
    # 0.75 (cell 5) and 0.25 (cell 6) out of a total of 1.0
    tri = np.array([[1.0, 1.0], [3.0, 1.0], [1.0, 2.0]])
    block = BlockGeometry(id="tri", rings=(tri,))
    table = compute_overlaps([block], GRID)
    cells, h = table.entries[0]
    lookup = dict(zip(cells.tolist(), h))
    assert lookup[5] == pytest.approx(0.75, abs=1e-12)
    assert lookup[6] == pytest.approx(0.25, abs=1e-12)
    assert sum(h) == pytest.approx(1.0, abs=1e-9)


def test_overlap_fractions_sum_to_one_for_irregular_block():
    poly = np.array([[0.3, 0.2], [3.7, 0.4], [3.1, 3.6], [0.9, 2.9]])
    block = BlockGeometry(id="irr", rings=(poly,))
    table = compute_overlaps([block], GRID)
    _, h = table.entries[0]
    assert h.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.all(h > 0)


def test_overlap_rejects_block_outside_grid():
    block = BlockGeometry(id="out", rings=(square(3, 3, 2, 2),))
    with pytest.raises(AggregationError, match="out"):
        compute_overlaps([block], GRID)


def test_method1_examples():
    block = BlockGeometry(id="b", rings=(square(1, 1, 2, 1),))
    table = compute_overlaps([block], GRID)
    const = np.full(16, 3.3)
    np.testing.assert_allclose(method1(const, table), [3.3], atol=1e-12)

    one_cell = BlockGeometry(id="c", rings=(square(2, 2, 1, 1),))
    t2 = compute_overlaps([one_cell], GRID)
    values = np.arange(16.0)
    np.testing.assert_allclose(method1(values, t2), [10.0], atol=1e-12)


def test_method1_weighted_arithmetic():
    # h = (0.25, 0.75) with values (1, 5) -> 4.0
    block = BlockGeometry(id="w", rings=(square(1.75, 1.0, 1.0, 1.0),))
    table = compute_overlaps([block], GRID)
    cells, h = table.entries[0]
    assert sorted(cells.tolist()) == [5, 6]
    values = np.zeros(16)
    values[5], values[6] = 1.0, 5.0
    ordered_h = h[np.argsort(cells)]
    np.testing.assert_allclose(ordered_h, [0.25, 0.75], atol=1e-12)
    np.testing.assert_allclose(method1(values, table), [4.0], atol=1e-12)


def test_method2_examples():
    block = BlockGeometry(id="m", rings=(square(1, 1, 2, 1),))
    const = np.full(16, 7.7)
    np.testing.assert_allclose(method2(const, [block], GRID), [7.7], atol=1e-12)

    values = np.zeros(16)
    values[5], values[6] = 2.0, 4.0
    np.testing.assert_allclose(method2(values, [block], GRID), [3.0], atol=1e-12)


def test_method2_errors_on_empty_block():
    sliver = BlockGeometry(id="sliver", rings=(square(0.9, 0.9, 0.05, 0.05),))
    with pytest.raises(AggregationError, match="sliver"):
        method2(np.zeros(16), [sliver], GRID)


def test_both_methods_are_linear():
    rng = np.random.default_rng(0)
    poly = np.array([[0.4, 0.3], [3.3, 0.8], [2.9, 3.2], [0.7, 2.5]])
    block = BlockGeometry(id="lin", rings=(poly,))
    table = compute_overlaps([block], GRID)
    v = rng.standard_normal(16)
    a, b = 2.7, -1.1
    m1 = method1(v, table)[0]
    m1_aff = method1(a * v + b, table)[0]
    assert m1_aff == pytest.approx(a * m1 + b, abs=1e-10)
    m2 = method2(v, [block], GRID)[0]
    m2_aff = method2(a * v + b, [block], GRID)[0]
    assert m2_aff == pytest.approx(a * m2 + b, abs=1e-10)


def test_methods_agree_on_exact_cell_unions():
    rng = np.random.default_rng(1)
    v = rng.standard_normal(16)
    block = BlockGeometry(id="u", rings=(square(0, 1, 3, 2),))
    table = compute_overlaps([block], GRID)
    m1 = method1(v, table)[0]
    m2 = method2(v, [block], GRID)[0]
    cells = [4, 5, 6, 8, 9, 10]
    truth = v[cells].mean()
    assert m1 == pytest.approx(truth, abs=1e-12)
    assert m2 == pytest.approx(truth, abs=1e-12)


def test_centroid_membership_is_partition_for_touching_blocks():
    left = BlockGeometry(id="L", rings=(square(0, 0, 2, 4),))
    right = BlockGeometry(id="R", rings=(square(2, 0, 2, 4),))
    members = centroid_members([left, right], GRID)
    joined = np.sort(np.concatenate(members))
    np.testing.assert_array_equal(joined, np.arange(16))


def test_overlap_table_csv(tmp_path):
    block = BlockGeometry(id="c", rings=(square(1, 1, 2, 1),))
    table = compute_overlaps([block], GRID)
    path = tmp_path / "table.csv"
    table.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "block_id,cell_index,h"
    assert len(lines) == 3
