import pathlib
import tempfile

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from treelink.errors import CovariateUnavailable, DegenerateCovariate, ParseError
from treelink.raster import (Raster, read_ascii_grid, sample_raster, sample_raster_many, standardize_covariates,
                             write_ascii_grid)
from treelink.spatial import Domain, Point2


def test_single_cell():
    r = Raster(1, 1, 0.0, 0.0, 5.0, [[7.0]])
    assert sample_raster(r, Point2(2.4, 3.3)) == 7.0


def test_two_by_two_upper_right():
    # row 0 is the northern row
    r = Raster(2, 2, 0.0, 0.0, 1.0, [[1, 2], [3, 4]])
    assert sample_raster(r, Point2(1.5, 1.5)) == 2.0
    assert sample_raster(r, Point2(0.5, 0.5)) == 3.0


def test_shared_edge_goes_to_half_open_cell():
    r = Raster(2, 2, 0.0, 0.0, 1.0, [[1, 2], [3, 4]])
    assert sample_raster(r, Point2(1.0, 0.5)) == 4.0
    assert sample_raster(r, Point2(0.5, 1.0)) == 1.0


def test_unavailable_cells():
    r = Raster(2, 1, 0.0, 0.0, 1.0, [[1.0, -9999.0]])
    with pytest.raises(CovariateUnavailable):
        sample_raster(r, Point2(1.5, 0.5))
    with pytest.raises(CovariateUnavailable):
        sample_raster(r, Point2(-0.1, 0.5))
    out = sample_raster_many(r, np.array([[0.5, 0.5], [1.5, 0.5], [5, 5]]))
    assert out[0] == 1.0 and np.isnan(out[1:]).all()


def test_standardize_hand_values():
    r = Raster(2, 2, 0.0, 0.0, 1.0, [[1, 2], [3, 4]])
    (std,), ((mean, sd),) = standardize_covariates([r], Domain(0, 0, 2, 2))
    assert mean == 2.5
    assert sd == pytest.approx(1.2909944487358056, abs=1e-15)
    assert abs(std.values.mean()) < 1e-12
    assert std.values.std(ddof=1) == pytest.approx(1.0, abs=1e-12)


def test_standardize_constant_raster():
    with pytest.raises(DegenerateCovariate):
        standardize_covariates([Raster(3, 3, 0, 0, 1, np.full((3, 3), 2.0))], Domain(0, 0, 3, 3))


def test_standardize_uses_cells_touching_domain_only():
    vals = np.array([[100.0, 100.0, 100.0], [1.0, 2.0, 100.0], [3.0, 4.0, 100.0]])
    r = Raster(3, 3, 0, 0, 1, vals)
    _, ((mean, _),) = standardize_covariates([r], Domain(0, 0, 2, 2))
    assert mean == 2.5


@given(st.integers(1, 6), st.integers(1, 6), st.floats(-1e3, 1e3), st.floats(0.1, 10), st.data())
def test_ascii_round_trip(ncols, nrows, xll, cs, data):
    vals = data.draw(st.lists(st.floats(-1e6, 1e6), min_size=ncols * nrows, max_size=ncols * nrows))
    r = Raster(ncols, nrows, xll, -xll, cs, np.array(vals).reshape(nrows, ncols), name="g")
    with tempfile.TemporaryDirectory() as d:
        p = pathlib.Path(d) / "g.asc"
        write_ascii_grid(r, p)
        back = read_ascii_grid(p)
    assert (back.ncols, back.nrows, back.xll, back.yll, back.cellsize, back.nodata) == \
        (r.ncols, r.nrows, r.xll, r.yll, r.cellsize, r.nodata)
    np.testing.assert_array_equal(back.values, r.values)


def test_ascii_bad_count(tmp_path):
    p = tmp_path / "bad.asc"
    p.write_text("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1 2 3\n")
    with pytest.raises(ParseError):
        read_ascii_grid(p)
