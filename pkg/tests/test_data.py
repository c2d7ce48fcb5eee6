import io

import numpy as np
import pytest

from auxgmm.data import (
    Case,
    ColumnSpec,
    Dataset,
    dataset_to_csv,
    load_dataset,
    marginal_p,
    split_samples,
)
from auxgmm.errors import MalformedRow, ParseError
from auxgmm.simulate import DGP_A, DGPSpec, DiscreteX, DiscreteYGivenX, generate


def test_minimal_two_row_csv():
    ds = load_dataset("d,y,x1\n0,1.0,0.5\n1,,0.2\n")
    assert ds.n == 2 and ds.n_primary == 1 and ds.n_auxiliary == 1
    assert ds.x[0, 0] == 0.5 and ds.y[0, 0] == 1.0
    assert np.isnan(ds.y[1, 0])


def test_auxiliary_row_without_y_rejected():
    with pytest.raises(MalformedRow):
        load_dataset("d,y,x1\n0,,0.5\n1,,0.2\n")


def test_bad_d_flag_rejected():
    with pytest.raises(MalformedRow):
        load_dataset("d,y,x1\n2,1.0,0.5\n1,,0.2\n")


def test_non_numeric_x_rejected():
    with pytest.raises(ParseError):
        load_dataset("d,y,x1\n0,1.0,abc\n1,,0.2\n")


def test_vector_y_columns():
    ds = load_dataset("d,y1,y2,x1\n0,1.0,2.0,0.5\n1,,,0.2\n")
    assert ds.d_y == 2
    assert ds.y_names == ("y1", "y2")


def test_missing_column_errors():
    with pytest.raises(ParseError):
        load_dataset("y,x1\n1.0,0.5\n", ColumnSpec())
    with pytest.raises(ParseError):
        load_dataset("d,x1\n0,0.5\n")


def test_round_trip_thousand_rows():
    ds = generate(DGP_A, 1000, seed=5)
    text = dataset_to_csv(ds)
    again = load_dataset(text, case=ds.case)
    assert dataset_to_csv(again) == text  # byte-wise re-serialization
    assert np.array_equal(ds.x, again.x)
    assert np.array_equal(ds.d, again.d)
    assert np.array_equal(ds.y[ds.d == 0], again.y[again.d == 0])


def test_split_samples_partition():
    ds = Dataset(x=np.array([[1.0], [2.0], [3.0]]),
                 y=np.array([[np.nan], [5.0], [np.nan]]),
                 d=np.array([1, 0, 1]), case=Case.VERIFY_OUT)
    primary, auxiliary = split_samples(ds)
    assert primary.indices.tolist() == [0, 2]
    assert auxiliary.indices.tolist() == [1]
    assert primary.n + auxiliary.n == ds.n
    assert set(primary.indices) | set(auxiliary.indices) == set(range(ds.n))


def test_all_auxiliary_rejected_at_construction():
    with pytest.raises(MalformedRow):
        Dataset(x=np.ones((2, 1)), y=np.ones((2, 1)), d=np.zeros(2), case=Case.VERIFY_OUT)


def test_constant_selection_share_binomial():
    spec = DGPSpec(name="const-p", x_law=DiscreteX(levels=((0.0,), (1.0,)), probs=(0.5, 0.5)),
                   p_fn=lambda x: np.full(x.shape[0], 0.3),
                   y_law=DGP_A.y_law)
    ds = generate(spec, 1000, seed=21)
    se = np.sqrt(0.3 * 0.7 / 1000)
    assert abs(marginal_p(ds) - 0.3) < 3 * se


def test_marginal_p_trivials():
    def make(d):
        n = len(d)
        y = np.where(np.array(d) == 1, np.nan, 1.0).reshape(n, 1)
        return Dataset(x=np.ones((n, 1)), y=y, d=np.array(d), case=Case.VERIFY_OUT)

    assert marginal_p(make([1, 0, 1, 0])) == 0.5
    assert marginal_p(make([1, 1, 1, 0])) == 0.75


def test_marginal_p_times_n_exact():
    ds = generate(DGP_A, 777, seed=3)
    assert marginal_p(ds) * ds.n == ds.n_primary


def test_dgp_a_marginal_p_large_sample():
    ds = generate(DGP_A, 100000, seed=11)
    # exact p = (0.25 + 0.5) / 2 = 0.375 by enumeration
    assert abs(marginal_p(ds) - 0.375) < 0.005


def test_loading_is_deterministic_and_order_preserving():
    text = "d,y,x1\n0,1.0,0.5\n1,,0.2\n0,3.0,0.9\n"
    a, b = load_dataset(text), load_dataset(text)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.d, b.d)
    assert a.x[:, 0].tolist() == [0.5, 0.2, 0.9]


def test_rows_view_matches_arrays():
    ds = load_dataset("d,y,x1\n0,1.0,0.5\n1,,0.2\n")
    rows = ds.rows
    assert rows[0].y[0] == 1.0 and rows[0].d == 0
    assert rows[1].y is None and rows[1].d == 1
