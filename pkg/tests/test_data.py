import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from survkit.data import (DataValidationError, SchemaError, Schema, fit_preprocessor, load_csv,
                          table_from_arrays, transform, transform_features)

SCHEMA = {"time": "time", "event": "event", "numeric": ["x1"]}


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_load_three_rows(tmp_path):
    table = load_csv(write(tmp_path, "time,event,x1\n1.0,1,0.5\n2.0,0,1.5\n3.5,1,-1\n"), SCHEMA)
    assert table.n_rows == 3
    assert table.column_names == ["time", "event", "x1"]
    np.testing.assert_array_equal(table["x1"].values, [0.5, 1.5, -1.0])


def test_bad_event_value_names_row(tmp_path):
    with pytest.raises(DataValidationError, match="row 1"):
        load_csv(write(tmp_path, "time,event,x1\n1,1,0\n2,2,1\n"), SCHEMA)


def test_nonpositive_time_rejected(tmp_path):
    with pytest.raises(DataValidationError, match="row 0"):
        load_csv(write(tmp_path, "time,event,x1\n0,1,0\n2,1,1\n"), SCHEMA)


def test_blank_cell_is_missing(tmp_path):
    table = load_csv(write(tmp_path, "time,event,x1\n1,1,0.5\n2,0,\n3,1,2\n"), SCHEMA)
    np.testing.assert_array_equal(table["x1"].missing, [False, True, False])


def test_missing_column_is_schema_error(tmp_path):
    with pytest.raises(SchemaError, match="x2"):
        load_csv(write(tmp_path, "time,event,x1\n1,1,0\n"), {**SCHEMA, "numeric": ["x2"]})


def test_impute_then_standardise():
    table = table_from_arrays({"time": [1, 2, 3], "event": [1, 1, 1], "x": [1.0, None, 3.0]},
                              "time", "event")
    state = fit_preprocessor(table, ["x"])
    np.testing.assert_allclose(transform_features(state, table)[:, 0],
                               [-np.sqrt(1.5), 0.0, np.sqrt(1.5)], atol=1e-12)


def test_one_hot_and_unseen_level():
    table = table_from_arrays({"time": [1, 2, 3], "event": [1, 0, 1], "c": ["a", "b", "a"]},
                              "time", "event", categorical=["c"])
    state = fit_preprocessor(table, categorical_cols=["c"])
    np.testing.assert_array_equal(transform_features(state, table), [[1, 0], [0, 1], [1, 0]])
    other = table_from_arrays({"time": [1], "event": [1], "c": ["z"]}, "time", "event",
                              categorical=["c"])
    np.testing.assert_array_equal(transform_features(state, other), [[0, 0]])


def test_mode_tie_takes_first_level():
    table = table_from_arrays({"time": [1, 2, 3, 4, 5], "event": [1] * 5,
                               "c": ["b", "a", "b", "a", None]}, "time", "event",
                              categorical=["c"])
    state = fit_preprocessor(table, categorical_cols=["c"])
    assert state.impute["c"] == "a"


def test_constant_column_maps_to_zero():
    table = table_from_arrays({"time": [1, 2, 3], "event": [1, 1, 0], "x": [5, 5, 5]},
                              "time", "event")
    state = fit_preprocessor(table, ["x"])
    np.testing.assert_array_equal(transform_features(state, table)[:, 0], [0, 0, 0])


def test_transform_returns_dataset_and_state_roundtrip():
    table = table_from_arrays({"time": [1, 2, 3, 4], "event": [1, 0, 1, 1], "a": [0, 1, 0, 1],
                               "x": [0.1, 0.2, 0.4, 0.8]}, "time", "event", treatment="a")
    state = fit_preprocessor(table, ["x"])
    ds = transform(state, table)
    np.testing.assert_array_equal(ds.treatment, [0, 1, 0, 1])
    again = transform(type(state).from_dict(state.to_dict()), table)
    np.testing.assert_array_equal(ds.features, again.features)
    assert Schema.from_dict(Schema("t", "e").to_dict()) == Schema("t", "e")


columns = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=3, max_size=40)


@settings(max_examples=60, deadline=None)
@given(columns, st.lists(st.sampled_from(["u", "v", "w"]), min_size=3, max_size=40))
def test_standardised_moments_and_one_hot_rows(xs, cats):
    n = min(len(xs), len(cats))
    xs, cats = xs[:n], cats[:n]
    table = table_from_arrays({"time": [1.0] * n, "event": [1] * n, "x": xs, "c": cats},
                              "time", "event", categorical=["c"])
    state = fit_preprocessor(table, ["x"], ["c"])
    Z = transform_features(state, table)
    np.testing.assert_array_equal(Z, transform_features(state, table))
    np.testing.assert_array_equal(Z[:, 1:].sum(axis=1), np.ones(n))
    if state.scale["x"][1] > 1e-6 * max(1.0, np.max(np.abs(xs))):
        assert abs(Z[:, 0].mean()) < 1e-9
        assert abs(Z[:, 0].var() - 1.0) < 1e-9
