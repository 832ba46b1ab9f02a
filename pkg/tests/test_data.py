import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from defaultlab.data import (
    FeatureSchema, ScalingParams, SplitSpec, TransitionMatrix,
    apply_scaling, compute_scaling, compute_transition_matrix, data_document, emit_csv,
    ingest_csv, invert_scaling, make_split, quarter_index, quarter_label,
)
from defaultlab.errors import (
    DimensionError, EmptyInputError, InsufficientDataError, ParseError, SchemaError,
    SplitError, UndefinedRowError,
)

from conftest import make_table


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


SCHEMA2 = FeatureSchema(["a", "b"], ["continuous", "count"])


# -- schema / table ---------------------------------------------------------------

def test_schema_rejects_duplicates_and_bad_kinds():
    with pytest.raises(SchemaError):
        FeatureSchema(["a", "a"], ["continuous", "count"])
    with pytest.raises(SchemaError):
        FeatureSchema(["a"], ["ordinal"])
    with pytest.raises(SchemaError):
        FeatureSchema(["label"], ["continuous"])


def test_schema_group_members():
    s = FeatureSchema(["a", "b", "c"], ["continuous"] * 3, ["x", "y", "x"])
    assert s.group_members() == {"x": [0, 2], "y": [1]}
    assert FeatureSchema.from_dict(s.to_dict()) == s


def test_table_rejects_bad_labels_and_nan():
    with pytest.raises(SchemaError):
        make_table([[1.0], [2.0]], labels=[0, 2])
    with pytest.raises(ParseError):
        make_table([[1.0], [np.nan]])


def test_table_is_immutable():
    t = make_table([[1.0], [2.0]])
    with pytest.raises(ValueError):
        t.rows[0, 0] = 5.0


def test_quarter_encoding():
    assert quarter_index(2004, 1) == 0
    assert quarter_index(2006, 2) == 9
    assert quarter_label(9) == "2006Q2"


# -- CSV -------------------------------------------------------------------------

def test_ingest_three_rows(tmp_path):
    p = write(tmp_path / "t.csv", "a,b,label,quarter,borrower_id,current\n"
              "1.5,2,0,0,10,1\n2.5,3,1,0,11,0\n-1,0,0,1,10,1\n")
    t = ingest_csv(p, SCHEMA2)
    assert len(t) == 3 and t.n_features == 2
    np.testing.assert_array_equal(t.rows[:, 0], [1.5, 2.5, -1.0])
    np.testing.assert_array_equal(t.labels, [0, 1, 0])
    np.testing.assert_array_equal(t.current_flag, [True, False, True])


def test_ingest_missing_label_column(tmp_path):
    p = write(tmp_path / "t.csv", "a,b,quarter,borrower_id,current\n1,2,0,0,1\n")
    with pytest.raises(SchemaError, match="label"):
        ingest_csv(p, SCHEMA2)


def test_ingest_parse_error_cites_row(tmp_path):
    p = write(tmp_path / "t.csv", "a,b,label,quarter,borrower_id,current\n"
              "1,2,0,0,1,1\nabc,2,0,0,2,1\n")
    with pytest.raises(ParseError) as info:
        ingest_csv(p, SCHEMA2)
    assert info.value.row == 2 and info.value.column == "a"
    assert "row 2" in str(info.value)


def test_ingest_empty_file(tmp_path):
    with pytest.raises(EmptyInputError):
        ingest_csv(write(tmp_path / "t.csv", ""), SCHEMA2)
    with pytest.raises(EmptyInputError):
        ingest_csv(write(tmp_path / "h.csv", "a,b,label,quarter,borrower_id,current\n"), SCHEMA2)


def test_ingest_rejects_missing_values(tmp_path):
    p = write(tmp_path / "t.csv", "a,b,label,quarter,borrower_id,current\n,2,0,0,1,1\n")
    with pytest.raises(ParseError):
        ingest_csv(p, SCHEMA2)


def test_extra_columns_kept(tmp_path):
    t = make_table([[1.0], [2.0]], extra={"score": [700.0, 650.0]})
    emit_csv(t, tmp_path / "t.csv")
    back = ingest_csv(tmp_path / "t.csv", t.schema)
    np.testing.assert_array_equal(back.extra["score"], [700.0, 650.0])
    np.testing.assert_array_equal(back.column("score"), [700.0, 650.0])


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 3)),
              elements=st.floats(-1e12, 1e12, allow_nan=False)),
       st.data())
def test_csv_round_trip_exact(tmp_path_factory, rows, data):
    n = rows.shape[0]
    labels = data.draw(arrays(np.int8, n, elements=st.integers(0, 1)))
    t = make_table(rows, labels=labels, quarter=np.arange(n) % 5)
    p = tmp_path_factory.mktemp("rt") / "t.csv"
    emit_csv(t, p)
    back = ingest_csv(p, t.schema)
    np.testing.assert_array_equal(back.rows, t.rows)
    np.testing.assert_array_equal(back.labels, t.labels)
    np.testing.assert_array_equal(back.quarter, t.quarter)
    np.testing.assert_array_equal(back.current_flag, t.current_flag)


def test_csv_round_trip_at_precision(tmp_path):
    t = make_table([[1.23456789], [2.0]])
    emit_csv(t, tmp_path / "t.csv", precision=3)
    back = ingest_csv(tmp_path / "t.csv", t.schema)
    np.testing.assert_allclose(back.rows, t.rows, atol=5e-4)


# -- scaling ---------------------------------------------------------------------

def test_scaling_of_one_two_three():
    p = compute_scaling(make_table([1.0, 2.0, 3.0]))
    assert p.means[0] == 2.0
    assert math.isclose(p.std_devs[0], math.sqrt(2.0 / 3.0), rel_tol=1e-15)


def test_constant_column_gets_unit_std():
    p = compute_scaling(make_table([5.0, 5.0, 5.0]))
    assert p.means[0] == 5.0 and p.std_devs[0] == 1.0
    z = apply_scaling(make_table([5.0, 5.0, 5.0]), p)
    assert np.all(z.rows == 0.0)


def test_standardized_column_is_fixed_point():
    col = np.array([-1.0, 1.0, -1.0, 1.0])
    p = compute_scaling(make_table(np.column_stack([col, [1.0, 4.0, 9.0, 16.0]])))
    assert p.means[0] == 0.0 and p.std_devs[0] == 1.0


def test_scaling_needs_two_rows():
    with pytest.raises(InsufficientDataError):
        compute_scaling(make_table([1.0]))


def test_apply_scaling_values():
    p = ScalingParams([2.0], [3.0])
    np.testing.assert_array_equal(apply_scaling(make_table([2.0, 5.0]), p).rows[:, 0], [0.0, 1.0])
    with pytest.raises(DimensionError):
        apply_scaling(make_table([[1.0, 2.0]]), p)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 30), st.integers(1, 4)),
              elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_scaling_properties(rows):
    t = make_table(rows)
    p = compute_scaling(t)
    z = apply_scaling(t, p)
    np.testing.assert_allclose(invert_scaling(z, p).rows, rows, rtol=1e-12, atol=1e-12 * (1 + np.abs(rows).max()))
    q = compute_scaling(z)
    spread = np.ptp(rows, axis=0) > 1e-6 * (1 + np.abs(rows).max(axis=0))
    np.testing.assert_allclose(q.means[spread], 0.0, atol=1e-10)
    np.testing.assert_allclose(q.std_devs[spread], 1.0, atol=1e-10)


def test_scaling_document_fields():
    p = ScalingParams([1.0, 2.0], [3.0, 4.0], ("a", "b"))
    doc = data_document(scaling=p)
    assert doc["means"] == [1.0, 2.0] and doc["std_devs"] == [3.0, 4.0]
    assert ScalingParams.from_dict(json.loads(json.dumps(doc))).names == ("a", "b")


# -- splits ----------------------------------------------------------------------

def quarter_table(quarters, per=10):
    q = np.repeat(quarters, per)
    return make_table(np.arange(q.size, dtype=float), quarter=q)


def test_temporal_gap_accepted_and_rejected():
    SplitSpec("temporal", (0,), (8,), 8)
    with pytest.raises(SplitError):
        SplitSpec("temporal", (0,), (4,), 8)


def test_temporal_split_contents():
    t = quarter_table([0, 1, 8, 9], per=50)
    train, val, test = make_split(t, SplitSpec("temporal", (0,), (8,), validation_fraction=0.2, seed=3))
    assert set(train.quarter) == {0} and set(val.quarter) == {0} and set(test.quarter) == {8}
    assert len(train) == 40 and len(val) == 10 and len(test) == 50
    assert not set(train.borrower_id) & set(val.borrower_id)


def test_temporal_split_missing_quarter():
    with pytest.raises(SplitError):
        make_split(quarter_table([0, 1]), SplitSpec("temporal", (0,), (8,)))


def test_pooled_sizes_six_two_two():
    train, val, test = make_split(make_table(np.arange(10.0)), SplitSpec("pooled", fractions=(0.6, 0.2, 0.2)))
    assert (len(train), len(val), len(test)) == (6, 2, 2)


def test_pooled_fractions_must_sum_to_one():
    with pytest.raises(SplitError):
        SplitSpec("pooled", fractions=(0.6, 0.2, 0.3))


def test_empty_partition_is_an_error():
    with pytest.raises(SplitError):
        make_split(make_table(np.arange(2.0)), SplitSpec("pooled", fractions=(0.6, 0.2, 0.2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(5, 60), st.integers(0, 2 ** 32), st.sampled_from(["temporal", "pooled"]))
def test_split_is_a_partition(n, seed, mode):
    t = quarter_table([0, 1, 9, 10], per=n)
    if mode == "temporal":
        spec = SplitSpec("temporal", (0, 1), (9, 10), seed=seed)
        selected = np.flatnonzero(np.isin(t.quarter, (0, 1, 9, 10)))
    else:
        spec = SplitSpec("pooled", fractions=(0.5, 0.25, 0.25), seed=seed)
        selected = np.arange(len(t))
    parts = make_split(t, spec)
    ids = np.concatenate([p.rows[:, 0] for p in parts])
    assert ids.size == np.unique(ids).size
    assert set(ids.tolist()) == set(t.rows[selected, 0].tolist())


# -- transitions ------------------------------------------------------------------

def test_transition_matrix_frequencies():
    current = np.array([1, 1, 1, 1, 0, 0], dtype=bool)
    labels = np.array([0, 0, 0, 1, 1, 0])
    tm = compute_transition_matrix(make_table(np.zeros(6), labels=labels, current=current))
    np.testing.assert_array_equal(tm.matrix, [[0.75, 0.25], [0.5, 0.5]])
    np.testing.assert_array_equal(tm.counts, [[3, 1], [1, 1]])
    np.testing.assert_array_equal(tm.matrix.sum(axis=1), [1.0, 1.0])


def test_transition_undefined_default_row():
    t = make_table(np.zeros(4), labels=np.zeros(4, dtype=int), current=np.ones(4, dtype=bool))
    with pytest.raises(UndefinedRowError) as info:
        compute_transition_matrix(t)
    assert info.value.state == "default"


def test_transition_document():
    tm = TransitionMatrix(np.array([[0.776, 0.224], [0.073, 0.927]]), np.array([[1, 1], [1, 1]]))
    doc = tm.to_dict()
    assert doc["matrix"] == [0.776, 0.224, 0.073, 0.927]
    assert doc["labels"] == ["current", "default"]
    assert TransitionMatrix.from_dict(doc).matrix[1, 1] == 0.927


@settings(max_examples=40, deadline=None)
@given(arrays(np.int8, st.integers(2, 60), elements=st.integers(0, 1)), st.data())
def test_transition_rows_sum_to_one(labels, data):
    n = labels.size
    current = data.draw(arrays(np.bool_, n))
    if current.all() or not current.any():
        current[0] = not current[0]
    tm = compute_transition_matrix(make_table(np.zeros(n), labels=labels, current=current))
    assert np.all(np.abs(tm.matrix.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all((tm.matrix >= 0) & (tm.matrix <= 1))
