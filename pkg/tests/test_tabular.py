import json

import numpy as np
import pytest

from lungfuse import tabular as tb
from lungfuse.errors import ContractError, DataError, FormatError


def _toy():
    cols = [
        tb.ColumnSpec("age", "numeric"),
        tb.ColumnSpec("smoking", "categorical", ("never", "former", "current")),
        tb.ColumnSpec("gene", "numeric"),
    ]
    rows = [
        [1.0, "never", 0.5],
        [None, "never", 0.5],
        [3.0, "former", 0.5],
        [2.0, None, 0.5],
    ]
    return tb.TabularDataset(cols, rows, ["a", "b", "a", "b"], ids=["p0", "p1", "p2", "p3"])


# --- dataset invariants ---


def test_dataset_validates_arity_and_labels():
    cols = [tb.ColumnSpec("x", "numeric")]
    with pytest.raises(ContractError):
        tb.TabularDataset(cols, [[1.0, 2.0]], ["a"])
    with pytest.raises(ContractError):
        tb.TabularDataset(cols, [[1.0]], ["a", "b"])
    with pytest.raises(DataError):
        tb.TabularDataset(
            [tb.ColumnSpec("c", "categorical", ("x",))], [["y"]], ["a"]
        )
    with pytest.raises(DataError):
        tb.TabularDataset(cols, [[float("nan")]], ["a"])


def test_column_spec_validation():
    with pytest.raises(ContractError):
        tb.ColumnSpec("x", "ordinal")
    with pytest.raises(ContractError):
        tb.ColumnSpec("x", "categorical")
    with pytest.raises(ContractError):
        tb.ColumnSpec("x", "numeric", ("a",))
    with pytest.raises(ContractError):
        tb.ColumnSpec("x", "categorical", ("a", "a"))


def test_take_rows():
    ds = _toy()
    sub = tb.take_rows(ds, [2, 0])
    assert sub.n_rows == 2
    assert sub.labels == ["a", "a"]
    assert sub.ids == ["p2", "p0"]
    assert sub.rows[0][0] == 3.0


# --- fit / apply ---


def test_fit_mean_imputation_population_std():
    ds = _toy()
    p = tb.fit_preprocess(ds)
    mean, std = p.numeric_stats["age"]
    assert mean == pytest.approx(2.0)  # observed mean of [1, 3, 2]
    # imputed column is [1, 2, 3, 2]; population std
    assert std == pytest.approx(float(np.std([1.0, 2.0, 3.0, 2.0])))


def test_fit_three_value_example():
    cols = [tb.ColumnSpec("v", "numeric")]
    ds = tb.TabularDataset(cols, [[1.0], [None], [3.0]], ["a", "a", "b"])
    p = tb.fit_preprocess(ds)
    mean, std = p.numeric_stats["v"]
    assert mean == 2.0
    assert std == pytest.approx(np.sqrt(2.0 / 3.0))


def test_fit_mode_and_onehot_layout():
    ds = _toy()
    p = tb.fit_preprocess(ds)
    assert p.modes["smoking"] == "never"
    assert p.feature_names == [
        "age",
        "smoking=never",
        "smoking=former",
        "smoking=current",
        "gene",
    ]
    x = tb.apply_preprocess(p, ds)
    assert x.shape == (4, 5)
    # row 2 is a 'former' smoker
    assert list(x[2, 1:4]) == [0.0, 1.0, 0.0]
    # row 3 had a missing value, imputed to the mode 'never'
    assert list(x[3, 1:4]) == [1.0, 0.0, 0.0]


def test_mode_tie_breaks_to_declared_order():
    cols = [tb.ColumnSpec("c", "categorical", ("b", "a"))]
    ds = tb.TabularDataset(cols, [["a"], ["b"], [None]], ["x", "y", "x"])
    p = tb.fit_preprocess(ds)
    assert p.modes["c"] == "b"


def test_constant_column_scales_to_zero():
    cols = [tb.ColumnSpec("k", "numeric")]
    ds = tb.TabularDataset(cols, [[7.0], [7.0], [7.0]], ["a", "a", "b"])
    p = tb.fit_preprocess(ds)
    assert p.numeric_stats["k"] == (7.0, 1.0)
    assert np.all(tb.apply_preprocess(p, ds) == 0.0)


def test_apply_on_training_set_is_standardized():
    rng = np.random.default_rng(0)
    cols = [tb.ColumnSpec(f"n{i}", "numeric") for i in range(3)]
    rows = [[float(v) for v in rng.normal(5, 3, 3)] for _ in range(50)]
    ds = tb.TabularDataset(cols, rows, ["a"] * 50)
    x = tb.apply_preprocess(tb.fit_preprocess(ds), ds)
    assert np.all(np.abs(x.mean(axis=0)) < 1e-9)
    assert np.all(np.abs(x.std(axis=0) - 1.0) < 1e-9)


def test_row_of_means_maps_to_zeros():
    ds = _toy()
    p = tb.fit_preprocess(ds)
    probe = tb.TabularDataset(
        ds.columns, [[2.0, "never", 0.5]], ["a"]
    )
    x = tb.apply_preprocess(p, probe)
    assert x[0, 0] == 0.0
    assert x[0, 4] == 0.0


def test_all_missing_column_errors_by_name():
    cols = [tb.ColumnSpec("ok", "numeric"), tb.ColumnSpec("gone", "numeric")]
    ds = tb.TabularDataset(cols, [[1.0, None], [2.0, None]], ["a", "b"])
    with pytest.raises(DataError, match="gone"):
        tb.fit_preprocess(ds)


def test_fit_needs_two_rows():
    cols = [tb.ColumnSpec("x", "numeric")]
    with pytest.raises(ContractError):
        tb.fit_preprocess(tb.TabularDataset(cols, [[1.0]], ["a"]))


def test_unseen_category_zero_block_one_warning():
    fit_cols = [tb.ColumnSpec("c", "categorical", ("a", "b"))]
    train = tb.TabularDataset(fit_cols, [["a"], ["b"], ["a"]], ["x", "y", "x"])
    p = tb.fit_preprocess(train)
    wide = [tb.ColumnSpec("c", "categorical", ("a", "b", "c"))]
    probe = tb.TabularDataset(wide, [["c"]], ["x"])
    with pytest.warns(UserWarning) as rec:
        x = tb.apply_preprocess(p, probe)
    assert len(rec) == 1
    assert np.all(x == 0.0)


def test_apply_rejects_schema_mismatch():
    p = tb.fit_preprocess(_toy())
    other = tb.TabularDataset(
        [tb.ColumnSpec("x", "numeric")], [[1.0]], ["a"]
    )
    with pytest.raises(ContractError):
        tb.apply_preprocess(p, other)


def test_fit_statistics_ignore_other_rows():
    ds = _toy()
    train = tb.take_rows(ds, [0, 1, 2])
    p1 = tb.fit_preprocess(train)
    # mutate the held-out row; fitted statistics must be unaffected
    ds.rows[3][0] = 999.0
    p2 = tb.fit_preprocess(tb.take_rows(ds, [0, 1, 2]))
    assert p1.numeric_stats == p2.numeric_stats
    assert p1.modes == p2.modes


# --- SMOTE ---


def test_smote_balances_counts_originals_first():
    rng = np.random.default_rng(1)
    x = np.vstack([rng.normal(0, 1, (10, 3)), rng.normal(5, 1, (4, 3))])
    y = np.array(["A"] * 10 + ["B"] * 4)
    xo, yo = tb.smote(x, y, k=3, seed=0)
    assert xo.shape == (20, 3)
    assert int(np.sum(yo == "A")) == 10 and int(np.sum(yo == "B")) == 10
    assert np.array_equal(xo[:14], x)
    assert np.array_equal(yo[:14], y)
    assert np.all(yo[14:] == "B")


def test_smote_synthetics_lie_on_minority_segments():
    rng = np.random.default_rng(2)
    x = np.vstack([rng.normal(0, 1, (12, 4)), rng.normal(3, 1, (5, 4))])
    y = np.array([0] * 12 + [1] * 5)
    xo, yo = tb.smote(x, y, k=3, seed=7)
    minority = x[y == 1]
    for s in xo[17:]:
        ok = False
        for i in range(len(minority)):
            for j in range(len(minority)):
                if i == j:
                    continue
                p, q = minority[i], minority[j]
                d = q - p
                t = float(np.dot(s - p, d) / np.dot(d, d))
                if -1e-9 <= t <= 1 + 1e-9 and np.linalg.norm(p + t * d - s) < 1e-9:
                    ok = True
        assert ok, f"synthetic {s} is not on any minority segment"


def test_smote_balanced_input_is_identity():
    x = np.arange(12.0).reshape(6, 2)
    y = np.array(["a", "b"] * 3)
    xo, yo = tb.smote(x, y, k=1, seed=0)
    assert np.array_equal(xo, x)
    assert np.array_equal(yo, y)


def test_smote_caps_k_and_rejects_tiny_minority():
    x = np.vstack([np.zeros((5, 2)), [[1.0, 1.0], [1.1, 1.0]]])
    y = np.array([0] * 5 + [1] * 2)
    xo, yo = tb.smote(x, y, k=5, seed=3)  # k capped at 1
    assert int(np.sum(yo == 1)) == 5
    x2 = np.vstack([np.zeros((5, 2)), [[1.0, 1.0]]])
    y2 = np.array([0] * 5 + [1])
    with pytest.raises(DataError):
        tb.smote(x2, y2, k=3, seed=0)
    with pytest.raises(ContractError):
        tb.smote(x, y, k=0, seed=0)


def test_smote_deterministic_and_multiclass():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(24, 3))
    y = np.array([0] * 12 + [1] * 8 + [2] * 4)
    a = tb.smote(x, y, k=3, seed=9)
    b = tb.smote(x, y, k=3, seed=9)
    assert np.array_equal(a[0], b[0])
    counts = {c: int(np.sum(a[1] == c)) for c in (0, 1, 2)}
    assert counts == {0: 12, 1: 12, 2: 12}


# --- boosted importance ---


def _stump_oracle(x, y, lam=1.0, mcw=1.0):
    """Exhaustive best first split from a zero model, brute force."""
    p = 0.5
    g = p - y
    h = np.full(len(y), p * (1 - p))
    best = (None, -np.inf)
    for f in range(x.shape[1]):
        xs = np.sort(np.unique(x[:, f]))
        for lo, hi in zip(xs[:-1], xs[1:]):
            thr = (lo + hi) / 2
            left = x[:, f] <= thr
            hl, hr = h[left].sum(), h[~left].sum()
            if hl < mcw or hr < mcw:
                continue
            gl, gr = g[left].sum(), g[~left].sum()
            gain = 0.5 * (
                gl**2 / (hl + lam) + gr**2 / (hr + lam) - (gl + gr) ** 2 / (h.sum() + lam)
            )
            if gain > best[1]:
                best = (f, gain)
    return best


def _label_plus_noise(n=40, extra=4, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n).astype(np.float64)
    x = np.column_stack([y] + [rng.normal(size=n) for _ in range(extra)])
    return x, y


def test_importance_finds_label_feature():
    x, y = _label_plus_noise()
    rep = tb.boosted_importance(x, y)
    assert rep.ranking[0] == 0
    assert np.all(rep.gains >= 0)
    f, gain = _stump_oracle(x, y)
    assert rep.first_split[0] == f == 0
    assert rep.first_split[2] == pytest.approx(gain)


def test_importance_constant_features_all_zero():
    x = np.ones((12, 3))
    y = np.array([0, 1] * 6)
    rep = tb.boosted_importance(x, y)
    assert np.all(rep.gains == 0.0)
    assert rep.first_split is None
    assert sorted(rep.ranking) == [0, 1, 2]


def test_importance_stable_under_duplicated_noise():
    x, y = _label_plus_noise(seed=5)
    x2 = np.column_stack([x, x[:, 2]])
    rep = tb.boosted_importance(x2, y)
    assert rep.ranking[0] == 0
    f, _ = _stump_oracle(x2, y)
    assert rep.first_split[0] == f


def test_importance_row_permutation_invariant():
    x, y = _label_plus_noise(seed=6)
    rep1 = tb.boosted_importance(x, y)
    perm = np.random.default_rng(3).permutation(len(y))
    rep2 = tb.boosted_importance(x[perm], y[perm])
    assert np.allclose(rep1.gains, rep2.gains)
    assert rep1.ranking == rep2.ranking


def test_importance_multiclass_runs_one_vs_rest():
    rng = np.random.default_rng(8)
    y = np.array([0] * 8 + [1] * 8 + [2] * 8)
    x = np.column_stack([y == 0, y == 2, rng.normal(size=24)]).astype(np.float64)
    rep = tb.boosted_importance(x, y)
    assert set(rep.ranking[:2]) == {0, 1}


def test_importance_preconditions():
    x = np.random.default_rng(0).normal(size=(9, 2))
    with pytest.raises(DataError):
        tb.boosted_importance(x, np.array([0, 1] * 4 + [0]))
    x = np.random.default_rng(0).normal(size=(12, 2))
    with pytest.raises(DataError):
        tb.boosted_importance(x, np.zeros(12))
    with pytest.raises(ContractError):
        tb.boosted_importance(x, np.zeros(5))


def test_select_features_examples():
    rep = tb.ImportanceReport(
        gains=np.array([0.5, 0.9, 0.1]), ranking=[1, 0, 2]
    )
    assert tb.select_features(rep, 2) == [1, 0]
    assert tb.select_features(rep, 3) == [1, 0, 2]
    flat = tb.ImportanceReport(gains=np.ones(4), ranking=[0, 1, 2, 3])
    assert tb.select_features(flat, 1) == [0]
    with pytest.raises(ContractError):
        tb.select_features(rep, 0)
    with pytest.raises(ContractError):
        tb.select_features(rep, 4)


# --- CSV + schema I/O ---


def test_csv_round_trip(tmp_path):
    ds = _toy()
    csv_path = tmp_path / "t.csv"
    schema_path = tmp_path / "t.schema.json"
    tb.write_table(csv_path, ds, schema_path, label_column="subtype", id_column="patient")
    back = tb.read_table(csv_path, schema_path)
    assert [c.name for c in back.columns] == [c.name for c in ds.columns]
    assert back.labels == ds.labels
    assert back.ids == ds.ids
    assert back.rows == ds.rows


def test_read_table_errors(tmp_path):
    schema = tmp_path / "s.json"
    data = tmp_path / "d.csv"
    schema.write_text(
        json.dumps(
            {
                "label_column": "y",
                "columns": [
                    {"name": "a", "kind": "numeric"},
                    {"name": "c", "kind": "categorical", "categories": ["u", "v"]},
                ],
            }
        )
    )
    data.write_text("a,c,y\n1.5,u,pos\n")
    ds = tb.read_table(data, schema)
    assert ds.rows == [[1.5, "u"]]
    assert ds.labels == ["pos"]

    data.write_text("a,c\n1.5,u\n")
    with pytest.raises(FormatError, match="y"):
        tb.read_table(data, schema)
    data.write_text("a,c,y,zz\n1.5,u,pos,9\n")
    with pytest.raises(FormatError, match="zz"):
        tb.read_table(data, schema)
    data.write_text("a,c,y\nnope,u,pos\n")
    with pytest.raises(FormatError, match="not numeric"):
        tb.read_table(data, schema)
    data.write_text("a,c,y\n1.5,w,pos\n")
    with pytest.raises(FormatError):
        tb.read_table(data, schema)
    data.write_text("a,c,y\n1.5,u,\n")
    with pytest.raises(FormatError, match="label"):
        tb.read_table(data, schema)
    schema.write_text("{broken")
    with pytest.raises(FormatError):
        tb.read_table(data, schema)


def test_missing_marker_round_trip(tmp_path):
    schema = tmp_path / "s.json"
    data = tmp_path / "d.csv"
    schema.write_text(
        json.dumps(
            {
                "label_column": "y",
                "missing": "NA",
                "columns": [{"name": "a", "kind": "numeric"}],
            }
        )
    )
    data.write_text("a,y\nNA,pos\n2.0,neg\n")
    ds = tb.read_table(data, schema)
    assert ds.rows == [[None], [2.0]]
