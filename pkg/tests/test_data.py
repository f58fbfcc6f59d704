import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advpriv import data as D
from advpriv.errors import DegenerateSubsetError, RejectedInputError
from advpriv.metrics import auc_score


def small(n=200, seed=0, **kw):
    return D.generate_synthetic(D.SyntheticSpec(n_rows=n, seed=seed, **kw))


# -- CSV ------------------------------------------------------------------


def test_csv_round_trip(tmp_path):
    ds = small(50, missing_rate=0.1)
    D.write_csv(ds, tmp_path / "d.csv")
    back = D.load_csv(tmp_path / "d.csv")
    assert np.array_equal(back.features, ds.features, equal_nan=True)
    assert np.array_equal(back.labels, ds.labels)
    assert np.array_equal(back.protected, ds.protected)


def test_csv_column_order_is_free(tmp_path):
    ds = small(10)
    lines = D.dataset_to_csv(ds).splitlines()
    rows = [line.split(",") for line in lines]
    perm = list(reversed(range(len(rows[0]))))
    (tmp_path / "r.csv").write_text("\n".join(",".join(r[i] for i in perm) for r in rows) + "\n")
    assert np.array_equal(D.load_csv(tmp_path / "r.csv").labels, ds.labels)


@pytest.mark.parametrize(
    "mutate",
    [
        lambda h, r: (h[:-1], [x[:-1] for x in r]),  # missing label column
        lambda h, r: (h + ["extra"], [x + ["1"] for x in r]),
        lambda h, r: (h, [x[:-1] + ["2"] for x in r]),  # non-binary label
        lambda h, r: (h, [x[:3] + ["abc"] + x[4:] for x in r]),
        lambda h, r: (h, [x[:-2] for x in r]),  # short rows
    ],
)
def test_malformed_csv_rejected(tmp_path, mutate):
    lines = D.dataset_to_csv(small(5)).splitlines()
    header, rows = mutate(lines[0].split(","), [line.split(",") for line in lines[1:]])
    p = tmp_path / "bad.csv"
    p.write_text("\n".join(",".join(r) for r in [header] + rows) + "\n")
    with pytest.raises(RejectedInputError):
        D.load_csv(p)


def test_empty_csv_rejected(tmp_path):
    (tmp_path / "e.csv").write_text("")
    with pytest.raises(RejectedInputError):
        D.load_csv(tmp_path / "e.csv")


def test_minors_excluded_on_load(tmp_path):
    ds = small(20)
    ds.age_years[:3] = [17.0, 12.0, 18.0]
    D.write_csv(ds, tmp_path / "d.csv")
    back = D.load_csv(tmp_path / "d.csv")
    assert len(back) == 18 and back.age_years.min() >= 18


# -- binarisation ---------------------------------------------------------


def test_binarize_examples():
    got = D.binarize_protected([70, 30, 64, 63.9], ["A", "prefer not to say", "D", "white british"], [1, 0, 0, 1])
    assert got.tolist() == [[1, 1, 1], [0, 0, 0], [1, 0, 0], [0, 1, 1]]


def test_binarize_rejects_minors():
    with pytest.raises(RejectedInputError):
        D.binarize_protected([17], ["A"], [1])


def test_unknown_attribute_rejected():
    with pytest.raises(RejectedInputError):
        small(10).attribute("income")


# -- preprocessing --------------------------------------------------------


def test_standardize_examples():
    x = np.array([[1.0, 10.0], [3.0, np.nan], [5.0, 30.0]])
    stats = D.fit_stats(x)
    assert stats.impute.tolist() == [3.0, 20.0]
    z = D.standardize(x, stats)
    assert np.allclose(z.mean(axis=0), 0) and np.allclose(z.std(axis=0), 1)
    assert z[1, 1] == 0.0


def test_constant_feature_does_not_divide_by_zero():
    x = np.array([[2.0, 1.0], [2.0, 3.0]])
    z = D.standardize(x, D.fit_stats(x))
    assert np.isfinite(z).all() and not z[:, 0].any()


def test_stats_use_only_training_rows():
    train, test = np.array([[0.0], [2.0]]), np.array([[100.0]])
    stats = D.fit_stats(train)
    assert stats.mean.tolist() == [1.0] and D.standardize(test, stats).tolist() == [[99.0]]


def _labelled(n_pos, n_neg):
    ds = small(n_pos + n_neg)
    ds.labels[:] = 0
    ds.labels[:n_pos] = 1
    return ds


def test_subsample_to_half_prevalence():
    ds = _labelled(3081, 20000)
    out = D.subsample_balance(ds, 0.5, seed=1)
    assert len(out) == 6162 and out.labels.sum() == 3081


def test_subsample_quarter_prevalence():
    out = D.subsample_balance(_labelled(10, 90), 0.25)
    assert len(out) == 40 and out.labels.sum() == 10


def test_subsample_unreachable():
    with pytest.raises(RejectedInputError):
        D.subsample_balance(_labelled(50, 10), 0.5)


def test_filter_subgroup():
    ds = small(300)
    women = D.filter_subgroup(ds, "gender", 0)
    assert len(women) == int((ds.gender == 0).sum()) and not women.gender.any()
    with pytest.raises(DegenerateSubsetError):
        D.filter_subgroup(women, "gender", 1)


def test_stratified_split_preserves_prevalence():
    ds = small(1000, prevalence=0.3)
    tr, te = D.stratified_split(ds, 0.2, seed=0)
    assert len(tr) + len(te) == 1000 and len(te) == 200
    assert tr.labels.sum() == 240 and te.labels.sum() == 60


# -- synthetic generator --------------------------------------------------


def test_exact_positive_count():
    for n, p in [(1000, 0.5), (4000, 0.0148), (333, 0.052)]:
        assert small(n, prevalence=p).labels.sum() == round(n * p)


def test_generator_is_deterministic():
    a, b = small(100, seed=5), small(100, seed=5)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.protected, b.protected)


def test_attribute_priors_hold():
    ds = small(20000, seed=2)
    assert np.all(np.abs(ds.protected.mean(axis=0) - np.array(D.MAJORITY_PRIORS)) < 0.02)


def test_leakage_shifts_named_features_only():
    ds = small(20000, seed=3)
    z = D.standardize(ds.features, D.fit_stats(ds))
    male = ds.protected[:, 1]
    for j, name in enumerate(D.FEATURES):
        r = np.corrcoef(z[:, j], male)[0, 1]
        named = name in dict(D.DEFAULT_LEAKAGE["gender"])
        assert (abs(r) > 0.2) if named else (abs(r) < 0.03), name


def test_label_signal_direction():
    ds = small(20000, seed=4)
    crp = ds.features[:, D.FEATURES.index("crp")]
    assert crp[ds.labels == 1].mean() > crp[ds.labels == 0].mean()


def _probe_auc(ds, attr):
    """AUC of a mean-difference projection fitted on one half, scored on the other."""
    z = D.standardize(ds.features, D.fit_stats(ds))
    a = ds.attribute(attr)
    half = len(ds) // 2
    w = z[:half][a[:half] == 1].mean(axis=0) - z[:half][a[:half] == 0].mean(axis=0)
    return auc_score(z[half:] @ w, a[half:])


def test_leakage_strength_is_monotone():
    aucs = [_probe_auc(small(6000, seed=6, leakage_strength=s), "age") for s in (0.0, 0.5, 1.0, 2.0)]
    assert abs(aucs[0] - 0.5) < 0.05
    assert all(b > a for a, b in zip(aucs, aucs[1:]))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 300), st.floats(0.01, 0.99), st.integers(0, 2**31 - 1))
def test_any_valid_spec_produces_valid_rows(n, p, seed):
    ds = small(n, seed=seed, prevalence=p)
    assert len(ds) == n and set(np.unique(ds.protected)) <= {0, 1}
    assert np.isfinite(ds.features).all() and ds.age_years.min() >= 18


@pytest.mark.parametrize(
    "kw", [{"prevalence": 1.0}, {"attr_priors": (0.5, 0.5)}, {"leakage_strength": -1.0}, {"n_rows": 0}]
)
def test_spec_validation(kw):
    with pytest.raises(RejectedInputError):
        D.SyntheticSpec(**kw)
