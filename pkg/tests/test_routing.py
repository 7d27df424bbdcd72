import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hiercascade.backend import LabelSpace, make_table_backend, predict, table_features
from hiercascade.estimator import table_cascade
from hiercascade.evaluation import score
from hiercascade.routing import (
    HierarchyEnsemble,
    InvocationCounter,
    RoutingError,
    classify_bottomup,
    classify_flat,
    classify_oracle,
    classify_topdown,
    load_ensemble,
    route_batch,
    save_ensemble,
)
from hiercascade.taxonomy import synthetic_taxonomy


def one_hot_rows(n, targets):
    R = np.zeros((n, n))
    R[np.arange(n), targets] = 1.0
    return R


def test_perfect_tables_always_correct(nw45):
    e = table_cascade(nw45, 1.0, 1.0, seed=0, flat_acc=1.0)
    fine = np.arange(nw45.n_fine)
    X = table_features(fine)
    for mode in ("topdown", "bottomup", "flat"):
        np.testing.assert_array_equal(route_batch(e, X, mode).fine, fine)
    np.testing.assert_array_equal(route_batch(e, X, "oracle", true_coarse=nw45.parent).fine, fine)
    p = classify_topdown(e, X[5])
    assert p.fine == 5 and p.mode == "topdown" and p.coarse_used == nw45.coarse_of(5)


def test_misrouted_river_lands_in_transportation(nw45):
    water, transport = nw45.coarse_id("Water Areas"), nw45.coarse_id("Transportation")
    targets = list(range(nw45.n_coarse))
    targets[water] = transport
    e = table_cascade(nw45, 1.0, 1.0, seed=0)
    e.first = make_table_backend(one_hot_rows(nw45.n_coarse, targets), 0,
                                 LabelSpace.range(nw45.n_coarse, "coarse"), nw45.parent)
    river = nw45.fine_id("river")
    p = classify_topdown(e, table_features([river])[0])
    assert p.coarse_used == transport
    assert p.fine in nw45.fine_set(transport)
    assert p.fine != river


def test_pruning_counters(trained_small):
    t, e, test = trained_small
    e.counter = InvocationCounter()
    try:
        n = len(test)
        route_batch(e, test.X, "topdown")
        assert e.counter.samples["first"] == n
        assert e.counter.second_samples() == n
        e.counter.reset()
        route_batch(e, test.X, "bottomup")
        assert e.counter.samples["flat"] == n and e.counter.second_samples() == n
        e.counter.reset()
        route_batch(e, test.X, "flat")
        assert dict(e.counter.samples) == {"flat": n}
        e.counter.reset()
        for x in test.X[:10]:
            classify_topdown(e, x)
        assert e.counter.samples["first"] == 10 and e.counter.second_samples() == 10
        assert sum(v for k, v in e.counter.calls.items() if k.startswith("second")) == 10
    finally:
        e.counter = None


def test_oracle_matches_topdown_when_routed_right(trained_small):
    t, e, test = trained_small
    sub = test.subset(np.arange(min(50, len(test))))
    tc = sub.coarse(t)
    first_pred = predict(e.first, sub.X)
    for i, x in enumerate(sub.X):
        td = classify_topdown(e, x)
        orc = classify_oracle(e, x, int(tc[i]))
        if first_pred[i] == tc[i]:
            assert td.fine == orc.fine
        else:
            # a wrong branch cannot contain the true label
            assert td.fine != sub.fine[i]
        assert int(orc.fine == sub.fine[i]) >= int(td.fine == sub.fine[i])


def test_bottomup_corrects_beach_to_river(nw45):
    river, beach = nw45.fine_id("river"), nw45.fine_id("beach")
    targets = list(range(nw45.n_fine))
    targets[river] = beach
    e = table_cascade(nw45, 1.0, 1.0, seed=0)
    e.flat = make_table_backend(one_hot_rows(nw45.n_fine, targets), 0, LabelSpace.range(nw45.n_fine))
    x = table_features([river])[0]
    assert classify_flat(e, x).fine == beach
    p = classify_bottomup(e, x)
    assert p.coarse_used == nw45.coarse_id("Water Areas")
    assert p.fine == river


def test_bottomup_unchanged_when_flat_right(nw45):
    e = table_cascade(nw45, 1.0, 1.0, seed=0, flat_acc=1.0)
    X = table_features(np.arange(nw45.n_fine))
    np.testing.assert_array_equal(route_batch(e, X, "bottomup").fine, np.arange(nw45.n_fine))


def test_bottomup_confined_to_wrong_coarse(nw45):
    river, bridge = nw45.fine_id("river"), nw45.fine_id("bridge")
    targets = list(range(nw45.n_fine))
    targets[river] = bridge
    e = table_cascade(nw45, 1.0, 1.0, seed=0)
    e.flat = make_table_backend(one_hot_rows(nw45.n_fine, targets), 0, LabelSpace.range(nw45.n_fine))
    p = classify_bottomup(e, table_features([river])[0])
    assert p.fine in nw45.fine_set(nw45.coarse_id("Transportation"))


def test_flat_equals_predict(trained_small):
    t, e, test = trained_small
    b = route_batch(e, test.X, "flat")
    np.testing.assert_array_equal(b.fine, predict(e.flat, test.X))
    np.testing.assert_array_equal(b.coarse_used, np.asarray(t.parent)[b.fine])


def test_mpps_in_unit_interval(trained_small):
    t, e, test = trained_small
    for mode in ("topdown", "bottomup", "flat"):
        b = route_batch(e, test.X, mode)
        assert ((b.coarse_mpp >= 0) & (b.coarse_mpp <= 1 + 1e-12)).all()
        assert ((b.fine_mpp >= 0) & (b.fine_mpp <= 1 + 1e-12)).all()


def test_missing_models(small_tax):
    e = table_cascade(small_tax, 1.0, 1.0, seed=0)
    x = table_features([0])[0]
    with pytest.raises(RoutingError, match="flat"):
        classify_flat(e, x)
    with pytest.raises(RoutingError, match="flat"):
        classify_bottomup(e, x)
    del e.second[0]
    with pytest.raises(RoutingError, match="second-level"):
        classify_oracle(e, x, 0)
    e.first = None
    with pytest.raises(RoutingError, match="first-level"):
        classify_topdown(e, x)
    with pytest.raises(RoutingError, match="unknown mode"):
        route_batch(table_cascade(small_tax, 1, 1, 0), table_features([0]), "soft")


def test_label_space_validation(small_tax):
    e = table_cascade(small_tax, 1.0, 1.0, seed=0)
    with pytest.raises(RoutingError):
        HierarchyEnsemble(small_tax, e.first, {0: e.second[1]})


def test_manifest_round_trip(tmp_path, trained_small):
    t, e, test = trained_small
    save_ensemble(e, tmp_path / "fold")
    back = load_ensemble(tmp_path / "fold" / "manifest.json")
    for mode in ("topdown", "bottomup", "flat"):
        np.testing.assert_array_equal(route_batch(back, test.X, mode).fine,
                                      route_batch(e, test.X, mode).fine)


taxa = st.lists(st.integers(1, 4), min_size=1, max_size=4)


@settings(max_examples=30, deadline=None)
@given(taxa, st.floats(0, 1), st.floats(0, 1), st.integers(0, 2**31))
def test_invariants_on_random_table_ensembles(sizes, ra, fa, seed):
    t = synthetic_taxonomy(sizes)
    e = table_cascade(t, ra, fa, seed=seed, flat_acc=0.5)
    fine = np.arange(200) % t.n_fine
    X = table_features(fine)
    tc = np.asarray(t.parent)[fine]
    td = route_batch(e, X, "topdown")
    orc = route_batch(e, X, "oracle", true_coarse=tc)
    bu = route_batch(e, X, "bottomup")
    for b in (td, orc, bu):
        assert all(f in t.fine_set(c) for f, c in zip(b.fine, b.coarse_used))
    acc_td = score(td, fine, t).overall_accuracy
    acc_or = score(orc, fine, t).overall_accuracy
    route_acc = (predict(e.first, X) == tc).mean()
    assert acc_or >= acc_td
    assert acc_td <= route_acc
