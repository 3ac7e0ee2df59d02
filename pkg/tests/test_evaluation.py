import math

import numpy as np
import pytest
from hypothesis import example, given, settings, strategies as st

from herec import evaluation as ev
from herec import plotting, synth
from herec.embedder import EmbedConfig
from herec.fusion import FusionKind
from herec.hin import RatingDataset, RatingRecord, parse_meta_path
from herec.recommender import HyperParams, MFModel
from herec.walker import WalkConfig

from conftest import random_ratings


def naive_mae(t, p):
    return sum(abs(a - b) for a, b in zip(t, p)) / len(t)


def naive_rmse(t, p):
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(t, p)) / len(t))


def test_metric_examples():
    assert ev.mae([(1, 2), (5, 3)]) == 1.5
    assert ev.rmse([(1, 2), (5, 3)]) == pytest.approx(1.5811, abs=1e-4)
    assert ev.mae([(4, 4.5)]) == 0.5
    assert ev.mae([(3, 3), (1, 1)]) == ev.rmse([(3, 3), (1, 1)]) == 0.0
    assert ev.rmse([(k, k + 1.0) for k in range(17)]) == 1.0
    with pytest.raises(ValueError):
        ev.mae([])
    with pytest.raises(ValueError):
        ev.rmse([(1, 2, 3)])


def test_metrics_match_naive_reference():
    rng = np.random.default_rng(0)
    t, p = rng.uniform(1, 5, 10_000), rng.uniform(1, 5, 10_000)
    pairs = np.column_stack([t, p])
    assert abs(ev.mae(pairs) - naive_mae(t, p)) <= 1e-12
    assert abs(ev.rmse(pairs) - naive_rmse(t, p)) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=50))
@example([(0.0, 8.464135064584196e-207)])  # squared error underflows
@example([(0.0, 1e200), (0.0, -1e200)])  # squared error overflows
def test_mae_not_above_rmse(pairs):
    a, r = ev.mae(pairs), ev.rmse(pairs)
    assert 0 <= a <= r * (1 + 1e-12) + 1e-300


def test_split_contract():
    ds = random_ratings(np.random.default_rng(1), 30, 30, 100)
    parts = ev.split(ds, ev.SplitSpec(0.8, repeats=3, seed=4))
    for train, test in parts:
        assert (len(train), len(test)) == (80, 20)
        keys = lambda d: {(r.user, r.item) for r in d.records}  # noqa: E731
        assert keys(train) | keys(test) == keys(ds)
        assert not keys(train) & keys(test)
    assert parts[0][0].records != parts[1][0].records
    again = ev.split(ds, ev.SplitSpec(0.8, repeats=3, seed=4))
    assert [p[0].records for p in again] == [p[0].records for p in parts]
    assert len(ev.split(ds, ev.SplitSpec(0.6))[0][0]) == 60
    assert ev.train_size(7, 0.5) == 4  # rounds toward training


@pytest.mark.parametrize("ratio", [0.0, 1.0, -0.2, 1.5])
def test_split_spec_rejects_ratio(ratio):
    with pytest.raises(ValueError):
        ev.SplitSpec(ratio)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 200), st.floats(0.05, 0.95), st.integers(0, 1000), st.integers(0, 5))
def test_split_partition_property(n, ratio, seed, repeat):
    ds = RatingDataset([RatingRecord(f"u{k}", "i", 3.0) for k in range(n)], (1, 5))
    train, test = ev.split_one(ds, ratio, seed, repeat)
    assert len(train) + len(test) == n
    assert len(train) == ev.train_size(n, ratio) >= ratio * n - 1e-9
    assert {r.user for r in train.records}.isdisjoint({r.user for r in test.records})


def test_metrics_report_aggregation():
    rep = ev.MetricsReport.from_repeats([(1.0, 2.0, 10), (3.0, 4.0, 10)])
    assert (rep.mae, rep.rmse, rep.n) == (2.0, 3.0, 20)
    assert rep.mae_std == pytest.approx(math.sqrt(2))
    assert ev.MetricsReport.from_repeats([(1.0, 1.0, 1)]).rmse_std == 0.0


def _records(spec):
    return [RatingRecord(u, i, 3.0) for u, i in spec]


def test_cold_start_groups_partition():
    train = RatingDataset(_records([("a", f"i{k}") for k in range(3)] + [("b", f"i{k}") for k in range(10)]
                                   + [("c", f"i{k}") for k in range(20)] + [("d", f"i{k}") for k in range(40)]),
                          (1, 5))
    test = RatingDataset(_records([(u, "z") for u in "abcde"]), (1, 5))
    groups = ev.cold_start_groups(train, test)
    assert groups == {(0, 5): {"a"}, (5, 15): {"b"}, (15, 30): {"c"}}
    seen = [u for g in groups.values() for u in g]
    assert len(seen) == len(set(seen))
    with pytest.raises(ValueError):
        ev.ColdStartSpec((0, 5, 5))


def test_cold_start_eval_improvement():
    rng = np.random.default_rng(3)
    ds = random_ratings(rng, 40, 40, 400)
    train, test = ev.split_one(ds, 0.5, 0, 0)
    good = MFModel(train, HyperParams(D=3, epochs=30))
    good.train(train)
    bad = MFModel(train, HyperParams(D=3, epochs=1))
    bad.train(train)
    rows = ev.cold_start_eval(good, train, test, baseline=bad)
    assert [r["group"] for r in rows] == ["(0,5]", "(5,15]", "(15,30]"]
    for r in rows:
        if r["n"]:
            assert r["improvement_rmse"] == pytest.approx((r["base_rmse"] - r["rmse"]) / r["base_rmse"])


@pytest.fixture(scope="module")
def small_setup():
    data = synth.generate(synth.SynthConfig(n_users=120, n_items=80, n_ratings=1200, seed=5))
    g = data.graph
    paths = {"user": [parse_meta_path("UGU", g.schema, "U"), parse_meta_path("UIU", g.schema, "U")],
             "item": [parse_meta_path("ITI", g.schema, "I")]}
    return ev.EvalSetup(g, data.ratings, "U", "I", paths, WalkConfig(6, 2, 1), EmbedConfig(dim=8, epochs=1),
                        HyperParams(D=4, epochs=8), kinds=(FusionKind.SIMPLE_LINEAR, FusionKind.PERSONALIZED_NONLINEAR))


def test_split_graph_has_no_test_edges(small_setup):
    train, test = ev.split_one(small_setup.ratings, 0.7, 0, 0)
    g = ev.split_graph(small_setup, train)
    ui = {frozenset(e) for e in g.edges() if {g.node_type[e[0]], g.node_type[e[1]]} == {"U", "I"}}
    assert ui == {frozenset((r.user, r.item)) for r in train.records}
    assert small_setup.uses_ratings(small_setup.meta_paths["user"][1])
    assert not small_setup.uses_ratings(small_setup.meta_paths["user"][0])


def test_evaluate_rows_and_determinism(small_setup):
    rows, reports = ev.evaluate(small_setup, [0.8, 0.5], repeats=2, seed=3)
    assert len(rows) == 2 * 2 * 3
    assert [r["method"] for r in rows[:3]] == ["mf", "herec_sl", "herec_pnl"]
    assert rows[0]["ratio"] == 0.8
    for r in rows:
        assert 0 <= r["mae"] <= r["rmse"]
    again, _ = ev.evaluate(small_setup, [0.8, 0.5], repeats=2, seed=3, workers=2)
    assert again == rows
    assert reports[(0.5, "mf")].per_repeat[1][1] == rows[-3]["rmse"]


def test_ablation_and_sweep(small_setup):
    order = [("user", small_setup.meta_paths["user"][0]), ("item", small_setup.meta_paths["item"][0]),
             ("user", small_setup.meta_paths["user"][1])]
    res = ev.metapath_ablation(small_setup, order, 0.8, 1)
    assert [labels for labels, _ in res] == [["UGU"], ["UGU", "ITI"], ["UGU", "ITI", "UIU"]]
    assert set(res[0][1]) == {"herec_sl", "herec_pnl"}
    rows = ev.ablation_rows(res)
    assert rows[-1]["paths"] == "UGU+ITI+UIU"

    cells = ev.sweep(small_setup, {"D": [2, 3], "alpha": [0.5, 1.0], "d": [4]}, 0.8, 1)
    assert [c for c, _ in cells] == [{"D": 2, "alpha": 0.5, "d": 4}, {"D": 2, "alpha": 1.0, "d": 4},
                                     {"D": 3, "alpha": 0.5, "d": 4}, {"D": 3, "alpha": 1.0, "d": 4}]
    with pytest.raises(ValueError):
        ev.sweep(small_setup, {"eta": [0.1]}, 0.8, 1)


def test_cold_start_study_and_outputs(small_setup, tmp_path):
    cold = ev.cold_start_study(small_setup, 0.5, 1)
    assert {r["method"] for r in cold} == {"herec_sl", "herec_pnl"}
    rows, reports = ev.evaluate(small_setup, [0.8], repeats=1)
    p = tmp_path / "metrics.csv"
    ev.write_metrics_csv(p, rows)
    lines = p.read_text().splitlines()
    assert lines[0] == "ratio,repeat,method,mae,rmse"
    assert len(lines) == 4
    summary = ev.summary_rows(reports)
    figs = [plotting.plot_ratio_curve(summary, tmp_path / "a.png"),
            plotting.plot_cold_start(cold, tmp_path / "b.png"),
            plotting.plot_convergence({"x": [3.0, 2.0, 1.5]}, tmp_path / "c.png")]
    res = ev.sweep(small_setup, {"beta": [0.5, 1.0]}, 0.8, 1)
    figs.append(plotting.plot_sweep(ev.sweep_rows(res), tmp_path / "d.png"))
    order = [("user", mp) for mp in small_setup.meta_paths["user"]]
    figs.append(plotting.plot_ablation(ev.ablation_rows(ev.metapath_ablation(small_setup, order, 0.8, 1)),
                                       tmp_path / "e.png"))
    for f in figs:
        with open(f, "rb") as fh:
            assert fh.read(8) == b"\x89PNG\r\n\x1a\n"
