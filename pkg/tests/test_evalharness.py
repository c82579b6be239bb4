import csv
import io
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aspectlfm import alfm, atm, evalharness as E
from aspectlfm.errors import ContractError

from helpers import planted_sweep_setup


# ---------------------------------------------------------------- rmse


def test_rmse_examples():
    assert E.rmse([(4.0, 4.0), (2.5, 2.5)]) == 0.0
    assert E.rmse([(3, 5)]) == 2.0
    assert E.rmse([(1, 2), (3, 5)]) == pytest.approx(np.sqrt(2.5), abs=1e-12)
    assert E.rmse([(1, 2), (3, 5)]) == pytest.approx(1.58114, abs=1e-5)
    assert E.rmse(pred=[1, 3], truth=[2, 5]) == E.rmse([(1, 2), (3, 5)])


def test_rmse_errors():
    with pytest.raises(ContractError):
        E.rmse([])
    with pytest.raises(ContractError):
        E.rmse(pred=[1.0, 2.0], truth=[1.0])


@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=1, max_size=30), st.randoms())
@settings(max_examples=60, deadline=None)
def test_rmse_permutation_invariant(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    assert E.rmse(shuffled) == pytest.approx(E.rmse(pairs), rel=1e-12, abs=1e-12)
    assert E.rmse(pairs) >= 0


# ---------------------------------------------------------------- cold-start buckets


def test_identical_predictions_give_zero_gain(rng):
    n = 50
    users = rng.integers(0, 12, n)
    counts = rng.integers(1, 11, 12)
    pred = rng.normal(3, 1, n)
    out = E.cold_start_buckets(pred, pred.copy(), rng.normal(3, 1, n), users, counts)
    assert out
    assert all(v["gain"] == 0.0 for v in out.values())


def test_uniform_error_bucket():
    truth = np.array([4.0, 2.0, 3.0, 5.0])
    users = np.array([0, 0, 1, 1])
    counts = np.array([3, 3])
    out = E.cold_start_buckets(truth + 0.8, truth - 1.0, truth, users, counts)
    assert list(out) == [3]
    assert out[3]["gain"] == pytest.approx(0.2, abs=1e-12)
    assert out[3]["n_pairs"] == 4 and out[3]["n_users"] == 2


def test_buckets_match_groupby_oracle(rng):
    n_users, n = 30, 200
    counts = rng.integers(1, 14, n_users)  # some users fall outside 1..10
    users = rng.integers(0, n_users, n)
    truth = rng.integers(1, 6, n).astype(float)
    model = truth + rng.normal(0, 0.7, n)
    base = truth + rng.normal(0, 0.9, n)
    groups = {}
    for j in range(n):
        groups.setdefault(int(counts[users[j]]), []).append(j)
    out = E.cold_start_buckets(model, base, truth, users, counts)
    expected = {b for b in groups if 1 <= b <= 10}
    assert set(out) == expected
    for b in expected:
        idx = groups[b]
        rb = np.sqrt(sum((base[j] - truth[j]) ** 2 for j in idx) / len(idx))
        rm = np.sqrt(sum((model[j] - truth[j]) ** 2 for j in idx) / len(idx))
        assert out[b]["gain"] == pytest.approx(rb - rm, abs=1e-12)
        assert out[b]["n_pairs"] == len(idx)
        assert out[b]["n_users"] == len({int(users[j]) for j in idx})
    assert sum(v["n_pairs"] for v in out.values()) <= n


def test_empty_buckets_absent():
    truth = np.array([3.0, 4.0])
    out = E.cold_start_buckets(truth, truth, truth, np.array([0, 1]), np.array([2, 7]))
    assert sorted(out) == [2, 7]
    assert 5 not in out


def test_bucket_shape_mismatch():
    with pytest.raises(ContractError):
        E.cold_start_buckets([1.0, 2.0], [1.0], [1.0, 2.0], [0, 0], [1])


# ---------------------------------------------------------------- reports


def test_report_json_and_text():
    grid = {(5, 5): 0.91, (5, 10): 0.9, (10, 5): 0.95, (10, 10): 0.93}
    rep = E.EvalReport(0.9, 12, baseline_rmse=1.0,
                       per_bucket={2: {"gain": 0.1, "rmse_model": 0.8, "rmse_baseline": 0.9,
                                       "n_pairs": 5, "n_users": 3}},
                       sweep_grid=grid)
    d = json.loads(rep.to_json())
    assert d["rmse"] == 0.9 and d["n_predictions"] == 12
    assert d["buckets"]["2"]["gain"] == 0.1
    assert {(g["f"], g["K"]) for g in d["grid"]} == set(grid)
    text = rep.to_text()
    assert "10.00%" in text
    assert "f \\ K" in text


def test_grid_csv_roundtrip():
    grid = {(5, 10): 0.123456789, (5, 5): 1 / 3}
    rows = list(csv.DictReader(io.StringIO(E.grid_csv(grid))))
    assert [(int(r["f"]), int(r["K"])) for r in rows] == [(5, 5), (5, 10)]
    assert float(rows[0]["rmse"]) == 1 / 3


# ---------------------------------------------------------------- sweep


@pytest.fixture(scope="module")
def small_setup(fixture30, fixture30_split):
    ah = atm.AtmHyperparams(K=2, A=2, sweeps=20, burn_in=10, seed=1)
    lh = alfm.AlfmHyperparams(f=2, learn_rate=0.05, max_epochs=30, seed=4)
    return fixture30, fixture30_split, ah, lh


def test_one_cell_sweep_equals_plain_run(small_setup):
    c, split, ah, lh = small_setup
    res = E.sweep(c, split, [3], [2], ah, lh)
    post = E.fit_topics(c, split, atm.with_topics(ah, 2))
    model = alfm.train(c.ratings(split.train), c.ratings(split.valid), post, replace(lh, f=3))
    valid, _ = E.evaluate_alfm(model, post, c, split.valid)
    test, _ = E.evaluate_alfm(model, post, c, split.test)
    assert res.grid == {(3, 2): valid}
    assert res.best_cell == (3, 2)
    assert res.test_rmse == test


def test_sweep_order_and_workers_independent(small_setup):
    c, split, ah, lh = small_setup
    a = E.sweep(c, split, [1, 3], [2, 3], ah, lh)
    b = E.sweep(c, split, [3, 1], [3, 2], ah, lh)
    w = E.sweep(c, split, [1, 3], [2, 3], ah, lh, workers=2)
    assert a.grid == b.grid == w.grid
    assert a.best_cell == b.best_cell == w.best_cell
    assert a.test_rmse == b.test_rmse == w.test_rmse
    assert set(a.posteriors) == {2, 3}


def test_sweep_reuses_given_posteriors(small_setup):
    c, split, ah, lh = small_setup
    first = E.sweep(c, split, [2], [2], ah, lh)
    again = E.sweep(c, split, [2], [2], replace(ah, seed=99), lh, posteriors=first.posteriors)
    assert again.grid == first.grid


@pytest.fixture(scope="module")
def planted_2x2():
    c, split, fit_h, sgd_h = planted_sweep_setup(3, 4)
    return E.sweep(c, split, [3, 6], [4, 8], fit_h, sgd_h)


def test_planted_sweep_factor_axis(planted_2x2):
    g = planted_2x2.grid
    for K in (4, 8):
        assert g[(3, K)] < g[(6, K)]


def test_planted_sweep_cell_is_minimum(planted_2x2):
    assert planted_2x2.best_cell == (3, 4), E.grid_table(planted_2x2.grid)
