import json

import numpy as np
import pytest

from smilesprop import metrics
from smilesprop.gp import GaussianProcess, expected_improvement
from smilesprop.hpo import (
    Observation, SearchError, SearchSpace, Trial, run_search, scatter_csv, seed_trials, suggest, val_test_correlation,
)
from smilesprop.models import EM_GRID, RNN_GRID, ArchClass, HyperParams

RNN_ONLY = SearchSpace(ArchClass.GRU, (("rnn1_units", tuple(RNN_GRID)),), (("em_size", 40), ("rnn2_units", 8)))
SMALL = SearchSpace(ArchClass.GRU, (("em_size", tuple(EM_GRID)), ("rnn1_units", tuple(RNN_GRID))), (("rnn2_units", 8),))


def bowl(params, i):
    u = SMALL.normalize([params])[0]
    return float(((u - [0.3, 0.6]) ** 2).sum()), float(i)


def test_seed_trials():
    cnn = seed_trials("cnn-gru")
    assert cnn[0] == HyperParams(40, 8, 8, 16)
    assert [h.rnn1_units for h in cnn] == [8, 16, 32, 64, 128, 256]
    assert all(h.conv_filters is None for h in seed_trials("gru"))
    for arch in ArchClass:
        space = SearchSpace.for_arch(arch)
        assert all({k: v for k, v in vars(h).items() if k in space.names} in space for h in seed_trials(arch))


def test_cardinality():
    assert SearchSpace.for_arch("cnn-gru").cardinality == 6 * 48 * 48 * 48 == 663_552
    assert SearchSpace.for_arch("lstm").cardinality == 6 * 48 * 48


def test_index_round_trip(rng):
    space = SearchSpace.for_arch("cnn-lstm")
    for flat in rng.integers(0, space.cardinality, 200):
        p = space.from_index(flat)
        assert p in space and space.to_index(p) == flat
    pos = space.positions([0, space.cardinality - 1])
    assert pos.tolist() == [[0, 0, 0, 0], [5, 47, 47, 47]]


def test_six_trials_are_exactly_the_seeds(monkeypatch):
    import smilesprop.hpo as hpo

    def boom(*a, **k):
        raise AssertionError("surrogate must not be consulted")

    monkeypatch.setattr(hpo, "suggest", boom)
    space = SearchSpace.for_arch("cnn-gru")
    rep = run_search(lambda p, i: (1.0, 0.0), space, n_trials=6)
    assert [t.source for t in rep.trials] == ["seed"] * 6
    assert [t.params["rnn2_units"] for t in rep.trials] == [8, 16, 32, 64, 128, 256]


def test_one_dimensional_restriction_finds_optimum():
    hits = 0
    for r in range(20):
        rep = run_search(lambda p, i: (-((p["rnn1_units"] - 200) ** 2), 0.0), RNN_ONLY, n_trials=26, maximize=True, seed=r)
        hits += abs(rep.best.params["rnn1_units"] - 200) <= 8
    assert hits >= 18


def test_last_point_and_exhaustion():
    space = SearchSpace(ArchClass.GRU, (("rnn1_units", (8, 16, 24)),), (("em_size", 10), ("rnn2_units", 8)))
    hist = [Observation({"rnn1_units": 8}, 1.0), Observation({"rnn1_units": 24}, 2.0)]
    assert suggest(hist, space, np.random.default_rng(0)) == {"rnn1_units": 16}
    with pytest.raises(SearchError):
        suggest(hist, space, np.random.default_rng(0), tried=[{"rnn1_units": 16}])


def test_ei_vanishes_at_observed_point():
    x = np.linspace(0, 1, 8)[:, None]
    y = np.sin(5 * x[:, 0])
    gp = GaussianProcess().fit(x, y, np.random.default_rng(0))
    mu, sd = gp.predict(x)
    i = int(np.argmin(y))
    assert expected_improvement(mu[i : i + 1], sd[i : i + 1], y.min())[0] < 1e-3 * y.std()


def test_posterior_mean_within_two_sd(rng):
    for _ in range(10):
        X = rng.random((15, 3))
        y = np.sin(3 * X).sum(1) + 0.01 * rng.standard_normal(15)
        gp = GaussianProcess().fit(X, y, rng)
        mu, sd = gp.predict(X)
        assert np.all(np.abs(mu - y) <= 2 * sd)


def test_ei_oracle():
    from scipy.stats import norm

    mu, sd, best = np.array([0.2]), np.array([0.5]), 0.5
    z = (best - mu) / sd
    assert expected_improvement(mu, sd, best)[0] == pytest.approx(((best - mu) * norm.cdf(z) + sd * norm.pdf(z))[0])


def test_search_no_duplicates_on_grid_and_reproducible():
    a = run_search(bowl, SMALL, n_trials=20, seed=4, seeds=[])
    b = run_search(bowl, SMALL, n_trials=20, seed=4, seeds=[])
    pa = [t.params for t in a.trials]
    assert all(p in SMALL for p in pa)
    assert len({tuple(p.values()) for p in pa}) == 20
    assert pa == [t.params for t in b.trials]
    assert [t.objective for t in a.trials] == [t.objective for t in b.trials]


def test_test_metric_never_steers():
    noisy = lambda p, i: (bowl(p, i)[0], float(np.random.default_rng(i).random()))
    a = run_search(bowl, SMALL, n_trials=15, seed=1, seeds=[])
    b = run_search(noisy, SMALL, n_trials=15, seed=1, seeds=[])
    assert [t.params for t in a.trials] == [t.params for t in b.trials]
    assert not hasattr(Observation({}, 0.0), "test_metric")


def test_resume_from_ledger(tmp_path):
    full = run_search(bowl, SMALL, n_trials=12, seed=2, seeds=[], ledger=tmp_path / "full.jsonl")
    part = tmp_path / "part.jsonl"
    run_search(bowl, SMALL, n_trials=7, seed=2, seeds=[], ledger=part)
    calls = []
    resumed = run_search(lambda p, i: calls.append(i) or bowl(p, i), SMALL, n_trials=12, seed=2, seeds=[], ledger=part)
    assert calls == list(range(7, 12))
    assert [t.params for t in resumed.trials] == [t.params for t in full.trials]
    lines = part.read_text().splitlines()
    assert len(lines) == 12 and [json.loads(l)["index"] for l in lines] == list(range(12))


def test_failed_trials_recorded_and_skipped():
    bad = {"em_size": 40, "rnn1_units": 8}

    def objective(p, i):
        if p == bad:
            raise RuntimeError("diverged")
        return bowl(p, i)

    rep = run_search(objective, SMALL, n_trials=10, seed=0, seeds=[HyperParams(40, 8, 8)])
    assert rep.trials[0].status == "failed" and "diverged" in rep.trials[0].error
    assert rep.trials[0].objective is None
    assert sum(t.params == bad for t in rep.trials) == 1
    assert rep.best.status == "ok"


def test_trial_json_round_trip():
    t = Trial(3, {"em_size": 10}, 0.5, 0.7, 1.25, source="seed")
    assert Trial.from_json(t.to_json()) == t
    assert t.observation(maximize=True).loss == -0.5


def test_val_test_correlation(rng):
    mk = lambda v, t: [Trial(i, {}, a, b) for i, (a, b) in enumerate(zip(v, t))]
    x = rng.standard_normal(10)
    assert val_test_correlation(mk(x, x))[0] == pytest.approx(1.0, abs=1e-12)
    assert val_test_correlation(mk(x, -x))[0] == pytest.approx(-1.0, abs=1e-12)
    v, t = rng.standard_normal((2, 50))
    r, rows = val_test_correlation(mk(v, t))
    assert r == pytest.approx(np.corrcoef(v, t)[0, 1], abs=1e-12)
    assert scatter_csv(rows).splitlines()[0] == "validation,test" and len(scatter_csv(rows).splitlines()) == 51
    with pytest.raises(metrics.MetricError):
        val_test_correlation(mk([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]))
    with pytest.raises(metrics.MetricError):
        val_test_correlation(mk([1.0, 2.0], [1.0, 2.0]))
