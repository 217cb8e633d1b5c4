import logging

import numpy as np
import pytest

from smilesprop.data import (
    DataError, Dataset, ResampledFold, SplitPlan, class_ratio, load_csv, make_splits, oversample_minority,
)
from smilesprop.models import TaskSpec

from .conftest import ESOL, FREESOLV

REG = TaskSpec("regression")


def synthetic(n, task=REG, rng=None, labels=None):
    smiles = ["C" * (i % 200 + 1) + "O" * (i // 200 + 1) for i in range(n)]
    if labels is None:
        labels = np.arange(n, dtype=float)[:, None]
    return Dataset(smiles, np.asarray(labels, dtype=float).reshape(n, -1), task)


def test_load_small_file(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("smiles,y\nCCO,1.5\nc1ccccc1,-2\nCC(=O)O,0\n")
    ds = load_csv(p, REG)
    assert len(ds) == 3 and ds.dropped == 0
    assert ds.labels[:, 0].tolist() == [1.5, -2.0, 0.0]


def test_overlong_row_dropped(tmp_path, caplog):
    p = tmp_path / "d.csv"
    p.write_text(f"smiles,y\nCCO,1\n{'C' * 251},2\n{'C' * 250},3\n")
    with caplog.at_level(logging.INFO):
        ds = load_csv(p, REG)
    assert ds.dropped == 1 and len(ds) == 2
    assert "dropped 1" in caplog.text


def test_missing_labels_and_errors(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("smiles,a,b\nCCO,1,\nCC,,0\n")
    ds = load_csv(p, TaskSpec("classification", 2))
    assert ds.label_mask.tolist() == [[True, False], [False, True]]
    (tmp_path / "e.csv").write_text("mol,y\nCCO,1\n")
    with pytest.raises(DataError, match="smiles"):
        load_csv(tmp_path / "e.csv", REG)
    (tmp_path / "f.csv").write_text("smiles,y\nCCO,1\nCC,abc\n")
    with pytest.raises(DataError, match="row 3"):
        load_csv(tmp_path / "f.csv", REG)


def test_esol_size():
    assert len(load_csv(ESOL, REG)) == 1128


def test_freesolv_split_arithmetic():
    ds = load_csv(FREESOLV, REG)
    splits = make_splits(ds, SplitPlan(1 / 10, 5, seed=0))
    n = len(ds) - len(splits.collapsed)
    assert len(splits.test) == int(np.floor(n / 10 + 0.5))
    for f in splits.folds:
        assert set(f.train).isdisjoint(f.validation) and set(f.train).isdisjoint(splits.test)
        assert len(f.train) + len(f.validation) == n - len(splits.test)


def test_split_sizes_n1000():
    splits = make_splits(synthetic(1000), SplitPlan(1 / 10, 5, seed=3))
    assert len(splits.test) == 100
    assert [len(f.validation) for f in splits.folds] == [180] * 5
    vals = [set(f.validation) for f in splits.folds]
    assert set().union(*vals) | set(splits.test) == set(range(1000))
    assert sum(map(len, vals)) == 900


def test_splits_deterministic():
    ds = synthetic(300)
    a = make_splits(ds, SplitPlan(1 / 6, 5, seed=11)).to_json()
    b = make_splits(ds, SplitPlan(1 / 6, 5, seed=11)).to_json()
    c = make_splits(ds, SplitPlan(1 / 6, 5, seed=12)).to_json()
    assert a == b and a != c


def test_duplicates_collapsed_no_leakage():
    ds = synthetic(200)
    ds = Dataset(ds.smiles + ds.smiles[:20], np.vstack([ds.labels, ds.labels[:20]]), REG)
    splits = make_splits(ds, SplitPlan(1 / 10, 5, seed=0))
    assert splits.collapsed == list(range(200, 220))
    for f in splits.folds:
        groups = [{ds.smiles[i] for i in g} for g in (splits.test, f.validation, f.train)]
        assert groups[0].isdisjoint(groups[1]) and groups[0].isdisjoint(groups[2]) and groups[1].isdisjoint(groups[2])
        assert set(splits.test) | set(f.train) | set(f.validation) == set(range(200))
        assert f.extra == []


def test_classification_stratified_and_oversampled(rng):
    n = 600
    y = (rng.random(n) < 0.1).astype(float)
    ds = synthetic(n, TaskSpec("classification"), labels=y)
    splits = make_splits(ds, SplitPlan(1 / 6, 5, seed=1))
    assert len(splits.test) == 100
    assert abs(y[splits.test].mean() - y.mean()) < 0.03
    for f in splits.folds:
        assert 0.5 <= class_ratio(f, y) <= 2
        assert set(f.extra) <= {i for i in f.train if y[i] == 1}
        assert set(f.extra).isdisjoint(f.validation)
        assert all(f.training_multiset[pos] == orig for pos, orig in f.provenance.items())


def test_stratify_single_class_errors():
    ds = synthetic(100, TaskSpec("classification"), labels=np.ones(100))
    with pytest.raises(DataError):
        make_splits(ds, SplitPlan(1 / 6, 5, seed=0))


def test_too_small_dataset():
    with pytest.raises(DataError):
        make_splits(synthetic(49), SplitPlan(1 / 10, 5))


@pytest.mark.parametrize(
    "n_major,n_minor,extra_each,final",
    [(90, 10, 8, (90, 90)), (50, 50, 0, (50, 50)), (70, 30, 1, (70, 60))],
)
def test_oversample_examples(n_major, n_minor, extra_each, final):
    labels = np.array([0.0] * n_major + [1.0] * n_minor)
    fold = oversample_minority(ResampledFold(list(range(len(labels))), []), labels)
    assert len(fold.extra) == extra_each * n_minor
    ms = labels[fold.training_multiset]
    assert ((ms == 0).sum(), (ms == 1).sum()) == final
    assert 0.5 <= class_ratio(fold, labels) <= 2


def test_oversample_zero_class():
    with pytest.raises(DataError):
        oversample_minority(ResampledFold([0, 1, 2], []), np.zeros(3))
