"""Dataset loading, test/cross-validation splits and minority oversampling."""
import csv
from dataclasses import dataclass, field
import json
import logging
import math

import numpy as np

from .codec import MAX_LEN, validate_smiles
from .models import TaskSpec

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    smiles: list
    labels: np.ndarray  # (n, n_outputs) float64, NaN = missing
    task: TaskSpec
    name: str = ""
    target_columns: tuple = ()
    dropped: int = 0

    def __len__(self):
        return len(self.smiles)

    @property
    def label_mask(self):
        return ~np.isnan(self.labels)

    def subset(self, indices, name=None):
        idx = np.asarray(indices, dtype=int)
        return Dataset(
            [self.smiles[i] for i in idx],
            self.labels[idx],
            self.task,
            name or self.name,
            self.target_columns,
        )


def load_csv(path, task, targets=None, smiles_column="smiles", name=None):
    """Read a CSV with a ``smiles`` column and numeric target columns (blank = missing).

    Rows whose SMILES fails validation or exceeds 250 characters are dropped
    and counted in ``Dataset.dropped``.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if smiles_column not in header:
            raise DataError(f"{path}: no {smiles_column!r} column (header: {header})")
        targets = list(targets) if targets else [c for c in header if c != smiles_column]
        missing = [t for t in targets if t not in header]
        if missing:
            raise DataError(f"{path}: target column(s) {missing} not found")
        if len(targets) != task.n_outputs:
            raise DataError(f"{path}: {len(targets)} target columns but the task expects {task.n_outputs}")
        smiles, labels, dropped = [], [], 0
        for rowno, row in enumerate(reader, start=2):
            s = (row[smiles_column] or "").strip()
            values = []
            for col in targets:
                cell = (row[col] or "").strip()
                if cell == "":
                    values.append(math.nan)
                    continue
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: row {rowno}, column {col!r}: {cell!r} is not numeric") from None
            if len(s) > MAX_LEN or not validate_smiles(s):
                dropped += 1
                continue
            smiles.append(s)
            labels.append(values)
    if dropped:
        log.info("%s: dropped %d rows (invalid SMILES or longer than %d)", path, dropped, MAX_LEN)
    arr = np.array(labels, dtype=np.float64).reshape(len(labels), len(targets))
    return Dataset(smiles, arr, task, name or str(path), tuple(targets), dropped)


@dataclass(frozen=True)
class SplitPlan:
    test_fraction: float
    n_folds: int = 5
    seed: int = 0
    stratify_task: int = None  # classification only; None = most imbalanced task


@dataclass
class ResampledFold:
    train: list  # original training indices
    validation: list
    extra: list = field(default_factory=list)  # duplicates appended by oversampling, as original indices

    @property
    def training_multiset(self):
        return list(self.train) + list(self.extra)

    @property
    def provenance(self):
        """Position in the training multiset -> original dataset index, for duplicates."""
        n = len(self.train)
        return {n + k: i for k, i in enumerate(self.extra)}


@dataclass
class Splits:
    test: list
    folds: list
    collapsed: list  # indices dropped as exact-duplicate SMILES
    plan: SplitPlan

    def to_json(self):
        return json.dumps(
            {
                "seed": self.plan.seed,
                "test_fraction": self.plan.test_fraction,
                "n_folds": self.plan.n_folds,
                "test": self.test,
                "collapsed": self.collapsed,
                "folds": [{"train": f.train, "validation": f.validation, "extra": f.extra} for f in self.folds],
            },
            sort_keys=True,
        )


def round_half_up(x):
    return int(math.floor(x + 0.5))


def most_imbalanced_task(labels):
    best, best_ratio = 0, -1.0
    for t in range(labels.shape[1]):
        col = labels[:, t]
        col = col[~np.isnan(col)]
        pos, neg = int((col == 1).sum()), int((col == 0).sum())
        ratio = max(pos, neg) / max(min(pos, neg), 1)
        if ratio > best_ratio:
            best, best_ratio = t, ratio
    return best


def _unique_indices(smiles):
    seen, keep, collapsed = set(), [], []
    for i, s in enumerate(smiles):
        if s in seen:
            collapsed.append(i)
        else:
            seen.add(s)
            keep.append(i)
    return keep, collapsed


def make_splits(dataset, plan):
    """Hold out a test set, then partition the rest into ``n_folds`` validation sets.

    Classification data is stratified on one task and each fold's training
    part is oversampled; regression folds are left as they are.
    """
    rng = np.random.default_rng(plan.seed)
    keep, collapsed = _unique_indices(dataset.smiles)
    n = len(keep)
    if n < 10 * plan.n_folds:
        raise DataError(f"{n} unique molecules; need at least {10 * plan.n_folds} for {plan.n_folds} folds")
    n_test = round_half_up(n * plan.test_fraction)
    keep = np.array(keep)
    if dataset.task.is_classification:
        task = plan.stratify_task if plan.stratify_task is not None else most_imbalanced_task(dataset.labels)
        col = dataset.labels[keep, task]
        present = col[~np.isnan(col)]
        if len(np.unique(present)) < 2:
            raise DataError(f"cannot stratify: task {task} has a single class")
        # order molecules stratum by stratum so round-robin dealing keeps class ratios
        strata = [keep[np.isnan(col)]] + [keep[col == c] for c in np.unique(present)]
        order = np.concatenate([rng.permutation(s) for s in strata])
        test_mask = np.zeros(len(order), bool)
        test_mask[np.round(np.linspace(0, len(order) - 1, n_test)).astype(int) if n_test else []] = True
        test = np.sort(order[test_mask])
        rest = order[~test_mask]
    else:
        task = None
        order = rng.permutation(keep)
        test = np.sort(order[:n_test])
        rest = order[n_test:]
    folds = [_fold(rest, k, plan.n_folds, dataset, task) for k in range(plan.n_folds)]
    return Splits(test.tolist(), folds, collapsed, plan)


def _fold(rest, k, n_folds, dataset, task):
    val = np.sort(rest[k::n_folds])
    train = np.sort(np.concatenate([rest[j::n_folds] for j in range(n_folds) if j != k]))
    fold = ResampledFold(train.tolist(), val.tolist())
    if task is not None:
        fold = oversample_minority(fold, dataset.labels[:, task])
    return fold


def resplit_fold(dataset, test, seed, n_folds=5, stratify_task=None):
    """A fresh train/validation fold over everything outside the frozen ``test`` indices.

    Validation takes 1/``n_folds`` of the remaining unique molecules.
    """
    rng = np.random.default_rng(seed)
    keep, _ = _unique_indices(dataset.smiles)
    held = set(test)
    rest = np.array([i for i in keep if i not in held])
    task = None
    if dataset.task.is_classification:
        task = stratify_task if stratify_task is not None else most_imbalanced_task(dataset.labels)
        col = dataset.labels[rest, task]
        strata = [rest[np.isnan(col)]] + [rest[col == c] for c in np.unique(col[~np.isnan(col)])]
        rest = np.concatenate([rng.permutation(s) for s in strata])
    else:
        rest = rng.permutation(rest)
    return _fold(rest, 0, n_folds, dataset, task)


def oversample_minority(fold, labels):
    """Append round(majority/minority) - 1 extra copies of every minority training record.

    ``labels`` is the per-record binary label on the stratification task
    (NaN records are neither counted nor duplicated).
    """
    labels = np.asarray(labels)
    train = np.asarray(fold.train, dtype=int)
    y = labels[train]
    pos = train[y == 1]
    neg = train[y == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise DataError("oversampling needs both classes in the training fold")
    minority, majority = (pos, neg) if len(pos) < len(neg) else (neg, pos)
    copies = round_half_up(len(majority) / len(minority)) - 1
    extra = np.repeat(minority, copies).tolist() if copies > 0 else []
    return ResampledFold(list(fold.train), list(fold.validation), extra)


def class_ratio(fold, labels):
    y = np.asarray(labels)[np.asarray(fold.training_multiset, dtype=int)]
    pos, neg = int((y == 1).sum()), int((y == 0).sum())
    return max(pos, neg) / min(pos, neg)
