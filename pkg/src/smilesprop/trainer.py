"""Supervised training with early stopping, and k-fold cross-validation."""
import csv
from dataclasses import asdict, dataclass, field
import io
import json
import logging
import math
from pathlib import Path
import time

import numpy as np

from . import metrics
from .codec import encode_batch
from .data import make_splits
from .models import build_model, save_model
from .nn import losses
from .nn.optim import RMSprop
from .nn.kernels import flush_denormals
from .nn.tensor import Tensor, no_grad
from .seeding import derive_seed

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    rho: float = 0.9
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 250
    patience: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_metric: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    metric_name: str = ""

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", f"val_{self.metric_name or 'metric'}"])
        for e, row in enumerate(zip(self.train_loss, self.val_loss, self.val_metric), start=1):
            w.writerow([e, *(repr(float(v)) for v in row)])
        return buf.getvalue()


class EarlyStopping:
    """Tracks the best validation loss; "improvement" means strictly lower."""

    def __init__(self, patience):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = 0

    def update(self, epoch, loss):
        """Record ``loss`` for 1-based ``epoch``; returns True when training should stop."""
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_epoch = epoch
            return False
        return epoch - self.best_epoch >= self.patience


def loss_fn(model, pred, labels):
    if model.task.is_classification:
        mask = ~np.isnan(labels)
        return losses.bce(pred, np.nan_to_num(labels), mask)
    return losses.mae(pred, labels)


def metric_name(task):
    return "auc" if task.is_classification else "rmse"


def evaluate_metric(task, pred, labels):
    if task.is_classification:
        return metrics.auc(pred, labels)
    return metrics.rmse(pred, labels)


def evaluate_loss(model, idx, labels, batch_size=128):
    """Loss over a whole set (entry-weighted mean) plus the predictions."""
    pred = model.predict(idx, batch_size=batch_size)
    with no_grad():
        value = float(loss_fn(model, Tensor(pred), labels).data)
    return value, pred


def train(model, fold, dataset, cfg, encoded=None, log_every=10):
    """Train ``model`` in place on ``fold``; on return it holds the best-validation-loss weights."""
    with flush_denormals():
        return _train(model, fold=fold, dataset=dataset, cfg=cfg, encoded=encoded, log_every=log_every)


def _train(model, fold, dataset, cfg, encoded=None, log_every=10):
    idx = encode_batch(dataset.smiles, model.vocab) if encoded is None else encoded
    labels = dataset.labels.astype(model.dtype)
    train_rows = np.asarray(fold.training_multiset, dtype=int)
    val_rows = np.asarray(fold.validation, dtype=int)
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = RMSprop(params, lr=cfg.learning_rate, rho=cfg.rho, eps=cfg.eps)
    stopper = EarlyStopping(cfg.patience)
    history = TrainHistory(metric_name=metric_name(model.task))
    best_state = model.state_dict()
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = train_rows[rng.permutation(len(train_rows))]
        total, count = 0.0, 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size), start=1):
            rows = order[start : start + cfg.batch_size]
            opt.zero_grad()
            loss = loss_fn(model, model.forward(idx[rows]), labels[rows])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite training loss at epoch {epoch}, batch {b}")
            loss.backward()
            opt.step()
            total += value * len(rows)
            count += len(rows)
        val_loss, val_pred = evaluate_loss(model, idx[val_rows], labels[val_rows])
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history.train_loss.append(total / count)
        history.val_loss.append(val_loss)
        history.val_metric.append(evaluate_metric(model.task, val_pred, labels[val_rows]))
        stop = stopper.update(epoch, val_loss)
        if stopper.best_epoch == epoch:
            best_state = model.state_dict()
        if log_every and (epoch % log_every == 0 or epoch == 1):
            log.info(
                "epoch %d train %.4f val %.4f %s %.4f (%.1fs)",
                epoch, history.train_loss[-1], val_loss, history.metric_name, history.val_metric[-1],
                time.perf_counter() - t0,
            )
        if stop:
            history.stopped_early = True
            break
    history.best_epoch = stopper.best_epoch
    for name, value in best_state.items():
        model.params[name].data[...] = value
    return model, history


@dataclass
class FoldResult:
    fold: int
    best_epoch: int
    epochs_run: int
    val_loss: float
    val_metric: float
    test_metric: float
    checkpoint: str = None


@dataclass
class CVReport:
    metric: str
    folds: list
    mean_val_metric: float
    std_val_metric: float
    mean_test_metric: float
    arch: str = ""
    hp: dict = None

    def to_json(self):
        d = asdict(self)
        return json.dumps(d, indent=2, sort_keys=True)


def run_cv(dataset, plan, arch, hp, cfg, seed=0, out_dir=None, dtype=np.float32, on_grid=True, vocab=None, folds=None):
    """Train one model per fold and report validation and test metrics.

    ``seed`` is the master seed; model init and shuffling seeds are derived
    from it per fold.  With ``out_dir`` set, checkpoints, per-epoch CSVs and
    the JSON report are written there.
    """
    from .codec import build_vocabulary

    vocab = vocab or build_vocabulary(dataset.smiles)
    splits = make_splits(dataset, plan)
    encoded = encode_batch(dataset.smiles, vocab)
    test_rows = np.asarray(splits.test, dtype=int)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        vocab.save(out / "vocab.txt")
        (out / "splits.json").write_text(splits.to_json())
    results = []
    for k, fold in enumerate(splits.folds):
        if folds is not None and k not in folds:
            continue
        t0 = time.perf_counter()
        model = build_model(arch, hp, dataset.task, vocab, derive_seed(seed, "init", k), dtype=dtype, on_grid=on_grid)
        fold_cfg = TrainConfig(**{**asdict(cfg), "seed": derive_seed(seed, "shuffle", k)})
        model, hist = train(model, fold, dataset, fold_cfg, encoded=encoded)
        labels = dataset.labels
        test_pred = model.predict(encoded[test_rows])
        res = FoldResult(
            fold=k,
            best_epoch=hist.best_epoch,
            epochs_run=len(hist.val_loss),
            val_loss=hist.val_loss[hist.best_epoch - 1],
            val_metric=hist.val_metric[hist.best_epoch - 1],
            test_metric=evaluate_metric(dataset.task, test_pred, labels[test_rows]),
        )
        if out:
            path = out / f"fold{k}.model"
            save_model(model, path)
            res.checkpoint = str(path)
            (out / f"fold{k}_history.csv").write_text(hist.to_csv())
        log.info(
            "fold %d: val %s %.4f, test %.4f, best epoch %d (%.0fs)",
            k, metric_name(dataset.task), res.val_metric, res.test_metric, res.best_epoch, time.perf_counter() - t0,
        )
        results.append(res)
    vals = [r.val_metric for r in results]
    report = CVReport(
        metric=metric_name(dataset.task),
        folds=[asdict(r) for r in results],
        mean_val_metric=float(np.mean(vals)),
        std_val_metric=float(np.std(vals)),
        mean_test_metric=float(np.mean([r.test_metric for r in results])),
        arch=str(getattr(arch, "value", arch)),
        hp=asdict(hp),
    )
    if out:
        (out / "cv_report.json").write_text(report.to_json())
    return report
