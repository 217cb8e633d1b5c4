"""Command-line entry point: encode, train, eval, hpo, explain."""
import argparse
from collections import Counter
import copy
from dataclasses import asdict, fields
import json
import logging
import os
from pathlib import Path
import sys

import numpy as np

from .codec import SEQ_LEN, build_vocabulary, encode_batch
from .data import DataError, SplitPlan, load_csv
from .models import ArchClass, HyperParams, HyperParamError, TaskSpec, check_hyperparams
from .nn.checkpoint import CheckpointError
from .trainer import TrainConfig

log = logging.getLogger("smilesprop")

OUT_ENV = "SMILESPROP_OUT"
EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
INTERPRETABILITY_REFERENCE = 0.88

DEFAULTS = {
    "dataset": {"path": None, "task_type": "regression", "targets": None, "smiles_column": "smiles"},
    "arch": "cnn-gru",
    "hp": {"em_size": None, "conv_filters": None, "rnn1_units": None, "rnn2_units": None},
    "on_grid": True,
    "train": asdict(TrainConfig()),
    "split": {"test_fraction": None, "n_folds": 5, "stratify_task": None, "folds": None},
    "search": {"n_trials": 60},
    "explainer": {
        "base": None, "load": None, "time_limit": None, "learning_rate": 1e-2, "min_learning_rate": 1e-6,
        "plateau_patience": 10, "plateau_threshold": 1e-4, "batch_size": 32, "max_epochs": 200,
        "width": 64, "n_layers": 20, "fidelity": "absolute", "target": "label",
        "soluble_cutoff": -1.0, "insoluble_cutoff": -5.0,
    },
    "model": None,
    "out_dir": None,
    "seed": 0,
    "precision": 32,
}


class UsageError(ValueError):
    pass


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in out:
            raise UsageError(f"unknown config key {k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            for kk in v:
                if kk not in out[k]:
                    raise UsageError(f"unknown config key {k}.{kk!r}")
            out[k].update(v)
        else:
            out[k] = v
    return out


def _set(cfg, dotted, value):
    if value is None:
        return
    head, _, tail = dotted.partition(".")
    if tail:
        cfg[head][tail] = value
    else:
        cfg[head] = value


FLAG_MAP = {
    "dataset": "dataset.path", "task": "dataset.task_type", "targets": "dataset.targets",
    "arch": "arch", "em": "hp.em_size", "conv": "hp.conv_filters", "rnn1": "hp.rnn1_units", "rnn2": "hp.rnn2_units",
    "epochs": "train.max_epochs", "patience": "train.patience", "batch_size": "train.batch_size",
    "test_fraction": "split.test_fraction", "n_folds": "split.n_folds", "folds": "split.folds",
    "trials": "search.n_trials", "base": "explainer.base", "explainer": "explainer.load",
    "explainer_epochs": "explainer.max_epochs", "width": "explainer.width", "time_limit": "explainer.time_limit",
    "model": "model", "out_dir": "out_dir", "seed": "seed", "precision": "precision",
}


def resolve_config(args):
    """Defaults, then the --config file, then explicit flags."""
    cfg = copy.deepcopy(DEFAULTS)
    config = getattr(args, "config", None)
    if config:
        try:
            loaded = json.loads(Path(config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"config {config} must hold a JSON object")
        loaded.pop("command", None)  # present in resolved_config.json
        cfg = _merge(cfg, loaded)
    for flag, dotted in FLAG_MAP.items():
        _set(cfg, dotted, getattr(args, flag, None))
    if getattr(args, "off_grid", False):
        cfg["on_grid"] = False
    if cfg["out_dir"] is None:
        cfg["out_dir"] = str(Path(os.environ.get(OUT_ENV, "runs")) / args.command)
    return cfg


def validate_config(cfg, command):
    """Check every field the command will use before any work starts."""
    if cfg["precision"] not in (32, 64):
        raise UsageError("precision must be 32 or 64")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise UsageError("seed must be a non-negative integer")
    needs_data = command in ("encode", "train", "eval", "hpo", "explain")
    if needs_data and not cfg["dataset"]["path"]:
        raise UsageError("--dataset is required")
    try:
        TaskSpec(cfg["dataset"]["task_type"], len(cfg["dataset"]["targets"] or [None]))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if command in ("train", "hpo"):
        try:
            arch = ArchClass(cfg["arch"])
        except ValueError:
            raise UsageError(f"unknown architecture {cfg['arch']!r}") from None
        try:
            TrainConfig(**cfg["train"])
        except (TypeError, ValueError) as exc:
            raise UsageError(f"train config: {exc}") from None
        tf = cfg["split"]["test_fraction"]
        if tf is not None and not 0 < tf < 1:
            raise UsageError("test_fraction must lie in (0, 1)")
        if cfg["split"]["n_folds"] < 2:
            raise UsageError("n_folds must be at least 2")
    if command == "train":
        hp = cfg["hp"]
        missing = [k for k in ("em_size", "rnn1_units", "rnn2_units") if hp[k] is None]
        if arch.has_conv and hp["conv_filters"] is None:
            missing.append("conv_filters")
        if missing:
            raise UsageError("missing hyperparameter(s): " + ", ".join(missing))
        try:
            check_hyperparams(arch, _hyperparams(cfg), on_grid=cfg["on_grid"])
        except HyperParamError as exc:
            raise UsageError(str(exc)) from None
    if command == "hpo" and cfg["search"]["n_trials"] < 1:
        raise UsageError("trials must be positive")
    if command == "eval" and not cfg["model"]:
        raise UsageError("--model is required")
    if command == "explain":
        if not cfg["explainer"]["base"]:
            raise UsageError("--base is required")
        _explainer_config(cfg)


def _hyperparams(cfg):
    hp = dict(cfg["hp"])
    if not ArchClass(cfg["arch"]).has_conv:
        hp["conv_filters"] = None
    return HyperParams(**hp)


def _explainer_config(cfg):
    from .explainer import ExplainerConfig

    names = {f.name for f in fields(ExplainerConfig)}
    try:
        return ExplainerConfig(**{k: v for k, v in cfg["explainer"].items() if k in names}, seed=cfg["seed"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"explainer config: {exc}") from None


def _dtype(cfg):
    return np.float64 if cfg["precision"] == 64 else np.float32


def _dataset(cfg):
    d = cfg["dataset"]
    targets = d["targets"]
    if not targets:
        import csv

        with open(d["path"], newline="", encoding="utf-8") as fh:
            header = next(csv.reader(fh), [])
        targets = [c for c in header if c != d["smiles_column"]]
    task = TaskSpec(d["task_type"], len(targets) if targets else 1)
    return load_csv(d["path"], task, targets=targets, smiles_column=d["smiles_column"])


def _test_fraction(cfg, task):
    tf = cfg["split"]["test_fraction"]
    if tf is not None:
        return tf
    return 1 / 6 if task.is_classification else 1 / 10


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_encode(cfg, out):
    ds = _dataset(cfg)
    vocab = build_vocabulary(ds.smiles)
    vocab.save(out / "vocab.txt")
    np.save(out / "encoded.npy", encode_batch(ds.smiles, vocab))
    lengths = Counter(len(s) for s in ds.smiles)
    stats = {
        "accepted": len(ds),
        "dropped": ds.dropped,
        "vocab_size": vocab.size,
        "window": SEQ_LEN,
        "length_histogram": {str(k): lengths[k] for k in sorted(lengths)},
    }
    _write_json(out / "encoding_stats.json", stats)
    print(f"accepted {stats['accepted']}, dropped {stats['dropped']}, vocabulary size {vocab.size}")
    return EXIT_OK


def cmd_train(cfg, out):
    from .trainer import run_cv

    ds = _dataset(cfg)
    plan = SplitPlan(_test_fraction(cfg, ds.task), cfg["split"]["n_folds"], cfg["seed"], cfg["split"]["stratify_task"])
    report = run_cv(
        ds, plan, ArchClass(cfg["arch"]), _hyperparams(cfg), TrainConfig(**cfg["train"]), seed=cfg["seed"],
        out_dir=out, dtype=_dtype(cfg), on_grid=cfg["on_grid"], folds=cfg["split"]["folds"],
    )
    print(
        f"{report.metric}: validation {report.mean_val_metric:.4f} +/- {report.std_val_metric:.4f}, "
        f"test {report.mean_test_metric:.4f} over {len(report.folds)} fold(s)"
    )
    return EXIT_OK


def cmd_eval(cfg, out):
    from .models import load_model
    from .trainer import evaluate_metric, metric_name

    path = Path(cfg["model"])
    if not path.exists():
        raise FileNotFoundError(f"model checkpoint not found: {path}")
    model = load_model(path, dtype=_dtype(cfg))
    ds = _dataset(cfg)
    pred = model.predict(ds.smiles)
    lines = ["smiles," + ",".join(f"pred_{i}" for i in range(pred.shape[1]))]
    lines += [s + "," + ",".join(repr(float(v)) for v in row) for s, row in zip(ds.smiles, pred)]
    (out / "predictions.csv").write_text("\n".join(lines) + "\n")
    result = {"n": len(ds), "metric": metric_name(model.task)}
    if np.any(~np.isnan(ds.labels)):
        result["value"] = evaluate_metric(model.task, pred, ds.labels)
    _write_json(out / "eval.json", result)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_hpo(cfg, out):
    from .hpo import SearchSpace, TrainingObjective, run_search, scatter_csv, val_test_correlation

    ds = _dataset(cfg)
    arch = ArchClass(cfg["arch"])
    space = SearchSpace.for_arch(arch)
    objective = TrainingObjective(
        ds, arch, space, TrainConfig(**cfg["train"]), _test_fraction(cfg, ds.task), seed=cfg["seed"],
        n_folds=cfg["split"]["n_folds"], stratify_task=cfg["split"]["stratify_task"], dtype=_dtype(cfg),
    )
    report = run_search(
        objective, space, cfg["search"]["n_trials"], maximize=ds.task.is_classification,
        seed=cfg["seed"], ledger=out / "trials.jsonl",
    )
    summary = {"arch": arch.value, "cardinality": space.cardinality, "best": asdict(report.best)}
    ok = [t for t in report.trials if t.status == "ok"]
    rows = [(t.objective, t.test_metric) for t in ok]
    try:
        summary["val_test_pearson"], rows = val_test_correlation(report.trials)
    except ValueError as exc:
        summary["val_test_pearson"] = None
        log.warning("no validation/test correlation: %s", exc)
    (out / "scatter.csv").write_text(scatter_csv(rows))
    _write_json(out / "search_report.json", summary)
    print(f"best trial {report.best.index}: {report.best.params} -> {report.best.objective:.4f}")
    return EXIT_OK


def cmd_explain(cfg, out, identity_check=False):
    from .explainer import ExplainerNet, interpretability_accuracy, masked_forward, train_explainer
    from .models import load_model

    ecfg = cfg["explainer"]
    path = Path(ecfg["base"])
    if not path.exists():
        raise FileNotFoundError(f"base checkpoint not found: {path}")
    base = load_model(path, dtype=_dtype(cfg))
    ds = _dataset(cfg)
    if identity_check:
        idx = encode_batch(ds.smiles, base.vocab)
        plain = base.predict(idx)
        masked = np.concatenate(
            [masked_forward(base, idx[s : s + 128], np.ones(idx[s : s + 128].shape)).data for s in range(0, len(idx), 128)]
        )
        err = float(np.max(np.abs(masked - plain))) if len(idx) else 0.0
        _write_json(out / "identity_mask_check.json", {"max_abs_difference": err, "tolerance": 1e-6})
        print(f"identity mask check: max |difference| = {err:.3g}")
        return EXIT_OK if err <= 1e-6 else EXIT_FAILURE
    if ecfg["load"]:
        net = ExplainerNet.load(ecfg["load"], dtype=base.dtype)
    else:
        net, hist = train_explainer(base, ds, _explainer_config(cfg), time_limit=ecfg["time_limit"])
        net.save(out / "explainer.ckpt")
        _write_json(out / "explainer_history.json", asdict(hist))
    report = interpretability_accuracy(net, base, ds, ecfg["soluble_cutoff"], ecfg["insoluble_cutoff"])
    (out / "attributions.jsonl").write_text(report.to_jsonl())
    summary = {**report.summary(), "reference_accuracy": INTERPRETABILITY_REFERENCE}
    _write_json(out / "interpretability.json", summary)
    print(
        f"top-3 accuracy per character {report.accuracy:.3f}, per molecule {report.molecule_accuracy:.3f} "
        f"(reference {INTERPRETABILITY_REFERENCE})"
    )
    return EXIT_OK


def build_parser():
    # SUPPRESS keeps a subcommand's unset globals from masking ones given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    g = common.add_argument_group("global options")
    g.add_argument("--config", help="JSON run configuration")
    g.add_argument("--seed", type=int, help="master seed (default 0)")
    g.add_argument("--out-dir", help=f"output directory (default ${OUT_ENV}/<command> or runs/<command>)")
    g.add_argument("--precision", type=int, choices=(32, 64))
    g.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--dataset", help="CSV with a smiles column")
    data.add_argument("--task", choices=("regression", "classification"))
    data.add_argument("--targets", nargs="+", help="target column(s); default: every non-smiles column")

    arch = argparse.ArgumentParser(add_help=False)
    arch.add_argument("--arch", choices=[a.value for a in ArchClass])
    arch.add_argument("--epochs", type=int)
    arch.add_argument("--patience", type=int)
    arch.add_argument("--batch-size", type=int)
    arch.add_argument("--test-fraction", type=float)
    arch.add_argument("--n-folds", type=int)

    p = argparse.ArgumentParser(prog="smilesprop", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("encode", parents=[common, data], help="build the vocabulary and encode a dataset")

    t = sub.add_parser("train", parents=[common, data, arch], help="k-fold cross-validated training")
    t.add_argument("--em", type=int)
    t.add_argument("--conv", type=int)
    t.add_argument("--rnn1", type=int)
    t.add_argument("--rnn2", type=int)
    t.add_argument("--folds", type=int, nargs="+", help="train only these fold indices")
    t.add_argument("--off-grid", action="store_true", help="allow layer sizes outside the search grid")

    e = sub.add_parser("eval", parents=[common, data], help="predict with a saved model")
    e.add_argument("--model")

    h = sub.add_parser("hpo", parents=[common, data, arch], help="GP-EI architecture search")
    h.add_argument("--trials", type=int)

    x = sub.add_parser("explain", parents=[common, data], help="train an explainer and score attributions")
    x.add_argument("--base", help="base model checkpoint")
    x.add_argument("--explainer", help="load a trained explainer instead of training one")
    x.add_argument("--explainer-epochs", type=int)
    x.add_argument("--width", type=int)
    x.add_argument("--time-limit", type=float, help="seconds")
    x.add_argument("--identity-mask-check", action="store_true")
    return p


COMMANDS = {"encode": cmd_encode, "train": cmd_train, "eval": cmd_eval, "hpo": cmd_hpo, "explain": cmd_explain}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, format="%(asctime)s %(name)s %(message)s"
    )
    try:
        cfg = resolve_config(args)
        validate_config(cfg, args.command)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"smilesprop {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(cfg["out_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "resolved_config.json", {**cfg, "command": args.command})
        if args.command == "explain":
            return cmd_explain(cfg, out, identity_check=args.identity_mask_check)
        return COMMANDS[args.command](cfg, out)
    except (OSError, DataError, CheckpointError, ValueError, RuntimeError) as exc:
        print(f"smilesprop {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
