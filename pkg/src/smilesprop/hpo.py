"""Sequential GP-EI search over the discrete architecture grid."""
from dataclasses import asdict, dataclass, field
import csv
import io
import itertools
import json
import logging
import math
from pathlib import Path
import time

import numpy as np

from . import metrics
from .gp import GaussianProcess, expected_improvement
from .models import CONV_GRID, EM_GRID, RNN_GRID, ArchClass, HyperParams
from .seeding import derive_seed

log = logging.getLogger(__name__)

SEED_UNITS = (8, 16, 32, 64, 128, 256)
SEED_EM = 40
SEED_CONV = 16
FULL_CANDIDATE_LIMIT = 10**6
N_RANDOM_CANDIDATES = 10**4


class SearchError(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchSpace:
    """Named discrete dimensions; ``fixed`` fills parameters that are not searched."""

    arch: ArchClass
    dims: tuple  # ((name, (v0, v1, ...)), ...)
    fixed: tuple = ()

    @classmethod
    def for_arch(cls, arch):
        arch = ArchClass(arch)
        dims = [("em_size", tuple(EM_GRID))]
        if arch.has_conv:
            dims.append(("conv_filters", tuple(CONV_GRID)))
        dims += [("rnn1_units", tuple(RNN_GRID)), ("rnn2_units", tuple(RNN_GRID))]
        return cls(arch, tuple(dims))

    @property
    def names(self):
        return [n for n, _ in self.dims]

    @property
    def sizes(self):
        return [len(v) for _, v in self.dims]

    @property
    def cardinality(self):
        return math.prod(self.sizes)

    def __contains__(self, params):
        return set(params) == set(self.names) and all(params[n] in vals for n, vals in self.dims)

    def to_index(self, params):
        """Mixed-radix flat index of an on-grid point."""
        flat = 0
        for name, vals in self.dims:
            flat = flat * len(vals) + vals.index(params[name])
        return flat

    def from_index(self, flat):
        out = {}
        for name, vals in reversed(self.dims):
            flat, pos = divmod(int(flat), len(vals))
            out[name] = vals[pos]
        return {n: out[n] for n in self.names}

    def positions(self, flat):
        """(n, d) per-dimension positions for an array of flat indices."""
        flat = np.asarray(flat, dtype=np.int64)
        pos = np.empty((len(flat), len(self.dims)), dtype=np.int64)
        for j in range(len(self.dims) - 1, -1, -1):
            flat, pos[:, j] = np.divmod(flat, self.sizes[j])
        return pos

    def normalize_positions(self, pos):
        denom = np.array([max(s - 1, 1) for s in self.sizes], dtype=np.float64)
        return pos / denom

    def normalize(self, params_list):
        pos = np.array([[vals.index(p[n]) for n, vals in self.dims] for p in params_list], dtype=np.float64)
        return self.normalize_positions(pos.reshape(len(params_list), len(self.dims)))

    def hyperparams(self, params):
        full = {**dict(self.fixed), **params}
        return HyperParams(
            em_size=full["em_size"],
            rnn1_units=full["rnn1_units"],
            rnn2_units=full["rnn2_units"],
            conv_filters=full.get("conv_filters") if self.arch.has_conv else None,
        )


def seed_trials(arch):
    arch = ArchClass(arch)
    conv = SEED_CONV if arch.has_conv else None
    return [HyperParams(SEED_EM, u, u, conv) for u in SEED_UNITS]


def _as_params(space, hp):
    d = {k: v for k, v in asdict(hp).items() if k in space.names}
    return {n: d[n] for n in space.names}


@dataclass(frozen=True)
class Observation:
    """What the surrogate is allowed to see: parameters and the value being minimized."""

    params: dict
    loss: float


@dataclass
class Trial:
    index: int
    params: dict
    objective: float = None  # validation metric in its natural sign
    test_metric: float = None
    wall_time: float = 0.0
    status: str = "ok"
    source: str = "gp"
    error: str = None

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line):
        return cls(**json.loads(line))

    def observation(self, maximize):
        return Observation(self.params, -self.objective if maximize else self.objective)


def _candidates(space, incumbent_flat, rng):
    if space.cardinality <= FULL_CANDIDATE_LIMIT:
        return np.arange(space.cardinality, dtype=np.int64)
    rand = rng.integers(0, space.cardinality, N_RANDOM_CANDIDATES)
    base = space.positions([incumbent_flat])[0]
    neigh = []
    for step in itertools.product((-1, 0, 1), repeat=len(space.dims)):
        pos = base + np.array(step)
        if np.all(pos >= 0) and np.all(pos < space.sizes):
            flat = 0
            for j, p in enumerate(pos):
                flat = flat * space.sizes[j] + int(p)
            neigh.append(flat)
    return np.unique(np.concatenate([rand, np.array(neigh, dtype=np.int64)]))


def suggest(history, space, rng, tried=()):
    """Next grid point (a params dict) from completed ``history`` (Observations).

    ``tried`` lists every parameter set already attempted, including failed
    ones, so they are never proposed again.
    """
    tried_flat = {space.to_index(p) for p in tried} | {space.to_index(o.params) for o in history}
    remaining = space.cardinality - len(tried_flat)
    if remaining <= 0:
        raise SearchError("search grid exhausted")
    if remaining == 1:
        flat = next(i for i in range(space.cardinality) if i not in tried_flat)
        return space.from_index(flat)
    if len(history) < 2:
        while True:
            flat = int(rng.integers(space.cardinality))
            if flat not in tried_flat:
                return space.from_index(flat)
    X = space.normalize([o.params for o in history])
    y = np.array([o.loss for o in history])
    gp = GaussianProcess().fit(X, y, rng)
    incumbent = history[int(np.argmin(y))].params
    cand = _candidates(space, space.to_index(incumbent), rng)
    cand = cand[~np.isin(cand, np.fromiter(tried_flat, dtype=np.int64))]
    mu, sd = gp.predict(space.normalize_positions(space.positions(cand).astype(np.float64)))
    ei = expected_improvement(mu, sd, y.min())
    return space.from_index(cand[int(np.argmax(ei))])


@dataclass
class SearchReport:
    arch: str
    maximize: bool
    trials: list
    best: Trial

    def table(self):
        return [asdict(t) for t in self.trials]


def _load_ledger(path):
    trials = []
    if path and Path(path).exists():
        for line in Path(path).read_text().splitlines():
            if line.strip():
                trials.append(Trial.from_json(line))
    return trials


def run_search(objective, space, n_trials=60, maximize=False, seed=0, ledger=None, seeds=None):
    """Evaluate the seed designs, then GP-EI suggestions, up to ``n_trials`` in total.

    ``objective(params, trial_index)`` returns ``(validation_metric, test_metric)``.
    A ledger file, if given, receives one JSON line per trial; existing lines
    are replayed on start so an interrupted search resumes where it stopped.
    """
    seeds = [_as_params(space, hp) for hp in (seed_trials(space.arch) if seeds is None else seeds)]
    trials = _load_ledger(ledger)
    if trials:
        log.info("resuming search from %d recorded trials", len(trials))
    fh = open(ledger, "a") if ledger else None
    try:
        while len(trials) < n_trials:
            i = len(trials)
            tried = [t.params for t in trials]
            if i < len(seeds) and seeds[i] not in tried:
                params, source = seeds[i], "seed"
            else:
                ok = [t.observation(maximize) for t in trials if t.status == "ok"]
                params = suggest(ok, space, np.random.default_rng(derive_seed(seed, "suggest", i)), tried)
                source = "gp"
            if params not in space:
                raise SearchError(f"off-grid suggestion {params}")
            t0 = time.perf_counter()
            trial = Trial(i, params, source=source)
            try:
                val, test = objective(params, i)
                trial.objective, trial.test_metric = float(val), float(test)
                if not math.isfinite(trial.objective):
                    raise ValueError(f"non-finite objective {trial.objective}")
            except Exception as exc:  # a failed trial is recorded and skipped by the surrogate
                log.warning("trial %d %s failed: %s", i, params, exc)
                trial.status, trial.error = "failed", f"{type(exc).__name__}: {exc}"
                trial.objective = trial.test_metric = None
            trial.wall_time = time.perf_counter() - t0
            trials.append(trial)
            if fh:
                fh.write(trial.to_json() + "\n")
                fh.flush()
            log.info("trial %d %s %s -> %s", i, source, params, trial.objective)
    finally:
        if fh:
            fh.close()
    ok = [t for t in trials if t.status == "ok"]
    if not ok:
        raise SearchError("every trial failed")
    best = (max if maximize else min)(ok, key=lambda t: t.objective)
    return SearchReport(space.arch.value, maximize, trials, best)


def random_search(objective, space, n_trials=60, maximize=False, seed=0):
    """Baseline: uniformly random distinct grid points."""
    rng = np.random.default_rng(derive_seed(seed, "random"))
    flats = rng.choice(space.cardinality, size=n_trials, replace=False)
    trials = []
    for i, flat in enumerate(flats):
        params = space.from_index(flat)
        val, test = objective(params, i)
        trials.append(Trial(i, params, float(val), float(test), source="random"))
    best = (max if maximize else min)(trials, key=lambda t: t.objective)
    return SearchReport(space.arch.value, maximize, trials, best)


def val_test_correlation(trials):
    """Pearson r between validation and test metrics, plus the scatter rows."""
    rows = [(t.objective, t.test_metric) for t in trials if t.status == "ok" and t.test_metric is not None]
    if len(rows) < 3:
        raise metrics.MetricError("need at least 3 completed trials with both metrics")
    val, test = map(np.array, zip(*rows))
    return metrics.pearson(val, test), rows


def scatter_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["validation", "test"])
    w.writerows((repr(v), repr(t)) for v, t in rows)
    return buf.getvalue()


@dataclass
class TrainingObjective:
    """Trains one model per trial on a re-seeded single fold; the test set is frozen per search."""

    dataset: object
    arch: ArchClass
    space: SearchSpace
    cfg: object
    test_fraction: float
    seed: int = 0
    n_folds: int = 5
    stratify_task: int = None
    dtype: object = np.float32
    test: list = field(default=None, init=False)

    def __post_init__(self):
        from .codec import build_vocabulary, encode_batch
        from .data import SplitPlan, make_splits

        plan = SplitPlan(self.test_fraction, self.n_folds, derive_seed(self.seed, "test"), self.stratify_task)
        self.test = make_splits(self.dataset, plan).test
        self.vocab = build_vocabulary(self.dataset.smiles)
        self.encoded = encode_batch(self.dataset.smiles, self.vocab)

    def __call__(self, params, trial_index):
        from dataclasses import replace

        from .data import resplit_fold
        from .models import build_model
        from .trainer import evaluate_metric, train

        fold = resplit_fold(
            self.dataset, self.test, derive_seed(self.seed, "split", trial_index), self.n_folds, self.stratify_task
        )
        hp = self.space.hyperparams(params)
        model = build_model(
            self.arch, hp, self.dataset.task, self.vocab, derive_seed(self.seed, "init", trial_index), dtype=self.dtype
        )
        cfg = replace(self.cfg, seed=derive_seed(self.seed, "shuffle", trial_index))
        model, hist = train(model, fold, self.dataset, cfg, encoded=self.encoded, log_every=0)
        rows = np.asarray(self.test, dtype=int)
        test_metric = evaluate_metric(self.dataset.task, model.predict(self.encoded[rows]), self.dataset.labels[rows])
        return hist.val_metric[hist.best_epoch - 1], test_metric
