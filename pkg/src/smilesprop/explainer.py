"""Explanation-mask network trained against a frozen base model, and attribution scoring."""
from dataclasses import asdict, dataclass, field
import json
import logging
import math
import time

import numpy as np

from . import metrics
from .codec import FLANK, PAD, EncodedSmiles, HydroClass, classify_chars, encode, encode_batch
from .nn import checkpoint
from .nn import functional as F
from .nn.init import lecun_normal
from .nn.optim import Adam
from .nn.kernels import flush_denormals
from .nn.tensor import Tensor, no_grad

log = logging.getLogger(__name__)

L2_WEIGHT = 1e-6
ENTROPY_WEIGHT = 0.05
LOG_FLOOR = 1e-30
EXPLAINER_FORMAT = "smilesprop-explainer"
SOFTPLUS_INV_1 = math.log(math.e - 1.0)  # softplus(x) = 1 at this x


class ExplainerError(RuntimeError):
    pass


class FrozenWeightsError(ExplainerError):
    pass


class ExplainerNet:
    """Width-1 conv stem, ``n_layers`` conv3+SELU layers with an identity skip
    around every pair, then conv1 -> batch norm -> softplus (one value per position)."""

    def __init__(self, em_size, width=64, n_layers=20, seed=0, dtype=np.float32):
        if n_layers % 2:
            raise ValueError("n_layers must be even (residual blocks hold two layers)")
        rng = np.random.default_rng(seed)
        self.em_size, self.width, self.n_layers = em_size, width, n_layers
        p = {}

        def add(name, value):
            p[name] = Tensor(np.asarray(value, dtype=dtype), requires_grad=True, name=name)

        add("stem.kernel", lecun_normal(rng, (1, em_size, width), em_size, dtype))
        add("stem.bias", np.zeros(width))
        for i in range(n_layers):
            kernel = lecun_normal(rng, (3, width, width), 3 * width, dtype)
            # second conv of each block starts at zero: every block is the identity at init
            add(f"conv{i}.kernel", kernel if i % 2 == 0 else np.zeros_like(kernel))
            add(f"conv{i}.bias", np.zeros(width))
        add("head.kernel", lecun_normal(rng, (1, width, 1), width, dtype))
        add("head.bias", np.zeros(1))
        add("bn.gamma", np.ones(1))
        add("bn.beta", np.full(1, SOFTPLUS_INV_1))
        self.params = p
        self.running_mean = np.zeros(1)
        self.running_var = np.ones(1)

    @property
    def dtype(self):
        return self.params["stem.kernel"].dtype

    def parameters(self):
        return list(self.params.values())

    def __call__(self, emb, training=False):
        """(B, L, em) embedding -> (B, L) non-negative mask."""
        p = self.params
        x = F.conv1d(emb, p["stem.kernel"], p["stem.bias"])
        for i in range(0, self.n_layers, 2):
            h = F.selu(F.conv1d(x, p[f"conv{i}.kernel"], p[f"conv{i}.bias"]))
            h = F.selu(F.conv1d(h, p[f"conv{i + 1}.kernel"], p[f"conv{i + 1}.bias"]))
            x = F.add(x, h)
        h = F.conv1d(x, p["head.kernel"], p["head.bias"])
        h = F.batch_norm(h, p["bn.gamma"], p["bn.beta"], self.running_mean, self.running_var, training)
        out = F.softplus(h)
        return F.reshape(out, out.shape[:2])

    def state(self):
        arrays = {k: v.data.copy() for k, v in self.params.items()}
        arrays["bn.running_mean"] = self.running_mean.copy()
        arrays["bn.running_var"] = self.running_var.copy()
        return arrays

    def save(self, path):
        meta = {"format": EXPLAINER_FORMAT, "em_size": self.em_size, "width": self.width, "n_layers": self.n_layers}
        checkpoint.save(path, self.state(), meta)

    @classmethod
    def load(cls, path, dtype=np.float32):
        arrays, meta = checkpoint.load(path)
        if meta.get("format") != EXPLAINER_FORMAT:
            raise checkpoint.CheckpointError(f"{path} is not an explainer container")
        net = cls(meta["em_size"], meta["width"], meta["n_layers"], dtype=dtype)
        for k, t in net.params.items():
            t.data = arrays[k].astype(dtype)
        net.running_mean = arrays["bn.running_mean"].astype(np.float64)
        net.running_var = arrays["bn.running_var"].astype(np.float64)
        return net


def apply_mask(emb, mask):
    """Scale each position's embedding vector by its mask value."""
    m = mask.raw if isinstance(mask, Mask) else mask
    m = m if isinstance(m, Tensor) else Tensor(np.asarray(m, dtype=emb.dtype))
    if np.any(m.data < 0):
        raise ValueError("mask values must be non-negative")
    if m.shape != emb.shape[: m.ndim]:
        raise ValueError(f"mask shape {m.shape} does not match embedding {emb.shape}")
    return F.mul(emb, F.reshape(m, m.shape + (1,)))


def masked_forward(base, indices, mask):
    """Base-model prediction with ``mask`` applied to its embedding output."""
    return base.forward_from_embedding(apply_mask(base.embed(indices), mask))


@dataclass
class MaskLossTerms:
    fidelity: Tensor
    l2: Tensor
    entropy: Tensor
    total: Tensor

    def values(self):
        return {k: float(getattr(self, k).data) for k in ("fidelity", "l2", "entropy", "total")}


def mask_entropy(mask, content):
    """Per-row entropy of the mask normalized over content positions; content is a 0/1 array."""
    m = F.mul(mask, content)
    p = F.div(m, F.sum(m, axis=1, keepdims=True))
    plogp = F.mul(p, F.log(F.clip(p, LOG_FLOOR, 1.0)))
    return F.neg(F.sum(plogp, axis=1))


def mask_loss(pred, target, mask, content, fidelity="absolute", l2_weight=L2_WEIGHT, entropy_weight=ENTROPY_WEIGHT):
    """Batch-mean of fidelity + l2_weight * ||mask||_2 + entropy_weight * H(mask).

    The logged ``l2`` and ``entropy`` terms already carry their weights, so
    ``total`` equals their sum with ``fidelity``.
    """
    target = np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    diff = F.sub(pred, target)
    err = F.abs(diff) if fidelity == "absolute" else F.square(diff)
    fid = F.mean(err)
    m = F.mul(mask, content)
    l2 = F.mul(F.mean(F.sqrt(F.sum(F.square(m), axis=1))), l2_weight)
    ent = F.mul(F.mean(mask_entropy(mask, content)), entropy_weight)
    return MaskLossTerms(fid, l2, ent, F.add(F.add(fid, l2), ent))


@dataclass
class ExplainerConfig:
    learning_rate: float = 1e-2
    min_learning_rate: float = 1e-6
    plateau_patience: int = 10
    plateau_threshold: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 200
    width: int = 64
    n_layers: int = 20
    fidelity: str = "absolute"  # or "squared"
    target: str = "label"  # or "prediction": match the base model's unmasked output
    seed: int = 0

    def __post_init__(self):
        if self.fidelity not in ("absolute", "squared"):
            raise ValueError("fidelity must be 'absolute' or 'squared'")
        if self.target not in ("label", "prediction"):
            raise ValueError("target must be 'label' or 'prediction'")


@dataclass
class ExplainerHistory:
    loss: list = field(default_factory=list)
    terms: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    converged: bool = False


def train_explainer(base, dataset, cfg=None, explainer=None, time_limit=None):
    """Fit an explainer against the frozen ``base``; returns (explainer, history).

    The learning rate is divided by 10 whenever the epoch training loss has not
    improved by more than ``plateau_threshold`` (relative) for
    ``plateau_patience`` epochs; a plateau at the floor ends training.
    """
    with flush_denormals():
        return _train_explainer(base, dataset=dataset, cfg=cfg, explainer=explainer, time_limit=time_limit)


def _train_explainer(base, dataset, cfg=None, explainer=None, time_limit=None):
    cfg = cfg or ExplainerConfig()
    if base.task.is_classification or base.task.n_outputs != 1:
        raise ExplainerError("the explainer needs a single-output regression base model")
    base.freeze()
    before = base.checksum()
    net = explainer or ExplainerNet(base.hp.em_size, cfg.width, cfg.n_layers, cfg.seed, dtype=base.dtype)
    idx = encode_batch(dataset.smiles, base.vocab)
    if cfg.target == "label":
        target = dataset.labels[:, :1].astype(base.dtype)
    else:
        target = base.predict(idx)
    rows = np.flatnonzero(~np.isnan(target[:, 0]))
    with no_grad():
        emb_all = np.concatenate([base.embed(idx[s : s + 256]).data for s in range(0, len(idx), 256)])
    content_all = (idx != PAD).astype(base.dtype)
    opt = Adam(net.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    hist = ExplainerHistory()
    best, wait, drops = math.inf, 0, 0
    t_start = time.perf_counter()
    for epoch in range(1, cfg.max_epochs + 1):
        order = rows[rng.permutation(len(rows))]
        total, count, term_sums = 0.0, 0, {}
        for start in range(0, len(order), cfg.batch_size):
            b = order[start : start + cfg.batch_size]
            if len(b) < 2:  # batch norm needs two samples
                continue
            opt.zero_grad()
            emb = Tensor(emb_all[b])
            mask = net(emb, training=True)
            pred = base.forward_from_embedding(apply_mask(emb, mask))
            terms = mask_loss(pred, target[b], mask, content_all[b], cfg.fidelity)
            vals = terms.values()
            if not math.isfinite(vals["total"]):
                raise ExplainerError(f"non-finite explainer loss at epoch {epoch}")
            terms.total.backward()
            opt.step()
            total += vals["total"] * len(b)
            count += len(b)
            for k, v in vals.items():
                term_sums[k] = term_sums.get(k, 0.0) + v * len(b)
        if base.checksum() != before:
            raise FrozenWeightsError("base-model weights changed during explainer training")
        loss = total / count
        hist.loss.append(loss)
        hist.terms.append({k: v / count for k, v in term_sums.items()})
        hist.lr.append(opt.lr)
        if epoch == 1 or epoch % 10 == 0:
            log.info("explainer epoch %d loss %.5f lr %.0e", epoch, loss, opt.lr)
        if loss < best * (1.0 - cfg.plateau_threshold):
            best, wait = loss, 0
        else:
            wait += 1
        if wait >= cfg.plateau_patience:
            if opt.lr <= cfg.min_learning_rate:
                hist.converged = True
                break
            drops += 1
            # from the base rate each time so the levels are exact decades
            opt.lr = max(cfg.learning_rate / 10**drops, cfg.min_learning_rate)
            wait = 0
        if time_limit and time.perf_counter() - t_start > time_limit:
            log.info("explainer time limit reached after %d epochs", epoch)
            break
    if base.checksum() != before:
        raise FrozenWeightsError("base-model weights changed during explainer training")
    # checkpoints hold float32; round now so a reloaded explainer gives identical masks
    net.running_mean = net.running_mean.astype(np.float32).astype(np.float64)
    net.running_var = net.running_var.astype(np.float32).astype(np.float64)
    return net, hist


@dataclass
class Mask:
    raw: np.ndarray  # (270,) non-negative
    source: EncodedSmiles

    @property
    def content(self):
        lo, hi = self.source.content_span
        return self.raw[lo:hi]

    @property
    def normalized(self):
        c = self.content.astype(np.float64)
        return c / c.sum()

    def entropy(self):
        p = self.normalized
        p = p[p > 0]
        return float(-(p * np.log(p)).sum())


def compute_masks(explainer, base, smiles_list, batch_size=64):
    encoded = [encode(s, base.vocab) for s in smiles_list]
    idx = np.stack([e.indices for e in encoded]) if encoded else np.zeros((0, FLANK), np.int32)
    out = []
    with no_grad():
        for start in range(0, len(idx), batch_size):
            raw = explainer(base.embed(idx[start : start + batch_size]), training=False).data
            if not np.all(np.isfinite(raw)):
                raise ExplainerError("non-finite mask values")
            out.extend(Mask(r.copy(), e) for r, e in zip(raw, encoded[start : start + batch_size]))
    return out


def compute_mask(explainer, base, smiles):
    return compute_masks(explainer, base, [smiles])[0]


def top_k_chars(mask, k=3):
    """[(content position, character, normalized weight)] for the k largest weights."""
    w = mask.normalized
    if k > len(w):
        raise ValueError(f"k={k} exceeds content length {len(w)}")
    order = np.argsort(-w, kind="stable")[:k]
    return [(int(i), mask.source.source[i], float(w[i])) for i in order]


@dataclass
class InterpretabilityReport:
    accuracy: float  # per character
    molecule_accuracy: float  # majority (>= 2 of 3) per molecule
    n_soluble: int
    n_insoluble: int
    records: list

    def summary(self):
        d = asdict(self)
        d.pop("records")
        return d

    def to_jsonl(self):
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def interpretability_accuracy(explainer, base, dataset, soluble_cutoff=-1.0, insoluble_cutoff=-5.0, k=3):
    """Share of top-k characters whose hydro class matches the molecule's solubility group.

    Molecules shorter than k contribute all of their characters.
    """
    y = dataset.labels[:, 0]
    soluble = np.flatnonzero(y > soluble_cutoff)
    insoluble = np.flatnonzero(y < insoluble_cutoff)
    if len(soluble) == 0 and len(insoluble) == 0:
        raise metrics.MetricError("no molecules beyond either solubility cutoff")
    rows = np.concatenate([soluble, insoluble])
    smiles = [dataset.smiles[i] for i in rows]
    masks = compute_masks(explainer, base, smiles)
    preds = base.predict([m.source for m in masks])[:, 0]
    records, hits, scored, mol_hits = [], 0, 0, 0
    for j, (i, mask) in enumerate(zip(rows, masks)):
        expected = HydroClass.HYDROPHILIC if y[i] > soluble_cutoff else HydroClass.HYDROPHOBIC
        classes = classify_chars(mask.source.source)
        top = top_k_chars(mask, min(k, len(classes)))
        correct = [classes[pos] == expected for pos, _, _ in top]
        hits += sum(correct)
        scored += len(correct)
        mol_hits += sum(correct) * 2 > len(correct)
        records.append({
            "smiles": mask.source.source,
            "prediction": float(preds[j]),
            "label": float(y[i]),
            "group": "soluble" if expected is HydroClass.HYDROPHILIC else "insoluble",
            "raw_mask": mask.raw.tolist(),
            "normalized_mask": mask.normalized.tolist(),
            "top": [{"position": p, "char": c, "weight": w} for p, c, w in top],
            "classes": [c.value for c in classes],
            "correct": correct,
        })
    n = len(rows)
    return InterpretabilityReport(hits / scored, mol_hits / n, len(soluble), len(insoluble), records)
