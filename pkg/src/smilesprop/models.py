"""Architecture templates: embedding -> [conv1d + ReLU] -> 2 bidirectional RNN layers -> dense head."""
from dataclasses import asdict, dataclass
from enum import Enum
import hashlib

import numpy as np

from .codec import SEQ_LEN, EncodedSmiles, Vocabulary, encode_batch
from .nn import checkpoint
from .nn import functional as F
from .nn.init import glorot_uniform
from .nn.tensor import Tensor, no_grad

EM_GRID = range(10, 61, 10)
RNN_GRID = range(8, 385, 8)
CONV_GRID = range(4, 193, 4)
CONV_WIDTH = 3
MODEL_FORMAT = "smilesprop-model"


class ArchClass(str, Enum):
    GRU = "gru"
    LSTM = "lstm"
    CNN_GRU = "cnn-gru"
    CNN_LSTM = "cnn-lstm"

    @property
    def has_conv(self):
        return self in (ArchClass.CNN_GRU, ArchClass.CNN_LSTM)

    @property
    def cell(self):
        return "gru" if self in (ArchClass.GRU, ArchClass.CNN_GRU) else "lstm"

    @property
    def gates(self):
        return 3 if self.cell == "gru" else 4


@dataclass(frozen=True)
class HyperParams:
    em_size: int
    rnn1_units: int
    rnn2_units: int
    conv_filters: int = None

    def as_tuple(self):
        return (self.em_size, self.conv_filters, self.rnn1_units, self.rnn2_units)


@dataclass(frozen=True)
class TaskSpec:
    task_type: str
    n_outputs: int = 1

    def __post_init__(self):
        if self.task_type not in ("classification", "regression"):
            raise ValueError(f"task_type must be classification or regression, got {self.task_type!r}")
        if self.n_outputs < 1:
            raise ValueError("n_outputs must be positive")

    @property
    def is_classification(self):
        return self.task_type == "classification"


class HyperParamError(ValueError):
    pass


class VocabularyMismatchError(ValueError):
    pass


def check_hyperparams(arch, hp, on_grid=True):
    arch = ArchClass(arch)
    if arch.has_conv and hp.conv_filters is None:
        raise HyperParamError(f"{arch.value} needs conv_filters")
    if not arch.has_conv and hp.conv_filters is not None:
        raise HyperParamError(f"{arch.value} has no convolution; conv_filters must be None")
    sizes = [hp.em_size, hp.rnn1_units, hp.rnn2_units] + ([hp.conv_filters] if arch.has_conv else [])
    if any(int(s) != s or s < 1 for s in sizes):
        raise HyperParamError(f"layer sizes must be positive integers: {hp}")
    if on_grid:
        if hp.em_size not in EM_GRID:
            raise HyperParamError(f"em_size {hp.em_size} is off the grid 10..60 step 10")
        for name in ("rnn1_units", "rnn2_units"):
            if getattr(hp, name) not in RNN_GRID:
                raise HyperParamError(f"{name} {getattr(hp, name)} is off the grid 8..384 step 8")
        if arch.has_conv and hp.conv_filters not in CONV_GRID:
            raise HyperParamError(f"conv_filters {hp.conv_filters} is off the grid 4..192 step 4")


def parameter_count(arch, hp, task, vocab_size):
    """Closed-form parameter total."""
    arch = ArchClass(arch)
    g = arch.gates
    total = vocab_size * hp.em_size
    width = hp.em_size
    if arch.has_conv:
        total += CONV_WIDTH * hp.em_size * hp.conv_filters + hp.conv_filters
        width = hp.conv_filters
    total += 2 * g * hp.rnn1_units * (width + hp.rnn1_units + 1)
    total += 2 * g * hp.rnn2_units * (2 * hp.rnn1_units + hp.rnn2_units + 1)
    total += (2 * hp.rnn2_units + 1) * task.n_outputs
    return total


class Model:
    def __init__(self, arch, hp, task, vocab, params):
        self.arch = ArchClass(arch)
        self.hp = hp
        self.task = task
        self.vocab = vocab
        self.params = params

    @property
    def dtype(self):
        return self.params["embedding"].dtype

    def parameters(self):
        return list(self.params.values())

    def n_parameters(self):
        return int(sum(p.data.size for p in self.params.values()))

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def checksum(self):
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False

    def astype(self, dtype):
        params = {k: Tensor(p.data.astype(dtype), requires_grad=p.requires_grad, name=k) for k, p in self.params.items()}
        return Model(self.arch, self.hp, self.task, self.vocab, params)

    def embed(self, indices):
        return F.embedding(indices, self.params["embedding"])

    def forward_from_embedding(self, x):
        p = self.params
        if self.arch.has_conv:
            x = F.relu(F.conv1d(x, p["conv.kernel"], p["conv.bias"]))
        cell = F.gru if self.arch.cell == "gru" else F.lstm
        fw = cell(x, p["rnn1.fw.wx"], p["rnn1.fw.wh"], p["rnn1.fw.b"], reverse=False)
        bw = cell(x, p["rnn1.bw.wx"], p["rnn1.bw.wh"], p["rnn1.bw.b"], reverse=True)
        x = F.concat([fw, bw], axis=-1)
        fw = cell(x, p["rnn2.fw.wx"], p["rnn2.fw.wh"], p["rnn2.fw.b"], reverse=False)
        bw = cell(x, p["rnn2.bw.wx"], p["rnn2.bw.wh"], p["rnn2.bw.b"], reverse=True)
        last = F.concat([F.select(fw, x.shape[1] - 1, axis=1), F.select(bw, 0, axis=1)], axis=-1)
        act = "sigmoid" if self.task.is_classification else "linear"
        return F.dense(last, p["head.w"], p["head.b"], act)

    def forward(self, indices):
        return self.forward_from_embedding(self.embed(indices))

    def _indices(self, batch):
        if isinstance(batch, np.ndarray) and batch.dtype.kind in "iu":
            idx = batch
        else:
            batch = list(batch)
            if batch and isinstance(batch[0], EncodedSmiles):
                idx = np.stack([e.indices for e in batch])
                expected = encode_batch([e.source for e in batch], self.vocab)
                if not np.array_equal(idx, expected):
                    raise VocabularyMismatchError("encodings were not produced with this model's vocabulary")
            else:
                idx = encode_batch(batch, self.vocab)
        if idx.ndim != 2 or idx.shape[1] != SEQ_LEN:
            raise ValueError(f"expected (n, {SEQ_LEN}) token indices, got shape {idx.shape}")
        if idx.size and idx.max() >= self.vocab.size:
            raise VocabularyMismatchError(f"token index {idx.max()} exceeds vocabulary size {self.vocab.size}")
        return idx

    def predict(self, batch, batch_size=128):
        """Inference over SMILES strings, EncodedSmiles or an index array; returns (n, n_outputs)."""
        idx = self._indices(batch)
        # BLAS may round a row differently depending on where it sits in the
        # batch, so each distinct input is run once and broadcast back.
        uniq, inverse = np.unique(idx, axis=0, return_inverse=True)
        out = np.empty((len(uniq), self.task.n_outputs), dtype=self.dtype)
        with no_grad():
            for start in range(0, len(uniq), batch_size):
                out[start : start + batch_size] = self.forward(uniq[start : start + batch_size]).data
        return out[inverse.reshape(-1)]

    def metadata(self):
        return {
            "format": MODEL_FORMAT,
            "arch": self.arch.value,
            "hp": asdict(self.hp),
            "task": asdict(self.task),
            "vocab": list(self.vocab.chars),
            "vocab_sha256": self.vocab.digest(),
        }


def build_model(arch, hp, task, vocab, seed, dtype=np.float32, on_grid=True):
    arch = ArchClass(arch)
    check_hyperparams(arch, hp, on_grid=on_grid)
    rng = np.random.default_rng(seed)
    g = arch.gates
    params = {}

    def add(name, value):
        params[name] = Tensor(value, requires_grad=True, name=name)

    add("embedding", glorot_uniform(rng, (vocab.size, hp.em_size), vocab.size, hp.em_size, dtype))
    width = hp.em_size
    if arch.has_conv:
        fan_in, fan_out = CONV_WIDTH * hp.em_size, CONV_WIDTH * hp.conv_filters
        add("conv.kernel", glorot_uniform(rng, (CONV_WIDTH, hp.em_size, hp.conv_filters), fan_in, fan_out, dtype))
        add("conv.bias", np.zeros(hp.conv_filters, dtype))
        width = hp.conv_filters
    for layer, units, cin in (("rnn1", hp.rnn1_units, width), ("rnn2", hp.rnn2_units, 2 * hp.rnn1_units)):
        for direction in ("fw", "bw"):
            prefix = f"{layer}.{direction}"
            add(f"{prefix}.wx", glorot_uniform(rng, (cin, g * units), cin, g * units, dtype))
            add(f"{prefix}.wh", glorot_uniform(rng, (units, g * units), units, g * units, dtype))
            bias = np.zeros(g * units, dtype)
            if arch.cell == "lstm":
                bias[units : 2 * units] = 1.0
            add(f"{prefix}.b", bias)
    add("head.w", glorot_uniform(rng, (2 * hp.rnn2_units, task.n_outputs), 2 * hp.rnn2_units, task.n_outputs, dtype))
    add("head.b", np.zeros(task.n_outputs, dtype))
    return Model(arch, hp, task, vocab, params)


def save_model(model, path):
    checkpoint.save(path, model.state_dict(), model.metadata())


def load_model(path, dtype=np.float32):
    arrays, meta = checkpoint.load(path)
    if meta.get("format") != MODEL_FORMAT:
        raise checkpoint.CheckpointError(f"{path} is not a model container")
    vocab = Vocabulary(tuple(meta["vocab"]))
    if vocab.digest() != meta["vocab_sha256"]:
        raise checkpoint.ChecksumError("embedded vocabulary does not match its recorded hash")
    hp = HyperParams(**meta["hp"])
    task = TaskSpec(**meta["task"])
    params = {k: Tensor(v.astype(dtype), requires_grad=True, name=k) for k, v in arrays.items()}
    return Model(meta["arch"], hp, task, vocab, params)
