"""Character-level SMILES encoding.

Strings are mapped character by character onto a corpus-derived vocabulary
and laid out in a fixed window: 10 pad slots, a 250-slot content zone
(content left-aligned, remainder padded) and 10 more pad slots.
"""
from dataclasses import dataclass
from enum import Enum
import hashlib

import numpy as np

MAX_LEN = 250
FLANK = 10
SEQ_LEN = FLANK + MAX_LEN + FLANK
PAD = 0
PAD_TOKEN = "<PAD>"


class EncodingError(ValueError):
    pass


class EmptyCorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    chars: tuple

    def __post_init__(self):
        if len(set(self.chars)) != len(self.chars):
            raise ValueError("vocabulary characters must be unique")
        if any(len(c) != 1 for c in self.chars):
            raise ValueError("vocabulary entries must be single characters")
        object.__setattr__(self, "_index", {c: i + 1 for i, c in enumerate(self.chars)})

    @property
    def char_to_index(self):
        return dict(self._index)

    @property
    def pad_index(self):
        return PAD

    @property
    def size(self):
        return len(self.chars) + 1

    def index(self, ch):
        return self._index[ch]

    def __contains__(self, ch):
        return ch in self._index

    def to_text(self):
        lines = [f"{PAD}\t{PAD_TOKEN}"]
        lines += [f"{i}\t{c}" for i, c in enumerate(self.chars, start=1)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        chars = []
        for lineno, line in enumerate(text.split("\n")):
            if not line:
                continue
            idx, _, ch = line.partition("\t")
            if int(idx) != lineno:
                raise ValueError(f"vocabulary line {lineno} has index {idx}")
            if lineno == 0:
                if ch != PAD_TOKEN:
                    raise ValueError("vocabulary line 0 must be the pad entry")
                continue
            chars.append(ch)
        return cls(tuple(chars))

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8", newline="\n") as fh:
            return cls.from_text(fh.read())

    def digest(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


def build_vocabulary(corpus):
    corpus = list(corpus)
    if not corpus:
        raise EmptyCorpusError("cannot build a vocabulary from an empty corpus")
    if any(not s for s in corpus):
        raise EmptyCorpusError("corpus contains an empty string")
    return Vocabulary(tuple(sorted(set("".join(corpus)))))


@dataclass(frozen=True)
class EncodedSmiles:
    indices: np.ndarray
    source: str

    @property
    def content_span(self):
        return (FLANK, FLANK + len(self.source))


def encode(smiles, vocab):
    if not smiles:
        raise EncodingError("empty SMILES string")
    if len(smiles) > MAX_LEN:
        raise EncodingError(f"SMILES has {len(smiles)} characters, limit is {MAX_LEN}")
    out = np.zeros(SEQ_LEN, dtype=np.int32)
    for i, ch in enumerate(smiles):
        if ch not in vocab:
            raise EncodingError(f"character {ch!r} at position {i} is not in the vocabulary")
        out[FLANK + i] = vocab.index(ch)
    out.flags.writeable = False
    return EncodedSmiles(out, smiles)


def encode_batch(smiles_list, vocab):
    """Stack encodings into an (n, 270) int32 array."""
    return np.stack([encode(s, vocab).indices for s in smiles_list]) if smiles_list else np.zeros((0, SEQ_LEN), np.int32)


def decode(indices, vocab):
    """Map indices back to characters, dropping pads."""
    return "".join(vocab.chars[i - 1] for i in np.asarray(indices) if i != PAD)


@dataclass
class ValidityReport:
    valid: bool
    reasons: list

    def __bool__(self):
        return self.valid


def validate_smiles(smiles):
    """Cheap well-formedness checks; never raises."""
    reasons = []
    if not isinstance(smiles, str) or not smiles:
        return ValidityReport(False, ["empty string"])
    bad = sorted({c for c in smiles if not (32 <= ord(c) < 127)})
    if bad:
        reasons.append("non-printable or non-ASCII characters: " + ", ".join(repr(c) for c in bad))
    for open_, close, label in (("(", ")", "round"), ("[", "]", "square")):
        depth = 0
        for c in smiles:
            if c == open_:
                depth += 1
            elif c == close:
                depth -= 1
                if depth < 0:
                    break
        if depth != 0:
            reasons.append(f"unbalanced {label} bracket")
    # ring closures: bare digits outside [...] atoms, plus %nn two-digit labels
    counts = {}
    in_atom = False
    i = 0
    while i < len(smiles):
        c = smiles[i]
        if c == "[":
            in_atom = True
        elif c == "]":
            in_atom = False
        elif not in_atom:
            if c == "%" and smiles[i + 1 : i + 3].isdigit():
                label = smiles[i : i + 3]
                counts[label] = counts.get(label, 0) + 1
                i += 3
                continue
            if c.isdigit():
                counts[c] = counts.get(c, 0) + 1
        i += 1
    odd = sorted(k for k, v in counts.items() if v % 2)
    if odd:
        reasons.append("ring-closure digit(s) appearing an odd number of times: " + ", ".join(odd))
    return ValidityReport(not reasons, reasons)


class HydroClass(str, Enum):
    HYDROPHILIC = "Hydrophilic"
    HYDROPHOBIC = "Hydrophobic"
    NEUTRAL = "Neutral"


_HYDROPHILIC = set("OoNn")
_HYDROPHOBIC = set("CcFI")


def classify_chars(smiles):
    """Per-character hydrophilic/hydrophobic labels (Cl and Br count as halogens)."""
    labels = []
    i = 0
    while i < len(smiles):
        pair = smiles[i : i + 2]
        if pair in ("Cl", "Br"):
            labels += [HydroClass.HYDROPHOBIC, HydroClass.HYDROPHOBIC]
            i += 2
            continue
        c = smiles[i]
        if c in _HYDROPHILIC:
            labels.append(HydroClass.HYDROPHILIC)
        elif c in _HYDROPHOBIC:
            labels.append(HydroClass.HYDROPHOBIC)
        else:
            labels.append(HydroClass.NEUTRAL)
        i += 1
    return labels
