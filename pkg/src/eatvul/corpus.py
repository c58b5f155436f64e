"""Labeled source functions: loading, tokenization, vocabulary and splits."""

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DatasetParseError, DatasetValidationError
from .lexer import supported, tokenize as lex_tokens

VULNERABLE = "vulnerable"
NONVULNERABLE = "nonvulnerable"
LABELS = (VULNERABLE, NONVULNERABLE)
LANGUAGES = ("c", "cpp", "java")

PAD_INDEX = 0
UNK_INDEX = 1
PAD = "<pad>"
UNK = "<unk>"


@dataclass(frozen=True)
class CodeSample:
    id: str
    source: str
    label: str
    language: str = "c"
    tokens: tuple = ()

    @property
    def is_vulnerable(self):
        return self.label == VULNERABLE

    def to_record(self):
        return {"id": self.id, "source": self.source, "label": self.label,
                "language": self.language}


def tokenize(source, language="c"):
    """Deterministic lexical split of ``source``; literals become NUM/STR."""
    return lex_tokens(source, language)


def tokenized(sample):
    if sample.tokens:
        return sample
    return replace(sample, tokens=tuple(tokenize(sample.source, sample.language)))


def tokenize_all(samples):
    return [tokenized(s) for s in samples]


def _check_record(obj, lineno):
    if not isinstance(obj, dict):
        raise DatasetParseError("record is not a JSON object", lineno)
    for key in ("id", "source", "label", "language"):
        if key not in obj:
            raise DatasetValidationError(f"missing field {key!r}", lineno)
    if obj["label"] not in LABELS:
        raise DatasetValidationError(f"unknown label {obj['label']!r}", lineno)
    if obj["language"] not in LANGUAGES:
        raise DatasetValidationError(f"unknown language {obj['language']!r}", lineno)
    if not isinstance(obj["source"], str) or not isinstance(obj["id"], str):
        raise DatasetValidationError("id and source must be strings", lineno)


def load_dataset(path):
    """Read a JSON-lines dataset. Blank lines are skipped; nothing else is."""
    samples = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(f"malformed JSON ({exc.msg})", lineno) from None
            _check_record(obj, lineno)
            if obj["id"] in seen:
                raise DatasetValidationError(f"duplicate id {obj['id']!r}", lineno)
            seen.add(obj["id"])
            samples.append(CodeSample(obj["id"], obj["source"], obj["label"], obj["language"]))
    return samples


def save_dataset(samples, path):
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record(), sort_keys=True) + "\n")


def label_counts(samples):
    counts = Counter(s.label for s in samples)
    return {label: counts.get(label, 0) for label in LABELS}


@dataclass(frozen=True)
class Vocabulary:
    token_to_index: dict
    doc_freq: dict
    min_doc_freq: int = 1

    def __len__(self):
        return len(self.token_to_index) + 2

    def __contains__(self, token):
        return token in self.token_to_index

    def index(self, token):
        return self.token_to_index.get(token, UNK_INDEX)

    def encode(self, tokens):
        return [self.token_to_index.get(t, UNK_INDEX) for t in tokens]

    def tokens(self):
        """Index-ordered token list including the reserved entries."""
        out = [PAD, UNK] + [None] * len(self.token_to_index)
        for tok, idx in self.token_to_index.items():
            out[idx] = tok
        return out

    def digest(self):
        payload = json.dumps(sorted(self.token_to_index.items()), separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()

    def to_json(self):
        return {"min_doc_freq": self.min_doc_freq,
                "tokens": self.tokens()[2:],
                "doc_freq": [self.doc_freq[t] for t in self.tokens()[2:]]}

    @classmethod
    def from_json(cls, obj):
        tokens = obj["tokens"]
        return cls({t: i + 2 for i, t in enumerate(tokens)},
                   dict(zip(tokens, obj["doc_freq"])), obj.get("min_doc_freq", 1))


def build_vocab(samples, min_doc_freq=1):
    if min_doc_freq < 1:
        raise ValueError("min_doc_freq must be >= 1")
    df = Counter()
    for s in samples:
        toks = s.tokens or tokenize(s.source, s.language)
        df.update(set(toks))
    kept = sorted(t for t, c in df.items() if c >= min_doc_freq)
    return Vocabulary({t: i + 2 for i, t in enumerate(kept)},
                      {t: df[t] for t in kept}, min_doc_freq)


@dataclass(frozen=True)
class DatasetSplit:
    train: list
    eval: list
    test: list
    fractions: tuple = (0.70, 0.15, 0.15)
    seed: int = 0

    def ids(self):
        return {name: [s.id for s in getattr(self, name)] for name in ("train", "eval", "test")}

    @classmethod
    def from_ids(cls, samples, ids, fractions=(0.70, 0.15, 0.15), seed=0):
        by_id = {s.id: s for s in samples}
        return cls(*[[by_id[i] for i in ids[name]] for name in ("train", "eval", "test")],
                   tuple(fractions), seed)


def _apportion(n, fractions):
    """Largest-remainder rounding of ``n`` into parts proportional to ``fractions``."""
    raw = [n * f for f in fractions]
    sizes = [int(np.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split(samples, seed, fractions=(0.70, 0.15, 0.15)):
    """Stratified deterministic train/eval/test split."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    if len(samples) < 3:
        raise ValueError("need at least 3 samples to split")
    total = _apportion(len(samples), fractions)
    rng = np.random.default_rng(seed)
    groups = {}
    for label in LABELS:
        members = sorted((s for s in samples if s.label == label), key=lambda s: s.id)
        groups[label] = [members[i] for i in rng.permutation(len(members))]
    # per-class quotas; the majority class absorbs the rounding so totals stay exact
    minority = min(LABELS, key=lambda lab: (len(groups[lab]), lab))
    majority = NONVULNERABLE if minority == VULNERABLE else VULNERABLE
    quota = {minority: _apportion(len(groups[minority]), fractions)}
    quota[majority] = [t - q for t, q in zip(total, quota[minority])]
    if any(q < 0 for q in quota[majority]):
        quota[majority] = _apportion(len(groups[majority]), fractions)
    parts = [[], [], []]
    for label in LABELS:
        start = 0
        for k, size in enumerate(quota[label]):
            parts[k].extend(groups[label][start:start + size])
            start += size
    parts = [sorted(p, key=lambda s: s.id) for p in parts]
    return DatasetSplit(parts[0], parts[1], parts[2], tuple(fractions), seed)


def check_language(language):
    if not supported(language):
        raise ValueError(f"unsupported language: {language!r}")
