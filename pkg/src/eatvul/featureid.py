"""Attention-based important-feature ranking and keyword categories."""

import enum
import json
import math
from collections import defaultdict
from dataclasses import dataclass

from .corpus import tokenized
from .errors import FeatureError
from .lexer import is_word


class KeywordCategory(str, enum.Enum):
    DATA_TYPE = "DataType"
    CONTROL_STATEMENT = "ControlStatement"
    STORAGE_CLASS = "StorageClass"
    INPUT_OUTPUT = "InputOutput"
    MISCELLANEOUS = "Miscellaneous"
    OTHER = "Other"


_TABLE = {
    KeywordCategory.DATA_TYPE: """
        int float double char short long signed unsigned void bool _Bool _Complex
        struct union enum const volatile restrict size_t ssize_t int8_t int16_t
        int32_t int64_t uint8_t uint16_t uint32_t uint64_t FILE boolean byte String
    """,
    KeywordCategory.CONTROL_STATEMENT: "if else switch case default for while do goto",
    KeywordCategory.STORAGE_CLASS: "auto extern static register typedef inline _Thread_local",
    KeywordCategory.INPUT_OUTPUT: """
        printf scanf fprintf fscanf sprintf snprintf sscanf vprintf vfprintf
        vsnprintf puts gets fgets fputs getchar putchar getc putc fgetc fputc
        fopen fclose fread fwrite fflush perror println print
    """,
    KeywordCategory.MISCELLANEOUS: "sizeof return break typeof continue NULL _Alignof alignof",
}

CATEGORY_OF = {tok: cat for cat, words in _TABLE.items() for tok in words.split()}

# ranking order used when iterating categories
CATEGORY_ORDER = list(KeywordCategory)


def categorize(token):
    return CATEGORY_OF.get(token, KeywordCategory.OTHER)


@dataclass(frozen=True)
class ImportantFeature:
    token: str
    score: float
    category: KeywordCategory
    doc_freq: int

    def to_json(self):
        return {"token": self.token, "score": self.score,
                "category": self.category.value, "doc_freq": self.doc_freq}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["token"], float(obj["score"]), KeywordCategory(obj["category"]),
                   int(obj["doc_freq"]))


def eligible(token, vocab, min_doc_freq):
    return is_word(token) and token in vocab and vocab.doc_freq.get(token, 0) >= min_doc_freq


def rank_features(model, important, vocab, top_n=6, min_doc_freq=3):
    """Top tokens by mean attention over their occurrences in the important samples.

    Tokens failing the document-frequency floor, and operator/punctuation
    tokens, are dropped before ranking. Ties break lexicographically.
    """
    if top_n < 1:
        raise FeatureError("top_n must be >= 1")
    samples = list(important.samples)
    if not samples:
        raise FeatureError("important sample set is empty")
    weights = defaultdict(list)
    for sample in samples:
        sample = tokenized(sample)
        attn = model.attention_scores(sample)
        for tok, w in zip(sample.tokens[: len(attn)], attn):
            if eligible(tok, vocab, min_doc_freq):
                weights[tok].append(float(w))
    # fsum keeps the mean independent of sample order
    scored = [(math.fsum(ws) / len(ws), tok) for tok, ws in weights.items()]
    scored = [(s, t) for s, t in scored if s > 0]
    scored.sort(key=lambda st: (-st[0], st[1]))
    return [ImportantFeature(tok, score, categorize(tok), vocab.doc_freq[tok])
            for score, tok in scored[:top_n]]


def save_features(features, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([f.to_json() for f in features], fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_features(path):
    with open(path, encoding="utf-8") as fh:
        return [ImportantFeature.from_json(o) for o in json.load(fh)]
