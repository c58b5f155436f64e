"""Black-box victim oracles.

Attack code only ever touches ``predict``, ``query_count`` and
``concurrency`` on these objects.
"""

import hashlib
import json
import math
import os
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass

import numpy as np

from .corpus import tokenized
from .errors import BudgetExhausted, ProtocolError, RetryableError, TrainingError

SERIAL = "serial"
CONCURRENT = "concurrent"


class VictimOracle:
    """Counts every query; subclasses implement ``_predict``."""

    concurrency = SERIAL
    name = "victim"

    def __init__(self):
        self._count = 0
        self._lock = threading.Lock()

    @property
    def query_count(self):
        return self._count

    def predict(self, sample):
        with self._lock:
            self._count += 1
        p = float(self._predict(sample))
        if not 0.0 <= p <= 1.0:
            raise ProtocolError(f"probability {p} outside [0, 1]")
        return p

    def _predict(self, sample):
        raise NotImplementedError


class BudgetedOracle(VictimOracle):
    """Wraps another oracle and refuses query number ``max_queries + 1``."""

    def __init__(self, inner, max_queries):
        super().__init__()
        self._inner = inner
        self.max_queries = max_queries
        self.concurrency = inner.concurrency
        self.name = inner.name

    def predict(self, sample):
        with self._lock:
            if self._count >= self.max_queries:
                raise BudgetExhausted(f"query budget of {self.max_queries} exhausted")
            self._count += 1
        return self._inner.predict(sample)


@dataclass(frozen=True)
class BowConfig:
    iterations: int = 400
    learning_rate: float = 0.5
    l2: float = 1e-3
    seed: int = 0


class BagOfTokensVictim(VictimOracle):
    """Logistic link on the summed weights of the distinct tokens in a sample.

    Presence, not counts: repeating a token already in the function does
    not move the score, so only genuinely new tokens can flip a decision.

    When ``known`` is given, tokens outside it score ``unk_weight`` (the
    learned weight of the unknown index); otherwise missing tokens score 0.
    """

    concurrency = CONCURRENT
    name = "bow"

    def __init__(self, weights, bias=0.0, unk_weight=0.0, known=None):
        super().__init__()
        self._weights = {t: float(w) for t, w in weights.items()}
        self._bias = float(bias)
        self._unk = float(unk_weight)
        self._known = None if known is None else frozenset(known)
        values = list(self._weights.values()) + [self._bias, self._unk]
        if not np.all(np.isfinite(values)):
            raise ValueError("victim weights must be finite")

    def weight(self, token):
        # diagnostics and tests only; the attack path never reads weights
        if self._known is not None and token not in self._known:
            return self._unk
        return self._weights.get(token, 0.0)

    def logit(self, tokens):
        return self._bias + math.fsum(self.weight(t) for t in sorted(set(tokens)))

    def _predict(self, sample):
        z = self.logit(tokenized(sample).tokens)
        return 1.0 / (1.0 + np.exp(-z))

    def to_json(self):
        obj = {"bias": self._bias, "weights": dict(sorted(self._weights.items())),
               "unk_weight": self._unk}
        if self._known is not None:
            obj["known"] = sorted(self._known)
        return obj

    @classmethod
    def from_json(cls, obj):
        return cls(obj["weights"], obj["bias"], obj.get("unk_weight", 0.0), obj.get("known"))


def train_bow_victim(split, vocab, config=BowConfig()):
    """Full-batch gradient descent logistic regression on token presence."""
    samples = [tokenized(s) for s in split.train]
    y = np.array([1.0 if s.is_vulnerable else 0.0 for s in samples])
    if len(set(y.tolist())) < 2:
        raise TrainingError("bag-of-tokens victim needs both classes")
    tokens = vocab.tokens()
    X = np.zeros((len(samples), len(tokens)))
    for i, s in enumerate(samples):
        X[i, vocab.encode(s.tokens)] = 1.0
    w = np.zeros(len(tokens))
    b = 0.0
    n = len(samples)
    for _ in range(config.iterations):
        p = 1.0 / (1.0 + np.exp(-(X @ w + b)))
        g = p - y
        w -= config.learning_rate * (X.T @ g / n + config.l2 * w)
        b -= config.learning_rate * g.mean()
    weights = {tok: float(w[i]) for i, tok in enumerate(tokens) if i >= 2}
    return BagOfTokensVictim(weights, b, float(w[1]), tokens[2:])


class SurrogateVictim(VictimOracle):
    concurrency = CONCURRENT
    name = "self"

    def __init__(self, model):
        super().__init__()
        self._model = model

    def _predict(self, sample):
        return self._model.predict_proba(sample)


def surrogate_as_victim(model):
    return SurrogateVictim(model)


def _request_key(source, language):
    return hashlib.sha256(json.dumps([source, language]).encode()).hexdigest()


class RemoteVictim(VictimOracle):
    """HTTP victim: POST {source, language} -> {probability}."""

    name = "remote"

    def __init__(self, url, timeout=10.0, auth=None, retries=3, backoff=0.5,
                 replay_log=None, concurrency=SERIAL):
        super().__init__()
        self.url = url
        self.timeout = timeout
        self.auth = auth
        self.retries = retries
        self.backoff = backoff
        self.replay_log = replay_log
        self.concurrency = concurrency
        self._log_lock = threading.Lock()

    def _post(self, payload):
        data = json.dumps(payload).encode()
        req = urllib.request.Request(self.url, data=data, method="POST",
                                     headers={"Content-Type": "application/json"})
        if self.auth:
            req.add_header("Authorization", f"Bearer {self.auth}")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = resp.read()
        except urllib.error.HTTPError as exc:
            if exc.code >= 500 or exc.code == 429:
                raise RetryableError(f"victim returned HTTP {exc.code}") from None
            raise ProtocolError(f"victim returned HTTP {exc.code}") from None
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise RetryableError(f"victim request failed: {exc}") from None
        try:
            prob = float(json.loads(body)["probability"])
        except (ValueError, KeyError, TypeError):
            raise ProtocolError(f"malformed victim response: {body[:200]!r}") from None
        return prob

    def _predict(self, sample):
        payload = {"source": sample.source, "language": sample.language}
        delay = self.backoff
        for attempt in range(self.retries):
            try:
                prob = self._post(payload)
                break
            except RetryableError:
                if attempt == self.retries - 1:
                    raise
                time.sleep(delay)
                delay *= 2
        if self.replay_log:
            record = {"key": _request_key(sample.source, sample.language),
                      "request": payload, "response": {"probability": prob}}
            with self._log_lock, open(self.replay_log, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        return prob


class ReplayVictim(VictimOracle):
    """Answers from a recorded replay log without touching the network."""

    concurrency = CONCURRENT
    name = "replay"

    def __init__(self, replay_log):
        super().__init__()
        self._answers = {}
        with open(replay_log, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    self._answers[rec["key"]] = rec["response"]["probability"]

    def _predict(self, sample):
        key = _request_key(sample.source, sample.language)
        if key not in self._answers:
            raise ProtocolError(f"no recorded answer for sample {sample.id!r}")
        return self._answers[key]


def remote_victim(url=None, timeout=10.0, auth=None, **kwargs):
    url = url or os.environ.get("EATVUL_VICTIM_URL")
    if not url:
        raise ValueError("no victim URL given and EATVUL_VICTIM_URL is unset")
    auth = auth if auth is not None else os.environ.get("EATVUL_VICTIM_KEY")
    return RemoteVictim(url, timeout, auth, **kwargs)
