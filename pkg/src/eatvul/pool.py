"""The preserved attack pool: validated snippets indexed by keyword category."""

import copy
import hashlib
import json

import numpy as np

from .errors import PoolError
from .featureid import KeywordCategory
from .snippetgen import Snippet, validate_snippet

POOL_SCHEMA = 1


class AttackPool:
    def __init__(self, config_hash=None):
        self.snippets = {}
        self.by_category = {c: [] for c in KeywordCategory}
        self.hosts = {}
        self.version = 0
        self.config_hash = config_hash
        self._digests = {}

    def __len__(self):
        return len(self.snippets)

    def __contains__(self, sid):
        return sid in self.snippets

    def __getitem__(self, sid):
        return self.snippets[sid]

    def __eq__(self, other):
        if not isinstance(other, AttackPool):
            return NotImplemented
        return (self.snippets == other.snippets and self.by_category == other.by_category
                and self.hosts == other.hosts and self.version == other.version
                and self.config_hash == other.config_hash)

    def ids(self):
        return list(self.snippets)

    def _next_id(self):
        return f"s{len(self.snippets) + 1:04d}"

    def add(self, snippet, host):
        """Validate ``snippet`` against ``host`` and store it; returns the new id."""
        report = validate_snippet(snippet, host)
        if not report:
            raise PoolError("snippet failed validation", report)
        digest = text_digest(snippet)
        if digest in self._digests:
            raise PoolError(f"duplicate of {self._digests[digest]}", report)
        sid = self._next_id()
        host_id = getattr(host, "id", None)
        self._store(sid, snippet.with_provenance(host_id=host_id), host_id)
        self.version += 1
        return sid

    def _store(self, sid, snippet, host_id):
        self.snippets[sid] = snippet
        self.hosts[sid] = host_id
        self._digests[text_digest(snippet)] = sid
        for cat in snippet.categories:
            self.by_category[KeywordCategory(cat)].append(sid)

    def snapshot(self):
        return copy.deepcopy(self)

    def total_lines(self, genome):
        return sum(len(self.snippets[s].lines) for s in genome)


def text_digest(snippet):
    return hashlib.sha256(snippet.normalized().encode()).hexdigest()


def _record(sid, snippet, host_id):
    return {"id": sid, "lines": list(snippet.lines), "keywords": list(snippet.keywords),
            "categories": list(snippet.categories), "requested": list(snippet.requested),
            "suffix_map": dict(snippet.suffix_map), "language": snippet.language,
            "provenance": dict(snippet.provenance), "host_id": host_id}


def save(pool, path):
    header = {"schema": POOL_SCHEMA, "version": pool.version, "count": len(pool),
              "config_hash": pool.config_hash}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"pool": header}, sort_keys=True) + "\n")
        for sid, snip in pool.snippets.items():
            fh.write(json.dumps(_record(sid, snip, pool.hosts[sid]), sort_keys=True) + "\n")


def load(path):
    pool = AttackPool()
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise PoolError("pool file is empty", line=0)
    try:
        header = json.loads(lines[0])["pool"]
    except (ValueError, KeyError, TypeError):
        raise PoolError("missing or corrupt pool header", line=1) from None
    if header.get("schema") != POOL_SCHEMA:
        raise PoolError(f"pool schema {header.get('schema')!r} is not supported "
                        f"(expected {POOL_SCHEMA})", line=1)
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            snip = Snippet(tuple(rec["lines"]), tuple(rec["keywords"]), tuple(rec["requested"]),
                           tuple(sorted(rec["suffix_map"].items())),
                           tuple(sorted(rec["provenance"].items())), rec["language"])
            if list(snip.categories) != rec["categories"]:
                raise ValueError("category list disagrees with keywords")
            pool._store(rec["id"], snip, rec["host_id"])
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            raise PoolError(f"corrupt pool record: {exc}", line=lineno) from None
    if len(pool) != header.get("count"):
        raise PoolError(f"header announces {header.get('count')} snippets, found {len(pool)}",
                        line=1)
    pool.version = header["version"]
    pool.config_hash = header.get("config_hash")
    return pool


def sample_seeds(pool, n, category=None, seed=0):
    """Draw ``n`` distinct snippet ids (optionally within one category)."""
    if category is None:
        ids = sorted(pool.snippets)
    else:
        ids = sorted(pool.by_category[KeywordCategory(category)])
    if not ids:
        raise PoolError(f"no snippets in category {category}")
    if n > len(ids):
        raise PoolError(f"asked for {n} seeds but only {len(ids)} are available")
    rng = np.random.default_rng(seed)
    return [ids[i] for i in rng.permutation(len(ids))[:n]]
