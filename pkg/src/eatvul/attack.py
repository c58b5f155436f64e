"""Snippet insertion, evasion campaigns, metrics and 2-D projection export."""

import csv
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import CodeSample
from .errors import EatVulError, InsertionError, LexError, MetricError, SuffixError
from .lexer import lex
from .snippetgen import apply_suffixes, validate_snippet
from .targetzoo import CONCURRENT

THRESHOLD = 0.5
UNIFORM_RANDOM = "uniform-random"
AFTER_FIRST_STATEMENT = "after-first-statement"
POLICIES = (UNIFORM_RANDOM, AFTER_FIRST_STATEMENT)

# a closing brace followed by one of these continues the same statement
_CONTINUATIONS = ("else", "while", "catch", "finally")


@dataclass(frozen=True)
class InsertionPlan:
    sample_id: str
    locations: tuple  # host line index each snippet follows, in genome order
    genome: tuple
    suffix_maps: tuple  # one tuple of (old, new) pairs per snippet
    policy: str = UNIFORM_RANDOM


@dataclass
class AttackResult:
    sample_id: str
    orig_prob: float
    adv_prob: float = None
    genome: tuple = ()
    inserted_lines: int = 0
    error: str = None

    @property
    def evaluated(self):
        return self.error is None and self.adv_prob is not None

    @property
    def bypassed(self):
        return self.evaluated and self.adv_prob < THRESHOLD

    def to_json(self):
        return {"sample_id": self.sample_id, "orig_prob": self.orig_prob,
                "adv_prob": self.adv_prob, "bypassed": self.bypassed,
                "genome": list(self.genome), "inserted_lines": self.inserted_lines,
                "error": self.error}


@dataclass
class EvasionOutcome:
    results: list
    excluded: list = field(default_factory=list)  # ids already classified non-vulnerable
    genome: tuple = ()


def statement_boundaries(source, language="c"):
    """Host line indices after which a whole statement may be inserted.

    A line qualifies when, at its end, we are inside a function body (brace
    depth >= 1), outside any parentheses, the line ends a statement or opens
    a block, and the next line does not continue the statement (``else``,
    ``while`` of a do-loop).
    """
    lines = source.split("\n")
    starts = np.cumsum([0] + [len(ln) + 1 for ln in lines])
    try:
        toks = lex(source, language)
    except LexError as exc:
        raise InsertionError(f"host does not lex: {exc}") from None
    depth = paren = 0
    init_depths = []  # brace depths opened by "= {" initializers
    state_after = [None] * len(lines)
    prev = None
    k = 0
    for ln in range(len(lines)):
        end = starts[ln + 1]
        last = None
        while k < len(toks) and toks[k].offset < end:
            t = toks[k]
            if t.text == "(":
                paren += 1
            elif t.text == ")":
                paren -= 1
            elif t.text == "{":
                depth += 1
                if prev is not None and prev.text == "=":
                    init_depths.append(depth)
            elif t.text == "}":
                if init_depths and init_depths[-1] == depth:
                    init_depths.pop()
                depth -= 1
            prev = last = t
            k += 1
        state_after[ln] = (depth, paren, bool(init_depths), last)
    out = []
    for ln, (d, p, in_init, last) in enumerate(state_after):
        if last is None or d < 1 or p != 0 or in_init:
            continue
        if last.text not in (";", "{", "}"):
            continue
        nxt = next((lines[j].strip() for j in range(ln + 1, len(lines)) if lines[j].strip()), "")
        if any(nxt == w or nxt.startswith(w + " ") or nxt.startswith(w + "(") for w in _CONTINUATIONS):
            continue
        out.append(ln)
    return out


def _location_rng(seed, sample_id):
    return np.random.default_rng([int(seed), zlib.crc32(sample_id.encode())])


def choose_locations(boundaries, n, policy, seed, sample_id):
    if not boundaries:
        raise InsertionError(f"{sample_id}: no legal insertion point in the function body")
    if policy == AFTER_FIRST_STATEMENT:
        start = 1 if len(boundaries) > 1 else 0
        picks = [boundaries[min(start + i, len(boundaries) - 1)] for i in range(n)]
    elif policy == UNIFORM_RANDOM:
        rng = _location_rng(seed, sample_id)
        if n <= len(boundaries):
            picks = [boundaries[i] for i in rng.choice(len(boundaries), n, replace=False)]
        else:
            # more pieces than boundaries: reuse boundaries, keeping genome order within each
            picks = [boundaries[i] for i in rng.choice(len(boundaries), n, replace=True)]
    else:
        raise InsertionError(f"unknown location policy {policy!r}")
    return picks


def _ident_set(snippet):
    return {t.text for t in lex(snippet.text, snippet.language) if t.kind == "ident"}


def prepare(sample, genome, pool):
    """Suffix every genome snippet against the host and validate it.

    Snippets are processed in genome order; later pieces also avoid the
    identifiers of earlier ones so the pieces stay independent of each other.
    """
    prepared = []
    taken = set()
    for sid in genome:
        try:
            snip = apply_suffixes(pool[sid], sample, taken)
        except SuffixError as exc:
            raise InsertionError(f"{sample.id}: snippet {sid} rejected: {exc}") from None
        report = validate_snippet(snip, sample, taken)
        if not report:
            raise InsertionError(f"{sample.id}: snippet {sid} rejected: {'; '.join(report.failures)}")
        taken |= _ident_set(snip)
        prepared.append(snip)
    return prepared


def insert(sample, genome, pool, location_policy=UNIFORM_RANDOM, seed=0, single_location=False):
    """Return ``(adversarial_sample, plan)`` with every genome snippet inserted."""
    genome = tuple(genome)
    if len(set(genome)) != len(genome):
        raise InsertionError("genome contains duplicate snippet ids")
    if not genome:
        return sample, InsertionPlan(sample.id, (), (), (), location_policy)
    prepared = prepare(sample, genome, pool)
    boundaries = statement_boundaries(sample.source, sample.language)
    n = 1 if single_location else len(genome)
    picks = choose_locations(boundaries, n, location_policy, seed, sample.id)
    if single_location:
        picks = picks * len(genome)
    lines = sample.source.split("\n")
    after = {}
    for snip, loc in zip(prepared, picks):
        after.setdefault(loc, []).append(snip)
    out = []
    for ln, text in enumerate(lines):
        out.append(text)
        for snip in after.get(ln, ()):
            indent = _indent_for(lines, ln)
            out.extend(indent + s for s in snip.lines)
    adv = CodeSample(sample.id, "\n".join(out), sample.label, sample.language)
    plan = InsertionPlan(sample.id, tuple(picks), genome,
                         tuple(s.suffix_map for s in prepared), location_policy)
    return adv, plan


def _indent_for(lines, ln):
    for j in range(ln + 1, len(lines)):
        if lines[j].strip() and lines[j].strip() != "}":
            return lines[j][: len(lines[j]) - len(lines[j].lstrip())]
    cur = lines[ln]
    return cur[: len(cur) - len(cur.lstrip())] + "    "


def fit_genome(genome, snippet_size, pool, seed=0):
    """Truncate or pad ``genome`` to exactly ``snippet_size`` pieces.

    Padding draws unused pool ids in a seeded order.
    """
    genome = list(dict.fromkeys(genome))[:snippet_size]
    if len(genome) < snippet_size:
        rest = [s for s in sorted(pool.ids()) if s not in genome]
        rng = np.random.default_rng(seed)
        need = snippet_size - len(genome)
        if need > len(rest):
            raise InsertionError(f"pool too small to pad genome to {snippet_size} pieces")
        genome += [rest[i] for i in rng.permutation(len(rest))[:need]]
    return tuple(genome)


def _map(oracle, fn, items):
    if oracle.concurrency == CONCURRENT and len(items) > 1:
        with ThreadPoolExecutor(max_workers=8) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def evade(oracle, vuln_cases, genome, snippet_size, pool, seed=0,
          location_policy=UNIFORM_RANDOM, single_location=False):
    """Attack every confirmed-vulnerable case with one ``snippet_size``-piece genome."""
    genome = getattr(genome, "genome", genome)
    genome = fit_genome(genome, snippet_size, pool, seed) if snippet_size else ()
    cases = sorted(vuln_cases, key=lambda s: s.id)
    orig = _map(oracle, oracle.predict, cases)
    keep = [(s, p) for s, p in zip(cases, orig) if p >= THRESHOLD]
    excluded = [s.id for s, p in zip(cases, orig) if p < THRESHOLD]

    def run(item):
        sample, p0 = item
        if not genome:
            return AttackResult(sample.id, p0, p0, (), 0)
        try:
            adv, _ = insert(sample, genome, pool, location_policy, seed, single_location)
        except (InsertionError, EatVulError) as exc:
            return AttackResult(sample.id, p0, None, genome, 0, str(exc))
        try:
            p1 = oracle.predict(adv)
        except EatVulError as exc:
            return AttackResult(sample.id, p0, None, genome, 0, f"oracle failure: {exc}")
        return AttackResult(sample.id, p0, p1, genome, pool.total_lines(genome))

    results = _map(oracle, run, keep)
    results.sort(key=lambda r: r.sample_id)
    return EvasionOutcome(results, excluded, genome)


def _evaluated(results):
    results = [r for r in results if r.evaluated]
    if not results:
        raise MetricError("no evaluated results")
    return results


def compute_asr(results):
    results = _evaluated(results)
    return sum(r.bypassed for r in results) / len(results)


def compute_topk(results, k):
    if k < 1:
        raise MetricError("k must be >= 1")
    results = _evaluated(results)
    if k > len(results):
        raise MetricError(f"k={k} exceeds the {len(results)} evaluated results")
    ranked = sorted(results, key=lambda r: (-r.orig_prob, r.sample_id))
    return sum(r.bypassed for r in ranked[:k]) / k


def compute_f1(oracle, clean_test):
    truth = [s.is_vulnerable for s in clean_test]
    if len(set(truth)) < 2:
        raise MetricError("clean test set must contain both classes")
    pred = [oracle.predict(s) >= THRESHOLD for s in clean_test]
    tp = sum(t and p for t, p in zip(truth, pred))
    fp = sum((not t) and p for t, p in zip(truth, pred))
    fn = sum(t and not p for t, p in zip(truth, pred))
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def project_2d(X, method="pca", seed=0):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or len(X) < 3:
        raise ValueError("projection needs at least 3 points")
    if method == "tsne":
        from sklearn.manifold import TSNE

        return TSNE(n_components=2, random_state=seed, perplexity=min(30.0, len(X) - 1.0),
                    init="pca").fit_transform(X)
    if method != "pca":
        raise ValueError(f"unknown projection method {method!r}")
    Xc = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    comps = vt[:2]
    # fix the sign of each axis so the output does not depend on the SVD backend
    for i in range(len(comps)):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    Y = Xc @ comps.T
    if Y.shape[1] < 2:
        Y = np.hstack([Y, np.zeros((len(Y), 2 - Y.shape[1]))])
    return Y


def export_projection(representations, labels, adversarial_flags, path, method="pca", seed=0):
    labels = list(labels)
    flags = list(adversarial_flags)
    if not len(representations) == len(labels) == len(flags):
        raise ValueError("representations, labels and flags must align")
    Y = project_2d(representations, method, seed)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "label", "adversarial"])
            for (x, y), lab, adv in zip(Y, labels, flags):
                w.writerow([repr(float(x)), repr(float(y)), lab, int(bool(adv))])
    except OSError as exc:
        raise EatVulError(f"cannot write projection to {path}: {exc}") from None
    return Y


def adversarial_variants(sample, genomes, pool, seed=0, location_policy=UNIFORM_RANDOM):
    """One adversarial copy of ``sample`` per genome, ids tagged with the variant index."""
    out = []
    for i, genome in enumerate(genomes):
        adv, _ = insert(sample, genome, pool, location_policy, seed)
        out.append(replace(adv, id=f"{sample.id}#adv{i}"))
    return out
