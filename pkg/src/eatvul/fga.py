"""Fuzzy genetic search over snippet combinations.

Each generation scores the population, fuzzy-clusters the normalized
scores, keeps the members of the two highest-centroid clusters (plus the
global best), and refills the population with concatenation children whose
parents are drawn with softmax probabilities over the membership-weighted
distance term.
"""

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import attack
from .errors import BudgetExhausted, EatVulError, InsertionError
from .targetzoo import CONCURRENT, BudgetedOracle

NEG_INF = float("-inf")


@dataclass(frozen=True)
class FgaConfig:
    K: int = 4
    alpha: float = 2.0
    lam: float = 0.01
    epsilon: float = 1e-3
    population_size: int = 30
    max_generations: int = 50
    max_genome_len: int = 4
    seed: int = 0
    max_queries: int = None
    location_policy: str = attack.UNIFORM_RANDOM
    location_seed: int = 0

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if not self.alpha > 1:
            raise ValueError("alpha must be > 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.population_size < self.K:
            raise ValueError("population_size must be >= K")
        if self.max_generations < 0 or self.max_genome_len < 1:
            raise ValueError("max_generations must be >= 0 and max_genome_len >= 1")

    def to_json(self):
        return asdict(self)


@dataclass
class Individual:
    genome: tuple
    score: float = None
    last_asr: float = None
    total_lines: int = 0
    immigrant: bool = False  # injected singleton, spared from the next elimination

    def __post_init__(self):
        self.genome = tuple(self.genome)
        if not self.genome:
            raise ValueError("genome must be non-empty")
        if len(set(self.genome)) != len(self.genome):
            raise ValueError("genome contains duplicate snippet ids")

    @property
    def valid(self):
        return self.score is not None and self.score > NEG_INF


@dataclass
class FuzzyState:
    centroids: np.ndarray
    memberships: np.ndarray
    labels: np.ndarray
    iterations: int
    converged: bool
    degenerate: bool = False
    objective: list = field(default_factory=list)
    normalized: np.ndarray = None


@dataclass
class Selection:
    clusters: tuple
    centroids: np.ndarray  # centroid of each selected cluster, normalized scale
    member_mask: np.ndarray
    fallback: bool = False


@dataclass
class FgaResult:
    population: list
    log: list
    partial: bool = False
    reason: str = ""
    queries_used: int = 0

    @property
    def best(self):
        return self.population[0]


# ---------------------------------------------------------------- fitness

def fitness_terms(genome, vuln_group, oracle, pool, seed=0, location_policy=attack.UNIFORM_RANDOM):
    """(asr, total_lines) of ``genome`` on ``vuln_group``; asr is None when any insertion is invalid."""
    advs = []
    for sample in vuln_group:
        try:
            adv, _ = attack.insert(sample, genome, pool, location_policy, seed)
        except (InsertionError, EatVulError):
            return None, pool.total_lines(genome)
        advs.append(adv)
    flips = sum(oracle.predict(adv) < attack.THRESHOLD for adv in advs)
    return flips / len(advs), pool.total_lines(genome)


def fitness_score(asr, lines, lam):
    return NEG_INF if asr is None else asr - lam * lines


def fitness(individual, vuln_group, oracle, lam, pool, seed=0,
            location_policy=attack.UNIFORM_RANDOM):
    asr, lines = fitness_terms(individual.genome, vuln_group, oracle, pool, seed, location_policy)
    individual.last_asr = asr
    individual.total_lines = lines
    individual.score = fitness_score(asr, lines, lam)
    return individual.score


# ---------------------------------------------------------------- clustering

def _memberships(y, c, alpha):
    d = np.abs(y[:, None] - c[None, :])
    w = np.zeros_like(d)
    zero = d <= 1e-12
    hit = zero.any(axis=1)
    w[hit] = zero[hit] / zero[hit].sum(axis=1, keepdims=True)
    if (~hit).any():
        dd = d[~hit]
        ratio = (dd[:, :, None] / dd[:, None, :]) ** (2.0 / (alpha - 1.0))
        w[~hit] = 1.0 / ratio.sum(axis=2)
    return w


def _centroids(y, w, alpha, old):
    wa = w ** alpha
    den = wa.sum(axis=0)
    c = old.copy()
    ok = den > 0
    c[ok] = (wa[:, ok] * y[:, None]).sum(axis=0) / den[ok]
    return c


def clustering_objective(y, w, c, alpha):
    """sum_jk w_jk^alpha (y_j - c_k)^2, the loss the alternating updates minimize."""
    return float(((w ** alpha) * (y[:, None] - c[None, :]) ** 2).sum())


def normalize_scores(scores):
    y = np.asarray(scores, dtype=float)
    lo, hi = y.min(), y.max()
    if hi - lo <= 1e-12:
        return np.zeros_like(y), True
    return (y - lo) / (hi - lo), False


def fuzzy_cluster(scores, K, alpha=2.0, epsilon=1e-3, seed=0, max_iter=100):
    """Fuzzy c-means on min-max normalized scalar scores."""
    y, degenerate = normalize_scores(scores)
    n = len(y)
    if n < K:
        raise ValueError(f"need at least K={K} scores, got {n}")
    rng = np.random.default_rng(seed)
    c = rng.random(K)
    labels = rng.integers(K, size=n)
    if degenerate:
        w = np.zeros((n, K))
        w[:, 0] = 1.0
        return FuzzyState(c, w, np.zeros(n, dtype=int), 0, True, True,
                          [clustering_objective(y, w, c, alpha)], y)
    objective = []
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        w = _memberships(y, c, alpha)
        if it == 1:
            objective.append(clustering_objective(y, w, c, alpha))
        new_labels = w.argmax(axis=1)
        new_c = _centroids(y, w, alpha, c)
        objective.append(clustering_objective(y, w, new_c, alpha))
        moved = np.max(np.abs(new_c - c))
        changed = np.any(new_labels != labels)
        c, labels = new_c, new_labels
        if not changed and moved < epsilon:
            converged = True
            break
    w = _memberships(y, c, alpha)
    labels = w.argmax(axis=1)
    return FuzzyState(c, w, labels, it, converged, False, objective, y)


def select_mating_clusters(state):
    """The two non-empty clusters with the largest centroids (ties: lower index)."""
    counts = np.bincount(state.labels, minlength=len(state.centroids))
    nonempty = [k for k in range(len(state.centroids)) if counts[k] > 0]
    if len(nonempty) >= 2 and not state.degenerate:
        top = sorted(nonempty, key=lambda k: (-state.centroids[k], k))[:2]
        mask = np.isin(state.labels, top)
        return Selection(tuple(top), state.centroids[top], mask)
    # median split of the single populated cluster
    y = state.normalized
    upper = y >= np.median(y)
    lower = ~upper
    cents = np.array([y[upper].mean(), y[lower].mean() if lower.any() else y[upper].mean()])
    return Selection((0, 1), cents, np.ones(len(y), dtype=bool), fallback=True)


def selection_logits(state, selection, alpha):
    """f_i = w_ik^alpha |y_i - c_k|, k being the selected cluster with the larger membership."""
    y = state.normalized
    if selection.fallback:
        upper = y >= np.median(y)
        k = np.where(upper, 0, 1)
        w = np.ones(len(y))
    else:
        sub = state.memberships[:, list(selection.clusters)]
        k = sub.argmax(axis=1)
        w = sub[np.arange(len(y)), k]
    return (w ** alpha) * np.abs(y - selection.centroids[k])


def softmax(f):
    f = np.asarray(f, dtype=float)
    e = np.exp(f - f.max())
    return e / e.sum()


def draw_parents(probs, rng, n_pairs):
    """Independent softmax draws, two per child."""
    idx = rng.choice(len(probs), size=(n_pairs, 2), p=probs)
    return [tuple(int(v) for v in row) for row in idx]


def concat(a, b, max_len):
    return tuple(dict.fromkeys(tuple(a) + tuple(b)))[:max_len]


def crossover(survivors, probs, pool_ids, seen, n_children, max_len, rng):
    """Concatenation children of softmax-drawn parents, skipping seen combinations."""
    if len(survivors) < 2:
        raise ValueError("crossover needs at least two survivors")
    children = []
    attempts = max(20, 10 * n_children)
    for a, b in draw_parents(probs, rng, attempts):
        if len(children) >= n_children:
            break
        child = concat(survivors[a].genome, survivors[b].genome, max_len)
        key = tuple(sorted(child))
        if key in seen:
            continue
        seen.add(key)
        children.append(Individual(child))
    if not children:
        # re-seed diversity with a singleton absent from the current parents
        present = {g for ind in survivors for g in ind.genome if len(ind.genome) == 1}
        fresh = sorted(s for s in pool_ids if s not in present)
        if fresh:
            pick = fresh[int(rng.integers(len(fresh)))]
            seen.add((pick,))
            children.append(Individual((pick,), immigrant=True))
    return children


# ---------------------------------------------------------------- driver

class _Scorer:
    def __init__(self, vuln_group, oracle, pool, config):
        self.vuln_group = vuln_group
        self.oracle = oracle
        self.pool = pool
        self.config = config
        self.cache = {}

    def _terms(self, genome):
        return fitness_terms(genome, self.vuln_group, self.oracle, self.pool, self.config.location_seed,
                             self.config.location_policy)

    def score(self, individuals):
        pending = [ind.genome for ind in individuals if ind.genome not in self.cache]
        pending = list(dict.fromkeys(pending))
        if self.oracle.concurrency == CONCURRENT and len(pending) > 1:
            with ThreadPoolExecutor(max_workers=8) as ex:
                terms = list(ex.map(self._terms, pending))
        else:
            terms = [self._terms(g) for g in pending]
        for g, t in zip(pending, terms):
            self.cache[g] = t
        for ind in individuals:
            asr, lines = self.cache[ind.genome]
            ind.last_asr, ind.total_lines = asr, lines
            ind.score = fitness_score(asr, lines, self.config.lam)


def _rank(population):
    return sorted(population, key=lambda i: (-i.score, len(i.genome), i.genome))


def _log_entry(gen, population, queries, fallback=False):
    finite = [i.score for i in population if i.valid]
    best = _rank(population)[0]
    return {"gen": gen,
            "best_score": best.score if best.valid else None,
            "mean_score": math.fsum(finite) / len(finite) if finite else None,
            "best_asr": best.last_asr,
            "best_genome": list(best.genome),
            "queries_used": queries,
            "population": len(population),
            "fallback": fallback}


def initial_population(pool_ids, config, rng):
    """Every singleton, topped up with random longer combinations.

    All singletons are always present, even when the pool outnumbers
    ``population_size``: a snippet missing here could only come back through
    the fresh-singleton rule, which fires rarely.
    """
    ids = sorted(pool_ids)
    population = [Individual((s,)) for s in ids]
    seen = {(s,) for s in ids}
    longest = min(config.max_genome_len, len(ids))
    attempts = 0
    while len(population) < config.population_size and longest > 1 and attempts < 100 * config.population_size:
        attempts += 1
        size = int(rng.integers(2, longest + 1))
        genome = tuple(ids[i] for i in rng.choice(len(ids), size, replace=False))
        key = tuple(sorted(genome))
        if key not in seen:
            seen.add(key)
            population.append(Individual(genome))
    return population


def run_fga(config, pool, vuln_group, oracle, on_generation=None):
    """Evolve snippet combinations against ``oracle`` on ``vuln_group``."""
    if not len(pool):
        raise ValueError("pool is empty")
    if not vuln_group:
        raise ValueError("vulnerable group is empty")
    start = oracle.query_count
    if config.max_queries is not None:
        oracle = BudgetedOracle(oracle, config.max_queries)
        start = 0
    rng = np.random.default_rng(config.seed)
    scorer = _Scorer(list(vuln_group), oracle, pool, config)
    population = initial_population(pool.ids(), config, rng)
    seen = {tuple(sorted(i.genome)) for i in population}
    log = []

    def used():
        return oracle.query_count - start

    def finish(partial=False, reason=""):
        scored = [i for i in population if i.score is not None]
        return FgaResult(_rank(scored) if scored else [], log, partial, reason, used())

    try:
        scorer.score(population)
    except BudgetExhausted as exc:
        return finish(True, str(exc))
    log.append(_log_entry(0, population, used()))
    if on_generation:
        on_generation(log[-1])
    for gen in range(1, config.max_generations + 1):
        if any(i.last_asr == 1.0 for i in population):
            return finish(reason="asr reached 1.0")
        valid = [i for i in population if i.valid]
        if len(valid) < 2:
            return finish(reason="fewer than two valid individuals")
        best_idx = valid.index(_rank(valid)[0])
        scores = [i.score for i in valid]
        if len(valid) >= config.K:
            state = fuzzy_cluster(scores, config.K, config.alpha, config.epsilon,
                                  seed=int(rng.integers(2 ** 31)))
        else:
            y, degenerate = normalize_scores(scores)
            state = FuzzyState(np.zeros(1), np.ones((len(y), 1)), np.zeros(len(y), dtype=int),
                               0, True, True, [], y)
        sel = select_mating_clusters(state)
        keep = sel.member_mask.copy()
        keep[best_idx] = True  # elitism guard
        protected = {id(valid[best_idx])}
        for i, ind in enumerate(valid):
            if ind.immigrant:
                # an injected singleton gets one round as a parent before it can be culled
                keep[i] = True
                protected.add(id(ind))
                ind.immigrant = False
        survivors = [ind for ind, k in zip(valid, keep) if k]
        logits = selection_logits(state, sel, config.alpha)[keep]
        if len(survivors) < 2:
            return finish(reason="fewer than two survivors")
        # constant population size, at least half of it offspring
        n_children = max(config.population_size - len(survivors), config.population_size // 2, 1)
        children = crossover(survivors, softmax(logits), pool.ids(), seen, n_children,
                             config.max_genome_len, rng)
        if not children:
            population = survivors
            return finish(reason="no unseen combinations left")
        room = max(config.population_size - len(children), len(protected))
        ranked = [i for i in _rank(survivors) if id(i) in protected]
        ranked += [i for i in _rank(survivors) if id(i) not in protected]
        retained = ranked[:room]
        population = retained + children
        try:
            scorer.score(children)
        except BudgetExhausted as exc:
            population = retained + [c for c in children if c.genome in scorer.cache]
            scorer.score(population)  # all cached, no further queries
            return finish(True, str(exc))
        log.append(_log_entry(gen, population, used(), sel.fallback))
        if on_generation:
            on_generation(log[-1])
    if any(i.last_asr == 1.0 for i in population):
        return finish(reason="asr reached 1.0")
    return finish(reason="max_generations reached")


# ---------------------------------------------------------------- baselines

def exhaustive_search(pool, vuln_group, oracle, lam, max_len=2, seed=0,
                      location_policy=attack.UNIFORM_RANDOM):
    """Score every combination of at most ``max_len`` distinct snippets."""
    ids = sorted(pool.ids())
    out = []
    for r in range(1, max_len + 1):
        for combo in itertools.combinations(ids, r):
            asr, lines = fitness_terms(combo, vuln_group, oracle, pool, seed, location_policy)
            out.append(Individual(combo, fitness_score(asr, lines, lam), asr, lines))
    return _rank(out)


def random_genome(pool, size, rng):
    ids = sorted(pool.ids())
    return tuple(ids[i] for i in rng.choice(len(ids), size, replace=False))
