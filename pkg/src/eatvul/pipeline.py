"""End-to-end stages behind the CLI subcommands.

Every stage reads its upstream artifacts from the run directory, writes its
own artifacts there, embeds the config hash in each of them, and records
itself in ``manifest.json``.
"""

import hashlib
import json
import logging
import os

import numpy as np

from . import attack, corpus, fga, featureid, pool as poolmod, snippetgen, svmcore, targetzoo
from .errors import ConfigError, EatVulError, MissingArtifactError, PoolError, SuffixError
from .featureid import CATEGORY_ORDER
from .surrogate import SurrogateConfig, SurrogateModel, train
from .synthetic import make_corpus

log = logging.getLogger(__name__)

ARTIFACTS = {
    "dataset": ("dataset.jsonl", "ingest"),
    "split": ("split.json", "ingest"),
    "vocab": ("vocab.json", "ingest"),
    "surrogate": ("surrogate.npz", "train-surrogate"),
    "important": ("important.json", "extract-features"),
    "features": ("features.json", "extract-features"),
    "candidates": ("candidates.jsonl", "gen-snippets"),
    "pool": ("pool.jsonl", "build-pool"),
    "fga_log": ("fga_log.jsonl", "run-fga"),
    "fga_result": ("fga_result.json", "run-fga"),
    "metrics": ("metrics.json", "attack"),
    "results": ("attack_results.jsonl", "attack"),
    "projection": ("projection.csv", "project"),
    "report": ("report.json", "report"),
}


def _dump(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _sha(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


class Run:
    """A run directory bound to one resolved configuration."""

    def __init__(self, config, out_dir):
        self.config = config
        self.out = out_dir
        self.hash = config.digest()
        os.makedirs(out_dir, exist_ok=True)
        self._victim = None

    def path(self, name):
        return os.path.join(self.out, ARTIFACTS[name][0] if name in ARTIFACTS else name)

    def require(self, name, stage):
        p = self.path(name)
        if not os.path.exists(p):
            producer = ARTIFACTS[name][1]
            raise MissingArtifactError(f"{stage} requires {ARTIFACTS[name][0]} "
                                       f"(run `{producer}` first)")
        return p

    def write_json(self, name, obj):
        with open(self.path(name), "w", encoding="utf-8") as fh:
            fh.write(_dump(obj))

    def read_json(self, name, stage):
        with open(self.require(name, stage), encoding="utf-8") as fh:
            return json.load(fh)

    def record(self, stage, names):
        mpath = os.path.join(self.out, "manifest.json")
        manifest = {"stages": {}}
        if os.path.exists(mpath):
            with open(mpath, encoding="utf-8") as fh:
                manifest = json.load(fh)
        manifest["stages"][stage] = {
            "config_hash": self.hash,
            "seeds": self.config.get("seeds"),
            "artifacts": {ARTIFACTS[n][0]: _sha(self.path(n)) for n in names},
        }
        with open(mpath, "w", encoding="utf-8") as fh:
            fh.write(_dump(manifest))

    def manifest(self):
        mpath = os.path.join(self.out, "manifest.json")
        if not os.path.exists(mpath):
            return {"stages": {}}
        with open(mpath, encoding="utf-8") as fh:
            return json.load(fh)

    # ---------------------------------------------------------- loaders

    def samples(self, stage):
        return corpus.load_dataset(self.require("dataset", stage))

    def split(self, stage):
        obj = self.read_json("split", stage)
        return corpus.DatasetSplit.from_ids(self.samples(stage), obj["ids"], obj["fractions"],
                                            obj["seed"])

    def vocab(self, stage):
        return corpus.Vocabulary.from_json(self.read_json("vocab", stage)["vocab"])

    def surrogate(self, stage):
        return SurrogateModel.load(self.require("surrogate", stage), self.vocab(stage))

    def pool(self, stage):
        if not os.path.exists(self.path("pool")):
            raise MissingArtifactError(f"{stage} requires pool.jsonl (run `build-pool` first)")
        return poolmod.load(self.path("pool"))

    def victim(self, stage):
        if self._victim is not None:
            return self._victim
        vc = self.config.get("victim")
        kind = vc["kind"]
        if kind == "bow":
            bow = vc["bow"]
            cfg = targetzoo.BowConfig(bow["iterations"], bow["learning_rate"], bow["l2"])
            self._victim = targetzoo.train_bow_victim(self.split(stage), self.vocab(stage), cfg)
        elif kind == "self":
            self._victim = targetzoo.surrogate_as_victim(self.surrogate(stage))
        else:
            self._victim = targetzoo.remote_victim(vc["url"], vc["timeout"],
                                                   replay_log=vc["replay_log"])
        return self._victim

    def generator(self):
        gc = self.config.get("generator")
        if gc["kind"] == "offline":
            return snippetgen.OfflineGenerator()
        replay = gc["replay_log"] or os.path.join(self.out, "generator_replay.jsonl")
        return snippetgen.RemoteGenerator(gc["url"], max_in_flight=gc["max_in_flight"],
                                          replay_log=replay)


# ---------------------------------------------------------------- stages

def ingest(run, dataset=None):
    cfg = run.config
    path = dataset or cfg.get("dataset")
    if path:
        samples = corpus.load_dataset(path)
    else:
        syn = cfg.get("synthetic")
        samples = make_corpus(syn["n_vulnerable"], syn["n_nonvulnerable"], syn["seed"])
    corpus.save_dataset(samples, run.path("dataset"))
    fractions = tuple(cfg.get("split", "fractions"))
    seed = cfg.get("seeds", "split")
    sp = corpus.split(samples, seed, fractions)
    run.write_json("split", {"config_hash": run.hash, "fractions": list(fractions),
                             "seed": seed, "ids": sp.ids()})
    vocab = corpus.build_vocab(corpus.tokenize_all(sp.train), cfg.get("vocab", "min_doc_freq"))
    run.write_json("vocab", {"config_hash": run.hash, "vocab": vocab.to_json()})
    run.record("ingest", ["dataset", "split", "vocab"])
    return {"samples": len(samples), "train": len(sp.train), "eval": len(sp.eval),
            "test": len(sp.test), "vocab": len(vocab)}


def train_surrogate(run):
    sc = dict(run.config.get("surrogate"))
    sc["seed"] = run.config.get("seeds", "surrogate")
    model = train(run.split("train-surrogate"), run.vocab("train-surrogate"), SurrogateConfig(**sc))
    model.save(run.path("surrogate"), extra={"config_hash": run.hash})
    run.record("train-surrogate", ["surrogate"])
    return {"train_losses": model.train_losses, "eval_losses": model.eval_losses}


def extract_features(run):
    stage = "extract-features"
    model = run.surrogate(stage)
    train_set = corpus.tokenize_all(run.split(stage).train)
    X = model.representations(train_set)
    svm = svmcore.train_svm(X, svmcore.labels_to_signs(train_set), C=run.config.get("svm", "C"))
    imp = svmcore.important_samples(svm, train_set)
    fc = run.config.get("features")
    feats = featureid.rank_features(model, imp, model.vocab, fc["top_n"], fc["min_doc_freq"])
    if not feats:
        raise EatVulError("no eligible features survived the frequency floor")
    run.write_json("important", {"config_hash": run.hash, "C": svm.C, "ids": imp.ids,
                                 "alphas": [float(a) for a in imp.alphas],
                                 "n_support": int(len(svm.support_indices))})
    featureid.save_features(feats, run.path("features"))
    run.record(stage, ["important", "features"])
    return {"important_samples": len(imp), "features": [f.token for f in feats]}


def _feature_groups(features):
    groups = {}
    for f in features:
        groups.setdefault(f.category, []).append(f.token)
    return [(cat, groups[cat]) for cat in CATEGORY_ORDER if cat in groups]


def gen_snippets(run):
    stage = "gen-snippets"
    features = featureid.load_features(run.require("features", stage))
    hosts = [s for s in run.split(stage).train if s.is_vulnerable]
    if not hosts:
        raise EatVulError("no vulnerable training samples to use as prompt hosts")
    client = run.generator()
    n_cand = run.config.get("generator", "candidates_per_category")
    rng = np.random.default_rng(run.config.get("seeds", "sampling"))
    records = []
    slot = 0
    for cat, tokens in _feature_groups(features):
        for j in range(n_cand):
            chosen = tokens if j == 0 else [tokens[(j - 1) % len(tokens)]]
            host = hosts[slot % len(hosts)]
            slot += 1
            bounds = attack.statement_boundaries(host.source, host.language)
            point = bounds[int(rng.integers(len(bounds)))] if bounds else 0
            prompt = snippetgen.build_prompt(chosen, host, point, variant=j % 4)
            rec = {"category": cat.value, "features": chosen, "host_id": host.id,
                   "insertion_point": point, "variant": j % 4}
            try:
                snip = snippetgen.generate_snippet(client, prompt)
                rec["raw_lines"] = len(snip.lines)
                if snip.over_length:
                    prompt = snippetgen.optimize_prompt(prompt)
                    snip = snippetgen.generate_snippet(client, prompt)
                rec.update(optimized=prompt.dense, prompt_hash=prompt.digest(),
                           lines=list(snip.lines), keywords=list(snip.keywords),
                           requested=list(snip.requested), provenance=dict(snip.provenance))
            except EatVulError as exc:
                rec["error"] = str(exc)
            records.append(rec)
    with open(run.path("candidates"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"candidates": {"config_hash": run.hash, "generator": client.id,
                                            "count": len(records)}}, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    run.record(stage, ["candidates"])
    return {"candidates": len(records), "errors": sum("error" in r for r in records)}


def _read_candidates(path):
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().split("\n") if ln.strip()]
    return json.loads(lines[0])["candidates"], [json.loads(ln) for ln in lines[1:]]


def build_pool(run):
    stage = "build-pool"
    header, records = _read_candidates(run.require("candidates", stage))
    by_id = {s.id: s for s in run.samples(stage)}
    pool = poolmod.AttackPool(config_hash=run.hash)
    rejects = []
    for rec in records:
        if "error" in rec:
            rejects.append({"host_id": rec["host_id"], "features": rec["features"],
                            "reason": rec["error"]})
            continue
        snip = snippetgen.Snippet(tuple(rec["lines"]), tuple(rec["keywords"]),
                                  tuple(rec["requested"]), (),
                                  tuple(sorted(rec["provenance"].items())))
        host = by_id[rec["host_id"]]
        try:
            pool.add(snippetgen.apply_suffixes(snip, host), host)
        except (PoolError, SuffixError) as exc:
            reasons = exc.report.failures if getattr(exc, "report", None) is not None else []
            rejects.append({"host_id": rec["host_id"], "features": rec["features"],
                            "reason": str(exc), "failures": reasons})
    if not len(pool):
        raise EatVulError("every candidate snippet was rejected; see pool_rejects.jsonl")
    poolmod.save(pool, run.path("pool"))
    with open(os.path.join(run.out, "pool_rejects.jsonl"), "w", encoding="utf-8") as fh:
        for r in rejects:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    run.record(stage, ["pool"])
    return {"pool": len(pool), "rejected": len(rejects),
            "categories": {c.value: len(v) for c, v in pool.by_category.items() if v}}


def fga_config(config):
    f = config.get("fga")
    size = config.get("attack", "snippet_size")
    return fga.FgaConfig(K=f["K"], alpha=f["alpha"], lam=f["lambda"], epsilon=f["epsilon"],
                         population_size=f["population_size"],
                         max_generations=f["max_generations"],
                         max_genome_len=max(1, min(f["max_genome_len"], size)),
                         seed=config.get("seeds", "fga"), max_queries=f["max_queries"],
                         location_policy=config.get("attack", "location_policy"),
                         location_seed=config.get("seeds", "location"))


def confirmed_vulnerable(victim, samples):
    cases = sorted((s for s in samples if s.is_vulnerable), key=lambda s: s.id)
    return [s for s in cases if victim.predict(s) >= attack.THRESHOLD]


def _check_pool_hash(run, pool, stage):
    if pool.config_hash != run.hash:
        raise ConfigError(f"{stage}: pool.jsonl was built under config {pool.config_hash}, "
                          f"current config is {run.hash}")


def run_fga_stage(run):
    stage = "run-fga"
    pool = run.pool(stage)
    _check_pool_hash(run, pool, stage)
    victim = run.victim(stage)
    group = confirmed_vulnerable(victim, run.split(stage).test)
    if not group:
        raise EatVulError("the victim classifies no vulnerable test case as vulnerable")
    fc = fga_config(run.config)
    result = fga.run_fga(fc, pool, group, victim)
    with open(run.path("fga_log"), "w", encoding="utf-8") as fh:
        for entry in result.log:
            fh.write(json.dumps(dict(entry, config_hash=run.hash), sort_keys=True) + "\n")
    top = [{"genome": list(i.genome), "score": i.score if i.valid else None,
            "asr": i.last_asr, "total_lines": i.total_lines} for i in result.population[:10]]
    run.write_json("fga_result", {"config_hash": run.hash, "fga": fc.to_json(),
                                  "victim": run.config.get("victim", "kind"),
                                  "group": [s.id for s in group],
                                  "best_genome": list(result.best.genome), "top": top,
                                  "partial": result.partial, "reason": result.reason,
                                  "queries_used": result.queries_used})
    run.record(stage, ["fga_log", "fga_result"])
    return {"best_genome": list(result.best.genome), "best_asr": result.best.last_asr,
            "generations": len(result.log) - 1, "partial": result.partial}


def attack_stage(run):
    stage = "attack"
    if not os.path.exists(run.path("fga_result")) or not os.path.exists(run.path("pool")):
        raise MissingArtifactError("attack requires generation log / pool "
                                   "(run `build-pool` and `run-fga` first)")
    fres = run.read_json("fga_result", stage)
    pool = run.pool(stage)
    for name, h in (("fga_result.json", fres["config_hash"]), ("pool.jsonl", pool.config_hash)):
        if h != run.hash:
            raise ConfigError(f"attack: {name} was produced under config {h}, "
                              f"current config is {run.hash}")
    sp = run.split(stage)
    victim = run.victim(stage)
    f1_before = attack.compute_f1(victim, sp.test)
    start = victim.query_count
    ac = run.config.get("attack")
    vuln = [s for s in sp.test if s.is_vulnerable]
    outcome = attack.evade(victim, vuln, fres["best_genome"], ac["snippet_size"], pool,
                           seed=run.config.get("seeds", "location"),
                           location_policy=ac["location_policy"],
                           single_location=ac["single_location"])
    queries = victim.query_count - start
    f1_after = attack.compute_f1(victim, sp.test)
    results = outcome.results
    topk = {}
    n_eval = sum(r.evaluated for r in results)
    for k in ac["topk"]:
        topk[str(k)] = attack.compute_topk(results, int(k)) if int(k) <= n_eval else None
    metrics = {"asr": attack.compute_asr(results), "topk": topk, "clean_f1": f1_before,
               "clean_f1_after_attack": f1_after, "snippet_size": ac["snippet_size"],
               "genome": list(outcome.genome), "config_hash": run.hash,
               "seeds": run.config.get("seeds"), "query_count": queries,
               "victim": run.config.get("victim", "kind"), "evaluated": n_eval,
               "excluded": outcome.excluded,
               "unevaluated": [r.sample_id for r in results if not r.evaluated]}
    run.write_json("metrics", metrics)
    with open(run.path("results"), "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    run.record(stage, ["metrics", "results"])
    return metrics


def project_stage(run):
    stage = "project"
    model = run.surrogate(stage)
    pool = run.pool(stage)
    fres = run.read_json("fga_result", stage)
    sp = run.split(stage)
    size = run.config.get("attack", "snippet_size")
    genome = attack.fit_genome(fres["best_genome"], size, pool,
                               run.config.get("seeds", "location")) if size else ()
    rows, labels, flags = [], [], []
    for s in sp.test:
        rows.append(s)
        labels.append(s.label)
        flags.append(False)
    if genome:
        for s in sp.test:
            if not s.is_vulnerable:
                continue
            try:
                adv, _ = attack.insert(s, genome, pool, run.config.get("attack", "location_policy"),
                                       run.config.get("seeds", "location"))
            except EatVulError:
                continue
            rows.append(adv)
            labels.append(s.label)
            flags.append(True)
    X = model.representations(corpus.tokenize_all(rows))
    attack.export_projection(X, labels, flags, run.path("projection"),
                             run.config.get("projection", "method"),
                             run.config.get("seeds", "sampling"))
    run.record(stage, ["projection"])
    return {"points": len(rows), "adversarial": sum(flags)}


def report_stage(run, figures=True):
    stage = "report"
    manifest = run.manifest()
    hashes = {name: entry["config_hash"] for name, entry in manifest["stages"].items()
              if name != "report"}
    metrics = run.read_json("metrics", stage)
    embedded = {"metrics.json": metrics["config_hash"],
                "fga_result.json": run.read_json("fga_result", stage)["config_hash"],
                "pool.jsonl": run.pool(stage).config_hash,
                "split.json": run.read_json("split", stage)["config_hash"]}
    meta = SurrogateModel.read_meta(run.require("surrogate", stage))
    embedded["surrogate.npz"] = meta.get("extra", {}).get("config_hash")
    seen = set(hashes.values()) | set(embedded.values())
    if len(seen) != 1:
        raise ConfigError(f"refusing to aggregate artifacts from different configs: "
                          f"stages {hashes}, artifacts {embedded}")
    with open(run.require("fga_log", stage), encoding="utf-8") as fh:
        gen_log = [json.loads(ln) for ln in fh if ln.strip()]
    features = featureid.load_features(run.require("features", stage))
    pool = run.pool(stage)
    report = {
        "config_hash": run.hash,
        "config": run.config.hashed_view(),
        "metrics": {k: metrics[k] for k in ("asr", "topk", "clean_f1", "clean_f1_after_attack",
                                            "snippet_size", "query_count", "evaluated",
                                            "excluded", "genome")},
        "features": [f.to_json() for f in features],
        "pool": {"size": len(pool), "version": pool.version,
                 "categories": {c.value: len(v) for c, v in pool.by_category.items() if v}},
        "fga": {"generations": len(gen_log) - 1,
                "best_score": gen_log[-1]["best_score"], "best_asr": gen_log[-1]["best_asr"],
                "queries_used": gen_log[-1]["queries_used"]},
        "artifacts": {name: entry["artifacts"] for name, entry in sorted(manifest["stages"].items())
                      if name != "report"},
    }
    run.write_json("report", report)
    if figures:
        from .plotting import render_figures

        report_figs = render_figures(run.out, gen_log, metrics,
                                     run.path("projection") if os.path.exists(run.path("projection"))
                                     else None)
        log.info("figures written: %s", report_figs)
    run.record(stage, ["report"])
    return report


STAGES = {
    "ingest": ingest,
    "train-surrogate": train_surrogate,
    "extract-features": extract_features,
    "gen-snippets": gen_snippets,
    "build-pool": build_pool,
    "run-fga": run_fga_stage,
    "attack": attack_stage,
    "project": project_stage,
    "report": report_stage,
}
ORDER = list(STAGES)


def run_all(run, dataset=None, figures=True):
    out = {}
    for name in ORDER:
        if name == "ingest":
            out[name] = ingest(run, dataset)
        elif name == "report":
            out[name] = report_stage(run, figures)
        else:
            out[name] = STAGES[name](run)
    return out
