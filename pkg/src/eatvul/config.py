"""Run configuration: a fixed YAML key schema with defaults, flag overrides and a stable hash."""

import copy
import hashlib
import json

import yaml

from .errors import ConfigError

DEFAULTS = {
    "dataset": None,  # JSONL path; null selects the bundled synthetic corpus
    "synthetic": {"n_vulnerable": 200, "n_nonvulnerable": 200, "seed": 7},
    "seeds": {"split": 0, "surrogate": 0, "fga": 0, "location": 0, "sampling": 0},
    "split": {"fractions": [0.7, 0.15, 0.15]},
    "vocab": {"min_doc_freq": 1},
    "surrogate": {"embed_dim": 16, "hidden_dim": 16, "attn_dim": 16, "max_seq_len": 512,
                  "epochs": 2, "learning_rate": 0.01, "batch_size": 16,
                  "optimizer": "adam", "clip_norm": 0.0},
    "svm": {"C": 0.01},
    "features": {"top_n": 6, "min_doc_freq": 3},
    "generator": {"kind": "offline", "candidates_per_category": 5, "url": None,
                  "replay_log": None, "max_in_flight": 4},
    "pool": {"path": None},
    "fga": {"K": 4, "alpha": 2.0, "lambda": 0.01, "epsilon": 1e-3, "population_size": 30,
            "max_generations": 50, "max_genome_len": 4, "max_queries": None},
    "attack": {"snippet_size": 4, "location_policy": "uniform-random",
               "single_location": False, "topk": [5, 10, 15, 20]},
    "victim": {"kind": "bow", "url": None, "timeout": 10.0, "replay_log": None,
               "bow": {"iterations": 400, "learning_rate": 0.5, "l2": 1e-3}},
    "projection": {"method": "pca"},
}

# keys that name files; they do not take part in the config hash
PATH_KEYS = (("dataset",), ("pool", "path"), ("generator", "replay_log"),
             ("victim", "replay_log"), ("generator", "url"), ("victim", "url"))

CHOICES = {
    ("generator", "kind"): ("offline", "remote"),
    ("victim", "kind"): ("bow", "self", "remote"),
    ("attack", "location_policy"): ("uniform-random", "after-first-statement"),
    ("projection", "method"): ("pca", "tsne"),
    ("surrogate", "optimizer"): ("adam", "sgd"),
}


def _merge(base, override, trail=()):
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {'.'.join(trail + (key,))!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {'.'.join(trail + (key,))!r} must be a mapping")
            _merge(base[key], value, trail + (key,))
        else:
            base[key] = _typed(base[key], value, ".".join(trail + (key,)))
    return base


def _typed(default, value, name):
    if isinstance(default, bool) or not isinstance(default, (int, float)):
        return value
    if isinstance(default, float) and isinstance(value, str):
        # YAML 1.1 reads exponent floats without a dot (1e-3) as strings
        try:
            return float(value)
        except ValueError:
            pass
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"config key {name!r} must be a number, got {value!r}")
    return value


class RunConfig:
    def __init__(self, data=None):
        self.data = _merge(copy.deepcopy(DEFAULTS), data or {})
        self.validate()

    @classmethod
    def from_file(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
        return cls(data)

    def get(self, *keys):
        node = self.data
        for k in keys:
            node = node[k]
        return node

    def set(self, keys, value):
        node = self.data
        for k in keys[:-1]:
            node = node[k]
        node[keys[-1]] = value

    def override(self, seed=None, snippet_size=None, victim=None, generator=None):
        """Apply command-line flags (flags beat file values beat defaults)."""
        if seed is not None:
            for name in self.data["seeds"]:
                self.data["seeds"][name] = seed
        if snippet_size is not None:
            self.data["attack"]["snippet_size"] = snippet_size
        if victim is not None:
            self.data["victim"]["kind"] = victim
        if generator is not None:
            self.data["generator"]["kind"] = generator
        self.validate()
        return self

    def validate(self):
        for keys, allowed in CHOICES.items():
            if self.get(*keys) not in allowed:
                raise ConfigError(f"{'.'.join(keys)} must be one of {allowed}")
        if self.get("attack", "snippet_size") < 0:
            raise ConfigError("attack.snippet_size must be >= 0")
        fr = self.get("split", "fractions")
        if len(fr) != 3 or any(f <= 0 for f in fr) or abs(sum(fr) - 1) > 1e-9:
            raise ConfigError("split.fractions must be three positive numbers summing to 1")
        if any(int(k) < 1 for k in self.get("attack", "topk")):
            raise ConfigError("attack.topk entries must be >= 1")

    def hashed_view(self):
        view = copy.deepcopy(self.data)
        for keys in PATH_KEYS:
            node = view
            for k in keys[:-1]:
                node = node[k]
            node.pop(keys[-1], None)
        return view

    def digest(self):
        blob = json.dumps(self.hashed_view(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_yaml(self):
        return yaml.safe_dump(self.data, sort_keys=True)
