"""Deterministic synthetic corpus used by the bundled demo and the test suite.

Vulnerable functions carry an unchecked copy (``strcpy``, ``memcpy``, ...)
plus plain twins of the safe idioms; non-vulnerable ones carry bounded
idioms built from ``static``, ``const``, ``sizeof``, ``snprintf`` and
friends. Everything else is shared filler, so a bag-of-tokens victim
trained on it learns negative weights for the safety keywords rather than
for generic tokens.
"""

import numpy as np

from .corpus import NONVULNERABLE, VULNERABLE, CodeSample

PARAMS = ["buf", "src", "data", "input", "name", "path", "msg", "line"]
LOCALS = ["tmp", "out", "dst", "copy", "field", "token"]
COUNTERS = ["i", "j", "n", "k"]

FILLER = [
    "{c} = {c} + 1;",
    "if ({len} > 0) {{ {c} = {len}; }}",
    "for ({c} = 0; {c} < {len}; {c}++) {{ total += {p}[{c}]; }}",
    "while ({c} < {len}) {{ {c}++; }}",
    "total = total * 2;",
    "if ({p} == NULL) {{ return -1; }}",
    "{c} = {len} - 1;",
]

UNSAFE = [
    "strcpy({l}, {p});",
    "memcpy({l}, {p}, {len});",
    "strcat({l}, {p});",
    "gets({l});",
    "sprintf({l}, \"%s\", {p});",
]

SAFE = [
    "static const int limit = 64;",
    "if ({len} >= (int)sizeof({l})) {{ return -1; }}",
    "strncpy({l}, {p}, sizeof({l}) - 1);",
    "snprintf({l}, sizeof({l}), \"%s\", {p});",
    "const char *end = {p} + sizeof({l});",
    "static unsigned int calls = 0;",
]

# generic-token twins of SAFE, sprinkled into vulnerable functions so that
# only the safety idioms themselves (not int/char/if) separate the classes
TWINS = [
    "int limit = 64;",
    "if ({len} >= 64) {{ return -1; }}",
    "{l}[0] = {p}[0];",
    "{l}[1] = {p}[1];",
    "char *end = {p} + 64;",
    "unsigned int calls = 0;",
]


def _function(rng, idx, vulnerable):
    p = PARAMS[rng.integers(len(PARAMS))]
    l = LOCALS[rng.integers(len(LOCALS))]
    c = COUNTERS[rng.integers(len(COUNTERS))]
    fmt = {"p": p, "l": l, "c": c, "len": "len"}
    body = [f"char {l}[64];", f"int {c} = 0;", "int total = 0;"]
    n_filler = int(rng.integers(2, 5))
    stmts = [FILLER[k].format(**fmt) for k in rng.choice(len(FILLER), n_filler, replace=False)]
    markers = UNSAFE if vulnerable else SAFE
    n_mark = int(rng.integers(1, 3)) if vulnerable else int(rng.integers(2, 4))
    for k in rng.choice(len(markers), n_mark, replace=False):
        stmts.insert(int(rng.integers(len(stmts) + 1)), markers[k].format(**fmt))
    if vulnerable:
        for k in rng.choice(len(TWINS), int(rng.integers(1, 4)), replace=False):
            stmts.insert(int(rng.integers(len(stmts) + 1)), TWINS[k].format(**fmt))
    if rng.random() < 0.1:
        # project-unique helper call: rare identifier the frequency floor should drop
        stmts.append(f"helper_{idx}({l});")
    body.extend(stmts)
    body.append("return total;")
    lines = [f"int func_{idx}(char *{p}, int len)", "{"] + ["    " + s for s in body] + ["}"]
    return "\n".join(lines) + "\n"


def make_corpus(n_vulnerable=200, n_nonvulnerable=200, seed=7):
    rng = np.random.default_rng(seed)
    samples = []
    labels = [VULNERABLE] * n_vulnerable + [NONVULNERABLE] * n_nonvulnerable
    for idx in rng.permutation(len(labels)):
        label = labels[idx]
        sid = f"syn-{idx:04d}"
        samples.append(CodeSample(sid, _function(rng, int(idx), label == VULNERABLE), label, "c"))
    samples.sort(key=lambda s: s.id)
    return samples


FIG4_EXCERPT = """static int parse_option(const char *buf, int *out)
{
    static const char *key = "level";
    const char *val = strstr(buf, key);
    if (val == NULL) {
        return -1;
    }
    val = strchr(val, '=');
    if (val != NULL && sscanf(val + 1, "%d", out) == 1) {
        return 0;
    }
    return -1;
}
"""
