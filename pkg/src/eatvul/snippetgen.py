"""Prompt construction, generator clients, identifier hygiene and snippet validation."""

import hashlib
import json
import os
import re
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field, replace

from .errors import GenerationError, LexError, ProtocolError, RetryableError, SuffixError
from .featureid import KeywordCategory, categorize
from .lexer import lex

MAX_LINES = 8
CONTEXT_WINDOW = 5

CONTEXT_PHRASES = (
    "Given the partial preceding/succeeding codes as:",
    "With the partial preceding/following codes provided as:",
    "In light of the incomplete preceding/following codes as:",
    "Taking into account the limited preceding/succeeding codes as:",
)
SEVERAL_LINES = "Please generate several lines in {lang}"
DENSE = "Please generate the codes in dense format"
LANG_NAMES = {"c": "C", "cpp": "C++", "java": "Java"}

# identifiers that name library entities rather than program state
KNOWN_GLOBALS = frozenset("stdin stdout stderr errno".split())


# ---------------------------------------------------------------- identifiers

def _is_constant(name):
    return name.isupper() or bool(re.fullmatch(r"[A-Z][A-Z0-9_]*", name))


def identifier_roles(tokens):
    """Classify identifier tokens of a lexed fragment.

    Returns ``(variables, callees, others)`` as sets. Callees are names
    directly followed by ``(``; member names after ``.``/``->``, ALL-CAPS
    constants, typedef-style type names and well-known globals are "others".
    Only variables take part in the data-dependency check and in renaming.
    """
    variables, callees, others = set(), set(), set()
    for k, tok in enumerate(tokens):
        if tok.kind != "ident":
            continue
        name = tok.text
        nxt = tokens[k + 1].text if k + 1 < len(tokens) else ""
        prev = tokens[k - 1].text if k > 0 else ""
        if prev in (".", "->"):
            others.add(name)
        elif nxt == "(" and categorize(name) is not KeywordCategory.DATA_TYPE:
            callees.add(name)
        elif (_is_constant(name) or name in KNOWN_GLOBALS or name.endswith("_t")
              or categorize(name) is KeywordCategory.DATA_TYPE):
            others.add(name)
        else:
            variables.add(name)
    return variables, callees - variables, others


def _role_of(name, tokens):
    """condition / loop / var, by where the identifier appears."""
    roles = set()
    depth = 0
    header = None
    for k, tok in enumerate(tokens):
        if tok.text in ("if", "while", "switch", "for") and tok.kind == "keyword":
            if k + 1 < len(tokens) and tokens[k + 1].text == "(":
                header = ("loop" if tok.text == "for" else "condition", depth)
        elif tok.text == "(":
            depth += 1
        elif tok.text == ")":
            depth -= 1
            if header and depth == header[1]:
                header = None
        elif tok.kind == "ident" and tok.text == name and header and depth > header[1]:
            roles.add(header[0])
    if "condition" in roles:
        return "condition"
    if "loop" in roles:
        return "loop"
    return "var"


# ---------------------------------------------------------------- data types

@dataclass(frozen=True)
class PromptSpec:
    features: tuple
    context_before: str = ""
    context_after: str = ""
    context_variant: int = 0
    language: str = "c"
    max_lines: int = MAX_LINES
    dense: bool = False
    several_lines: bool = False
    rename_map: tuple = ()  # sorted (old, new) pairs

    @property
    def categories(self):
        return tuple(categorize(f) for f in self.features)

    @property
    def constraints(self):
        return {"max_lines": self.max_lines, "dense": self.dense,
                "several_lines": self.several_lines, "rename_map": dict(self.rename_map)}

    @property
    def query(self):
        lang = LANG_NAMES.get(self.language, "C")
        clauses = [_clause(f) for f in self.features]
        if len(clauses) > 1:
            body = ", ".join(clauses[:-1]) + ", and " + clauses[-1]
        else:
            body = clauses[0]
        if self.several_lines:
            parts = [SEVERAL_LINES.format(lang=lang) + f" that contain {body}."]
        else:
            parts = [f"Please generate a function in {lang} that contains {body}."]
        if self.several_lines and self.rename_map:
            olds = [o for o, _ in self.rename_map]
            news = ['"%s"' % n for _, n in self.rename_map]
            if len(olds) == 1:
                parts.append(f"Define {olds[0]} as an external structure and rename it as {news[0]}.")
            else:
                parts.append(f"Define {' and '.join(olds)} as external structures and rename them "
                             f"as {' and '.join(news)}.")
        if self.dense:
            parts.append(DENSE + ".")
        return " ".join(parts)

    @property
    def text(self):
        """The rendered <Context> <Query> <Context> prompt."""
        return "\n".join([CONTEXT_PHRASES[self.context_variant], self.context_before,
                          self.query, self.context_after])

    def digest(self):
        return hashlib.sha256(self.text.encode()).hexdigest()[:16]


_CONTROL_CLAUSES = {
    "for": "a loop", "while": "a loop", "do": "a loop",
    "if": "a conditional statement", "else": "a conditional statement",
    "switch": "a switch statement", "case": "a switch statement",
    "default": "a switch statement", "goto": "a goto jump",
}


def _clause(token):
    cat = categorize(token)
    if cat is KeywordCategory.CONTROL_STATEMENT:
        return _CONTROL_CLAUSES.get(token, f"a {token} statement")
    if cat is KeywordCategory.STORAGE_CLASS:
        return f"a {token} variable"
    if cat is KeywordCategory.DATA_TYPE:
        return f"a {token} variable"
    if cat is KeywordCategory.INPUT_OUTPUT:
        return f"a call to {token}"
    if cat is KeywordCategory.MISCELLANEOUS:
        if token == "NULL":
            return "a pointer initialized with NULL"
        return f"a {token} expression" if token in ("sizeof", "typeof") else f"a {token} statement"
    if token in _BUF_CALLS or token in _IO_CALLS:
        return f"a call to {token}"
    return f"an identifier named {token}"


@dataclass(frozen=True)
class Snippet:
    lines: tuple
    keywords: tuple = ()
    requested: tuple = ()
    suffix_map: tuple = ()  # sorted (original, suffixed) pairs
    provenance: tuple = ()  # sorted (key, value) pairs
    language: str = "c"
    max_lines: int = MAX_LINES

    @property
    def text(self):
        return "\n".join(self.lines)

    @property
    def over_length(self):
        return len(self.lines) > self.max_lines

    @property
    def categories(self):
        return tuple(sorted({categorize(k).value for k in self.keywords}))

    def meta(self, key, default=None):
        return dict(self.provenance).get(key, default)

    def tokens(self):
        return [t.value for t in lex(self.text, self.language)]

    def normalized(self):
        return " ".join(self.tokens())

    def with_provenance(self, **kwargs):
        prov = dict(self.provenance)
        prov.update(kwargs)
        return replace(self, provenance=tuple(sorted(prov.items())))


@dataclass
class ValidationReport:
    ok: bool
    failures: list = field(default_factory=list)

    def __bool__(self):
        return self.ok


# ---------------------------------------------------------------- prompts

def _body_lines(host):
    return host.source.rstrip("\n").split("\n")


def build_prompt(features, host, insertion_point, variant=0, rename_map=None, max_lines=MAX_LINES):
    """Prompt around ``insertion_point`` (snippet goes after that 0-based host line)."""
    tokens = [f.token if hasattr(f, "token") else f for f in features]
    if not tokens:
        raise ValueError("at least one feature is required")
    if not 0 <= variant < len(CONTEXT_PHRASES):
        raise ValueError(f"variant must be in 0..{len(CONTEXT_PHRASES) - 1}")
    lines = _body_lines(host)
    cut = max(0, min(insertion_point + 1, len(lines)))
    before = lines[max(0, cut - CONTEXT_WINDOW):cut]
    after = lines[cut:cut + CONTEXT_WINDOW]
    return PromptSpec(tuple(dict.fromkeys(tokens)), "\n".join(before), "\n".join(after), variant,
                      host.language, max_lines,
                      rename_map=tuple(sorted((rename_map or {}).items())))


def optimize_prompt(prompt):
    """Add the several-lines request, the rename instruction and the dense-format clause."""
    return replace(prompt, several_lines=True, dense=True)


# ---------------------------------------------------------------- clients

class GeneratorClient:
    id = "generator"
    deterministic = False

    def generate(self, prompt):
        raise NotImplementedError


TEMPLATE_VERSION = 1
_STEMS = ("adv", "spare", "aux", "pad")

_IO_CALLS = {
    "printf": 'printf("%d", {v});',
    "fprintf": 'fprintf(stderr, "%d", {v});',
    "puts": 'puts("");',
    "putchar": "putchar({v});",
    "scanf": 'scanf("%d", &{v});',
    "sscanf": 'sscanf("0", "%d", &{v});',
    "fscanf": 'fscanf(stdin, "%d", &{v});',
    "getchar": "{v} = getchar();",
    "perror": 'perror("");',
    "fflush": "fflush(stdout);",
}
_BUF_CALLS = {
    "snprintf": 'snprintf({b}, sizeof({b}), "%d", {v});',
    "sprintf": 'sprintf({b}, "%d", {v});',
    "fgets": "fgets({b}, sizeof({b}), stdin);",
    "gets": "gets({b});",
    "strncpy": 'strncpy({b}, "", sizeof({b}) - 1);',
    "strcpy": 'strcpy({b}, "");',
    "strcat": 'strcat({b}, "");',
    "strncat": 'strncat({b}, "", 1);',
    "memset": "memset({b}, 0, sizeof({b}));",
    "memcpy": 'memcpy({b}, "", 1);',
    "memmove": 'memmove({b}, "", 1);',
    "strlen": "{v} = (int)strlen({b});",
    "strstr": '{v} = strstr({b}, "") != NULL;',
    "strchr": "{v} = strchr({b}, 'a') != NULL;",
    "strrchr": "{v} = strrchr({b}, 'a') != NULL;",
    "strcmp": '{v} = strcmp({b}, "");',
    "strncmp": '{v} = strncmp({b}, "", 1);',
    "atoi": "{v} = atoi({b});",
}
_TYPES = ("int", "char", "short", "long", "float", "double", "unsigned", "signed", "size_t",
          "bool", "_Bool", "void")
_QUALIFIERS = ("const", "volatile")
_STORAGE = ("static", "extern", "register", "auto")


class OfflineGenerator(GeneratorClient):
    """Deterministic template-backed generator.

    Output is a pure function of the requested features, the context
    variant, the prompt constraints and :data:`TEMPLATE_VERSION`.
    Unoptimized prompts get a verbose wrapped function (well over the line
    limit); optimized prompts get dense in-function statements.
    """

    id = f"offline-v{TEMPLATE_VERSION}"
    deterministic = True

    def generate(self, prompt):
        names = _NameSource(_STEMS[prompt.context_variant % len(_STEMS)])
        stmts = _statements(list(prompt.features), names)
        if prompt.context_variant % 2:
            stmts.reverse()
        text = "\n".join(stmts)
        for old, new in prompt.rename_map:
            text = re.sub(rf"\b{re.escape(old)}\b", new, text)
        if prompt.dense:
            return text
        return _verbose(text.split("\n"), prompt.language)


class _NameSource:
    def __init__(self, stem):
        self.stem = stem
        self.n = 0

    def __call__(self):
        name = f"{self.stem}_{self.n}"
        self.n += 1
        return name


def _statements(features, names):
    feats = list(features)
    stmts = []
    decl = [f for f in feats if f in _STORAGE or f in _QUALIFIERS or f in _TYPES]
    if decl:
        storage = [f for f in decl if f in _STORAGE]
        quals = [f for f in decl if f in _QUALIFIERS]
        types = [f for f in decl if f in _TYPES]
        v = names()
        base = " ".join(types) if types else "int"
        if base == "void":
            base, declarator, init = "void", f"*{v}", "NULL"
        elif types == ["unsigned"] or types == ["signed"]:
            base, declarator, init = base + " int", v, "0"
        else:
            declarator, init = v, "0"
        head = " ".join(storage + quals + [base])
        if "extern" in storage:
            stmts.append(f"{head} {declarator};")
        else:
            stmts.append(f"{head} {declarator} = {init};")
        feats = [f for f in feats if f not in decl]
    for tok in feats:
        stmts.append(_template(tok, names))
    return stmts


def _template(tok, names):
    v = names()
    if tok in ("for",):
        return f"for (int {v} = 0; {v} < 1; {v}++) {{ }}"
    if tok in ("while",):
        return f"int {v} = 0; while ({v} < 1) {{ {v}++; }}"
    if tok == "do":
        return f"int {v} = 0; do {{ {v}++; }} while ({v} < 1);"
    if tok in ("if", "else"):
        return f"int {v} = 0; if ({v} > 1) {{ {v} = 1; }} else {{ {v} = 0; }}"
    if tok in ("switch", "case", "default"):
        return f"int {v} = 0; switch ({v}) {{ case 1: {v} = 2; break; default: break; }}"
    if tok == "goto":
        return f"goto {v}; {v}: ;"
    if tok == "struct":
        return f"struct {{ int first; int second; }} {v} = {{ 0, 0 }};"
    if tok == "union":
        return f"union {{ int first; float second; }} {v};"
    if tok == "enum":
        return f"enum {{ {v.upper()}_A, {v.upper()}_B }} {v} = {v.upper()}_A;"
    if tok == "typedef":
        return f"typedef int {v}_t;"
    if tok == "sizeof":
        return f"size_t {v} = sizeof(int);"
    if tok == "typeof":
        return f"typeof(int) {v} = 0;"
    if tok == "NULL":
        return f"void *{v} = NULL;"
    if tok == "return":
        return f"int {v} = 0; if ({v}) {{ return {v}; }}"
    if tok in ("break", "continue"):
        return f"for (int {v} = 0; {v} < 1; {v}++) {{ {tok}; }}"
    if tok in _IO_CALLS:
        return f"int {v} = 0; if ({v}) {{ {_IO_CALLS[tok].format(v=v)} }}"
    if tok in _BUF_CALLS:
        b = names()
        return f"char {b}[8] = \"\"; int {v} = 0; if ({v}) {{ {_BUF_CALLS[tok].format(v=v, b=b)} }}"
    if categorize(tok) is KeywordCategory.OTHER:
        # user-level identifier: declare it as otherwise unused state
        return f"int {tok} = 0; {tok}++;"
    return f"int {v} = 0; if ({v}) {{ (void){tok}; }}"


def _verbose(stmts, language):
    lang = LANG_NAMES.get(language, "C")
    out = [f"// Example {lang} code generated on request", "#include <stdio.h>",
           "#include <string.h>", "", "void generated_example(void)", "{"]
    for stmt in stmts:
        for piece in re.split(r"(?<=[;{}])\s+", stmt):
            out.append(f"    // step: {piece.split()[0]}")
            out.append(f"    {piece}")
            out.append("")
    out += ["}", "", "int main(void)", "{", "    generated_example();", "    return 0;", "}"]
    return "\n".join(out)


class RemoteGenerator(GeneratorClient):
    """HTTP generator: POST {prompt, temperature: 0.0} -> {text}; every exchange is logged."""

    deterministic = False

    def __init__(self, url=None, key=None, timeout=30.0, retries=3, backoff=0.5,
                 max_in_flight=4, replay_log=None):
        self.url = url or os.environ.get("EATVUL_GEN_URL")
        if not self.url:
            raise ValueError("no generator URL given and EATVUL_GEN_URL is unset")
        self.key = key if key is not None else os.environ.get("EATVUL_GEN_KEY")
        self.id = f"remote:{self.url}"
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.replay_log = replay_log
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._log_lock = threading.Lock()

    def _post(self, payload):
        req = urllib.request.Request(self.url, data=json.dumps(payload).encode(), method="POST",
                                     headers={"Content-Type": "application/json"})
        if self.key:
            req.add_header("Authorization", f"Bearer {self.key}")
        try:
            with self._slots, urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = resp.read()
        except urllib.error.HTTPError as exc:
            if exc.code >= 500 or exc.code == 429:
                raise RetryableError(f"generator returned HTTP {exc.code}") from None
            raise ProtocolError(f"generator returned HTTP {exc.code}") from None
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise RetryableError(f"generator request failed: {exc}") from None
        try:
            return str(json.loads(body)["text"])
        except (ValueError, KeyError, TypeError):
            raise ProtocolError(f"malformed generator response: {body[:200]!r}") from None

    def generate(self, prompt):
        payload = {"prompt": prompt.text, "temperature": 0.0}
        delay = self.backoff
        for attempt in range(self.retries):
            try:
                text = self._post(payload)
                break
            except RetryableError:
                if attempt == self.retries - 1:
                    raise
                time.sleep(delay)
                delay *= 2
        if self.replay_log:
            rec = {"prompt_hash": prompt.digest(), "request": payload, "response": {"text": text}}
            with self._log_lock, open(self.replay_log, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return text


class ReplayGenerator(GeneratorClient):
    deterministic = True

    def __init__(self, replay_log):
        self.id = f"replay:{os.path.basename(replay_log)}"
        self._answers = {}
        with open(replay_log, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    self._answers[rec["prompt_hash"]] = rec["response"]["text"]

    def generate(self, prompt):
        try:
            return self._answers[prompt.digest()]
        except KeyError:
            raise GenerationError(f"no recorded response for prompt {prompt.digest()}") from None


# ---------------------------------------------------------------- snippets

_FENCE = re.compile(r"```[a-zA-Z+]*\n(.*?)```", re.S)


def parse_snippet_text(raw):
    m = _FENCE.search(raw)
    if m:
        raw = m.group(1)
    lines = [ln.rstrip() for ln in raw.split("\n") if ln.strip()]
    if lines:
        indent = min(len(ln) - len(ln.lstrip()) for ln in lines)
        lines = [ln[indent:] for ln in lines]
    return tuple(lines)


def generate_snippet(client, prompt):
    raw = client.generate(prompt)
    lines = parse_snippet_text(raw)
    if not lines:
        raise GenerationError("generator returned no code", raw)
    try:
        toks = {t.value for t in lex("\n".join(lines), prompt.language)}
    except LexError as exc:
        raise GenerationError(f"unparseable generator output: {exc}", raw) from None
    keywords = tuple(f for f in prompt.features if f in toks)
    prov = {"generator": client.id, "prompt_hash": prompt.digest(),
            "variant": prompt.context_variant}
    return Snippet(lines, keywords, tuple(prompt.features), (), tuple(sorted(prov.items())),
                   prompt.language, prompt.max_lines)


def _rewrite(text, language, mapping):
    out = []
    last = 0
    for tok in lex(text, language):
        if tok.kind == "ident" and tok.text in mapping:
            out.append(text[last:tok.offset])
            out.append(mapping[tok.text])
            last = tok.offset + len(tok.text)
    out.append(text[last:])
    return "".join(out)


def host_identifiers(host_source, language="c"):
    toks = lex(host_source, language)
    variables, _, _ = identifier_roles(toks)
    return variables, {t.text for t in toks if t.kind == "ident"}


def apply_suffixes(snippet, host, taken=()):
    """Rename snippet variables that also occur in ``host`` with a role suffix.

    ``taken`` holds extra names to avoid (e.g. identifiers of snippets
    already inserted into the same host).
    """
    source = host.source if hasattr(host, "source") else str(host)
    toks = lex(snippet.text, snippet.language)
    variables, _, _ = identifier_roles(toks)
    _, host_all = host_identifiers(source, snippet.language)
    blocked = host_all | set(taken)
    snippet_all = {t.text for t in toks if t.kind == "ident"}
    mapping = {}
    for name in sorted(variables & blocked):
        role = _role_of(name, toks)
        for attempt in range(1, 4):
            cand = f"{name}_{role}" + ("" if attempt == 1 else str(attempt))
            if cand not in blocked and cand not in snippet_all and cand not in mapping.values():
                mapping[name] = cand
                break
        else:
            raise SuffixError(f"could not find a collision-free name for {name!r}")
    if not mapping:
        return snippet
    text = _rewrite(snippet.text, snippet.language, mapping)
    lines = tuple(text.split("\n"))
    toks_after = {t.value for t in lex(text, snippet.language)}
    keywords = tuple(k for k in snippet.requested if k in toks_after)
    # compose with earlier renames so the map still leads from the generated name
    merged = {old: mapping.get(mid, mid) for old, mid in snippet.suffix_map}
    earlier = {mid for _, mid in snippet.suffix_map}
    merged.update((name, new) for name, new in mapping.items() if name not in earlier)
    return replace(snippet, lines=lines, keywords=keywords, suffix_map=tuple(sorted(merged.items())))


_PAIRS = {")": "(", "]": "[", "}": "{"}


def well_formed(snippet):
    """Lexical compilability proxy; returns a list of problems (empty when fine)."""
    try:
        toks = lex(snippet.text, snippet.language)
    except LexError as exc:
        return [f"lex error: {exc}"]
    if not toks:
        return ["empty snippet"]
    problems = []
    stack = []
    for tok in toks:
        if tok.text == "#" and tok.kind == "punct":
            problems.append("preprocessor directive inside snippet")
            break
        if tok.text in "([{" and tok.kind == "punct":
            stack.append(tok.text)
        elif tok.text in _PAIRS and tok.kind == "punct":
            if not stack or stack[-1] != _PAIRS[tok.text]:
                problems.append(f"unbalanced {tok.text!r} at offset {tok.offset}")
                break
            stack.pop()
    if stack and not problems:
        problems.append(f"unclosed {stack[-1]!r}")
    if toks[-1].text not in (";", "}"):
        problems.append("snippet does not end with ';' or '}'")
    return problems


def validate_snippet(snippet, host, taken=()):
    source = host.source if hasattr(host, "source") else str(host)
    failures = list(well_formed(snippet))
    if len(snippet.lines) > snippet.max_lines:
        failures.append(f"too long: {len(snippet.lines)} lines > {snippet.max_lines}")
    try:
        toks = lex(snippet.text, snippet.language)
        variables, callees, others = identifier_roles(toks)
        host_vars, host_all = host_identifiers(source, snippet.language)
        shared = (variables & (host_all | set(taken))) | (host_vars & (variables | others))
        if shared:
            failures.append(f"data dependency on host identifiers: {sorted(shared)}")
        present = {t.value for t in toks}
        renamed = dict(snippet.suffix_map)
        # a requested identifier that suffixing renamed is still covered by its new name
        missing = [k for k in snippet.requested
                   if k not in present and renamed.get(k) not in present]
        if missing:
            failures.append(f"missing requested keywords: {missing}")
    except LexError:
        pass  # already reported by well_formed
    return ValidationReport(not failures, failures)
