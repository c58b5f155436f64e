"""Lexer for C, C++ and Java function bodies.

Only lexical structure is recovered: keywords, identifiers, literals,
operators and punctuation. Literals collapse to the ``NUM``/``STR``
sentinels so the vocabulary stays language-level.
"""

import re
from dataclasses import dataclass

from .errors import LexError

NUM = "NUM"
STR = "STR"

C_KEYWORDS = frozenset("""
auto break case char const continue default do double else enum extern float
for goto if inline int long register restrict return short signed sizeof static
struct switch typedef typeof union unsigned void volatile while _Bool _Complex
_Alignas _Alignof _Atomic _Generic _Noreturn _Static_assert _Thread_local
""".split())

CPP_KEYWORDS = C_KEYWORDS | frozenset("""
alignas alignof and asm bool catch class constexpr const_cast decltype delete
dynamic_cast explicit export false friend mutable namespace new noexcept not
nullptr operator or private protected public reinterpret_cast static_assert
static_cast template this throw true try typeid typename using virtual wchar_t
""".split())

JAVA_KEYWORDS = frozenset("""
abstract assert boolean break byte case catch char class const continue default
do double else enum extends final finally float for goto if implements import
instanceof int interface long native new package private protected public
return short static strictfp super switch synchronized this throw throws
transient try void volatile while true false null var
""".split())

KEYWORDS = {"c": C_KEYWORDS, "cpp": CPP_KEYWORDS, "java": JAVA_KEYWORDS}

# longest first so the alternation is greedy
_OPERATORS = sorted("""
>>>= <<= >>= >>> ... -> ++ -- << >> <= >= == != && || += -= *= /= %= &= |= ^=
:: + - * / % < > = ! ~ & | ^ ? : . @
""".split(), key=len, reverse=True)
_PUNCT = set("(){}[];,#")

_IDENT = re.compile(r"[A-Za-z_$][A-Za-z0-9_$]*")
_NUMBER = re.compile(
    r"(?:0[xX][0-9a-fA-F']+|0[bB][01']+|(?:\d[\d']*\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"[uUlLfFdD]*"
)
_OP = re.compile("|".join(re.escape(op) for op in _OPERATORS))
_SPACE = re.compile(r"\s+")
# encoding prefixes on string/char literals
_PREFIX = re.compile(r"(?:u8|u|U|L)(?=[\"'])")


@dataclass(frozen=True)
class Token:
    kind: str  # keyword | ident | num | str | op | punct
    text: str
    offset: int

    @property
    def value(self):
        """Normalized text as it appears in token lists."""
        if self.kind == "num":
            return NUM
        if self.kind == "str":
            return STR
        return self.text


def supported(language):
    return language in KEYWORDS


def _scan_quoted(source, start, quote):
    i = start + 1
    n = len(source)
    while i < n:
        ch = source[i]
        if ch == "\\":
            i += 2
            continue
        if ch == quote:
            return i + 1
        if ch == "\n":
            break
        i += 1
    kind = "string" if quote == '"' else "character"
    raise LexError(f"unterminated {kind} literal", start)


def lex(source, language="c"):
    """Split ``source`` into :class:`Token` objects, dropping comments and whitespace."""
    if language not in KEYWORDS:
        raise ValueError(f"unsupported language: {language!r}")
    keywords = KEYWORDS[language]
    tokens = []
    i, n = 0, len(source)
    while i < n:
        m = _SPACE.match(source, i)
        if m:
            i = m.end()
            continue
        ch = source[i]
        if source.startswith("//", i):
            end = source.find("\n", i)
            i = n if end < 0 else end
            continue
        if source.startswith("/*", i):
            end = source.find("*/", i + 2)
            if end < 0:
                raise LexError("unterminated block comment", i)
            i = end + 2
            continue
        if language != "java":
            m = _PREFIX.match(source, i)
            if m:
                end = _scan_quoted(source, m.end(), source[m.end()])
                tokens.append(Token("str", source[i:end], i))
                i = end
                continue
        if ch in "\"'":
            end = _scan_quoted(source, i, ch)
            tokens.append(Token("str", source[i:end], i))
            i = end
            continue
        if ch.isdigit() or (ch == "." and i + 1 < n and source[i + 1].isdigit()):
            m = _NUMBER.match(source, i)
            tokens.append(Token("num", m.group(), i))
            i = m.end()
            continue
        m = _IDENT.match(source, i)
        if m:
            word = m.group()
            kind = "keyword" if word in keywords else "ident"
            tokens.append(Token(kind, word, i))
            i = m.end()
            continue
        if ch in _PUNCT:
            tokens.append(Token("punct", ch, i))
            i += 1
            continue
        m = _OP.match(source, i)
        if m:
            tokens.append(Token("op", m.group(), i))
            i = m.end()
            continue
        # stray characters (backticks, non-ASCII) are kept as single-char punctuation
        tokens.append(Token("punct", ch, i))
        i += 1
    return tokens


def tokenize(source, language="c"):
    """Return the normalized token strings of ``source``."""
    return [tok.value for tok in lex(source, language)]


def is_word(token):
    """True for keyword/identifier-like token strings (usable as generation keywords)."""
    return bool(_IDENT.fullmatch(token)) and token not in (NUM, STR)
