import json

import pytest
from hypothesis import given, settings, strategies as st

from eatvul import pool as poolmod
from eatvul.errors import PoolError
from eatvul.featureid import KeywordCategory
from eatvul.pool import AttackPool, sample_seeds
from eatvul.snippetgen import Snippet

SIX = ("static int q_a = 0;", "const int q_b = 1;", "if (q_a) {", "    q_a = q_b;", "}",
       "q_a++;")


def snip(lines, requested=(), **prov):
    toks = " ".join(lines)
    kw = tuple(k for k in requested if k in toks)
    return Snippet(tuple(lines), kw, tuple(requested),
                   provenance=tuple(sorted({"generator": "test", **prov}.items())))


def filled(n=5):
    p = AttackPool("cafe")
    for i in range(n):
        p.add(snip([f"static int z{i} = {i};"], ("static", "int")), _host())
    return p


def _host():
    from eatvul.corpus import VULNERABLE, CodeSample
    from conftest import HOST_SRC
    return CodeSample("host-1", HOST_SRC, VULNERABLE)


def test_add_and_retrieve(host):
    p = AttackPool()
    sid = p.add(snip(SIX, ("static", "const", "if")), host)
    assert sid == "s0001" and p.version == 1
    assert p[sid].lines == SIX
    assert p.hosts[sid] == "host-1" and p[sid].meta("host_id") == "host-1"
    assert sid in p.by_category[KeywordCategory.STORAGE_CLASS]
    assert sid in p.by_category[KeywordCategory.CONTROL_STATEMENT]


def test_nine_lines_rejected(host):
    p = AttackPool()
    with pytest.raises(PoolError) as info:
        p.add(snip([f"int q{i} = 0;" for i in range(9)]), host)
    assert any("too long" in f for f in info.value.report.failures)
    assert len(p) == 0 and p.version == 0


def test_duplicate_rejected(host):
    p = AttackPool()
    p.add(snip(SIX), host)
    # formatting differences do not defeat the dedup
    respaced = [ln.replace(" = ", "=") for ln in SIX]
    with pytest.raises(PoolError, match="duplicate of s0001"):
        p.add(snip(respaced), host)
    assert len(p) == 1


def test_round_trip(tmp_path):
    p = filled()
    poolmod.save(p, tmp_path / "pool.jsonl")
    q = poolmod.load(tmp_path / "pool.jsonl")
    assert q == p
    assert [q[s].text for s in q.ids()] == [p[s].text for s in p.ids()]
    # loaded pools keep rejecting duplicates
    with pytest.raises(PoolError):
        q.add(p["s0001"], _host())


def test_empty_round_trip(tmp_path):
    poolmod.save(AttackPool(), tmp_path / "e.jsonl")
    q = poolmod.load(tmp_path / "e.jsonl")
    assert len(q) == 0 and q == AttackPool()


def test_corrupted_line_named(tmp_path):
    path = tmp_path / "pool.jsonl"
    poolmod.save(filled(3), path)
    lines = path.read_text().split("\n")
    lines[2] = lines[2][:15]
    path.write_text("\n".join(lines))
    with pytest.raises(PoolError) as info:
        poolmod.load(path)
    assert info.value.line == 3 and "line 3" in str(info.value)


def test_schema_mismatch(tmp_path):
    path = tmp_path / "pool.jsonl"
    path.write_text(json.dumps({"pool": {"schema": 99, "version": 0, "count": 0}}) + "\n")
    with pytest.raises(PoolError, match="schema"):
        poolmod.load(path)


def test_record_shape(tmp_path):
    poolmod.save(filled(1), tmp_path / "p.jsonl")
    rec = json.loads((tmp_path / "p.jsonl").read_text().split("\n")[1])
    assert {"id", "lines", "keywords", "categories", "provenance"} <= set(rec)


def test_sample_seeds_full_permutation():
    p = filled(5)
    ids = sample_seeds(p, 5, seed=3)
    assert sorted(ids) == sorted(p.ids())


def test_sample_seeds_empty_category():
    with pytest.raises(PoolError):
        sample_seeds(filled(3), 1, category=KeywordCategory.INPUT_OUTPUT)


def test_sample_seeds_too_many():
    with pytest.raises(PoolError):
        sample_seeds(filled(3), 4)


def test_sample_seeds_deterministic():
    p = filled(6)
    assert sample_seeds(p, 3, seed=11) == sample_seeds(p, 3, seed=11)
    assert sample_seeds(p, 3, category="StorageClass", seed=1) == sample_seeds(
        p, 3, category=KeywordCategory.STORAGE_CLASS, seed=1)


def test_snapshot_is_isolated():
    p = filled(2)
    snap = p.snapshot()
    p.add(snip(["int fresh_q = 0;"]), _host())
    assert len(snap) == 2 and len(p) == 3


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 40), st.sampled_from(["static", "const", "int", "if"])),
                max_size=12))
def test_round_trip_preserves_everything(tmp_path_factory, items):
    host = _host()
    p = AttackPool("abc")
    for n, kw in items:
        if kw == "if":
            line = f"if (w{n}) {{ w{n}++; }}"
        else:
            line = f"{kw} int w{n} = 0;".replace("int int", "int")
        try:
            p.add(snip([line], (kw,)), host)
        except PoolError:
            pass
    path = tmp_path_factory.mktemp("pool") / "p.jsonl"
    poolmod.save(p, path)
    q = poolmod.load(path)
    assert q == p
    assert q.by_category == p.by_category
    for sid in p.ids():
        assert q[sid].text.encode() == p[sid].text.encode()
        for cat in p[sid].categories:
            assert sid in q.by_category[KeywordCategory(cat)]
