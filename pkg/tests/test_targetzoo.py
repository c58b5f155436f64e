import json
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eatvul.corpus import NONVULNERABLE, VULNERABLE, CodeSample, build_vocab, split, tokenize_all
from eatvul.errors import BudgetExhausted, ProtocolError, RetryableError, TrainingError
from eatvul.surrogate import SurrogateConfig, train
from eatvul.synthetic import make_corpus
from eatvul.targetzoo import (CONCURRENT, BagOfTokensVictim, BowConfig, BudgetedOracle,
                              ReplayVictim, remote_victim, surrogate_as_victim, train_bow_victim)

SAMPLE = CodeSample("s", "int f(void)\n{\n    return 0;\n}\n", VULNERABLE)


@pytest.fixture(scope="module")
def synthetic():
    sp = split(make_corpus(60, 60, seed=7), 0)
    return sp, build_vocab(tokenize_all(sp.train))


def test_separable_corpus_trains_well(synthetic):
    sp, vocab = synthetic
    victim = train_bow_victim(sp, vocab)
    acc = np.mean([(victim.predict(s) >= 0.5) == s.is_vulnerable for s in sp.train])
    assert acc >= 0.95


def test_zero_iterations_uniform(synthetic):
    sp, vocab = synthetic
    victim = train_bow_victim(sp, vocab, BowConfig(iterations=0))
    assert {victim.predict(s) for s in sp.test} == {0.5}


def test_single_class_rejected(synthetic):
    sp, vocab = synthetic
    only = type(sp)([s for s in sp.train if s.is_vulnerable], [], [])
    with pytest.raises(TrainingError):
        train_bow_victim(only, vocab)


def test_training_deterministic(synthetic):
    sp, vocab = synthetic
    assert train_bow_victim(sp, vocab).to_json() == train_bow_victim(sp, vocab).to_json()


def test_learned_safety_weights_negative(synthetic):
    sp, vocab = synthetic
    victim = train_bow_victim(sp, vocab)
    for tok in ("sizeof", "static", "snprintf"):
        assert victim.weight(tok) < 0
    for tok in ("strcpy", "memcpy"):
        assert victim.weight(tok) > 0


def test_negative_token_lowers_borderline_probability():
    victim = BagOfTokensVictim({"edge": 0.1, "calm": -0.5})
    base = CodeSample("b", "edge ( ) ;", VULNERABLE)
    more = CodeSample("b", "edge ( ) ; calm ( ) ;", VULNERABLE)
    assert victim.predict(more) < victim.predict(base)


def test_presence_not_counts():
    victim = BagOfTokensVictim({"edge": 1.0})
    assert victim.predict(CodeSample("a", "edge;", VULNERABLE)) == victim.predict(
        CodeSample("b", "edge; edge; edge;", VULNERABLE))


def test_unknown_tokens_use_unk_weight():
    victim = BagOfTokensVictim({"a": 1.0}, bias=0.0, unk_weight=-1.0, known=["a"])
    assert victim.weight("zzz") == -1.0 and victim.weight("a") == 1.0


def test_json_round_trip():
    victim = BagOfTokensVictim({"a": 1.5, "b": -2.0}, 0.25, -0.1, ["a", "b"])
    again = BagOfTokensVictim.from_json(json.loads(json.dumps(victim.to_json())))
    assert again.to_json() == victim.to_json()


def test_non_finite_weights_rejected():
    with pytest.raises(ValueError):
        BagOfTokensVictim({"a": float("nan")})


@settings(max_examples=50)
@given(st.lists(st.sampled_from(["aa", "bb", "cc", "dd"]), max_size=10))
def test_query_count_increments_once(tokens):
    victim = BagOfTokensVictim({"aa": 1.0, "bb": -1.0})
    for k, tok in enumerate(tokens):
        victim.predict(CodeSample(str(k), tok + ";", VULNERABLE))
        assert victim.query_count == k + 1


def test_counter_is_atomic():
    victim = BagOfTokensVictim({})
    threads = [threading.Thread(target=lambda: [victim.predict(SAMPLE) for _ in range(200)])
               for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert victim.query_count == 1600


def test_budget_exact():
    oracle = BudgetedOracle(BagOfTokensVictim({}), 5)
    for _ in range(5):
        oracle.predict(SAMPLE)
    with pytest.raises(BudgetExhausted):
        oracle.predict(SAMPLE)
    assert oracle.query_count == 5


def test_surrogate_wrapper_matches_model(memcpy_split):
    sp, vocab = memcpy_split
    model = train(sp, vocab, SurrogateConfig(embed_dim=4, hidden_dim=4, attn_dim=4, epochs=1))
    victim = surrogate_as_victim(model)
    assert victim.concurrency == CONCURRENT
    for s in sp.test:
        assert victim.predict(s) == model.predict_proba(s)
    assert victim.query_count == len(sp.test)


# ---------------------------------------------------------------- remote

def test_remote_echo(fixture_server, tmp_path):
    fixture_server.script = [(200, {"probability": 0.9})]
    log = tmp_path / "victim.jsonl"
    victim = remote_victim(fixture_server.url, auth="tok", replay_log=str(log))
    assert victim.predict(SAMPLE) == 0.9
    req = fixture_server.requests[0]
    assert req["body"] == {"source": SAMPLE.source, "language": "c"}
    assert req["auth"] == "Bearer tok"
    assert ReplayVictim(str(log)).predict(SAMPLE) == 0.9


def test_remote_from_environment(fixture_server, monkeypatch):
    fixture_server.script = [(200, {"probability": 0.25})]
    monkeypatch.setenv("EATVUL_VICTIM_URL", fixture_server.url)
    monkeypatch.setenv("EATVUL_VICTIM_KEY", "envkey")
    assert remote_victim().predict(SAMPLE) == 0.25
    assert fixture_server.requests[0]["auth"] == "Bearer envkey"


def test_remote_requires_url(monkeypatch):
    monkeypatch.delenv("EATVUL_VICTIM_URL", raising=False)
    with pytest.raises(ValueError):
        remote_victim()


def test_three_timeouts_surface_retryable(fixture_server):
    fixture_server.delay = 0.5
    fixture_server.script = [(200, {"probability": 0.5})]
    victim = remote_victim(fixture_server.url, timeout=0.1, backoff=0.01)
    with pytest.raises(RetryableError):
        victim.predict(SAMPLE)
    assert len(fixture_server.requests) == 3


def test_server_errors_retried(fixture_server):
    fixture_server.script = [(502, {}), (503, {}), (200, {"probability": 0.4})]
    assert remote_victim(fixture_server.url, backoff=0.01).predict(SAMPLE) == 0.4
    assert len(fixture_server.requests) == 3


@pytest.mark.parametrize("body", [b"<html>", {"prob": 0.5}, {"probability": "high"},
                                  {"probability": 1.7}])
def test_malformed_responses(fixture_server, body):
    fixture_server.script = [(200, body)]
    with pytest.raises(ProtocolError):
        remote_victim(fixture_server.url, backoff=0).predict(SAMPLE)


def test_client_error_not_retried(fixture_server):
    fixture_server.script = [(401, {})]
    with pytest.raises(ProtocolError):
        remote_victim(fixture_server.url, backoff=0).predict(SAMPLE)
    assert len(fixture_server.requests) == 1


def test_replay_without_network(fixture_server, tmp_path):
    log = tmp_path / "v.jsonl"
    samples = [CodeSample(f"r{i}", f"int f{i};", NONVULNERABLE) for i in range(5)]
    fixture_server.script = [(200, {"probability": 0.125})]
    live = remote_victim(fixture_server.url, replay_log=str(log))
    first = [live.predict(s) for s in samples]
    fixture_server.close()
    replay = ReplayVictim(str(log))
    assert [replay.predict(s) for s in samples] == first
    with pytest.raises(ProtocolError):
        replay.predict(CodeSample("new", "int unseen;", VULNERABLE))


def test_black_box_surface():
    # the attack path only uses predict, query_count and concurrency
    import inspect

    from eatvul import attack, fga

    src = inspect.getsource(attack) + inspect.getsource(fga)
    for forbidden in (".weight(", "._weights", ".params", "logit("):
        assert forbidden not in src
