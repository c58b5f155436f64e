import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eatvul import surrogate
from eatvul.corpus import CodeSample, DatasetSplit, VULNERABLE, build_vocab, tokenize_all
from eatvul.errors import CheckpointError, TrainingError
from eatvul.surrogate import SurrogateConfig, SurrogateModel, init_params, train

SMALL = SurrogateConfig(embed_dim=8, hidden_dim=8, attn_dim=8, epochs=8, batch_size=8, seed=1)


@pytest.fixture(scope="module")
def trained(memcpy_split):
    sp, vocab = memcpy_split
    return train(sp, vocab, SMALL)


def test_separable_corpus_accuracy(trained, memcpy_split):
    sp, _ = memcpy_split
    held = sp.eval + sp.test
    probs = trained.predict_proba_batch(tokenize_all(held))
    acc = np.mean([(p >= 0.5) == s.is_vulnerable for p, s in zip(probs, held)])
    assert acc >= 0.9


def test_held_out_memcpy_sample_is_vulnerable(trained, memcpy_split):
    sp, _ = memcpy_split
    for s in sp.test:
        if "memcpy" in s.source:
            assert trained.predict_proba(s) > 0.5


def test_attention_prefers_memcpy(trained, memcpy_split):
    sp, _ = memcpy_split
    on, off = [], []
    for s in tokenize_all(sp.train + sp.eval + sp.test):
        if "memcpy" not in s.source:
            continue
        attn = trained.attention_scores(s)
        for tok, w in zip(s.tokens, attn):
            (on if tok == "memcpy" else off).append(w)
    assert len(on) >= 30
    assert np.mean(on) > np.mean(off)


def test_probabilities_are_a_distribution(trained, memcpy_split):
    sp, _ = memcpy_split
    cache = trained.forward(tokenize_all(sp.test))
    assert np.all((cache["prob"] >= 0) & (cache["prob"] <= 1))
    np.testing.assert_allclose(cache["prob"].sum(axis=1), 1.0, atol=1e-6)


def test_zero_epochs_is_near_uniform(memcpy_split):
    sp, vocab = memcpy_split
    model = train(sp, vocab, SurrogateConfig(embed_dim=8, hidden_dim=8, attn_dim=8, epochs=0))
    probs = model.predict_proba_batch(tokenize_all(sp.test))
    assert abs(probs.mean() - 0.5) < 0.1
    assert model.train_losses == []


def test_training_is_deterministic(memcpy_split):
    sp, vocab = memcpy_split
    cfg = SurrogateConfig(embed_dim=4, hidden_dim=4, attn_dim=4, epochs=2, seed=9)
    a, b = train(sp, vocab, cfg), train(sp, vocab, cfg)
    for name in surrogate.PARAM_NAMES:
        np.testing.assert_array_equal(a.params[name], b.params[name])
    assert a.eval_losses == b.eval_losses and len(a.eval_losses) == 2


def test_single_class_training_rejected(memcpy_split):
    sp, vocab = memcpy_split
    vuln = [s for s in sp.train if s.is_vulnerable]
    with pytest.raises(TrainingError):
        train(DatasetSplit(vuln, [], []), vocab, SMALL)


def test_empty_token_list_rejected(trained):
    with pytest.raises(ValueError):
        trained.predict_proba(CodeSample("e", "/* nothing */", VULNERABLE))


def test_single_token_attention_is_one(trained):
    attn = trained.attention_scores(CodeSample("one", "memcpy", VULNERABLE))
    np.testing.assert_allclose(attn, [1.0])


def test_identical_samples_identical_vectors(trained):
    a = CodeSample("a", "int x = y;", VULNERABLE)
    b = CodeSample("b", "int x = y;", VULNERABLE)
    np.testing.assert_array_equal(trained.final_representation(a), trained.final_representation(b))


@pytest.mark.parametrize("length", [1, 7, 90])
def test_representation_width_is_value_dim(trained, length):
    s = CodeSample("w", " ".join(["x"] * length), VULNERABLE)
    assert trained.final_representation(s).shape == (SMALL.attn_dim,)


def test_representations_separable_by_svm(trained, memcpy_split):
    from eatvul.svmcore import labels_to_signs, train_svm

    sp, _ = memcpy_split
    data = tokenize_all(sp.train)
    X = trained.representations(data)
    y = labels_to_signs(data)
    svm = train_svm(X, y, C=10.0)
    assert np.mean(svm.predict(X) == y) >= 0.95


def test_truncation_never_rejects(memcpy_split):
    sp, vocab = memcpy_split
    cfg = SurrogateConfig(embed_dim=4, hidden_dim=4, attn_dim=4, max_seq_len=16, epochs=1)
    model = train(sp, vocab, cfg)
    long = CodeSample("long", "a = b; " * 200, VULNERABLE)
    assert len(model.attention_scores(long)) == 16
    assert 0.0 <= model.predict_proba(long) <= 1.0


def test_checkpoint_round_trip(trained, tmp_path):
    path = tmp_path / "model.npz"
    trained.save(path, extra={"config_hash": "abc"})
    again = SurrogateModel.load(path, trained.vocab)
    for name in surrogate.PARAM_NAMES:
        np.testing.assert_array_equal(again.params[name], trained.params[name])
    assert again.config == trained.config
    assert SurrogateModel.read_meta(path)["extra"] == {"config_hash": "abc"}


def test_checkpoint_vocab_mismatch(trained, tmp_path):
    path = tmp_path / "model.npz"
    trained.save(path)
    other = build_vocab(tokenize_all([CodeSample("z", "unrelated tokens;", VULNERABLE)]))
    with pytest.raises(CheckpointError):
        SurrogateModel.load(path, other)


def test_config_validation():
    with pytest.raises(ValueError):
        SurrogateConfig(embed_dim=0)


# ---------------------------------------------------------------- gradient check

def _numeric_grad(params, ids, mask, labels, name, eps=1e-6):
    grad = np.zeros_like(params[name])
    it = np.nditer(params[name], flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = params[name][idx]
        params[name][idx] = old + eps
        up = surrogate.cross_entropy(surrogate.forward(params, ids, mask)["prob"], labels)
        params[name][idx] = old - eps
        down = surrogate.cross_entropy(surrogate.forward(params, ids, mask)["prob"], labels)
        params[name][idx] = old
        grad[idx] = (up - down) / (2 * eps)
    return grad


def gradient_check(dim=5, tokens=8, seed=0):
    """Max relative error between analytic and central-difference gradients."""
    rng = np.random.default_rng(seed)
    cfg = SurrogateConfig(embed_dim=dim, hidden_dim=dim - 1, attn_dim=dim + 1, seed=seed)
    params = init_params(12, cfg, np.float64)
    for k in params:
        params[k] = params[k] + rng.normal(0, 0.3, params[k].shape)
    params["embedding"][0] = 0.0
    seqs = [list(rng.integers(2, 12, size=tokens)), list(rng.integers(2, 12, size=tokens - 3))]
    ids, mask = surrogate.pad_batch(seqs)
    labels = np.array([1, 0])
    _, grads = surrogate.loss_and_grads(params, ids, mask, labels)
    worst = 0.0
    for name in surrogate.PARAM_NAMES:
        num = _numeric_grad(params, ids, mask, labels, name)
        ana = grads[name]
        if name == "embedding":
            # row 0 is padding: its gradient is defined but never applied
            num, ana = num[1:], ana[1:]
        # entries whose true gradient is negligible carry only finite-difference noise
        sel = np.abs(num) + np.abs(ana) > 1e-5
        if sel.any():
            rel = np.abs(num - ana)[sel] / (np.abs(num) + np.abs(ana))[sel]
            worst = max(worst, float(np.max(rel)))
        assert np.max(np.abs(num - ana)) < 1e-8, name
    return worst


def test_gradient_check():
    assert gradient_check() < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(0, 10 ** 6))
def test_attention_rows_normalized(length, seed):
    rng = np.random.default_rng(seed)
    cfg = SurrogateConfig(embed_dim=6, hidden_dim=5, attn_dim=4, seed=seed % 1000)
    params = init_params(20, cfg)
    ids, mask = surrogate.pad_batch([list(rng.integers(2, 20, size=length)),
                                     list(rng.integers(2, 20, size=max(1, length // 2)))])
    cache = surrogate.forward(params, ids, mask)
    A = cache["A"]
    np.testing.assert_allclose(A.sum(axis=2), 1.0, atol=1e-6)
    assert np.all(cache["attn"] >= 0)
    np.testing.assert_allclose(cache["attn"].sum(axis=1), 1.0, atol=1e-6)
    # padded keys carry no weight
    assert np.all(cache["attn"][mask == 0] == 0)
