"""BiLSTM + single-head self-attention surrogate classifier in numpy.

Forward and backward passes are written out by hand so that the gradient
of the cross-entropy loss can be checked against finite differences.
Padded positions are masked out of the recurrence (state is carried
through them unchanged) and out of the attention keys and queries.
"""

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import PAD_INDEX, Vocabulary, tokenized
from .errors import CheckpointError, TrainingError

log = logging.getLogger(__name__)

FORGET_BIAS = 0.0
PARAM_NAMES = ("embedding", "fwd_Wx", "fwd_Wh", "fwd_b", "bwd_Wx", "bwd_Wh", "bwd_b",
               "Wq", "Wk", "Wv", "Wo", "bo")


@dataclass(frozen=True)
class SurrogateConfig:
    embed_dim: int = 32
    hidden_dim: int = 32
    attn_dim: int = 32
    max_seq_len: int = 512
    epochs: int = 6
    learning_rate: float = 0.01
    batch_size: int = 16
    seed: int = 0
    optimizer: str = "adam"
    clip_norm: float = 0.0

    def __post_init__(self):
        for name in ("embed_dim", "hidden_dim", "attn_dim", "max_seq_len", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class SurrogateModel:
    config: SurrogateConfig
    vocab: Vocabulary
    params: dict
    eval_losses: list = field(default_factory=list)
    train_losses: list = field(default_factory=list)

    @property
    def seed(self):
        return self.config.seed

    def encode(self, sample):
        sample = tokenized(sample)
        if not sample.tokens:
            raise ValueError(f"sample {sample.id!r} has no tokens")
        return self.vocab.encode(sample.tokens[: self.config.max_seq_len])

    def forward(self, samples):
        ids, mask = pad_batch([self.encode(s) for s in samples])
        return forward(self.params, ids, mask)

    def predict_proba(self, sample):
        return float(self.forward([sample])["prob"][0, 1])

    def predict_proba_batch(self, samples, batch_size=64):
        out = []
        for i in range(0, len(samples), batch_size):
            out.extend(self.forward(samples[i:i + batch_size])["prob"][:, 1])
        return np.array(out, dtype=float)

    def attention_scores(self, sample):
        cache = self.forward([sample])
        n = int(cache["mask"][0].sum())
        return cache["attn"][0, :n].copy()

    def final_representation(self, sample):
        return self.forward([sample])["z"][0].copy()

    def representations(self, samples, batch_size=64):
        rows = [self.forward(samples[i:i + batch_size])["z"]
                for i in range(0, len(samples), batch_size)]
        return np.vstack(rows) if rows else np.zeros((0, self.config.attn_dim))

    def save(self, path, extra=None):
        meta = {"config": asdict(self.config), "vocab_hash": self.vocab.digest(),
                "eval_losses": self.eval_losses, "train_losses": self.train_losses,
                "extra": extra or {}}
        arrays = {f"param_{k}": v for k, v in self.params.items()}
        with open(path, "wb") as fh:
            np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)

    @staticmethod
    def read_meta(path):
        with np.load(path, allow_pickle=False) as data:
            return json.loads(str(data["meta"]))

    @classmethod
    def load(cls, path, vocab):
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            params = {k[len("param_"):]: data[k].copy() for k in data.files if k.startswith("param_")}
        if meta["vocab_hash"] != vocab.digest():
            raise CheckpointError("checkpoint vocabulary hash does not match the supplied vocabulary")
        missing = set(PARAM_NAMES) - set(params)
        if missing:
            raise CheckpointError(f"checkpoint missing parameters: {sorted(missing)}")
        return cls(SurrogateConfig(**meta["config"]), vocab, params,
                   meta.get("eval_losses", []), meta.get("train_losses", []))


def pad_batch(sequences):
    n = len(sequences)
    t = max(len(s) for s in sequences)
    ids = np.full((n, t), PAD_INDEX, dtype=np.int64)
    mask = np.zeros((n, t))
    for i, seq in enumerate(sequences):
        ids[i, :len(seq)] = seq
        mask[i, :len(seq)] = 1.0
    return ids, mask


def init_params(vocab_size, config, dtype=np.float64):
    rng = np.random.default_rng(config.seed)
    e, h, d = config.embed_dim, config.hidden_dim, config.attn_dim

    def uni(shape, fan):
        bound = 1.0 / np.sqrt(fan)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    params = {"embedding": (rng.standard_normal((vocab_size, e)) * 0.1).astype(dtype)}
    params["embedding"][PAD_INDEX] = 0.0
    for side in ("fwd", "bwd"):
        params[f"{side}_Wx"] = uni((e, 4 * h), h)
        params[f"{side}_Wh"] = uni((h, 4 * h), h)
        b = np.zeros(4 * h, dtype=dtype)
        b[h:2 * h] = FORGET_BIAS
        params[f"{side}_b"] = b
    for name in ("Wq", "Wk", "Wv"):
        params[name] = uni((2 * h, d), 2 * h)
    params["Wo"] = uni((d, 2), d)
    params["bo"] = np.zeros(2, dtype=dtype)
    return params


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _lstm_forward(X, mask, Wx, Wh, b, reverse):
    n, t, _ = X.shape
    h_dim = Wh.shape[0]
    h = np.zeros((n, h_dim), dtype=X.dtype)
    c = np.zeros((n, h_dim), dtype=X.dtype)
    H = np.zeros((n, t, h_dim), dtype=X.dtype)
    steps = []
    xw = X @ Wx + b
    order = range(t - 1, -1, -1) if reverse else range(t)
    for s in order:
        m = mask[:, s:s + 1]
        zt = xw[:, s] + h @ Wh
        i = _sigmoid(zt[:, :h_dim])
        f = _sigmoid(zt[:, h_dim:2 * h_dim])
        g = np.tanh(zt[:, 2 * h_dim:3 * h_dim])
        o = _sigmoid(zt[:, 3 * h_dim:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        steps.append((s, h, c, i, f, g, o, tc))
        c = m * c_new + (1.0 - m) * c
        h = m * h_new + (1.0 - m) * h
        H[:, s] = h
    return H, steps


def _lstm_backward(dH, X, mask, Wx, Wh, steps):
    n, t, _ = X.shape
    h_dim = Wh.shape[0]
    dWx = np.zeros_like(Wx)
    dWh = np.zeros_like(Wh)
    db = np.zeros(Wx.shape[1], dtype=X.dtype)
    dX = np.zeros_like(X)
    dh_next = np.zeros((n, h_dim), dtype=X.dtype)
    dc_next = np.zeros((n, h_dim), dtype=X.dtype)
    for s, h_prev, c_prev, i, f, g, o, tc in reversed(steps):
        m = mask[:, s:s + 1]
        dh = dH[:, s] + dh_next
        dh_new = m * dh
        dc_new = m * dc_next + dh_new * o * (1.0 - tc * tc)
        do = dh_new * tc
        di = dc_new * g
        dg = dc_new * i
        df = dc_new * c_prev
        dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g),
                             do * o * (1 - o)], axis=1)
        dWx += X[:, s].T @ dz
        dWh += h_prev.T @ dz
        db += dz.sum(axis=0)
        dX[:, s] = dz @ Wx.T
        dh_next = dz @ Wh.T + (1.0 - m) * dh
        dc_next = dc_new * f + (1.0 - m) * dc_next
    return dX, dWx, dWh, db


def forward(params, ids, mask):
    """Full forward pass; returns a cache dict used by :func:`backward`."""
    mask = mask.astype(params["Wq"].dtype)
    X = params["embedding"][ids]
    Hf, steps_f = _lstm_forward(X, mask, params["fwd_Wx"], params["fwd_Wh"], params["fwd_b"], False)
    Hb, steps_b = _lstm_forward(X, mask, params["bwd_Wx"], params["bwd_Wh"], params["bwd_b"], True)
    H = np.concatenate([Hf, Hb], axis=2)
    d = params["Wq"].shape[1]
    Q = H @ params["Wq"]
    K = H @ params["Wk"]
    V = H @ params["Wv"]
    scores = Q @ K.transpose(0, 2, 1) / np.sqrt(d)
    key_ok = mask[:, None, :] > 0
    scores = np.where(key_ok, scores, -np.inf)
    scores = scores - scores.max(axis=2, keepdims=True)
    A = np.exp(scores)
    A = A / A.sum(axis=2, keepdims=True)
    lengths = mask.sum(axis=1, keepdims=True)
    row_w = mask / lengths
    attn = np.einsum("ni,nij->nj", row_w, A)
    z = np.einsum("nj,njd->nd", attn, V)
    logits = z @ params["Wo"] + params["bo"]
    logits = logits - logits.max(axis=1, keepdims=True)
    prob = np.exp(logits)
    prob = prob / prob.sum(axis=1, keepdims=True)
    return {"ids": ids, "mask": mask, "X": X, "H": H, "Q": Q, "K": K, "V": V, "A": A,
            "row_w": row_w, "attn": attn, "z": z, "prob": prob,
            "steps_f": steps_f, "steps_b": steps_b}


def cross_entropy(prob, labels):
    p = prob[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.clip(p, 1e-300, None))))


def backward(params, cache, labels):
    """Gradients of the mean cross-entropy w.r.t. every parameter."""
    n = len(labels)
    prob, z, V, A, Q, K, H = (cache[k] for k in ("prob", "z", "V", "A", "Q", "K", "H"))
    d = params["Wq"].shape[1]
    h_dim = params["fwd_Wh"].shape[0]
    grads = {}
    dlogits = prob.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    grads["Wo"] = z.T @ dlogits
    grads["bo"] = dlogits.sum(axis=0)
    dz = dlogits @ params["Wo"].T
    attn = cache["attn"]
    dV = attn[:, :, None] * dz[:, None, :]
    dattn = np.einsum("njd,nd->nj", V, dz)
    dA = cache["row_w"][:, :, None] * dattn[:, None, :]
    dS = A * (dA - (A * dA).sum(axis=2, keepdims=True))
    dQ = dS @ K / np.sqrt(d)
    dK = dS.transpose(0, 2, 1) @ Q / np.sqrt(d)
    for name, dM in (("Wq", dQ), ("Wk", dK), ("Wv", dV)):
        grads[name] = np.einsum("nti,ntj->ij", H, dM)
    dH = dQ @ params["Wq"].T + dK @ params["Wk"].T + dV @ params["Wv"].T
    X, mask = cache["X"], cache["mask"]
    dX = np.zeros_like(X)
    for side, dHs, steps in (("fwd", dH[:, :, :h_dim], cache["steps_f"]),
                             ("bwd", dH[:, :, h_dim:], cache["steps_b"])):
        dXs, dWx, dWh, db = _lstm_backward(dHs, X, mask, params[f"{side}_Wx"],
                                           params[f"{side}_Wh"], steps)
        dX += dXs
        grads[f"{side}_Wx"], grads[f"{side}_Wh"], grads[f"{side}_b"] = dWx, dWh, db
    dE = np.zeros_like(params["embedding"])
    np.add.at(dE, cache["ids"].ravel(), dX.reshape(-1, dX.shape[2]))
    grads["embedding"] = dE
    return grads


def loss_and_grads(params, ids, mask, labels):
    cache = forward(params, ids, mask)
    return cross_entropy(cache["prob"], labels), backward(params, cache, labels)


class _Optimizer:
    """Adam (default) or plain gradient descent with optional norm clipping."""

    def __init__(self, params, config, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.config = config
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def __call__(self, grads):
        cfg = self.config
        if cfg.clip_norm:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > cfg.clip_norm:
                grads = {k: g * (cfg.clip_norm / norm) for k, g in grads.items()}
        if cfg.optimizer == "sgd":
            for k, g in grads.items():
                self.params[k] -= cfg.learning_rate * g
            return
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            self.params[k] -= cfg.learning_rate * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _labels(samples):
    return np.array([1 if s.is_vulnerable else 0 for s in samples], dtype=np.int64)


def _batch_loss(params, encoded, labels, batch_size=64):
    total = 0.0
    for i in range(0, len(encoded), batch_size):
        ids, mask = pad_batch(encoded[i:i + batch_size])
        cache = forward(params, ids, mask)
        total += cross_entropy(cache["prob"], labels[i:i + batch_size]) * len(ids)
    return total / len(encoded)


def train(split, vocab, config=SurrogateConfig()):
    """Mini-batch gradient descent on cross-entropy; deterministic for a fixed seed."""
    train_set = [s for s in (tokenized(x) for x in split.train) if s.tokens]
    if not train_set:
        raise TrainingError("training partition is empty")
    labels = _labels(train_set)
    if len(set(labels.tolist())) < 2:
        raise TrainingError("training partition contains a single class")
    params = init_params(len(vocab), config)
    model = SurrogateModel(config, vocab, params)
    encoded = [model.encode(s) for s in train_set]
    eval_set = [s for s in (tokenized(x) for x in split.eval) if s.tokens]
    eval_encoded = [model.encode(s) for s in eval_set]
    eval_labels = _labels(eval_set)
    rng = np.random.default_rng(config.seed + 1)
    step = _Optimizer(params, config)
    for epoch in range(config.epochs):
        order = rng.permutation(len(encoded))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            ids, mask = pad_batch([encoded[i] for i in idx])
            loss, grads = loss_and_grads(params, ids, mask, labels[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            step(grads)
            params["embedding"][PAD_INDEX] = 0.0
            epoch_loss += loss * len(idx)
        model.train_losses.append(epoch_loss / len(order))
        if eval_encoded:
            model.eval_losses.append(_batch_loss(params, eval_encoded, eval_labels))
        log.debug("epoch %d train %.4f eval %s", epoch, model.train_losses[-1],
                  model.eval_losses[-1] if model.eval_losses else None)
    for name, value in params.items():
        if not np.all(np.isfinite(value)):
            raise TrainingError(f"parameter {name} is not finite after training")
    return model


def predict_proba(model, sample):
    return model.predict_proba(sample)


def attention_scores(model, sample):
    return model.attention_scores(sample)


def final_representation(model, sample):
    return model.final_representation(sample)
