"""Soft-margin linear SVM (SMO on the dual) and important-sample extraction.

Labels are encoded nonvulnerable -> -1, vulnerable -> +1.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import SvmError

SV_TOL = 1e-6


@dataclass
class SvmModel:
    w: np.ndarray
    b: float
    C: float
    alphas: np.ndarray
    X: np.ndarray
    y: np.ndarray
    tol: float = SV_TOL
    iterations: int = 0

    @property
    def support_indices(self):
        return np.flatnonzero(self.alphas > self.tol)

    def decision_function(self, X):
        return np.asarray(X, dtype=float) @ self.w + self.b

    def predict(self, X):
        return np.where(self.decision_function(X) >= 0, 1, -1)

    @property
    def slack(self):
        return np.maximum(0.0, 1.0 - self.y * self.decision_function(self.X))

    def kkt_residuals(self):
        """Complementary-slackness residuals (alpha-side, C-side)."""
        margin = self.y * self.decision_function(self.X)
        xi = self.slack
        return self.alphas * (margin - 1.0 + xi), (self.C - self.alphas) * xi


@dataclass
class ImportantSampleSet:
    ids: list
    representations: np.ndarray
    alphas: np.ndarray
    samples: list = field(default_factory=list)

    def __len__(self):
        return len(self.ids)


def labels_to_signs(samples):
    return np.array([1.0 if s.is_vulnerable else -1.0 for s in samples])


def _select_pair(G, y, alphas, C, Q_diag, K, eps):
    """Second-order working-set selection (maximal violating pair with curvature)."""
    up = ((y > 0) & (alphas < C)) | ((y < 0) & (alphas > 0))
    low = ((y > 0) & (alphas > 0)) | ((y < 0) & (alphas < C))
    score = -y * G
    if not up.any() or not low.any():
        return None
    i = int(np.flatnonzero(up)[np.argmax(score[up])])
    g_max = score[i]
    g_min = score[low].min()
    if g_max - g_min < eps:
        return None
    cand = low & (score < g_max)
    idx = np.flatnonzero(cand)
    diff = g_max - score[idx]
    curv = Q_diag[i] + Q_diag[idx] - 2.0 * K[i, idx]
    curv = np.where(curv > 1e-12, curv, 1e-12)
    j = int(idx[np.argmax(diff * diff / curv)])
    return i, j


def train_svm(X, y, C=1.0, tol=1e-5, sv_tol=SV_TOL, max_iter=200000):
    """Train a linear soft-margin SVM by SMO with second-order pair selection."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) != len(y):
        raise SvmError("X must be 2-D with one row per label")
    if len(X) < 2:
        raise SvmError("need at least two points")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise SvmError("inputs contain non-finite values")
    if not set(np.unique(y)).issubset({-1.0, 1.0}):
        raise SvmError("labels must be -1 or +1")
    if len(np.unique(y)) < 2:
        raise SvmError("both classes must be present")
    if not C > 0:
        raise SvmError("C must be positive")
    n = len(y)
    K = X @ X.T
    Q_diag = np.diag(K).copy()
    alphas = np.zeros(n)
    G = -np.ones(n)  # gradient of the dual objective 1/2 a'Qa - 1'a
    it = 0
    while it < max_iter:
        pair = _select_pair(G, y, alphas, C, Q_diag, K, tol)
        if pair is None:
            break
        i, j = pair
        it += 1
        yi, yj = y[i], y[j]
        eta = max(Q_diag[i] + Q_diag[j] - 2.0 * K[i, j], 1e-12)
        # move along d_i = y_i, d_j = -y_j
        step = (-yi * G[i] + yj * G[j]) / eta
        ai, aj = alphas[i], alphas[j]
        max_i = C - ai if yi > 0 else ai
        max_j = aj if yj > 0 else C - aj
        step = min(step, max_i, max_j)
        new_ai = ai + yi * step
        new_aj = aj - yj * step
        new_ai = min(max(new_ai, 0.0), C)
        new_aj = min(max(new_aj, 0.0), C)
        da_i, da_j = new_ai - ai, new_aj - aj
        alphas[i], alphas[j] = new_ai, new_aj
        G += (y * yi * K[:, i]) * da_i + (y * yj * K[:, j]) * da_j
    w = (alphas * y) @ X
    b = _bias(alphas, y, X @ w, C)
    return SvmModel(w, b, float(C), alphas, X, y, sv_tol, it)


def _bias(alphas, y, wx, C):
    free = (alphas > 1e-8) & (alphas < C - 1e-8)
    if free.any():
        return float(np.mean(y[free] - wx[free]))
    # no free vectors: midpoint of the feasible interval for b
    r = y - wx
    lo_mask = ((y > 0) & (alphas < 1e-8)) | ((y < 0) & (alphas > C - 1e-8))
    hi_mask = ((y > 0) & (alphas > C - 1e-8)) | ((y < 0) & (alphas < 1e-8))
    lo = r[lo_mask].max() if lo_mask.any() else -np.inf
    hi = r[hi_mask].min() if hi_mask.any() else np.inf
    if np.isfinite(lo) and np.isfinite(hi):
        return float((lo + hi) / 2)
    return float(lo if np.isfinite(lo) else hi if np.isfinite(hi) else 0.0)


def important_samples(model, samples):
    """Non-vulnerable support vectors, ordered by descending dual coefficient."""
    if len(samples) != len(model.y):
        raise SvmError("samples must align 1:1 with the SVM training rows")
    idx = [i for i in model.support_indices if model.y[i] < 0]
    if any(samples[i].is_vulnerable for i in idx):
        raise SvmError("sample labels disagree with the SVM training labels")
    if not idx:
        raise SvmError("no non-vulnerable support vectors; try adjusting C")
    idx.sort(key=lambda i: (-model.alphas[i], i))
    return ImportantSampleSet([samples[i].id for i in idx], model.X[idx].copy(),
                              model.alphas[idx].copy(), [samples[i] for i in idx])
