"""RBF-kernel SVM back-end: SMO training, Platt calibration and probability fusion."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (ConfigError, ConvergenceWarning, DegenerateInputError, FormatError,
                     IntegrityError, ShapeError)
from .rng import Rng

PLATT_ITERATIONS = 20


@dataclass
class EmbeddingSet:
    matrix: np.ndarray
    labels: np.ndarray
    system: str = ""
    ids: list = field(default_factory=list)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.matrix.ndim != 2 or self.labels.shape != (self.matrix.shape[0],):
            raise ShapeError(f"embedding matrix {self.matrix.shape} vs labels {self.labels.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise DegenerateInputError("embeddings contain non-finite values")

    def __len__(self):
        return self.matrix.shape[0]


@dataclass
class SvmModel:
    support_vectors: np.ndarray
    dual_coef: np.ndarray          # alpha_i * y_i
    bias: float
    gamma: float
    C: float
    platt_a: float = -1.0
    platt_b: float = 0.0
    train_alpha: np.ndarray | None = field(default=None, repr=False, compare=False)

    def decision_function(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return rbf_kernel_matrix(x, self.support_vectors, self.gamma) @ self.dual_coef + self.bias

    def predict_proba(self, x) -> np.ndarray:
        return platt_probability(self.decision_function(x), self.platt_a, self.platt_b)

    def predict(self, x) -> np.ndarray:
        return (self.decision_function(x) >= 0).astype(np.int64)


def rbf_kernel(x, y, gamma: float) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"kernel arguments differ in shape: {x.shape} vs {y.shape}")
    if gamma <= 0:
        raise ConfigError("gamma must be positive")
    return float(np.exp(-gamma * np.sum((x - y) ** 2)))


def rbf_kernel_matrix(a, b, gamma: float) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"kernel arguments differ in dimension: {a.shape[1]} vs {b.shape[1]}")
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


def default_gamma(x: np.ndarray) -> float:
    """``1 / (n_features * var(x))``, falling back to ``1 / n_features`` for constant data."""
    var = float(np.var(x))
    return 1.0 / (x.shape[1] * var) if var > 0 else 1.0 / x.shape[1]


def dual_objective(alpha, y, K) -> float:
    ay = alpha * y
    return float(alpha.sum() - 0.5 * ay @ K @ ay)


def smo_train(data: EmbeddingSet, C: float = 1.0, gamma: float | None = None, tol: float = 1e-3,
              max_passes: int = 200, seed: int = 0, trace: list | None = None) -> SvmModel:
    """Solve the C-SVM dual by SMO with maximal-violating-pair selection.

    Labels 1 map to ``y = +1`` and 0 to ``y = -1``. Iteration stops when the
    largest KKT violation gap ``m(alpha) - M(alpha)`` is below ``tol``; the
    budget is ``max_passes * n`` pair updates. When ``trace`` is a list the dual
    objective is appended after every update.
    """
    x = np.asarray(data.matrix, dtype=np.float64)
    labels = data.labels
    if set(np.unique(labels).tolist()) != {0, 1}:
        raise DegenerateInputError("SVM training needs both classes 0 and 1")
    if C <= 0:
        raise ConfigError("C must be positive")
    gamma = default_gamma(x) if gamma is None else float(gamma)
    y = np.where(labels == 1, 1.0, -1.0)
    n = y.size
    K = rbf_kernel_matrix(x, x, gamma)
    Q = K * np.outer(y, y)
    alpha = np.zeros(n)
    grad = -np.ones(n)                                   # gradient of 1/2 a'Qa - e'a
    rng = Rng(seed).generator
    budget = max_passes * n
    gap = np.inf
    for _ in range(budget):
        score = -y * grad
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        s_up = np.where(up, score, -np.inf)
        s_low = np.where(low, score, np.inf)
        m_val, big_m = s_up.max(), s_low.min()
        gap = m_val - big_m
        if gap < tol:
            break
        ties_i = np.flatnonzero(s_up == m_val)
        ties_j = np.flatnonzero(s_low == big_m)
        i = int(ties_i[rng.integers(ties_i.size)]) if ties_i.size > 1 else int(ties_i[0])
        j = int(ties_j[rng.integers(ties_j.size)]) if ties_j.size > 1 else int(ties_j[0])
        _update_pair(i, j, alpha, grad, y, Q, C)
        if trace is not None:
            trace.append(dual_objective(alpha, y, K))
    else:
        warnings.warn(f"SMO stopped after {budget} updates with KKT gap {gap:.3g} > tol {tol}",
                      ConvergenceWarning, stacklevel=2)
    bias = _bias(alpha, grad, y, C)
    sv = alpha > 0
    if not sv.any():
        raise DegenerateInputError("SVM training produced no support vectors")
    model = SvmModel(x[sv].copy(), (alpha * y)[sv].copy(), bias, gamma, float(C))
    scores = K[:, sv] @ model.dual_coef + bias
    model.platt_a, model.platt_b = platt_fit(scores, labels)
    model.train_alpha = alpha
    return model


def _update_pair(i, j, alpha, grad, y, Q, C):
    """Analytic two-variable update keeping ``sum(alpha * y)`` fixed (libsvm form)."""
    tau = 1e-12
    old_i, old_j = alpha[i], alpha[j]
    if y[i] != y[j]:
        quad = max(Q[i, i] + Q[j, j] + 2 * Q[i, j], tau)
        delta = (-grad[i] - grad[j]) / quad
        diff = old_i - old_j
        ai, aj = old_i + delta, old_j + delta
        if diff > 0 and aj < 0:
            aj, ai = 0.0, diff
        elif diff <= 0 and ai < 0:
            ai, aj = 0.0, -diff
        if diff > 0 and ai > C:
            ai, aj = C, C - diff
        elif diff <= 0 and aj > C:
            aj, ai = C, C + diff
    else:
        quad = max(Q[i, i] + Q[j, j] - 2 * Q[i, j], tau)
        delta = (grad[i] - grad[j]) / quad
        total = old_i + old_j
        ai, aj = old_i - delta, old_j + delta
        if total > C and ai > C:
            ai, aj = C, total - C
        elif total <= C and aj < 0:
            aj, ai = 0.0, total
        if total > C and aj > C:
            aj, ai = C, total - C
        elif total <= C and ai < 0:
            ai, aj = 0.0, total
    alpha[i], alpha[j] = ai, aj
    grad += Q[:, i] * (ai - old_i) + Q[:, j] * (aj - old_j)


def _bias(alpha, grad, y, C) -> float:
    """``b`` such that free support vectors sit on the margin (libsvm's ``-rho``)."""
    yg = y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        return float(-yg[free].mean())
    ub, lb = np.inf, -np.inf
    for t in range(y.size):
        at_upper = alpha[t] >= C
        at_lower = alpha[t] <= 0
        if (y[t] > 0 and at_upper) or (y[t] < 0 and at_lower):
            lb = max(lb, yg[t])
        elif (y[t] > 0 and at_lower) or (y[t] < 0 and at_upper):
            ub = min(ub, yg[t])
    return float(-(ub + lb) / 2)


def kkt_violations(model: SvmModel, x, labels, alpha=None) -> np.ndarray:
    """Per-sample KKT residual on the training set (0 means satisfied)."""
    alpha = model.train_alpha if alpha is None else alpha
    y = np.where(np.asarray(labels) == 1, 1.0, -1.0)
    margin = y * model.decision_function(x)
    C = model.C
    out = np.zeros_like(margin)
    at_zero = alpha <= 0
    at_c = alpha >= C
    free = ~at_zero & ~at_c
    out[at_zero] = np.maximum(0.0, 1.0 - margin[at_zero])
    out[at_c] = np.maximum(0.0, margin[at_c] - 1.0)
    out[free] = np.abs(margin[free] - 1.0)
    return out


def platt_probability(scores, a: float, b: float) -> np.ndarray:
    """``1 / (1 + exp(a*s + b))`` evaluated without overflow."""
    z = a * np.asarray(scores, dtype=np.float64) + b
    out = np.empty_like(z)
    pos = z >= 0
    ez = np.exp(-z[pos])
    out[pos] = ez / (1.0 + ez)
    out[~pos] = 1.0 / (1.0 + np.exp(z[~pos]))
    return out


def platt_fit(scores, labels, iterations: int = PLATT_ITERATIONS) -> tuple[float, float]:
    """Fit ``P(y=1|s) = 1 / (1 + exp(A s + B))`` by Newton's method with backtracking.

    Uses Platt's smoothed targets ``(N+ + 1)/(N+ + 2)`` and ``1/(N- + 2)``
    and a fixed number of Newton iterations.
    """
    s = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = labels.size - n_pos
    hi, lo = (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0)
    t = np.where(labels == 1, hi, lo)
    a, b = 0.0, float(np.log((n_neg + 1.0) / (n_pos + 1.0)))
    sigma, min_step = 1e-12, 1e-10

    def objective(a, b):
        z = a * s + b
        return float(np.sum(np.where(z >= 0, t * z + np.log1p(np.exp(-z)),
                                     (t - 1) * z + np.log1p(np.exp(z)))))

    fval = objective(a, b)
    for _ in range(iterations):
        p = platt_probability(s, a, b)          # P(y=1)
        q = 1.0 - p
        d2 = p * q
        h11 = sigma + np.dot(s * s, d2)
        h22 = sigma + d2.sum()
        h21 = np.dot(s, d2)
        d1 = t - p
        g1, g2 = np.dot(s, d1), d1.sum()
        if abs(g1) < 1e-5 and abs(g2) < 1e-5:
            break
        det = h11 * h22 - h21 * h21
        da = -(h22 * g1 - h21 * g2) / det
        db = -(-h21 * g1 + h11 * g2) / det
        gd = g1 * da + g2 * db
        step = 1.0
        while step >= min_step:
            na, nb = a + step * da, b + step * db
            nf = objective(na, nb)
            if nf < fval + 1e-4 * step * gd:
                a, b, fval = na, nb, nf
                break
            step /= 2
        else:
            break
    return float(a), float(b)


def decision_score(model: SvmModel, x) -> float:
    return float(model.decision_function(x)[0])


def predict_proba(model: SvmModel, x) -> float:
    return float(model.predict_proba(x)[0])


def fuse_probabilities(systems) -> np.ndarray:
    """Element-wise mean of per-system probability vectors."""
    arrays = [np.asarray(s, dtype=np.float64) for s in systems]
    if not arrays:
        raise ShapeError("fusion needs at least one system")
    lengths = {a.shape for a in arrays}
    if len(lengths) != 1:
        raise ShapeError(f"systems have mismatched lengths: {sorted(lengths)}")
    stacked = np.stack(arrays)
    if np.any(stacked < 0) or np.any(stacked > 1):
        raise ConfigError("probabilities must lie in [0, 1]")
    return stacked.mean(axis=0)


def decide(probabilities, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(probabilities) >= threshold).astype(np.int64)


# ------------------------------------------------------------- model file

SVM_MAGIC = b"PSVM"
SVM_VERSION = 1
_SVM_HEADER = struct.Struct("<4sHddddII")


def save_svm(path, model: SvmModel) -> None:
    sv = np.ascontiguousarray(model.support_vectors, dtype="<f4")
    header = _SVM_HEADER.pack(SVM_MAGIC, SVM_VERSION, model.gamma, model.C, model.platt_a,
                              model.platt_b, sv.shape[0], sv.shape[1])
    body = header + sv.tobytes() + np.asarray(model.dual_coef, dtype="<f8").tobytes() \
        + struct.pack("<d", model.bias)
    Path(path).write_bytes(body)


def load_svm(path) -> SvmModel:
    blob = Path(path).read_bytes()
    if blob[:4] != SVM_MAGIC:
        raise FormatError(f"{path}: not an SVM model file")
    if len(blob) < _SVM_HEADER.size:
        raise IntegrityError(f"{path}: truncated SVM header")
    _, version, gamma, C, a, b, n_sv, dim = _SVM_HEADER.unpack_from(blob)
    if version != SVM_VERSION:
        raise FormatError(f"{path}: unsupported SVM model version {version}")
    expected = _SVM_HEADER.size + 4 * n_sv * dim + 8 * n_sv + 8
    if len(blob) != expected:
        raise IntegrityError(f"{path}: expected {expected} bytes, found {len(blob)}")
    off = _SVM_HEADER.size
    sv = np.frombuffer(blob, "<f4", n_sv * dim, off).reshape(n_sv, dim).astype(np.float64)
    off += 4 * n_sv * dim
    coef = np.frombuffer(blob, "<f8", n_sv, off).copy()
    (bias,) = struct.unpack_from("<d", blob, off + 8 * n_sv)
    return SvmModel(sv, coef, bias, gamma, C, a, b)
