"""Collapse diagnostics: uniformity, spectra, effective rank, linear probing."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError

log = logging.getLogger(__name__)

UNIFORMITY_MAX_ROWS = 4096
UNIFORMITY_SUBSAMPLE_SEED = 0
JACOBI_MAX_SWEEPS = 100


class NumericalError(RuntimeError):
    pass


def measure_uniformity(emb: np.ndarray, max_rows: int = UNIFORMITY_MAX_ROWS) -> float:
    """Uniformity of a fixed embedding set (no graph).

    Zero rows are dropped with a logged warning. Above ``max_rows`` rows, a
    subset of ``max_rows`` is drawn with seed ``UNIFORMITY_SUBSAMPLE_SEED``.
    """
    emb = np.asarray(emb, dtype=np.float64)
    sq = (emb * emb).sum(axis=1, keepdims=True)
    zero = sq[:, 0] == 0
    if zero.any():
        log.warning("measure_uniformity: skipping %d zero rows", int(zero.sum()))
        emb, sq = emb[~zero], sq[~zero]
    if len(emb) > max_rows:
        pick = np.sort(np.random.default_rng(UNIFORMITY_SUBSAMPLE_SEED).choice(len(emb), max_rows, replace=False))
        emb, sq = emb[pick], sq[pick]
    N = len(emb)
    if N < 2:
        raise ContractError("uniformity needs at least two nonzero rows")
    unit = emb / np.sqrt(sq)
    chunk = 512
    starts = range(0, N, chunk)
    diag = np.concatenate([np.diag(unit[i:i + chunk] @ unit[i:i + chunk].T) for i in starts])
    total = 0.0
    for start in starts:
        stop = min(start + chunk, N)
        gram = unit[start:stop] @ unit.T
        d2 = (gram * -2.0 + diag[start:stop, None]) + diag[None, :]
        upper = np.arange(N)[None, :] > np.arange(start, stop)[:, None]
        total += (np.exp(d2 * -2.0) * upper).sum()
    return float(np.log(total * (2.0 / (N * (N - 1)))))


def _jacobi_singular_values(X: np.ndarray) -> tuple[np.ndarray, int]:
    """One-sided cyclic Jacobi on the columns of X.

    Each rotation annihilates one off-diagonal entry of the Gram matrix XᵀX;
    columns are paired by a round-robin schedule so a sweep visits every pair
    exactly once. Returns the column norms after convergence and the sweep count.
    """
    A = X.copy()
    n = A.shape[1]
    if n == 1:
        return np.sqrt((A * A).sum(axis=0)), 0
    m = n + (n % 2)
    trace = float((A * A).sum())
    tol = 1e-12 * trace
    players = list(range(m))
    for sweep in range(1, JACOBI_MAX_SWEEPS + 1):
        off = 0.0
        for _ in range(m - 1):
            half = m // 2
            pairs = [(players[i], players[m - 1 - i]) for i in range(half)]
            pairs = [(min(p, q), max(p, q)) for p, q in pairs if p < n and q < n]
            players = [players[0], players[-1]] + players[1:-1]
            if not pairs:
                continue
            P = np.array([p for p, _ in pairs])
            Q = np.array([q for _, q in pairs])
            ap, aq = A[:, P], A[:, Q]
            alpha = (ap * ap).sum(axis=0)
            beta = (aq * aq).sum(axis=0)
            gamma = (ap * aq).sum(axis=0)
            off = max(off, float(np.abs(gamma).max()))
            live = gamma != 0
            zeta = np.where(live, (beta - alpha) / np.where(live, 2 * gamma, 1.0), 0.0)
            t = np.where(live, np.sign(zeta) / (np.abs(zeta) + np.sqrt(1 + zeta * zeta)), 0.0)
            t = np.where(live & (zeta == 0), 1.0, t)
            c = 1.0 / np.sqrt(1 + t * t)
            s = c * t
            A[:, P] = c * ap - s * aq
            A[:, Q] = s * ap + c * aq
        if off < tol:
            return np.sqrt((A * A).sum(axis=0)), sweep
    raise NumericalError(f"Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps "
                         f"(max off-diagonal {off:.3e}, tolerance {tol:.3e})")


def singular_spectrum(emb: np.ndarray, center: bool = True) -> np.ndarray:
    """Descending singular values of the (optionally column-centered) [N, d] matrix."""
    X = np.asarray(emb, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ContractError(f"singular_spectrum needs [N>=2, d], got {X.shape}")
    if center:
        X = X - X.mean(axis=0)
    k = min(X.shape)
    if not np.any(X):
        return np.zeros(k)
    if X.shape[0] > X.shape[1]:
        # same singular values, d x d working set
        X = np.linalg.qr(X, mode="r")
    sv, _ = _jacobi_singular_values(X)
    return np.sort(sv)[::-1][:k]


def effective_rank(sv: np.ndarray) -> float:
    """exp of the Shannon entropy of sigma_i / sum(sigma)."""
    sv = np.asarray(sv, dtype=np.float64)
    total = sv.sum()
    if not total > 0:
        raise ContractError("effective_rank needs at least one positive singular value")
    p = sv / total
    p = p[p > 0]  # tiny values can underflow to zero after division
    return float(np.exp(-(p * np.log(p)).sum()))


def per_dim_stats(emb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and population std."""
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] < 2:
        raise ContractError(f"per_dim_stats needs [N>=2, d], got {emb.shape}")
    return emb.mean(axis=0), emb.std(axis=0)


# ---------------------------------------------------------------- linear probe

@dataclass
class ProbeFit:
    weight: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    losses: list[float] = field(default_factory=list)

    def predict(self, x: np.ndarray) -> np.ndarray:
        z = ((np.asarray(x, dtype=np.float64) - self.mean) / self.scale) @ self.weight + self.bias
        return z.argmax(axis=1)


def fit_probe(x: np.ndarray, y: np.ndarray, epochs: int = 300, lr: float = 0.1, seed: int = 0,
              num_classes: int | None = None) -> ProbeFit:
    """Full-batch softmax regression on standardized, frozen features."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ContractError("linear probe needs at least two classes in the training split")
    C = int(num_classes or y.max() + 1)
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    z = (x - mean) / scale
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((z.shape[1], C)) * 1e-3
    b = np.zeros(C)
    onehot = np.eye(C)[y]
    n = len(y)
    losses = []
    for _ in range(epochs):
        logits = z @ W + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        losses.append(float(-np.log(p[np.arange(n), y] + 1e-300).mean()))
        g = (p - onehot) / n
        W -= lr * (z.T @ g)
        b -= lr * g.sum(axis=0)
    return ProbeFit(W, b, mean, scale, losses)


def linear_probe(train_x, train_y, test_x, test_y, epochs: int = 300, lr: float = 0.1,
                 seed: int = 0) -> float:
    """Top-1 test accuracy of a softmax-regression probe trained on frozen embeddings."""
    C = int(max(np.max(train_y), np.max(test_y)) + 1)
    fit = fit_probe(train_x, train_y, epochs=epochs, lr=lr, seed=seed, num_classes=C)
    return float((fit.predict(test_x) == np.asarray(test_y)).mean())


# ---------------------------------------------------------------- report

@dataclass
class AnalysisReport:
    cls_uniformity: float
    token_uniformity: float
    cls_stats: tuple[np.ndarray, np.ndarray]
    token_stats: tuple[np.ndarray, np.ndarray]
    cls_singular_values: np.ndarray
    token_singular_values: np.ndarray
    cls_effective_rank: float
    token_effective_rank: float
    probe_accuracy: float | None = None


def analyze_embeddings(cls_emb: np.ndarray, token_emb: np.ndarray, center: bool = True) -> AnalysisReport:
    """Run every diagnostic on [N, d] [CLS] and [N, L, d] (or [M, d]) token embeddings."""
    tok = np.asarray(token_emb, dtype=np.float64)
    tok = tok.reshape(-1, tok.shape[-1])
    cls_sv = singular_spectrum(cls_emb, center)
    tok_sv = singular_spectrum(tok, center)
    return AnalysisReport(
        cls_uniformity=measure_uniformity(cls_emb),
        token_uniformity=measure_uniformity(tok),
        cls_stats=per_dim_stats(cls_emb),
        token_stats=per_dim_stats(tok),
        cls_singular_values=cls_sv,
        token_singular_values=tok_sv,
        cls_effective_rank=effective_rank(cls_sv),
        token_effective_rank=effective_rank(tok_sv),
    )
