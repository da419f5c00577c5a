"""Contrastive and classification losses (float64 numpy, closed-form gradients)."""
from __future__ import annotations

import numpy as np

PROB_FLOOR = 1e-12


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity undefined for zero-norm vectors")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def positive_index(two_n: int) -> np.ndarray:
    """Partner row of each row when pairs sit at rows (2k, 2k+1)."""
    return np.arange(two_n) ^ 1


def nt_xent_loss(z, tau: float = 0.5) -> tuple[float, np.ndarray]:
    """Normalised temperature-scaled cross-entropy over 2N projections.

    Rows 2k and 2k+1 of ``z`` are the two views of image k; every other row
    in the batch is a negative.  Returns the loss averaged over all 2N
    anchors and its gradient with respect to ``z``.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] % 2:
        raise ValueError(f"expected a (2N, d) array, got shape {z.shape}")
    two_n = z.shape[0]
    if two_n < 4:
        raise ValueError("NT-Xent needs N >= 2 pairs so every anchor has negatives")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite projection")
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm projection row")

    u = z / norms[:, None]
    logits = (u @ u.T) / tau
    np.fill_diagonal(logits, -np.inf)
    logits -= logits.max(axis=1, keepdims=True)
    log_den = np.log(np.exp(logits).sum(axis=1))
    pos = positive_index(two_n)
    rows = np.arange(two_n)
    loss = float(np.mean(log_den - logits[rows, pos]))

    # d loss / d sim[i, k] = (softmax_ik - [k == pos(i)]) / (tau * 2N)
    g_sim = np.exp(logits - log_den[:, None])
    g_sim[rows, pos] -= 1.0
    g_sim /= tau * two_n
    g_u = (g_sim + g_sim.T) @ u
    g_z = (g_u - np.sum(g_u * u, axis=1, keepdims=True) * u) / norms[:, None]
    return loss, g_z


def cross_entropy(probabilities, label: int) -> float:
    p = np.asarray(probabilities, dtype=np.float64)
    if p.shape != (2,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"malformed probability vector {p}")
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    return float(-np.log(max(p[label], PROB_FLOOR)))
