"""Random simplex ETF heads and final-layer surgery."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .model import HEAD_B, HEAD_W


@dataclass
class EtfHead:
    K: int
    m: int
    P: np.ndarray  # (m, K), orthonormal columns
    W_etf: np.ndarray  # (K, m) float32 classifier rows
    seed: object  # RngStream used for P

    def seed_info(self):
        return {"master_seed": self.seed.master_seed, "label": self.seed.label}

    def gram_deviation(self):
        """Max abs deviation of W W^T from K/(K-1) (I - 11^T/K)."""
        return float(np.abs(etf_gram(self.W_etf) - ideal_gram(self.K)).max())


def random_partial_orthogonal(m, K, rng):
    """Q factor of an m x K Gaussian matrix with R's diagonal made positive."""
    if m < K:
        raise ValueError(f"need m >= K for an m x K orthonormal frame, got m={m}, K={K}")
    G = rng.normal((m, K))
    Q, R = np.linalg.qr(G)
    signs = np.where(np.diag(R) < 0, -1.0, 1.0)
    return Q * signs


def construct_etf(K, m, rng):
    """W_etf = (sqrt(K/(K-1)) P (I - 11^T/K))^T, stored K x m."""
    if K < 2:
        raise ValueError("a simplex ETF needs K >= 2")
    P = random_partial_orthogonal(m, K, rng)
    return EtfHead(K, m, P, etf_from_frame(P).astype(np.float32), rng)


def etf_from_frame(P):
    K = P.shape[1]
    centering = np.eye(K) - np.ones((K, K)) / K
    return (math.sqrt(K / (K - 1)) * P @ centering.T).T


def ideal_gram(K):
    return K / (K - 1) * (np.eye(K) - np.ones((K, K)) / K)


def etf_gram(W):
    W = np.asarray(W, dtype=np.float64)
    return W @ W.T


def install_and_freeze(model, head):
    """Write the ETF into the head, zero the bias, and freeze both in place."""
    K, m = model.head_W.shape
    if (K, m) != (head.K, head.m):
        raise DimensionError(f"model head is {K}x{m}, ETF head is {head.K}x{head.m}")
    model.params.set_value(HEAD_W, head.W_etf)
    model.params.set_value(HEAD_B, np.zeros(K, np.float32))
    model.params.set_frozen(HEAD_W)
    model.params.set_frozen(HEAD_B)
    model.etf_seed = head.seed_info()
    return model
