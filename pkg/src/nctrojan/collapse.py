"""Neural Collapse statistics of the last-layer features and classifier.

Features are accumulated in float64. Every metric comes in two layers: a
function over plain arrays (features, labels, head) and a thin wrapper that
pulls features out of a model.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .errors import DegenerateInputError

NC1_MODES = ("literal_transpose", "pseudoinverse")
PINV_RTOL = 1e-10


@dataclass
class ClassMeanSummary:
    mu: np.ndarray  # (K, m) class means
    mu_G: np.ndarray  # (m,) unweighted mean of class means
    M: np.ndarray  # (K, m) centered means
    counts: np.ndarray  # (K,)

    @property
    def K(self):
        return self.mu.shape[0]


@dataclass
class CovariancePair:
    sigma_W: np.ndarray
    sigma_B: np.ndarray
    num_classes: int


@dataclass
class NCMetricsReport:
    nc1: float
    nc2_norm_M: float
    nc2_norm_W: float
    nc2_angle_M: float
    nc2_angle_W: float
    nc3: float
    nc4: float
    per_class_row_norms_W: list = field(default_factory=list)
    per_class_row_norms_M: list = field(default_factory=list)
    epoch: int = 0
    nc1_mode: str = "literal_transpose"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _check_classes(labels, K):
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=K)[:K]
    missing = [k for k in range(K) if counts[k] == 0]
    if missing:
        raise ValueError(f"classes with no samples: {missing}")
    return counts


def class_means_from_features(features, labels, K):
    feats = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    counts = _check_classes(labels, K)
    mu = np.zeros((K, feats.shape[1]))
    np.add.at(mu, labels, feats)
    mu /= counts[:, None]
    mu_G = mu.mean(axis=0)
    return ClassMeanSummary(mu, mu_G, mu - mu_G, counts)


def covariances_from_features(features, labels, summary):
    feats = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_classes(labels, summary.K)
    sigma_W = kernels.within_scatter(np.ascontiguousarray(feats), labels,
                                     np.ascontiguousarray(summary.mu),
                                     summary.counts.astype(np.float64))
    sigma_B = summary.M.T @ summary.M / summary.K
    return CovariancePair(sigma_W, (sigma_B + sigma_B.T) / 2.0, summary.K)


def pinv(a, rtol=PINV_RTOL):
    """Moore-Penrose pseudoinverse; singular values below rtol * s_max are dropped."""
    u, s, vt = np.linalg.svd(a)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros_like(a.T)
    keep = s > rtol * s[0]
    return (vt[keep].T / s[keep]) @ u[:, keep].T


def nc1(cov, mode="literal_transpose"):
    """Within-class variability relative to between-class spread."""
    if mode == "literal_transpose":
        other = cov.sigma_B.T
    elif mode == "pseudoinverse":
        other = pinv(cov.sigma_B)
    else:
        raise ValueError(f"nc1 mode must be one of {NC1_MODES}")
    return float(np.trace(cov.sigma_W @ other) / cov.num_classes)


def row_norms(V):
    return np.linalg.norm(np.asarray(V, dtype=np.float64), axis=1)


def nc2_norm(V):
    """Population std of row norms over their mean."""
    norms = row_norms(V)
    if norms.shape[0] < 2:
        raise ValueError("need at least two rows")
    mean = norms.mean()
    if mean == 0.0:
        raise DegenerateInputError("nc2_norm: all rows are zero")
    return float(norms.std() / mean)


def nc2_angle(V):
    """Mean over i<j of |cos(v_i, v_j) + 1/(K-1)|."""
    V = np.asarray(V, dtype=np.float64)
    K = V.shape[0]
    if K < 2:
        raise ValueError("need at least two rows")
    norms = row_norms(V)
    zero = np.nonzero(norms == 0.0)[0]
    if zero.size:
        raise DegenerateInputError(f"nc2_angle: row {int(zero[0])} is zero")
    U = V / norms[:, None]
    cos = U @ U.T
    iu = np.triu_indices(K, k=1)
    return float(np.mean(np.abs(cos[iu] + 1.0 / (K - 1))))


def nc3(W, M):
    """Squared Frobenius distance between W/||W|| and M/||M||; lies in [0, 4]."""
    W = np.asarray(W, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    nw, nm = np.linalg.norm(W), np.linalg.norm(M)
    if nw == 0.0 or nm == 0.0:
        raise DegenerateInputError("nc3: zero matrix")
    return float(np.sum((W / nw - M / nm) ** 2))


def nc4_from_features(features, labels, summary, W, b):
    """Class-averaged disagreement between the head's argmax and nearest class mean."""
    feats = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    K = summary.K
    counts = _check_classes(labels, K)
    net = np.argmax(feats @ np.asarray(W, np.float64).T + np.asarray(b, np.float64), axis=1)
    d2 = ((feats[:, None, :] - summary.mu[None, :, :]) ** 2).sum(axis=2)
    ncc = np.argmin(d2, axis=1)
    mismatch = np.bincount(labels, weights=(net != ncc).astype(np.float64), minlength=K)[:K]
    return float(np.mean(mismatch / counts))


def report_from_features(features, labels, W, b, epoch=0, nc1_mode="literal_transpose"):
    K = np.asarray(W).shape[0]
    summary = class_means_from_features(features, labels, K)
    cov = covariances_from_features(features, labels, summary)
    return NCMetricsReport(
        nc1=nc1(cov, nc1_mode),
        nc2_norm_M=nc2_norm(summary.M),
        nc2_norm_W=nc2_norm(W),
        nc2_angle_M=nc2_angle(summary.M),
        nc2_angle_W=nc2_angle(W),
        nc3=nc3(W, summary.M),
        nc4=nc4_from_features(features, labels, summary, W, b),
        per_class_row_norms_W=row_norms(W).tolist(),
        per_class_row_norms_M=row_norms(summary.M).tolist(),
        epoch=int(epoch),
        nc1_mode=nc1_mode,
    )


# ---------------------------------------------------------------------------
# model-facing wrappers


def class_means(model, data):
    return class_means_from_features(model.embed(data.pixels), data.labels, data.num_classes)


def covariances(model, data, summary):
    return covariances_from_features(model.embed(data.pixels), data.labels, summary)


def nc4(model, data, summary):
    return nc4_from_features(model.embed(data.pixels), data.labels, summary,
                             model.head_W, model.head_b)


def full_report(model, data, epoch=0, nc1_mode="literal_transpose"):
    """All NC metrics on ``data`` (labels as stored, poisoned ones included)."""
    return report_from_features(model.embed(data.pixels), data.labels, model.head_W,
                                model.head_b, epoch, nc1_mode)
