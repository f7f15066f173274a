"""Per-dimension feature selection by intra/inter cluster distance ratio.

Clusters are the known user groups. For each dimension, a feature scores well
when points sit close to their own user's centroid and far from the other
users' centroids.
"""

from dataclasses import dataclass

import numpy as np

from holdsense.errors import InsufficientDataError, ParameterError, SelectionError

DEFAULT_THRESHOLD = 0.5


@dataclass
class LabeledFeatures:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y)
        if self.X.ndim != 2:
            raise ParameterError("feature rows must form a 2-D array")
        if self.X.shape[0] != self.y.shape[0]:
            raise ParameterError("one label per feature row is required")
        if not np.all(np.isfinite(self.X)):
            raise ParameterError("features must be finite")

    @property
    def classes(self):
        return np.unique(self.y)

    def counts(self):
        labels, counts = np.unique(self.y, return_counts=True)
        return dict(zip(labels.tolist(), counts.tolist()))

    def require(self, min_classes=2, min_rows=2):
        counts = self.counts()
        if len(counts) < min_classes:
            raise InsufficientDataError(f"need at least {min_classes} labels, got {len(counts)}")
        short = [k for k, v in counts.items() if v < min_rows]
        if short:
            raise InsufficientDataError(f"labels with fewer than {min_rows} rows: {short}")

    def subset(self, idx):
        return LabeledFeatures(self.X[idx], self.y[idx])

    def columns(self, mask):
        return LabeledFeatures(self.X[:, mask], self.y)


@dataclass
class SelectionMask:
    scores: np.ndarray
    selected: np.ndarray
    threshold: float

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.selected = np.asarray(self.selected, dtype=bool)

    @property
    def n_selected(self):
        return int(self.selected.sum())

    def apply(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.selected.size:
            raise ParameterError(
                f"expected {self.selected.size}-dimension input, got {X.shape[-1]}")
        return X[..., self.selected]


def score_features(data):
    """Intra/inter distance ratio for every dimension (lower is better).

    Dimensions where all user centroids coincide score ``inf``.
    """
    data.require()
    X, y = data.X, data.y
    labels, inverse = np.unique(y, return_inverse=True)
    k = labels.size
    centroids = np.vstack([X[inverse == i].mean(axis=0) for i in range(k)])
    intra = np.abs(X - centroids[inverse]).mean(axis=0)
    to_all = np.abs(X[:, None, :] - centroids[None, :, :]).sum(axis=1)
    to_own = np.abs(X - centroids[inverse])
    inter = ((to_all - to_own) / (k - 1)).mean(axis=0)
    spread = centroids.max(axis=0) - centroids.min(axis=0)
    scores = np.full(X.shape[1], np.inf)
    ok = (spread > 0) & (inter > 0)
    scores[ok] = intra[ok] / inter[ok]
    return scores


def select(data, threshold=DEFAULT_THRESHOLD):
    """Keep every dimension whose score is below ``threshold``."""
    if not threshold > 0:
        raise ParameterError("selection threshold must be positive")
    scores = score_features(data)
    selected = scores < threshold
    if not selected.any():
        finite = scores[np.isfinite(scores)]
        best = f"{finite.min():.4g}" if finite.size else "inf"
        raise SelectionError(
            f"no feature scored below {threshold}; best score is {best}, "
            f"raise the threshold")
    return SelectionMask(scores, selected, float(threshold))
