"""Holder verification: LDA and one-vs-rest linear SVM on selected features,
confidence-thresholded decisions, and the on-disk user profile format."""

import io
import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from holdsense.errors import (
    ParameterError,
    ProfileChecksumError,
    ProfileFormatError,
    ProfileVersionError,
    TrainingError,
)
from holdsense.selection import LabeledFeatures, SelectionMask

DEFAULT_CONFIDENCE = 0.6
NEGATIVE_LABEL = "__negative__"
UNKNOWN = "UNKNOWN"

RIDGE_FRACTION = 1e-3
SVM_C = 1.0
SVM_TOL = 1e-6
SVM_MAX_ITER = 200
# Inputs farther (squared Mahalanobis) from their predicted class than this
# multiple of the 99th percentile of held-out enrolment distances are foreign.
TYPICALITY_FACTOR = 4.0
GATE_QUANTILE = 99.0
GATE_FOLDS = 5


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X):
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
        return cls(mean, scale)

    def __call__(self, X):
        return (X - self.mean) / self.scale


@dataclass
class TypicalityGate:
    """Open-set check in the standardized selected space: squared Mahalanobis
    distance to a class mean under the pooled covariance (lower Cholesky
    factor ``chol``), accepted up to ``limit``."""

    means: np.ndarray
    chol: np.ndarray
    limit: float

    def distances(self, Z, index):
        diff = (Z - self.means[index]).T
        return np.sum(solve_triangular(self.chol, diff, lower=True) ** 2, axis=0)


@dataclass
class LdaParams:
    means: np.ndarray
    covariance: np.ndarray
    priors: np.ndarray
    coef: np.ndarray
    intercept: np.ndarray


@dataclass
class SvmParams:
    weights: np.ndarray
    biases: np.ndarray
    calib_a: np.ndarray
    calib_b: np.ndarray
    duality_gaps: np.ndarray


@dataclass
class VerifierModel:
    kind: str
    classes: np.ndarray
    mask: SelectionMask
    standardizer: Standardizer
    confidence_threshold: float = DEFAULT_CONFIDENCE
    lda: LdaParams = None
    svm: SvmParams = None
    metadata: dict = field(default_factory=dict)
    gate: TypicalityGate = None

    def __post_init__(self):
        if self.kind not in ("lda", "svm"):
            raise ParameterError(f"unknown model kind {self.kind!r}")
        if (self.lda is None) == (self.svm is None) or getattr(self, self.kind) is None:
            raise ParameterError("exactly the parameter block matching kind must be set")
        if not 0 < self.confidence_threshold < 1:
            raise ParameterError("confidence_threshold must lie in (0, 1)")

    @property
    def input_dim(self):
        return self.mask.selected.size

    def prepare(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return self.standardizer(self.mask.apply(X))

    def scores(self, X):
        """Raw per-class scores (discriminants or SVM margins)."""
        Z = self.prepare(X)
        p = self.lda if self.kind == "lda" else self.svm
        if self.kind == "lda":
            return Z @ p.coef.T + p.intercept
        return Z @ p.weights.T + p.biases

    def probabilities(self, X):
        s = self.scores(X)
        if self.kind == "lda":
            return _softmax(s)
        # each class's calibrated log-odds, combined multinomially
        return _softmax(self.svm.calib_a * s + self.svm.calib_b)

    def predict(self, X):
        return self.classes[np.argmax(self.probabilities(X), axis=1)]

    def with_threshold(self, threshold):
        return VerifierModel(self.kind, self.classes, self.mask, self.standardizer,
                             threshold, self.lda, self.svm, dict(self.metadata), self.gate)

    def typical(self, X, index):
        """Whether each row lies within the gate for class ``index`` (all true
        when the model has no gate)."""
        if self.gate is None:
            return np.ones(np.atleast_2d(X).shape[0], dtype=bool)
        return self.gate.distances(self.prepare(X), index) <= self.gate.limit


@dataclass(frozen=True)
class Decision:
    outcome: str
    confidence: float
    probabilities: dict
    predicted: str
    typical: bool = True

    @property
    def identified(self):
        return self.outcome != UNKNOWN


def _softmax(s):
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _full_mask(dim):
    return SelectionMask(np.zeros(dim), np.ones(dim, dtype=bool), float("inf"))


def _prepare_training(data, mask):
    data.require()
    mask = mask or _full_mask(data.X.shape[1])
    Xm = mask.apply(data.X)
    std = Standardizer.fit(Xm)
    classes, inverse = np.unique(data.y, return_inverse=True)
    return mask, std, std(Xm), classes, inverse


# --------------------------------------------------------------------------
# LDA


def _pooled(Z, inverse, k):
    """Class means and ridge-regularised pooled covariance with its Cholesky factor."""
    n, d = Z.shape
    means = np.vstack([Z[inverse == i].mean(axis=0) for i in range(k)])
    centred = Z - means[inverse]
    cov = centred.T @ centred / max(n - k, 1)
    trace = np.trace(cov)
    ridge = RIDGE_FRACTION * trace / d if trace > 0 else RIDGE_FRACTION
    cov = cov + ridge * np.eye(d)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise TrainingError(f"covariance is singular after regularisation: {exc}") from exc
    if not np.all(np.isfinite(chol)):
        raise TrainingError("covariance factorisation produced non-finite values")
    return means, cov, chol


def _round_robin_folds(inverse, k):
    """Deterministic fold id per row: each class's rows dealt out in order."""
    fold = np.empty(inverse.size, dtype=np.int64)
    for c in np.unique(inverse):
        idx = np.nonzero(inverse == c)[0]
        fold[idx] = np.arange(idx.size) % k
    return fold


def fit_gate(Z, inverse, means, chol, factor=TYPICALITY_FACTOR, quantile=GATE_QUANTILE,
             folds=GATE_FOLDS):
    """Typicality gate whose limit is ``factor`` times a high quantile of
    held-out distances: each row is measured against means and covariance
    fitted without it, so the limit reflects unseen genuine inputs even when
    rows are scarce relative to dimensions."""
    k = means.shape[0]
    nfold = int(min(folds, np.bincount(inverse).min()))
    fold = _round_robin_folds(inverse, nfold)
    held_out = np.empty(inverse.size)
    for f in range(nfold):
        held = fold == f
        m, _, c = _pooled(Z[~held], inverse[~held], k)
        held_out[held] = TypicalityGate(m, c, 0.0).distances(Z[held], inverse[held])
    return TypicalityGate(means, chol, float(factor * np.percentile(held_out, quantile)))


def train_lda(data, mask=None, confidence_threshold=DEFAULT_CONFIDENCE):
    """Shared-covariance Gaussian classifier with ridge-regularised covariance.

    Posteriors follow Bayes' rule with class priors proportional to counts.
    """
    mask, std, Z, classes, inverse = _prepare_training(data, mask)
    k = classes.size
    means, cov, chol = _pooled(Z, inverse, k)
    priors = np.bincount(inverse, minlength=k) / Z.shape[0]
    # coef_c = cov^-1 mean_c
    coef = np.linalg.solve(cov, means.T).T
    intercept = -0.5 * np.sum(coef * means, axis=1) + np.log(priors)
    lda = LdaParams(means, cov, priors, coef, intercept)
    return VerifierModel("lda", classes, mask, std, confidence_threshold, lda=lda,
                         gate=fit_gate(Z, inverse, means, chol))


# --------------------------------------------------------------------------
# Linear SVM


def _duality_gap(G, alpha, C):
    """Relative gap between the primal and dual objectives; rows of ``G`` are
    label-signed samples."""
    w = G.T @ alpha
    ww = w @ w
    primal = 0.5 * ww + C * np.maximum(0.0, 1.0 - G @ w).sum()
    dual = alpha.sum() - 0.5 * ww
    return (primal - dual) / max(1.0, abs(primal))


def _box_qp(G, C, tol, max_iter, centering=0.1):
    """Primal-dual interior-point solve of the SVM dual
    ``min 0.5*|G^T a|^2 - sum(a)`` subject to ``0 <= a <= C``.

    ``G G^T`` has rank at most the feature count, so each Newton system is
    reduced to a feature-sized Cholesky solve. Stops once the relative
    duality gap of the SVM itself reaches ``tol``.
    """
    n, d = G.shape
    a = np.full(n, C / 2)
    z = np.ones(n)
    s = np.ones(n)
    eye = np.eye(d)
    gap = _duality_gap(G, a, C)
    for _ in range(max_iter):
        if gap <= tol:
            break
        u = C - a
        mu = centering * (a @ z + u @ s) / (2 * n)
        resid = G @ (G.T @ a) - 1.0 - z + s
        dinv = 1.0 / (z / a + s / u)
        t = dinv * (-resid + mu / a - z - mu / u + s)
        M = eye + (G.T * dinv) @ G
        rhs = G.T @ t
        try:
            inner = cho_solve(cho_factor(M), rhs)
        except np.linalg.LinAlgError:
            inner = np.linalg.solve(M, rhs)
        da = t - dinv * (G @ inner)
        dz = (mu - a * z - z * da) / a
        ds = (mu - u * s + s * da) / u
        step = 1.0
        for v, dv in ((a, da), (u, -da), (z, dz), (s, ds)):
            neg = dv < 0
            if neg.any():
                step = min(step, 0.99 * np.min(-v[neg] / dv[neg]))
        a = a + step * da
        z = z + step * dz
        s = s + step * ds
        gap = _duality_gap(G, a, C)
    return a, gap


def fit_binary_svm(X, y, C=SVM_C, tol=SVM_TOL, max_iter=SVM_MAX_ITER):
    """Weights, bias and final relative duality gap of one hinge-loss linear
    separator; ``y`` holds +1/-1. The bias is learned as the weight of an
    appended constant feature."""
    y = np.asarray(y, dtype=np.float64)
    Xa = np.hstack([np.asarray(X, dtype=np.float64), np.ones((y.size, 1))])
    G = Xa * y[:, None]
    alpha, gap = _box_qp(G, float(C), tol, max_iter)
    if not gap <= tol:
        raise TrainingError(f"SVM did not converge within {max_iter} iterations",
                            duality_gap=gap)
    w = G.T @ alpha
    return w[:-1], w[-1], gap


def fit_platt(scores, positive, iterations=100):
    """Logistic map ``p = sigmoid(a*s + b)`` fitted by Newton's method with
    Platt's smoothed targets, so separable training scores stay finite."""
    n_pos = positive.sum()
    n_neg = positive.size - n_pos
    t = np.where(positive, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))
    a, b = 0.0, float(np.log((n_pos + 1.0) / (n_neg + 1.0)))
    for _ in range(iterations):
        p = _sigmoid(a * scores + b)
        r = p - t
        wgt = np.maximum(p * (1 - p), 1e-12)
        g = np.array([r @ scores, r.sum()])
        h = np.array([[wgt @ scores ** 2, wgt @ scores], [wgt @ scores, wgt.sum()]])
        h += 1e-9 * np.eye(2)
        step = np.linalg.solve(h, g)
        a, b = a - step[0], b - step[1]
        if np.max(np.abs(step)) < 1e-10:
            break
    return a, b


def train_svm(data, mask=None, confidence_threshold=DEFAULT_CONFIDENCE, C=SVM_C,
              tol=SVM_TOL, max_iter=SVM_MAX_ITER):
    """One-vs-rest hinge-loss linear SVMs with per-class logistic calibration.

    Class probabilities are the softmax of the calibrated log-odds.
    """
    mask, std, Z, classes, inverse = _prepare_training(data, mask)
    k = classes.size
    W = np.zeros((k, Z.shape[1]))
    B = np.zeros(k)
    A = np.zeros(k)
    Bc = np.zeros(k)
    gaps = np.zeros(k)
    for c in range(k):
        pos = inverse == c
        yy = np.where(pos, 1.0, -1.0)
        W[c], B[c], gaps[c] = fit_binary_svm(Z, yy, C, tol, max_iter)
        A[c], Bc[c] = fit_platt(Z @ W[c] + B[c], pos)
    svm = SvmParams(W, B, A, Bc, gaps)
    means, _, chol = _pooled(Z, inverse, k)
    return VerifierModel("svm", classes, mask, std, confidence_threshold, svm=svm,
                         gate=fit_gate(Z, inverse, means, chol))


def train(data, kind="lda", mask=None, confidence_threshold=DEFAULT_CONFIDENCE):
    if kind == "lda":
        return train_lda(data, mask, confidence_threshold)
    if kind == "svm":
        return train_svm(data, mask, confidence_threshold)
    raise ParameterError(f"unknown classifier kind {kind!r}")


# --------------------------------------------------------------------------
# Verification


def verify(model, fv):
    """Classify one feature vector; it is Unknown when the top probability is
    below the confidence threshold, the top class is the negative cohort, or
    the vector lies outside the typicality gate."""
    x = np.asarray(getattr(fv, "values", fv), dtype=np.float64)
    if x.ndim != 1 or x.size != model.input_dim:
        raise ParameterError(f"expected a {model.input_dim}-dimension feature vector, "
                             f"got shape {x.shape}")
    probs = model.probabilities(x)[0]
    best = int(np.argmax(probs))
    conf = float(probs[best])
    label = str(model.classes[best])
    typical = bool(model.typical(x, best)[0])
    accept = conf >= model.confidence_threshold and label != NEGATIVE_LABEL and typical
    return Decision(UNKNOWN if not accept else label, conf,
                    {str(c): float(p) for c, p in zip(model.classes, probs)}, label, typical)


# --------------------------------------------------------------------------
# Profile files

MAGIC = b"ECHL"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sH")


def _model_arrays(model):
    arrays = {
        "classes": np.asarray(model.classes).astype(str),
        "mask_scores": model.mask.scores,
        "mask_selected": model.mask.selected,
        "std_mean": model.standardizer.mean,
        "std_scale": model.standardizer.scale,
    }
    block = model.lda if model.kind == "lda" else model.svm
    for name, value in block.__dict__.items():
        arrays[f"{model.kind}_{name}"] = np.asarray(value)
    if model.gate is not None:
        arrays["gate_means"] = model.gate.means
        arrays["gate_chol"] = model.gate.chol
    return arrays


def encode_profile(model, metadata=None):
    meta = {
        "kind": model.kind,
        "confidence_threshold": model.confidence_threshold,
        "mask_threshold": model.mask.threshold,
        "gate_limit": None if model.gate is None else model.gate.limit,
        "metadata": {**model.metadata, **(metadata or {})},
    }
    buf = io.BytesIO()
    arrays = _model_arrays(model)
    arrays["meta_json"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(buf, **arrays)
    payload = buf.getvalue()
    body = _HEADER.pack(MAGIC, FORMAT_VERSION) + payload
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_profile(blob):
    if len(blob) < _HEADER.size + 4:
        raise ProfileFormatError("file is too short to be a profile")
    magic, version = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ProfileFormatError("missing ECHL magic bytes")
    if version != FORMAT_VERSION:
        raise ProfileVersionError(f"unsupported profile version {version}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ProfileChecksumError("profile checksum mismatch (truncated or corrupted file)")
    try:
        with np.load(io.BytesIO(body[_HEADER.size:]), allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
        meta = json.loads(arrays.pop("meta_json").tobytes().decode())
        kind = meta["kind"]
        prefix = f"{kind}_"
        block = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        params = LdaParams(**block) if kind == "lda" else SvmParams(**block)
        mask = SelectionMask(arrays["mask_scores"], arrays["mask_selected"],
                             float(meta["mask_threshold"]))
        std = Standardizer(arrays["std_mean"], arrays["std_scale"])
        gate = None
        if meta["gate_limit"] is not None:
            gate = TypicalityGate(arrays["gate_means"], arrays["gate_chol"],
                                  float(meta["gate_limit"]))
        return VerifierModel(kind, arrays["classes"], mask, std, float(meta["confidence_threshold"]),
                             lda=params if kind == "lda" else None,
                             svm=params if kind == "svm" else None,
                             metadata=meta["metadata"], gate=gate)
    except (KeyError, TypeError, ValueError, OSError) as exc:
        raise ProfileFormatError(f"malformed profile payload: {exc}") from exc


def save_profile(model, path, metadata=None):
    """Write atomically: a temporary file in the same directory is renamed over ``path``."""
    path = Path(path)
    blob = encode_profile(model, metadata)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_profile(path):
    return decode_profile(Path(path).read_bytes())
