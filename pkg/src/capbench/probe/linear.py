"""Linear probes: (balanced) multinomial logistic regression and shrinkage LDA."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.special import log_softmax, softmax

CLASSIFIERS = ("logreg", "balanced_logreg", "lda")


class ProbeError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeSpec:
    classifier: str = "logreg"
    l2: float = 1e-3
    shrinkage: float = 1e-1
    max_iter: int = 1000
    tol: float = 1e-6

    def __post_init__(self):
        if self.classifier not in CLASSIFIERS:
            raise ProbeError(f"unknown classifier {self.classifier!r}")
        if self.l2 < 0:
            raise ProbeError("l2 must be >= 0")
        if self.shrinkage < 0:
            raise ProbeError("shrinkage must be >= 0")


@dataclass
class LinearModel:
    weights: np.ndarray  # (D, C)
    bias: np.ndarray  # (C,)
    classes: np.ndarray
    kind: str
    loss: float | None = None
    iterations: int | None = None

    def decision(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.weights + self.bias

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision(X), axis=1)

    def predict(self, X) -> np.ndarray:
        return self.classes[np.argmax(self.decision(X), axis=1)]


def _encode(y, classes=None):
    y = np.asarray(y)
    classes = np.unique(y) if classes is None else np.asarray(classes)
    idx = np.searchsorted(classes, y)
    if np.any(idx >= len(classes)) or np.any(classes[np.minimum(idx, len(classes) - 1)] != y):
        raise ProbeError("label outside the class set")
    return classes, idx


def balanced_weights(yi: np.ndarray, num_classes: int) -> np.ndarray:
    counts = np.bincount(yi, minlength=num_classes)
    return len(yi) / (num_classes * counts[yi])


def logreg_objective(params, X, Y, sample_w, l2):
    """Weighted mean cross-entropy + 0.5 * l2 * ||W||^2 (bias unpenalized), with gradient."""
    n, d = X.shape
    c = Y.shape[1]
    W, b = params[: d * c].reshape(d, c), params[d * c:]
    logp = log_softmax(X @ W + b, axis=1)
    wsum = sample_w.sum()
    loss = -np.sum(sample_w * np.sum(Y * logp, axis=1)) / wsum + 0.5 * l2 * np.sum(W * W)
    r = (np.exp(logp) - Y) * (sample_w / wsum)[:, None]
    gW = X.T @ r + l2 * W
    gb = r.sum(axis=0)
    return loss, np.concatenate([gW.ravel(), gb])


def fit_logreg(X, y, spec: ProbeSpec = ProbeSpec(), class_weights: bool | None = None,
               classes=None) -> LinearModel:
    """L-BFGS fit of the regularized multinomial cross-entropy.

    Stops when the projected gradient norm falls below ``spec.tol`` or after
    ``spec.max_iter`` iterations.  ``class_weights`` (default: balanced_logreg
    spec) weights each sample by ``N / (C * N_c)``.
    """
    X = np.asarray(X, dtype=np.float64)
    classes, yi = _encode(y, classes)
    c = len(classes)
    if c < 2:
        raise ProbeError("need at least two classes")
    counts = np.bincount(yi, minlength=c)
    if np.any(counts == 0):
        missing = [str(classes[i]) for i in np.flatnonzero(counts == 0)]
        raise ProbeError(f"class absent from train split: {', '.join(missing)}")
    if class_weights is None:
        class_weights = spec.classifier == "balanced_logreg"
    w = balanced_weights(yi, c) if class_weights else np.ones(len(yi))
    Y = np.eye(c)[yi]
    d = X.shape[1]
    res = minimize(logreg_objective, np.zeros(d * c + c), args=(X, Y, w, spec.l2),
                   jac=True, method="L-BFGS-B",
                   options={"maxiter": spec.max_iter, "gtol": spec.tol, "ftol": 0.0,
                            "maxcor": 20})
    kind = "balanced_logreg" if class_weights else "logreg"
    return LinearModel(res.x[: d * c].reshape(d, c), res.x[d * c:], classes, kind,
                       loss=float(res.fun), iterations=int(res.nit))


def fit_lda(X, y, shrinkage: float = 1e-1, classes=None) -> LinearModel:
    """Class means + pooled within-class covariance, discriminant via (S + shrinkage*I)^-1."""
    X = np.asarray(X, dtype=np.float64)
    classes, yi = _encode(y, classes)
    c = len(classes)
    counts = np.bincount(yi, minlength=c)
    if c < 2:
        raise ProbeError("need at least two classes")
    if np.any(counts == 0):
        raise ProbeError("class absent from train split")
    n, d = X.shape
    means = np.stack([X[yi == k].mean(axis=0) for k in range(c)])
    centred = X - means[yi]
    cov = centred.T @ centred / max(n - c, 1)
    reg = cov + shrinkage * np.eye(d)
    try:
        factor = cho_factor(reg)
        if shrinkage == 0 and np.linalg.cond(reg) > 1e12:
            raise LinAlgError("ill-conditioned")
    except LinAlgError as e:
        raise ProbeError("singular covariance: use shrinkage > 0") from e
    W = cho_solve(factor, means.T)  # (D, C)
    priors = counts / n
    b = -0.5 * np.sum(means.T * W, axis=0) + np.log(priors)
    return LinearModel(W, b, classes, "lda")


def fit(spec: ProbeSpec, X, y, classes=None) -> LinearModel:
    if spec.classifier == "lda":
        return fit_lda(X, y, spec.shrinkage, classes)
    return fit_logreg(X, y, spec, classes=classes)


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.asarray(X, dtype=np.float64)
        sd = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(sd > 1e-12, sd, 1.0))

    def __call__(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.scale
