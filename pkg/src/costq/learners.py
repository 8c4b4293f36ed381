"""Regression and classification primitives used for every nuisance and
contrast fit: ridge-regularized linear / logistic / softmax ERM and a
Nadaraya-Watson kernel smoother.

Parametric fits share one optimizer: full-batch gradient descent with a
backtracking (Armijo) line search, zero initialization, and convergence when
the gradient infinity-norm drops below ``grad_tol``. Linear ridge regression
has a closed-form minimizer, so it is solved exactly via the normal equations
instead of iterating; the gradient-descent path is kept for the losses that
need it (logistic, softmax). Identical (data, config) always produces
bit-identical parameters.
"""

from __future__ import annotations

import itertools
import logging
import re
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np

from .errors import (
    DegenerateDesign,
    DimMismatch,
    EmptyData,
    LabelOutOfRange,
    SeparationWarning,
)

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
KERNEL_DENOM_FLOOR = 1e-300

FeatureMap = Union[str, Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class LearnerConfig:
    """Configuration shared by all learner kinds.

    kind: "linear" | "logistic" | "softmax" | "kernel".
    feature_map: "identity", "constant" (intercept only), "poly{d}" for all
        monomials with interactions up to total degree d, or a callable basis.
    bandwidth: kernel only; None selects 1.06 * sigma * n^(-1/5) per dimension.
    """

    kind: str = "linear"
    n_classes: int = 2
    feature_map: FeatureMap = "identity"
    ridge: float = 0.0
    step_size: float = 1.0
    max_iters: int = 10_000
    grad_tol: float = 1e-8
    bandwidth: Optional[float] = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("linear", "logistic", "softmax", "kernel"):
            raise ValueError(f"unknown learner kind {self.kind!r}")
        if self.ridge < 0:
            raise ValueError("ridge penalty must be nonnegative")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.kind == "softmax" and self.n_classes < 2:
            raise ValueError("softmax needs at least two classes")


def map_features(X: np.ndarray, feature_map: FeatureMap) -> np.ndarray:
    """Apply the configured basis expansion (no constant column; the
    intercept is added, unpenalized, by the learner itself)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if callable(feature_map):
        out = np.atleast_2d(np.asarray(feature_map(X), dtype=float))
        if out.shape[0] != X.shape[0]:
            raise DimMismatch("custom feature map changed the number of rows")
        return out
    if feature_map == "identity":
        return X
    if feature_map == "constant":
        return np.empty((X.shape[0], 0))
    m = re.fullmatch(r"poly(\d+)", feature_map)
    if m:
        degree = int(m.group(1))
        if degree < 1:
            raise ValueError("polynomial degree must be >= 1")
        cols = []
        p = X.shape[1]
        for d in range(1, degree + 1):
            for combo in itertools.combinations_with_replacement(range(p), d):
                cols.append(np.prod(X[:, combo], axis=1))
        return np.column_stack(cols) if cols else np.empty((X.shape[0], 0))
    raise ValueError(f"unknown feature map {feature_map!r}")


def _standardize(Phi: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mean = Phi.mean(axis=0) if Phi.size else np.zeros(Phi.shape[1])
    scale = Phi.std(axis=0) if Phi.size else np.ones(Phi.shape[1])
    scale = np.where(scale > 0, scale, 1.0)
    return (Phi - mean) / scale, mean, scale


def _design(Phi_std: np.ndarray) -> np.ndarray:
    return np.hstack([np.ones((Phi_std.shape[0], 1)), Phi_std])


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


@dataclass
class FittedModel:
    """A fitted learner. Parametric kinds store a coefficient vector/matrix in
    a standardized basis; the kernel kind stores its training pairs."""

    config: LearnerConfig
    coef: Optional[np.ndarray] = None  # (d+1,) or (d+1, K); row 0 = intercept
    feat_mean: Optional[np.ndarray] = None
    feat_scale: Optional[np.ndarray] = None
    train_x: Optional[np.ndarray] = None  # kernel kind
    train_t: Optional[np.ndarray] = None
    bandwidth: Optional[np.ndarray] = None
    global_mean: float = 0.0
    n_train: int = 0
    n_features_in: int = 0
    converged: bool = True
    separation: bool = False

    # -- prediction ---------------------------------------------------------

    def _scores(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features_in:
            raise DimMismatch(
                f"model expects {self.n_features_in} input features, got {X.shape[1]}"
            )
        Phi = map_features(X, self.config.feature_map)
        Z = _design((Phi - self.feat_mean) / self.feat_scale)
        return Z @ self.coef

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Regression value, P(class 1) for logistic, or class-prob matrix for softmax."""
        kind = self.config.kind
        if kind == "linear":
            return self._scores(X)
        if kind == "logistic":
            return self.predict_proba(X)[:, 1]
        if kind == "softmax":
            return self.predict_proba(X)
        return self._kernel_predict(X)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        kind = self.config.kind
        if kind == "logistic":
            p1 = np.clip(_sigmoid(self._scores(X)), PROB_FLOOR, 1.0 - PROB_FLOOR)
            return np.column_stack([1.0 - p1, p1])
        if kind == "softmax":
            P = np.clip(_softmax(self._scores(X)), KERNEL_DENOM_FLOOR, 1.0)
            return P / P.sum(axis=1, keepdims=True)
        raise ValueError(f"{kind} model has no class probabilities")

    def predict_mean(self, X: np.ndarray) -> np.ndarray:
        """Predicted conditional mean of the target (P(Y=1) for classifiers)."""
        if self.config.kind == "softmax":
            raise ValueError("predict_mean is ambiguous for softmax models")
        return self.predict(X)

    def _kernel_predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.train_x.shape[1]:
            raise DimMismatch(
                f"kernel model expects {self.train_x.shape[1]} features, got {X.shape[1]}"
            )
        out = np.empty(X.shape[0])
        n_empty = 0
        chunk = max(1, 4_000_000 // max(1, self.train_x.shape[0]))
        for start in range(0, X.shape[0], chunk):
            q = X[start : start + chunk]
            # Gaussian product kernel with per-dimension bandwidths.
            diffs = (q[:, None, :] - self.train_x[None, :, :]) / self.bandwidth
            w = np.exp(-0.5 * np.einsum("qnd,qnd->qn", diffs, diffs))
            denom = w.sum(axis=1)
            empty = denom < KERNEL_DENOM_FLOOR
            denom = np.maximum(denom, KERNEL_DENOM_FLOOR)
            vals = (w @ self.train_t) / denom
            vals[empty] = self.global_mean
            n_empty += int(empty.sum())
            out[start : start + chunk] = vals
        if n_empty:
            logger.info("kernel smoother: %d queries in empty regions fell back to the global mean", n_empty)
        return out

    @property
    def parameters(self) -> np.ndarray:
        if self.coef is None:
            raise ValueError("kernel models have no parameter vector")
        return self.coef

    # -- serialization ------------------------------------------------------

    def to_json_dict(self) -> dict:
        if callable(self.config.feature_map):
            raise ValueError("models with callable feature maps cannot be serialized")
        cfg = self.config
        out = {
            "kind": cfg.kind,
            "n_classes": cfg.n_classes,
            "feature_map": cfg.feature_map,
            "ridge": cfg.ridge,
            "bandwidth": cfg.bandwidth,
            "n_features_in": self.n_features_in,
            "n_train": self.n_train,
            "converged": self.converged,
        }
        if cfg.kind == "kernel":
            out["train_x"] = self.train_x.tolist()
            out["train_t"] = self.train_t.tolist()
            out["bandwidth_per_dim"] = self.bandwidth.tolist()
            out["global_mean"] = self.global_mean
        else:
            out["coef"] = self.coef.tolist()
            out["feat_mean"] = self.feat_mean.tolist()
            out["feat_scale"] = self.feat_scale.tolist()
        return out

    @staticmethod
    def from_json_dict(d: dict) -> "FittedModel":
        cfg = LearnerConfig(
            kind=d["kind"],
            n_classes=d.get("n_classes", 2),
            feature_map=d.get("feature_map", "identity"),
            ridge=d.get("ridge", 0.0),
            bandwidth=d.get("bandwidth"),
        )
        model = FittedModel(config=cfg, n_features_in=d["n_features_in"],
                            n_train=d.get("n_train", 0), converged=d.get("converged", True))
        if cfg.kind == "kernel":
            model.train_x = np.array(d["train_x"], dtype=float)
            model.train_t = np.array(d["train_t"], dtype=float)
            model.bandwidth = np.array(d["bandwidth_per_dim"], dtype=float)
            model.global_mean = float(d["global_mean"])
        else:
            model.coef = np.array(d["coef"], dtype=float)
            model.feat_mean = np.array(d["feat_mean"], dtype=float)
            model.feat_scale = np.array(d["feat_scale"], dtype=float)
        return model


def constant_model(value: float, n_features_in: int) -> FittedModel:
    """A linear model that predicts ``value`` everywhere (used for fallbacks)."""
    cfg = LearnerConfig(kind="linear", feature_map="constant")
    return FittedModel(
        config=cfg,
        coef=np.array([value]),
        feat_mean=np.empty(0),
        feat_scale=np.empty(0),
        n_features_in=n_features_in,
        n_train=0,
    )


# ---------------------------------------------------------------------------
# Objectives: mean loss + (ridge/2) * ||non-intercept coefficients||^2.
# ---------------------------------------------------------------------------


def _linear_obj(Z: np.ndarray, t: np.ndarray, ridge: float):
    n = Z.shape[0]
    pen = np.ones(Z.shape[1])
    pen[0] = 0.0

    def f_g(beta: np.ndarray):
        r = Z @ beta - t
        f = 0.5 * (r @ r) / n + 0.5 * ridge * (pen * beta) @ beta
        g = Z.T @ r / n + ridge * pen * beta
        return f, g

    return f_g


def _logistic_obj(Z: np.ndarray, y: np.ndarray, ridge: float):
    n = Z.shape[0]
    pen = np.ones(Z.shape[1])
    pen[0] = 0.0

    def f_g(beta: np.ndarray):
        z = Z @ beta
        # log(1 + exp(z)) - y z, computed stably
        f = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * ridge * (pen * beta) @ beta
        p = _sigmoid(z)
        g = Z.T @ (p - y) / n + ridge * pen * beta
        return f, g

    return f_g


def _softmax_obj(Z: np.ndarray, labels: np.ndarray, K: int, ridge: float):
    n = Z.shape[0]
    Y = np.zeros((n, K))
    Y[np.arange(n), labels] = 1.0
    pen = np.ones((Z.shape[1], 1))
    pen[0, 0] = 0.0

    def f_g(B_flat: np.ndarray):
        B = B_flat.reshape(Z.shape[1], K)
        S = Z @ B
        S_shift = S - S.max(axis=1, keepdims=True)
        logZ = np.log(np.exp(S_shift).sum(axis=1))
        f = np.mean(logZ - S_shift[np.arange(n), labels]) + 0.5 * ridge * np.sum((pen * B) ** 2)
        P = _softmax(S)
        G = Z.T @ (P - Y) / n + ridge * pen * B
        return f, G.ravel()

    return f_g


def _gd_minimize(f_g, theta0: np.ndarray, step0: float, max_iters: int, grad_tol: float):
    """Gradient descent with backtracking Armijo line search.

    The accepted step is carried over (and grown) between iterations so the
    search adapts to local curvature. Fully deterministic.
    """
    theta = theta0.copy()
    f, g = f_g(theta)
    step = step0
    converged = False
    for _ in range(max_iters):
        gnorm2 = g @ g
        if np.max(np.abs(g)) <= grad_tol:
            converged = True
            break
        while True:
            cand = theta - step * g
            f_new, g_new = f_g(cand)
            if f_new <= f - 1e-4 * step * gnorm2 or step < 1e-18:
                break
            step *= 0.5
        theta, f, g = cand, f_new, g_new
        step = min(step * 1.5, 1e6)
    else:
        converged = np.max(np.abs(g)) <= grad_tol
    return theta, converged


# ---------------------------------------------------------------------------
# Public fitting API
# ---------------------------------------------------------------------------


def fit_regressor(X: np.ndarray, t: np.ndarray, config: LearnerConfig) -> FittedModel:
    """Fit a squared-error learner: exact ridge solution for the linear kind,
    stored training pairs for the Nadaraya-Watson kind."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    t = np.asarray(t, dtype=float).reshape(-1)
    if X.shape[0] == 0:
        raise EmptyData("fit_regressor needs at least one row")
    if X.shape[0] != t.shape[0]:
        raise DimMismatch(f"X has {X.shape[0]} rows but t has {t.shape[0]}")
    if config.kind == "kernel":
        return _fit_kernel(X, t, config)
    if config.kind != "linear":
        raise ValueError(f"fit_regressor cannot fit kind {config.kind!r}")

    Phi = map_features(X, config.feature_map)
    if config.ridge == 0.0 and Phi.shape[1] > 0 and np.all(Phi == Phi[0]):
        raise DegenerateDesign("all design rows identical with no ridge penalty")
    Phi_std, mean, scale = _standardize(Phi)
    Z = _design(Phi_std)
    if config.ridge == 0.0:
        beta, *_ = np.linalg.lstsq(Z, t, rcond=None)
    else:
        pen = np.ones(Z.shape[1])
        pen[0] = 0.0
        n = Z.shape[0]
        A = Z.T @ Z / n + config.ridge * np.diag(pen)
        beta = np.linalg.solve(A, Z.T @ t / n)
    return FittedModel(
        config=config, coef=beta, feat_mean=mean, feat_scale=scale,
        n_features_in=X.shape[1], n_train=X.shape[0],
    )


def _fit_kernel(X: np.ndarray, t: np.ndarray, config: LearnerConfig) -> FittedModel:
    n, p = X.shape
    if config.bandwidth is not None:
        h = np.full(p, float(config.bandwidth))
    else:
        sigma = X.std(axis=0)
        h = 1.06 * np.where(sigma > 0, sigma, 1.0) * n ** (-1.0 / 5.0)
    return FittedModel(
        config=config, train_x=X.copy(), train_t=t.copy(), bandwidth=h,
        global_mean=float(t.mean()), n_features_in=p, n_train=n,
    )


def fit_classifier(X: np.ndarray, labels: np.ndarray, config: LearnerConfig) -> FittedModel:
    """Cross-entropy ERM: logistic (two classes) or softmax (n_classes)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    labels = np.asarray(labels)
    if X.shape[0] == 0:
        raise EmptyData("fit_classifier needs at least one row")
    if X.shape[0] != labels.shape[0]:
        raise DimMismatch(f"X has {X.shape[0]} rows but labels has {labels.shape[0]}")
    if not np.all(labels == labels.astype(int)):
        raise LabelOutOfRange("labels must be integers")
    labels = labels.astype(int)
    K = 2 if config.kind == "logistic" else config.n_classes
    if labels.min() < 0 or labels.max() >= K:
        raise LabelOutOfRange(f"labels must lie in 0..{K - 1}, got range "
                              f"[{labels.min()}, {labels.max()}]")

    Phi = map_features(X, config.feature_map)
    Phi_std, mean, scale = _standardize(Phi)
    Z = _design(Phi_std)
    if config.kind == "logistic":
        f_g = _logistic_obj(Z, labels.astype(float), config.ridge)
        theta0 = np.zeros(Z.shape[1])
    elif config.kind == "softmax":
        f_g = _softmax_obj(Z, labels, K, config.ridge)
        theta0 = np.zeros(Z.shape[1] * K)
    else:
        raise ValueError(f"fit_classifier cannot fit kind {config.kind!r}")

    theta, converged = _gd_minimize(f_g, theta0, config.step_size, config.max_iters, config.grad_tol)
    coef = theta if config.kind == "logistic" else theta.reshape(Z.shape[1], K)
    model = FittedModel(
        config=config, coef=coef, feat_mean=mean, feat_scale=scale,
        n_features_in=X.shape[1], n_train=X.shape[0], converged=converged,
    )
    if np.min(model.predict_proba(X)) < 1e-6:
        model.separation = True
        warnings.warn("fitted class probabilities below 1e-6; data may be separated",
                      SeparationWarning, stacklevel=2)
    return model


def predict(model: FittedModel, X: np.ndarray) -> np.ndarray:
    """Functional alias for ``model.predict``."""
    return model.predict(X)


def gradient_check(config: LearnerConfig, X: np.ndarray, t: np.ndarray) -> float:
    """Max relative error between the analytic gradient and central finite
    differences (step 1e-6) at a small random parameter point."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    t = np.asarray(t)
    Phi_std, _, _ = _standardize(map_features(X, config.feature_map))
    Z = _design(Phi_std)
    if config.kind == "linear":
        f_g = _linear_obj(Z, t.astype(float), config.ridge)
        dim = Z.shape[1]
    elif config.kind == "logistic":
        f_g = _logistic_obj(Z, t.astype(float), config.ridge)
        dim = Z.shape[1]
    elif config.kind == "softmax":
        f_g = _softmax_obj(Z, t.astype(int), config.n_classes, config.ridge)
        dim = Z.shape[1] * config.n_classes
    else:
        raise ValueError("gradient_check applies to parametric kinds only")

    rng = np.random.default_rng(config.seed)
    theta = 0.5 * rng.standard_normal(dim)
    _, g_analytic = f_g(theta)
    h = 1e-6
    g_fd = np.empty(dim)
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = h
        f_plus, _ = f_g(theta + e)
        f_minus, _ = f_g(theta - e)
        g_fd[i] = (f_plus - f_minus) / (2 * h)
    denom = max(1.0, float(np.max(np.abs(g_analytic))))
    return float(np.max(np.abs(g_analytic - g_fd)) / denom)
