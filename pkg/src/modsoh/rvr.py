"""Relevance vector regression with automatic relevance determination.

The model is ``y = Phi w + noise`` with one Gaussian RBF basis per training
input (plus an optional constant), an independent zero-mean Gaussian prior
of precision ``alpha_i`` on each weight and noise precision ``beta``.  The
hyperparameters are re-estimated by fixed-point iteration; weights whose
precision diverges are pruned, and the surviving training inputs are the
relevance vectors.

Training works in whatever units it is given; the caller is expected to
pass standardized inputs and labels, and the model stores the
standardization so that :func:`predict` takes and returns physical units.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .data_model import FeatureTable, Standardization, standardize_fit
from .errors import (
    ConditioningError,
    DegenerateNoiseError,
    EmptyModelError,
    ParameterMismatchError,
    ValidationError,
)

log = logging.getLogger(__name__)

MODEL_VERSION = 1
MODEL_KEYS = ("version", "rho", "beta", "offset_used", "alpha", "mu", "sigma", "rv", "x_mean",
              "x_std", "y_mean", "y_std", "converged", "feature_names")
# lower bound on the noise variance, relative to the label variance
NOISE_FLOOR = 1e-8


@dataclass(frozen=True)
class RvrConfig:
    rho: float | None = None
    n_iter_max: int = 3000
    alpha_threshold: float = 1e9
    tolerance: float = 1e-3
    epsilon: float = 1e-8
    include_offset: bool = True

    def __post_init__(self):
        if self.rho is not None and not self.rho > 0:
            raise ValidationError("rho must be positive")
        if not self.alpha_threshold > 1:
            raise ValidationError("alpha_threshold must be much larger than 1")
        if not self.epsilon > 0 or not self.tolerance > 0:
            raise ValidationError("epsilon and tolerance must be positive")
        if self.n_iter_max < 1:
            raise ValidationError("n_iter_max must be at least 1")


def _as_inputs(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValidationError("inputs must be an (N, d) array")
    return x


def rbf_kernel(x, x2, rho: float) -> float:
    """``exp(-rho * ||x - x2||^2)``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape != x2.shape:
        raise ValidationError(f"dimension mismatch: {x.shape} vs {x2.shape}")
    return float(np.exp(-rho * np.sum((x - x2) ** 2)))


def kernel_matrix(a, b, rho: float) -> np.ndarray:
    a, b = _as_inputs(a), _as_inputs(b)
    if a.shape[1] != b.shape[1]:
        raise ValidationError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
    return np.exp(-rho * d2)


def build_design(inputs, rho: float, include_offset: bool = True) -> np.ndarray:
    """Design matrix: optional leading ones column, then ``K(x_i, x_j)``."""
    x = _as_inputs(inputs)
    if len(x) < 2:
        raise ValidationError("need at least 2 inputs")
    k = kernel_matrix(x, x, rho)
    return np.hstack([np.ones((len(x), 1)), k]) if include_offset else k


def median_heuristic_rho(inputs) -> float:
    """``1 / (2 d m^2)`` with ``m`` the median pairwise Euclidean distance."""
    x = _as_inputs(inputs)
    d2 = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)
    iu = np.triu_indices(len(x), 1)
    med = float(np.median(np.sqrt(d2[iu])))
    if not med > 0:
        raise ValidationError("all training inputs coincide")
    return 1.0 / (2.0 * x.shape[1] * med * med)


def _factor(phi, alpha, beta):
    h = beta * (phi.T @ phi)
    h[np.diag_indices_from(h)] += alpha
    try:
        return cho_factor(h, lower=True)
    except LinAlgError as exc:
        raise ConditioningError(
            f"posterior precision not positive definite; alpha spans "
            f"[{np.min(alpha):.3g}, {np.max(alpha):.3g}], beta = {beta:.3g}") from exc


def initial_hyperparameters(n_basis: int, n: int, y_std: float) -> tuple[np.ndarray, float]:
    """Starting precisions: ``alpha_i = 1/(N+1)^2`` and ``beta = 1/(0.1 std y)^2``."""
    return np.full(n_basis, 1.0 / (n + 1) ** 2), 1.0 / (0.1 * y_std) ** 2


def posterior_update(phi, y, alpha, beta) -> tuple[np.ndarray, np.ndarray]:
    """Posterior covariance ``(beta Phi'Phi + A)^-1`` and mean ``beta Sigma Phi'y``."""
    phi = np.asarray(phi, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if np.any(~(alpha > 0)) or not beta > 0:
        raise ValidationError("alpha and beta must be positive")
    c = _factor(phi, alpha, beta)
    sigma = cho_solve(c, np.eye(len(alpha)))
    sigma = 0.5 * (sigma + sigma.T)
    mu = cho_solve(c, beta * (phi.T @ np.asarray(y, dtype=float)))
    return sigma, mu


def hyper_update(sigma, mu, alpha_old, beta_old, phi, y, epsilon: float = 1e-8
                 ) -> tuple[np.ndarray, float]:
    """Re-estimate ``alpha`` and ``beta`` from the current posterior.

    ``gamma_i = 1 - alpha_i Sigma_ii`` is floored at ``epsilon`` before
    ``alpha_i = gamma_i / mu_i^2``, so round-off cannot make a precision
    negative.  A zero residual or ``N <= sum(gamma)`` raises
    :class:`DegenerateNoiseError`.  ``beta_old`` is accepted for symmetry
    with the update equations but does not enter them.
    """
    alpha_old = np.asarray(alpha_old, dtype=float)
    mu = np.asarray(mu, dtype=float)
    y = np.asarray(y, dtype=float)
    gamma = 1.0 - alpha_old * np.diag(sigma)
    with np.errstate(divide="ignore"):
        alpha = np.maximum(gamma, epsilon) / (mu * mu)
    dof = len(y) - float(np.sum(gamma))
    if not dof > 0:
        raise DegenerateNoiseError(f"N - sum(gamma) = {dof:.3g} is not positive")
    rss = float(np.sum((y - np.asarray(phi) @ mu) ** 2))
    if rss == 0.0:
        raise DegenerateNoiseError("zero residual: noise precision is unbounded")
    return alpha, dof / rss


def log_evidence(phi, y, alpha, beta) -> float:
    """Log marginal likelihood ``log N(y | 0, beta^-1 I + Phi A^-1 Phi')``."""
    n = len(y)
    c, lower = _factor(phi, alpha, beta)
    mu = cho_solve((c, lower), beta * (phi.T @ y))
    logdet_h = 2.0 * float(np.sum(np.log(np.diag(c))))
    logdet_c = logdet_h - float(np.sum(np.log(alpha))) - n * math.log(beta)
    quad = beta * float(np.sum((y - phi @ mu) ** 2)) + float(np.sum(alpha * mu * mu))
    return -0.5 * (n * math.log(2.0 * math.pi) + logdet_c + quad)


@dataclass(frozen=True)
class RvrModel:
    """A trained model.  Arrays cover only the surviving bases.

    ``rv`` holds relevance vectors in standardized input units; the offset,
    when it survives, is the first entry of ``alpha`` and ``mu``.
    """

    rho: float
    beta: float
    offset_used: bool
    alpha: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    rv: np.ndarray
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float
    converged: bool
    feature_names: tuple[str, ...] = ()
    n_iter: int = 0
    evidence: tuple[float, ...] = field(default=(), compare=False, repr=False)
    active_sizes: tuple[int, ...] = field(default=(), compare=False, repr=False)
    alpha_init: float = field(default=float("nan"), compare=False, repr=False)

    def __post_init__(self):
        for name in ("alpha", "mu", "sigma", "rv", "x_mean", "x_std"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        n = len(self.rv) + int(self.offset_used)
        if not (len(self.alpha) == len(self.mu) == n and self.sigma.shape == (n, n)):
            raise ValidationError("model dimensions are inconsistent")

    @property
    def n_rv(self) -> int:
        return len(self.rv)

    @property
    def dim(self) -> int:
        return self.rv.shape[1] if self.rv.ndim == 2 and self.rv.size else len(self.x_mean)

    def design(self, z) -> np.ndarray:
        """Basis values at standardized inputs ``z``."""
        k = kernel_matrix(z, self.rv, self.rho) if self.n_rv else np.zeros((len(z), 0))
        return np.hstack([np.ones((len(z), 1)), k]) if self.offset_used else k


def train(inputs, labels, config: RvrConfig = RvrConfig(),
          standardization: Standardization | None = None) -> RvrModel:
    """Fit the model on (already standardized) inputs and labels.

    Parameters
    ----------
    inputs : array_like, shape (N, d)
    labels : array_like, shape (N,)
    config : RvrConfig
        ``rho=None`` selects :func:`median_heuristic_rho`.
    standardization : Standardization, optional
        Stored on the model so that prediction accepts physical units.
        Without it the model works in the units it was trained in.

    Notes
    -----
    Every weight, the offset included, starts at precision ``1/(N+1)^2``
    and the noise variance at ``(0.1 std y)^2``.  Weights whose precision
    reaches ``alpha_threshold`` are pruned.  Iteration stops once the
    largest precision change is within ``tolerance`` (from the second
    iteration on) or after ``n_iter_max`` rounds.  The returned posterior is
    recomputed from the final hyperparameters.  The noise variance is kept
    at or above ``1e-8`` times the label variance so that noiseless data do
    not make the posterior singular.
    """
    x = _as_inputs(inputs)
    y = np.asarray(labels, dtype=float)
    n = len(x)
    if n < 4:
        raise ValidationError("need at least 4 training points")
    if y.shape != (n,):
        raise ValidationError("one label per input required")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValidationError("non-finite training data")
    y_sd = float(np.std(y, ddof=1))
    if not y_sd > 0:
        raise DegenerateNoiseError("labels are constant")
    rho = config.rho if config.rho is not None else median_heuristic_rho(x)
    phi_full = build_design(x, rho, config.include_offset)
    off = int(config.include_offset)
    noise_floor = NOISE_FLOOR * y_sd * y_sd

    active = np.arange(phi_full.shape[1])
    alpha, beta = initial_hyperparameters(len(active), n, y_sd)
    alpha_init = float(alpha[0])
    evidence, sizes = [], []
    converged = False
    it = 0
    for it in range(1, config.n_iter_max + 1):
        phi = phi_full[:, active]
        sigma, mu = posterior_update(phi, y, alpha, beta)
        evidence.append(log_evidence(phi, y, alpha, beta))
        if len(evidence) > 1 and evidence[-1] < evidence[-2] - 1e-6:
            log.debug("evidence decreased at iteration %d: %.9g -> %.9g", it, evidence[-2], evidence[-1])
        try:
            new_alpha, new_beta = hyper_update(sigma, mu, alpha, beta, phi, y, config.epsilon)
        except DegenerateNoiseError:
            gamma = 1.0 - alpha * np.diag(sigma)
            with np.errstate(divide="ignore"):
                new_alpha = np.maximum(gamma, config.epsilon) / (mu * mu)
            new_beta = 1.0 / noise_floor
        new_beta = min(new_beta, 1.0 / noise_floor)
        keep = new_alpha < config.alpha_threshold
        if not np.any(keep):
            raise EmptyModelError("every basis function was pruned")
        change = float(np.max(np.abs(new_alpha[keep] - alpha[keep])))
        active, alpha, beta = active[keep], new_alpha[keep], new_beta
        sizes.append(len(active))
        if it > 1 and change <= config.tolerance:
            converged = True
            break

    phi = phi_full[:, active]
    sigma, mu = posterior_update(phi, y, alpha, beta)
    offset_used = bool(off and active[0] == 0)
    rv_idx = active[int(offset_used):] - off
    if standardization is None:
        d = x.shape[1]
        x_mean, x_std, y_mean, y_std, names = np.zeros(d), np.ones(d), 0.0, 1.0, ()
    else:
        s = standardization
        x_mean, x_std, names = s.x_mean, s.x_std, s.names
        y_mean = 0.0 if s.y_mean is None else s.y_mean
        y_std = 1.0 if s.y_std is None else s.y_std
    return RvrModel(rho, beta, offset_used, alpha, mu, sigma, x[rv_idx], x_mean, x_std,
                    y_mean, y_std, converged, names, it, tuple(evidence), tuple(sizes), alpha_init)


def identity_residual(model: RvrModel, inputs, labels=None) -> float:
    """``max |Sigma (beta Phi'Phi + A) - I|`` on the pruned training system."""
    z = _as_inputs(inputs)
    phi = model.design(z)
    h = model.beta * (phi.T @ phi) + np.diag(model.alpha)
    return float(np.max(np.abs(model.sigma @ h - np.eye(len(model.alpha)))))


@dataclass(frozen=True)
class SohEstimate:
    mean: float
    sigma: float

    @property
    def interval(self) -> tuple[float, float]:
        return (self.mean - 3.0 * self.sigma, self.mean + 3.0 * self.sigma)


def predict_standardized(model: RvrModel, z) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and sigma in standardized units."""
    z = _as_inputs(z)
    phi = model.design(z)
    mean = phi @ model.mu
    var = 1.0 / model.beta + np.einsum("ij,jk,ik->i", phi, model.sigma, phi)
    return mean, np.sqrt(var)


def predict_many(model: RvrModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and sigma in physical units for rows of ``x``."""
    x = _as_inputs(x)
    if x.shape[1] != len(model.x_mean):
        raise ValidationError(f"expected {len(model.x_mean)} inputs per row, got {x.shape[1]}")
    mean, sd = predict_standardized(model, (x - model.x_mean) / model.x_std)
    return mean * model.y_std + model.y_mean, sd * model.y_std


def predict(model: RvrModel, x) -> SohEstimate:
    """Predictive distribution for one input vector."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.ndim != 1 or len(x) != len(model.x_mean):
        raise ValidationError(f"expected an input vector of length {len(model.x_mean)}")
    mean, sd = predict_many(model, x[None, :])
    return SohEstimate(float(mean[0]), float(sd[0]))


def evaluate(model: RvrModel, table: FeatureTable) -> dict[str, float]:
    """RMSE, mean three-sigma width and three-sigma coverage on a labelled table.

    ``table`` is in physical units and its columns must match the model's
    feature names (when the model has them).
    """
    if table.labels is None:
        raise ValidationError("evaluation needs labels")
    if table.n_rows == 0:
        raise ValidationError("evaluation table is empty")
    if table.standardization is not None:
        raise ValidationError("pass the evaluation table in physical units")
    if model.feature_names and tuple(model.feature_names) != table.feature_names:
        table = _reorder(table, model.feature_names)
    if not table.mask.all():
        raise ValidationError("evaluation rows contain masked features")
    mean, sd = predict_many(model, table.rows)
    err = mean - table.labels
    inside = np.abs(err) <= 3.0 * sd
    return {"rmse": float(np.sqrt(np.mean(err ** 2))),
            "avg_three_sigma": float(np.mean(3.0 * sd)),
            "coverage_997": float(np.mean(inside)),
            "n": int(table.n_rows),
            "n_rv": int(model.n_rv)}


def _reorder(table: FeatureTable, names: Sequence[str]) -> FeatureTable:
    missing = [n for n in names if n not in table.feature_names]
    if missing:
        raise ParameterMismatchError(f"table lacks model features {missing}")
    return table.select(names)


def train_table(table: FeatureTable, config: RvrConfig = RvrConfig()) -> RvrModel:
    """Standardize a physical-unit table (ddof=1) and train on it."""
    if table.labels is None:
        raise ValidationError("training needs labels")
    if not table.mask.all():
        raise ValidationError("training rows contain masked features")
    std = standardize_fit(table) if table.standardization is None else table
    return train(std.rows, std.labels, config, std.standardization)


# ---------------------------------------------------------------------------
# model file

def model_to_dict(model: RvrModel) -> dict:
    return {
        "version": MODEL_VERSION,
        "rho": model.rho,
        "beta": model.beta,
        "offset_used": model.offset_used,
        "alpha": model.alpha.tolist(),
        "mu": model.mu.tolist(),
        "sigma": model.sigma.tolist(),
        "rv": model.rv.tolist(),
        "x_mean": model.x_mean.tolist(),
        "x_std": model.x_std.tolist(),
        "y_mean": model.y_mean,
        "y_std": model.y_std,
        "converged": model.converged,
        "feature_names": list(model.feature_names),
    }


def save_model(model: RvrModel, path) -> None:
    """Write the model as JSON; floats keep full round-trip precision."""
    text = json.dumps(model_to_dict(model), indent=1, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_model(path) -> RvrModel:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    missing = [k for k in MODEL_KEYS if k not in data]
    if missing:
        raise ValidationError(f"{path}: model file lacks {missing}")
    if data["version"] != MODEL_VERSION:
        raise ValidationError(f"{path}: unsupported model version {data['version']}")
    rv = np.array(data["rv"], dtype=float)
    if rv.size == 0:
        rv = rv.reshape(0, len(data["x_mean"]))
    return RvrModel(float(data["rho"]), float(data["beta"]), bool(data["offset_used"]),
                    data["alpha"], data["mu"], data["sigma"], rv, data["x_mean"], data["x_std"],
                    float(data["y_mean"]), float(data["y_std"]), bool(data["converged"]),
                    tuple(data["feature_names"]))
