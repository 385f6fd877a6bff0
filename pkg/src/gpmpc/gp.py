"""Per-output Gaussian process regression of the model residual.

The three outputs (residuals of vx, vy, omega) share one dictionary of
training inputs ``z = [X, Y, phi, vx, vy, omega, delta, T]`` but carry their
own squared-exponential hyperparameters.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_solve, cholesky, LinAlgError
from scipy.optimize import minimize

from .dynamics import BD, STATE_DIM, NominalModel

logger = logging.getLogger(__name__)

Z_DIM = 8
OUT_DIM = 3
Z_NAMES = ("X", "Y", "phi", "vx", "vy", "omega", "delta", "T")
Y_NAMES = ("d_vx", "d_vy", "d_omega")

JITTER_START = 1e-10
JITTER_TRIES = 3
MIN_FIT_POINTS = 5

# Reference hyperparameters; entries of M are squared lengthscales.
DEFAULT_M = (
    (0.0346, 0.0151, 0.0148, 0.0153, 0.0163, 0.0156, 0.0148, 0.016),
    (9.9184e4, 6.94995e4, 731.0, 1988.0, 15.0, 6.2355e4, 0.12, 1098.0),
    (9.9829e4, 9.6999e4, 1.199e4, 2131.0, 77.0, 12.0, 0.51, 982.0),
)
DEFAULT_SIGMA_F2 = (2.8052e-11, 0.0236, 0.0117)
DEFAULT_SIGMA_N2 = (7.1304e-4, 1.0358e-10, 1.0059e-10)


class GPNumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    lengthscales: np.ndarray
    sigma_f2: float
    sigma_n2: float

    def __post_init__(self):
        ls = np.asarray(self.lengthscales, dtype=float).reshape(-1)
        object.__setattr__(self, "lengthscales", ls)
        if np.any(ls <= 0) or self.sigma_f2 <= 0 or self.sigma_n2 <= 0:
            raise ValueError("hyperparameters must be strictly positive")

    @property
    def M(self) -> np.ndarray:
        """Diagonal of the squared-lengthscale matrix."""
        return self.lengthscales**2

    @classmethod
    def from_M(cls, M: Sequence[float], sigma_f2: float, sigma_n2: float) -> "Hyperparams":
        return cls(np.sqrt(np.asarray(M, dtype=float)), sigma_f2, sigma_n2)

    def to_log(self) -> np.ndarray:
        return np.log(np.concatenate([self.lengthscales, [self.sigma_f2, self.sigma_n2]]))

    @classmethod
    def from_log(cls, theta: np.ndarray) -> "Hyperparams":
        theta = np.exp(np.asarray(theta, dtype=float))
        return cls(theta[:-2], float(theta[-2]), float(theta[-1]))


def default_hyperparams() -> list[Hyperparams]:
    return [Hyperparams.from_M(m, f, n) for m, f, n in zip(DEFAULT_M, DEFAULT_SIGMA_F2, DEFAULT_SIGMA_N2)]


def kernel(z, z_prime, hp: Hyperparams) -> float:
    d = (np.asarray(z, dtype=float) - np.asarray(z_prime, dtype=float)) / hp.lengthscales
    return float(hp.sigma_f2 * np.exp(-0.5 * d @ d))


def kernel_matrix(Z1, Z2, hp: Hyperparams) -> np.ndarray:
    A = np.atleast_2d(Z1) / hp.lengthscales
    B = np.atleast_2d(Z2) / hp.lengthscales
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    np.maximum(sq, 0.0, out=sq)
    return hp.sigma_f2 * np.exp(-0.5 * sq)


def chol_jitter(K: np.ndarray, scale: float) -> np.ndarray:
    """Lower Cholesky factor, retrying with escalating diagonal jitter."""
    try:
        return cholesky(K, lower=True, check_finite=False)
    except LinAlgError:
        pass
    jitter = JITTER_START * scale
    eye = np.eye(K.shape[0])
    for _ in range(JITTER_TRIES):
        try:
            return cholesky(K + jitter * eye, lower=True, check_finite=False)
        except LinAlgError:
            jitter *= 10.0
    raise GPNumericalError("Gram matrix is not positive definite even with jitter")


@dataclass
class GPDictionary:
    """Bounded training set. Rows are kept in insertion order (oldest first)."""

    Z: np.ndarray = field(default_factory=lambda: np.zeros((0, Z_DIM)))
    Y: np.ndarray = field(default_factory=lambda: np.zeros((0, OUT_DIM)))
    n_max: int = 300
    sigma_evict: Optional[float] = None  # None: use sigma_n2 of the ranking hyperparameters

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=float).reshape(-1, Z_DIM)
        self.Y = np.asarray(self.Y, dtype=float).reshape(-1, OUT_DIM)
        if len(self.Z) != len(self.Y):
            raise ValueError("Z and Y must have the same number of rows")
        if len(self.Z) > self.n_max:
            raise ValueError("dictionary exceeds its capacity")
        if not (np.all(np.isfinite(self.Z)) and np.all(np.isfinite(self.Y))):
            raise ValueError("dictionary entries must be finite")

    def __len__(self) -> int:
        return len(self.Z)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("# schema: " + ",".join(Z_NAMES + Y_NAMES) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(Z_NAMES + Y_NAMES)
            for z, y in zip(self.Z, self.Y):
                w.writerow([repr(float(v)) for v in np.concatenate([z, y])])

    @classmethod
    def from_csv(cls, path, n_max: Optional[int] = None, sigma_evict: Optional[float] = None) -> "GPDictionary":
        rows = []
        with open(path, newline="") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        reader = csv.reader(lines)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != Z_NAMES + Y_NAMES:
            raise ValueError(f"{path}: expected header {','.join(Z_NAMES + Y_NAMES)}")
        for row in reader:
            if row:
                rows.append([float(v) for v in row])
        data = np.array(rows, dtype=float).reshape(-1, Z_DIM + OUT_DIM)
        return cls(data[:, :Z_DIM], data[:, Z_DIM:], n_max if n_max is not None else max(len(data), 1), sigma_evict)


def leave_one_out_variance(Z: np.ndarray, hp: Hyperparams, sigma: float) -> np.ndarray:
    """Posterior variance at each point given all the others.

    Uses the Schur-complement identity ``1 / [(K + sigma I)^-1]_ii - sigma``.
    """
    n = len(Z)
    if n == 1:
        return np.array([hp.sigma_f2])
    A = kernel_matrix(Z, Z, hp) + sigma * np.eye(n)
    L = chol_jitter(A, hp.sigma_f2)
    Linv = cho_solve((L, True), np.eye(n))
    return 1.0 / np.diag(Linv) - sigma


def insert_with_eviction(dictionary: GPDictionary, z_new, y_new, hp: Hyperparams):
    """Add a pair; at capacity, drop the point with the smallest leave-one-out variance.

    Returns ``(new_dictionary, dropped)`` where ``dropped`` is the index in the
    augmented set (existing rows then the candidate, index ``len(dictionary)``)
    or ``None`` when nothing was removed.
    """
    z_new = np.asarray(z_new, dtype=float).reshape(1, Z_DIM)
    y_new = np.asarray(y_new, dtype=float).reshape(1, OUT_DIM)
    Z = np.vstack([dictionary.Z, z_new])
    Y = np.vstack([dictionary.Y, y_new])
    if len(dictionary) < dictionary.n_max:
        return replace(dictionary, Z=Z, Y=Y), None
    sigma = hp.sigma_n2 if dictionary.sigma_evict is None else dictionary.sigma_evict
    theta = leave_one_out_variance(Z, hp, sigma)
    # ties (within roundoff) go to the oldest entry
    tol = 1e-12 * hp.sigma_f2
    drop = int(np.flatnonzero(theta <= theta.min() + tol)[0])
    keep = np.arange(len(Z)) != drop
    return replace(dictionary, Z=Z[keep], Y=Y[keep]), drop


def residual_target(x_next, x, u, nominal: NominalModel) -> np.ndarray:
    """(vx, vy, omega) rows of the one-step mismatch against the nominal model."""
    diff = np.asarray(x_next, dtype=float) - nominal.step(x, u)
    return diff @ np.linalg.pinv(BD).T


@dataclass(frozen=True)
class PredictiveDist:
    mu_d: np.ndarray
    Sigma_d: np.ndarray


class GPModel:
    """Three independent GPs over a shared dictionary with cached factorizations."""

    def __init__(self, hyperparams: Sequence[Hyperparams], dictionary: Optional[GPDictionary] = None,
                 evict_dim: int = 1):
        if len(hyperparams) != OUT_DIM:
            raise ValueError(f"need {OUT_DIM} hyperparameter sets")
        self.hyperparams = list(hyperparams)
        self.dictionary = dictionary if dictionary is not None else GPDictionary()
        self.evict_dim = evict_dim
        self.clamped_variances = 0
        self._rebuild()

    def __len__(self) -> int:
        return len(self.dictionary)

    @property
    def empty(self) -> bool:
        return len(self.dictionary) == 0

    def _rebuild(self) -> None:
        self._chol, self._alpha, self._Zs = [], [], []
        Z = self.dictionary.Z
        for d, hp in enumerate(self.hyperparams):
            self._Zs.append(Z / hp.lengthscales)
            if len(Z) == 0:
                self._chol.append(None)
                self._alpha.append(None)
                continue
            K = kernel_matrix(Z, Z, hp) + hp.sigma_n2 * np.eye(len(Z))
            L = chol_jitter(K, hp.sigma_f2)
            self._chol.append(L)
            self._alpha.append(cho_solve((L, True), self.dictionary.Y[:, d]))

    # -- mutation -----------------------------------------------------------
    def set_dictionary(self, dictionary: GPDictionary) -> None:
        self.dictionary = dictionary
        self._rebuild()

    def set_hyperparams(self, hyperparams: Sequence[Hyperparams]) -> None:
        self.hyperparams = list(hyperparams)
        self._rebuild()

    def insert(self, z, y) -> Optional[int]:
        self.dictionary, dropped = insert_with_eviction(self.dictionary, z, y, self.hyperparams[self.evict_dim])
        self._rebuild()
        return dropped

    def copy(self) -> "GPModel":
        return GPModel(self.hyperparams, replace(self.dictionary), self.evict_dim)

    # -- queries ------------------------------------------------------------
    def _cross(self, Zq: np.ndarray, d: int) -> np.ndarray:
        hp = self.hyperparams[d]
        A = Zq / hp.lengthscales
        B = self._Zs[d]
        sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
        np.maximum(sq, 0.0, out=sq)
        return hp.sigma_f2 * np.exp(-0.5 * sq)

    def mean(self, Zq) -> np.ndarray:
        """Posterior means, shape ``(..., 3)``; cheaper than ``predict``."""
        Zq = np.asarray(Zq, dtype=float)
        flat = Zq.reshape(-1, Z_DIM)
        out = np.zeros((len(flat), OUT_DIM))
        if not self.empty:
            for d in range(OUT_DIM):
                out[:, d] = self._cross(flat, d) @ self._alpha[d]
        return out.reshape(Zq.shape[:-1] + (OUT_DIM,))

    def predict(self, Zq):
        """Posterior means and variances, each of shape ``(..., 3)``."""
        Zq = np.asarray(Zq, dtype=float)
        flat = Zq.reshape(-1, Z_DIM)
        mu = np.zeros((len(flat), OUT_DIM))
        var = np.empty((len(flat), OUT_DIM))
        for d, hp in enumerate(self.hyperparams):
            if self.empty:
                var[:, d] = hp.sigma_f2
                continue
            Ks = self._cross(flat, d)
            mu[:, d] = Ks @ self._alpha[d]
            V = cho_solve((self._chol[d], True), Ks.T)
            var[:, d] = hp.sigma_f2 - np.einsum("ij,ji->i", Ks, V)
        neg = var < 0.0
        if np.any(neg):
            self.clamped_variances += int(neg.sum())
            var[neg] = 0.0
        shape = Zq.shape[:-1] + (OUT_DIM,)
        return mu.reshape(shape), var.reshape(shape)

    def mean_jacobian(self, z) -> np.ndarray:
        """d(mu)/d(state) at one point, shape ``(3, 6)``."""
        z = np.asarray(z, dtype=float).reshape(Z_DIM)
        jac = np.zeros((OUT_DIM, STATE_DIM))
        if self.empty:
            return jac
        for d, hp in enumerate(self.hyperparams):
            ks = self._cross(z[None, :], d)[0]
            diff = (z[None, :] - self.dictionary.Z) / hp.M
            jac[d] = -((ks * self._alpha[d]) @ diff)[:STATE_DIM]
        return jac

    def nll(self, dim: int) -> float:
        return nll_value(self.dictionary.Z, self.dictionary.Y[:, dim], self.hyperparams[dim])


def posterior(model: GPModel, z_star) -> PredictiveDist:
    mu, var = model.predict(np.asarray(z_star, dtype=float)[None, :])
    return PredictiveDist(mu[0], np.diag(var[0]))


def posterior_mean_jacobian(model: GPModel, z_star) -> np.ndarray:
    return model.mean_jacobian(z_star)


def nll(model: GPModel, dim: int) -> float:
    return model.nll(dim)


def nll_value(Z: np.ndarray, y: np.ndarray, hp: Hyperparams) -> float:
    """Negative log marginal likelihood of one output dimension."""
    n = len(Z)
    if n == 0:
        raise ValueError("negative log likelihood needs at least one point")
    K = kernel_matrix(Z, Z, hp) + hp.sigma_n2 * np.eye(n)
    L = chol_jitter(K, hp.sigma_f2)
    alpha = cho_solve((L, True), y)
    return float(0.5 * y @ alpha + np.log(np.diag(L)).sum() + 0.5 * n * np.log(2.0 * np.pi))


@dataclass(frozen=True)
class FitResult:
    hyperparams: Hyperparams
    nll: float
    improved: bool


LOG_BOUNDS_LENGTHSCALE = (np.log(1e-3), np.log(1e4))
LOG_BOUNDS_SIGMA_F2 = (np.log(1e-12), np.log(1e4))
LOG_BOUNDS_SIGMA_N2 = (np.log(1e-10), np.log(1e4))


def _safe_nll(theta, Z, y) -> float:
    try:
        return nll_value(Z, y, Hyperparams.from_log(theta))
    except (GPNumericalError, ValueError, FloatingPointError):
        return np.inf


def _fd_grad(fun, theta, h=1e-5):
    g = np.empty_like(theta)
    for i in range(len(theta)):
        e = np.zeros_like(theta)
        e[i] = h
        fp, fm = fun(theta + e), fun(theta - e)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            f0 = fun(theta)
            fp = fp if np.isfinite(fp) else f0
            fm = fm if np.isfinite(fm) else f0
        g[i] = (fp - fm) / (2.0 * h)
    return g


def fit_hyperparams(dictionary: GPDictionary, init: Hyperparams, dim: int,
                    max_iter: int = 60, extra_starts: int = 1) -> FitResult:
    """Maximum-likelihood hyperparameters for one output, optimized in log space.

    Starts from ``init`` plus data-driven starting points; the best result is
    kept. Falls back to ``init`` (``improved=False``) when nothing beats it.
    """
    Z, y = dictionary.Z, dictionary.Y[:, dim]
    if len(Z) < MIN_FIT_POINTS:
        raise ValueError(f"need at least {MIN_FIT_POINTS} points to fit hyperparameters, got {len(Z)}")

    bounds = [LOG_BOUNDS_LENGTHSCALE] * Z_DIM + [LOG_BOUNDS_SIGMA_F2, LOG_BOUNDS_SIGMA_N2]
    lo, hi = np.array(bounds).T

    starts = [init.to_log()]
    spread = np.std(Z, axis=0)
    spread = np.where(spread > 1e-6, spread, 1.0)
    var_y = max(float(np.var(y)), 1e-10)
    for j in range(extra_starts):
        scale = 2.0**j
        starts.append(np.log(np.concatenate([scale * spread, [var_y, 1e-2 * var_y]])))

    fun = lambda th: _safe_nll(th, Z, y)
    f_init = fun(np.clip(init.to_log(), lo, hi))
    best_theta, best_f = init.to_log(), f_init
    for theta0 in starts:
        theta0 = np.clip(theta0, lo, hi)
        if not np.isfinite(fun(theta0)):
            continue
        res = minimize(fun, theta0, jac=lambda th: _fd_grad(fun, th), method="L-BFGS-B",
                       bounds=bounds, options={"maxiter": max_iter})
        if np.isfinite(res.fun) and res.fun < best_f:
            best_theta, best_f = res.x, float(res.fun)

    if not best_f < f_init:
        logger.warning("hyperparameter fit for output %d found no improving step", dim)
        return FitResult(init, f_init, False)
    return FitResult(Hyperparams.from_log(best_theta), best_f, True)
