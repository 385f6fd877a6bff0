"""Mean/covariance propagation through the GP-augmented nominal model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .dynamics import BD, STATE_DIM, NominalModel, ProcessNoise
from .gp import GPModel


@dataclass(frozen=True)
class StateBelief:
    mu_x: np.ndarray
    Sigma_x: np.ndarray


class PropagationError(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"propagation failed at horizon step {step}: {cause}")
        self.step = step
        self.cause = cause


def _active(model: Optional[GPModel]) -> bool:
    # an empty dictionary carries no learned residual and is treated as absent
    return model is not None and not model.empty


def propagate_mean(belief: StateBelief, u, model: Optional[GPModel], nominal: NominalModel) -> np.ndarray:
    mu_next = nominal.step(belief.mu_x, u)
    if _active(model):
        z = np.concatenate([belief.mu_x, u])
        mu_next = mu_next + BD @ model.mean(z)
    return mu_next


def dynamics_jacobian(mu_x, u, nominal: NominalModel) -> np.ndarray:
    """Central-difference Jacobian of the discrete nominal step w.r.t. the state."""
    mu_x = np.asarray(mu_x, dtype=float)
    h = 1e-6 * np.maximum(1.0, np.abs(mu_x))
    pert = np.concatenate([np.diag(h), -np.diag(h)])
    # translation invariance: X, Y columns are exact identities, skip the noise
    out = nominal.step(mu_x + pert, np.broadcast_to(u, (2 * STATE_DIM, 2)))
    A = (out[:STATE_DIM] - out[STATE_DIM:]).T / (2.0 * h)
    A[:, 0] = 0.0
    A[:, 1] = 0.0
    A[0, 0] = 1.0
    A[1, 1] = 1.0
    return A


def joint_covariance(Sigma_x: np.ndarray, Sigma_d: np.ndarray, Sigma_dx: np.ndarray,
                     Sigma_w: np.ndarray) -> np.ndarray:
    """9x9 covariance of ``[x; d + w]``."""
    return np.block([[Sigma_x, Sigma_dx.T], [Sigma_dx, Sigma_d + Sigma_w]])


def propagate_cov(belief: StateBelief, u, model: Optional[GPModel], noise: ProcessNoise,
                  nominal: NominalModel) -> np.ndarray:
    A = dynamics_jacobian(belief.mu_x, u, nominal)
    Sigma_x = belief.Sigma_x
    if _active(model):
        z = np.concatenate([belief.mu_x, u])
        _, var = model.predict(z)
        Sigma_d = np.diag(var)
        Sigma_dx = model.mean_jacobian(z) @ Sigma_x
    else:
        Sigma_d = np.zeros((3, 3))
        Sigma_dx = np.zeros((3, STATE_DIM))
    G = np.hstack([A, BD])
    S = G @ joint_covariance(Sigma_x, Sigma_d, Sigma_dx, noise.cov) @ G.T
    return 0.5 * (S + S.T)


def propagate_horizon(x0, inputs: Sequence, model: Optional[GPModel], noise: ProcessNoise,
                      nominal: NominalModel) -> list[StateBelief]:
    inputs = np.asarray(inputs, dtype=float).reshape(-1, 2)
    if len(inputs) < 1:
        raise ValueError("horizon must contain at least one input")
    beliefs = [StateBelief(np.asarray(x0, dtype=float).copy(), np.zeros((STATE_DIM, STATE_DIM)))]
    for k, u in enumerate(inputs):
        try:
            mu = propagate_mean(beliefs[-1], u, model, nominal)
            Sigma = propagate_cov(beliefs[-1], u, model, noise, nominal)
        except Exception as exc:  # noqa: BLE001 - re-raised with the step index
            raise PropagationError(k, exc) from exc
        beliefs.append(StateBelief(mu, Sigma))
    return beliefs
