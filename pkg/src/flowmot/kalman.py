"""Constant-velocity Kalman filter over [cx, cy, w, h, d] and their velocities."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import Detection

NDIM = 5
STATE_DIM = 2 * NDIM
_MIN_EXTENT = 1e-3

_F = np.eye(STATE_DIM)
_F[:NDIM, NDIM:] = np.eye(NDIM)
_H = np.eye(NDIM, STATE_DIM)


class KalmanNumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class KalmanParams:
    q_pos: float = 1.0
    q_size: float = 1.0
    q_dist: float = 0.25
    q_vel: float = 0.01
    r_pos: float = 1.0
    r_size: float = 1.0
    init_vel_var: float = 1e8
    # use the last raw distance reading as the prediction instead of the filtered one
    raw_last_distance: bool = False

    def __post_init__(self):
        for name in ("q_pos", "q_size", "q_dist", "q_vel", "r_pos", "r_size", "init_vel_var"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")

    def process_noise(self) -> np.ndarray:
        q = [self.q_pos, self.q_pos, self.q_size, self.q_size, self.q_dist]
        return np.diag(q + [self.q_vel] * NDIM)

    def measurement_noise(self, dist_var: float) -> np.ndarray:
        return np.diag([self.r_pos, self.r_pos, self.r_size, self.r_size, dist_var])


@dataclass(frozen=True)
class KalmanState:
    mean: np.ndarray
    covariance: np.ndarray
    last_dist: Optional[float] = None

    def measurement(self) -> np.ndarray:
        return self.mean[:NDIM].copy()


# -- generic linear-Gaussian steps -------------------------------------------

def predict_step(mean: np.ndarray, cov: np.ndarray, F: np.ndarray, Q: np.ndarray):
    mean = F @ mean
    cov = F @ cov @ F.T + Q
    return mean, 0.5 * (cov + cov.T)


def update_step(mean: np.ndarray, cov: np.ndarray, z: np.ndarray, H: np.ndarray, R: np.ndarray):
    """Joseph-form update; raises if the innovation covariance is not PD."""
    S = H @ cov @ H.T + R
    S = 0.5 * (S + S.T)
    try:
        chol = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise KalmanNumericalError("innovation covariance is not positive-definite") from exc
    # K = P H^T S^-1 via two triangular solves
    PHt = cov @ H.T
    K = np.linalg.solve(chol.T, np.linalg.solve(chol, PHt.T)).T
    innovation = z - H @ mean
    mean = mean + K @ innovation
    A = np.eye(len(mean)) - K @ H
    cov = A @ cov @ A.T + K @ R @ K.T
    cov = 0.5 * (cov + cov.T)
    if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(cov)):
        raise KalmanNumericalError("non-finite posterior")
    return mean, cov


def _clamp_extents(mean: np.ndarray) -> np.ndarray:
    mean = mean.copy()
    mean[2:5] = np.maximum(mean[2:5], _MIN_EXTENT)
    return mean


# -- box + distance filter ---------------------------------------------------

def kf_init(det: Detection, params: KalmanParams = KalmanParams()) -> KalmanState:
    mean = np.zeros(STATE_DIM)
    mean[:NDIM] = det.measurement()
    var = np.concatenate([
        np.diag(params.measurement_noise(det.dist_var)),
        np.full(NDIM, params.init_vel_var),
    ])
    return KalmanState(mean, np.diag(var), det.dist_mean)


def kf_predict(state: KalmanState, params: KalmanParams = KalmanParams()):
    """One frame ahead. Returns ``(new_state, predicted_measurement)``."""
    mean, cov = predict_step(state.mean, state.covariance, _F, params.process_noise())
    mean = _clamp_extents(mean)
    new = replace(state, mean=mean, covariance=cov)
    z = mean[:NDIM].copy()
    if params.raw_last_distance and state.last_dist is not None:
        z[4] = state.last_dist
    return new, z


def kf_update(state: KalmanState, z: np.ndarray, z_dist_var: float,
              params: KalmanParams = KalmanParams()) -> KalmanState:
    z = np.asarray(z, dtype=float)
    R = params.measurement_noise(z_dist_var)
    mean, cov = update_step(state.mean, state.covariance, z, _H, R)
    return KalmanState(_clamp_extents(mean), cov, float(z[4]))


def is_symmetric_pd(cov: np.ndarray, tol: float = 1e-9) -> bool:
    if np.max(np.abs(cov - cov.T)) >= tol:
        return False
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return False
    return True
