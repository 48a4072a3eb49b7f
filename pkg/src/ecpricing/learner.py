"""Thompson sampling over per-prosumer signature weights.

Each prosumer carries an independent Gaussian belief over its weight vector.
After prices are posted the manager observes the net response ``y`` and
updates the belief with the conjugate Bayesian linear-regression formulas for
the model ``y = P theta + eps``, ``eps ~ N(0, sigma^2 I)``, where the columns
of ``P`` are the signature profiles at the posted prices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

__all__ = [
    "WeightBelief",
    "NoiseModel",
    "PriorConfig",
    "SingularUpdateError",
    "init_prior",
    "sample_weights",
    "update_posterior",
    "batch_posterior",
    "rms_distance",
    "detect_shift",
    "ShiftDetector",
    "reset_prior",
]

PSD_TOL = 1e-10


class SingularUpdateError(ValueError):
    """The innovation covariance is singular (zero noise and rank-deficient profiles)."""


@dataclass
class WeightBelief:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        k = len(self.mean)
        self.covariance = np.asarray(self.covariance, dtype=float).reshape(k, k)
        if not np.allclose(self.covariance, self.covariance.T, rtol=0, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        if k and np.linalg.eigvalsh(self.covariance).min() < -PSD_TOL:
            raise ValueError("covariance must be positive semidefinite")

    @property
    def size(self) -> int:
        return len(self.mean)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))

    def copy(self) -> "WeightBelief":
        return WeightBelief(self.mean.copy(), self.covariance.copy())


@dataclass(frozen=True)
class NoiseModel:
    response_noise_std: float

    def __post_init__(self):
        if not self.response_noise_std >= 0:
            raise ValueError("noise standard deviation must be >= 0")

    def covariance(self, horizon: int) -> np.ndarray:
        return self.response_noise_std**2 * np.eye(horizon)


@dataclass(frozen=True)
class PriorConfig:
    """Independent Gaussian prior; ``std`` is a standard deviation, not a variance."""

    mean: float = 0.5
    std: float = 0.15
    pv_scale: float = 3.0
    pv_indices: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError("prior std must be > 0")
        if not self.pv_scale > 0:
            raise ValueError("pv_scale must be > 0")


def init_prior(catalogue_size: int, config: PriorConfig = PriorConfig()) -> WeightBelief:
    mean = np.full(catalogue_size, config.mean)
    std = np.full(catalogue_size, config.std)
    for k in config.pv_indices:
        mean[k] *= config.pv_scale
        std[k] *= config.pv_scale
    return WeightBelief(mean, np.diag(std**2))


def reset_prior(belief: WeightBelief | None, config: PriorConfig = PriorConfig()) -> WeightBelief:
    """Forget everything learned and return the agnostic prior."""
    size = belief.size if belief is not None else 0
    return init_prior(size, config)


def sample_weights(belief: WeightBelief, rng) -> np.ndarray:
    """One draw from the belief; ``rng`` is a seed or a numpy Generator.

    Uses a symmetric eigendecomposition so that singular (including zero)
    covariances are handled exactly.  Samples are not clipped.
    """
    rng = np.random.default_rng(rng)
    k = belief.size
    z = rng.standard_normal(k)
    if k == 0:
        return np.zeros(0)
    cov = belief.covariance
    w, V = np.linalg.eigh(cov)
    if w.min() < -PSD_TOL:
        w, V = np.linalg.eigh(cov + PSD_TOL * np.eye(k))
        if w.min() < -PSD_TOL:
            raise np.linalg.LinAlgError("covariance is not positive semidefinite")
    w = np.clip(w, 0.0, None)
    if not np.any(w):
        return belief.mean.copy()
    return belief.mean + V @ (np.sqrt(w) * z)


def update_posterior(belief: WeightBelief, profiles, observation, noise: NoiseModel) -> WeightBelief:
    """Conjugate update with the ``T x K`` profile matrix and observed response."""
    P = np.asarray(profiles, dtype=float)
    y = np.asarray(observation, dtype=float)
    T = len(y)
    if P.shape != (T, belief.size):
        raise ValueError(f"profiles must be {(T, belief.size)}, got {P.shape}")
    Sigma, m = belief.covariance, belief.mean
    R = noise.covariance(T)
    PS = P @ Sigma
    S = PS @ P.T + R
    S = 0.5 * (S + S.T)
    try:
        cf = scipy.linalg.cho_factor(S, lower=True)
    except np.linalg.LinAlgError:
        if not np.any(P):
            return belief.copy()
        raise SingularUpdateError(
            "innovation covariance is singular; use a positive noise std or informative profiles"
        ) from None
    G = scipy.linalg.cho_solve(cf, PS)  # S^-1 P Sigma
    mean = m + G.T @ (y - P @ m)
    cov = Sigma - PS.T @ G
    cov = 0.5 * (cov + cov.T)
    if belief.size and np.linalg.eigvalsh(cov).min() < -PSD_TOL:
        # Joseph form: algebraically identical, numerically PSD
        K = G.T
        A = np.eye(belief.size) - K @ P
        cov = A @ Sigma @ A.T + K @ R @ K.T
        cov = 0.5 * (cov + cov.T)
    return WeightBelief(mean, cov)


def batch_posterior(prior: WeightBelief, profiles: Sequence, observations: Sequence, noise: NoiseModel) -> WeightBelief:
    """Closed-form posterior after stacking all observations into one regression."""
    P = np.vstack(profiles)
    y = np.concatenate(observations)
    Sigma = prior.covariance
    S = P @ Sigma @ P.T + noise.covariance(len(y))
    K = np.linalg.solve(S, P @ Sigma).T
    cov = Sigma - K @ P @ Sigma
    return WeightBelief(prior.mean + K @ (y - P @ prior.mean), 0.5 * (cov + cov.T))


def rms_distance(predicted, observed) -> float:
    predicted, observed = np.asarray(predicted, float), np.asarray(observed, float)
    if predicted.shape != observed.shape:
        raise ValueError("profiles must have equal length")
    return float(np.sqrt(np.mean((predicted - observed) ** 2))) if predicted.size else 0.0


def detect_shift(predicted, observed, tolerance: float, window: int = 3) -> bool:
    """True if the RMS distance exceeds ``tolerance`` on each of the last ``window`` days.

    ``predicted``/``observed`` are single profiles or ``days x T`` histories.
    """
    p = np.atleast_2d(np.asarray(predicted, float))
    o = np.atleast_2d(np.asarray(observed, float))
    if p.shape != o.shape:
        raise ValueError("profiles must have equal length")
    if len(p) < window:
        return False
    return all(rms_distance(a, b) > tolerance for a, b in zip(p[-window:], o[-window:]))


@dataclass
class ShiftDetector:
    """Streaming version of :func:`detect_shift` for one prosumer.

    The detector is armed only after ``window`` consecutive days within
    tolerance, so the large prediction errors of early learning (or right
    after a reset) are not mistaken for a change in behaviour.
    """

    tolerance: float
    window: int = 3
    armed: bool = False
    exceed_run: int = 0
    calm_run: int = 0
    history: list = field(default_factory=list)

    def observe(self, predicted, observed) -> bool:
        d = rms_distance(predicted, observed)
        self.history.append(d)
        if d > self.tolerance:
            self.exceed_run += 1
            self.calm_run = 0
        else:
            self.calm_run += 1
            self.exceed_run = 0
            if self.calm_run >= self.window:
                self.armed = True
        if self.armed and self.exceed_run >= self.window:
            self.armed = False
            self.exceed_run = self.calm_run = 0
            return True
        return False
