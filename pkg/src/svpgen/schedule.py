"""Linear noise schedule and closed-form forward-process coefficients.

The per-step retention factor alpha_t = 1 - beta_t and its running product
alpha_bar_t let training corrupt a clean image to any timestep in one shot:

    x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps

which is the t-fold composition of the single-step recurrence
x_t = sqrt(alpha_t) * x_{t-1} + sqrt(1 - alpha_t) * eps_t. Tables are kept in
float64 so the cumulative product does not underflow at T = 1000.

Timesteps are 1-based throughout: t runs over 1..T and alpha_bar_0 == 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta/alpha/alpha_bar/posterior-variance tables.

    Arrays are indexed 0..T-1 for timesteps 1..T; use the accessors to stay
    in 1-based timestep convention.
    """

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar_prev: np.ndarray
    posterior_var: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def _index(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep {t} out of range 1..{self.T}")
        return t - 1

    def q_sample(self, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
        """Noise x0 to timestep t: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps.

        ``t`` is a scalar or a per-sample array broadcast over the batch axis.
        """
        x0 = np.asarray(x0)
        eps = np.asarray(eps)
        if x0.shape != eps.shape:
            raise ValueError(f"eps shape {eps.shape} does not match x0 shape {x0.shape}")
        idx = self._index(t)
        ab = self.alpha_bar[idx]
        if ab.ndim > 0:
            if ab.shape[0] != x0.shape[0]:
                raise ValueError(f"got {ab.shape[0]} timesteps for batch of {x0.shape[0]}")
            ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps

    def posterior_coeffs(self, t: int) -> tuple[float, float, float]:
        """Coefficients (c_x0, c_xt, var) of the exact posterior q(x_{t-1} | x_t, x0).

        mean = c_x0 * x0 + c_xt * x_t. At t = 1 this collapses to (1, 0, 0):
        the final denoising step reconstructs x0 exactly.
        """
        i = int(self._index(t))
        denom = 1.0 - self.alpha_bar[i]
        c_x0 = np.sqrt(self.alpha_bar_prev[i]) * self.beta[i] / denom
        c_xt = np.sqrt(self.alpha[i]) * (1.0 - self.alpha_bar_prev[i]) / denom
        return float(c_x0), float(c_xt), float(self.posterior_var[i])


def linear_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Build the T-step schedule with beta linearly spaced from start to end."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    return NoiseSchedule(
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        alpha_bar_prev=alpha_bar_prev,
        posterior_var=posterior_var,
    )
