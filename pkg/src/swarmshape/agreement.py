"""Finite-time shape-localization agreement and its bound calculators.

Every robot estimates the seed robot's initial position (the shape anchor)
by a consensus flow with a fractional-power nonlinearity, using the pair
relative-position estimates as edge offsets.  Termination is detected in a
distributed way through hop counts once the estimate variation rate drops
below a threshold.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .core import InteractionGraph, laplacian_plus_b


def sig_pow(x: np.ndarray, alpha: float) -> np.ndarray:
    """Componentwise sign(x) * |x|^alpha."""
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.abs(x) ** alpha


@dataclass
class AgreementState:
    """Per-robot agreement estimator state."""

    q0_hat: np.ndarray = field(default_factory=lambda: np.zeros(2))
    z: np.ndarray = field(default_factory=lambda: np.zeros(2))
    history: deque = field(default_factory=deque)  # (t, q0_hat) pairs
    hop: int = 0

    def real_time(self) -> np.ndarray:
        return self.q0_hat + self.z

    def record(self, t: float, span: float) -> None:
        """Append the current estimate, keeping a window covering span."""
        self.history.append((t, self.q0_hat.copy()))
        while len(self.history) > 1 and t - self.history[1][0] >= span:
            self.history.popleft()


def agreement_residual(q0_i: np.ndarray,
                       neighbor_q0: list[np.ndarray],
                       p_hat_ij0: list[np.ndarray],
                       p_hat_i0_seed: np.ndarray | None) -> np.ndarray:
    """Consensus residual: edge disagreements plus the seed anchoring term."""
    res = np.zeros(2)
    for qj, pij in zip(neighbor_q0, p_hat_ij0):
        res += q0_i - qj - pij
    if p_hat_i0_seed is not None:
        res += q0_i - p_hat_i0_seed
    return res


def agreement_step(state: AgreementState,
                   neighbor_q0: list[np.ndarray],
                   p_hat_ij0: list[np.ndarray],
                   p_hat_i0_seed: np.ndarray | None,
                   c1: float, alpha: float, dt: float) -> AgreementState:
    """Forward-Euler step of the finite-time agreement flow.

    The neighbor lists must be the frozen initial neighbor set; the seed
    term is present iff the robot was an initial neighbor of the seed.
    """
    if not (0.0 < alpha < 1.0):
        raise ValueError("alpha must be in (0, 1)")
    if c1 <= 0:
        raise ValueError("c1 must be > 0")
    res = agreement_residual(state.q0_hat, neighbor_q0, p_hat_ij0, p_hat_i0_seed)
    state.q0_hat = state.q0_hat - c1 * sig_pow(res, alpha) * dt
    return state


def update_rate(state: AgreementState, delta_t: float) -> float:
    """Variation rate of the estimate over the trailing window.

    Returns +inf while the history does not yet span delta_t (treated as
    "not converged" by the hop logic).
    """
    if not state.history:
        return math.inf
    t_now, q_now = state.history[-1]
    t_old, q_old = state.history[0]
    if t_now - t_old < delta_t - 1e-12:
        return math.inf
    # walk forward to the sample closest to t_now - delta_t from below
    for t, q in state.history:
        if t <= t_now - delta_t + 1e-12:
            t_old, q_old = t, q
        else:
            break
    return float(np.linalg.norm(q_now - q_old)) / delta_t


def hop_update(state: AgreementState, neighbor_hops: list[int],
               rate: float, delta_0: float) -> int:
    """Hop-count propagation: reset on motion, else min neighbor hop + 1."""
    if rate > delta_0:
        return 0
    if not neighbor_hops:
        return state.hop + 1
    return min(neighbor_hops) + 1


def theorem3_bounds(graph: InteractionGraph, eps: float, gamma: float,
                    alpha: float, dt: float,
                    neighbor_counts: list[int],
                    lambda_rates: list[float],
                    p0_error_norms: list[float],
                    v_l_at_ta: float) -> tuple[float, float, float]:
    """Closed-form (b, t_a, t_l) of the finite-time agreement guarantee.

    b is the radius of the residual set, t_a the time for all pair
    estimators to reach accuracy eps, and t_l the additional consensus
    settling time from the Lyapunov value at t_a.
    """
    if not (0.0 < alpha < 1.0):
        raise ValueError("alpha must be in (0, 1)")
    if not (0.0 < gamma < 1.0):
        raise ValueError("gamma must be in (0, 1)")
    lb = laplacian_plus_b(graph)
    lam_min = float(np.linalg.eigvalsh(lb)[0])
    if lam_min <= 1e-12:
        raise ValueError("L + B is singular; bounds undefined")

    frac = alpha / (1.0 + alpha)
    pow2 = 2.0 ** ((1.0 + 3.0 * alpha) / (2.0 * alpha * (alpha + 1.0)))
    num = frac * pow2 * sum((ni * eps) ** (1.0 + alpha) for ni in neighbor_counts)
    b = math.sqrt(num / ((1.0 - gamma) * frac * lam_min**2))

    t_a = 0.0
    for lam_ij, err0 in zip(lambda_rates, p0_error_norms):
        if err0 <= eps or err0 == 0.0:
            continue  # already inside the accuracy set
        steps = math.log(eps / err0) / math.log(lam_ij)
        t_a = max(t_a, steps * dt)

    t_l = (2.0 * (1.0 + alpha) * v_l_at_ta ** ((1.0 - alpha) / 2.0)) \
        / (lam_min * gamma * (1.0 - alpha))
    return b, t_a, t_l


def lyapunov_value(graph: InteractionGraph, q_err: np.ndarray) -> float:
    """Consensus Lyapunov value 0.5 * q~^T (L + B) q~ per coordinate axis.

    q_err is an (n, 2) array of agreement errors for robots 1..n; the two
    axes decouple and their contributions add.
    """
    lb = laplacian_plus_b(graph)
    q = np.asarray(q_err, dtype=float)
    return 0.5 * float(np.einsum("ik,ij,jk->", q, lb, q))
