"""Per-pair concurrent-learning relative-position estimator.

A pair of robots records relative displacement/distance samples; the sum of
outer products of the recorded displacements (the information matrix ``S``)
gauges data richness.  Once ``S`` has full rank the initial relative
position can be recovered by mixing gradient corrections from the stored
batch with the correction from the current sample, without any persistent
excitation of the trajectory.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

_RANK_TOL = 1e-12


class EstimatorNotReady(Exception):
    """Raised when the recorded batch is rank deficient."""


@dataclass
class PairSample:
    """One recorded collection-interval sample of a robot pair."""

    u: np.ndarray          # relative displacement over the interval
    y: float               # regressand, m^2
    d_start: float
    d_end: float
    t_index: int


@dataclass
class MeasurementBatch:
    """Ordered store of pair samples with an incrementally maintained S."""

    stride: int            # collection interval in simulation steps
    capacity: int
    samples: list[PairSample] = field(default_factory=list)
    S: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))

    @property
    def full(self) -> bool:
        return len(self.samples) >= self.capacity

    def add(self, sample: PairSample) -> bool:
        """Store a sample unless the batch is frozen; returns acceptance."""
        if self.full:
            return False
        self.samples.append(sample)
        self.S = self.S + np.outer(sample.u, sample.u)
        return True

    def reset(self) -> None:
        """Drop all samples, e.g. when a full batch never became rich."""
        self.samples.clear()
        self.S = np.zeros((2, 2))

    def recompute_s(self) -> np.ndarray:
        """S rebuilt from scratch; equals the incremental S up to round-off."""
        s = np.zeros((2, 2))
        for sample in self.samples:
            s += np.outer(sample.u, sample.u)
        return s

    def rank(self) -> int:
        lmin, lmax = eig2(self.S)
        if lmax <= _RANK_TOL:
            return 0
        return 2 if lmin > _RANK_TOL * max(1.0, lmax) else 1

    @property
    def ready(self) -> bool:
        return self.rank() == 2

    def u_matrix(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, 2))
        return np.array([s.u for s in self.samples])

    def y_vector(self) -> np.ndarray:
        return np.array([s.y for s in self.samples])


@dataclass
class RelPosEstimator:
    """Estimate of the initial relative position of one robot pair."""

    batch: MeasurementBatch
    p0_hat: np.ndarray = field(default_factory=lambda: np.zeros(2))
    z_rel: np.ndarray = field(default_factory=lambda: np.zeros(2))
    converged: bool = False

    def real_time(self) -> np.ndarray:
        """Current relative position: initial estimate plus displacement."""
        return self.p0_hat + self.z_rel


def regressand(d_start: float, d_end: float, u: np.ndarray, z: np.ndarray) -> float:
    """Regressand built from two ranges bracketing one displacement.

    By the cosine theorem this equals u . p(t0) on noiseless data, where z
    is the cumulative relative displacement at the interval start.
    """
    if d_start < 0 or d_end < 0:
        raise ValueError("distances must be >= 0")
    u = np.asarray(u, dtype=float)
    return 0.5 * (d_end**2 - d_start**2 - float(u @ u)) - float(u @ z)


def eig2(s: np.ndarray) -> tuple[float, float]:
    """Closed-form (lambda_min, lambda_max) of a symmetric 2x2 matrix."""
    a1, a2, a3 = s[0, 0], s[0, 1], s[1, 1]
    disc = math.sqrt((a1 - a3) ** 2 + 4.0 * a2 * a2)
    return 0.5 * (a1 + a3 - disc), 0.5 * (a1 + a3 + disc)


def eigen_ratio(s: np.ndarray) -> float:
    """lambda_min / lambda_max of a PSD 2x2 matrix; 0 for the zero matrix."""
    lmin, lmax = eig2(s)
    if lmax <= _RANK_TOL:
        return 0.0
    return max(lmin, 0.0) / lmax


def learning_rate(batch: MeasurementBatch, u_now: np.ndarray) -> float:
    """Step size guaranteeing per-step contraction of the estimation error."""
    lmin, lmax = eig2(batch.S)
    if not batch.ready:
        raise EstimatorNotReady("information matrix is rank deficient")
    u_now = np.asarray(u_now, dtype=float)
    lmax_u = float(u_now @ u_now)  # largest eigenvalue of u u^T
    return lmin / (lmax_u + lmax) ** 2


def update(est: RelPosEstimator, current: PairSample) -> RelPosEstimator:
    """One estimator step using the stored batch plus the current sample."""
    eta = learning_rate(est.batch, current.u)
    u_hist = est.batch.u_matrix()
    eps_hist = u_hist @ est.p0_hat - est.batch.y_vector()
    eps_now = float(current.u @ est.p0_hat) - current.y
    est.p0_hat = est.p0_hat - eta * (u_hist.T @ eps_hist) - eta * current.u * eps_now
    return est


def predicted_rate(batch: MeasurementBatch, v_max: float, dt: float) -> float:
    """Guaranteed per-step contraction factor of the estimation error."""
    lmin, lmax = eig2(batch.S)
    if not batch.ready:
        raise EstimatorNotReady("information matrix is rank deficient")
    return math.sqrt(1.0 - lmin**2 / (2.0 * v_max * dt + lmax) ** 2)


def enhancement_velocity(robot_id: int, t: float, r: float) -> np.ndarray:
    """Circular-motion velocity with angular rate 1/id (verification form)."""
    if robot_id < 1:
        raise ValueError("robot_id must be >= 1")
    w = 1.0 / robot_id
    return np.array([r * math.cos(w * t), r * math.sin(w * t)])


def displacement_on_circle(robot_id: int, r: float, t0: float, t1: float) -> np.ndarray:
    """Exact integral of enhancement_velocity over [t0, t1]."""
    w = 1.0 / robot_id
    return np.array([
        r / w * (math.sin(w * t1) - math.sin(w * t0)),
        -r / w * (math.cos(w * t1) - math.cos(w * t0)),
    ])


@dataclass(frozen=True)
class CollectionSchedule:
    h: int                 # steps between collections
    capacity: int          # number of samples to record
    exact: bool            # True when h*dt divides 2*pi exactly


def schedule_collection(i: int, j: int, dt: float, *, interval_cap: float = 0.1,
                        fallback_h: int = 20,
                        fallback_capacity: int = 60) -> CollectionSchedule:
    """Pick the collection stride and batch size for a robot pair.

    Prefers the largest stride h such that h*dt divides 2*pi (tolerance
    1e-9) with h*dt below the cap, which makes the circular-motion batches
    perfectly conditioned; otherwise falls back to the configured stride
    with the inexactness flagged.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    best = 0
    h = 1
    while h * dt <= interval_cap + 1e-15:
        ratio = 2.0 * math.pi / (h * dt)
        if abs(ratio - round(ratio)) < 1e-9:
            best = h
        h += 1
    if best == 0:
        return CollectionSchedule(fallback_h, fallback_capacity, exact=False)
    sigma0 = round(2.0 * math.pi / (best * dt))
    return CollectionSchedule(best, max(i, 1) * max(j, 1) * sigma0, exact=True)


def baseline_pe_update(p0_hat: np.ndarray, u_now: np.ndarray, y_now: float,
                       gain: float) -> np.ndarray:
    """Memoryless gradient step used as the persistent-excitation baseline."""
    u_now = np.asarray(u_now, dtype=float)
    return p0_hat - gain * u_now * (float(u_now @ p0_hat) - y_now)


def dump_batch(batch: MeasurementBatch, path) -> None:
    """Debug CSV dump: t_index,u_x,u_y,y,d_start,d_end."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t_index", "u_x", "u_y", "y", "d_start", "d_end"])
        for s in batch.samples:
            writer.writerow([s.t_index, repr(float(s.u[0])), repr(float(s.u[1])),
                             repr(float(s.y)), repr(float(s.d_start)),
                             repr(float(s.d_end))])
