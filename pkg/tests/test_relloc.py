"""Pair relative-position estimator: regressand, batches, convergence."""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from swarmshape import relloc
from swarmshape.relloc import (CollectionSchedule, EstimatorNotReady,
                               MeasurementBatch, PairSample, RelPosEstimator)

coord = st.floats(min_value=-50.0, max_value=50.0, allow_nan=False)


def _pair_walk(rng, steps, speed=1.0, dt=0.1):
    """Ground-truth random walk of a robot pair; returns (p_rel(t), z(t)).

    z is the cumulative relative displacement since t0, so p_rel = p0 + z.
    """
    p0 = rng.uniform(-5, 5, 2)
    z = np.zeros((steps + 1, 2))
    for k in range(steps):
        step = rng.uniform(-1, 1, 2)
        n = np.linalg.norm(step)
        if n > 0:
            step *= speed * dt * rng.uniform(0, 1) / n
        z[k + 1] = z[k] + step
    return p0, z


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_regressand_recovers_projection_noiselessly(seed):
    """y computed from two ranges equals u . p0 exactly without noise."""
    rng = np.random.default_rng(seed)
    p0, z = _pair_walk(rng, 12)
    for k in range(12):
        u = z[k + 1] - z[k]
        d0 = np.linalg.norm(p0 + z[k])
        d1 = np.linalg.norm(p0 + z[k + 1])
        y = relloc.regressand(d0, d1, u, z[k])
        assert y == pytest.approx(float(u @ p0), abs=1e-9)


def test_regressand_rejects_negative_distance():
    with pytest.raises(ValueError):
        relloc.regressand(-1.0, 1.0, np.zeros(2), np.zeros(2))


@given(st.lists(st.tuples(coord, coord), min_size=1, max_size=20))
def test_batch_information_matrix_identity(us):
    """Incremental S equals the sum of outer products to machine precision."""
    batch = MeasurementBatch(stride=5, capacity=50)
    for k, (x, y) in enumerate(us):
        batch.add(PairSample(u=np.array([x, y]), y=0.0, d_start=1.0,
                             d_end=1.0, t_index=k))
    oracle = sum((np.outer(np.array(u), np.array(u)) for u in us),
                 np.zeros((2, 2)))
    assert np.allclose(batch.S, oracle, atol=1e-9)
    assert np.allclose(batch.recompute_s(), batch.S, atol=1e-12)


def test_batch_capacity_freeze_and_reset():
    batch = MeasurementBatch(stride=1, capacity=2)
    s = PairSample(u=np.ones(2), y=0.0, d_start=1, d_end=1, t_index=0)
    assert batch.add(s) and batch.add(s)
    assert batch.full and not batch.add(s)
    assert len(batch.samples) == 2
    batch.reset()
    assert len(batch.samples) == 0 and not batch.S.any()


def test_rank_and_eigen_ratio():
    batch = MeasurementBatch(stride=1, capacity=10)
    assert batch.rank() == 0
    batch.add(PairSample(u=np.array([1.0, 0.0]), y=0, d_start=1, d_end=1,
                         t_index=0))
    assert batch.rank() == 1 and not batch.ready
    batch.add(PairSample(u=np.array([0.0, 2.0]), y=0, d_start=1, d_end=1,
                         t_index=1))
    assert batch.rank() == 2 and batch.ready
    assert relloc.eigen_ratio(batch.S) == pytest.approx(0.25)


@given(st.tuples(coord, coord, coord))
def test_eig2_matches_numpy(abc):
    a, b, c = abc
    s = np.array([[a, b], [b, c]])
    lo, hi = relloc.eig2(s)
    ref = np.linalg.eigvalsh(s)
    assert lo == pytest.approx(ref[0], abs=1e-6)
    assert hi == pytest.approx(ref[1], abs=1e-6)


def test_learning_rate_requires_rank_two():
    batch = MeasurementBatch(stride=1, capacity=10)
    batch.add(PairSample(u=np.array([1.0, 0.0]), y=0, d_start=1, d_end=1,
                         t_index=0))
    with pytest.raises(EstimatorNotReady):
        relloc.learning_rate(batch, np.zeros(2))
    with pytest.raises(EstimatorNotReady):
        relloc.predicted_rate(batch, 1.0, 0.01)


def _rich_batch(rng, p0, n=12):
    batch = MeasurementBatch(stride=1, capacity=n)
    for k in range(n):
        u = rng.uniform(-0.02, 0.02, 2)
        batch.add(PairSample(u=u, y=float(u @ p0), d_start=1, d_end=1,
                             t_index=k))
    return batch


def test_update_contracts_at_predicted_rate():
    """Error shrinks at least as fast as the guaranteed per-step factor."""
    rng = np.random.default_rng(3)
    p0 = np.array([2.0, -1.0])
    batch = _rich_batch(rng, p0)
    est = RelPosEstimator(batch=batch)
    lam = relloc.predicted_rate(batch, v_max=1.0, dt=0.01)
    assert 0.0 < lam < 1.0
    err = np.linalg.norm(est.p0_hat - p0)
    for k in range(200):
        u_now = rng.uniform(-0.02, 0.02, 2)
        relloc.update(est, PairSample(u=u_now, y=float(u_now @ p0),
                                      d_start=1, d_end=1, t_index=k))
        new_err = np.linalg.norm(est.p0_hat - p0)
        assert new_err <= lam * err + 1e-12
        err = new_err
    assert err < 1e-3 * np.linalg.norm(p0)


def test_batch_fixed_point_is_least_squares_solution():
    """The update's stationary point equals the lstsq oracle solve(S, U^T y)."""
    rng = np.random.default_rng(11)
    p0 = np.array([-3.0, 0.5])
    batch = _rich_batch(rng, p0, n=30)
    u = batch.u_matrix()
    y = batch.y_vector()
    oracle, *_ = np.linalg.lstsq(u, y, rcond=None)
    direct = np.linalg.solve(batch.S, u.T @ y)
    assert np.allclose(direct, oracle, atol=1e-9)
    assert np.allclose(direct, p0, atol=1e-9)


def test_one_step_exactness_orthonormal_batch():
    """S = I with unit learning rate recovers p0 in a single update.

    Two orthonormal stored samples and a zero current displacement give
    eta = lambda_min / (0 + lambda_max)^2 = 1, and the correction becomes
    the exact least-squares residual step.
    """
    p0 = np.array([0.7, -1.9])
    batch = MeasurementBatch(stride=1, capacity=2)
    for k, u in enumerate((np.array([1.0, 0.0]), np.array([0.0, 1.0]))):
        batch.add(PairSample(u=u, y=float(u @ p0), d_start=1, d_end=1,
                             t_index=k))
    est = RelPosEstimator(batch=batch)
    u_now = np.zeros(2)
    assert relloc.learning_rate(batch, u_now) == pytest.approx(1.0)
    relloc.update(est, PairSample(u=u_now, y=0.0, d_start=1, d_end=1,
                                  t_index=2))
    oracle, *_ = np.linalg.lstsq(batch.u_matrix(), batch.y_vector(), rcond=None)
    assert np.allclose(est.p0_hat, oracle, atol=1e-12)
    assert np.allclose(est.p0_hat, p0, atol=1e-12)


def test_circle_displacement_matches_quadrature():
    from scipy.integrate import quad
    for rid in (1, 2, 5):
        for (t0, t1) in ((0.0, 0.3), (1.0, 2.5)):
            got = relloc.displacement_on_circle(rid, 0.3, t0, t1)
            ref = np.array([
                quad(lambda t: relloc.enhancement_velocity(rid, t, 0.3)[0],
                     t0, t1)[0],
                quad(lambda t: relloc.enhancement_velocity(rid, t, 0.3)[1],
                     t0, t1)[0]])
            assert np.allclose(got, ref, atol=1e-9)


def test_exact_circle_batch_is_perfectly_conditioned():
    """Samples spread evenly over full turns give eigen ratio exactly 1."""
    dt = math.pi / 100  # stride * dt can then divide the full turn exactly
    sched = relloc.schedule_collection(1, 2, dt=dt)
    assert sched.exact
    batch = MeasurementBatch(stride=sched.h, capacity=sched.capacity)
    for k in range(sched.capacity):
        t0, t1 = k * sched.h * dt, (k + 1) * sched.h * dt
        u = relloc.displacement_on_circle(1, 0.3, t0, t1) \
            - relloc.displacement_on_circle(2, 0.3, t0, t1)
        batch.add(PairSample(u=u, y=0.0, d_start=1, d_end=1, t_index=k))
    assert relloc.eigen_ratio(batch.S) >= 1.0 - 1e-6


def test_schedule_collection_fallback():
    sched = relloc.schedule_collection(1, 1, dt=0.013, fallback_h=20,
                                       fallback_capacity=60)
    assert sched == CollectionSchedule(20, 60, exact=False)
    with pytest.raises(ValueError):
        relloc.schedule_collection(1, 1, dt=0.0)


def test_baseline_pe_update_converges_under_excitation():
    """Rotating unit-ish displacements drive the memoryless estimator in."""
    p0 = np.array([1.0, 2.0])
    p_hat = np.zeros(2)
    for k in range(4000):
        a = 0.05 * k
        u = 0.02 * np.array([math.cos(a), math.sin(a)])
        p_hat = relloc.baseline_pe_update(p_hat, u, float(u @ p0), gain=300.0)
    assert np.linalg.norm(p_hat - p0) < 1e-3


def test_dump_batch_round_trips(tmp_path):
    import csv
    rng = np.random.default_rng(0)
    batch = _rich_batch(rng, np.array([1.0, 1.0]), n=5)
    path = tmp_path / "batch.csv"
    relloc.dump_batch(batch, path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 5
    for row, s in zip(rows, batch.samples):
        assert float(row["u_x"]) == s.u[0]
        assert float(row["y"]) == s.y
