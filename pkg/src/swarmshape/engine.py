"""Deterministic fixed-step simulation engine.

One ``Simulation`` owns the whole world: ground-truth positions, odometry,
pair estimators, the agreement layer and the behavior controllers.  Every
step runs sense -> estimate -> agree -> control -> saturate -> integrate in
robot-id order, so a run is a pure function of (config, seed).
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field as dc_field
from importlib import resources
from pathlib import Path

import numpy as np

from . import agreement, behavior, relloc
from .config import ScenarioConfig
from .core import InteractionGraph, Mode, laplacian_plus_b, saturate, split_rng
from .relloc import MeasurementBatch, PairSample, RelPosEstimator
from .shapefield import ShapeField, cell_size, load_shape

BUILTIN_SHAPES = {"dart": "dart.txt", "letter_r": "letter_r.txt", "sum": "sum.txt"}


def shape_source(name: str) -> str:
    """Resolve a builtin shape name or file path to grid text."""
    if name in BUILTIN_SHAPES:
        return resources.files("swarmshape.shapes").joinpath(
            BUILTIN_SHAPES[name]).read_text()
    return Path(name).read_text()


@dataclass
class PairTracker:
    """Measurement collection and estimation state of one unordered pair."""

    i: int
    j: int
    stride: int
    start_step: int
    batch: MeasurementBatch
    est: RelPosEstimator
    z_start: np.ndarray          # measured z_i - z_j at registration
    d_prev: float = 0.0
    z_prev: np.ndarray = dc_field(default_factory=lambda: np.zeros(2))
    have_prev: bool = False
    localized: bool = False
    lam_rate: float = float("nan")
    p0_err0: float = float("nan")
    d_hist: list = dc_field(default_factory=list)


@dataclass
class MetricsRow:
    t: float
    coverage: float
    entering: float
    uniformity: float
    mean_loc_error: float
    mean_agree_error: float
    max_speed: float
    min_pair_dist: float


@dataclass
class RunResult:
    summary: dict
    metrics: list
    trace_path: Path | None
    pairs_path: Path | None
    metrics_path: Path | None


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def _endpoint_fit(values: list) -> float:
    """Least-squares polynomial through equally spaced samples, evaluated
    at the last sample.

    Quadratic once enough samples are in: range varies with visible
    curvature during circular excitation, and a straight-line fit turns
    that curvature into a bias coherent with the excitation phase.
    """
    y = np.asarray(values)
    m = len(y)
    x = np.arange(m, dtype=float)
    deg = 2 if m >= 8 else 1
    coef = np.polyfit(x, y, deg)
    return float(np.polyval(coef, x[-1]))


class Simulation:
    """World state plus the full two-phase pipeline for one scenario."""

    def __init__(self, cfg: ScenarioConfig, trace_every: int = 1):
        errors, self.warnings = cfg.validate()
        if errors:
            raise ValueError("invalid config: " + "; ".join(errors))
        self.cfg = cfg
        self.n = cfg.n_robots
        self.dt = cfg.dt
        self.step_index = 0
        self.trace_every = max(1, trace_every)

        self.rng_init = split_rng(cfg.seed, 0, "init")
        self.rng_odom = split_rng(cfg.seed, 0, "odom-engine")
        self.rng_dist = split_rng(cfg.seed, 0, "dist-engine")
        self.rng_enh = [split_rng(cfg.seed, i, "enh") for i in range(self.n)]

        self.field: ShapeField | None = None
        if cfg.scenario == "shape":
            black = load_shape(shape_source(cfg.shape))
            # refine the grid toward one robot per cell: occupancy-gated
            # exploration assumes a cell holds a single robot, so large
            # swarms on coarse grids need subdivided cells (cell count is
            # kept <= n so full coverage stays attainable)
            k = max(1, int(math.sqrt(self.n / black.sum())))
            anchor = None
            if cfg.anchor_col >= 0 and cfg.anchor_row >= 0:
                anchor = (cfg.anchor_col * k + k // 2,
                          cfg.anchor_row * k + k // 2)
            black = np.repeat(np.repeat(black, k, axis=0), k, axis=1)
            # headroom over the critical-packing area keeps a zero-repulsion
            # final packing feasible with single-occupancy cells
            lc = cell_size(int(math.ceil(self.n * cfg.fill_ratio)),
                           int(black.sum()), cfg.r_avoid)
            self.field = ShapeField(black, cfg.gray_levels, lc, anchor)

        self.pos = self._initial_positions()
        self.pos0 = self.pos.copy()
        self.seed_origin = self.pos[0].copy()
        self.z = np.zeros((self.n, 2))        # measured odometry accumulators
        self.vel = np.zeros((self.n, 2))
        self.vel_prev = np.zeros((self.n, 2))
        self.heading = self.rng_init.uniform(0, 2 * math.pi, self.n)

        self.ctrl = [behavior.ControllerState(
            robot_id=i, kappa1=cfg.kappa1, kappa2=cfg.kappa2,
            kappa3=cfg.kappa3, kappa4=cfg.kappa4, enh_radius=cfg.r_enh)
            for i in range(self.n)]
        for i, c in enumerate(self.ctrl):
            c.enh_phase = self.heading[i]

        # pair estimates in the global-start frame; NaN until localized
        self.p0g = np.full((self.n, self.n, 2), np.nan)
        self.loc_mask = np.zeros((self.n, self.n), dtype=bool)
        self.pairs: dict[tuple[int, int], PairTracker] = {}

        self.ever_within_neigh = np.zeros((self.n, self.n), dtype=bool)
        np.fill_diagonal(self.ever_within_neigh, False)
        self.neigh_now = np.zeros((self.n, self.n), dtype=bool)
        self.in_sense = np.zeros((self.n, self.n), dtype=bool)

        self.qhat0 = np.zeros((self.n, 2))
        # anchor estimates are bootstrapped by relaying a neighbor's
        # estimate plus the pair offset, flooding outward from the seed
        self.q_init = np.zeros(self.n, dtype=bool)
        self.q_init[0] = True
        self.hop = np.zeros(self.n, dtype=int)
        self.formation_phase = np.zeros(self.n, dtype=bool)
        self.hist_len = max(1, int(round(cfg.delta_t / cfg.dt)))
        self.q_hist = np.zeros((self.hist_len + 1, self.n, 2))
        self.q_hist_count = 0

        # frozen initial topology for the agreement layer
        d0 = self._true_dist()
        self.init_adj = (d0 <= cfg.r_neigh)
        np.fill_diagonal(self.init_adj, False)
        self.informed = self.init_adj[0].copy()
        self.informed[0] = False

        # boundary-following fallback for robots wedged outside the shape:
        # a robot whose command stays balanced near zero while outside
        # slides tangentially along the gray band until entry succeeds
        self.stuck_time = np.zeros(self.n)
        self.sliding = np.zeros(self.n, dtype=bool)
        self.slide_sign = np.ones(self.n)
        self.share_time = np.zeros(self.n)
        self.press_time = np.zeros(self.n)
        self.migrating = np.zeros(self.n, dtype=bool)
        # per-robot memory of cells last observed occupied
        self.occ_mem = None
        self.allow_migration = False
        if self.field is not None:
            n_cell = len(self.field.black_centers)
            self.occ_mem = np.zeros((self.n, n_cell), dtype=bool)
            # Relocating toward exclusive cells terminates only when the
            # robot surplus fits the shape's sizing headroom; beyond that
            # sharing is structural and reshuffling never settles.
            self.allow_migration = self.n <= n_cell * cfg.fill_ratio

        # shape runs freeze the anchor estimate once the hop counter
        # certifies agreement; target-tracking runs keep refining it
        self.freeze_on_formation = True
        self._static_since: float | None = None
        self.trace_rows: list[str] = []
        self.pair_rows: list[str] = []
        self.metrics_rows: list[MetricsRow] = []

    # ------------------------------------------------------------------
    # setup

    def _initial_positions(self) -> np.ndarray:
        cfg = self.cfg
        if cfg.init_kind == "explicit" or cfg.init_positions:
            pos = np.array(cfg.init_positions, dtype=float)
            if pos.shape != (self.n, 2):
                raise ValueError("init_positions: need one x,y pair per robot")
            return pos
        radius = cfg.init_radius
        for _attempt in range(200):
            pos = self._sample_disk(radius)
            if pos is None:
                radius *= 1.1
                continue
            if self._connected(pos):
                return pos
        raise RuntimeError("could not generate a connected initial layout")

    def _sample_disk(self, radius: float) -> np.ndarray | None:
        """Grow a connected cluster: every robot lands within r_neigh of an
        already placed one while keeping the minimum spacing."""
        spacing = self.cfg.init_min_spacing
        reach = self.cfg.r_neigh
        if spacing >= reach:
            raise ValueError("init_min_spacing must be < r_neigh")
        pts = [np.zeros(2)]  # seed at the center
        tries = 0
        while len(pts) < self.n:
            anchor = pts[self.rng_init.integers(len(pts))]
            r = self.rng_init.uniform(spacing, reach)
            a = self.rng_init.uniform(0, 2 * math.pi)
            cand = anchor + np.array([r * math.cos(a), r * math.sin(a)])
            if np.linalg.norm(cand) <= radius and all(
                    np.linalg.norm(cand - p) >= spacing for p in pts):
                pts.append(cand)
            tries += 1
            if tries > 4000 * self.n:
                return None
        return np.array(pts)

    def _connected(self, pos: np.ndarray) -> bool:
        d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=2)
        adj = d <= self.cfg.r_neigh
        np.fill_diagonal(adj, False)
        seen = np.zeros(self.n, dtype=bool)
        stack = [0]
        seen[0] = True
        while stack:
            i = stack.pop()
            for j in np.nonzero(adj[i])[0]:
                if not seen[j]:
                    seen[j] = True
                    stack.append(int(j))
        return bool(seen.all())

    # ------------------------------------------------------------------
    # sensing

    def _true_dist(self) -> np.ndarray:
        diff = self.pos[:, None, :] - self.pos[None, :, :]
        return np.linalg.norm(diff, axis=2)

    def _measured_dist(self, d_true: np.ndarray) -> np.ndarray:
        sigma = self.cfg.distance_sigma
        if sigma <= 0:
            return d_true
        iu = np.triu_indices(self.n, 1)
        noise = np.zeros((self.n, self.n))
        noise[iu] = self.rng_dist.standard_normal(len(iu[0])) * sigma
        noise += noise.T
        return np.maximum(d_true + noise, 0.0)

    # ------------------------------------------------------------------
    # pair estimation

    def _register_pair(self, i: int, j: int) -> None:
        key = (i, j) if i < j else (j, i)
        if key in self.pairs:
            return
        batch = MeasurementBatch(stride=self.cfg.h, capacity=self.cfg.varsigma)
        est = RelPosEstimator(batch=batch)
        z_start = self.z[key[0]] - self.z[key[1]]
        tracker = PairTracker(i=key[0], j=key[1], stride=self.cfg.h,
                              start_step=self.step_index, batch=batch,
                              est=est, z_start=z_start)
        tracker.p0_err0 = float(np.linalg.norm(self.pos[key[0]] - self.pos[key[1]]))
        self.pairs[key] = tracker

    def _collect(self, tracker: PairTracker, d_meas: np.ndarray) -> None:
        i, j = tracker.i, tracker.j
        z_pair = (self.z[i] - self.z[j]) - tracker.z_start
        d_now = float(d_meas[i, j])
        if self.cfg.distance_sigma > 0 and len(tracker.d_hist) >= 3:
            # range changes nearly linearly within one collection interval
            # (bounded speeds, short window), so a least-squares line
            # through the interval's ranging stream evaluated at the
            # boundary cuts the boundary noise by ~sqrt(window)/2
            d_now = _endpoint_fit(tracker.d_hist)
        if not tracker.have_prev:
            tracker.d_prev = d_now
            tracker.z_prev = z_pair.copy()
            tracker.have_prev = True
            return
        u = z_pair - tracker.z_prev
        y = relloc.regressand(tracker.d_prev, d_now, u, tracker.z_prev)
        sample = PairSample(u=u, y=y, d_start=tracker.d_prev, d_end=d_now,
                            t_index=len(tracker.batch.samples) + 1)
        if not tracker.localized:
            if tracker.batch.full:
                # full but still not rich enough: restart the collection
                tracker.batch.reset()
            tracker.batch.add(sample)
        else:
            # Post-localization: keep enriching the batch to capacity and
            # re-solve at each addition — measurement noise on a sparse
            # just-rich batch can make the first solve arbitrarily poor,
            # and polishing against a frozen batch only contracts back to
            # that same poor fixed point.  Once full, polish with the
            # current sample.
            if not tracker.batch.full and float(u @ u) > 0:
                tracker.batch.add(sample)
                um = tracker.batch.u_matrix()
                tracker.est.p0_hat = np.linalg.solve(
                    tracker.batch.S, um.T @ tracker.batch.y_vector())
                self._publish_pair(tracker)
            elif tracker.batch.ready and float(u @ u) > 0:
                relloc.update(tracker.est, sample)
                self._publish_pair(tracker)
        tracker.d_prev = d_now
        tracker.z_prev = z_pair.copy()

        if not tracker.localized:
            ratio = relloc.eigen_ratio(tracker.batch.S)
            # the ratio alone also passes when both eigenvalues are near
            # zero (negligible excitation); an absolute floor — a few
            # percent of the displacement reachable per interval — keeps
            # the solve conditioned
            lam_floor = (0.02 * self.cfg.v_max * tracker.stride
                         * self.dt) ** 2 * tracker.batch.capacity
            if ratio > self.cfg.lambda0 \
                    and relloc.eig2(tracker.batch.S)[0] > lam_floor:
                self._finalize_pair(tracker)
            self.pair_rows.append(",".join([
                _fmt(self.step_index * self.dt), str(i), str(j),
                _fmt(self._pair_error(tracker)), _fmt(ratio),
                str(tracker.batch.rank())]))

    def _finalize_pair(self, tracker: PairTracker) -> None:
        """Batch is rich enough: jump to the update rule's fixed point.

        The batch-only update contracts toward the solution of
        S p = sum(u y); with the batch frozen we can take that limit in one
        linear solve instead of iterating the gradient thousands of times.
        """
        u = tracker.batch.u_matrix()
        y = tracker.batch.y_vector()
        tracker.est.p0_hat = np.linalg.solve(tracker.batch.S, u.T @ y)
        tracker.localized = True
        tracker.est.converged = True
        tracker.lam_rate = relloc.predicted_rate(
            tracker.batch, self.cfg.v_max, self.dt)
        self._publish_pair(tracker)
        i, j = tracker.i, tracker.j
        self.ctrl[i].localized.add(j)
        self.ctrl[j].localized.add(i)

    def _publish_pair(self, tracker: PairTracker) -> None:
        i, j = tracker.i, tracker.j
        p0_global = tracker.est.p0_hat - tracker.z_start
        self.p0g[i, j] = p0_global
        self.p0g[j, i] = -p0_global
        self.loc_mask[i, j] = True
        self.loc_mask[j, i] = True

    def _pair_error(self, tracker: PairTracker) -> float:
        i, j = tracker.i, tracker.j
        truth = self.pos[i] - self.pos[j]
        if np.all(np.isfinite(self.p0g[i, j])):
            p0_global = self.p0g[i, j]
        else:
            p0_global = tracker.est.p0_hat - tracker.z_start
        est_rt = p0_global + (self.z[i] - self.z[j])
        return float(np.linalg.norm(est_rt - truth))

    # ------------------------------------------------------------------
    # per-step pipeline

    def step(self) -> None:
        cfg = self.cfg
        k = self.step_index
        d_true = self._true_dist()
        d_meas = self._measured_dist(d_true)

        in_sense = d_true <= cfg.r_sense
        np.fill_diagonal(in_sense, False)
        self.in_sense = in_sense
        self.ever_within_neigh |= (d_true <= cfg.r_neigh) \
            & ~np.eye(self.n, dtype=bool)
        self.neigh_now = in_sense & self.ever_within_neigh

        # pair lifecycle + collection at each pair's instants; any pair in
        # ranging distance collects data so estimates are usually ready by
        # the time the robots become interaction neighbors
        new_i, new_j = np.nonzero(in_sense)
        for i, j in zip(new_i, new_j):
            if i < j:
                self._register_pair(int(i), int(j))
        for tracker in self.pairs.values():
            if cfg.distance_sigma > 0:
                # ranging runs at every control step; keep the last
                # interval's raw stream for boundary smoothing
                if in_sense[tracker.i, tracker.j]:
                    tracker.d_hist.append(
                        float(d_meas[tracker.i, tracker.j]))
                    if len(tracker.d_hist) > tracker.stride:
                        tracker.d_hist.pop(0)
                else:
                    tracker.d_hist.clear()
            if (k - tracker.start_step) % tracker.stride == 0:
                if in_sense[tracker.i, tracker.j]:
                    self._collect(tracker, d_meas)
                else:
                    # out of range at a collection instant: restart the
                    # interval so displacements stay bracketed by two ranges
                    tracker.have_prev = False

        self._agreement_layer()
        self._control_layer(d_true, d_meas)

        # integrate and accumulate odometry
        self.pos = self.pos + self.vel * self.dt
        disp = self.vel * self.dt
        if cfg.odometry_sigma > 0:
            disp = disp + self.rng_odom.standard_normal((self.n, 2)) \
                * (cfg.odometry_sigma * self.dt)
        self.z = self.z + disp

        if k % self.trace_every == 0:
            self._emit_trace(k)
            self.metrics_rows.append(self.metrics())
        self.step_index += 1

    def _has_unlocalized(self) -> np.ndarray:
        return (self.neigh_now & ~self.loc_mask).any(axis=1)

    def _init_neighbors_localized(self) -> np.ndarray:
        return ~((self.init_adj & ~self.loc_mask).any(axis=1))

    def _warm_start(self) -> None:
        for i in range(1, self.n):
            if self.q_init[i]:
                continue
            donors = np.nonzero(self.init_adj[i] & self.loc_mask[i]
                                & self.q_init)[0]
            if len(donors):
                j = int(donors[0])
                self.qhat0[i] = self.qhat0[j] + self.p0g[i, j]
                self.q_init[i] = True

    def _agreement_layer(self) -> None:
        cfg = self.cfg
        self._warm_start()
        if self.freeze_on_formation:
            active = ~self.formation_phase
        else:
            active = np.ones(self.n, dtype=bool)
        active[0] = False  # seed estimate is pinned at the origin

        # consensus residual over the frozen initial topology, edge terms
        # gated on pair-estimator availability
        a_eff = self.init_adj & self.loc_mask
        a_eff[:, 0] = False
        a_eff[0, :] = False
        af = a_eff.astype(float)
        deg = af.sum(axis=1)
        res = deg[:, None] * self.qhat0 - af @ self.qhat0
        p0 = np.where(np.isfinite(self.p0g), self.p0g, 0.0)
        res -= np.einsum("ij,ijk->ik", af, p0)
        seed_ok = self.informed & self.loc_mask[:, 0]
        res[seed_ok] += self.qhat0[seed_ok] - self.p0g[seed_ok, 0]
        res[~active] = 0.0

        self.qhat0 = self.qhat0 - cfg.c1 * agreement.sig_pow(res, cfg.alpha) * self.dt

        # variation-rate window and hop propagation
        self.q_hist = np.roll(self.q_hist, -1, axis=0)
        self.q_hist[-1] = self.qhat0
        self.q_hist_count += 1
        have_window = self.q_hist_count > self.hist_len
        if have_window:
            rate = np.linalg.norm(self.qhat0 - self.q_hist[0], axis=1) \
                / (self.hist_len * self.dt)
        else:
            rate = np.full(self.n, np.inf)
        # a robot with nothing localized yet has a trivially flat estimate;
        # treat it as unconverged so hops cannot propagate prematurely
        rate = np.where(self._init_neighbors_localized() & self.q_init,
                        rate, np.inf)
        rate[0] = 0.0

        prev_hop = self.hop.copy()
        new_hop = np.zeros(self.n, dtype=int)
        for i in range(self.n):
            if self.formation_phase[i]:
                new_hop[i] = prev_hop[i]
                continue
            if rate[i] > cfg.delta_0:
                new_hop[i] = 0
                continue
            neigh = np.nonzero(self.init_adj[i])[0]
            if len(neigh) == 0:
                new_hop[i] = prev_hop[i] + 1
            else:
                new_hop[i] = int(prev_hop[neigh].min()) + 1
        self.hop = new_hop
        self.formation_phase |= self.hop >= self.n

    def _qhat_rt(self) -> np.ndarray:
        return self.qhat0 + self.z

    def _control_layer(self, d_true: np.ndarray, d_meas: np.ndarray) -> None:
        cfg = self.cfg
        unloc = self._has_unlocalized()
        qrt = self._qhat_rt()
        self.vel_prev = self.vel
        new_vel = np.zeros((self.n, 2))

        forming = self.formation_phase
        calm = forming & ~unloc
        if forming.any():
            rep, vsum, deg = self._repulsion_all(d_meas)
        else:
            rep = vsum = np.zeros((self.n, 2))
            deg = np.zeros(self.n)
        if self.field is not None and calm.any():
            v_ent = self._cmd_enter_all(qrt, calm)
            v_exp = self._cmd_explore_all(qrt, calm)
        else:
            v_ent = np.zeros((self.n, 2))
            v_exp = np.zeros((self.n, 2))

        for i in range(self.n):
            if i == 0:
                continue  # the seed robot anchors the shape and stays put
            if not forming[i]:
                if unloc[i]:
                    v = self._enhance(i, d_meas)
                else:
                    v = np.zeros(2)
                    self._reset_enh(i)
            else:
                if unloc[i]:
                    base = rep[i] + self._enhance(i, d_meas)
                elif self.migrating[i]:
                    # in transit toward a remembered vacancy: the entering
                    # pull would pin the robot to the nearest dark cell
                    base = v_exp[i] + rep[i]
                else:
                    base = v_ent[i] + v_exp[i] + rep[i]
                    if self.sliding[i]:
                        # slide along the gray band: entering is blocked by
                        # a packed crowd, so skirt it until a gap appears
                        # (tangential only — the radial pull is what the
                        # blocker's repulsion cancels)
                        base = v_exp[i] + rep[i] + self.slide_sign[i] \
                            * np.array([-v_ent[i, 1], v_ent[i, 0]])
                    self._reset_enh(i)
                # the alignment term references the robot's own command, so
                # the command equation v = base + k4*sum(v_j - v) is solved
                # for v; the explicit lagged form is an unstable map when
                # k4 * degree exceeds one
                v = (base + cfg.kappa4 * vsum[i]) / (1.0 + cfg.kappa4 * deg[i])
            new_vel[i] = saturate(v, cfg.v_max)
        self.vel = new_vel
        if self.field is not None:
            self._update_slide_state(qrt, calm)

    def _update_slide_state(self, qrt: np.ndarray, calm: np.ndarray) -> None:
        """Track robots wedged outside the shape and toggle sliding."""
        speed = np.linalg.norm(self.vel, axis=1)
        outside = np.array([self.field.gray_at(q) > 0.0 for q in qrt])
        wedged = calm & outside & (speed < 0.1 * self.cfg.v_max)
        self.stuck_time = np.where(wedged, self.stuck_time + self.dt, 0.0)
        trip = self.stuck_time > 2.0
        # a robot that wedges again while already sliding skirted into a
        # dead end; reverse the slide direction and try the other way
        self.slide_sign = np.where(trip & self.sliding,
                                   -self.slide_sign, self.slide_sign)
        self.sliding |= trip
        self.stuck_time[trip] = 0.0
        self.sliding &= outside

    def _reset_enh(self, i: int) -> None:
        self.ctrl[i].enh_w = None

    def _enhance(self, i: int, d_meas: np.ndarray) -> np.ndarray:
        dists = d_meas[i, self.neigh_now[i]]
        return behavior.cmd_enhance(self.ctrl[i], dists.tolist(),
                                    self.cfg.w0, self.cfg.w_r,
                                    self.rng_enh[i], self.dt)

    EDGE_MARGIN = 0.1  # meters inside the cell edge before entry counts
    DWELL_TIME = 1.0   # seconds a cell contest must persist before yielding

    def _cmd_enter_all(self, qrt: np.ndarray, mask: np.ndarray) -> np.ndarray:
        fld = self.field
        half = fld.l_cell / 2.0
        out = np.zeros((self.n, 2))
        for i in np.nonzero(mask)[0]:
            v = behavior.cmd_enter(qrt[i], fld, self.cfg.kappa1)
            if not v.any() and fld.in_black(qrt[i]):
                # estimated position is barely across the cell edge; the
                # true position may still be outside, so keep pulling to the
                # cell center until clear of the boundary
                row, col = fld.cell_index(qrt[i])
                center = fld._centers(np.array([[row, col]]))[0]
                off = center - qrt[i]
                if half - np.abs(off).max() < self.EDGE_MARGIN:
                    v = self.cfg.kappa1 / fld.l * off / np.linalg.norm(off)
            out[i] = v
        return out

    def _estimated_neighbor_positions(self, qrt: np.ndarray):
        """Shape-frame positions each robot attributes to every localized
        robot in ranging distance: own estimate minus the pair estimate."""
        mask = self.in_sense & self.loc_mask
        p_rt = self.p0g + (self.z[:, None, :] - self.z[None, :, :])
        est = qrt[:, None, :] - p_rt
        return mask, est

    def _cmd_explore_all(self, qrt: np.ndarray, calm: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        fld = self.field
        out = np.zeros((self.n, 2))
        centers = fld.black_centers
        nb = len(centers)
        half = fld.l_cell / 2.0

        def cell_hits(points: np.ndarray) -> np.ndarray:
            """(..., nb) bool: point inside each black cell's square."""
            return np.all((points[..., None, :] >= centers - half)
                          & (points[..., None, :] < centers + half), axis=-1)

        occ_others = np.zeros((self.n, nb), dtype=bool)
        mask, est = self._estimated_neighbor_positions(qrt)
        pi, pj = np.nonzero(mask)
        hits = np.zeros((len(pi), nb), dtype=bool)
        if len(pi):
            hits = cell_hits(est[pi, pj])
            np.logical_or.at(occ_others, pi, hits)
        own_hit = cell_hits(qrt)  # a robot occupies its own cell
        occ = occ_others | own_hit

        # A robot already inside the shape stays in its cell unless the
        # cell is contested; otherwise every nearby robot races toward
        # each transient vacancy and the packing never settles.  A cell is
        # contested when another robot's estimated position shares it, or
        # when a homeless robot (estimate in no black cell) presses within
        # collision range.  Of two robots sharing a cell, the one nearer
        # the cell center keeps it; the loser, and pressed robots, migrate
        # once the contest has persisted for a dwell time (so a robot
        # merely passing through does not evict the incumbent).
        inside = np.array([fld.gray_at(q) == 0.0 for q in qrt])
        pair_dist = np.linalg.norm(est[pi, pj] - qrt[pi], axis=1) \
            if len(pi) else np.zeros(0)
        homeless_pair = ~hits.any(axis=1) if len(pi) else np.zeros(0, bool)
        pressed = np.zeros(self.n, dtype=bool)
        if len(pi):
            np.logical_or.at(pressed, pi,
                             homeless_pair & (pair_dist <= cfg.r_avoid))

        own_cell = np.where(own_hit.any(axis=1), own_hit.argmax(axis=1), -1)
        yields = np.zeros(self.n, dtype=bool)
        if len(pi):
            shared = (own_cell[pi] >= 0) & hits[np.arange(len(pi)),
                                               np.clip(own_cell[pi], 0, None)]
            my_d = np.linalg.norm(qrt - centers[np.clip(own_cell, 0, None)],
                                  axis=1)
            their_d = np.linalg.norm(
                est[pi, pj] - centers[np.clip(own_cell[pi], 0, None)], axis=1)
            # deterministic tie-break so exactly one of the two yields
            loses = shared & ((their_d < my_d[pi])
                              | ((their_d == my_d[pi]) & (pj < pi)))
            np.logical_or.at(yields, pi, loses)
        self.press_time = np.where(inside & pressed,
                                   self.press_time + self.dt, 0.0)
        self.share_time = np.where(inside & yields,
                                   self.share_time + self.dt, 0.0)

        diffs = centers[None, :, :] - qrt[:, None, :]
        dists = np.linalg.norm(diffs, axis=2)

        # Remembered occupancy: cells whose whole square is observable get
        # their state overwritten; farther cells keep the last belief and
        # accumulate any occupant glimpsed beyond the certainty radius.
        certain = dists <= cfg.r_sense - half * math.sqrt(2.0)
        self.occ_mem[certain] = occ_others[certain]
        self.occ_mem |= occ_others

        # Local exploration: outside robots weight every non-occupied
        # black cell in sensing range; inside robots only cells whose
        # whole square is observable (farther squares may hold an unseen
        # occupant, and chasing such phantom vacancies never settles).
        zn = dists / cfg.r_sense
        w = np.where(zn >= 1.0, 0.0,
                     np.where(zn <= 0.0, 1.0, 0.5 * (1.0 + np.cos(np.pi * zn))))
        w[inside[:, None] & ~certain] = 0.0
        w[occ] = 0.0
        w[~calm] = 0.0
        total = w.sum(axis=1)
        ok = total > 0
        out[ok] = cfg.kappa2 * np.einsum("ib,ibk->ik", w[ok], diffs[ok]) \
            / total[ok, None]

        # Migration handles what local exploration cannot: a contested
        # robot with no verified-free cell in reach relocates to a far
        # vacancy.  It persists across gray stretches between shape
        # regions and ends on settling into an uncontested cell of one's
        # own, or when every cell is remembered occupied (surplus robots
        # then share: there can be fewer cells than robots).
        has_cand = (~(self.occ_mem | own_hit)).any(axis=1)
        start = ((self.press_time > self.DWELL_TIME)
                 | (self.share_time > self.DWELL_TIME)) \
            & has_cand & (total == 0) & self.allow_migration
        # Stagger starts: within sensing range at most one robot begins
        # relocating at a time (lowest id wins).  A simultaneous herd of
        # migrants vacates cells en masse, every robot re-remembers those
        # cells as free, and the reshuffle never terminates.
        if len(pi):
            blocked = np.zeros(self.n, dtype=bool)
            np.logical_or.at(
                blocked, pi,
                (self.migrating[pj] | start[pj]) & (pj < pi))
            start &= ~blocked
        self.migrating |= start
        self.migrating &= ~(inside & ~yields & ~pressed)
        self.migrating &= has_cand
        migrant = self.migrating

        # A migrant heads for the nearest black cell it does not remember
        # as occupied, with no range cutoff: approaching reveals the true
        # occupancy, so the pursuit sweeps cell by cell and ends at a true
        # vacancy somewhere in the shape.
        cand_dists = np.where(self.occ_mem | own_hit, np.inf, dists)
        for i in np.nonzero(migrant & calm)[0]:
            c = int(np.argmin(cand_dists[i]))
            if np.isfinite(cand_dists[i, c]) and cand_dists[i, c] > 1e-9:
                out[i] = cfg.kappa2 * diffs[i, c] / cand_dists[i, c]
        return out

    def _repulsion_all(self, d_meas: np.ndarray):
        """(repulsion command, neighbor-velocity sum, neighbor count).

        The alignment part of the interaction command references the
        robot's own emitted velocity, so it is absorbed implicitly when
        combining commands; here we return its ingredients.
        """
        cfg = self.cfg
        mask = self.neigh_now & self.loc_mask
        with np.errstate(divide="ignore"):
            mu = np.where(d_meas > 0, cfg.r_avoid / np.maximum(d_meas, 1e-12) - 1.0,
                          behavior.MU_MAX)
        mu = np.clip(mu, 0.0, behavior.MU_MAX)
        mu = np.where(d_meas <= cfg.r_avoid, mu, 0.0)
        mu = np.where(mask, mu, 0.0)
        p_rt = self.p0g + (self.z[:, None, :] - self.z[None, :, :])
        p_rt = np.where(np.isfinite(p_rt), p_rt, 0.0)
        rep = cfg.kappa3 * np.einsum("ij,ijk->ik", mu, p_rt)
        deg = mask.sum(axis=1)
        vsum = mask @ self.vel_prev
        return rep, vsum, deg

    # ------------------------------------------------------------------
    # metrics and traces

    def metrics(self) -> MetricsRow:
        t = self.step_index * self.dt
        d = self._true_dist()
        np.fill_diagonal(d, np.inf)
        min_pair = float(d.min()) if self.n > 1 else float("inf")
        max_speed = float(np.linalg.norm(self.vel, axis=1).max())

        loc_errors = [self._pair_error(tr) for tr in self.pairs.values()
                      if tr.localized]
        mean_loc = float(np.mean(loc_errors)) if loc_errors else float("nan")
        agree_err = self.agreement_errors()
        mean_agree = float(np.mean(agree_err)) if len(agree_err) else float("nan")

        coverage = entering = 0.0
        uniformity = 0.0
        if self.field is not None:
            rel = self.pos - self.seed_origin
            inside = np.array([self.field.in_black(p) for p in rel])
            entering = float(inside.mean())
            occupied_cells = set()
            for p in rel[inside]:
                occupied_cells.add(self.field.cell_index(p))
            coverage = len(occupied_cells) / self.field.n_cell
            if inside.sum() >= 2:
                pts = self.pos[inside]
                dd = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
                np.fill_diagonal(dd, np.inf)
                uniformity = float(dd.min(axis=1).std())
        return MetricsRow(t=t, coverage=coverage, entering=entering,
                          uniformity=uniformity, mean_loc_error=mean_loc,
                          mean_agree_error=mean_agree, max_speed=max_speed,
                          min_pair_dist=min_pair)

    def agreement_errors(self) -> np.ndarray:
        """Per-robot ||q_hat_i - (p_i - p_0(t_0))|| over non-seed robots."""
        qrt = self._qhat_rt()
        truth = self.pos - self.seed_origin
        return np.linalg.norm(qrt[1:] - truth[1:], axis=1)

    def localization_errors(self) -> dict:
        pairs = {}
        for (i, j), tr in self.pairs.items():
            if tr.localized:
                pairs[(i, j)] = self._pair_error(tr)
        return {"pairs": pairs,
                "agreement": self.agreement_errors().tolist()}

    def _emit_trace(self, k: int) -> None:
        t = k * self.dt
        unloc = self._has_unlocalized()
        for i in range(self.n):
            if unloc[i] and not (i == 0 and not self.formation_phase[i]):
                mode = Mode.LOCALIZING
            elif self.formation_phase[i]:
                mode = Mode.FORMING
            else:
                mode = Mode.AGREEING
            qrt = self.qhat0[i] + self.z[i]
            agree_err = float(np.linalg.norm(
                qrt - (self.pos[i] - self.seed_origin)))
            self.trace_rows.append(",".join([
                _fmt(t), str(i), mode.value,
                _fmt(self.pos[i, 0]), _fmt(self.pos[i, 1]),
                _fmt(self.vel[i, 0]), _fmt(self.vel[i, 1]),
                _fmt(qrt[0]), _fmt(qrt[1]), _fmt(agree_err),
                str(int(self.hop[i]))]))

    # ------------------------------------------------------------------
    # run loop

    def run(self) -> tuple[str, float]:
        """Advance until a stop condition; returns (reason, stop time)."""
        cfg = self.cfg
        max_steps = int(round(cfg.max_time / self.dt))
        while self.step_index < max_steps:
            self.step()
            t = self.step_index * self.dt
            settled = self.formation_phase[1:].all() \
                if self.cfg.scenario == "shape" else True
            if settled and np.all(np.linalg.norm(self.vel, axis=1) < cfg.v_stop):
                if self._static_since is None:
                    self._static_since = t
                elif t - self._static_since >= cfg.t_hold:
                    return "static", t
            else:
                self._static_since = None
        return "max_time", max_steps * self.dt

    def theorem_bounds(self) -> dict | None:
        """Theorem-level (b, t_a, t_l) diagnostics from the initial topology."""
        cfg = self.cfg
        graph = InteractionGraph(self.n - 1)
        for i in range(1, self.n):
            for j in range(i + 1, self.n):
                if self.init_adj[i, j]:
                    graph.add_edge(i, j)
        for i in range(1, self.n):
            if self.informed[i]:
                graph.informed[i] = 1
        lb = laplacian_plus_b(graph)
        if np.linalg.eigvalsh(lb)[0] <= 1e-12:
            return None
        counts = [int(self.init_adj[i].sum()) for i in range(1, self.n)]
        rates, errs = [], []
        for (i, j), tr in self.pairs.items():
            if self.init_adj[i, j] and tr.localized:
                rates.append(tr.lam_rate)
                errs.append(tr.p0_err0)
        if not rates:
            return None
        q_err = self.qhat0[1:] - (self.pos0[1:] - self.pos0[0])
        v_l = agreement.lyapunov_value(graph, q_err)
        b, t_a, t_l = agreement.theorem3_bounds(
            graph, cfg.bound_eps, cfg.bound_gamma, cfg.alpha, self.dt,
            counts, rates, errs, v_l)
        return {"b": b, "t_a": t_a, "t_l": t_l}


# ----------------------------------------------------------------------
# P-controlled scenarios (docking and fixed-topology formation) reuse the
# pair machinery but replace the behavior layer with a position controller.


class TargetTrackingSimulation(Simulation):
    """Docking / formation scenarios: circle until localized, then P-control.

    Targets are offsets relative to the seed's initial position.  The PE
    baseline variant keeps a persistent periodic excitation on the command
    and estimates from the current sample only.
    """

    def __init__(self, cfg: ScenarioConfig, trace_every: int = 1):
        super().__init__(cfg, trace_every)
        if cfg.scenario == "docking":
            self.targets = np.array([(0.0, 0.0)] + (
                cfg.offsets or [(0.5, -0.5)]), dtype=float)
        else:
            self.targets = np.zeros((self.n, 2))
            if len(cfg.offsets) != self.n - 1:
                raise ValueError("offsets: need one x,y pair per non-seed robot")
            self.targets[1:] = np.array(cfg.offsets, dtype=float)
        if cfg.edges:
            self.init_adj[:] = False
            for a, b in cfg.edges:
                self.init_adj[a, b] = True
                self.init_adj[b, a] = True
        else:
            # docking default: single pair 0-1
            self.init_adj[:] = False
            self.init_adj[0, 1] = self.init_adj[1, 0] = True
        self.informed = np.zeros(self.n, dtype=bool)
        for i in (cfg.informed or ([1] if cfg.scenario == "docking" else [])):
            self.informed[i] = True
            self.init_adj[0, i] = self.init_adj[i, 0] = True
        self.pe_phase = np.linspace(0.0, 2 * math.pi, self.n, endpoint=False)
        self.freeze_on_formation = False

    def step(self) -> None:
        cfg = self.cfg
        k = self.step_index
        d_true = self._true_dist()
        d_meas = self._measured_dist(d_true)
        self.neigh_now = self.init_adj.copy()

        for i in range(self.n):
            for j in range(i + 1, self.n):
                if self.init_adj[i, j]:
                    self._register_pair(i, j)
        for tracker in self.pairs.values():
            if cfg.distance_sigma > 0:
                tracker.d_hist.append(float(d_meas[tracker.i, tracker.j]))
                if len(tracker.d_hist) > tracker.stride:
                    tracker.d_hist.pop(0)
            if (k - tracker.start_step) % tracker.stride == 0:
                if cfg.estimator == "pe":
                    self._collect_pe(tracker, d_meas)
                else:
                    self._collect(tracker, d_meas)

        self._agreement_layer()
        self._pcontrol_layer(d_meas)

        self.pos = self.pos + self.vel * self.dt
        disp = self.vel * self.dt
        if cfg.odometry_sigma > 0:
            disp = disp + self.rng_odom.standard_normal((self.n, 2)) \
                * (cfg.odometry_sigma * self.dt)
        self.z = self.z + disp
        if k % self.trace_every == 0:
            self._emit_trace(k)
            self.metrics_rows.append(self.metrics())
        self.step_index += 1

    def _collect_pe(self, tracker: PairTracker, d_meas: np.ndarray) -> None:
        """Persistent-excitation baseline: memoryless gradient steps."""
        i, j = tracker.i, tracker.j
        z_pair = (self.z[i] - self.z[j]) - tracker.z_start
        d_now = float(d_meas[i, j])
        if self.cfg.distance_sigma > 0 and len(tracker.d_hist) >= 3:
            d_now = _endpoint_fit(tracker.d_hist)
        if not tracker.have_prev:
            tracker.d_prev, tracker.z_prev = d_now, z_pair.copy()
            tracker.have_prev = True
            return
        u = z_pair - tracker.z_prev
        y = relloc.regressand(tracker.d_prev, d_now, u, tracker.z_prev)
        tracker.est.p0_hat = relloc.baseline_pe_update(
            tracker.est.p0_hat, u, y, self.cfg.pe_gain)
        tracker.d_prev, tracker.z_prev = d_now, z_pair.copy()
        if not tracker.localized:
            tracker.localized = True  # baseline has no readiness notion
            self.ctrl[i].localized.add(j)
            self.ctrl[j].localized.add(i)
        self._publish_pair(tracker)

    def _own_pairs_ready(self, i: int) -> bool:
        for (a, b), tr in self.pairs.items():
            if i in (a, b):
                if not tr.localized:
                    return False
                # with noisy ranging a just-rich batch still averages too
                # few measurements; keep exciting until it fills
                if self.cfg.distance_sigma > 0 and not tr.batch.full:
                    return False
        return True

    def _own_pairs_localized(self, i: int) -> bool:
        return all(tr.localized for (a, b), tr in self.pairs.items()
                   if i in (a, b))

    def _pcontrol_layer(self, d_meas: np.ndarray) -> None:
        cfg = self.cfg
        qrt = self._qhat_rt()
        self.vel_prev = self.vel
        new_vel = np.zeros((self.n, 2))
        t = self.step_index * self.dt
        for i in range(1, self.n):
            ready = self._own_pairs_ready(i)
            localized = self._own_pairs_localized(i)
            if cfg.estimator == "cl" and not localized:
                v = self._enhance(i, d_meas)
            else:
                if cfg.scenario == "docking":
                    if np.all(np.isfinite(self.p0g[1, 0])):
                        est_rt = self.p0g[1, 0] + (self.z[1] - self.z[0])
                        v = -cfg.kappa * (est_rt - self.targets[1])
                    else:
                        v = np.zeros(2)
                else:
                    v = -cfg.kappa * (qrt[i] - self.targets[i])
                if cfg.estimator == "pe":
                    v = v + cfg.pe_amp * np.array([
                        math.cos(cfg.pe_omega * t + self.pe_phase[i]),
                        math.sin(cfg.pe_omega * t + self.pe_phase[i])])
                    self._reset_enh(i)
                elif not ready:
                    # noisy ranging, batch still filling: approach the
                    # target while the excitation keeps enriching it, so
                    # later samples come from shorter (less noisy) ranges
                    # and no settling transient is left when it fills
                    v = v + self._enhance(i, d_meas)
                else:
                    self._reset_enh(i)
            new_vel[i] = saturate(v, cfg.v_max)
        self.vel = new_vel

    def tracking_errors(self) -> np.ndarray:
        """||p_i - p_0(t0) - p_i*|| per non-seed robot."""
        rel = self.pos - self.seed_origin
        return np.linalg.norm(rel[1:] - self.targets[1:], axis=1)


def make_simulation(cfg: ScenarioConfig, trace_every: int = 1) -> Simulation:
    if cfg.scenario in ("docking", "formation"):
        return TargetTrackingSimulation(cfg, trace_every)
    return Simulation(cfg, trace_every)


TRACE_HEADER = "t,id,mode,px,py,vx,vy,qx_hat,qy_hat,agree_err,hop"
PAIR_HEADER = "t,i,j,est_err,eigen_ratio,rank"
METRICS_HEADER = ("t,coverage,entering,uniformity,mean_loc_error,"
                  "mean_agree_error,max_speed,min_pair_dist")


def run_scenario(cfg: ScenarioConfig, out_dir=None,
                 trace_every: int | None = None) -> RunResult:
    """Run one scenario to completion and write trace/metrics/summary files."""
    t_wall = time.perf_counter()
    sim = make_simulation(cfg, trace_every or cfg.trace_every)
    reason, t_stop = sim.run()
    wall = time.perf_counter() - t_wall

    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trace_path = out / "trace.csv"
    pairs_path = out / "pairs.csv"
    metrics_path = out / "metrics.csv"
    trace_path.write_text(TRACE_HEADER + "\n" + "\n".join(sim.trace_rows) + "\n")
    pairs_path.write_text(PAIR_HEADER + "\n" + "\n".join(sim.pair_rows) + "\n")
    metrics_path.write_text(METRICS_HEADER + "\n" + "\n".join(
        ",".join(_fmt(v) for v in (m.t, m.coverage, m.entering, m.uniformity,
                                   m.mean_loc_error, m.mean_agree_error,
                                   m.max_speed, m.min_pair_dist))
        for m in sim.metrics_rows) + "\n")

    final = sim.metrics_rows[-1] if sim.metrics_rows else sim.metrics()
    summary = {
        "scenario": cfg.scenario,
        "n_robots": cfg.n_robots,
        "seed": cfg.seed,
        "stop_reason": reason,
        "stop_time": t_stop,
        "wall_time": wall,
        "final_metrics": {
            "coverage": final.coverage, "entering": final.entering,
            "uniformity": final.uniformity,
            "mean_loc_error": final.mean_loc_error,
            "mean_agree_error": final.mean_agree_error,
            "max_speed": final.max_speed,
            "min_pair_dist": final.min_pair_dist,
        },
        "warnings": sim.warnings,
    }
    if isinstance(sim, TargetTrackingSimulation):
        summary["tracking_errors"] = sim.tracking_errors().tolist()
    if cfg.compute_bounds:
        summary["theorem3_bounds"] = sim.theorem_bounds()
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return RunResult(summary=summary, metrics=sim.metrics_rows,
                     trace_path=trace_path, pairs_path=pairs_path,
                     metrics_path=metrics_path)
