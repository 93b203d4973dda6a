"""Foundational value types, interaction graph, RNG streams and sensor models.

Positions, displacements and velocities are plain ``numpy`` arrays of shape
``(2,)`` in meters.  Robot ``0`` is the seed robot: its initial position
anchors where the shape will be formed.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np


class Mode(enum.Enum):
    LOCALIZING = "localizing"
    AGREEING = "agreeing"
    FORMING = "forming"
    IDLE = "idle"


SEED_ID = 0


def vec2(x: float, y: float) -> np.ndarray:
    """Build a finite 2-vector; NaN/Inf are rejected."""
    v = np.array([float(x), float(y)])
    if not np.all(np.isfinite(v)):
        raise ValueError(f"non-finite vector components: ({x}, {y})")
    return v


@dataclass
class RobotState:
    """Ground-truth and bookkeeping state of one robot."""

    id: int
    position: np.ndarray
    odometry: np.ndarray = field(default_factory=lambda: np.zeros(2))
    velocity_cmd: np.ndarray = field(default_factory=lambda: np.zeros(2))
    heading: float = 0.0
    mode: Mode = Mode.IDLE
    hop: int = 0

    def __post_init__(self):
        if self.id < 0:
            raise ValueError("robot id must be >= 0")
        self.position = np.asarray(self.position, dtype=float)
        if not np.all(np.isfinite(self.position)):
            raise ValueError("non-finite robot position")


class InteractionGraph:
    """Undirected interaction graph plus per-robot informed flags.

    The informed flag of robot ``i`` is 1 iff robot ``i`` was a neighbor of
    the seed robot at the initial time.
    """

    def __init__(self, n: int, edges: Iterable[tuple[int, int]] = (),
                 informed: Iterable[int] = ()):
        self.n = n  # number of non-seed robots, ids 1..n
        self._adj: set[tuple[int, int]] = set()
        self.informed = {i: 0 for i in range(1, n + 1)}
        for i, j in edges:
            self.add_edge(i, j)
        for i in informed:
            self.informed[i] = 1

    @staticmethod
    def _key(i: int, j: int) -> tuple[int, int]:
        if i == j:
            raise ValueError("self edge")
        return (i, j) if i < j else (j, i)

    def add_edge(self, i: int, j: int) -> None:
        self._adj.add(self._key(i, j))

    def has_edge(self, i: int, j: int) -> bool:
        return self._key(i, j) in self._adj

    @property
    def adjacency(self) -> set[tuple[int, int]]:
        return set(self._adj)

    def neighbors(self, i: int) -> list[int]:
        out = []
        for a, b in self._adj:
            if a == i:
                out.append(b)
            elif b == i:
                out.append(a)
        return sorted(out)


def laplacian_plus_b(graph: InteractionGraph) -> np.ndarray:
    """Graph Laplacian of the non-seed subgraph plus the informed diagonal.

    Symmetric; positive definite when the graph (with seed links) is
    connected and at least one robot is informed.  Singularity is left for
    the caller to detect.
    """
    n = graph.n
    m = np.zeros((n, n))
    for i, j in graph.adjacency:
        if 1 <= i <= n and 1 <= j <= n:
            m[i - 1, j - 1] -= 1.0
            m[j - 1, i - 1] -= 1.0
            m[i - 1, i - 1] += 1.0
            m[j - 1, j - 1] += 1.0
    for i in range(1, n + 1):
        m[i - 1, i - 1] += graph.informed.get(i, 0)
    return m


def split_rng(seed: int, robot_id: int, stream_tag: str) -> np.random.Generator:
    """Independent deterministic RNG stream per (seed, robot, purpose)."""
    tag_entropy = list(stream_tag.encode("utf-8"))
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), int(robot_id)] + tag_entropy)
    return np.random.default_rng(ss)


@dataclass
class NoiseModel:
    """Gaussian sensor noise; identical seed implies identical streams."""

    distance_sigma: float = 0.0
    odometry_sigma: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.distance_sigma < 0 or self.odometry_sigma < 0:
            raise ValueError("noise sigmas must be >= 0")
        self._streams: dict[tuple[int, str], np.random.Generator] = {}

    def stream(self, robot_id: int, tag: str) -> np.random.Generator:
        key = (robot_id, tag)
        if key not in self._streams:
            self._streams[key] = split_rng(self.rng_seed, robot_id, tag)
        return self._streams[key]

    def pair_stream(self, i: int, j: int) -> np.random.Generator:
        lo, hi = (i, j) if i < j else (j, i)
        return self.stream(lo, f"dist-{lo}-{hi}")


def measure_distance(robots: Mapping[int, RobotState], i: int, j: int,
                     noise: NoiseModel) -> float:
    """Noisy inter-robot range; exact when distance_sigma is 0, clamped at 0."""
    if i == j:
        raise ValueError("cannot measure distance of a robot to itself")
    try:
        pi = robots[i].position
        pj = robots[j].position
    except KeyError as exc:
        raise KeyError(f"unknown robot id {exc}") from exc
    d = float(np.linalg.norm(pi - pj))
    if noise.distance_sigma > 0:
        d += noise.distance_sigma * noise.pair_stream(i, j).standard_normal()
    return max(d, 0.0)


def measure_displacement(robot: RobotState, dt_window: float,
                         noise: NoiseModel) -> np.ndarray:
    """Odometry reading over one window; accumulates into robot.odometry.

    Per-axis noise has standard deviation ``odometry_sigma * dt_window``, so
    the accumulated odometry drifts as a random walk.
    """
    if dt_window <= 0:
        raise ValueError("dt_window must be > 0")
    disp = robot.velocity_cmd * dt_window
    if noise.odometry_sigma > 0:
        disp = disp + noise.odometry_sigma * dt_window * \
            noise.stream(robot.id, "odom").standard_normal(2)
    robot.odometry = robot.odometry + disp
    return disp


def saturate(v: np.ndarray, v_max: float) -> np.ndarray:
    """Radially scale a command so that its norm does not exceed v_max."""
    norm = float(np.linalg.norm(v))
    if norm <= v_max or norm == 0.0:
        return v
    return v * (v_max / norm)
