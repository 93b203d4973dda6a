"""Per-robot behavior controller: neighbor maintenance and the four commands.

During the agreement phase a robot either circles to enrich pair
measurements or stands still; during formation it combines shape-entering,
shape-exploring and neighbor-interaction commands, falling back to circling
plus interaction whenever an unlocalized neighbor appears.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .core import saturate
from .shapefield import ShapeField

MU_MAX = 1e3  # repulsion cap near zero range


@dataclass
class ControllerState:
    """Behavior-control bookkeeping for one robot."""

    robot_id: int
    kappa1: float
    kappa2: float
    kappa3: float
    kappa4: float
    enh_radius: float
    localized: set = field(default_factory=set)   # RL: localized neighbor ids
    seen_within_neigh: set = field(default_factory=set)  # past r_neigh contacts
    enh_phase: float = 0.0
    enh_w: float | None = None  # drawn once per enhancement activation


def neighbor_set(distances: dict[int, float], state: ControllerState,
                 r_sense: float, r_neigh: float) -> set[int]:
    """Current neighbors: within sensing range now, within r_neigh ever.

    distances maps candidate ids to current ranges; ids seen within r_neigh
    are remembered in the controller state.
    """
    if r_neigh >= r_sense:
        raise ValueError("r_neigh must be < r_sense")
    for j, d in distances.items():
        if d <= r_neigh:
            state.seen_within_neigh.add(j)
    return {j for j, d in distances.items()
            if d <= r_sense and j in state.seen_within_neigh}


def cmd_enter(q_hat: np.ndarray, field_: ShapeField, kappa1: float) -> np.ndarray:
    """Descend the gray field: toward the nearest strictly darker cell,
    scaled by the gray level at the robot's position; zero inside black."""
    found = field_.nearest_darker_cell(q_hat)
    if found is None:
        return np.zeros(2)
    target, xi = found
    direction = target - q_hat
    norm = float(np.linalg.norm(direction))
    if norm == 0.0:
        return np.zeros(2)
    return kappa1 * xi * direction / norm


def explore_weight(z: float) -> float:
    """Cosine window: 1 below 0, smooth fall to 0 at 1."""
    if z <= 0.0:
        return 1.0
    if z >= 1.0:
        return 0.0
    return 0.5 * (1.0 + math.cos(math.pi * z))


def cmd_explore(q_hat: np.ndarray, cell_offsets: np.ndarray, kappa2: float,
                r_sense: float) -> np.ndarray:
    """Mean-shift pull toward unoccupied black cells in sensing range."""
    cells = np.asarray(cell_offsets, dtype=float).reshape(-1, 2)
    if len(cells) == 0:
        return np.zeros(2)
    diffs = cells - q_hat
    dists = np.linalg.norm(diffs, axis=1)
    weights = np.array([explore_weight(d / r_sense) for d in dists])
    total = weights.sum()
    if total <= 0.0:
        return np.zeros(2)
    return kappa2 * (weights @ diffs) / total


def repulsion_gain(d: float, r_avoid: float, mu_max: float = MU_MAX) -> float:
    """r_avoid/d - 1 inside the avoidance radius, capped near zero range."""
    if d > r_avoid:
        return 0.0
    if d <= r_avoid / (mu_max + 1.0):
        return mu_max
    return r_avoid / d - 1.0


def cmd_interact(p_hat_ij: Iterable[np.ndarray], d_ij: Iterable[float],
                 v_i: np.ndarray, v_j: Iterable[np.ndarray],
                 kappa3: float, kappa4: float, r_avoid: float) -> np.ndarray:
    """Repulsion away from close localized neighbors plus velocity alignment."""
    cmd = np.zeros(2)
    for p_hat, d in zip(p_hat_ij, d_ij):
        cmd += kappa3 * repulsion_gain(d, r_avoid) * np.asarray(p_hat, dtype=float)
    for vj in v_j:
        cmd += kappa4 * (np.asarray(vj, dtype=float) - v_i)
    return cmd


def cmd_enhance(state: ControllerState, neighbor_distances: Iterable[float],
                w0: float, w_r: float, rng: np.random.Generator,
                dt: float) -> np.ndarray:
    """Circular localization-enhancing motion.

    The angular rate is drawn once per activation (random part plus a
    deterministic 1/id part); the radius shrinks to the nearest measured
    neighbor range.  The phase advances so the integrated path is a circle.
    """
    dists = list(neighbor_distances)
    radius = state.enh_radius
    if dists:
        radius = min(radius, min(dists))
    if state.enh_w is None:
        state.enh_w = w_r * rng.uniform(0.0, 1.0) + w0 / max(state.robot_id, 1)
    w = state.enh_w
    v = radius * w * np.array([math.cos(state.enh_phase), math.sin(state.enh_phase)])
    state.enh_phase += w * dt
    return v


def control_step(phase: str, has_unlocalized: bool, v_enh: np.ndarray,
                 v_ent: np.ndarray, v_exp: np.ndarray, v_int: np.ndarray,
                 v_max: float) -> np.ndarray:
    """Combine the behavior commands for the current phase and saturate."""
    if phase == "agreement":
        v = v_enh if has_unlocalized else np.zeros(2)
    elif phase == "formation":
        if has_unlocalized:
            v = v_int + v_enh
        else:
            v = v_ent + v_exp + v_int
    else:
        raise ValueError(f"unknown phase {phase!r}")
    return saturate(v, v_max)
