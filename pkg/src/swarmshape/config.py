"""Scenario configuration: a flat key=value file with optional sections.

Lines are ``key = value``; blank lines and '#' comments are ignored.
``[section]`` headers are allowed for readability but ignored (keys are
global and must be unique).  Unknown keys are rejected with the offending
name; invariant violations are reported with the field name and rule.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


def _parse_points(text: str) -> list[tuple[float, float]]:
    pts = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        x, y = chunk.split(",")
        pts.append((float(x), float(y)))
    return pts


def _fmt_points(pts) -> str:
    return ";".join(f"{x!r},{y!r}" for x, y in pts)


def _parse_edges(text: str) -> list[tuple[int, int]]:
    edges = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        a, b = chunk.split("-")
        edges.append((int(a), int(b)))
    return edges


def _fmt_edges(edges) -> str:
    return ",".join(f"{a}-{b}" for a, b in edges)


def _parse_ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


@dataclass
class ScenarioConfig:
    """Full experiment description; defaults follow the 50-robot scenario."""

    scenario: str = "shape"        # shape | formation | docking
    n_robots: int = 50             # total robot count including the seed
    dt: float = 0.01
    seed: int = 0

    # relative localization
    h: int = 20                    # fallback collection stride in steps
    varsigma: int = 60             # fallback batch capacity
    collection_cap: float = 0.1    # max exact collection interval, seconds
    lambda0: float = 0.1           # eigen-ratio readiness threshold

    # agreement
    c1: float = 0.1
    alpha: float = 0.5
    delta_t: float = 1.0           # variation-rate window, seconds
    delta_0: float = 0.01          # variation-rate threshold, m/s

    # radii and limits
    r_sense: float = 4.0
    r_neigh: float = 2.5
    r_avoid: float = 1.8
    r_enh: float = 0.3
    v_max: float = 1.0

    # behavior gains
    w0: float = 6.0
    w_r: float = 4.0
    kappa1: float = 10.0
    kappa2: float = 15.0
    kappa3: float = 25.0
    kappa4: float = 2.0
    kappa: float = 0.02            # P gain for docking/formation scenarios

    # noise
    distance_sigma: float = 0.0
    odometry_sigma: float = 0.0

    # shape
    shape: str = "dart"            # builtin name or file path
    gray_levels: int = 3
    fill_ratio: float = 1.25       # shape-area headroom over critical packing
    anchor_col: int = -1           # -1: centroid of black cells
    anchor_row: int = -1

    # initial placement
    init_kind: str = "disk"        # disk | explicit
    init_radius: float = 10.0
    init_min_spacing: float = 2.0
    init_positions: list = field(default_factory=list)

    # formation / docking targets and fixed topology
    offsets: list = field(default_factory=list)
    edges: list = field(default_factory=list)
    informed: list = field(default_factory=list)

    # PE baseline
    estimator: str = "cl"          # cl | pe
    pe_gain: float = 300.0        # stable while pe_gain * ||u||^2 < 2
    pe_amp: float = 0.08
    pe_omega: float = 1.0

    # stop conditions and outputs
    max_time: float = 150.0
    v_stop: float = 1e-3
    t_hold: float = 2.0
    out_dir: str = "out"
    trace_every: int = 1           # emit trace/metric rows every k-th step

    # diagnostics
    compute_bounds: bool = False
    bound_eps: float = 1e-3
    bound_gamma: float = 0.5

    def validate(self) -> tuple[list[str], list[str]]:
        """Return (errors, warnings); field name plus violated rule."""
        errors: list[str] = []
        warn: list[str] = []
        if self.scenario not in ("shape", "formation", "docking"):
            errors.append("scenario: must be shape, formation or docking")
        if self.n_robots < 2:
            errors.append("n_robots: must be >= 2")
        if self.dt <= 0:
            errors.append("dt: must be > 0")
        if not (0.0 < self.alpha < 1.0):
            errors.append("alpha: 0<alpha<1")
        if self.c1 <= 0:
            errors.append("c1: must be > 0")
        if self.r_neigh >= self.r_sense:
            errors.append("r_neigh: must be < r_sense (neighbor definition)")
        for name in ("h", "varsigma", "gray_levels", "trace_every"):
            if getattr(self, name) < 1:
                errors.append(f"{name}: must be >= 1")
        for name in ("r_sense", "r_neigh", "r_avoid", "r_enh", "v_max",
                     "delta_t", "max_time", "lambda0", "kappa1", "kappa2",
                     "kappa3", "kappa4", "kappa"):
            if getattr(self, name) <= 0:
                errors.append(f"{name}: must be > 0")
        for name in ("distance_sigma", "odometry_sigma", "delta_0",
                     "w0", "w_r", "v_stop", "t_hold"):
            if getattr(self, name) < 0:
                errors.append(f"{name}: must be >= 0")
        if not (0.0 < self.bound_gamma < 1.0):
            errors.append("bound_gamma: 0<gamma<1")
        if self.bound_eps <= 0:
            errors.append("bound_eps: must be > 0")
        if self.estimator not in ("cl", "pe"):
            errors.append("estimator: must be cl or pe")
        if self.init_kind not in ("disk", "explicit"):
            errors.append("init_kind: must be disk or explicit")
        if self.init_kind == "explicit" and len(self.init_positions) != self.n_robots:
            errors.append("init_positions: need one x,y pair per robot")
        if self.r_neigh >= self.r_sense - 2 * self.r_enh:
            warn.append("r_neigh: initial-neighbor retention needs "
                        "r_neigh < r_sense - r_i - r_j")
        return errors, warn


_LIST_FIELDS = {"init_positions": (_parse_points, _fmt_points),
                "offsets": (_parse_points, _fmt_points),
                "edges": (_parse_edges, _fmt_edges),
                "informed": (_parse_ints,
                             lambda xs: ",".join(str(x) for x in xs))}


def parse_config(path) -> ScenarioConfig:
    """Read and validate a config file; raises ConfigError with details."""
    text = Path(path).read_text()
    fields = {f.name: f for f in dataclasses.fields(ScenarioConfig)}
    values: dict = {}
    errors: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected key = value")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in fields:
            errors.append(f"{key}: unknown key")
            continue
        if key in values:
            errors.append(f"{key}: duplicate key")
            continue
        try:
            if key in _LIST_FIELDS:
                values[key] = _LIST_FIELDS[key][0](value)
            else:
                ftype = fields[key].type
                if ftype == "int":
                    values[key] = int(value)
                elif ftype == "float":
                    values[key] = float(value)
                elif ftype == "bool":
                    values[key] = value.lower() in ("1", "true", "yes")
                else:
                    values[key] = value
        except ValueError as exc:
            errors.append(f"{key}: {exc}")
    if errors:
        raise ConfigError("; ".join(errors))
    cfg = ScenarioConfig(**values)
    errors, _ = cfg.validate()
    if errors:
        raise ConfigError("; ".join(errors))
    return cfg


def serialize_config(cfg: ScenarioConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in _LIST_FIELDS:
            text = _LIST_FIELDS[f.name][1](value)
        elif isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"
