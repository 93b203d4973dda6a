"""Gridded gray-level representation of the desired formation shape.

The shape comes from a binary image (ASCII '0'/'1' grid or PGM P2).  Black
cells are the shape; an l-level gray band is grown around it so robots are
guided in smoothly.  All geometric queries are answered in meters relative
to the seed robot's initial position, which is anchored to a configurable
cell (default: the rounded centroid of the black cells).
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np


class ShapeParseError(ValueError):
    pass


def load_shape(source) -> np.ndarray:
    """Load a binary grid; True marks black (shape) cells.

    Accepts a path to an ASCII grid of '0'/'1' rows ('#' comments allowed)
    or a PGM P2 file (pixels below 128 are black), or a string with the
    ASCII grid content.
    """
    if isinstance(source, (str, Path)) and "\n" not in str(source):
        text = Path(source).read_text()
    else:
        text = str(source)
    if text.lstrip().startswith("P2"):
        grid = _parse_pgm(text)
    else:
        grid = _parse_ascii(text)
    if grid.size == 0:
        raise ShapeParseError("empty image")
    if not grid.any():
        raise ShapeParseError("no black cells")
    return grid


def _parse_ascii(text: str) -> np.ndarray:
    rows = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if set(line) - {"0", "1"}:
            raise ShapeParseError(f"invalid characters in row: {line!r}")
        rows.append([c == "0" for c in line])
    if rows and any(len(r) != len(rows[0]) for r in rows):
        raise ShapeParseError("ragged rows")
    return np.array(rows, dtype=bool) if rows else np.zeros((0, 0), dtype=bool)


def _parse_pgm(text: str, threshold: int = 128) -> np.ndarray:
    tokens = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0]
        tokens.extend(line.split())
    if not tokens or tokens[0] != "P2":
        raise ShapeParseError("not a PGM P2 file")
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
        pixels = [int(t) for t in tokens[4:]]
    except (ValueError, IndexError) as exc:
        raise ShapeParseError(f"malformed PGM header or data: {exc}") from exc
    if len(pixels) != width * height:
        raise ShapeParseError("pixel count does not match dimensions")
    if maxval <= 0:
        raise ShapeParseError("maxval must be positive")
    img = np.array(pixels).reshape(height, width)
    return img < threshold


def chebyshev_distance(black: np.ndarray, cap: int) -> np.ndarray:
    """8-neighborhood grid distance to the nearest black cell, capped."""
    dist = np.where(black, 0, cap).astype(int)
    for _ in range(cap):
        padded = np.pad(dist, 1, constant_values=cap)
        neigh = np.minimum.reduce([
            padded[r:r + dist.shape[0], c:c + dist.shape[1]]
            for r in range(3) for c in range(3)
        ])
        new = np.minimum(dist, neigh + 1)
        if np.array_equal(new, dist):
            break
        dist = new
    return np.minimum(dist, cap)


def gray_transform(black: np.ndarray, l: int) -> np.ndarray:
    """l-level gray field: 0 on black cells, 1 beyond l cells away.

    Equivalent to iterating a min-over-3x3 relaxation with black cells held
    at 0; values are exact multiples of 1/l.
    """
    if l < 1:
        raise ValueError("l must be >= 1")
    dist = chebyshev_distance(black, l)
    return dist / float(l)


def cell_size(n_robots: int, n_cell: int, r_avoid: float) -> float:
    """Cell edge making the shape area equal the robots' avoidance disks."""
    if n_robots <= 0 or n_cell <= 0 or r_avoid <= 0:
        raise ValueError("all cell_size arguments must be > 0")
    return math.sqrt(math.pi / 4.0 * n_robots / n_cell) * r_avoid


class ShapeField:
    """Immutable gray shape with cell geometry in the seed-anchored frame."""

    def __init__(self, black: np.ndarray, l: int, l_cell: float,
                 origin_cell: tuple[int, int] | None = None):
        self.height, self.width = black.shape
        self.black = black.copy()
        self.l = l
        self.l_cell = float(l_cell)
        self.gray = gray_transform(black, l)
        self.n_cell = int(black.sum())
        if self.n_cell == 0:
            raise ShapeParseError("no black cells")
        rows, cols = np.nonzero(black)
        if origin_cell is None:
            origin_cell = (int(round(cols.mean())), int(round(rows.mean())))
        self.origin_cell = origin_cell  # (col, row) mapped to the seed origin

        # Cell centers in meters, row-major (row, col) order for tie-breaks.
        self._black_rc = np.stack([rows, cols], axis=1)
        order = np.lexsort((self._black_rc[:, 1], self._black_rc[:, 0]))
        self._black_rc = self._black_rc[order]
        self.black_centers = self._centers(self._black_rc)

        grows, gcols = np.nonzero(self.gray < 1.0)
        grc = np.stack([grows, gcols], axis=1)
        order = np.lexsort((grc[:, 1], grc[:, 0]))
        self._gray_rc = grc[order]
        self.gray_centers = self._centers(self._gray_rc)
        self.gray_values = self.gray[self._gray_rc[:, 0], self._gray_rc[:, 1]]

    def _centers(self, rc: np.ndarray) -> np.ndarray:
        col0, row0 = self.origin_cell
        x = (rc[:, 1] - col0) * self.l_cell
        y = (row0 - rc[:, 0]) * self.l_cell
        return np.stack([x, y], axis=1)

    def cell_index(self, point: np.ndarray) -> tuple[int, int] | None:
        """(row, col) of the cell whose square contains the point, or None."""
        col0, row0 = self.origin_cell
        col = col0 + int(np.floor(point[0] / self.l_cell + 0.5))
        row = row0 - int(np.floor(point[1] / self.l_cell + 0.5))
        if 0 <= row < self.height and 0 <= col < self.width:
            return row, col
        return None

    def gray_at(self, point: np.ndarray) -> float:
        idx = self.cell_index(point)
        if idx is None:
            return 1.0
        return float(self.gray[idx])

    def in_black(self, point: np.ndarray) -> bool:
        idx = self.cell_index(point)
        return idx is not None and bool(self.black[idx])

    def nearest_gray_cell(self, q_hat: np.ndarray) -> tuple[np.ndarray, float]:
        """Closest cell with gray value < 1; ties break by (row, col)."""
        d2 = np.sum((self.gray_centers - q_hat) ** 2, axis=1)
        k = int(np.argmin(d2))  # first minimum wins: centers are rc-sorted
        return self.gray_centers[k].copy(), float(self.gray_values[k])

    def nearest_darker_cell(self, q_hat: np.ndarray) -> tuple[np.ndarray, float] | None:
        """Closest cell strictly darker than the point's own gray level.

        Returns (center offset, gray level here), or None when already in a
        darkest (black) cell; the descent direction for shape entry.
        """
        here = self.gray_at(q_hat)
        mask = self.gray_values < here - 1e-12
        if not mask.any():
            return None
        centers = self.gray_centers[mask]
        d2 = np.sum((centers - q_hat) ** 2, axis=1)
        return centers[int(np.argmin(d2))].copy(), here

    def unoccupied_black_in_range(self, q_hat: np.ndarray,
                                  neighbor_estimates: list[np.ndarray] | np.ndarray,
                                  r_sense: float) -> np.ndarray:
        """Black-cell offsets within range not containing any robot.

        A cell counts as occupied when a neighbor's estimated position falls
        inside its square, or when the querying robot itself is inside it.
        """
        centers = self.black_centers
        in_range = np.sum((centers - q_hat) ** 2, axis=1) <= r_sense**2
        occupied = np.zeros(len(centers), dtype=bool)
        points = [q_hat] + [np.asarray(p) for p in neighbor_estimates]
        half = self.l_cell / 2.0
        for p in points:
            # half-open square [c - half, c + half)
            inside = np.all((p >= centers - half) & (p < centers + half), axis=1)
            occupied |= inside
        return centers[in_range & ~occupied].copy()


def build_field(source, l: int, n_robots: int, r_avoid: float,
                origin_cell: tuple[int, int] | None = None) -> ShapeField:
    """Convenience constructor: load, size and gray-transform a shape."""
    black = load_shape(source)
    lc = cell_size(n_robots, int(black.sum()), r_avoid)
    return ShapeField(black, l, lc, origin_cell)
