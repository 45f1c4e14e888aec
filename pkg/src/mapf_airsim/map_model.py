"""Grid map representation, MovingAI file ingestion, and geometric primitives.

Coordinates are (x=column, y=row) with the origin at the top-left corner,
matching the MovingAI .scen convention. The grid is 4-connected; neighbor
enumeration order is fixed (up, down, left, right) so every downstream
tie-break is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, NamedTuple

import numpy as np

__all__ = [
    "Cell",
    "GridMap",
    "Scenario",
    "ScenarioEntry",
    "MapFormatError",
    "parse_map",
    "parse_scenario",
    "serialize_map",
    "neighbors",
    "manhattan",
    "free_cell_count",
]

# MovingAI terrain characters. '.' and 'G' are passable; trees ('T'),
# swamp ('S' is passable in octile benchmarks but we have no terrain
# costs, so it is rejected), water ('W') and '@'/'O' block.
_FREE_CHARS = frozenset(".G")
_OBSTACLE_CHARS = frozenset("@OT")


class MapFormatError(ValueError):
    """Raised for malformed .map/.scen input."""


class Cell(NamedTuple):
    x: int
    y: int


# Fixed neighbor offsets: up, down, left, right (y grows downward).
NEIGHBOR_OFFSETS = ((0, -1), (0, 1), (-1, 0), (1, 0))


@dataclass(frozen=True)
class GridMap:
    """Static obstacle grid; immutable and shareable across episodes."""

    width: int
    height: int
    blocked: np.ndarray  # bool, shape (height, width); True = obstacle

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("map dimensions must be >= 1")
        if self.blocked.shape != (self.height, self.width):
            raise ValueError("blocked array shape does not match dimensions")
        self.blocked.setflags(write=False)

    def in_bounds(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    def is_free(self, x: int, y: int) -> bool:
        """Free means in-bounds and not an obstacle; never wraps."""
        return self.in_bounds(x, y) and not self.blocked[y, x]

    def free_cells(self) -> List[Cell]:
        ys, xs = np.nonzero(~self.blocked)
        return [Cell(int(x), int(y)) for x, y in zip(xs, ys)]


class ScenarioEntry(NamedTuple):
    bucket: int
    start: Cell
    goal: Cell
    reference_length: float


@dataclass(frozen=True)
class Scenario:
    entries: tuple = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.entries)


def _decode(text) -> str:
    if isinstance(text, (bytes, bytearray)):
        return text.decode("utf-8")
    return text


def parse_map(text) -> GridMap:
    """Parse a MovingAI .map byte stream or string."""
    lines = _decode(text).splitlines()
    if len(lines) < 4:
        raise MapFormatError("truncated header: expected 4 header lines")
    if lines[0].strip().split() != ["type", "octile"]:
        raise MapFormatError(f"bad type line: {lines[0]!r}")
    try:
        h_tag, h_val = lines[1].split()
        w_tag, w_val = lines[2].split()
        height, width = int(h_val), int(w_val)
    except ValueError as exc:
        raise MapFormatError("bad height/width header") from exc
    if h_tag != "height" or w_tag != "width":
        raise MapFormatError("header must declare height then width")
    if height < 1 or width < 1:
        raise MapFormatError("height and width must be >= 1")
    if lines[3].strip() != "map":
        raise MapFormatError(f"expected 'map' line, got {lines[3]!r}")

    rows = [ln for ln in lines[4:] if ln != ""]
    if len(rows) != height:
        raise MapFormatError(f"row count mismatch: expected {height}, got {len(rows)}")
    blocked = np.zeros((height, width), dtype=bool)
    for y, row in enumerate(rows):
        if len(row) != width:
            raise MapFormatError(f"row {y} length {len(row)} != width {width}")
        for x, ch in enumerate(row):
            if ch in _OBSTACLE_CHARS:
                blocked[y, x] = True
            elif ch not in _FREE_CHARS:
                raise MapFormatError(f"unknown map character {ch!r} at ({x},{y})")
    return GridMap(width=width, height=height, blocked=blocked)


def serialize_map(grid: GridMap) -> str:
    """Re-emit the MovingAI grammar; free cells as '.', obstacles as '@'."""
    rows = ["".join("@" if grid.blocked[y, x] else "." for x in range(grid.width))
            for y in range(grid.height)]
    header = f"type octile\nheight {grid.height}\nwidth {grid.width}\nmap\n"
    return header + "\n".join(rows) + "\n"


def parse_scenario(text, grid: GridMap) -> Scenario:
    """Parse a MovingAI .scen version-1 byte stream, validating against grid."""
    lines = _decode(text).splitlines()
    if not lines or not lines[0].strip().lower().startswith("version"):
        raise MapFormatError("missing version line")
    entries = []
    for lineno, ln in enumerate(lines[1:], start=2):
        if not ln.strip():
            continue
        fields = ln.split("\t")
        if len(fields) == 1:
            fields = ln.split()
        if len(fields) != 9:
            raise MapFormatError(f"line {lineno}: expected 9 fields, got {len(fields)}")
        try:
            bucket = int(fields[0])
            sx, sy, gx, gy = (int(v) for v in fields[4:8])
            ref = float(fields[8])
        except ValueError as exc:
            raise MapFormatError(f"line {lineno}: non-numeric field") from exc
        if not grid.in_bounds(sx, sy) or not grid.in_bounds(gx, gy):
            raise MapFormatError(f"line {lineno}: coordinates out of bounds")
        if not grid.is_free(sx, sy):
            raise MapFormatError(f"line {lineno}: start on obstacle")
        if not grid.is_free(gx, gy):
            raise MapFormatError(f"line {lineno}: goal on obstacle")
        entries.append(ScenarioEntry(bucket, Cell(sx, sy), Cell(gx, gy), ref))
    return Scenario(entries=tuple(entries))


def neighbors(grid: GridMap, c: Cell) -> List[Cell]:
    """Free 4-neighbors of c, in fixed (up, down, left, right) order."""
    if not grid.in_bounds(c.x, c.y):
        raise ValueError(f"cell {c} out of bounds")
    out = []
    for dx, dy in NEIGHBOR_OFFSETS:
        nx, ny = c.x + dx, c.y + dy
        if grid.is_free(nx, ny):
            out.append(Cell(nx, ny))
    return out


def manhattan(a: Cell, b: Cell) -> int:
    return abs(a.x - b.x) + abs(a.y - b.y)


def free_cell_count(grid: GridMap) -> int:
    return int(np.count_nonzero(~grid.blocked))
