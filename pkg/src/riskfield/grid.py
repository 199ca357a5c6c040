"""Cell-centred BEV grid and the field containers that live on it.

Values are stored as ``(ny, nx)`` arrays so that the longitudinal index ``i``
is the contiguous one; the flat row-major index of cell ``(i, j)`` is
``j * nx + i``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GRID_MAGIC = "DRIFTGRID"
GRID_VERSION = "v1"


@dataclass(frozen=True)
class GridSpec:
    nx: int = 150
    ny: int = 70
    dx: float = 1.0
    dy: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)
    frame_rate: float = 20.0

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"grid needs at least 2x2 cells, got {self.nx}x{self.ny}")
        if not (self.dx > 0 and self.dy > 0):
            raise ValueError("cell sizes must be positive")
        if not self.frame_rate > 0:
            raise ValueError("frame rate must be positive")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """``(xmin, xmax, ymin, ymax)`` of the domain edges (not cell centres)."""
        ox, oy = self.origin
        return (ox - 0.5 * self.dx, ox + (self.nx - 0.5) * self.dx,
                oy - 0.5 * self.dy, oy + (self.ny - 0.5) * self.dy)

    def x_centers(self) -> np.ndarray:
        return self.origin[0] + self.dx * np.arange(self.nx)

    def y_centers(self) -> np.ndarray:
        return self.origin[1] + self.dy * np.arange(self.ny)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """World coordinates of every cell centre, each of shape ``(ny, nx)``."""
        return np.meshgrid(self.x_centers(), self.y_centers())

    def shifted(self, offset) -> "GridSpec":
        return GridSpec(self.nx, self.ny, self.dx, self.dy,
                        (self.origin[0] + offset[0], self.origin[1] + offset[1]),
                        self.frame_rate)


def _check_values(spec: GridSpec, values) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.size != spec.size:
        raise ValueError(f"expected {spec.size} values, got {arr.size}")
    arr = arr.reshape(spec.shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("field values must be finite")
    return arr


@dataclass
class ScalarField:
    spec: GridSpec
    values: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.values = _check_values(self.spec, self.values)

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def __getitem__(self, ij):
        i, j = ij
        return float(self.values[j, i])

    def copy(self) -> "ScalarField":
        return ScalarField(self.spec, self.values.copy(), self.t)


@dataclass
class VectorField:
    spec: GridSpec
    vx: np.ndarray
    vy: np.ndarray
    t: float = 0.0
    v_cap: float = field(default=60.0, repr=False)

    def __post_init__(self):
        self.vx = _check_values(self.spec, self.vx)
        self.vy = _check_values(self.spec, self.vy)
        mag = np.hypot(self.vx, self.vy)
        if mag.size and mag.max() > self.v_cap * (1 + 1e-12):
            raise ValueError(f"velocity magnitude {mag.max():.3f} exceeds cap {self.v_cap}")

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.vx, self.vy)

    @classmethod
    def zeros(cls, spec: GridSpec, t: float = 0.0) -> "VectorField":
        return cls(spec, np.zeros(spec.shape), np.zeros(spec.shape), t)


def make_field(spec: GridSpec, fill: float = 0.0) -> ScalarField:
    if not math.isfinite(fill):
        raise ValueError(f"fill must be finite, got {fill!r}")
    return ScalarField(spec, np.full(spec.shape, float(fill)), 0.0)


def cell_to_world(spec: GridSpec, i: int, j: int) -> tuple[float, float]:
    return (spec.origin[0] + i * spec.dx, spec.origin[1] + j * spec.dy)


def world_to_cell(spec: GridSpec, p) -> tuple[int, int] | None:
    """Nearest cell index for world point ``p``; ``None`` outside the domain."""
    fx = (p[0] - spec.origin[0]) / spec.dx
    fy = (p[1] - spec.origin[1]) / spec.dy
    if not (math.isfinite(fx) and math.isfinite(fy)):
        return None
    i = math.floor(fx + 0.5)
    j = math.floor(fy + 0.5)
    if 0 <= i < spec.nx and 0 <= j < spec.ny:
        return (i, j)
    return None


def integrate(f: ScalarField) -> float:
    """Midpoint-rule integral over the domain."""
    return float(f.values.sum() * f.spec.dx * f.spec.dy)


def sample(f: ScalarField, p) -> float | None:
    cell = world_to_cell(f.spec, p)
    if cell is None:
        return None
    return f[cell]


# -- DRIFTGRID dump format ---------------------------------------------------

def _header(f: ScalarField) -> str:
    s = f.spec
    parts = [GRID_MAGIC, GRID_VERSION, str(s.nx), str(s.ny)]
    parts += [repr(float(v)) for v in (s.dx, s.dy, s.origin[0], s.origin[1], f.t)]
    return " ".join(parts)


def format_grid_text(f: ScalarField) -> str:
    lines = [_header(f)]
    for row in f.values:
        lines.append(" ".join(f"{v:.9g}" for v in row))
    return "\n".join(lines) + "\n"


def format_grid_binary(f: ScalarField) -> bytes:
    body = np.ascontiguousarray(f.values, dtype="<f4").tobytes()
    return (_header(f) + "\n").encode("ascii") + body


def write_grid(f: ScalarField, path, binary: bool = False) -> Path:
    path = Path(path)
    if binary:
        path.write_bytes(format_grid_binary(f))
    else:
        path.write_text(format_grid_text(f))
    return path


def _parse_header(line: str, frame_rate: float) -> tuple[GridSpec, float]:
    parts = line.split()
    if len(parts) != 9 or parts[0] != GRID_MAGIC or parts[1] != GRID_VERSION:
        raise ValueError(f"not a {GRID_MAGIC} {GRID_VERSION} header: {line[:60]!r}")
    nx, ny = int(parts[2]), int(parts[3])
    dx, dy, ox, oy, t = (float(v) for v in parts[4:])
    return GridSpec(nx, ny, dx, dy, (ox, oy), frame_rate), t


def read_grid(path, frame_rate: float = 20.0) -> ScalarField:
    """Read either dump flavour; binary is detected from the payload size."""
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    spec, t = _parse_header(raw[:nl].decode("ascii"), frame_rate)
    payload = raw[nl + 1:]
    if len(payload) == 4 * spec.size and not _looks_textual(payload):
        values = np.frombuffer(payload, dtype="<f4").astype(float)
    else:
        rows = payload.decode("ascii").split("\n")
        rows = [r for r in rows if r.strip()]
        if len(rows) != spec.ny:
            raise ValueError(f"expected {spec.ny} rows, found {len(rows)}")
        values = np.array([[float(v) for v in r.split()] for r in rows])
    return ScalarField(spec, values, t)


def _looks_textual(payload: bytes) -> bool:
    try:
        text = payload.decode("ascii")
    except UnicodeDecodeError:
        return False
    return all(c in "0123456789+-.eEinfa \n" for c in text[:256])
