"""Dense 2D grids, the Euclidean pairing and grid file formats.

Images live on ``[-1, 1]**2`` with pixel centres at ``-1 + (i + 0.5) * h``,
``h = 2 / n``; row index ``i`` runs along the y axis, column ``j`` along x.
Computational routines take plain ``float64`` arrays; :class:`Image` and
:class:`Sinogram` are validated containers used at file and CLI boundaries.

The pairing is the plain Euclidean sum ``sum(a * b)`` without cell-area
weights.  Every adjoint in the package is taken with respect to it.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Image",
    "Sinogram",
    "GridFormatError",
    "inner_product",
    "norm2",
    "relative_error",
    "pixel_centers",
    "disc_mask",
    "write_grid",
    "read_grid",
    "write_pgm",
]

MAGIC = b"NETT"
FORMAT_VERSION = 1
KIND_IMAGE = 0
KIND_SINOGRAM = 1


class GridFormatError(ValueError):
    """Raised on malformed grid files."""


def _as_grid(values, name):
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 2 or min(arr.shape) < 1:
        raise ValueError(f"{name} must be a non-empty 2D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Image:
    """Real image on ``[-1, 1]**2``; ``values`` has shape ``(height, width)``."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _as_grid(self.values, "Image"))

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class Sinogram:
    """Sensor-by-sample data; ``values`` has shape ``(n_sensors, n_samples)``."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _as_grid(self.values, "Sinogram"))

    @property
    def n_sensors(self):
        return self.values.shape[0]

    @property
    def n_samples(self):
        return self.values.shape[1]


def _raw(a):
    return a.values if isinstance(a, (Image, Sinogram)) else np.asarray(a, dtype=np.float64)


def inner_product(a, b):
    """Euclidean pairing ``sum(a * b)`` of two equally shaped grids or vectors."""
    a, b = _raw(a), _raw(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a.ravel(), b.ravel()))


def norm2(a):
    return float(np.linalg.norm(_raw(a).ravel()))


def relative_error(x, z):
    """Relative l2 error ``||x - z|| / ||x||`` of ``z`` against reference ``x``."""
    x, z = _raw(x), _raw(z)
    if x.shape != z.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {z.shape}")
    nx = np.linalg.norm(x.ravel())
    if nx == 0:
        raise ValueError("relative error undefined for a zero reference")
    return float(np.linalg.norm((x - z).ravel()) / nx)


def pixel_centers(n):
    """Coordinate grids ``(X, Y)`` of pixel centres for an ``n x n`` image."""
    h = 2.0 / n
    g = -1.0 + (np.arange(n) + 0.5) * h
    return np.meshgrid(g, g)


def disc_mask(n, radius=1.0, center=(0.0, 0.0)):
    X, Y = pixel_centers(n)
    return (X - center[0]) ** 2 + (Y - center[1]) ** 2 <= radius**2


def write_grid(path, grid):
    """Write an :class:`Image` or :class:`Sinogram` in NETT binary format.

    Layout (little endian): ``b"NETT"``, u32 version, u32 kind
    (0 image, 1 sinogram), u32 dim0, u32 dim1, then ``dim0 * dim1`` f64.
    """
    if isinstance(grid, Image):
        kind = KIND_IMAGE
    elif isinstance(grid, Sinogram):
        kind = KIND_SINOGRAM
    else:
        raise TypeError("expected Image or Sinogram")
    d0, d1 = grid.values.shape
    header = MAGIC + struct.pack("<4I", FORMAT_VERSION, kind, d0, d1)
    Path(path).write_bytes(header + grid.values.astype("<f8").tobytes())


def read_grid(path):
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:4] != MAGIC:
        raise GridFormatError(f"{path}: not a NETT grid file")
    version, kind, d0, d1 = struct.unpack("<4I", data[4:20])
    if version != FORMAT_VERSION:
        raise GridFormatError(f"{path}: unsupported version {version}")
    if len(data) != 20 + 8 * d0 * d1:
        raise GridFormatError(f"{path}: payload size does not match {d0}x{d1}")
    values = np.frombuffer(data, dtype="<f8", offset=20).reshape(d0, d1)
    if kind == KIND_IMAGE:
        return Image(values)
    if kind == KIND_SINOGRAM:
        return Sinogram(values)
    raise GridFormatError(f"{path}: unknown kind {kind}")


def write_pgm(path, values):
    """8-bit binary PGM preview with per-image min-max scaling."""
    v = _raw(values)
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    # row 0 is y = -1; flip so the preview has y pointing up
    pix = pix[::-1]
    header = f"P5\n{v.shape[1]} {v.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + pix.tobytes())
