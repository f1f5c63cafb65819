"""Random phantoms, noise injection and artifact-detector training data."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import Image, pixel_centers, read_grid, write_grid
from .net import TrainSet
from .operators import fbp_reconstruct
from .rng import SeededRng, derive_seed

__all__ = [
    "EllipsePhantomSpec",
    "BlobPhantomSpec",
    "PhantomError",
    "gen_ellipse_phantom",
    "gen_blob_phantom",
    "add_noise",
    "build_training_set",
    "save_training_set",
    "load_training_set",
]

MAX_REJECTIONS = 10_000


class PhantomError(RuntimeError):
    pass


@dataclass(frozen=True)
class EllipsePhantomSpec:
    """Random piecewise-constant ellipse phantom.

    Each ellipse has uniform random centre, half axes, angle and intensity
    (intensity in ``[-intensity_max, intensity_max]``).  An ellipse is
    rejected when its support leaves the unit disc or when adding it would
    push the phantom outside ``[0, intensity_max]``.
    """

    grid_n: int = 64
    seed: int = 0
    n_ellipses: tuple = (3, 8)
    intensity_max: float = 6.0
    axis_range: tuple = (0.05, 0.6)


@dataclass(frozen=True)
class BlobPhantomSpec:
    """Sum of Gaussian bumps, each truncated at three widths and kept inside
    the unit disc."""

    grid_n: int = 64
    seed: int = 0
    n_blobs: int = 6
    width_range: tuple = (0.08, 0.25)
    amplitude_range: tuple = (0.5, 2.0)


def _ellipse_inside_disc(cx, cy, a, b, theta, n_boundary=256):
    t = np.linspace(0, 2 * np.pi, n_boundary, endpoint=False)
    ct, st = np.cos(theta), np.sin(theta)
    px = cx + a * np.cos(t) * ct - b * np.sin(t) * st
    py = cy + a * np.cos(t) * st + b * np.sin(t) * ct
    # sampled boundary plus a margin covering the chord sag between samples
    margin = max(a, b) * (1 - np.cos(np.pi / n_boundary))
    return np.max(px * px + py * py) <= (1.0 - margin) ** 2


def gen_ellipse_phantom(spec):
    rng = SeededRng(spec.seed)
    X, Y = pixel_centers(spec.grid_n)
    img = np.zeros((spec.grid_n, spec.grid_n))
    lo, hi = spec.n_ellipses
    target = rng.integers(lo, hi + 1)
    placed = 0
    rejections = 0
    while placed < target:
        if rejections >= MAX_REJECTIONS:
            raise PhantomError(f"ellipse constraints unsatisfiable after {MAX_REJECTIONS} rejections")
        cx, cy = rng.uniform(2, -1.0, 1.0)
        a, b = rng.uniform(2, *spec.axis_range)
        theta = rng.uniform(low=0.0, high=np.pi)
        value = rng.uniform(low=-spec.intensity_max, high=spec.intensity_max)
        if not _ellipse_inside_disc(cx, cy, a, b, theta):
            rejections += 1
            continue
        ct, st = np.cos(theta), np.sin(theta)
        u = (X - cx) * ct + (Y - cy) * st
        v = -(X - cx) * st + (Y - cy) * ct
        mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        if not mask.any():
            rejections += 1
            continue
        trial = img + value * mask
        if trial.min() < 0 or trial.max() > spec.intensity_max:
            rejections += 1
            continue
        img = trial
        placed += 1
    return img


def gen_blob_phantom(spec):
    rng = SeededRng(spec.seed)
    X, Y = pixel_centers(spec.grid_n)
    img = np.zeros((spec.grid_n, spec.grid_n))
    for _ in range(spec.n_blobs):
        w = rng.uniform(low=spec.width_range[0], high=spec.width_range[1])
        amp = rng.uniform(low=spec.amplitude_range[0], high=spec.amplitude_range[1])
        # centre radius chosen so the 3w truncation disc stays inside the unit disc
        rad = (1.0 - 3 * w) * np.sqrt(rng.uniform())
        ang = rng.uniform(low=0.0, high=2 * np.pi)
        cx, cy = rad * np.cos(ang), rad * np.sin(ang)
        d2 = (X - cx) ** 2 + (Y - cy) ** 2
        img += np.where(d2 <= (3 * w) ** 2, amp * np.exp(-d2 / (2 * w * w)), 0.0)
    return img


def add_noise(y, level, rng):
    """Add Gaussian noise scaled to exactly ``level * ||y||``.

    Returns ``(y_delta, delta)`` with ``delta = ||y_delta - y||``.
    """
    if level < 0:
        raise ValueError("noise level must be non-negative")
    y = np.asarray(y, dtype=np.float64)
    if level == 0:
        return y.copy(), 0.0
    ny = np.linalg.norm(y)
    if ny == 0:
        raise ValueError("cannot scale relative noise for zero data")
    delta = level * ny
    return y + delta * rng.unit_vector(y.shape), float(delta)


def build_training_set(op, fbp_cfg, n_half, seed, phantom_spec=None, use_fbp=True):
    """Artifact-detector training pairs.

    The first ``n_half`` pairs carry reconstructions ``x = B(F z)`` with
    target ``z - x``, where ``B`` is filtered backprojection (or the plain
    adjoint when ``use_fbp`` is False).  The last ``n_half`` pairs are clean,
    ``x = z`` with target zero.  Phantom ``k`` uses a seed derived from
    ``(seed, k)``.
    """
    if n_half < 1:
        raise ValueError("need at least one pair per half")
    base = phantom_spec or EllipsePhantomSpec(grid_n=op.grid_n)
    inputs, targets, tags, seeds = [], [], [], []
    for k in range(2 * n_half):
        s = derive_seed(seed, k)
        z = gen_ellipse_phantom(EllipsePhantomSpec(
            grid_n=op.grid_n, seed=s, n_ellipses=base.n_ellipses,
            intensity_max=base.intensity_max, axis_range=base.axis_range,
        ))
        if k < n_half:
            y = op.apply(z)
            x = fbp_reconstruct(op, fbp_cfg, y) if use_fbp else op.adjoint(y)
            inputs.append(x)
            targets.append(z - x)
            tags.append("artifact")
        else:
            inputs.append(z)
            targets.append(np.zeros_like(z))
            tags.append("clean")
        seeds.append(s)
    return TrainSet(np.stack(inputs), np.stack(targets), tags, seeds)


def save_training_set(directory, data):
    """One NETT image file per input and target plus ``manifest.txt``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = ["index,kind,input,target,seed"]
    for i, (x, r, tag) in enumerate(zip(data.inputs, data.targets, data.tags)):
        xin, xtg = f"input_{i:05d}.nett", f"target_{i:05d}.nett"
        write_grid(d / xin, Image(x))
        write_grid(d / xtg, Image(r))
        seed = "" if data.seeds is None else data.seeds[i]
        lines.append(f"{i},{tag},{xin},{xtg},{seed}")
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_training_set(directory):
    d = Path(directory)
    rows = (d / "manifest.txt").read_text().splitlines()
    if not rows or rows[0] != "index,kind,input,target,seed":
        raise ValueError(f"{d}: bad manifest header")
    inputs, targets, tags, seeds = [], [], [], []
    for row in rows[1:]:
        if not row.strip():
            continue
        _, tag, xin, xtg, seed = row.split(",")
        inputs.append(read_grid(d / xin).values)
        targets.append(read_grid(d / xtg).values)
        tags.append(tag)
        seeds.append(int(seed) if seed else None)
    return TrainSet(np.stack(inputs), np.stack(targets), tags, seeds)
