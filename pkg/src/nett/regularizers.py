"""Regularization functionals with value and gradient.

All regularizers act on ``float64`` arrays of fixed shape and return a
non-negative value and a gradient of the same shape.
"""

from pathlib import Path

import numpy as np

from .rng import SeededRng

__all__ = [
    "Regularizer",
    "FunctionalRegularizer",
    "WeightedLq",
    "NonconvexLq",
    "NetworkRegularizer",
    "haar2d",
    "ihaar2d",
    "coercivity_probe",
    "random_tanh_features",
    "write_regularizer_config",
    "read_regularizer_config",
]


class Regularizer:
    """Base class: ``value(x) -> float`` and ``gradient(x) -> array``."""

    descriptor = "regularizer"

    def value(self, x):
        raise NotImplementedError

    def gradient(self, x):
        raise NotImplementedError

    def __call__(self, x):
        return self.value(x)

    def __repr__(self):
        return f"<{self.descriptor}>"


class FunctionalRegularizer(Regularizer):
    """Wrap a pair of callables.  Used for ad hoc functionals in diagnostics."""

    def __init__(self, value, gradient, descriptor="functional"):
        self._value = value
        self._gradient = gradient
        self.descriptor = descriptor

    def value(self, x):
        return float(self._value(np.asarray(x, dtype=np.float64)))

    def gradient(self, x):
        return np.asarray(self._gradient(np.asarray(x, dtype=np.float64)), dtype=np.float64)


def _haar_levels(shape, levels):
    n0, n1 = shape
    max_levels = 0
    while n0 % 2 == 0 and n1 % 2 == 0 and n0 > 1 and n1 > 1:
        n0 //= 2
        n1 //= 2
        max_levels += 1
    if levels is None:
        return max_levels
    if levels > max_levels:
        raise ValueError(f"{levels} Haar levels impossible for shape {shape}")
    return levels


def haar2d(x, levels=None):
    """Orthonormal 2D Haar analysis in the usual in-place (Mallat) layout.

    The approximation band sits in the top-left corner; ``levels=None``
    decomposes as far as the shape allows.
    """
    c = np.array(x, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("haar2d needs a 2D array")
    levels = _haar_levels(c.shape, levels)
    n0, n1 = c.shape
    s = 1 / np.sqrt(2)
    for _ in range(levels):
        a = c[:n0, :n1]
        lo = (a[:, 0::2] + a[:, 1::2]) * s
        hi = (a[:, 0::2] - a[:, 1::2]) * s
        a = np.concatenate([lo, hi], axis=1)
        lo = (a[0::2] + a[1::2]) * s
        hi = (a[0::2] - a[1::2]) * s
        c[:n0, :n1] = np.concatenate([lo, hi], axis=0)
        n0 //= 2
        n1 //= 2
    return c


def ihaar2d(c, levels=None):
    """Inverse (and adjoint) of :func:`haar2d`."""
    x = np.array(c, dtype=np.float64)
    levels = _haar_levels(x.shape, levels)
    s = 1 / np.sqrt(2)
    sizes = [(x.shape[0] >> k, x.shape[1] >> k) for k in range(levels)]
    for n0, n1 in reversed(sizes):
        a = x[:n0, :n1]
        h0 = n0 // 2
        lo, hi = a[:h0], a[h0:]
        b = np.empty_like(a)
        b[0::2] = (lo + hi) * s
        b[1::2] = (lo - hi) * s
        h1 = n1 // 2
        lo, hi = b[:, :h1], b[:, h1:]
        out = np.empty_like(b)
        out[:, 0::2] = (lo + hi) * s
        out[:, 1::2] = (lo - hi) * s
        x[:n0, :n1] = out
    return x


class WeightedLq(Regularizer):
    """``sum_l v_l |<x, phi_l>|**q`` over an orthonormal basis.

    Parameters
    ----------
    q : float
        Exponent, strictly greater than 1.
    weights : float or array_like
        Positive weights, scalar or one per coefficient.
    frame : {'pixel', 'haar2d'}
    levels : int, optional
        Haar depth; full depth by default.
    """

    def __init__(self, q=2.0, weights=1.0, frame="pixel", levels=None):
        if not q > 1:
            raise ValueError("WeightedLq requires q > 1")
        if frame not in ("pixel", "haar2d"):
            raise ValueError(f"unknown frame {frame!r}")
        w = np.asarray(weights, dtype=np.float64)
        if not np.all(w > 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be positive and finite")
        self.q = float(q)
        self.weights = w
        self.frame = frame
        self.levels = levels
        self.descriptor = f"WeightedLq(q={self.q:g}, frame={frame})"

    def coefficients(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.frame == "pixel":
            return x
        return haar2d(x, self.levels)

    def synthesize(self, c):
        if self.frame == "pixel":
            return c
        return ihaar2d(c, self.levels)

    def value(self, x):
        c = self.coefficients(x)
        return float(np.sum(self.weights * np.abs(c) ** self.q))

    def gradient(self, x):
        c = self.coefficients(x)
        g = self.q * self.weights * np.abs(c) ** (self.q - 1) * np.sign(c)
        return self.synthesize(np.broadcast_to(g, c.shape).copy())


def random_tanh_features(n_features, dim, seed, scale_b=1.0):
    """Feature vectors ``(a, b)``: ``a`` is the identity basis (when
    ``n_features == dim``) and ``b`` has i.i.d. Gaussian rows scaled to
    norm ``scale_b``."""
    rng = SeededRng(seed)
    a = np.eye(n_features, dim)
    b = rng.normal((n_features, dim))
    b *= scale_b / np.linalg.norm(b, axis=1, keepdims=True)
    return a, b


class NonconvexLq(Regularizer):
    """``sum_l v_l |phi_l(x)|**q`` with ``phi_l(x) = <a_l,x> + c tanh(<b_l,x>)``.

    ``a`` and ``b`` are ``(n_features, dim)`` matrices acting on the
    flattened input.
    """

    def __init__(self, a, b, c=0.0, weights=1.0, q=2.0):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.ndim != 2 or a.shape != b.shape:
            raise ValueError("a and b must be matrices of equal shape")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("feature vectors must be finite")
        if c < 0:
            raise ValueError("mixing constant c must be >= 0")
        if not q > 1:
            raise ValueError("NonconvexLq requires q > 1")
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64), (a.shape[0],))
        if not np.all(w > 0):
            raise ValueError("weights must be positive")
        self.a, self.b = a, b
        self.c = float(c)
        self.weights = w
        self.q = float(q)
        self.descriptor = f"NonconvexLq(q={self.q:g}, c={self.c:g}, n={a.shape[0]})"

    def features(self, x):
        x = np.asarray(x, dtype=np.float64).ravel()
        return self.a @ x + self.c * np.tanh(self.b @ x)

    def value(self, x):
        return float(np.sum(self.weights * np.abs(self.features(x)) ** self.q))

    def gradient(self, x):
        x = np.asarray(x, dtype=np.float64)
        flat = x.ravel()
        t = np.tanh(self.b @ flat)
        phi = self.a @ flat + self.c * t
        outer = self.q * self.weights * np.abs(phi) ** (self.q - 1) * np.sign(phi)
        g = self.a.T @ outer + self.c * (self.b.T @ (outer * (1 - t * t)))
        return g.reshape(x.shape)


class NetworkRegularizer(Regularizer):
    """``sum |a|**p`` over all bottleneck activations of a trained network.

    For ``p == 1`` the gradient uses ``sign(0) = 0``.
    """

    def __init__(self, network, p=2.0):
        if p < 1:
            raise ValueError("p must be >= 1")
        self.network = network.frozen()
        self.p = float(p)
        self.descriptor = f"NetworkRegularizer(p={self.p:g})"

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.network.input_shape:
            raise ValueError(f"expected input of shape {self.network.input_shape}, got {x.shape}")
        return x

    def value(self, x):
        code = self.network.encode(self._check(x))
        return float(np.sum(np.abs(code) ** self.p))

    def gradient(self, x):
        x = self._check(x)
        code, tape = self.network.encode(x, return_tape=True)
        upstream = self.p * np.abs(code) ** (self.p - 1) * np.sign(code)
        return self.network.encoder_input_gradient(tape, upstream)


def coercivity_probe(reg, x, scales=(1.0, 2.0, 4.0, 8.0)):
    """Evaluate ``reg`` along the ray ``s * x``.

    Returns ``(values, flag)``.  ``flag`` is True when the values are
    nondecreasing and the last is at least twice the first; this is a
    heuristic indicator of coercivity, not a proof.  A zero first value
    yields ``flag = False``.
    """
    scales = [float(s) for s in scales]
    if any(s < 1 for s in scales) or any(b <= a for a, b in zip(scales, scales[1:])):
        raise ValueError("scales must be increasing and >= 1")
    x = np.asarray(x, dtype=np.float64)
    values = np.array([reg.value(s * x) for s in scales])
    flag = bool(values[0] > 0 and np.all(np.diff(values) >= 0) and values[-1] >= 2 * values[0])
    return values, flag


def write_regularizer_config(path, **entries):
    """Write a ``key=value`` regularizer description."""
    lines = [f"{k}={v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n")


_CONFIG_KEYS = {"kind", "q", "p", "c", "frame", "weights", "levels", "n_features", "dim", "seed", "net"}


def read_regularizer_config(path):
    """Build a regularizer from a ``key=value`` file.

    Recognized kinds: ``weighted_lq`` (q, frame, weights, levels),
    ``nonconvex_lq`` (q, c, n_features, dim, seed, weights) and ``network``
    (net, p).
    """
    from .net import load_network

    cfg = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        if k.strip() not in _CONFIG_KEYS:
            raise ValueError(f"unknown regularizer key {k.strip()!r}")
        cfg[k.strip()] = v.strip()
    kind = cfg.get("kind")
    if kind == "weighted_lq":
        return WeightedLq(
            q=float(cfg.get("q", 2)),
            weights=float(cfg.get("weights", 1)),
            frame=cfg.get("frame", "pixel"),
            levels=int(cfg["levels"]) if "levels" in cfg else None,
        )
    if kind == "nonconvex_lq":
        n = int(cfg["n_features"])
        a, b = random_tanh_features(n, int(cfg.get("dim", n)), int(cfg.get("seed", 0)))
        return NonconvexLq(a, b, c=float(cfg.get("c", 0)), weights=float(cfg.get("weights", 1)),
                           q=float(cfg.get("q", 2)))
    if kind == "network":
        net_path = Path(cfg["net"])
        if not net_path.is_absolute():
            net_path = Path(path).parent / net_path
        return NetworkRegularizer(load_network(net_path), p=float(cfg.get("p", 2)))
    raise ValueError(f"unknown regularizer kind {kind!r}")
