"""Datasets and target densities used by the experiment harness.

2-D generators (all seeded, roughly centred at the origin):

* ``moons``: points alternate between the arcs ``(cos t, sin t)`` and
  ``(1 - cos t, 0.5 - sin t)``, ``t ~ U(0, pi)``, noise sd 0.1, then
  ``x -> 2x + (-1, -0.2)``.
* ``2spirals``: arm radius ``r = sqrt(U) * 3 pi``, points
  ``(-r cos r, r sin r) + U(0, 0.5)``, second arm mirrored through the origin,
  scaled by 1/3, noise sd 0.1.
* ``circles``: radii 3 and 1.5 alternately, uniform angle, noise sd 0.24.
* ``8gaussians``: means on a circle of radius 2 at multiples of 45 degrees, sd 0.25.
* ``pinwheel``: 5 arms, radial sd 0.3, tangential sd 0.1, twist rate 0.25, scaled by 2.
* ``checkerboard``: uniform on the dark squares of a 4x4 board spanning [-4, 4]^2.
"""
from __future__ import annotations

import csv
import gzip
import io
import math
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.integrate import trapezoid

from ._io import atomic_write_text
from .errors import InvalidArgument, ParseError

GEN2D_NAMES = ("moons", "2spirals", "circles", "8gaussians", "pinwheel", "checkerboard")


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    targets: Optional[np.ndarray] = None

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.features, dtype=float))
        if not np.all(np.isfinite(X)):
            raise InvalidArgument("dataset features must be finite")
        object.__setattr__(self, "features", X)
        if self.targets is not None:
            y = np.asarray(self.targets)
            if len(y) != len(X):
                raise InvalidArgument(f"{len(y)} targets for {len(X)} samples")
            object.__setattr__(self, "targets", y)

    def __len__(self):
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], None if self.targets is None else self.targets[idx])

    def split(self, test_fraction: float = 0.2, seed=0) -> tuple["Dataset", "Dataset"]:
        """Disjoint, covering train/test split after a seeded shuffle."""
        if not 0.0 < test_fraction < 1.0:
            raise InvalidArgument("test_fraction must be in (0, 1)")
        order = np.random.default_rng(seed).permutation(len(self))
        n_test = max(1, int(round(test_fraction * len(self))))
        return self.subset(np.sort(order[n_test:])), self.subset(np.sort(order[:n_test]))


# -- synthetic 2-D data --------------------------------------------------------

def gen2d(name: str, n: int, seed=0) -> Dataset:
    if name not in GEN2D_NAMES:
        raise InvalidArgument(f"unknown 2-D dataset {name!r}; choose from {', '.join(GEN2D_NAMES)}")
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    rng = np.random.default_rng(seed)
    return Dataset(_GENERATORS[name](n, rng))


def _moons(n, rng):
    t = rng.uniform(0.0, math.pi, n)
    lower = (np.arange(n) % 2).astype(bool)
    x = np.where(lower, 1.0 - np.cos(t), np.cos(t))
    y = np.where(lower, 0.5 - np.sin(t), np.sin(t))
    pts = np.stack([x, y], axis=1) + 0.1 * rng.standard_normal((n, 2))
    return 2.0 * pts + np.array([-1.0, -0.2])


def _spirals(n, rng):
    r = np.sqrt(rng.uniform(size=n)) * 540.0 * (2.0 * math.pi) / 360.0
    pts = np.stack([-np.cos(r) * r, np.sin(r) * r], axis=1) + 0.5 * rng.uniform(size=(n, 2))
    pts[np.arange(n) % 2 == 1] *= -1.0
    return pts / 3.0 + 0.1 * rng.standard_normal((n, 2))


def _circles(n, rng):
    angle = rng.uniform(0.0, 2.0 * math.pi, n)
    radius = np.where(np.arange(n) % 2 == 0, 3.0, 1.5)
    pts = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    return pts + 0.24 * rng.standard_normal((n, 2))


EIGHT_GAUSSIAN_MEANS = 2.0 * np.array(
    [[math.cos(k * math.pi / 4), math.sin(k * math.pi / 4)] for k in range(8)])
EIGHT_GAUSSIAN_SD = 0.25


def _eight_gaussians(n, rng):
    idx = rng.integers(0, 8, n)
    return EIGHT_GAUSSIAN_MEANS[idx] + EIGHT_GAUSSIAN_SD * rng.standard_normal((n, 2))


def _pinwheel(n, rng, arms=5, radial_sd=0.3, tangential_sd=0.1, rate=0.25):
    feats = rng.standard_normal((n, 2)) * np.array([radial_sd, tangential_sd])
    feats[:, 0] += 1.0
    labels = np.arange(n) % arms
    angles = 2.0 * math.pi * labels / arms + rate * np.exp(feats[:, 0])
    c, s = np.cos(angles), np.sin(angles)
    x = feats[:, 0] * c - feats[:, 1] * s
    y = feats[:, 0] * s + feats[:, 1] * c
    return 2.0 * np.stack([x, y], axis=1)


def _checkerboard(n, rng):
    x1 = rng.uniform(size=n) * 4.0 - 2.0
    x2 = rng.uniform(size=n) - rng.integers(0, 2, n) * 2.0
    x2 = x2 + np.floor(x1) % 2
    return 2.0 * np.stack([x1, x2], axis=1)


_GENERATORS = {
    "moons": _moons,
    "2spirals": _spirals,
    "circles": _circles,
    "8gaussians": _eight_gaussians,
    "pinwheel": _pinwheel,
    "checkerboard": _checkerboard,
}


# -- Friedman regression -------------------------------------------------------

def friedman_target(X) -> np.ndarray:
    """``10 sin(pi x1 x2) + 20 (x3 - 0.5)^2 + 10 x4 + 5 x5``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return (10.0 * np.sin(math.pi * X[:, 0] * X[:, 1]) + 20.0 * (X[:, 2] - 0.5) ** 2
            + 10.0 * X[:, 3] + 5.0 * X[:, 4])


@dataclass(frozen=True)
class Standardizer:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float

    def apply(self, ds: Dataset) -> Dataset:
        y = None if ds.targets is None else (ds.targets - self.y_mean) / self.y_std
        return Dataset((ds.features - self.x_mean) / self.x_std, y)


def fit_standardizer(train: Dataset) -> Standardizer:
    y = np.asarray(train.targets, dtype=float)
    return Standardizer(train.features.mean(axis=0), train.features.std(axis=0),
                        float(y.mean()), float(y.std()))


def gen_friedman(n: int, noise_sd: float = 0.0, seed=0, test_fraction: float = 0.2,
                 standardize: bool = True) -> tuple[Dataset, Dataset]:
    """Friedman regression data on ``U[0,1]^5`` split into (train, test).

    Features and targets are standardized with train-split statistics.
    """
    if n < 2:
        raise InvalidArgument("need at least 2 samples to split")
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, 5))
    y = friedman_target(X) + noise_sd * rng.standard_normal(n)
    train, test = Dataset(X, y).split(test_fraction, rng)
    if standardize:
        scaler = fit_standardizer(train)
        train, test = scaler.apply(train), scaler.apply(test)
    return train, test


# -- CSV ------------------------------------------------------------------------

def load_csv(path, target_column=None) -> Dataset:
    """Header row plus decimal fields; ``target_column`` is a column name or index."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if target_column is None:
        t_idx = None
    elif isinstance(target_column, int):
        t_idx = target_column
    elif target_column in header:
        t_idx = header.index(target_column)
    else:
        raise ParseError(f"{path}: no column named {target_column!r}")
    values = []
    for lineno, row in enumerate(rows[1:], 2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"{path}:{lineno}: {len(row)} fields, header has {len(header)}")
        try:
            values.append([float(v) for v in row])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
    data = np.array(values, dtype=float).reshape(-1, len(header))
    if t_idx is None:
        return Dataset(data)
    return Dataset(np.delete(data, t_idx, axis=1), data[:, t_idx])


def save_csv(ds: Dataset, path, target_name: str = "target"):
    names = [f"x{j}" for j in range(ds.dim)]
    cols = [ds.features]
    if ds.targets is not None:
        names.append(target_name)
        cols.append(np.asarray(ds.targets, dtype=float).reshape(-1, 1))
    buf = io.StringIO()
    np.savetxt(buf, np.hstack(cols), delimiter=",", fmt="%.17g", header=",".join(names), comments="")
    return atomic_write_text(path, buf.getvalue())


# -- IDX --------------------------------------------------------------------------

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def read_idx(path) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise ParseError(f"{path}: offset 0: file too short for an IDX header")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code not in _IDX_TYPES or ndim == 0:
        raise ParseError(f"{path}: offset 0: bad IDX magic 0x{raw[:4].hex()}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError(f"{path}: offset 4: truncated dimension table")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = np.dtype(_IDX_TYPES[dtype_code])
    count = int(np.prod(dims))
    if len(raw) - header != count * dtype.itemsize:
        raise ParseError(f"{path}: offset {header}: expected {count * dtype.itemsize} data bytes, "
                         f"found {len(raw) - header}")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims)


def write_idx(array: np.ndarray, path):
    array = np.asarray(array)
    codes = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}
    code = codes.get(array.dtype.newbyteorder("="))
    if code is None:
        raise InvalidArgument(f"dtype {array.dtype} has no IDX code")
    header = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    body = array.astype(np.dtype(_IDX_TYPES[code])).tobytes()
    data = header + body
    if str(path).endswith(".gz"):
        data = gzip.compress(data)
    with open(path, "wb") as fh:
        fh.write(data)


def load_idx(images_path, labels_path=None) -> Dataset:
    """Image file (magic 0x00000803) flattened per sample and scaled to [0, 1]."""
    images = read_idx(images_path)
    if images.dtype != np.uint8 or images.ndim != 3:
        raise ParseError(f"{images_path}: expected an unsigned-byte image file (magic 0x00000803)")
    X = images.reshape(images.shape[0], -1).astype(float) / 255.0
    if labels_path is None:
        return Dataset(X)
    labels = read_idx(labels_path)
    if labels.ndim != 1 or labels.dtype != np.uint8:
        raise ParseError(f"{labels_path}: expected an unsigned-byte label file (magic 0x00000801)")
    if len(labels) != len(X):
        raise ParseError(f"{labels_path}: {len(labels)} labels for {len(X)} images")
    return Dataset(X, labels.astype(np.int64))


# -- target densities -------------------------------------------------------------

class DensityTarget:
    """Unnormalised 2-D density ``u`` with analytic ``log u`` and its gradient.

    ``log_z`` is ``log of the integral of u``, so ``E_q[log q - log u] + log_z``
    is the KL divergence from ``q`` to the normalised target.
    """

    def __init__(self, name, log_u, grad_log_u, log_z=None):
        self.name = name
        self._log_u = log_u
        self._grad = grad_log_u
        self._log_z = log_z

    def log_u(self, X) -> np.ndarray:
        return self._log_u(np.atleast_2d(np.asarray(X, dtype=float)))

    def grad_log_u(self, X) -> np.ndarray:
        return self._grad(np.atleast_2d(np.asarray(X, dtype=float)))

    def __call__(self, X) -> np.ndarray:
        return np.exp(self.log_u(X))

    @property
    def log_z(self) -> float:
        if self._log_z is None:
            lim, n = 7.0, 1401
            g = np.linspace(-lim, lim, n)
            xx, yy = np.meshgrid(g, g, indexing="ij")
            vals = self(np.stack([xx.ravel(), yy.ravel()], axis=1)).reshape(n, n)
            self._log_z = float(np.log(trapezoid(trapezoid(vals, g, axis=1), g)))
        return self._log_z


def _gauss_log(X):
    return -0.5 * np.sum(X * X, axis=1) - math.log(2.0 * math.pi)


MIXTURE2_MEAN = 1.5
MIXTURE2_SD = 0.6


def _mixture_parts(X):
    shift = np.array([MIXTURE2_MEAN, 0.0])
    var = MIXTURE2_SD ** 2
    la = -0.5 * np.sum((X - shift) ** 2, axis=1) / var
    lb = -0.5 * np.sum((X + shift) ** 2, axis=1) / var
    return la, lb, shift, var


def _mixture_log(X):
    la, lb, _, var = _mixture_parts(X)
    return np.logaddexp(la, lb) + math.log(0.5) - math.log(2.0 * math.pi * var)


def _mixture_grad(X):
    la, lb, shift, var = _mixture_parts(X)
    wa = 1.0 / (1.0 + np.exp(lb - la))
    return (-(X - shift) * wa[:, None] - (X + shift) * (1.0 - wa)[:, None]) / var


# ring of radius 2 and width 0.4 weighted by two bumps at x1 = +-2 (width 0.6)
def _ring_parts(X):
    r = np.sqrt(np.sum(X * X, axis=1))
    a = -0.5 * ((X[:, 0] - 2.0) / 0.6) ** 2
    b = -0.5 * ((X[:, 0] + 2.0) / 0.6) ** 2
    return r, a, b


def _ring_log(X):
    r, a, b = _ring_parts(X)
    return -0.5 * ((r - 2.0) / 0.4) ** 2 + np.logaddexp(a, b)


def _ring_grad(X):
    r, a, b = _ring_parts(X)
    radial = -((r - 2.0) / 0.16) / np.maximum(r, 1e-12)
    g = radial[:, None] * X
    wa = 1.0 / (1.0 + np.exp(b - a))
    g[:, 0] += -wa * (X[:, 0] - 2.0) / 0.36 - (1.0 - wa) * (X[:, 0] + 2.0) / 0.36
    return g


DENSITY_NAMES = ("fig9-ring-like", "gaussian", "mixture2")


def density_target(name: str) -> DensityTarget:
    if name == "gaussian":
        return DensityTarget(name, _gauss_log, lambda X: -X, log_z=0.0)
    if name == "mixture2":
        return DensityTarget(name, _mixture_log, _mixture_grad, log_z=0.0)
    if name == "fig9-ring-like":
        return DensityTarget(name, _ring_log, _ring_grad)
    raise InvalidArgument(f"unknown density target {name!r}; choose from {', '.join(DENSITY_NAMES)}")
