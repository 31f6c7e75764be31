"""Closed-form potential of a superposition of isotropic Gaussian charges.

A single charge with location ``s``, total charge ``Q`` and spread ``sigma``
has density

    rho(x) = Q / (sigma^3 (2 pi)^{3/2}) exp(-|x - s|^2 / (2 sigma^2))

and, in a medium of permittivity ``eps0``, potential

    phi(x) = Q / (4 pi eps0 r) erf(r / (sqrt(2) sigma)),   r = |x - s|.

``Q`` and ``sigma`` are stored through their logarithms so that any finite
optimisation parameter maps to a strictly positive charge.

Batch evaluation runs in numba kernels parallelised over query points.  Every
per-point value is computed by the same sequential loop over charges, and the
cross-point reductions used for parameter gradients are summed over fixed-size
blocks in block order, so results are bit-identical for any thread count.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numba
import numpy as np
from numba import njit, prange
from scipy import special

__all__ = [
    "SWITCH_RADIUS",
    "GaussianCharge",
    "ChargeSet",
    "FieldGradient",
    "erf",
    "eval_density",
    "eval_potential",
    "eval_field",
    "eval_field_gradient_x",
    "eval_param_gradients",
    "eval_density_total",
    "squared_residual",
    "set_threads",
]

#: Radius (in units of sigma) below which the potential uses its Taylor series.
SWITCH_RADIUS = 1e-6

# Below this value of z = r / (sqrt(2) sigma) the radial derivative uses a
# series; the closed form loses digits to cancellation there.
_GRAD_SERIES_Z = 0.1
_BLOCK = 256
# erf(z) rounds to exactly 1.0 in double precision well before this point.
_ERF_ONE_Z = 6.0

_FOUR_PI = 4.0 * math.pi
_SQRT2 = math.sqrt(2.0)
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)
_NORM3 = (2.0 * math.pi) ** 1.5


def set_threads(n: int | None) -> int:
    """Set the numba worker count; ``0`` or ``None`` means all cores.

    Falls back to ``EISR_THREADS`` when ``n`` is None. Returns the count used.
    """
    if n is None:
        env = os.environ.get("EISR_THREADS")
        n = int(env) if env else 0
    if n <= 0:
        n = numba.config.NUMBA_NUM_THREADS
    n = min(n, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(n)
    return n


def erf(z):
    """Gaussian error function, ``2/sqrt(pi) * int_0^z exp(-t^2) dt``."""
    return special.erf(z)


@dataclass(frozen=True)
class GaussianCharge:
    """One Gaussian charge; ``magnitude_raw = log Q`` and ``spread_raw = log sigma``."""

    location: np.ndarray
    magnitude_raw: float
    spread_raw: float

    def __post_init__(self):
        loc = np.asarray(self.location, dtype=np.float64).reshape(3)
        object.__setattr__(self, "location", loc)
        object.__setattr__(self, "magnitude_raw", float(self.magnitude_raw))
        object.__setattr__(self, "spread_raw", float(self.spread_raw))
        if not (np.all(np.isfinite(loc)) and math.isfinite(self.magnitude_raw)
                and math.isfinite(self.spread_raw)):
            raise ValueError("charge parameters must be finite")

    @property
    def q(self) -> float:
        return math.exp(self.magnitude_raw)

    @property
    def sigma(self) -> float:
        return math.exp(self.spread_raw)

    @classmethod
    def from_physical(cls, location, q: float, sigma: float) -> "GaussianCharge":
        if q <= 0 or sigma <= 0:
            raise ValueError("q and sigma must be positive")
        return cls(location, math.log(q), math.log(sigma))


@dataclass
class ChargeSet:
    """Ordered collection of K Gaussian charges plus ``eps0`` and the iso-value."""

    locations: np.ndarray
    log_q: np.ndarray
    log_sigma: np.ndarray
    permittivity: float = 1.0
    iso_value: float = 1.0

    def __post_init__(self):
        self.locations = np.ascontiguousarray(self.locations, dtype=np.float64).reshape(-1, 3)
        k = len(self.locations)
        self.log_q = np.ascontiguousarray(self.log_q, dtype=np.float64).reshape(k)
        self.log_sigma = np.ascontiguousarray(self.log_sigma, dtype=np.float64).reshape(k)
        self.permittivity = float(self.permittivity)
        self.iso_value = float(self.iso_value)
        if k < 1:
            raise ValueError("a ChargeSet needs at least one charge")
        if not self.permittivity > 0 or not self.iso_value > 0:
            raise ValueError("permittivity and iso_value must be positive")
        for name in ("locations", "log_q", "log_sigma"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite entries in {name}")

    def __len__(self) -> int:
        return len(self.locations)

    @property
    def q(self) -> np.ndarray:
        return np.exp(self.log_q)

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    @property
    def charges(self) -> list[GaussianCharge]:
        return [GaussianCharge(s, a, b) for s, a, b in zip(self.locations, self.log_q, self.log_sigma)]

    @classmethod
    def from_charges(cls, charges: Iterable[GaussianCharge], permittivity=1.0, iso_value=1.0):
        charges = list(charges)
        return cls(
            np.array([c.location for c in charges]).reshape(-1, 3),
            np.array([c.magnitude_raw for c in charges]),
            np.array([c.spread_raw for c in charges]),
            permittivity,
            iso_value,
        )

    @classmethod
    def from_physical(cls, locations, q, sigma, permittivity=1.0, iso_value=1.0):
        locations = np.asarray(locations, dtype=np.float64).reshape(-1, 3)
        k = len(locations)
        q = np.broadcast_to(np.asarray(q, dtype=np.float64), (k,))
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (k,))
        if np.any(q <= 0) or np.any(sigma <= 0):
            raise ValueError("q and sigma must be positive")
        return cls(locations, np.log(q), np.log(sigma), permittivity, iso_value)

    def concat(self, other: "ChargeSet") -> "ChargeSet":
        return ChargeSet(
            np.vstack([self.locations, other.locations]),
            np.concatenate([self.log_q, other.log_q]),
            np.concatenate([self.log_sigma, other.log_sigma]),
            self.permittivity,
            self.iso_value,
        )

    def copy(self) -> "ChargeSet":
        return ChargeSet(self.locations.copy(), self.log_q.copy(), self.log_sigma.copy(),
                         self.permittivity, self.iso_value)

    def translated(self, offset) -> "ChargeSet":
        out = self.copy()
        out.locations = out.locations + np.asarray(offset, dtype=np.float64)
        return out

    # -- serialisation -----------------------------------------------------

    def to_json(self) -> str:
        """Serialise with a fixed field order and 17 significant digits per number."""

        def num(v):
            v = float(v)
            if not math.isfinite(v):
                raise ValueError("cannot serialise non-finite value")
            return format(v, ".16e")

        rows = []
        for s, a, b in zip(self.locations, self.log_q, self.log_sigma):
            rows.append(
                '    {"s": [%s, %s, %s], "log_q": %s, "log_sigma": %s}'
                % (num(s[0]), num(s[1]), num(s[2]), num(a), num(b))
            )
        return (
            "{\n"
            '  "version": 1,\n'
            f'  "permittivity": {num(self.permittivity)},\n'
            f'  "iso_value": {num(self.iso_value)},\n'
            '  "charges": [\n' + ",\n".join(rows) + "\n  ]\n}\n"
        )

    @classmethod
    def from_json(cls, text: str) -> "ChargeSet":
        doc = json.loads(text)
        if doc.get("version") != 1:
            raise ValueError(f"unsupported ChargeSet version {doc.get('version')!r}")
        charges = doc["charges"]
        return cls(
            np.array([c["s"] for c in charges], dtype=np.float64).reshape(-1, 3),
            np.array([c["log_q"] for c in charges], dtype=np.float64),
            np.array([c["log_sigma"] for c in charges], dtype=np.float64),
            doc["permittivity"],
            doc["iso_value"],
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ChargeSet":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass
class FieldGradient:
    """Per-charge derivatives with respect to the raw (optimised) parameters."""

    d_location: np.ndarray
    d_magnitude_raw: np.ndarray
    d_spread_raw: np.ndarray

    @classmethod
    def zeros(cls, k: int) -> "FieldGradient":
        return cls(np.zeros((k, 3)), np.zeros(k), np.zeros(k))

    def __add__(self, other: "FieldGradient") -> "FieldGradient":
        return FieldGradient(self.d_location + other.d_location,
                             self.d_magnitude_raw + other.d_magnitude_raw,
                             self.d_spread_raw + other.d_spread_raw)

    def __mul__(self, c: float) -> "FieldGradient":
        return FieldGradient(self.d_location * c, self.d_magnitude_raw * c, self.d_spread_raw * c)

    __rmul__ = __mul__

    def flat(self) -> np.ndarray:
        return np.concatenate([self.d_location.ravel(), self.d_magnitude_raw, self.d_spread_raw])


# -- numba kernels -------------------------------------------------------------
#
# Per-charge constants (rows of the ``consts`` array):
#   0  Q / (4 pi eps0)
#   1  1 / (sqrt(2) sigma)
#   2  Q / (4 pi eps0) / (2 sqrt(2) sigma^3)      radial-gradient prefactor
#   3  Q / (4 pi eps0) sqrt(2/pi) / sigma          potential at the centre
#   4  sigma


def _constants(cs: "ChargeSet") -> np.ndarray:
    q = cs.q
    sigma = cs.sigma
    qc = q / (_FOUR_PI * cs.permittivity)
    return np.ascontiguousarray(np.stack([
        qc,
        1.0 / (_SQRT2 * sigma),
        qc / (2.0 * _SQRT2 * sigma ** 3),
        qc * _SQRT_2_OVER_PI / sigma,
        sigma,
    ]))


@njit(cache=True, inline="always")
def _erf(z):
    if z >= _ERF_ONE_Z:
        return 1.0
    return math.erf(z)


@njit(cache=True, inline="always")
def _potential(r, erf_z, consts, i):
    s = consts[4, i]
    if r < SWITCH_RADIUS * s:
        return consts[3, i] * (1.0 - r * r / (6.0 * s * s))
    return consts[0, i] * erf_z / r


@njit(cache=True, inline="always")
def _radial_factor(z, erf_z, exp_mz2):
    """(2/sqrt(pi) z exp(-z^2) - erf(z)) / z^3, finite at z = 0."""
    if z < _GRAD_SERIES_Z:
        z2 = z * z
        # coefficients (-1)^n 2n / (n! (2n+1)) for n = 1..6
        s = -2.0 / 3.0 + z2 * (2.0 / 5.0 + z2 * (-1.0 / 7.0 + z2 * (1.0 / 27.0
            + z2 * (-1.0 / 132.0 + z2 * (1.0 / 780.0)))))
        return _TWO_OVER_SQRT_PI * s
    return (_TWO_OVER_SQRT_PI * z * exp_mz2 - erf_z) / (z * z * z)


@njit(cache=True, inline="always")
def _accumulate(acc, i, u, d0, d1, d2, r, erf_z, consts):
    """Add ``u * d phi_i / d(s, log Q, log sigma)`` into column ``i`` of ``acc``."""
    z = r * consts[1, i]
    e = math.exp(-z * z)
    c = u * consts[2, i] * _radial_factor(z, erf_z, e)
    acc[0, i] -= c * d0
    acc[1, i] -= c * d1
    acc[2, i] -= c * d2
    acc[3, i] += u * _potential(r, erf_z, consts, i)
    acc[4, i] -= u * consts[3, i] * e


@njit(cache=True)
def _sum_blocks(partial):
    out = np.zeros(partial.shape[1:])
    for b in range(partial.shape[0]):
        out += partial[b]
    return out


@njit(parallel=True, cache=True)
def _field_kernel(points, loc, consts):
    n = points.shape[0]
    k = loc.shape[0]
    out = np.empty(n)
    for p in prange(n):
        x0 = points[p, 0]
        x1 = points[p, 1]
        x2 = points[p, 2]
        acc = 0.0
        for i in range(k):
            d0 = x0 - loc[i, 0]
            d1 = x1 - loc[i, 1]
            d2 = x2 - loc[i, 2]
            r = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            acc += _potential(r, _erf(r * consts[1, i]), consts, i)
        out[p] = acc
    return out


@njit(parallel=True, cache=True)
def _density_kernel(points, loc, q, sigma):
    n = points.shape[0]
    k = loc.shape[0]
    out = np.empty(n)
    for p in prange(n):
        acc = 0.0
        for i in range(k):
            d0 = points[p, 0] - loc[i, 0]
            d1 = points[p, 1] - loc[i, 1]
            d2 = points[p, 2] - loc[i, 2]
            s = sigma[i]
            acc += q[i] / (s * s * s * _NORM3) * math.exp(-(d0 * d0 + d1 * d1 + d2 * d2) / (2.0 * s * s))
        out[p] = acc
    return out


@njit(parallel=True, cache=True)
def _grad_x_kernel(points, loc, consts):
    n = points.shape[0]
    k = loc.shape[0]
    out = np.zeros((n, 3))
    for p in prange(n):
        g0 = 0.0
        g1 = 0.0
        g2 = 0.0
        for i in range(k):
            d0 = points[p, 0] - loc[i, 0]
            d1 = points[p, 1] - loc[i, 1]
            d2 = points[p, 2] - loc[i, 2]
            r = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            z = r * consts[1, i]
            # d phi / dr * (x - s) / r  =  Q h(z) / (4 pi eps0 2 sqrt(2) sigma^3) * (x - s)
            c = consts[2, i] * _radial_factor(z, _erf(z), math.exp(-z * z))
            g0 += c * d0
            g1 += c * d1
            g2 += c * d2
        out[p, 0] = g0
        out[p, 1] = g1
        out[p, 2] = g2
    return out


@njit(parallel=True, cache=True)
def _param_grad_kernel(points, upstream, loc, consts):
    n = points.shape[0]
    k = loc.shape[0]
    nblocks = (n + _BLOCK - 1) // _BLOCK
    partial = np.zeros((nblocks, 5, k))
    for b in prange(nblocks):
        acc = partial[b]
        for p in range(b * _BLOCK, min(b * _BLOCK + _BLOCK, n)):
            u = upstream[p]
            if u == 0.0:
                continue
            for i in range(k):
                d0 = points[p, 0] - loc[i, 0]
                d1 = points[p, 1] - loc[i, 1]
                d2 = points[p, 2] - loc[i, 2]
                r = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
                _accumulate(acc, i, u, d0, d1, d2, r, _erf(r * consts[1, i]), consts)
    return _sum_blocks(partial)


@njit(parallel=True, cache=True)
def _squared_residual_kernel(points, tau, loc, consts):
    """Fused forward/backward pass for ``sum_p (phi(x_p) - tau)^2``.

    Returns the per-point potential and ``sum_p 2 (phi_p - tau) d phi_p / d theta``
    as a ``(5, K)`` array.
    """
    n = points.shape[0]
    k = loc.shape[0]
    nblocks = (n + _BLOCK - 1) // _BLOCK
    partial = np.zeros((nblocks, 5, k))
    phi_out = np.empty(n)
    for b in prange(nblocks):
        acc = partial[b]
        rbuf = np.empty(k)
        ebuf = np.empty(k)
        for p in range(b * _BLOCK, min(b * _BLOCK + _BLOCK, n)):
            x0 = points[p, 0]
            x1 = points[p, 1]
            x2 = points[p, 2]
            total = 0.0
            for i in range(k):
                d0 = x0 - loc[i, 0]
                d1 = x1 - loc[i, 1]
                d2 = x2 - loc[i, 2]
                r = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
                erf_z = _erf(r * consts[1, i])
                rbuf[i] = r
                ebuf[i] = erf_z
                total += _potential(r, erf_z, consts, i)
            phi_out[p] = total
            u = 2.0 * (total - tau)
            if u == 0.0:
                continue
            for i in range(k):
                _accumulate(acc, i, u, x0 - loc[i, 0], x1 - loc[i, 1], x2 - loc[i, 2],
                            rbuf[i], ebuf[i], consts)
    return phi_out, _sum_blocks(partial)


def squared_residual(charge_set: "ChargeSet", x, tau: float):
    """Potential at ``x`` and the gradient of ``sum (phi - tau)^2``, in one pass."""
    pts, _ = _points(x)
    cs = charge_set
    phi, g = _squared_residual_kernel(pts, float(tau), cs.locations, _constants(cs))
    return phi, FieldGradient(g[:3].T.copy(), g[3].copy(), g[4].copy())


# -- public evaluation API -----------------------------------------------------


def _points(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.ascontiguousarray(arr.reshape(-1, 3))
    return arr, single


def _unwrap(values, single):
    return values[0] if single else values


def _as_set(charge: GaussianCharge, eps0: float = 1.0) -> ChargeSet:
    return ChargeSet(charge.location[None], [charge.magnitude_raw], [charge.spread_raw], eps0)


def eval_density(charge: GaussianCharge, x):
    """Charge density of one Gaussian charge at ``x`` (shape ``(3,)`` or ``(N, 3)``)."""
    pts, single = _points(x)
    cs = _as_set(charge)
    return _unwrap(_density_kernel(pts, cs.locations, cs.q, cs.sigma), single)


def eval_potential(charge: GaussianCharge, x, eps0: float = 1.0):
    """Potential of one Gaussian charge; series limit below ``SWITCH_RADIUS * sigma``."""
    return eval_field(_as_set(charge, eps0), x)


def eval_field(charge_set: ChargeSet, x):
    """Total potential, summed over charges in list order."""
    pts, single = _points(x)
    cs = charge_set
    vals = _field_kernel(pts, cs.locations, _constants(cs))
    return _unwrap(vals, single)


def eval_field_gradient_x(charge_set: ChargeSet, x):
    """Spatial gradient of the total potential."""
    pts, single = _points(x)
    cs = charge_set
    g = _grad_x_kernel(pts, cs.locations, _constants(cs))
    return _unwrap(g, single)


def eval_param_gradients(charge_set: ChargeSet, x, upstream) -> FieldGradient:
    """``sum_p upstream_p * d phi(x_p) / d(raw parameters)``.

    ``x`` may be one point with a scalar ``upstream`` or ``N`` points with
    ``N`` upstream weights; contributions are summed over points.
    """
    pts, _ = _points(x)
    up = np.ascontiguousarray(np.broadcast_to(np.asarray(upstream, dtype=np.float64), (len(pts),)))
    cs = charge_set
    g = _param_grad_kernel(pts, up, cs.locations, _constants(cs))
    return FieldGradient(g[:3].T.copy(), g[3].copy(), g[4].copy())


def eval_density_total(charge_set: ChargeSet, x):
    """Total charge density, the right-hand side of the Poisson equation times ``-eps0``."""
    pts, single = _points(x)
    cs = charge_set
    return _unwrap(_density_kernel(pts, cs.locations, cs.q, cs.sigma), single)
