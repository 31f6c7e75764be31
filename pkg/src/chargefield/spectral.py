"""Fourier magnitude of a single Gaussian charge and post-fit charge statistics.

Frequencies are ordinary (cycles per unit length): the transform kernel is
``exp(-2 pi i w.x)``.  A DFT index vector ``k`` on a cube of side ``extent``
maps to ``|w| = |k| / extent``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from .field import ChargeSet, eval_field
from .mesh import SpatialIndex

log = logging.getLogger(__name__)

__all__ = [
    "SpectralProfile",
    "ChargeStats",
    "SpectralGuardError",
    "analytic_spectrum",
    "numeric_spectrum",
    "band_energy_share",
    "charge_stats",
    "MIN_SAMPLES_PER_SIGMA",
]

MIN_SAMPLES_PER_SIGMA = 4.0

CONVENTION = (
    "ordinary frequency, kernel exp(-2*pi*i*w.x); |w| = |k|/extent; "
    "continuous magnitude = |DFT| * dx^3; bin value = median over the shell; "
    "normalized_ratio = ratio * 4*pi*eps / sigma^2"
)


class SpectralGuardError(ValueError):
    """The grid is too coarse to resolve the charge."""


def analytic_spectrum(q: float, sigma: float, freqs) -> np.ndarray:
    """``Q / (sigma^2 pi w^2) * exp(-2 sigma^2 pi^2 w^2)`` per frequency.

    The prefactor is the published one. The plain continuous transform of the
    potential carries ``1 / (4 pi^2 eps w^2)`` instead, which differs by the
    constant ``sigma^2 / (4 pi eps)``; shapes in ``w`` are identical.
    """
    if not q > 0 or not sigma > 0:
        raise ValueError("q and sigma must be positive")
    w = np.asarray(freqs, dtype=np.float64)
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise ValueError("frequencies must be finite and > 0 (the formula is singular at 0)")
    w2 = w * w
    return q / (sigma * sigma * math.pi * w2) * np.exp(-2.0 * sigma * sigma * math.pi ** 2 * w2)


@dataclass
class SpectralProfile:
    frequencies: np.ndarray
    analytic_magnitudes: np.ndarray
    numeric_magnitudes: np.ndarray
    counts: np.ndarray
    q: float
    sigma: float
    resolution: int
    extent: float
    charge_index: int = 0
    permittivity: float = 1.0

    def __post_init__(self):
        n = len(self.frequencies)
        if not (len(self.analytic_magnitudes) == len(self.numeric_magnitudes) == len(self.counts) == n):
            raise ValueError("profile arrays must have equal length")
        if n and (self.frequencies[0] <= 0 or np.any(np.diff(self.frequencies) <= 0)):
            raise ValueError("frequencies must be positive and strictly increasing")

    @property
    def ratio(self) -> np.ndarray:
        return self.numeric_magnitudes / self.analytic_magnitudes

    def mid_band(self) -> slice:
        """Bins left after dropping the lowest two and the highest quarter."""
        n = len(self.frequencies)
        return slice(2, n - int(math.ceil(0.25 * n)))

    @property
    def scale(self) -> float:
        """Constant between the plain continuous transform and the published prefactor."""
        return self.sigma * self.sigma / (4.0 * math.pi * self.permittivity)

    @property
    def normalized_ratio(self) -> np.ndarray:
        return self.ratio / self.scale

    def to_dict(self) -> dict:
        return {
            "q": self.q,
            "sigma": self.sigma,
            "resolution": self.resolution,
            "extent": self.extent,
            "charge_index": self.charge_index,
            "permittivity": self.permittivity,
            "convention": CONVENTION,
            "scale": self.scale,
            "mid_band": [self.mid_band().start, self.mid_band().stop],
            "frequencies": self.frequencies.tolist(),
            "analytic_magnitudes": self.analytic_magnitudes.tolist(),
            "numeric_magnitudes": self.numeric_magnitudes.tolist(),
            "counts": self.counts.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _merge_small(groups: list[np.ndarray], minimum: int) -> list[np.ndarray]:
    out: list[np.ndarray] = []
    pending = None
    for g in groups:
        pending = g if pending is None else np.concatenate([pending, g])
        if len(pending) >= minimum:
            out.append(pending)
            pending = None
    if pending is not None and len(pending):
        if out:
            out[-1] = np.concatenate([out[-1], pending])
        else:
            out.append(pending)
    return out


def numeric_spectrum(charge_set: ChargeSet, resolution: int = 64, extent: float = 2.0,
                     charge_index: int | None = None) -> SpectralProfile:
    """Radially binned DFT magnitude of the sampled potential.

    The field is sampled on a periodic ``resolution^3`` lattice of side
    ``extent`` centred on the analysed charge (the largest-Q one unless
    ``charge_index`` is given).  Only shells with ``|k| <= resolution / 2``
    are used, so every bin is a complete sphere.  Shells with fewer than four
    lattice points are merged upward.

    Raises :class:`SpectralGuardError` when fewer than four lattice samples
    fall inside the ``[-sigma, sigma]`` window of the analysed charge.
    """
    n = int(resolution)
    if n < 8 or n & (n - 1):
        raise ValueError("resolution must be a power of two >= 8")
    if not extent > 0:
        raise ValueError("extent must be positive")
    if len(charge_set) == 0:
        raise ValueError("empty charge set")
    idx = int(np.argmax(charge_set.q)) if charge_index is None else int(charge_index)
    if len(charge_set) > 1:
        log.warning("spectrum of a %d-charge set compared against charge %d alone", len(charge_set), idx)
    q = float(charge_set.q[idx])
    sigma = float(charge_set.sigma[idx])
    dx = extent / n
    per_sigma = 2.0 * sigma / dx
    if per_sigma < MIN_SAMPLES_PER_SIGMA:
        raise SpectralGuardError(
            f"sigma={sigma:g} spans {per_sigma:.2f} samples at spacing {dx:g}; "
            f"need >= {MIN_SAMPLES_PER_SIGMA:g}"
        )

    axis = (np.arange(n) - n // 2) * dx
    center = charge_set.locations[idx]
    values = np.empty((n, n, n))
    gx, gy = np.meshgrid(center[0] + axis, center[1] + axis, indexing="ij")
    slab = np.empty((n * n, 3))
    slab[:, 0] = gx.ravel()
    slab[:, 1] = gy.ravel()
    for k in range(n):
        slab[:, 2] = center[2] + axis[k]
        values[:, :, k] = eval_field(charge_set, slab).reshape(n, n)
    mag = np.abs(np.fft.fftn(values)).ravel() * dx ** 3

    kk = np.fft.fftfreq(n, 1.0 / n)
    kmag = np.sqrt(kk[:, None, None] ** 2 + kk[None, :, None] ** 2 + kk[None, None, :] ** 2).ravel()
    shell = np.rint(kmag).astype(np.int64)
    order = np.argsort(kmag, kind="stable")
    order = order[(shell[order] >= 1) & (shell[order] <= n // 2)]
    bounds = np.searchsorted(shell[order], np.arange(1, n // 2 + 2))
    groups = [order[a:b] for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    groups = _merge_small(groups, 4)

    freqs = np.array([np.median(kmag[g]) for g in groups]) / extent
    numeric = np.array([np.median(mag[g]) for g in groups])
    counts = np.array([len(g) for g in groups], dtype=np.int64)
    return SpectralProfile(freqs, analytic_spectrum(q, sigma, freqs), numeric, counts, q, sigma, n,
                           float(extent), idx, float(charge_set.permittivity))


def band_energy_share(profile: SpectralProfile, cutoff: float, numeric: bool = True) -> float:
    """Fraction of shell-weighted squared magnitude at frequencies ``>= cutoff``."""
    m = profile.numeric_magnitudes if numeric else profile.analytic_magnitudes
    e = profile.counts * m * m
    total = float(e.sum())
    return float(e[profile.frequencies >= cutoff].sum()) / total if total > 0 else 0.0


_QUANTILES = (5, 25, 50, 75, 95)


def _log_hist(values: np.ndarray, bins: int = 32):
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        lo, hi = lo / 1.01, hi * 1.01
    edges = np.geomspace(lo, hi, bins + 1)
    counts, _ = np.histogram(values, bins=edges)
    return counts, edges


@dataclass
class ChargeStats:
    q: np.ndarray
    sigma: np.ndarray
    distance: np.ndarray | None
    locations: np.ndarray
    q_hist: np.ndarray
    q_edges: np.ndarray
    sigma_hist: np.ndarray
    sigma_edges: np.ndarray

    def quantiles(self) -> dict:
        out = {}
        for name in ("q", "sigma", "distance"):
            a = getattr(self, name)
            out[name] = None if a is None else {str(p): float(np.percentile(a, p)) for p in _QUANTILES}
        return out

    def to_dict(self) -> dict:
        return {
            "num_charges": int(len(self.q)),
            "quantiles": self.quantiles(),
            "q_histogram": {"counts": self.q_hist.tolist(), "edges": self.q_edges.tolist()},
            "sigma_histogram": {"counts": self.sigma_hist.tolist(), "edges": self.sigma_edges.tolist()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "x", "y", "z", "q", "sigma", "distance"])
        for i in range(len(self.q)):
            d = "" if self.distance is None else repr(float(self.distance[i]))
            w.writerow([i, *(repr(float(v)) for v in self.locations[i]),
                        repr(float(self.q[i])), repr(float(self.sigma[i])), d])
        return buf.getvalue()


def charge_stats(charge_set: ChargeSet, surface_index: SpatialIndex | None) -> ChargeStats:
    """Per-charge Q, sigma and distance to the nearest surface sample.

    With ``surface_index=None`` the distances are left out.
    """
    if len(charge_set) == 0:
        raise ValueError("empty charge set")
    q, s = charge_set.q, charge_set.sigma
    d = None if surface_index is None else surface_index.query(charge_set.locations)[0]
    qh, qe = _log_hist(q)
    sh, se = _log_hist(s)
    return ChargeStats(q, s, d, charge_set.locations.copy(), qh, qe, sh, se)
