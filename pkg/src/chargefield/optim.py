"""Fitting a ChargeSet to a target surface with Adam.

The objective is

    L = mean_x (phi(x) - tau)^2  +  lambda * mean_i d_min(s_i, Y)^2

where ``x`` runs over a minibatch of surface samples and ``Y`` is a fixed set
of interior points.  The learning rate follows a cosine schedule from
``lr_start`` to ``lr_end``.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .field import ChargeSet, FieldGradient, squared_residual
from .mesh import SpatialIndex, TriangleMesh, sample_interior, sample_surface

log = logging.getLogger(__name__)

__all__ = [
    "FitConfig",
    "FitReport",
    "DivergenceError",
    "Adam",
    "init_charges",
    "loss_bc",
    "loss_cr",
    "total_loss",
    "cosine_lr",
    "fit",
]

SIGMA_FLOOR = 1e-3


class DivergenceError(RuntimeError):
    """Raised when the loss stops being finite; ``snapshot`` holds the state."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


@dataclass
class FitConfig:
    num_charges: int = 1000
    steps: int = 60_000
    lr_start: float = 1e-3
    lr_end: float = 1e-7
    lambda_cr: float = 2e-2
    tau: float = 1.0
    surface_pool: int = 250_000
    batch: int = 16_000
    interior_pool: int = 10_000
    init_q: float = 1e-7
    init_sigma_std: float = 0.05
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    log_every: int = 100

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.num_charges < 1:
            raise ValueError("num_charges must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 1 <= self.batch <= self.surface_pool:
            raise ValueError("need 1 <= batch <= surface_pool")
        if self.lambda_cr < 0:
            raise ValueError("lambda_cr must be >= 0")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.interior_pool < 1:
            raise ValueError("interior_pool must be >= 1")
        if not self.init_q > 0 or not self.init_sigma_std > 0:
            raise ValueError("init_q and init_sigma_std must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown FitConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FitReport:
    config: dict
    seed: int
    history: list = field(default_factory=list)
    wall_clock: float = 0.0
    final_stats: dict = field(default_factory=dict)
    # per-step values, kept in memory only
    trace_total: np.ndarray | None = field(default=None, repr=False)
    trace_bc: np.ndarray | None = field(default=None, repr=False)
    trace_cr: np.ndarray | None = field(default=None, repr=False)

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "wall_clock": self.wall_clock,
            "config": self.config,
            "final_stats": self.final_stats,
            "history": self.history,
        }
        return json.dumps(doc, indent=2)


def init_charges(config: FitConfig) -> ChargeSet:
    """Random start: uniform locations in [-0.5, 0.5]^3, ``Q = init_q``,
    ``sigma = max(|N(0, init_sigma_std)|, 1e-3)``."""
    rng = np.random.default_rng(config.seed)
    k = config.num_charges
    loc = rng.uniform(-0.5, 0.5, size=(k, 3))
    sigma = np.maximum(np.abs(rng.normal(0.0, config.init_sigma_std, size=k)), SIGMA_FLOOR)
    return ChargeSet(loc, np.full(k, math.log(config.init_q)), np.log(sigma), 1.0, config.tau)


def loss_bc(charge_set: ChargeSet, points) -> tuple[float, FieldGradient]:
    """Mean squared deviation of the potential from the iso-value on ``points``."""
    pts = getattr(points, "positions", points)
    n = len(pts)
    if n == 0:
        raise ValueError("empty batch")
    phi, grad = squared_residual(charge_set, pts, charge_set.iso_value)
    value = float(np.sum((phi - charge_set.iso_value) ** 2) / n)
    return value, grad * (1.0 / n)


def loss_cr(charge_set: ChargeSet, interior: SpatialIndex) -> tuple[float, FieldGradient]:
    """Mean squared distance from each charge to its nearest interior sample."""
    k = len(charge_set)
    d, idx = interior.query(charge_set.locations)
    grad = FieldGradient.zeros(k)
    grad.d_location = 2.0 * (charge_set.locations - interior.points[idx]) / k
    return float(np.sum(d * d) / k), grad


def total_loss(charge_set: ChargeSet, batch, interior: SpatialIndex, lambda_cr: float):
    """``L_bc + lambda * L_cr``; returns ``(value, grads, (L_bc, L_cr))``."""
    bc, g_bc = loss_bc(charge_set, batch)
    if lambda_cr == 0.0:
        return bc, g_bc, (bc, loss_cr(charge_set, interior)[0])
    cr, g_cr = loss_cr(charge_set, interior)
    return bc + lambda_cr * cr, g_bc + g_cr * lambda_cr, (bc, cr)


def cosine_lr(step: int, config: FitConfig) -> float:
    if not 0 <= step < config.steps:
        raise ValueError(f"step {step} outside [0, {config.steps})")
    if config.steps == 1:
        return config.lr_start
    frac = step / (config.steps - 1)
    return config.lr_end + 0.5 * (config.lr_start - config.lr_end) * (1.0 + math.cos(math.pi * frac))


class Adam:
    """Adam with bias-corrected moments on a flat parameter vector."""

    def __init__(self, size: int, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _pack(cs: ChargeSet) -> np.ndarray:
    return np.concatenate([cs.locations.ravel(), cs.log_q, cs.log_sigma])


def _unpack(vec: np.ndarray, like: ChargeSet) -> ChargeSet:
    k = len(like)
    return ChargeSet(vec[:3 * k].reshape(k, 3), vec[3 * k:4 * k], vec[4 * k:],
                     like.permittivity, like.iso_value)


def _param_stats(cs: ChargeSet) -> dict:
    q, s = cs.q, cs.sigma
    qs = lambda a: {p: float(np.percentile(a, p)) for p in (0, 5, 50, 95, 100)}
    return {"num_charges": len(cs), "q": qs(q), "sigma": qs(s), "q_total": float(q.sum())}


def fit(
    target: TriangleMesh,
    config: FitConfig,
    progress: Callable[[dict], None] | None = None,
    *,
    initial: ChargeSet | None = None,
    checkpoint_dir=None,
    checkpoint_every: int = 10_000,
) -> tuple[ChargeSet, FitReport]:
    """Optimise charges so that the iso-surface ``phi = tau`` matches ``target``.

    ``target`` should already be normalised to the unit cube and watertight.
    ``initial`` overrides the random initialisation. ``progress`` receives a
    dict every ``config.log_every`` steps and at the last step.
    """
    config.validate()
    t0 = time.perf_counter()
    cs = initial.copy() if initial is not None else init_charges(config)
    cs.iso_value = config.tau
    k = len(cs)

    surface = sample_surface(target, config.surface_pool, seed=config.seed + 1).positions
    interior = SpatialIndex(sample_interior(target, config.interior_pool, seed=config.seed + 2).positions)
    rng = np.random.default_rng(config.seed + 3)

    params = _pack(cs)
    adam = Adam(params.size, config.adam_beta1, config.adam_beta2, config.adam_eps)
    trace = np.zeros((3, config.steps))
    history = []
    perm = rng.permutation(len(surface))
    pos = 0
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)

    for step in range(config.steps):
        if pos + config.batch > len(surface):
            perm = rng.permutation(len(surface))
            pos = 0
        batch = surface[np.sort(perm[pos:pos + config.batch])]
        pos += config.batch

        value, grads, (bc, cr) = total_loss(cs, batch, interior, config.lambda_cr)
        if not math.isfinite(value) or not np.all(np.isfinite(grads.flat())):
            snap = {"step": step, "loss": value, "l_bc": bc, "l_cr": cr, "stats": _param_stats(cs)}
            raise DivergenceError(f"non-finite loss at step {step}", snap)
        trace[:, step] = value, bc, cr
        lr = cosine_lr(step, config)
        flat = np.concatenate([grads.d_location.ravel(), grads.d_magnitude_raw, grads.d_spread_raw])
        params = adam.step(params, flat, lr)
        cs = _unpack(params, cs)

        last = step == config.steps - 1
        if step % config.log_every == 0 or last:
            rec = {"step": step, "lr": lr, "loss": value, "l_bc": bc, "l_cr": cr}
            history.append(rec)
            if progress is not None:
                progress(rec)
        if ckpt is not None and checkpoint_every > 0 and (step + 1) % checkpoint_every == 0:
            cs.save(ckpt / f"charges_{step + 1:07d}.json")

    report = FitReport(
        config=config.to_dict(),
        seed=config.seed,
        history=history,
        wall_clock=time.perf_counter() - t0,
        final_stats=_param_stats(cs),
        trace_total=trace[0],
        trace_bc=trace[1],
        trace_cr=trace[2],
    )
    return cs, report
