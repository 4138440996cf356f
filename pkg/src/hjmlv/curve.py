"""Discount and forward curve arithmetic on a uniform time grid.

Forward rates are piecewise constant per grid bucket with continuous
compounding, so every integral of ``f`` becomes a ``dt``-weighted sum:

    B(0, T_j) = exp(-dt * sum_{k<j} f(0, tau_k))
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import GridAlignmentError, ValidationError

_ALIGN_TOL = 1e-9


@dataclass(frozen=True)
class TimeGrid:
    """Uniform lattice ``t_i = i * dt`` for ``i = 0..n_steps``."""

    dt: float = 0.25
    n_steps: int = 200

    def __post_init__(self):
        if not self.dt > 0:
            raise ValidationError(f"dt must be positive, got {self.dt}")
        if self.n_steps < 1:
            raise ValidationError(f"n_steps must be >= 1, got {self.n_steps}")

    @classmethod
    def covering(cls, horizon: float, dt: float = 0.25) -> "TimeGrid":
        return cls(dt=dt, n_steps=cls(dt=dt).steps(horizon))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt

    def steps(self, t: float) -> int:
        """Number of grid steps in ``t``; raises if ``t`` is off-grid."""
        k = t / self.dt
        n = int(round(k))
        if abs(k - n) > _ALIGN_TOL:
            raise GridAlignmentError(f"time {t} is not a multiple of dt={self.dt}")
        return n

    def index(self, t: float) -> int:
        n = self.steps(t)
        if n < 0 or n > self.n_steps:
            raise GridAlignmentError(f"time {t} outside grid [0, {self.horizon}]")
        return n


@dataclass(frozen=True)
class ForwardCurve:
    """Instantaneous forward rates ``f(0, tau_j)``, one per grid bucket."""

    rates: np.ndarray
    dt: float = 0.25

    def __post_init__(self):
        rates = np.asarray(self.rates, dtype=float)
        if rates.ndim != 1:
            raise ValidationError("forward rates must be one-dimensional")
        if not np.all(np.isfinite(rates)):
            bad = np.flatnonzero(~np.isfinite(rates))
            raise ValidationError(f"non-finite forward rate at buckets {bad.tolist()}")
        object.__setattr__(self, "rates", rates)

    def __len__(self):
        return len(self.rates)


@dataclass(frozen=True)
class DiscountCurve:
    """Zero-coupon prices ``B(0, T_j)`` for ``j = 0..n``."""

    discounts: np.ndarray
    dt: float = 0.25

    def __post_init__(self):
        d = np.asarray(self.discounts, dtype=float)
        if d.ndim != 1 or len(d) < 1:
            raise ValidationError("discounts must be a non-empty 1-d sequence")
        if not np.all(d > 0):
            raise ValidationError("discount factors must be strictly positive")
        object.__setattr__(self, "discounts", d)

    def __len__(self):
        return len(self.discounts)

    def at(self, t: float) -> float:
        j = _steps(t, self.dt)
        if j >= len(self.discounts):
            raise GridAlignmentError(f"time {t} beyond curve end {(len(self) - 1) * self.dt}")
        return float(self.discounts[j])


def _steps(t, dt):
    k = t / dt
    n = int(round(k))
    if abs(k - n) > _ALIGN_TOL or n < 0:
        raise GridAlignmentError(f"time {t} is not on the grid with dt={dt}")
    return n


def discounts_from_forwards(fwd: ForwardCurve, grid: TimeGrid) -> DiscountCurve:
    if len(fwd) < grid.n_steps:
        raise ValidationError(
            f"forward curve has {len(fwd)} buckets, grid needs {grid.n_steps}")
    log_b = np.concatenate(([0.0], -grid.dt * np.cumsum(fwd.rates[: grid.n_steps])))
    return DiscountCurve(np.exp(log_b), grid.dt)


def forwards_from_discounts(disc: DiscountCurve) -> ForwardCurve:
    d = disc.discounts / disc.discounts[0]
    return ForwardCurve(-np.diff(np.log(d)) / disc.dt, disc.dt)


def payment_indices(expiry: float, tenor: float, payment_interval: float, dt: float):
    """Grid indices of the expiry and of every fixed-leg payment date."""
    e = _steps(expiry, dt)
    n_pay = tenor / payment_interval
    if abs(n_pay - round(n_pay)) > _ALIGN_TOL or round(n_pay) < 1:
        raise GridAlignmentError(
            f"tenor {tenor} is not a whole number of {payment_interval}y periods")
    step = _steps(payment_interval, dt)
    return e, e + step * np.arange(1, int(round(n_pay)) + 1)


def atm_swap_rate(disc: DiscountCurve, expiry: float, tenor: float,
                  payment_interval: float = 1.0) -> float:
    """Forward par rate ``(B(0,T) - B(0,T_N)) / sum_n B(0,T_n)``."""
    e, pays = payment_indices(expiry, tenor, payment_interval, disc.dt)
    if pays[-1] >= len(disc):
        raise GridAlignmentError(
            f"swap {expiry}+{tenor} ends beyond the curve ({(len(disc) - 1) * disc.dt}y)")
    b = disc.discounts
    return float((b[e] - b[pays[-1]]) / b[pays].sum())


def annuity(disc: DiscountCurve, expiry: float, tenor: float,
            payment_interval: float = 1.0) -> float:
    e, pays = payment_indices(expiry, tenor, payment_interval, disc.dt)
    if pays[-1] >= len(disc):
        raise GridAlignmentError(f"swap {expiry}+{tenor} ends beyond the curve")
    return float(disc.discounts[pays].sum())


def bonds_from_forwards(forwards: np.ndarray, start: int, stop: int, dt: float) -> np.ndarray:
    """``B(t_start, t_m)`` for ``m = start..stop`` from the last-axis forwards.

    ``forwards`` is indexed by absolute maturity bucket; leading axes are paths.
    """
    seg = forwards[..., start:stop]
    zero = np.zeros(seg.shape[:-1] + (1,))
    return np.exp(np.concatenate((zero, -dt * np.cumsum(seg, axis=-1)), axis=-1))


def swap_rate_at_state(state, expiry_index: int, tenor: float,
                       payment_interval: float = 1.0):
    """Par rate of the swap starting at ``expiry_index`` seen from ``state``.

    Bond prices ``B(t_n, .)`` are rebuilt from the state's forward curve;
    the common factor ``B(t_n, T)`` cancels, so only buckets from the swap
    start onward are read.
    """
    dt = state.dt
    if expiry_index < state.step:
        raise GridAlignmentError("swap start precedes the state's time")
    _, pays = payment_indices(expiry_index * dt, tenor, payment_interval, dt)
    fw = np.asarray(state.forwards)
    if pays[-1] > fw.shape[-1]:
        raise GridAlignmentError(
            f"state curve has {fw.shape[-1]} buckets, swap needs {pays[-1]}")
    b = bonds_from_forwards(fw, expiry_index, pays[-1], dt)
    rel = pays - expiry_index
    return (1.0 - b[..., rel[-1]]) / b[..., rel].sum(axis=-1)


def read_curve_csv(path) -> ForwardCurve:
    """Load ``tenor_years,forward_rate`` rows; bucket starts must be uniform."""
    starts, rates = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"tenor_years", "forward_rate"} <= set(reader.fieldnames):
            raise ValidationError(f"{path}: expected header tenor_years,forward_rate")
        for row in reader:
            starts.append(float(row["tenor_years"]))
            rates.append(float(row["forward_rate"]))
    if len(starts) < 2:
        raise ValidationError(f"{path}: need at least two buckets")
    steps = np.diff(starts)
    dt = float(steps[0])
    if starts[0] != 0.0 or not np.allclose(steps, dt, rtol=0, atol=1e-9):
        raise ValidationError(f"{path}: bucket starts must be 0, dt, 2dt, ...")
    return ForwardCurve(np.array(rates), dt)


def write_curve_csv(path, fwd: ForwardCurve) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tenor_years", "forward_rate"])
        for j, r in enumerate(fwd.rates):
            w.writerow([f"{j * fwd.dt:.6g}", repr(float(r))])


def flat_curve(rate: float, grid: TimeGrid) -> ForwardCurve:
    return ForwardCurve(np.full(grid.n_steps, float(rate)), grid.dt)

