"""Swaption quotes in normal-vol terms, Bachelier pricing, and fixtures."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr

from .curve import ForwardCurve, TimeGrid
from .errors import ExtrapolationError, NoSolutionError, ValidationError

SQRT_2PI = math.sqrt(2.0 * math.pi)
VOL_CAP = 1.0

FIXTURE_EXPIRIES = (0.25, 0.5, 1.0, 2.0, 3.0, 5.0, 7.0, 10.0, 15.0, 20.0)
FIXTURE_TENORS = (1.0, 2.0, 5.0, 10.0, 20.0, 30.0)
FIXTURE_OFFSETS = (-0.02, -0.01, 0.0, 0.01, 0.02)


@dataclass(frozen=True)
class SwaptionQuote:
    expiry: float
    tenor: float
    strike_offset: float
    normal_vol: float

    def __post_init__(self):
        if not (self.expiry > 0 and self.tenor > 0):
            raise ValidationError(f"expiry and tenor must be positive: {self}")
        if not (self.normal_vol >= 0 and math.isfinite(self.normal_vol)):
            raise ValidationError(f"normal vol must be finite and >= 0: {self}")

    @property
    def key(self):
        return _key(self.expiry, self.tenor, self.strike_offset)


def _key(expiry, tenor, offset):
    return (round(expiry, 10), round(tenor, 10), round(offset, 10))


class QuoteSurface:
    """Rectangular (expiry x tenor) normal-vol grid for each strike offset."""

    def __init__(self, quotes: Iterable[SwaptionQuote]):
        self._vols = {}
        for q in quotes:
            if q.key in self._vols:
                raise ValidationError(f"duplicate quote for {q.key}")
            self._vols[q.key] = q.normal_vol
        if not self._vols:
            raise ValidationError("empty quote surface")
        self.expiries = sorted({k[0] for k in self._vols})
        self.tenors = sorted({k[1] for k in self._vols})
        self.offsets = sorted({k[2] for k in self._vols})
        missing = [
            (e, n, x)
            for x in self.offsets
            for e in self.expiries
            for n in self.tenors
            if (e, n, x) not in self._vols
        ]
        if missing:
            raise ValidationError(
                f"surface is not rectangular; missing {len(missing)} cells, e.g. {missing[:3]}")

    def __len__(self):
        return len(self._vols)

    def __contains__(self, key):
        return _key(*key) in self._vols

    def vol(self, expiry, tenor, offset) -> float:
        try:
            return self._vols[_key(expiry, tenor, offset)]
        except KeyError:
            raise KeyError(f"no quote for expiry={expiry} tenor={tenor} offset={offset}") from None

    def quotes(self):
        for (e, n, x), v in sorted(self._vols.items(), key=lambda kv: (kv[0][2], kv[0][0], kv[0][1])):
            yield SwaptionQuote(e, n, x, v)

    def calendar_violations(self):
        """Cells where total variance v^2 * T decreases with expiry."""
        bad = []
        for x in self.offsets:
            for n in self.tenors:
                prev = 0.0
                for e in self.expiries:
                    w = self.vol(e, n, x) ** 2 * e
                    if w < prev:
                        bad.append((e, n, x))
                    prev = max(prev, w)
        return bad


def read_surface_csv(path, warn=True) -> QuoteSurface:
    quotes = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"expiry_years", "tenor_years", "strike_offset", "normal_vol"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ValidationError(f"{path}: expected header {','.join(sorted(need))}")
        for row in reader:
            quotes.append(SwaptionQuote(float(row["expiry_years"]), float(row["tenor_years"]),
                                        float(row["strike_offset"]), float(row["normal_vol"])))
    surface = QuoteSurface(quotes)
    if warn:
        bad = surface.calendar_violations()
        if bad:
            warnings.warn(f"calendar arbitrage in {len(bad)} quotes: {bad}", stacklevel=2)
    return surface


def write_surface_csv(path, surface: QuoteSurface) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["expiry_years", "tenor_years", "strike_offset", "normal_vol"])
        for q in surface.quotes():
            w.writerow([f"{q.expiry:g}", f"{q.tenor:g}", f"{q.strike_offset:g}", f"{q.normal_vol:.10f}"])


def bachelier_price(fwd_rate, strike, vol, expiry, annuity, payer=True):
    """Normal-model swaption price.

    ``annuity * [(F-K) N(d) + vol sqrt(T) n(d)]`` with ``d = (F-K)/(vol sqrt(T))``
    for a payer; receivers flip the sign of ``F-K``. Zero vol gives the
    discounted intrinsic value.
    """
    if np.any(np.asarray(vol) < 0) or np.any(np.asarray(expiry) <= 0):
        raise ValidationError("bachelier_price needs vol >= 0 and expiry > 0")
    m = np.asarray(fwd_rate, dtype=float) - np.asarray(strike, dtype=float)
    if not payer:
        m = -m
    s = np.asarray(vol, dtype=float) * np.sqrt(expiry)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(s > 0, m / np.where(s > 0, s, 1.0), 0.0)
        val = np.where(s > 0, m * ndtr(d) + s * np.exp(-0.5 * d * d) / SQRT_2PI,
                       np.maximum(m, 0.0))
    out = annuity * val
    return float(out) if np.ndim(out) == 0 else out


def implied_normal_vol(price, fwd_rate, strike, expiry, annuity, payer=True, tol=1e-10):
    """Invert :func:`bachelier_price` for the vol on ``[0, VOL_CAP]``."""
    m = (fwd_rate - strike) if payer else (strike - fwd_rate)
    intrinsic = annuity * max(m, 0.0)
    if price < intrinsic - tol:
        raise NoSolutionError(f"price {price:.3e} below intrinsic {intrinsic:.3e}")
    if price <= intrinsic:
        return 0.0
    cap = bachelier_price(fwd_rate, strike, VOL_CAP, expiry, annuity, payer)
    if price > cap:
        raise NoSolutionError(f"price {price:.3e} above the vol-cap price {cap:.3e}")
    f = lambda v: bachelier_price(fwd_rate, strike, v, expiry, annuity, payer) - price
    return brentq(f, 0.0, VOL_CAP, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=300)


def interpolate_variance_in_time(surface: QuoteSurface, t, tenor, strike_offset,
                                 extrapolate=False) -> float:
    """Normal vol at ``t`` with total variance ``v^2 t`` linear between quotes."""
    exps = np.array(surface.expiries)
    w = np.array([surface.vol(e, tenor, strike_offset) ** 2 * e for e in exps])
    if t < exps[0] - 1e-12 or t > exps[-1] + 1e-12:
        if not extrapolate:
            raise ExtrapolationError(
                f"t={t} outside quoted expiries [{exps[0]}, {exps[-1]}]")
        # flat variance rate beyond the end nodes
        edge = 0 if t < exps[0] else -1
        return surface.vol(exps[edge], tenor, strike_offset)
    k = int(np.searchsorted(exps, t - 1e-12))
    if abs(exps[k] - t) <= 1e-12:
        return surface.vol(exps[k], tenor, strike_offset)
    t0, t1 = exps[k - 1], exps[k]
    wt = w[k - 1] + (t - t0) * (w[k] - w[k - 1]) / (t1 - t0)
    return math.sqrt(wt / t)


# ---------------------------------------------------------------- fixtures

def fixture_curve(grid: TimeGrid) -> ForwardCurve:
    """Upward-sloping forward curve, 3.0% short end to about 4.2% long end."""
    tau = (np.arange(grid.n_steps) + 0.5) * grid.dt
    return ForwardCurve(0.030 + 0.012 * (1.0 - np.exp(-tau / 6.0)), grid.dt)


def fixture_params(seed=0):
    rng = np.random.default_rng(seed)
    jitter = rng.uniform(0.95, 1.05, size=6)
    return {
        "level": 0.0070 * jitter[0],
        "hump": 0.0045 * jitter[1],
        "hump_decay": 4.0 * jitter[2],
        "tenor_term": 0.0010 * jitter[3],
        "curvature": 3.75 * jitter[4],
        "skew": -0.0125 * jitter[5],
    }


def fixture_vol(expiry, tenor, offset, params) -> float:
    atm = (params["level"]
           + params["hump"] * math.exp(-expiry / params["hump_decay"])
           + params["tenor_term"] * math.exp(-tenor / 10.0))
    damp = 0.6 + 0.4 * math.exp(-expiry / 5.0)
    return atm + damp * (params["curvature"] * offset ** 2 + params["skew"] * offset)


def fixture_surface(seed=0, expiries=FIXTURE_EXPIRIES, tenors=FIXTURE_TENORS,
                    offsets=FIXTURE_OFFSETS) -> QuoteSurface:
    """Deterministic synthetic surface; not market data."""
    p = fixture_params(seed)
    return QuoteSurface(
        SwaptionQuote(e, n, x, round(fixture_vol(e, n, x, p), 10))
        for x in offsets for e in expiries for n in tenors
    )
