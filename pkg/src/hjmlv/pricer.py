"""Swaption payoffs on simulated curves, MC prices, and vol comparisons."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .curve import DiscountCurve, annuity, atm_swap_rate, payment_indices
from .errors import GridAlignmentError, NoSolutionError, ValidationError
from .market import QuoteSurface, implied_normal_vol


@dataclass(frozen=True)
class SwaptionSpec:
    expiry: float
    tenor: float
    strike_offset: float = 0.0
    payer: bool = True
    payment_interval: float = 1.0

    @property
    def key(self):
        return ("swaption", round(self.expiry, 10), round(self.tenor, 10),
                round(self.strike_offset, 10), "payer" if self.payer else "receiver")

    @classmethod
    def otm(cls, expiry, tenor, strike_offset, payment_interval=1.0):
        """Payer for offsets >= 0, receiver below the forward."""
        return cls(expiry, tenor, strike_offset, strike_offset >= 0, payment_interval)


@dataclass
class PriceResult:
    spec: SwaptionSpec
    mc_price: float
    standard_error: float
    n_paths: int
    model_implied_vol: float
    market_vol: float | None = None
    inversion_failed: bool = False


def payoff_on_path(forwards, mm, spec: SwaptionSpec, disc0: DiscountCurve,
                   atm_reading: str = "deterministic"):
    """Discounted swaption payoff for each path row of ``forwards``.

    ``forwards`` holds ``f(t_e, tau_j)`` by absolute bucket at the expiry
    step ``e``; ``mm`` is the money-market discount factor ``MM(t_e)``.  The
    strike is ``X + r_ATM`` with the time-0 forward ATM rate (default) or,
    with ``atm_reading='path'``, the par rate seen on the path at expiry.
    """
    dt = disc0.dt
    e, pays = payment_indices(spec.expiry, spec.tenor, spec.payment_interval, dt)
    fw = np.atleast_2d(forwards)
    if pays[-1] > fw.shape[1]:
        raise GridAlignmentError(f"path curve ends before {spec.expiry}+{spec.tenor}")
    logb = -dt * np.cumsum(fw[:, e:pays[-1]], axis=1)
    b = np.exp(logb[:, pays - e - 1])
    ann = b.sum(axis=1)
    floating = 1.0 - b[:, -1]
    if atm_reading == "deterministic":
        atm = atm_swap_rate(disc0, spec.expiry, spec.tenor, spec.payment_interval)
    elif atm_reading == "path":
        atm = floating / ann
    else:
        raise ValueError(f"unknown atm_reading {atm_reading!r}")
    value = floating - (spec.strike_offset + atm) * ann
    if not spec.payer:
        value = -value
    out = np.asarray(mm) * np.maximum(value, 0.0)
    return out if np.ndim(forwards) == 2 else out[0]


def forward_swap_pv(forwards, mm, spec: SwaptionSpec, disc0: DiscountCurve):
    """Discounted payer-swap value at expiry (payer minus receiver payoff)."""
    dt = disc0.dt
    e, pays = payment_indices(spec.expiry, spec.tenor, spec.payment_interval, dt)
    fw = np.atleast_2d(forwards)
    b = np.exp(-dt * np.cumsum(fw[:, e:pays[-1]], axis=1))[:, pays - e - 1]
    atm = atm_swap_rate(disc0, spec.expiry, spec.tenor, spec.payment_interval)
    return np.asarray(mm) * (1.0 - b[:, -1] - (spec.strike_offset + atm) * b.sum(axis=1))


class SwaptionObserver:
    """Collects discounted payoffs for a set of swaptions at their expiries."""

    def __init__(self, specs, disc0: DiscountCurve, atm_reading="deterministic"):
        self.specs = list(dict.fromkeys(specs))
        self.disc0 = disc0
        self.atm_reading = atm_reading
        self.keys = [s.key for s in self.specs]
        self.by_step = {}
        for i, s in enumerate(self.specs):
            e, pays = payment_indices(s.expiry, s.tenor, s.payment_interval, disc0.dt)
            if pays[-1] >= len(disc0):
                raise ValidationError(f"swaption {s.expiry}x{s.tenor} beyond the curve")
            self.by_step.setdefault(e, []).append((i, s, int(pays[-1])))

    def requests(self):
        return {e: max(end for _, _, end in items) for e, items in self.by_step.items()}

    def observe(self, step, state):
        mm = state.money_market
        idx, cols = [], []
        for i, s, _ in self.by_step[step]:
            idx.append(i)
            cols.append(payoff_on_path(state.forwards, mm, s, self.disc0, self.atm_reading))
        return idx, np.stack(cols, axis=1)


def price_swaption(ensemble, spec: SwaptionSpec, disc0: DiscountCurve,
                   market_vol: float | None = None) -> PriceResult:
    """MC mean and standard error plus the normal vol implied at time 0.

    Vols are backed out with the time-0 annuity and forward ATM rate so they
    are directly comparable with quotes.  A price below intrinsic (MC noise)
    reports vol 0 with ``inversion_failed`` set.
    """
    price = ensemble.mean(spec.key)
    se = ensemble.stderr(spec.key)
    fwd = atm_swap_rate(disc0, spec.expiry, spec.tenor, spec.payment_interval)
    ann = annuity(disc0, spec.expiry, spec.tenor, spec.payment_interval)
    failed = False
    try:
        vol = implied_normal_vol(price, fwd, fwd + spec.strike_offset, spec.expiry, ann,
                                 payer=spec.payer)
    except NoSolutionError:
        vol, failed = 0.0, True
    return PriceResult(spec, price, se, ensemble.n_paths, vol, market_vol, failed)


def vol_stderr(result: PriceResult, disc0: DiscountCurve) -> float:
    """Price standard error mapped to vol units through the normal vega."""
    s = result.spec
    fwd = atm_swap_rate(disc0, s.expiry, s.tenor, s.payment_interval)
    ann = annuity(disc0, s.expiry, s.tenor, s.payment_interval)
    v = max(result.model_implied_vol, 1e-8)
    d = -s.strike_offset / (v * math.sqrt(s.expiry))
    vega = ann * math.sqrt(s.expiry) * math.exp(-0.5 * d * d) / math.sqrt(2 * math.pi)
    return result.standard_error / vega if vega > 0 else math.inf


REPORT_HEADER = ["expiry", "tenor", "strike_offset", "market_vol", "model_vol",
                 "abs_err", "rel_err", "mc_stderr"]
RESULTS_HEADER = ["expiry", "tenor", "strike_offset", "mc_price", "mc_stderr",
                  "model_implied_vol"]


def comparison_report(results, quotes: QuoteSurface):
    """Market-vs-model rows and the list of result keys with no quote."""
    rows, unmatched = [], []
    for r in results:
        s = r.spec
        key = (s.expiry, s.tenor, s.strike_offset)
        if key not in quotes:
            unmatched.append(key)
            continue
        mkt = quotes.vol(*key)
        err = r.model_implied_vol - mkt
        rows.append({
            "expiry": s.expiry, "tenor": s.tenor, "strike_offset": s.strike_offset,
            "market_vol": mkt, "model_vol": r.model_implied_vol,
            "abs_err": err, "rel_err": err / mkt if mkt else math.nan,
            "mc_stderr": r.standard_error,
        })
    return rows, unmatched


def _fmt(v):
    return f"{v:.12g}" if isinstance(v, float) else str(v)


def write_rows_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[h]) for h in header])


def results_rows(results):
    return [{"expiry": r.spec.expiry, "tenor": r.spec.tenor,
             "strike_offset": r.spec.strike_offset, "mc_price": r.mc_price,
             "mc_stderr": r.standard_error, "model_implied_vol": r.model_implied_vol}
            for r in results]
