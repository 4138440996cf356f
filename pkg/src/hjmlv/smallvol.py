"""Small-volatility swaption map and the forward-volatility bootstrap.

To first order in the forward-rate volatility ``sigma(t, tau)`` the
discounted payer swap value at expiry ``T`` is Gaussian with standard
deviation ``Sigma(T, N) sqrt(T)`` in present-value units, where

    Sigma^2 T = int_0^T v(t, N)^2 dt
    v(t, N)   = r_s sum_n B(0,T_n) b(t,T_n) - B(0,T) b(t,T) + B(0,T_N) b(t,T_N)

and ``b(t, T) = int_t^T sigma(t, u) du`` is the bond volatility.  On the
grid every ``v(t_i, N)`` is linear in row ``i`` of the sigma matrix, which is
what makes the cell-by-cell bootstrap a sequence of scalar quadratics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .curve import DiscountCurve, TimeGrid, annuity, atm_swap_rate, payment_indices
from .errors import CalibrationError, GridAlignmentError, ValidationError
from .market import QuoteSurface, interpolate_variance_in_time


@dataclass
class ForwardVolGrid:
    """Forward-rate vols ``sigma[i, j]`` for calendar row ``i`` and bucket ``j >= i``.

    ``groups[i, j]`` holds the index into ``ladder`` (the ``(expiry, tenor)``
    of each bootstrap target) of the target that fixed the cell, or -1 for
    cells no target referenced.
    """

    sigma: np.ndarray
    dt: float
    strike_offset: float = 0.0
    groups: np.ndarray = field(default=None, repr=False)
    ladder: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=float)
        n = self.sigma.shape
        if len(n) != 2 or n[0] > n[1]:
            raise ValidationError(f"sigma must be (rows <= buckets) 2-d, got {n}")
        if self.groups is None:
            self.groups = np.full(n, -1, dtype=np.int64)

    @property
    def n_rows(self):
        return self.sigma.shape[0]

    @property
    def n_buckets(self):
        return self.sigma.shape[1]

    @property
    def calibrated(self):
        return self.groups >= 0

    def extended(self) -> "ForwardVolGrid":
        """Copy with every unreferenced cell filled for simulation.

        Calibrated rows are continued flat in maturity; rows past the last
        calibrated one reuse the last calibrated row by time to maturity.
        """
        sig = self.sigma.copy()
        cal = self.calibrated
        rows = np.flatnonzero(cal.any(axis=1))
        if rows.size == 0:
            return ForwardVolGrid(sig, self.dt, self.strike_offset, self.groups.copy(),
                                  list(self.ladder))
        nb = self.n_buckets
        for i in rows:
            last = np.flatnonzero(cal[i])[-1]
            sig[i, last + 1:] = sig[i, last]
        ref = rows[-1]
        ref_row = sig[ref, ref:]
        for i in range(ref + 1, self.n_rows):
            width = nb - i
            sig[i, i:] = ref_row[:width]
        return ForwardVolGrid(sig, self.dt, self.strike_offset, self.groups.copy(),
                              list(self.ladder))


@dataclass(frozen=True)
class SwaptionVolTarget:
    """Normal (rate) vol the bootstrap must reproduce for one swaption."""

    expiry: float
    tenor: float
    strike_offset: float
    vol: float

    def __post_init__(self):
        if self.vol < 0:
            raise ValidationError(f"target vol must be >= 0: {self}")


def bond_vol(grid: ForwardVolGrid, i: int, j: int) -> float:
    """``dt * sum_{k=i}^{j-1} sigma(t_i, tau_k)``."""
    if j < i:
        raise GridAlignmentError(f"bond maturity index {j} precedes row {i}")
    return grid.dt * float(grid.sigma[i, i:j].sum())


def swap_vol_row(grid: ForwardVolGrid, disc: DiscountCurve, i: int, expiry: float,
                 tenor: float, r_s: float, payment_interval: float = 1.0) -> float:
    """Present-value swap volatility ``v(t_i, N)`` term by term."""
    e, pays = payment_indices(expiry, tenor, payment_interval, grid.dt)
    if i >= e:
        raise GridAlignmentError(f"row {i} is not before expiry index {e}")
    if pays[-1] > grid.n_buckets or pays[-1] >= len(disc):
        raise GridAlignmentError(f"swap {expiry}+{tenor} exceeds the grid")
    b = disc.discounts
    fixed = sum(b[p] * bond_vol(grid, i, p) for p in pays)
    return r_s * fixed - b[e] * bond_vol(grid, i, e) + b[pays[-1]] * bond_vol(grid, i, pays[-1])


def swap_coefficients(disc: DiscountCurve, expiry: float, tenor: float, r_s: float,
                      payment_interval: float = 1.0):
    """Per-bucket weights ``c_k`` with ``v(t_i, N) = dt * sum_{k>=i} c_k sigma(i, k)``.

    Returns ``(expiry_index, end_index, c)`` where ``c`` has length ``end_index``.
    """
    e, pays = payment_indices(expiry, tenor, payment_interval, disc.dt)
    end = int(pays[-1])
    if end >= len(disc):
        raise GridAlignmentError(f"swap {expiry}+{tenor} exceeds the discount curve")
    b = disc.discounts
    k = np.arange(end)
    # payments strictly after bucket k: pay index > k
    weights = np.zeros(end + 1)
    np.add.at(weights, pays, b[pays])
    after = np.cumsum(weights[::-1])[::-1][1:]
    c = r_s * after + b[end] - b[e] * (k < e)
    return e, end, c


def weight_rate(disc, expiry, tenor, strike_offset, payment_interval=1.0, strike_weighted=False):
    """Fixed rate ``r_s`` multiplying the annuity term of ``v(t, N)``.

    ``strike_weighted`` uses the option strike ``r_ATM + X``; the default keeps
    ``r_ATM`` for every offset so that the quoted normal vol of each offset maps
    to cells the same way the ATM vol does.
    """
    r = atm_swap_rate(disc, expiry, tenor, payment_interval)
    return r + strike_offset if strike_weighted else r


def sigma_swaption_pv(grid: ForwardVolGrid, disc: DiscountCurve, expiry: float,
                      tenor: float, strike_offset: float, payment_interval: float = 1.0,
                      strike_weighted: bool = False) -> float:
    """``Sigma(T, N)`` in present-value units."""
    r_s = weight_rate(disc, expiry, tenor, strike_offset, payment_interval, strike_weighted)
    e, end, c = swap_coefficients(disc, expiry, tenor, r_s, payment_interval)
    if end > grid.n_buckets:
        raise GridAlignmentError(f"swap {expiry}+{tenor} exceeds the vol grid")
    if e == 0:
        return 0.0
    sig = np.triu(grid.sigma[:e, :end])
    v = grid.dt * sig @ c
    return math.sqrt(grid.dt * float(v @ v) / expiry)


def sigma_swaption(grid: ForwardVolGrid, disc: DiscountCurve, expiry: float, tenor: float,
                   strike_offset: float, payment_interval: float = 1.0,
                   strike_weighted: bool = False) -> float:
    """Model normal swaption vol: PV-unit ``Sigma`` divided by the annuity."""
    pv = sigma_swaption_pv(grid, disc, expiry, tenor, strike_offset, payment_interval,
                           strike_weighted)
    return pv / annuity(disc, expiry, tenor, payment_interval)


def _solve(a, b, c, root):
    """Nonnegative root of ``a s^2 + b s + c = 0`` or None."""
    disc = b * b - 4.0 * a * c
    if disc < 0:
        # tolerate rounding when the target sits at the quadratic's minimum
        if disc > -1e-12 * max(b * b, abs(4.0 * a * c), 1e-300):
            disc = 0.0
        else:
            return None
    q = -0.5 * (b + math.copysign(math.sqrt(disc), b))
    if q == 0.0:
        roots = [0.0, 0.0]
    else:
        roots = sorted([q / a, c / q])
    lo, hi = roots
    order = (hi, lo) if root == "larger" else (lo, hi)
    for r in order:
        if r >= 0:
            return r
    # rounding can push an exact zero root slightly negative
    if hi > -1e-14:
        return 0.0
    return None


def bootstrap_forward_vols(targets, disc: DiscountCurve, n_buckets: int | None = None,
                           payment_interval: float = 1.0, root: str = "larger",
                           strike_weighted: bool = False) -> ForwardVolGrid:
    """Calibrate a forward-vol grid to swaption vols of one strike offset.

    Targets are processed expiry-major.  Cells already fixed by earlier
    targets are held; every cell newly referenced by the current target
    shares one unknown ``s``.  Expanding ``Sigma^2 T`` gives
    ``A s^2 + B s + C`` which is solved for the requested root.
    """
    if root not in ("larger", "smaller"):
        raise ValueError(f"root must be 'larger' or 'smaller', got {root!r}")
    targets = sorted(targets, key=lambda t: (t.expiry, t.tenor))
    offsets = {round(t.strike_offset, 12) for t in targets}
    if len(offsets) > 1:
        raise ValidationError(f"targets mix strike offsets {sorted(offsets)}")
    offset = targets[0].strike_offset if targets else 0.0
    dt = disc.dt
    nb = n_buckets if n_buckets is not None else len(disc) - 1
    sigma = np.zeros((nb, nb))
    groups = np.full((nb, nb), -1, dtype=np.int64)

    for g, tgt in enumerate(targets):
        r_s = weight_rate(disc, tgt.expiry, tgt.tenor, tgt.strike_offset, payment_interval,
                          strike_weighted)
        e, end, c = swap_coefficients(disc, tgt.expiry, tgt.tenor, r_s, payment_interval)
        if end > nb:
            raise CalibrationError(f"swaption {tgt.expiry}x{tgt.tenor} exceeds the grid",
                                   tgt.expiry, tgt.tenor)
        rows = np.arange(e)[:, None]
        cols = np.arange(end)[None, :]
        live = cols >= rows
        known = (groups[:e, :end] >= 0) & live
        new = live & ~known
        if not new.any():
            raise CalibrationError(
                f"swaption {tgt.expiry}x{tgt.tenor} introduces no new grid cell",
                tgt.expiry, tgt.tenor)
        a_i = dt * (np.where(known, sigma[:e, :end], 0.0) @ c)
        b_i = dt * (new @ c)
        A = dt * float(b_i @ b_i)
        B = 2.0 * dt * float(a_i @ b_i)
        C = dt * float(a_i @ a_i)
        ann = annuity(disc, tgt.expiry, tgt.tenor, payment_interval)
        rhs = (tgt.vol * ann) ** 2 * tgt.expiry
        if A <= 0:
            raise CalibrationError(
                f"swaption {tgt.expiry}x{tgt.tenor}: new cells carry no variance",
                tgt.expiry, tgt.tenor)
        s = _solve(A, B, C - rhs, root)
        if s is None:
            floor = C - B * B / (4 * A) if B < 0 else C
            raise CalibrationError(
                f"swaption {tgt.expiry}x{tgt.tenor} offset {tgt.strike_offset:+g}: "
                f"target variance {rhs:.4e} below attainable minimum {floor:.4e}",
                tgt.expiry, tgt.tenor)
        sub = sigma[:e, :end]
        sub[new] = s
        groups[:e, :end][new] = g
    ladder = [(t.expiry, t.tenor) for t in targets]
    return ForwardVolGrid(sigma, dt, offset, groups, ladder)


def targets_from_surface(surface: QuoteSurface, strike_offset: float, grid: TimeGrid,
                         interpolated: bool = False):
    """Bootstrap ladder for one offset.

    By default only quoted expiries are used and gaps are bridged by the
    equal-unknowns rule.  With ``interpolated`` every grid expiry inside the
    quoted range gets a target from linear total-variance interpolation.
    """
    if interpolated:
        first = grid.steps(surface.expiries[0]) if _on_grid(surface.expiries[0], grid) else \
            int(math.ceil(surface.expiries[0] / grid.dt))
        last = int(math.floor(surface.expiries[-1] / grid.dt + 1e-9))
        expiries = [k * grid.dt for k in range(max(first, 1), last + 1)]
    else:
        expiries = surface.expiries
    out = []
    for e in expiries:
        for n in surface.tenors:
            if e + n > grid.horizon + 1e-9:
                continue
            v = (interpolate_variance_in_time(surface, e, n, strike_offset) if interpolated
                 else surface.vol(e, n, strike_offset))
            out.append(SwaptionVolTarget(e, n, strike_offset, v))
    return out


def _on_grid(t, grid):
    try:
        grid.steps(t)
        return True
    except GridAlignmentError:
        return False


def calibrate_surface(surface: QuoteSurface, disc: DiscountCurve, grid: TimeGrid,
                      interpolated: bool = False, root: str = "larger",
                      payment_interval: float = 1.0, strike_weighted: bool = False):
    """One bootstrapped grid per strike offset, keyed by offset."""
    return {
        x: bootstrap_forward_vols(targets_from_surface(surface, x, grid, interpolated), disc,
                                  grid.n_steps, payment_interval, root, strike_weighted)
        for x in surface.offsets
    }
