"""Normal-model local volatility on the calendar x maturity grid.

With total implied variance ``w(x)`` at strike offset ``x`` the local
variance is

    v_L^2 = (dw/dt) / (1 - (x/w) w_x + (1/4)(-1/w + x^2/w^2) w_x^2 + (1/2) w_xx)

``dw/dt`` is a forward difference in calendar time at fixed absolute
maturity; the denominator uses the slice at the start of the step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import LocalVolError, ValidationError
from .smile import SmileTable, eval_coefs

W_FLOOR = 1e-12
D_MIN = 0.1
V_MIN = 1e-5
V_MAX = 0.2


@dataclass
class LocalVolSurface:
    """Smile slices plus the calibrated first row used at ``t = 0``.

    ``first_row[k, j]`` is the calibrated forward vol ``sigma(t_0, tau_j)`` for
    strike offset ``offsets[k]``.
    """

    table: SmileTable
    offsets: np.ndarray
    first_row: np.ndarray
    dt: float
    w_floor: float = W_FLOOR
    d_min: float = D_MIN
    v_min: float = V_MIN
    v_max: float = V_MAX

    def __post_init__(self):
        if not (0 < self.v_min < self.v_max) or self.d_min <= 0 or self.w_floor <= 0:
            raise ValidationError("local-vol floors/caps must satisfy 0 < v_min < v_max, d_min > 0")
        self.offsets = np.asarray(self.offsets, dtype=float)
        self.first_row = np.ascontiguousarray(self.first_row, dtype=float)

    @property
    def n_slices(self):
        return self.table.coefs.shape[1]

    @property
    def params(self):
        t = self.table
        return np.array([t.x0, t.xd + t.x0, t.xu - t.x0, self.dt,
                         self.w_floor, self.d_min, self.v_min ** 2, self.v_max ** 2])


def build_local_vol_surface(table: SmileTable, grids, **limits) -> LocalVolSurface:
    offsets = np.array(sorted(grids))
    first = np.stack([grids[x].sigma[0] for x in offsets])
    dt = grids[offsets[0]].dt
    return LocalVolSurface(table, offsets, first, dt, **limits)


@njit(cache=True, nogil=True)
def _ratio(w, wx, wxx, w1, x, params):
    """Clamped ``(v_L^2, clamped)`` from the two slice values at ``x``."""
    dt, w_floor, d_min, v2_min, v2_max = params[3], params[4], params[5], params[6], params[7]
    num = (w1 - w) / dt
    wf = w if w > w_floor else w_floor
    r = x / wf
    den = 1.0 - r * wx + 0.25 * (-1.0 / wf + r * r) * wx * wx + 0.5 * wxx
    if not (math.isfinite(num) and math.isfinite(den)):
        return math.nan, True
    clamped = False
    if den < d_min:
        den = d_min
        clamped = True
    v2 = num / den
    if v2 < v2_min:
        v2 = v2_min
        clamped = True
    elif v2 > v2_max:
        v2 = v2_max
        clamped = True
    return v2, clamped


@njit(cache=True, nogil=True)
def _first_row(first_row, offsets, j, x):
    best = 0
    for k in range(offsets.shape[0]):
        if abs(offsets[k] - x) < abs(offsets[best] - x):
            best = k
    s = first_row[best, j]
    return s * s


@njit(cache=True, nogil=True)
def _local_variance(coefs, first_row, offsets, params, i, j, x):
    """Returns ``(v_L^2, clamped)``; NaN signals a non-finite intermediate."""
    if i == 0:
        return _first_row(first_row, offsets, j, x), False
    x0, ld, lu = params[0], params[1], params[2]
    c0 = coefs[:, i, j]
    c1 = coefs[:, i + 1, j]
    w, wx, wxx = eval_coefs(c0[0], c0[1], c0[2], c0[3], c0[4], c0[5], c0[6], x0, ld, lu, x)
    w1, _, _ = eval_coefs(c1[0], c1[1], c1[2], c1[3], c1[4], c1[5], c1[6], x0, ld, lu, x)
    return _ratio(w, wx, wxx, w1, x, params)


def local_variance(surface: LocalVolSurface, i: int, j: int, x: float):
    """``(v_L^2, clamped)`` at calendar row ``i``, bucket ``j > i``, strike offset ``x``."""
    if j <= i or j >= surface.first_row.shape[1] or i > surface.n_slices - 2:
        raise ValidationError(f"local variance undefined at (i={i}, j={j})")
    v2, clamped = _local_variance(surface.table.coefs, surface.first_row, surface.offsets,
                                  surface.params, i, j, float(x))
    if not math.isfinite(v2):
        raise LocalVolError(f"non-finite local variance at (i={i}, j={j}, x={x})")
    return v2, clamped


@njit(cache=True, nogil=True)
def _local_vol_row(coefs, first_row, offsets, params, i, start, strikes, out):
    """Fill ``out[p, k]`` with ``v_L(i, start + k, strikes[p, k])``; returns
    ``(clamp_count, first_bad_flat_index)``.  Bucket-major so each smile's
    coefficients are loaded once."""
    n_p, n_k = strikes.shape
    x0, ld, lu = params[0], params[1], params[2]
    clamps = 0
    for k in range(n_k):
        j = start + k
        if i == 0:
            for p in range(n_p):
                out[p, k] = math.sqrt(_first_row(first_row, offsets, j, strikes[p, k]))
            continue
        a0, b0, g0, ad0, bd0, au0, bu0 = (coefs[0, i, j], coefs[1, i, j], coefs[2, i, j],
                                          coefs[3, i, j], coefs[4, i, j], coefs[5, i, j],
                                          coefs[6, i, j])
        a1, b1, g1, ad1, bd1, au1, bu1 = (coefs[0, i + 1, j], coefs[1, i + 1, j],
                                          coefs[2, i + 1, j], coefs[3, i + 1, j],
                                          coefs[4, i + 1, j], coefs[5, i + 1, j],
                                          coefs[6, i + 1, j])
        for p in range(n_p):
            x = strikes[p, k]
            w, wx, wxx = eval_coefs(a0, b0, g0, ad0, bd0, au0, bu0, x0, ld, lu, x)
            w1, _, _ = eval_coefs(a1, b1, g1, ad1, bd1, au1, bu1, x0, ld, lu, x)
            v2, c = _ratio(w, wx, wxx, w1, x, params)
            if not math.isfinite(v2):
                return clamps, p * n_k + k
            if c:
                clamps += 1
            out[p, k] = math.sqrt(v2)
    return clamps, -1


def local_vol_row(surface: LocalVolSurface, i: int, strikes, start: int | None = None):
    """Local vols for buckets ``start, start+1, ...`` given strikes per bucket.

    ``strikes`` is 1-d (one path) or 2-d (paths x buckets); ``start``
    defaults to ``i + 1``, the first bucket still evolving. Returns the vols
    in the same shape and the number of clamped queries.
    """
    start = i + 1 if start is None else start
    s = np.atleast_2d(np.asarray(strikes, dtype=float))
    if start <= i or start + s.shape[1] > surface.first_row.shape[1] or i > surface.n_slices - 2:
        raise ValidationError(f"local vol row undefined at i={i}, buckets {start}..{start + s.shape[1] - 1}")
    out = np.empty_like(s)
    clamps, bad = _local_vol_row(surface.table.coefs, surface.first_row, surface.offsets,
                                 surface.params, i, start, s, out)
    if bad >= 0:
        p, k = divmod(bad, s.shape[1])
        raise LocalVolError(f"non-finite local variance at (i={i}, j={start + k}, x={s[p, k]})")
    return (out if np.ndim(strikes) == 2 else out[0]), clamps


def lv_dump(surface: LocalVolSurface, i, j, xs=None):
    """Rows ``(i, j, x, v_local)`` on a strike lattice for plotting."""
    if xs is None:
        xs = np.round(np.linspace(-0.12, 0.12, 49), 6)
    return [(i, j, float(x), math.sqrt(local_variance(surface, i, j, x)[0])) for x in xs]
