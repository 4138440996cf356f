"""Implied grid variance and its C1 piecewise-quadratic strike interpolation.

For each calendar row ``i`` and maturity bucket ``j`` the total variance
``w(x)`` of strike offset ``x`` is a least-squares quadratic on
``[-x0, x0]``, continued by quadratic wings whose slope decays linearly to
zero at ``xd`` and ``xu``, and held constant beyond them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import SmileFitError, ValidationError

X0 = 0.02
XD = -0.10
XU = 0.10

# coefficient planes in SmileTable.coefs
ALPHA, BETA, GAMMA, ALPHA_D, BETA_D, ALPHA_U, BETA_U = range(7)


@dataclass
class VarianceGrid:
    """``w[k, i, j] = dt * sum_{n<i} sigma_k(n, j)^2`` for offset ``offsets[k]``."""

    offsets: np.ndarray
    w: np.ndarray
    dt: float

    def slice(self, i, j):
        return dict(zip(self.offsets.tolist(), self.w[:, i, j].tolist()))


def build_variance_grid(grids) -> VarianceGrid:
    """Accumulate squared cell vols along calendar time at fixed maturity.

    ``grids`` maps strike offset to a (simulation-ready) ForwardVolGrid.
    Cells with ``n > j`` belong to forwards that have already fixed and
    contribute nothing.
    """
    if not grids:
        raise ValidationError("no forward-vol grids supplied")
    offsets = np.array(sorted(grids))
    first = grids[offsets[0]]
    shape, dt = first.sigma.shape, first.dt
    for x in offsets:
        g = grids[x]
        if g.sigma.shape != shape or g.dt != dt:
            raise ValidationError(f"grid for offset {x} does not match the others")
    n_rows, nb = shape
    w = np.zeros((len(offsets), n_rows + 1, nb))
    for k, x in enumerate(offsets):
        sq = np.triu(grids[x].sigma) ** 2
        w[k, 1:] = dt * np.cumsum(sq, axis=0)
    return VarianceGrid(offsets, w, dt)


@njit(cache=True, nogil=True)
def eval_coefs(al, be, ga, ad, bd, au, bu, x0, ld, lu, x):
    """Value, slope and curvature of one smile at ``x``.

    ``ld = xd + x0`` (< 0) and ``lu = xu - x0`` (> 0).  Wings are written as
    ``a + b*u*(1 - u/(2L))`` so the slope ``b*(1 - u/L)`` vanishes exactly at
    the outer knots.
    """
    if x < -x0:
        u = x + x0
        if u <= ld:
            return ad + bd * ld * 0.5, 0.0, 0.0
        return ad + bd * u * (1.0 - 0.5 * u / ld), bd * (1.0 - u / ld), -bd / ld
    if x > x0:
        u = x - x0
        if u >= lu:
            return au + bu * lu * 0.5, 0.0, 0.0
        return au + bu * u * (1.0 - 0.5 * u / lu), bu * (1.0 - u / lu), -bu / lu
    return al + be * x + ga * x * x, be + 2.0 * ga * x, 2.0 * ga


@dataclass(frozen=True)
class SmileFit:
    alpha: float
    beta: float
    gamma: float
    alpha_d: float
    beta_d: float
    alpha_u: float
    beta_u: float
    x0: float = X0
    xd: float = XD
    xu: float = XU

    @property
    def gamma_d(self):
        return -self.beta_d / (2.0 * (self.xd + self.x0))

    @property
    def gamma_u(self):
        return -self.beta_u / (2.0 * (self.xu - self.x0))

    @property
    def tail_d(self):
        return eval_smile(self, self.xd)[0]

    @property
    def tail_u(self):
        return eval_smile(self, self.xu)[0]

    def branch(self, x, side):
        """Evaluate one branch formula at ``x`` regardless of where ``x`` lies."""
        if side == "center":
            return (self.alpha + self.beta * x + self.gamma * x * x,
                    self.beta + 2.0 * self.gamma * x)
        if side == "down":
            ld, u = self.xd + self.x0, x + self.x0
            return self.alpha_d + self.beta_d * u * (1.0 - 0.5 * u / ld), self.beta_d * (1.0 - u / ld)
        if side == "up":
            lu, u = self.xu - self.x0, x - self.x0
            return self.alpha_u + self.beta_u * u * (1.0 - 0.5 * u / lu), self.beta_u * (1.0 - u / lu)
        raise ValueError(side)


def eval_smile(fit: SmileFit, x: float):
    """``(w, dw/dx, d2w/dx2)`` at strike offset ``x``."""
    return eval_coefs(fit.alpha, fit.beta, fit.gamma, fit.alpha_d, fit.beta_d,
                      fit.alpha_u, fit.beta_u, fit.x0, fit.xd + fit.x0, fit.xu - fit.x0,
                      float(x))


def check_knots(x0, xd, xu):
    if not (xd < -x0 < 0 < x0 < xu):
        raise ValidationError(f"knots must satisfy xd < -x0 < 0 < x0 < xu, got {xd}, {x0}, {xu}")


def _central_solver(offsets, x0):
    xs = np.asarray(offsets, dtype=float)
    central = np.abs(xs) <= x0 + 1e-12
    if np.unique(xs[central]).size < 3:
        raise SmileFitError(f"need 3 distinct offsets in [-{x0}, {x0}], got {xs[central].tolist()}")
    design = np.vander(xs[central], 3, increasing=True)
    return central, np.linalg.pinv(design)


def _wings(al, be, ga, x0):
    ad = al + be * (-x0) + ga * (-x0) * (-x0)
    bd = be + 2.0 * ga * (-x0)
    au = al + be * x0 + ga * x0 * x0
    bu = be + 2.0 * ga * x0
    return ad, bd, au, bu


def fit_smile(values, x0=X0, xd=XD, xu=XU, cell=None) -> SmileFit:
    """Fit one slice given a mapping ``strike_offset -> w``."""
    check_knots(x0, xd, xu)
    xs = np.array(sorted(values))
    ws = np.array([values[x] for x in xs])
    central, pinv = _central_solver(xs, x0)
    al, be, ga = pinv @ ws[central]
    fit = SmileFit(float(al), float(be), float(ga), *map(float, _wings(al, be, ga, x0)),
                   x0=x0, xd=xd, xu=xu)
    lo = _min_on_support(np.array([al]), np.array([be]), np.array([ga]),
                         np.array([fit.alpha_d]), np.array([fit.beta_d]),
                         np.array([fit.alpha_u]), np.array([fit.beta_u]), x0, xd, xu)[0]
    if not lo > 0:
        raise SmileFitError(f"fitted variance {lo:.3e} <= 0 on [{xd}, {xu}] at cell {cell}", cell)
    return fit


def _min_on_support(al, be, ga, ad, bd, au, bu, x0, xd, xu):
    ld, lu = xd + x0, xu - x0
    cands = [ad, au, ad + bd * ld * 0.5, au + bu * lu * 0.5]
    with np.errstate(divide="ignore", invalid="ignore"):
        xv = np.where(ga != 0, -be / (2.0 * np.where(ga != 0, ga, 1.0)), 0.0)
    inside = (ga > 0) & (np.abs(xv) < x0)
    cands.append(np.where(inside, al + be * xv + ga * xv * xv, np.inf))
    return np.minimum.reduce(cands)


@dataclass
class SmileTable:
    """Smile coefficients for every (row, bucket); ``coefs`` is (7, rows, buckets)."""

    coefs: np.ndarray
    x0: float = X0
    xd: float = XD
    xu: float = XU

    def fit_at(self, i, j) -> SmileFit:
        c = self.coefs[:, i, j]
        return SmileFit(*map(float, c), x0=self.x0, xd=self.xd, xu=self.xu)

    def knot_mismatch(self, i, j):
        """Largest one-sided value/slope gap at the inner knots, and outer slopes."""
        f = self.fit_at(i, j)
        gaps = []
        for knot, side in ((-f.x0, "down"), (f.x0, "up")):
            c, w = f.branch(knot, "center"), f.branch(knot, side)
            gaps += [abs(c[0] - w[0]), abs(c[1] - w[1])]
        outer = (abs(f.branch(f.xd, "down")[1]), abs(f.branch(f.xu, "up")[1]),
                 abs(eval_smile(f, f.xd)[1]), abs(eval_smile(f, f.xu)[1]))
        return max(gaps), max(outer)


def fit_smile_table(vgrid: VarianceGrid, x0=X0, xd=XD, xu=XU) -> SmileTable:
    """Fit every slice with ``1 <= i <= j``; other slices stay zero.

    Row 0 holds no variance and is never fitted.  Raises
    :class:`SmileFitError` naming the first slice that goes non-positive.
    """
    check_knots(x0, xd, xu)
    central, pinv = _central_solver(vgrid.offsets, x0)
    n_off, n_slices, nb = vgrid.w.shape
    w = vgrid.w[central]
    al, be, ga = np.einsum("ck,kij->cij", pinv, w)
    ad, bd, au, bu = _wings(al, be, ga, x0)
    coefs = np.stack([al, be, ga, ad, bd, au, bu])
    i_idx = np.arange(n_slices)[:, None]
    j_idx = np.arange(nb)[None, :]
    live = (i_idx >= 1) & (j_idx >= i_idx)
    coefs[:, ~live] = 0.0
    lo = _min_on_support(*coefs, x0, xd, xu)
    bad = live & ~(lo > 0)
    if bad.any():
        i, j = map(int, np.argwhere(bad)[0])
        raise SmileFitError(
            f"fitted variance {lo[i, j]:.3e} <= 0 on [{xd}, {xu}] at cell (i={i}, j={j}); "
            f"{int(bad.sum())} slices affected", (i, j))
    return SmileTable(coefs, x0, xd, xu)


def smile_dump(table: SmileTable, i, j, xs=None):
    """Rows ``(i, j, x, w_fitted)`` on a fixed strike lattice for plotting."""
    if xs is None:
        xs = np.round(np.linspace(-0.12, 0.12, 49), 6)
    f = table.fit_at(i, j)
    return [(i, j, float(x), eval_smile(f, x)[0]) for x in xs]
