"""One-factor HJM Monte Carlo with constant or local forward-rate vols.

Forwards are piecewise constant per bucket.  A step from ``t_n`` moves every
live bucket ``k > n`` by

    f += alpha_k dt + v_k xi sqrt(dt),
    alpha_k = v_k^2 dt / 2 + v_k dt sum_{n<l<k} v_l,

which keeps ``MM(t) B(t, T)`` an exact martingale of the discrete scheme for
any (possibly state-dependent) ``v``.  The money-market log accumulates the
pre-step short rate ``f(t_n, t_n)``.

Path ``p`` draws from a Philox stream keyed by the seed with ``p`` in the
counter, so estimates do not depend on how chunks are spread over workers.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .curve import DiscountCurve, ForwardCurve, atm_swap_rate, payment_indices
from .errors import LocalVolError, SimulationError, ValidationError
from .localvol import LocalVolSurface, _local_vol_row
from .smallvol import ForwardVolGrid

log = logging.getLogger(__name__)


@dataclass
class SimConfig:
    n_paths: int = 100_000
    dt: float = 0.25
    seed: int = 42
    mode: str = "lv"
    long_expiry_cutoff: float | None = None
    antithetic: bool = True
    chunk_size: int = 4096
    workers: int = 1

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValidationError("n_paths must be >= 1")
        if self.mode not in ("lv", "const"):
            raise ValidationError(f"mode must be 'lv' or 'const', got {self.mode!r}")
        if self.antithetic and (self.n_paths % 2 or self.chunk_size % 2):
            raise ValidationError("antithetic sampling needs even n_paths and chunk_size")
        if self.chunk_size < 2 or self.workers < 1:
            raise ValidationError("chunk_size must be >= 2 and workers >= 1")


@dataclass
class PathState:
    """A batch of paths at step ``step``.

    ``forwards[p, j]`` is ``f(t_step, tau_j)`` by absolute bucket ``j``;
    buckets below ``step`` are stale.  ``mm_log`` is ``-sum_k f(t_k, t_k) dt``.
    """

    forwards: np.ndarray
    mm_log: np.ndarray
    step: int
    dt: float

    @classmethod
    def initial(cls, fwd: ForwardCurve, n_paths: int = 1, n_buckets: int | None = None):
        nb = len(fwd) if n_buckets is None else n_buckets
        f = np.tile(fwd.rates[:nb], (n_paths, 1))
        return cls(f, np.zeros(n_paths), 0, fwd.dt)

    @property
    def money_market(self):
        return np.exp(self.mm_log)


# ---------------------------------------------------------------- drift

def hjm_drift_row(vols, dt):
    """Drift for buckets ``n, n+1, ...`` given their vols along the last axis.

    Entry ``r`` is ``v_r^2 dt/2 + v_r dt sum_{1<=l<r} v_l``; the current bucket
    (``r = 0``) never enters a later bucket's drift because it has fixed.
    """
    v = np.asarray(vols, dtype=float)
    prefix = np.zeros_like(v)
    if v.shape[-1] > 2:
        prefix[..., 2:] = np.cumsum(v[..., 1:-1], axis=-1)
    return 0.5 * v * v * dt + v * prefix * dt


@njit(cache=True, nogil=True)
def _advance(f, mm_log, xi, n, end, dt, vols):
    """In-place step of buckets ``n+1 .. end-1``; ``vols[p or 0, k-n-1]``."""
    sqdt = math.sqrt(dt)
    shared = vols.shape[0] == 1
    for p in range(f.shape[0]):
        q = 0 if shared else p
        mm_log[p] -= f[p, n] * dt
        prefix = 0.0
        for k in range(n + 1, end):
            v = vols[q, k - n - 1]
            drift = 0.5 * v * v * dt + v * prefix * dt
            prefix += v
            f[p, k] += drift * dt + v * xi[p] * sqdt


def _end(state, end):
    return state.forwards.shape[1] if end is None else end


def step_constant_vol(state: PathState, grid: ForwardVolGrid, xi, end=None) -> PathState:
    """Advance one step with the calibrated vol row ``sigma(t_n, .)``.

    Every bucket of a path sees the same shock ``xi[p]``.
    """
    n, end = state.step, _end(state, end)
    xi = np.broadcast_to(np.asarray(xi, dtype=float), state.mm_log.shape)
    vols = np.ascontiguousarray(grid.sigma[n, n + 1:end][None, :])
    _advance(state.forwards, state.mm_log, np.ascontiguousarray(xi), n, end, state.dt, vols)
    state.step = n + 1
    return state


# ---------------------------------------------------------------- strikes

def strike_row(state: PathState, base: ForwardCurve):
    """``x(t_n, tau_j) = f(t_n, tau_j) - f(0, tau_j)`` for buckets ``j >= n``."""
    n = state.step
    nb = state.forwards.shape[1]
    return state.forwards[..., n:] - base.rates[n:nb]


@dataclass
class TenorBlocks:
    """Quoted tenors that split live maturities into blocks for the
    long-expiry strike rule.

    At step ``n`` the block of tenor ``N`` holds buckets
    ``[n + N_prev/dt, n + N/dt)``; each shares the strike of the swap
    spanning ``t_n`` to ``t_n + N``.
    """

    tenors: tuple
    disc0: DiscountCurve
    payment_interval: float = 1.0

    def __post_init__(self):
        self.tenors = tuple(sorted(float(t) for t in self.tenors))
        if not self.tenors or self.tenors[0] <= 0:
            raise ValidationError("tenor blocks need positive tenors")
        dt = self.disc0.dt
        self.widths = [int(round(t / dt)) for t in self.tenors]
        self._atm = {}

    def atm(self, n, tenor):
        key = (n, tenor)
        if key not in self._atm:
            self._atm[key] = atm_swap_rate(self.disc0, n * self.disc0.dt, tenor,
                                           self.payment_interval)
        return self._atm[key]

    def row_end(self, n, end):
        """First block edge at or past ``end`` (the buckets a strike row needs)."""
        for w in self.widths:
            if n + w >= end:
                return n + w
        return end


def strike_row_longexpiry(state: PathState, base: ForwardCurve, cutoff, blocks: TenorBlocks):
    """Strikes with the swap-rate substitution once ``t_n > cutoff``.

    Buckets in the tenor-``N`` block get the path's par rate for the swap
    from ``t_n`` to ``t_n + N`` minus that swap's time-0 forward ATM rate.
    Buckets past the longest tenor keep ``f(t_n, tau) - f(0, tau)``.
    """
    x = strike_row(state, base)
    n, dt = state.step, state.dt
    if cutoff is None or not n * dt > cutoff + 1e-12:
        return x
    x = np.array(x, dtype=float, copy=True)
    live = x.shape[-1]
    lo = 0
    for tenor, w in zip(blocks.tenors, blocks.widths):
        if lo >= live or n + w > state.forwards.shape[-1]:
            break
        _, pays = payment_indices(n * dt, tenor, blocks.payment_interval, dt)
        logb = -dt * np.cumsum(state.forwards[..., n:n + w], axis=-1)
        b_pay = np.exp(logb[..., pays - n - 1])
        rs = (1.0 - b_pay[..., -1]) / b_pay.sum(axis=-1)
        x[..., lo:min(w, live)] = (rs - blocks.atm(n, tenor))[..., None]
        lo = w
    return x


def step_local_vol(state: PathState, lv: LocalVolSurface, base: ForwardCurve, xi,
                   cutoff=None, blocks: TenorBlocks | None = None, end=None):
    """Advance one step with local vols read at each bucket's strike.

    Returns ``(state, clamp_count)``.
    """
    n, end = state.step, _end(state, end)
    if cutoff is not None and blocks is not None:
        x = strike_row_longexpiry(state, base, cutoff, blocks)
    else:
        x = strike_row(state, base)
    strikes = np.ascontiguousarray(np.atleast_2d(x)[:, 1:end - n])
    vols = np.empty_like(strikes)
    clamps, bad = _local_vol_row(lv.table.coefs, lv.first_row, lv.offsets, lv.params,
                                 n, n + 1, strikes, vols)
    if bad >= 0:
        p, k = divmod(bad, strikes.shape[1])
        raise LocalVolError(
            f"non-finite local variance at (i={n}, j={n + 1 + k}, x={strikes[p, k]:.6g}) on path {p}")
    xi = np.ascontiguousarray(np.broadcast_to(np.asarray(xi, dtype=float), state.mm_log.shape))
    _advance(state.forwards, state.mm_log, xi, n, end, state.dt, vols)
    state.step = n + 1
    return state, clamps


# ---------------------------------------------------------------- simulation

@dataclass
class Moments:
    """Mergeable count/mean/M2 accumulator over the last axis of keys."""

    n: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def of(cls, y):
        mean = y.mean(axis=0)
        return cls(y.shape[0], mean, ((y - mean) ** 2).sum(axis=0))

    def merge(self, other: "Moments") -> "Moments":
        if self.n == 0:
            return other
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.n / n)
        m2 = self.m2 + other.m2 + delta * delta * (self.n * other.n / n)
        return Moments(n, mean, m2)

    @property
    def stderr(self):
        if self.n < 2:
            return np.zeros_like(self.mean)
        return np.sqrt(self.m2 / (self.n - 1) / self.n)


@dataclass
class PathEnsemble:
    """Streaming estimator state: one observation per key per (pair of) path(s)."""

    keys: list
    moments: Moments
    n_paths: int
    clamps: np.ndarray = field(default=None)
    queries: np.ndarray = field(default=None)

    def index(self, key):
        return self._idx[key]

    def __post_init__(self):
        self._idx = {k: i for i, k in enumerate(self.keys)}

    def mean(self, key):
        return float(self.moments.mean[self._idx[key]])

    def stderr(self, key):
        return float(self.moments.stderr[self._idx[key]])

    def clamp_rate(self, from_step=0):
        q = self.queries[from_step:].sum()
        return float(self.clamps[from_step:].sum() / q) if q else 0.0


def path_shocks(seed: int, first: int, count: int, n_steps: int) -> np.ndarray:
    """Standard normals for streams ``first .. first+count-1`` (rows)."""
    out = np.empty((count, n_steps))
    for r in range(count):
        bitgen = np.random.Philox(key=seed, counter=[0, 0, 0, first + r])
        out[r] = np.random.Generator(bitgen).standard_normal(n_steps)
    return out


class Simulator:
    """Runs chunks of paths for one model and one observer.

    ``model`` is a ForwardVolGrid (constant-vol mode) or a LocalVolSurface.
    ``observer`` exposes ``requests()`` -> {step: end_bucket}, ``keys`` and
    ``observe(step, state)`` -> (key indices, values[P, k]).
    """

    def __init__(self, cfg: SimConfig, fwd0: ForwardCurve, disc0: DiscountCurve, model,
                 observer, blocks: TenorBlocks | None = None):
        self.cfg, self.fwd0, self.disc0 = cfg, fwd0, disc0
        self.model, self.observer = model, observer
        self.blocks = blocks
        if cfg.mode == "const" and not isinstance(model, ForwardVolGrid):
            raise ValidationError("constant-vol mode needs a ForwardVolGrid")
        if cfg.mode == "lv" and not isinstance(model, LocalVolSurface):
            raise ValidationError("local-vol mode needs a LocalVolSurface")
        if abs(fwd0.dt - cfg.dt) > 1e-12:
            raise ValidationError(f"curve dt {fwd0.dt} != simulation dt {cfg.dt}")
        self.nb = model.sigma.shape[1] if cfg.mode == "const" else model.first_row.shape[1]
        if len(fwd0) < self.nb:
            raise ValidationError("forward curve shorter than the vol grid")
        req = observer.requests()
        self.n_steps = max(req) if req else 0
        self.ends = self._plan(req)

    @property
    def fallback(self):
        c = self.cfg.long_expiry_cutoff
        return (self.cfg.mode == "lv" and c is not None and math.isfinite(c)
                and self.blocks is not None)

    def _plan(self, req):
        need = np.zeros(self.n_steps + 1, dtype=np.int64)
        for s, e in req.items():
            need[s] = max(need[s], e)
        if self.fallback:
            need = np.maximum.accumulate(need[::-1])[::-1]
            for n in range(self.n_steps):
                if n * self.cfg.dt > self.cfg.long_expiry_cutoff + 1e-12:
                    need[n] = self.blocks.row_end(n, need[n])
        ends = np.maximum.accumulate(need[::-1])[::-1]
        return np.minimum(np.maximum(ends, np.arange(self.n_steps + 1) + 1), self.nb)

    def chunks(self):
        size, n = self.cfg.chunk_size, self.cfg.n_paths
        return [(s, min(size, n - s)) for s in range(0, n, size)]

    def run_chunk(self, start, count):
        cfg = self.cfg
        if cfg.antithetic:
            z = path_shocks(cfg.seed, start // 2, count // 2, self.n_steps)
            z = np.concatenate((z, -z))
        else:
            z = path_shocks(cfg.seed, start, count, self.n_steps)
        state = PathState.initial(self.fwd0, count, self.nb)
        req = self.observer.requests()
        keys_n = len(self.observer.keys)
        values = np.zeros((count, keys_n))
        clamps = np.zeros(self.n_steps + 1, dtype=np.int64)
        queries = np.zeros(self.n_steps + 1, dtype=np.int64)
        for n in range(self.n_steps + 1):
            if n in req:
                idx, vals = self.observer.observe(n, state)
                values[:, idx] = vals
            if n == self.n_steps:
                break
            end = int(self.ends[n])
            if cfg.mode == "const":
                step_constant_vol(state, self.model, z[:, n], end)
            else:
                cutoff = cfg.long_expiry_cutoff if self.fallback else None
                _, c = step_local_vol(state, self.model, self.fwd0, z[:, n], cutoff,
                                      self.blocks, end)
                clamps[n] = c
                queries[n] = count * (end - n - 1)
        if cfg.antithetic:
            h = count // 2
            values = 0.5 * (values[:h] + values[h:])
        return Moments.of(values), clamps, queries

    def run(self) -> PathEnsemble:
        chunks = self.chunks()
        results = [None] * len(chunks)
        done = 0

        def work(i):
            return i, self.run_chunk(*chunks[i])

        try:
            if self.cfg.workers == 1:
                for i in range(len(chunks)):
                    results[i] = work(i)[1]
                    done += chunks[i][1]
            else:
                with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
                    for i, res in pool.map(work, range(len(chunks))):
                        results[i] = res
                        done += chunks[i][1]
        except MemoryError as exc:
            raise SimulationError(f"out of memory after {done} paths", done) from exc
        total = Moments(0, np.zeros(len(self.observer.keys)), np.zeros(len(self.observer.keys)))
        clamps = np.zeros(self.n_steps + 1, dtype=np.int64)
        queries = np.zeros(self.n_steps + 1, dtype=np.int64)
        for mom, c, q in results:
            total = total.merge(mom)
            clamps += c
            queries += q
        log.info("simulated %d paths over %d steps (%s mode)", self.cfg.n_paths, self.n_steps,
                 self.cfg.mode)
        return PathEnsemble(list(self.observer.keys), total, self.cfg.n_paths, clamps, queries)


def simulate(cfg: SimConfig, fwd0: ForwardCurve, disc0: DiscountCurve, model, observer,
             blocks: TenorBlocks | None = None) -> PathEnsemble:
    """Run ``cfg.n_paths`` paths and return merged per-key estimators.

    ``blocks`` enables the long-expiry strike rule in local-vol mode.
    """
    return Simulator(cfg, fwd0, disc0, model, observer, blocks).run()


class MartingaleObserver:
    """Discounted zero-coupon bond ``MM(T) * 1`` paid at each maturity ``T``."""

    def __init__(self, maturities, dt):
        self.steps = {int(round(T / dt)): T for T in maturities}
        self.keys = [("bond", T) for T in maturities]

    def requests(self):
        return {s: s + 1 for s in self.steps}

    def observe(self, step, state):
        i = self.keys.index(("bond", self.steps[step]))
        return [i], state.money_market[:, None]


class CompositeObserver:
    def __init__(self, *observers):
        self.parts = observers
        self.keys = [k for o in observers for k in o.keys]
        self._offsets = np.cumsum([0] + [len(o.keys) for o in observers])

    def requests(self):
        out = {}
        for o in self.parts:
            for s, e in o.requests().items():
                out[s] = max(out.get(s, 0), e)
        return out

    def observe(self, step, state):
        idx, vals = [], []
        for off, o in zip(self._offsets, self.parts):
            if step in o.requests():
                i, v = o.observe(step, state)
                idx.extend(off + np.asarray(i))
                vals.append(v)
        return idx, np.concatenate(vals, axis=1)
