"""Command-line pipeline: fixtures, calibrate, simulate, price, report, run.

Every subcommand accepts ``--config FILE``, a flat ``key = value`` text file
whose keys are :class:`RunConfig` fields; command-line flags override it.
The default output directory comes from ``$HJMLV_OUT`` (else ``./out``).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import functools
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .curve import TimeGrid, discounts_from_forwards, read_curve_csv, write_curve_csv
from .engine import (CompositeObserver, MartingaleObserver, SimConfig, TenorBlocks,
                     simulate)
from .errors import HJMLVError, ValidationError
from .localvol import D_MIN, V_MAX, V_MIN, W_FLOOR, build_local_vol_surface, lv_dump
from .market import (QuoteSurface, fixture_curve, fixture_surface, read_surface_csv,
                     write_surface_csv)
from .pricer import (REPORT_HEADER, RESULTS_HEADER, PriceResult, SwaptionObserver,
                     SwaptionSpec, comparison_report, price_swaption, results_rows,
                     write_rows_csv)
from .smallvol import calibrate_surface
from .smile import X0, XD, XU, build_variance_grid, check_knots, fit_smile_table, smile_dump

log = logging.getLogger("hjmlv")

OUT_ENV = "HJMLV_OUT"
GRID_HEADER = ["calendar_index", "maturity_index", "strike_offset", "sigma"]
SMILE_HEADER = ["calendar_index", "maturity_index", "x", "w_fitted"]
LV_HEADER = ["calendar_index", "maturity_index", "x", "v_local"]
MARTINGALE_MATURITIES = (1, 2, 5, 10, 20, 30)


def default_out_dir() -> str:
    return os.environ.get(OUT_ENV, "out")


@dataclass
class RunConfig:
    """Everything a pipeline run depends on; hashed into the manifest."""

    curve: str | None = None
    surface: str | None = None
    out_dir: str = field(default_factory=default_out_dir)
    fixtures: bool = False
    fixture_seed: int = 0
    interpolated_input: bool = False
    root: str = "larger"
    payment_interval: float = 1.0
    offsets: tuple | None = None
    x0: float = X0
    xd: float = XD
    xu: float = XU
    w_floor: float = W_FLOOR
    d_min: float = D_MIN
    v_min: float = V_MIN
    v_max: float = V_MAX
    n_paths: int = 100_000
    seed: int = 42
    mode: str = "lv"
    cutoff: float | None = None
    antithetic: bool = True
    chunk_size: int = 4096
    workers: int = 1

    def validate(self, need_inputs=True):
        if need_inputs and not self.fixtures:
            for name in ("curve", "surface"):
                path = getattr(self, name)
                if path is None:
                    raise ValidationError(f"{name} path required (or set fixtures = true)")
                if not Path(path).is_file():
                    raise ValidationError(f"{name} file not found: {path}")
        check_knots(self.x0, self.xd, self.xu)
        if self.root not in ("larger", "smaller"):
            raise ValidationError(f"root must be 'larger' or 'smaller', got {self.root!r}")
        self.sim_config()
        return self

    def sim_config(self) -> SimConfig:
        return SimConfig(n_paths=self.n_paths, dt=0.25, seed=self.seed, mode=self.mode,
                         long_expiry_cutoff=self.cutoff, antithetic=self.antithetic,
                         chunk_size=self.chunk_size, workers=self.workers)

    def lv_limits(self):
        return dict(w_floor=self.w_floor, d_min=self.d_min, v_min=self.v_min, v_max=self.v_max)

    def to_dict(self):
        d = dataclasses.asdict(self)
        if d["offsets"] is not None:
            d["offsets"] = list(d["offsets"])
        return d

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        values = {}
        with open(path) as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValidationError(f"{path}:{lineno}: expected key = value")
                key, val = (s.strip() for s in line.split("=", 1))
                values[key] = val.strip("\"'")
        return cls.from_strings(values, where=str(path))

    @classmethod
    def from_strings(cls, values, where="config") -> "RunConfig":
        types = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, val in values.items():
            if key not in types:
                raise ValidationError(f"{where}: unknown key {key!r}")
            kwargs[key] = _coerce(key, val, types[key], where)
        return cls(**kwargs)


_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}
_NONE = {"", "none", "null", "off"}


def _coerce(key, val, f, where):
    default = f.default_factory() if f.default is dataclasses.MISSING else f.default
    if not isinstance(val, str):
        return val
    low = val.lower()
    try:
        if key == "offsets":
            return None if low in _NONE else tuple(float(v) for v in val.split(","))
        if key == "cutoff":
            return None if low in _NONE or low in ("inf", "infinity") else float(val)
        if key in ("curve", "surface"):
            return None if low in _NONE else val
        if isinstance(default, bool):
            return _BOOL[low]
        if isinstance(default, int):
            return int(val)
        if isinstance(default, float):
            return float(val)
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"{where}: bad value {val!r} for {key}") from exc
    return val


# ---------------------------------------------------------------- stages

class StageError(Exception):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage


@dataclass
class Models:
    """Calibrated objects shared by the simulate, price and report stages."""

    grid: TimeGrid
    fwd: object
    disc: object
    surface: QuoteSurface
    grids: dict
    extended: dict
    table: object
    lv: object


def _stage(name):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            log.info("stage=%s status=start", name)
            try:
                out = fn(*args, **kwargs)
            except (HJMLVError, ValueError, OSError) as exc:
                raise StageError(name, exc) from exc
            log.info("stage=%s status=done", name)
            return out
        return run
    return wrap


@_stage("fixtures")
def write_fixtures(surface_path, curve_path, seed=0):
    """Write the synthetic curve and quote surface."""
    grid = TimeGrid()
    Path(surface_path).parent.mkdir(parents=True, exist_ok=True)
    Path(curve_path).parent.mkdir(parents=True, exist_ok=True)
    write_curve_csv(curve_path, fixture_curve(grid))
    write_surface_csv(surface_path, fixture_surface(seed))


@_stage("inputs")
def load_inputs(cfg: RunConfig):
    fwd = read_curve_csv(cfg.curve)
    surface = read_surface_csv(cfg.surface)
    if cfg.offsets is not None:
        keep = [q for q in surface.quotes()
                if any(abs(q.strike_offset - x) < 1e-12 for x in cfg.offsets)]
        missing = [x for x in cfg.offsets if not any(abs(x - o) < 1e-12 for o in surface.offsets)]
        if missing:
            raise ValidationError(f"offsets {missing} not quoted in {cfg.surface}")
        surface = QuoteSurface(keep)
    return fwd, surface


@_stage("calibrate")
def calibrate(cfg: RunConfig, fwd, surface):
    grid = TimeGrid(dt=fwd.dt, n_steps=len(fwd))
    disc = discounts_from_forwards(fwd, grid)
    grids = calibrate_surface(surface, disc, grid, cfg.interpolated_input, cfg.root,
                              cfg.payment_interval)
    return grid, disc, grids


@_stage("localvol")
def build_lv(cfg: RunConfig, grids):
    ext = {x: g.extended() for x, g in grids.items()}
    table = fit_smile_table(build_variance_grid(ext), cfg.x0, cfg.xd, cfg.xu)
    return ext, table, build_local_vol_surface(table, ext, **cfg.lv_limits())


def build_models(cfg: RunConfig) -> Models:
    """Calibrate every offset, fit smiles and build the local-vol surface."""
    fwd, surface = load_inputs(cfg)
    grid, disc, grids = calibrate(cfg, fwd, surface)
    ext, table, lv = build_lv(cfg, grids)
    return Models(grid, fwd, disc, surface, grids, ext, table, lv)


def quote_specs(surface: QuoteSurface, payment_interval=1.0):
    return [SwaptionSpec.otm(q.expiry, q.tenor, q.strike_offset, payment_interval)
            for q in surface.quotes()]


@_stage("simulate")
def run_simulation(cfg: RunConfig, models: Models, specs, martingale=False):
    """Simulate ``specs`` (plus discounted bonds when ``martingale``)."""
    sim = cfg.sim_config()
    obs = SwaptionObserver(specs, models.disc)
    if martingale:
        obs = CompositeObserver(obs, MartingaleObserver(MARTINGALE_MATURITIES, sim.dt))
    if sim.mode == "const":
        if 0.0 not in models.extended:
            raise ValidationError("constant-vol mode needs ATM quotes (offset 0)")
        model = models.extended[0.0]
    else:
        model = models.lv
    blocks = TenorBlocks(models.surface.tenors, models.disc, cfg.payment_interval)
    ens = simulate(sim, models.fwd, models.disc, model, obs, blocks)
    if sim.mode == "lv":
        log.info("stage=simulate clamp_rate=%.3g", ens.clamp_rate())
    return ens


@_stage("price")
def price_all(ensemble, specs, models: Models):
    out = []
    for s in specs:
        key = (s.expiry, s.tenor, s.strike_offset)
        mkt = models.surface.vol(*key) if key in models.surface else None
        r = price_swaption(ensemble, s, models.disc, mkt)
        if r.inversion_failed:
            log.warning("stage=price implied vol inversion failed for %s", key)
        out.append(r)
    return out


@_stage("report")
def write_report(path, results, surface):
    rows, unmatched = comparison_report(results, surface)
    if unmatched:
        log.warning("stage=report %d results without quotes", len(unmatched))
    write_rows_csv(path, REPORT_HEADER, rows)
    return rows


def write_grid_csv(path, grids):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRID_HEADER)
        for x in sorted(grids):
            g = grids[x]
            for i, j in zip(*np.nonzero(g.calibrated)):
                w.writerow([int(i), int(j), repr(float(x)), repr(float(g.sigma[i, j]))])


def read_results_csv(path):
    results = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            spec = SwaptionSpec.otm(float(row["expiry"]), float(row["tenor"]),
                                    float(row["strike_offset"]))
            results.append(PriceResult(spec, float(row["mc_price"]), float(row["mc_stderr"]),
                                       0, float(row["model_implied_vol"])))
    return results


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def plan(cfg: RunConfig):
    steps = ["fixtures"] if cfg.fixtures else []
    return steps + ["inputs", "calibrate", "localvol", "simulate", "price", "report", "manifest"]


def run_pipeline(cfg: RunConfig, dry_run=False, stream=None):
    """Full pipeline into ``cfg.out_dir``; returns the manifest dict.

    With ``dry_run`` the config is validated and the stage plan printed.
    """
    stream = sys.stdout if stream is None else stream
    out = Path(cfg.out_dir)
    if cfg.fixtures:
        cfg = dataclasses.replace(cfg, curve=str(out / "curve.csv"),
                                  surface=str(out / "surface.csv"))
    cfg.validate(need_inputs=not (dry_run or cfg.fixtures))
    if dry_run:
        for k, name in enumerate(plan(cfg), 1):
            print(f"{k}. {name}", file=stream)
        return None
    out.mkdir(parents=True, exist_ok=True)
    if cfg.fixtures:
        write_fixtures(cfg.surface, cfg.curve, cfg.fixture_seed)
    models = build_models(cfg)
    outputs = {"grid": out / "grid.csv", "results": out / "results.csv",
               "report": out / "report.csv"}
    write_grid_csv(outputs["grid"], models.grids)
    specs = quote_specs(models.surface, cfg.payment_interval)
    ens = run_simulation(cfg, models, specs)
    results = price_all(ens, specs, models)
    write_rows_csv(outputs["results"], RESULTS_HEADER, results_rows(results))
    write_report(outputs["report"], results, models.surface)
    manifest = {
        "version": __version__,
        "config": cfg.to_dict(),
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "inputs": {"curve": sha256_file(cfg.curve), "surface": sha256_file(cfg.surface)},
        "outputs": {k: sha256_file(p) for k, p in outputs.items()},
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


# ---------------------------------------------------------------- argparse

def _pair(text):
    try:
        i, j = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected i,j got {text!r}") from exc
    return i, j


def _triple(text):
    try:
        e, n, x = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected expiry,tenor,offset got {text!r}") from exc
    return e, n, x


def _inputs(p):
    p.add_argument("--curve", help="forward curve CSV")
    p.add_argument("--surface", help="quote surface CSV")
    p.add_argument("--interpolated-input", action="store_true", default=None,
                   help="bootstrap every grid expiry via total-variance interpolation")
    p.add_argument("--root", choices=("larger", "smaller"))


def _sim(p):
    p.add_argument("--mode", choices=("lv", "const"))
    p.add_argument("--paths", dest="n_paths", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--cutoff", type=float, help="long-expiry strike cutoff in years")
    p.add_argument("--workers", type=int)
    p.add_argument("--chunk-size", type=int)
    p.add_argument("--no-antithetic", dest="antithetic", action="store_false", default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="hjmlv", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="INFO")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixtures", help="write the synthetic curve and surface")
    p.add_argument("--out", help="surface CSV path")
    p.add_argument("--curve-out", help="curve CSV path (default: next to --out)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("calibrate", help="bootstrap forward vols per strike offset")
    _inputs(p)
    p.add_argument("--out", required=True, help="grid CSV path")

    p = sub.add_parser("simulate", help="Monte Carlo prices for every quoted swaption")
    _inputs(p)
    _sim(p)
    p.add_argument("--out", required=True, help="results CSV path")

    p = sub.add_parser("price", help="price individual swaptions")
    _inputs(p)
    _sim(p)
    p.add_argument("--spec", type=_triple, action="append", required=True,
                   help="expiry,tenor,offset (repeatable)")
    p.add_argument("--out", help="results CSV path (default: stdout)")

    p = sub.add_parser("report", help="comparison, smile and local-vol CSVs")
    _inputs(p)
    p.add_argument("--results", help="results CSV from simulate")
    p.add_argument("--all", action="store_true", help="market vs model for every result")
    p.add_argument("--smile", type=_pair, help="dump fitted smile at i,j")
    p.add_argument("--lv", type=_pair, help="dump local vol at i,j")
    p.add_argument("--out", required=True, help="output CSV path")

    p = sub.add_parser("run", help="full pipeline into an output directory")
    p.add_argument("--out-dir")
    p.add_argument("--fixtures", action="store_true", default=None,
                   help="generate fixture inputs first")
    p.add_argument("--dry-run", action="store_true", help="validate and print the plan")
    _inputs(p)
    _sim(p)

    for name, sp in sub.choices.items():
        if name != "fixtures":
            sp.add_argument("--config", help="flat key = value config file")
    return parser


_CFG_KEYS = {f.name for f in dataclasses.fields(RunConfig)}


def config_from_args(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {k: v for k, v in vars(args).items() if k in _CFG_KEYS and v is not None}
    return dataclasses.replace(cfg, **overrides)


def _write_or_print(path, header, rows):
    if path:
        write_rows_csv(path, header, rows)
        return
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{r[h]:.12g}" if isinstance(r[h], float) else r[h] for h in header])


def _dispatch(args):
    if args.command == "fixtures":
        surface = args.out or str(Path(default_out_dir()) / "surface.csv")
        curve = args.curve_out or str(Path(surface).with_name("curve.csv"))
        write_fixtures(surface, curve, args.seed)
        return 0
    cfg = config_from_args(args)
    if args.command == "run":
        run_pipeline(cfg, dry_run=args.dry_run)
        return 0
    if args.command == "report" and args.all:
        if not args.results or not cfg.surface:
            raise ValidationError("report --all needs --results and --surface")
        write_report(args.out, read_results_csv(args.results), read_surface_csv(cfg.surface))
        return 0
    cfg.validate()
    models = build_models(cfg)
    if args.command == "calibrate":
        write_grid_csv(args.out, models.grids)
    elif args.command in ("simulate", "price"):
        if args.command == "price":
            specs = [SwaptionSpec.otm(e, n, x, cfg.payment_interval) for e, n, x in args.spec]
        else:
            specs = quote_specs(models.surface, cfg.payment_interval)
        results = price_all(run_simulation(cfg, models, specs), specs, models)
        _write_or_print(args.out, RESULTS_HEADER, results_rows(results))
    elif args.command == "report":
        if args.smile:
            rows = smile_dump(models.table, *args.smile)
            header = SMILE_HEADER
        elif args.lv:
            rows = lv_dump(models.lv, *args.lv)
            header = LV_HEADER
        else:
            raise ValidationError("report needs one of --all, --smile i,j, --lv i,j")
        write_rows_csv(args.out, header, [dict(zip(header, r)) for r in rows])
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                        format="%(asctime)s level=%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except StageError as exc:
        log.error("stage=%s error=%s", exc.stage, exc)
        return 2
    except (HJMLVError, ValueError, OSError) as exc:
        log.error("error=%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
