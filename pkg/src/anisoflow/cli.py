"""Command line interface.

Subcommands: evolve (run a surface evolution), k0 (build a stabilizer
table), classify (weak/strong anisotropy), distance (symmetric-difference
volume between two OBJ surfaces), convergence (refinement study).

Run configuration is flat ``key = value`` text; every key has a matching
command line flag that overrides it one-for-one.  Exit codes: 0 success,
2 configuration error, 3 solver nonconvergence, 4 structure violation,
5 topology or geometry error.
"""

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .anisotropy import (
    Ellipsoidal,
    FourFold,
    Isotropic,
    LrNorm,
    RegularizedBGN,
    classify,
)
from .diagnostics import convergence_suite, manifold_distance
from .errors import AnisoflowError, ConfigError
from .mesh import make_cuboid, make_ellipsoid, read_obj
from .reporting import save_convergence_figure, save_series_figures
from .solver import SERIES_COLUMNS, StepperConfig, evolve
from .stabilizer import StabilizerTable, build_table, grid_normal, k0_at, model_hash

_SHAPES = ("cuboid", "ellipsoid", "obj")
_FORMATS = ("obj", "vtk")


def parse_config_text(text, source="<config>"):
    """Parse flat ``key = value`` lines into an ordered dict.

    Blank lines and ``#`` comments are ignored.  Malformed lines and
    duplicate keys raise ConfigError naming the line.
    """
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in entries:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        entries[key] = value
    return entries


def _float_of(key, value):
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"key {key!r}: expected a number, got {value!r}")


def _int_of(key, value):
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"key {key!r}: expected an integer, got {value!r}")


def _bool_of(key, value):
    low = str(value).strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"key {key!r}: expected true/false, got {value!r}")


def _floats_of(key, value, counts):
    parts = [p for p in str(value).replace(";", ",").split(",") if p.strip()]
    vals = [_float_of(key, p) for p in parts]
    if len(vals) not in counts:
        raise ConfigError(
            f"key {key!r}: expected {' or '.join(map(str, counts))} numbers"
        )
    return vals


def _matrix_of(spec, text):
    vals = _floats_of("model", text, (3, 9))
    if len(vals) == 3:
        return np.diag(vals)
    return np.array(vals).reshape(3, 3)


def parse_model(spec):
    """Model spec -> AnisotropyModel.

    Accepted forms: ``isotropic``, ``fourfold:<beta>``, ``lrnorm:<r>``,
    ``ellipsoidal:<3 or 9 numbers>`` (diagonal or full symmetric matrix),
    ``bgn:<r>:<matrix>;<matrix>;...`` with each matrix 3 or 9 numbers.
    """
    name, _, rest = str(spec).partition(":")
    name = name.strip().lower()
    try:
        if name == "isotropic":
            if rest:
                raise ConfigError("isotropic takes no parameters")
            return Isotropic()
        if name == "fourfold":
            return FourFold(_float_of("model", rest))
        if name == "lrnorm":
            return LrNorm(_float_of("model", rest))
        if name == "ellipsoidal":
            return Ellipsoidal(_matrix_of(spec, rest))
        if name in ("bgn", "regularizedbgn"):
            r_text, _, mats_text = rest.partition(":")
            mats = [m for m in mats_text.split(";") if m.strip()]
            if not mats:
                raise ConfigError(f"model {spec!r}: no matrices given")
            return RegularizedBGN(
                _float_of("model", r_text), [_matrix_of(spec, m) for m in mats]
            )
    except ValueError as exc:
        raise ConfigError(f"model {spec!r}: {exc}")
    raise ConfigError(
        f"unknown model {spec!r}; expected isotropic, fourfold:<beta>, "
        "lrnorm:<r>, ellipsoidal:<G>, or bgn:<r>:<G>;<G>;..."
    )


# evolve configuration keys, their parsers and defaults (REQUIRED means
# the key must come from the config file or a flag)
_REQUIRED = object()
_EVOLVE_KEYS = {
    "shape": (str, _REQUIRED),
    "extent": (str, ""),
    "mesh_file": (str, ""),
    "model": (str, _REQUIRED),
    "stabilizer": (str, "exact"),
    "stabilizer_tol": (_float_of, 1e-3),
    "k": (_float_of, None),
    "h": (_float_of, None),
    "tau": (_float_of, None),
    "T": (_float_of, _REQUIRED),
    "outdir": (str, _REQUIRED),
    "snapshot_every": (_int_of, None),
    "formats": (str, "obj"),
    "tol_x": (_float_of, 1e-12),
    "tol_mu": (_float_of, 1e-12),
    "max_newton": (_int_of, 50),
    "figures": (_bool_of, True),
}


@dataclass
class RunConfig:
    """Fully resolved evolve-run configuration."""

    values: dict

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key)


def resolve_run_config(entries):
    """Typed RunConfig from raw string entries, with defaults applied."""
    unknown = set(entries) - set(_EVOLVE_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    values = {}
    for key, (parse, default) in _EVOLVE_KEYS.items():
        if key in entries:
            raw = entries[key]
            values[key] = parse(key, raw) if parse is not str else str(raw)
        elif default is _REQUIRED:
            raise ConfigError(f"missing required config key {key!r}")
        else:
            values[key] = default
    shape = values["shape"].strip().lower()
    if shape not in _SHAPES:
        raise ConfigError(f"key 'shape': expected one of {_SHAPES}, got {shape!r}")
    values["shape"] = shape
    if shape == "obj":
        if not values["mesh_file"]:
            raise ConfigError("shape 'obj' requires key 'mesh_file'")
    else:
        if not values["extent"]:
            raise ConfigError(f"shape {shape!r} requires key 'extent' (a,b,c)")
        if values["h"] is None:
            raise ConfigError(f"shape {shape!r} requires key 'h'")
    if values["tau"] is None:
        if values["h"] is None:
            raise ConfigError("key 'tau' is required when 'h' is not given")
        values["tau"] = 0.08 * values["h"] ** 2
    if values["snapshot_every"] is not None and values["snapshot_every"] < 1:
        raise ConfigError("key 'snapshot_every': cadence must be >= 1")
    formats = tuple(
        f.strip().lower() for f in values["formats"].split(",") if f.strip()
    )
    for fmt in formats:
        if fmt not in _FORMATS:
            raise ConfigError(f"key 'formats': unknown format {fmt!r}")
    if not formats:
        raise ConfigError("key 'formats': at least one of obj,vtk")
    values["formats"] = ",".join(formats)
    for key in ("stabilizer_tol", "T"):
        if values[key] <= 0:
            raise ConfigError(f"key {key!r} must be positive")
    return RunConfig(values)


def _fmt_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def manifest_text(values):
    lines = [f"# anisoflow {__version__} run manifest"]
    for key, value in values.items():
        if value is None:
            continue
        lines.append(f"{key} = {_fmt_value(value)}")
    return "\n".join(lines) + "\n"


def _build_shape(rc):
    if rc.shape == "obj":
        return read_obj(rc.mesh_file)
    a, b, c = _floats_of("extent", rc.extent, (3,))
    maker = make_cuboid if rc.shape == "cuboid" else make_ellipsoid
    return maker(a, b, c, rc.h)


def _raw_table(model, tol, cache_dir):
    """Raw exact-k0 table, disk-cached by model hash under cache_dir."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"k0_{model_hash(model)}_{tol:g}.txt"
    if path.exists():
        return StabilizerTable.load(path, model)
    print(f"building stabilizer table (cached to {path})", file=sys.stderr)
    raw = build_table(model, "exact", tol)
    raw.save(path)
    return raw


def _resolve_table(model, rc):
    if rc.k is not None:
        return StabilizerTable.constant(model, rc.k)
    raw = _raw_table(model, rc.stabilizer_tol, rc.outdir)
    if rc.stabilizer == "exact":
        return raw
    return StabilizerTable(raw.k0_values, rc.stabilizer, raw.tol, raw.model_hash)


def _series_line(row):
    cells = []
    for name, value in zip(SERIES_COLUMNS, row):
        if name in ("step", "newton_iters"):
            cells.append(str(int(value)))
        else:
            cells.append(f"{value:.17g}")
    return ",".join(cells)


def cmd_evolve(args):
    entries = {}
    if args.config:
        path = Path(args.config)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}")
        entries = parse_config_text(text, str(path))
    for key in _EVOLVE_KEYS:
        override = getattr(args, f"opt_{key}")
        if override is not None:
            entries[key] = override
    rc = resolve_run_config(entries)
    outdir = Path(rc.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    model = parse_model(rc.model)
    mesh = _build_shape(rc)
    table = _resolve_table(model, rc)
    cfg = StepperConfig(
        model,
        table,
        rc.tau,
        tol_x=rc.tol_x,
        tol_mu=rc.tol_mu,
        max_newton=rc.max_newton,
    )
    (outdir / "manifest.txt").write_text(manifest_text(rc.values))
    formats = rc.formats.split(",")

    def on_snapshot(state):
        stem = outdir / f"mesh_{state.step}"
        if "obj" in formats:
            state.mesh.write_obj(f"{stem}.obj")
        if "vtk" in formats:
            state.mesh.write_vtk(f"{stem}.vtk", model=model, mu=state.mu)

    with open(outdir / "series.csv", "w") as series:
        series.write(",".join(SERIES_COLUMNS) + "\n")
        rows = []

        def on_row(row):
            rows.append(row)
            series.write(_series_line(row) + "\n")

        result = evolve(
            mesh,
            cfg,
            T=rc.T,
            on_row=on_row,
            on_snapshot=on_snapshot,
            snapshot_every=rc.snapshot_every,
        )
    if rc.figures:
        save_series_figures(rows, outdir)
    final = result.series[-1]
    print(
        f"completed {final[0]} steps to t = {final[1]:.17g}; "
        f"dV_rel = {final[3]:.3e}, W/W0 = {final[5]:.12g}"
    )
    return 0


def cmd_k0(args):
    model = parse_model(args.model)
    tol = args.tol
    out = Path(args.out)

    def progress(done, total):
        if args.progress:
            print(f"\rk0 nodes {done}/{total}", end="", file=sys.stderr)
            if done == total:
                print(file=sys.stderr)

    if args.witness:
        vals = np.empty((11, 11))
        for i, sign in ((0, -1.0), (10, 1.0)):
            k, (u, v) = k0_at(model, np.array([0.0, 0.0, sign]), tol, True)
            vals[i, :] = k
            _print_witness(i, "*", k, u, v)
        for i in range(1, 10):
            for j in range(10):
                k, (u, v) = k0_at(model, grid_normal(i, j), tol, True)
                vals[i, j] = k
                _print_witness(i, j, k, u, v)
            vals[i, 10] = vals[i, 0]
        table = StabilizerTable(vals, args.strategy, tol, model_hash(model))
    else:
        table = build_table(model, args.strategy, tol, progress=progress)
    table.save(out)
    raw = table.k0_values
    print(f"wrote {out}")
    print(f"k0 range [{raw.min():.17g}, {raw.max():.17g}]")
    if table.strategy != "exact":
        applied = table.values
        print(
            f"{table.strategy} range [{applied.min():.17g}, {applied.max():.17g}]"
        )
    return 0


def _print_witness(i, j, k, u, v):
    u_text = ",".join(f"{c:.10g}" for c in u)
    v_text = ",".join(f"{c:.10g}" for c in v)
    print(f"node ({i},{j}): k0 = {k:.17g}  u = {u_text}  v = {v_text}")


def cmd_classify(args):
    model = parse_model(args.model)
    outcome = classify(model, sample_count=args.samples)
    print(outcome.kind)
    print(
        "tangential Hessian eigenvalues in "
        f"[{outcome.lambda_min:.17g}, {outcome.lambda_max:.17g}] "
        f"over {outcome.sample_count} samples"
    )
    if outcome.kind == "Strong":
        n_text = ",".join(f"{c:.10g}" for c in outcome.witness_normal)
        t_text = ",".join(f"{c:.10g}" for c in outcome.witness_tangent)
        print(f"witness normal = {n_text}")
        print(f"witness tangent = {t_text}")
    return 0


def cmd_distance(args):
    mesh_a = read_obj(args.mesh_a)
    mesh_b = read_obj(args.mesh_b)
    res = manifold_distance(mesh_a, mesh_b, quad_level=args.quad_level)
    print(f"manifold_distance = {res.value:.17g}")
    print(f"converged = {'true' if res.converged else 'false'} "
          f"({res.directions} directions)")
    return 0


def cmd_convergence(args):
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    report = convergence_suite(
        args.case,
        table_provider=lambda model: _raw_table(model, args.tol, outdir),
        quad_level=args.quad_level,
        on_progress=lambda msg: print(msg, file=sys.stderr),
    )
    csv_path = outdir / f"convergence_case{report.case}.csv"
    csv_path.write_text(report.to_csv())
    table_text = report.format_table()
    (outdir / f"convergence_case{report.case}.txt").write_text(table_text)
    save_convergence_figure(report, outdir)
    print(table_text, end="")
    if report.failures:
        print(f"{len(report.failures)} leg(s) failed; see report", file=sys.stderr)
        return 1
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="anisoflow",
        description="Structure-preserving anisotropic surface diffusion.",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evolve", help="run a surface evolution")
    p.add_argument("--config", help="key = value configuration file")
    for key in _EVOLVE_KEYS:
        p.add_argument(
            f"--{key.replace('_', '-')}",
            dest=f"opt_{key}",
            metavar="V",
            help=f"override config key {key!r}",
        )
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("k0", help="build and save a stabilizer table")
    p.add_argument("model", help="model spec, e.g. fourfold:0.25")
    p.add_argument("--out", default="k0_table.txt", help="output table path")
    p.add_argument("--strategy", default="exact", help="exact | plus:<c> | sup")
    p.add_argument("--tol", type=float, default=1e-3, help="bisection tolerance")
    p.add_argument(
        "--witness", action="store_true",
        help="print the tightest-constraint pair at every node",
    )
    p.add_argument("--progress", action="store_true", help="progress to stderr")
    p.set_defaults(func=cmd_k0)

    p = sub.add_parser("classify", help="weak/strong anisotropy classification")
    p.add_argument("model", help="model spec, e.g. fourfold:0.5")
    p.add_argument("--samples", type=int, default=2000, help="directions sampled")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("distance", help="symmetric-difference volume of two OBJ meshes")
    p.add_argument("mesh_a")
    p.add_argument("mesh_b")
    p.add_argument("--quad-level", type=int, default=0, help="starting ray level")
    p.set_defaults(func=cmd_distance)

    p = sub.add_parser("convergence", help="run one convergence case (1..6)")
    p.add_argument("case", type=int, help="case identifier, 1 through 6")
    p.add_argument("--outdir", default="convergence_out", help="output directory")
    p.add_argument("--tol", type=float, default=1e-3, help="stabilizer tolerance")
    p.add_argument("--quad-level", type=int, default=0, help="starting ray level")
    p.set_defaults(func=cmd_convergence)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except AnisoflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
