"""Error metrics and the mesh-refinement convergence harness.

The distance between two closed surfaces is measured as the volume of the
symmetric difference of their enclosed regions, estimated by radial
integration over a quasi-uniform set of ray directions.  On top of that
sit trajectory snapshots, the numerical-error evaluator, and the
six-case convergence study on the 2 x 2 x 1 cuboid.
"""

from bisect import bisect_left
from dataclasses import dataclass

import numpy as np

from .anisotropy import FourFold, LrNorm
from .errors import ConfigError
from .mesh import make_cuboid
from .solver import StepperConfig, evolve
from .stabilizer import StabilizerTable, build_table

_BASE_DIRECTIONS = 4096
_MAX_DIRECTIONS = 262144
_DISTANCE_RTOL = 1e-3

# convergence-study cases: energy model and stabilizer strategy
CASES = {
    1: (FourFold(0.25), "exact"),
    2: (FourFold(0.5), "exact"),
    3: (LrNorm(4.0), "exact"),
    4: (LrNorm(4.0), "plus:1"),
    5: (LrNorm(4.0), "plus:2"),
    6: (LrNorm(4.0), "plus:5"),
}


@dataclass(frozen=True)
class DistanceResult:
    """Outcome of a manifold-distance estimate.

    Attributes
    ----------
    value : float
        Estimated volume of the symmetric difference.
    converged : bool
        Whether successive direction-set doublings agreed to the relative
        tolerance before the direction cap was reached.
    directions : int
        Number of ray directions used for the reported value.
    """

    value: float
    converged: bool
    directions: int

    def __float__(self):
        return self.value


def _volume_centroid(mesh):
    """Centroid of the enclosed region, via signed tetrahedra."""
    q = mesh.corner_positions()
    vt = np.einsum("fc,fc->f", q[:, 0], np.cross(q[:, 1], q[:, 2])) / 6.0
    return (vt[:, None] * q.sum(axis=1) / 4.0).sum(axis=0) / vt.sum()


def _mesh_key(mesh):
    return (
        len(mesh.vertices),
        len(mesh.triangles),
        mesh.enclosed_volume(),
        float(mesh.areas().sum()),
    )


def _frame(mesh):
    # orthonormal rows built from the first triangle, so the ray set
    # rotates and translates with the meshes and the estimate is
    # rigid-motion invariant up to round-off
    q = mesh.vertices[mesh.triangles[0]]
    e1 = q[1] - q[0]
    e1 = e1 / np.linalg.norm(e1)
    e3 = np.cross(q[1] - q[0], q[2] - q[0])
    e3 = e3 / np.linalg.norm(e3)
    return np.stack([e1, np.cross(e3, e1), e3])


def _fibonacci_directions(count):
    i = np.arange(count)
    z = 1.0 - (2.0 * i + 1.0) / count
    theta = (2.0 * np.pi / ((1.0 + np.sqrt(5.0)) / 2.0)) * i
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _ray_crossings(mesh, origin, dirs):
    """All positive ray-surface crossing radii.

    Returns (ray, t) arrays sorted by ray index then radius.  Candidate
    triangles per ray are pre-filtered by a conservative per-triangle
    direction cone, so the exact intersection test runs on a small set.
    """
    q = mesh.corner_positions()
    e1 = q[:, 1] - q[:, 0]
    e2 = q[:, 2] - q[:, 0]
    u = q - origin
    un = u / np.linalg.norm(u, axis=2, keepdims=True)
    axis = un.sum(axis=1)
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    cos_min = np.einsum("fc,flc->fl", axis, un).min(axis=1)
    # the cone test is only conservative while the cone stays acute;
    # wide cones (origin near the triangle plane) are never culled
    thresh = np.where(cos_min > 0.0, cos_min - 1e-9, -1.1)
    det_floor = 1e-13 * np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)
    tv = origin - q[:, 0]
    rows = []
    radii = []
    chunk = max(256, int(4.0e6 // len(q)))
    for lo in range(0, len(dirs), chunk):
        d = dirs[lo : lo + chunk]
        cr, cf = np.nonzero(d @ axis.T >= thresh[None, :])
        if not len(cr):
            continue
        dd = d[cr]
        p = np.cross(dd, e2[cf])
        det = np.einsum("pc,pc->p", e1[cf], p)
        ok = np.abs(det) > det_floor[cf]
        cr, cf, dd, p, det = cr[ok], cf[ok], dd[ok], p[ok], det[ok]
        inv = 1.0 / det
        ub = np.einsum("pc,pc->p", tv[cf], p) * inv
        qv = np.cross(tv[cf], e1[cf])
        vb = np.einsum("pc,pc->p", dd, qv) * inv
        t = np.einsum("pc,pc->p", e2[cf], qv) * inv
        hit = (ub >= -1e-12) & (vb >= -1e-12) & (ub + vb <= 1.0 + 1e-12) & (t > 0.0)
        rows.append(lo + cr[hit])
        radii.append(t[hit])
    ray = np.concatenate(rows) if rows else np.empty(0, dtype=int)
    t = np.concatenate(radii) if radii else np.empty(0)
    order = np.lexsort((t, ray))
    ray, t = ray[order], t[order]
    # collapse duplicate hits from rays grazing shared edges or vertices
    scale = np.abs(u).max()
    keep = np.ones(len(ray), dtype=bool)
    keep[1:] = (ray[1:] != ray[:-1]) | (np.diff(t) > 1e-9 * scale)
    return ray[keep], t[keep]


def _parity_intervals(ts):
    ts = list(ts)
    if len(ts) % 2 == 1:
        ts = [0.0] + ts
    return [(ts[i], ts[i + 1]) for i in range(0, len(ts), 2)]


def _interval_symdiff(tsa, tsb):
    """Integral of r^2 dr over the symmetric difference of two radial sets."""
    pa = _parity_intervals(tsa)
    pb = _parity_intervals(tsb)
    cuts = sorted({0.0, *tsa, *tsb})
    total = 0.0
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        mid = 0.5 * (lo + hi)
        ina = any(l <= mid < r for l, r in pa)
        inb = any(l <= mid < r for l, r in pb)
        if ina != inb:
            total += (hi**3 - lo**3) / 3.0
    return total


def _estimate(mesh_a, mesh_b, origin, dirs):
    ra, ta = _ray_crossings(mesh_a, origin, dirs)
    rb, tb = _ray_crossings(mesh_b, origin, dirs)
    count = len(dirs)
    ca = np.bincount(ra, minlength=count)
    cb = np.bincount(rb, minlength=count)
    oa = np.concatenate([[0], np.cumsum(ca)])
    ob = np.concatenate([[0], np.cumsum(cb)])
    acc = np.zeros(count)
    simple = (ca == 1) & (cb == 1)
    acc[simple] = np.abs(ta[oa[:-1][simple]] ** 3 - tb[ob[:-1][simple]] ** 3) / 3.0
    for r in np.nonzero(~simple & ((ca > 0) | (cb > 0)))[0]:
        acc[r] = _interval_symdiff(ta[oa[r] : oa[r + 1]], tb[ob[r] : ob[r + 1]])
    return acc.sum() * (4.0 * np.pi / count)


def manifold_distance(a, b, quad_level=0, rel_tol=_DISTANCE_RTOL):
    """Volume of the symmetric difference of two enclosed regions.

    Rays are cast from the midpoint of the two volume centroids along a
    quasi-uniform direction set; each ray contributes the r^2 dr integral
    over the symmetric difference of the two radial sets (|r_a^3 - r_b^3|/3
    when both surfaces cross the ray once).  The direction count starts at
    4096 * 2**quad_level and doubles until two successive estimates agree
    to `rel_tol` relative, capped at 262144 directions.

    Parameters
    ----------
    a, b : SurfaceMesh
        Closed, outward-oriented surfaces.
    quad_level : int, optional
        Starting refinement level of the direction set.
    rel_tol : float, optional
        Relative agreement required between successive doublings.

    Returns
    -------
    DistanceResult
        Estimate with the convergence flag and final direction count.
    """
    origin = 0.5 * (_volume_centroid(a) + _volume_centroid(b))
    # frame choice must not depend on argument order, so the estimate
    # stays exactly symmetric in (a, b)
    frame = _frame(a if _mesh_key(a) <= _mesh_key(b) else b)
    count = _BASE_DIRECTIONS << max(0, int(quad_level))
    prev = None
    while True:
        est = _estimate(a, b, origin, _fibonacci_directions(count) @ frame)
        if prev is not None and abs(est - prev) <= rel_tol * max(abs(est), 1e-300):
            return DistanceResult(float(est), True, count)
        if count >= _MAX_DIRECTIONS:
            return DistanceResult(float(est), False, count)
        prev = est
        count *= 2


@dataclass(frozen=True)
class Trajectory:
    """Snapshots of an evolution at known times.

    Attributes
    ----------
    tau : float
        Time step of the run the snapshots came from.
    times : tuple of float
        Snapshot times, strictly increasing.
    meshes : tuple of SurfaceMesh
        Surface at each snapshot time.
    """

    tau: float
    times: tuple
    meshes: tuple

    def __post_init__(self):
        if len(self.times) != len(self.meshes) or not self.times:
            raise ValueError("times and meshes must align and be nonempty")
        if not all(t1 > t0 for t0, t1 in zip(self.times, self.times[1:])):
            raise ValueError("snapshot times must be strictly increasing")

    def at(self, t):
        """Surface at time t: a stored snapshot, or the linear vertex
        interpolation between the two bracketing snapshots."""
        tol = 1e-9 * max(1.0, abs(t))
        for tk, mesh in zip(self.times, self.meshes):
            if abs(tk - t) <= tol:
                return mesh
        if t < self.times[0] - tol or t > self.times[-1] + tol:
            raise ConfigError(
                f"time {t} outside trajectory [{self.times[0]}, {self.times[-1]}]"
            )
        hi = bisect_left(self.times, t)
        t0, t1 = self.times[hi - 1], self.times[hi]
        w = (t - t0) / (t1 - t0)
        blend = (1.0 - w) * self.meshes[hi - 1].vertices + w * self.meshes[hi].vertices
        return self.meshes[hi - 1].with_vertices(blend)


def numerical_error(run, reference, t, quad_level=0):
    """Manifold distance between a run and the reference at time t.

    Parameters
    ----------
    run, reference : Trajectory
        Snapshot sets containing (or bracketing) time t.
    t : float
        Evaluation time.
    quad_level : int, optional
        Starting quadrature level for the distance estimate.

    Returns
    -------
    float
        The symmetric-difference volume at time t.
    """
    return manifold_distance(run.at(t), reference.at(t), quad_level).value


@dataclass(frozen=True)
class ConvergenceReport:
    """Errors and refinement orders for one convergence case.

    Attributes
    ----------
    case : int
        Case identifier, 1 through 6.
    times : tuple of float
        Evaluation times.
    rows : tuple
        One (h, tau, errors) entry per completed mesh size, h strictly
        decreasing, errors aligned with `times`.
    orders : tuple
        One (h_coarse, h_fine, orders) entry per consecutive row pair,
        orders aligned with `times`.
    failures : tuple
        (h, message) annotations for legs that failed to run.
    """

    case: int
    times: tuple
    rows: tuple
    orders: tuple
    failures: tuple = ()

    def __post_init__(self):
        hs = [row[0] for row in self.rows]
        if any(h1 >= h0 for h0, h1 in zip(hs, hs[1:])):
            raise ValueError("rows must have strictly decreasing h")
        for h, tau, _ in self.rows:
            if abs(tau - 0.08 * h * h) > 1e-12 * tau:
                raise ValueError("tau must equal (2/25) h^2")

    def to_csv(self):
        """Delimited report: one row per mesh size, 17 significant digits."""
        cols = ["h", "tau"]
        for t in self.times:
            cols += [f"e_t{t:g}", f"order_t{t:g}"]
        lines = [",".join(cols)]
        by_fine = {o[1]: o[2] for o in self.orders}
        for h, tau, errs in self.rows:
            cells = [f"{h:.17g}", f"{tau:.17g}"]
            ords = by_fine.get(h)
            for which, e in enumerate(errs):
                cells.append(f"{e:.17g}")
                cells.append("" if ords is None else f"{ords[which]:.17g}")
            lines.append(",".join(cells))
        for h, message in self.failures:
            lines.append(f"# failed h={h:.17g}: {message}")
        return "\n".join(lines) + "\n"

    def format_table(self):
        """Human-readable error/order table."""
        head = f"case {self.case}"
        for t in self.times:
            head += f" | e(t={t:g})      order "
        lines = [head, "-" * len(head)]
        by_fine = {o[1]: o[2] for o in self.orders}
        for h, _, errs in self.rows:
            line = f"h={h:<8.5g}"
            ords = by_fine.get(h)
            for which, e in enumerate(errs):
                stamp = "  -  " if ords is None else f"{ords[which]:5.2f}"
                line += f" | {e:12.5e} {stamp} "
            lines.append(line)
        for h, message in self.failures:
            lines.append(f"failed h={h:g}: {message}")
        return "\n".join(lines) + "\n"


def _with_strategy(raw, strategy):
    if strategy == "exact":
        return raw
    return StabilizerTable(raw.k0_values, strategy, raw.tol, raw.model_hash)


def run_snapshots(model, table, h, times, shape=(2.0, 2.0, 1.0)):
    """Evolve the a x b x c cuboid at mesh size h with tau = (2/25) h^2,
    returning the Trajectory of snapshots at `times`.

    Every requested time must be an integer multiple of tau.
    """
    tau = 0.08 * h * h
    steps = []
    for t in times:
        m = t / tau
        if abs(m - round(m)) > 1e-9:
            raise ConfigError(f"time {t} is not a step multiple of tau={tau}")
        steps.append(int(round(m)))
    mesh = make_cuboid(*shape, h)
    cfg = StepperConfig(model, table, tau)
    result = evolve(mesh, cfg, T=max(times), capture_steps=tuple(steps))
    return Trajectory(tau, tuple(times), tuple(result.captured[s].mesh for s in steps))


def convergence_suite(
    case,
    table_provider=None,
    h_values=(0.5, 0.25, 0.125),
    h_ref=0.0625,
    times=(0.5, 1.0),
    quad_level=0,
    tol=1e-3,
    on_progress=None,
):
    """Run one convergence case and report errors and refinement orders.

    Evolves the 2 x 2 x 1 cuboid at each h in `h_values` and at the finer
    reference size `h_ref`, all with tau = (2/25) h^2, using the case's
    energy model and stabilizer strategy (the reference always uses the
    raw minimal stabilizing table).  Errors are manifold distances against
    the reference at each time in `times`; orders compare consecutive h.

    Parameters
    ----------
    case : int
        Case identifier, 1 through 6.
    table_provider : callable, optional
        model -> raw exact StabilizerTable; defaults to building one at
        tolerance `tol`.  Supply a caching provider to amortize the cost.
    h_values : sequence of float, optional
        Coarse-to-fine mesh sizes reported in the table.
    h_ref : float, optional
        Reference mesh size.
    times : sequence of float, optional
        Evaluation times; each must be a step multiple of every tau.
    quad_level : int, optional
        Starting quadrature level for distance estimates.
    tol : float, optional
        Stabilizer table tolerance when no provider is given.
    on_progress : callable, optional
        Called with short status strings as legs start and finish.

    Returns
    -------
    ConvergenceReport
        Failed legs are annotated in the report instead of aborting it.
    """
    if case not in CASES:
        raise ConfigError(f"unknown convergence case {case!r}, expected 1..6")
    model, strategy = CASES[case]
    raw = table_provider(model) if table_provider else build_table(model, "exact", tol)
    table = _with_strategy(raw, strategy)
    say = on_progress or (lambda _: None)
    times = tuple(times)

    legs = {}
    failures = []
    for h, tbl, label in [(h, table, "run") for h in h_values] + [
        (h_ref, raw, "reference")
    ]:
        say(f"case {case}: evolving {label} h={h:g}")
        try:
            legs[h] = run_snapshots(model, tbl, h, times)
        except Exception as exc:  # noqa: BLE001 - annotate and continue
            failures.append((h, f"{type(exc).__name__}: {exc}"))

    rows = []
    if h_ref in legs:
        for h in h_values:
            if h not in legs:
                continue
            say(f"case {case}: measuring h={h:g}")
            errs = tuple(
                numerical_error(legs[h], legs[h_ref], t, quad_level) for t in times
            )
            rows.append((h, 0.08 * h * h, errs))
    orders = []
    for (h0, _, e0), (h1, _, e1) in zip(rows, rows[1:]):
        orders.append((h0, h1, tuple(np.log2(a / b) for a, b in zip(e0, e1))))
    return ConvergenceReport(case, times, tuple(rows), tuple(orders), tuple(failures))
