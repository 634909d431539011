"""Minimal stabilizing function k0(n) and the stabilized energy matrix.

The energy matrix

    Z_k(n) = gamma(n) I - n xi^T - xi n^T + k(n) n n^T

is symmetric, and for k at least the minimal stabilizing value

    k0(n) = inf { k : (u^T Z_k u)(v^T Z_k v) >= gamma_ext(u x v)^2
                  for all unit u, v }

it is positive semidefinite.  This module computes k0 pointwise, its
theoretical upper bound, and an 11 x 11 spherical lookup table with bilinear
interpolation plus the common override strategies.
"""

from __future__ import annotations

import hashlib

import numpy as np
from scipy import ndimage

from .anisotropy import AnisotropyModel, fibonacci_sphere, tangent_basis, _check_unit
from .errors import AnisoflowError, ConfigError

__all__ = [
    "z_matrix",
    "z_many",
    "f_k",
    "k0_at",
    "k_upper",
    "build_table",
    "k_of",
    "StabilizerTable",
    "model_hash",
]

# polar rows i = 0..10 and azimuthal columns j = 0..10 of the lookup grid
GRID_PHI = -0.5 * np.pi + np.arange(11) * (np.pi / 10.0)
GRID_THETA = -np.pi + np.arange(11) * (np.pi / 5.0)

# inner minimization: per-factor direction grid resolution
_N_THETA = 48
_N_PHI = 24

_FEAS_SLACK = -1e-12
_REFINE_ITERS = 200
_REFINE_MIN_STEP = 1e-7


def grid_normal(i, j):
    """Unit normal of grid node (i, j); poles are exact +-e_z."""
    if i == 0:
        return np.array([0.0, 0.0, -1.0])
    if i == 10:
        return np.array([0.0, 0.0, 1.0])
    phi, theta = GRID_PHI[i], GRID_THETA[j]
    return np.array(
        [np.cos(phi) * np.cos(theta), np.cos(phi) * np.sin(theta), np.sin(phi)]
    )


def z_matrix(model, k_value, n):
    """Energy matrix Z_k(n) = gamma I - n xi^T - xi n^T + k n n^T."""
    a, single = _check_unit(n)
    if not single:
        raise ValueError("z_matrix takes a single direction; use z_many")
    g = float(model.gamma_many(a)[0])
    x = model.xi_many(a)[0]
    nn = a[0]
    return (
        g * np.eye(3)
        - np.outer(nn, x)
        - np.outer(x, nn)
        + float(k_value) * np.outer(nn, nn)
    )


def z_many(model, k_values, normals):
    """Stack of energy matrices for unit rows `normals`, shape (M, 3, 3)."""
    n = np.asarray(normals, dtype=float)
    k = np.broadcast_to(np.asarray(k_values, dtype=float), (len(n),))
    g = model.gamma_many(n)
    x = model.xi_many(n)
    z = g[:, None, None] * np.eye(3)[None]
    z -= n[:, :, None] * x[:, None, :]
    z -= x[:, :, None] * n[:, None, :]
    z += k[:, None, None] * (n[:, :, None] * n[:, None, :])
    return z


def f_k(model, k_value, n, u, v):
    """(u^T Z_k(n) u) (v^T Z_k(n) v) for unit n, u, v."""
    z = z_matrix(model, k_value, n)
    uu, _ = _check_unit(u)
    vv, _ = _check_unit(v)
    return float((uu[0] @ z @ uu[0]) * (vv[0] @ z @ vv[0]))


def k_upper(model, n):
    """Theoretical upper bound for k0(n), finite and model-dependent.

    Returns (6 |xi|^2 + 8 gamma |xi| + 16 C1) / gamma with C1 half the
    largest spectral norm of the Hessian of gamma_ext^2 over the sphere,
    evaluated via the identity H_{gamma^2} = 2 (xi xi^T + gamma H) on a
    2000-point lattice.  C1 is computed once per model and cached.
    """
    a, single = _check_unit(n)
    c1 = model.__dict__.get("_k_upper_c1")
    if c1 is None:
        ms = fibonacci_sphere(2000)
        g = model.gamma_many(ms)
        x = model.xi_many(ms)
        h = model.hessian_many(ms)
        half = x[:, :, None] * x[:, None, :] + g[:, None, None] * h
        c1 = float(np.abs(np.linalg.eigvalsh(half)).max())
        model.__dict__["_k_upper_c1"] = c1
    g = model.gamma_many(a)
    xn = np.linalg.norm(model.xi_many(a), axis=1)
    out = (6.0 * xn**2 + 8.0 * g * xn + 16.0 * c1) / g
    return float(out[0]) if single else out


class _InnerProblem:
    """Per-direction search state for the k0 feasibility test.

    Holds the n-aligned candidate grid, the k-independent pieces of the
    quadratic forms, and the pairwise target gamma_ext^2(u x v).  The grid
    is aligned to an orthonormal frame of n so u = +-n and the tangential
    circle (the equality-active directions) are exact grid points.
    """

    def __init__(self, model, n):
        self.model = model
        self.n = n
        self.gamma_n = float(model.gamma_many(n[None])[0])
        self.xi_n = model.xi_many(n[None])[0]
        t1, t2 = tangent_basis(n)
        thetas = 2.0 * np.pi * np.arange(_N_THETA) / _N_THETA
        phis = np.unique(
            np.concatenate(
                [
                    np.linspace(-0.5 * np.pi, 0.0, _N_PHI // 2),
                    np.linspace(0.0, 0.5 * np.pi, _N_PHI // 2 + 1),
                ]
            )
        )
        ct, stt = np.cos(thetas), np.sin(thetas)
        cp, sp = np.cos(phis), np.sin(phis)
        u = (
            (cp[:, None, None] * ct[None, :, None]) * t1[None, None, :]
            + (cp[:, None, None] * stt[None, :, None]) * t2[None, None, :]
            + sp[:, None, None] * np.ones_like(ct)[None, :, None] * n[None, None, :]
        ).reshape(-1, 3)
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        self.grid = u
        # u^T Z_k u = q0 + k (u.n)^2 with the k-free part q0
        self.q0 = self.gamma_n - 2.0 * (u @ self.xi_n) * (u @ n)
        self.un2 = (u @ n) ** 2
        cross = np.cross(u[:, None, :], u[None, :, :]).reshape(-1, 3)
        self.target = model.gamma_ext_many(cross).reshape(len(u), len(u)) ** 2
        self.step0 = np.pi / (_N_THETA / 2.0)

    def z_of(self, k):
        n = self.n
        return (
            self.gamma_n * np.eye(3)
            - np.outer(n, self.xi_n)
            - np.outer(self.xi_n, n)
            + k * np.outer(n, n)
        )

    def objective(self, z, u, v):
        """(u^T Z u)(v^T Z v) - gamma_ext^2(u x v) for row stacks u, v."""
        qu = np.einsum("mi,ij,mj->m", u, z, u)
        qv = np.einsum("mi,ij,mj->m", v, z, v)
        return qu * qv - self.model.gamma_ext_many(np.cross(u, v)) ** 2

    def _refine(self, z, u, v, f0, stop_below):
        """Projected pattern search run on a whole stack of start pairs.

        `u`, `v` are (S, 3) stacks and `f0` their objective values.  Each
        start keeps its own step size; a start retires once its step falls
        under the stopping width.  Descent is monotone, so as soon as any
        start drops under `stop_below` the caller's feasibility question
        is settled and the search returns early.  Returns the best value
        and its pair.
        """
        u, v, f = u.copy(), v.copy(), f0.copy()
        delta = np.full(len(u), self.step0)
        live = np.ones(len(u), dtype=bool)
        for _ in range(_REFINE_ITERS):
            if not live.any() or f.min() < stop_below:
                break
            ia = np.flatnonzero(live)
            da = delta[ia]
            cand_u = np.repeat(u[ia, None, :], 12, axis=1)
            cand_v = np.repeat(v[ia, None, :], 12, axis=1)
            for c in range(3):
                cand_u[:, 2 * c, c] += da
                cand_u[:, 2 * c + 1, c] -= da
                cand_v[:, 6 + 2 * c, c] += da
                cand_v[:, 6 + 2 * c + 1, c] -= da
            cand_u /= np.linalg.norm(cand_u, axis=2, keepdims=True)
            cand_v /= np.linalg.norm(cand_v, axis=2, keepdims=True)
            fc = self.objective(
                z, cand_u.reshape(-1, 3), cand_v.reshape(-1, 3)
            ).reshape(len(ia), 12)
            m = np.argmin(fc, axis=1)
            fm = fc[np.arange(len(ia)), m]
            fa = f[ia]
            imp = fm < fa
            moved = ia[imp]
            f[moved] = fm[imp]
            u[moved] = cand_u[imp, m[imp]]
            v[moved] = cand_v[imp, m[imp]]
            # float-dust gains on flat plateaus must not keep a start alive
            # for the full budget, so they shrink the step like a stall
            stalled = ia[fm >= fa - 1e-15 * (1.0 + np.abs(fa))]
            delta[stalled] *= 0.5
            live[stalled[delta[stalled] < _REFINE_MIN_STEP]] = False
        i = int(np.argmin(f))
        return f[i], u[i], v[i]

    def min_violation(self, k, starts=3, stop_below=-np.inf):
        """Refined global minimum of F_k - gamma^2 and the u-grid PSD floor.

        Descent starts are every local minimum of the grid objective in the
        wrapped (phi, theta) x (phi, theta) index space, plus the `starts`
        lowest pairs outright.  Near k0 the worst grid pairs all sit on the
        flat equality-active set, so ranking alone would miss shallow
        negative basins between grid points; seeding every basin closes
        that gap.

        Returns (refined minimum, (u*, v*), min over grid of u^T Z_k u).
        """
        q = self.q0 + k * self.un2
        grid_f = q[:, None] * q[None, :] - self.target
        m = len(self.grid)
        worst = int(np.argmin(grid_f.ravel()))
        if grid_f.ravel()[worst] < stop_below:
            i, j = divmod(worst, m)
            return grid_f[i, j], (self.grid[i], self.grid[j]), float(q.min())
        p = m // _N_THETA
        f4 = grid_f.reshape(p, _N_THETA, p, _N_THETA)
        wrap = ("nearest", "wrap", "nearest", "wrap")
        basin = np.argwhere(f4 <= ndimage.minimum_filter(f4, size=3, mode=wrap))
        a = basin[:, 0] * _N_THETA + basin[:, 1]
        b = basin[:, 2] * _N_THETA + basin[:, 3]
        low = np.argpartition(grid_f.ravel(), starts - 1)[:starts]
        a = np.concatenate([a, low // m])
        b = np.concatenate([b, low % m])
        z = self.z_of(k)
        f, u, v = self._refine(z, self.grid[a], self.grid[b], grid_f[a, b], stop_below)
        return float(f), (u, v), float(q.min())


def k0_at(model, n, tol=1e-3, return_witness=False):
    """Minimal stabilizing value at direction n, within `tol`.

    Bisection on k over [gamma(n), k_upper(n)].  A candidate k is feasible
    when the refined global minimum of F_k(n, u, v) - gamma_ext^2(u x v)
    over unit pairs stays above -1e-12 and the candidate-grid quadratic
    forms u^T Z_k u do as well (the second guard rules out two negative
    factors masking infeasibility).

    Parameters
    ----------
    model : AnisotropyModel
    n : array_like
        Unit direction.
    tol : float
        Bisection tolerance, within [1e-6, 1e-2].
    return_witness : bool
        Also return the tightest constraint pair (u, v) at the answer.

    Returns
    -------
    float, or (float, (u, v))
    """
    if not (1e-6 <= tol <= 1e-2):
        raise ValueError("tol must lie in [1e-6, 1e-2]")
    a, single = _check_unit(n)
    if not single:
        raise ValueError("k0_at takes a single direction")
    nn = a[0]
    prob = _InnerProblem(model, nn)
    lo = prob.gamma_n
    hi = k_upper(model, nn)

    def feasible(k):
        fmin, pair, qmin = prob.min_violation(k, stop_below=_FEAS_SLACK)
        return (fmin >= _FEAS_SLACK and qmin >= _FEAS_SLACK), pair

    ok_hi, pair = feasible(hi)
    if not ok_hi:
        raise AnisoflowError(
            f"stabilizer bound k_upper = {hi:.6g} tested infeasible at "
            f"n = {nn}; this indicates a bug in the feasibility search"
        )
    ok_lo, pair_lo = feasible(lo)
    if ok_lo:
        return (lo, pair_lo) if return_witness else lo
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        ok, p = feasible(mid)
        if ok:
            hi, pair = mid, p
        else:
            lo = mid
    return (hi, pair) if return_witness else hi


def model_hash(model):
    """Stable hex digest identifying a model family plus parameters."""
    text = f"{model.family}|{model.params_text()}"
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _parse_strategy(strategy):
    """Normalize a strategy spec to ('exact'|'plus'|'sup', constant)."""
    if isinstance(strategy, (tuple, list)) and len(strategy) == 2:
        kind, c = strategy
        strategy = f"{kind}:{c}"
    if not isinstance(strategy, str):
        raise ConfigError(f"unrecognized stabilizer strategy: {strategy!r}")
    s = strategy.strip().lower()
    if s == "exact":
        return "exact", 0.0
    if s in ("sup", "globalsup"):
        return "sup", 0.0
    if s.startswith("plus:"):
        try:
            c = float(s.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad plus-constant in strategy {strategy!r}")
        if c < 0:
            raise ConfigError("plus-constant must be nonnegative")
        return "plus", c
    raise ConfigError(f"unrecognized stabilizer strategy: {strategy!r}")


class StabilizerTable:
    """k0 sampled on the 11 x 11 (phi, theta) grid, with a strategy overlay.

    Parameters
    ----------
    k0_values : (11, 11) array
        Raw minimal stabilizing values at the grid nodes.
    strategy : str or (kind, c)
        "exact", "plus:<c>", or "sup".
    tol : float
        Tolerance the nodes were computed to.
    hash_ : str
        Model hash the table belongs to.

    The interpolated stabilizing function is the bilinear interpolant of the
    strategy-applied node values, periodic in theta.
    """

    def __init__(self, k0_values, strategy, tol, hash_):
        vals = np.asarray(k0_values, dtype=float)
        if vals.shape != (11, 11):
            raise ValueError("table must be 11 x 11")
        self.k0_values = vals
        self.kind, self.constant = _parse_strategy(strategy)
        self.tol = float(tol)
        self.model_hash = hash_
        if self.kind == "sup":
            self.values = np.full((11, 11), vals.max())
        elif self.kind == "plus":
            self.values = vals + self.constant
        else:
            self.values = vals.copy()

    @property
    def strategy(self):
        if self.kind == "plus":
            return f"plus:{self.constant:.17g}"
        return self.kind

    @classmethod
    def constant(cls, model, value, tol=0.0):
        """Table with a single constant value everywhere (explicit k)."""
        return cls(np.full((11, 11), float(value)), "exact", tol, model_hash(model))

    def k_of(self, n):
        """Bilinear stabilizing value at unit direction(s) n."""
        a, single = _check_unit(n)
        z = np.clip(a[:, 2], -1.0, 1.0)
        phi = np.arcsin(z)
        theta = np.arctan2(a[:, 1], a[:, 0])
        fi = (phi + 0.5 * np.pi) / (np.pi / 10.0)
        fj = (theta + np.pi) / (np.pi / 5.0)
        i0 = np.minimum(fi.astype(int), 9)
        j0 = np.minimum(fj.astype(int), 9)
        s = fi - i0
        t = fj - j0
        v = self.values
        out = (
            v[i0, j0] * (1 - s) * (1 - t)
            + v[i0 + 1, j0] * s * (1 - t)
            + v[i0, j0 + 1] * (1 - s) * t
            + v[i0 + 1, j0 + 1] * s * t
        )
        return float(out[0]) if single else out

    def save(self, path):
        """Write the versioned text artifact (raw grid plus header)."""
        lines = [
            "anisoflow-k0-table v1",
            f"hash {self.model_hash}",
            "grid 11 11",
            f"strategy {self.strategy}",
            f"tol {self.tol:.17g}",
        ]
        for row in self.k0_values:
            lines.append(" ".join(f"{v:.17g}" for v in row))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path, model=None):
        """Read a table artifact; verifies the hash when `model` is given."""
        with open(path) as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
        if not lines or lines[0] != "anisoflow-k0-table v1":
            raise ConfigError(f"{path}: not a k0 table artifact")
        header = {}
        for ln in lines[1:5]:
            key, _, rest = ln.partition(" ")
            header[key] = rest
        try:
            hash_ = header["hash"]
            if header["grid"] != "11 11":
                raise ConfigError(f"{path}: unsupported grid {header['grid']!r}")
            strategy = header["strategy"]
            tol = float(header["tol"])
        except KeyError as missing:
            raise ConfigError(f"{path}: missing header field {missing}")
        rows = [np.fromstring(ln, sep=" ") for ln in lines[5:16]]
        if len(rows) != 11 or any(len(r) != 11 for r in rows):
            raise ConfigError(f"{path}: expected 11 rows of 11 values")
        if model is not None and model_hash(model) != hash_:
            raise ConfigError(
                f"{path}: table was built for a different model "
                f"(hash {hash_}, expected {model_hash(model)})"
            )
        return cls(np.array(rows), strategy, tol, hash_)


def build_table(model, strategy="exact", tol=1e-3, progress=None):
    """Compute the 11 x 11 k0 grid and wrap it in a StabilizerTable.

    Pole rows are computed once (the node direction degenerates there) and
    replicated; the theta = -pi and theta = pi columns coincide and share
    one computation.  `progress`, if given, is called with (done, total).
    """
    vals = np.empty((11, 11))
    total = 2 + 9 * 10
    done = 0
    for i, sign in ((0, -1.0), (10, 1.0)):
        pole = k0_at(model, np.array([0.0, 0.0, sign]), tol)
        vals[i, :] = pole
        done += 1
        if progress:
            progress(done, total)
    for i in range(1, 10):
        for j in range(10):
            vals[i, j] = k0_at(model, grid_normal(i, j), tol)
            done += 1
            if progress:
                progress(done, total)
        vals[i, 10] = vals[i, 0]
    return StabilizerTable(vals, strategy, tol, model_hash(model))


def k_of(table, n):
    """Interpolated stabilizing value; see StabilizerTable.k_of."""
    return table.k_of(n)
