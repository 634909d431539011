"""Closed oriented triangulated surfaces and their discrete geometry.

A surface is a vertex array plus a triangle array whose rows are vertex
index triples ordered counterclockwise as seen from outside.  For triangle
sigma with vertices q1, q2, q3 the orientation vector

    J(sigma) = (q2 - q1) x (q3 - q2)

carries the area |sigma| = |J|/2 and the outward unit normal n = J/|J|.
On top of that sit the discrete surface gradient, mass-lumped inner
products, enclosed volume, weighted surface energy, shape generators, and
OBJ / legacy-VTK serialization.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, GeometryError, TopologyError

__all__ = [
    "SurfaceMesh",
    "make_cuboid",
    "make_ellipsoid",
    "read_obj",
]

# triangles thinner than this are treated as collapsed
DEGENERATE_J = 1e-14


def _cyclic(l):
    return (l + 1) % 3, (l + 2) % 3


class SurfaceMesh:
    """Closed, consistently oriented triangulated surface in 3D.

    Parameters
    ----------
    vertices : (V, 3) array_like
        Vertex positions.
    triangles : (F, 3) array_like of int
        Vertex index triples, counterclockwise from outside.
    check : bool
        Validate closedness, orientation consistency, non-degeneracy and
        outwardness (positive signed volume).  Disable only for meshes
        whose construction already guarantees the invariants.

    Raises
    ------
    TopologyError
        Some undirected edge is not shared by exactly two triangles with
        opposite directions, or indices are malformed.
    GeometryError
        A triangle is degenerate, or the signed enclosed volume is not
        positive (inward orientation).
    """

    def __init__(self, vertices, triangles, check=True):
        v = np.asarray(vertices, dtype=float)
        t = np.asarray(triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise TopologyError(f"vertices must be (V, 3), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3:
            raise TopologyError(f"triangles must be (F, 3), got {t.shape}")
        if not np.isfinite(v).all():
            raise GeometryError("vertex coordinates must be finite")
        self.vertices = v.copy()
        self.triangles = t.copy()
        self._cache = {}
        if check:
            self._check_topology()
            self._check_geometry()

    # -- validation ------------------------------------------------------

    def _check_topology(self):
        t = self.triangles
        nv = len(self.vertices)
        if t.size and (t.min() < 0 or t.max() >= nv):
            raise TopologyError("triangle index out of range")
        if (
            (t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 2] == t[:, 0])
        ).any():
            raise TopologyError("triangle with a repeated vertex")
        # directed edges: each must occur once, its reversal exactly once
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        key = e[:, 0] * np.int64(nv) + e[:, 1]
        if len(np.unique(key)) != len(key):
            raise TopologyError("directed edge used twice (inconsistent orientation)")
        und = np.sort(e, axis=1)
        ukey = und[:, 0] * np.int64(nv) + und[:, 1]
        _, counts = np.unique(ukey, return_counts=True)
        if (counts != 2).any():
            raise TopologyError(
                "surface is not closed: every undirected edge must belong "
                "to exactly two triangles"
            )

    def _check_geometry(self):
        nrm = np.linalg.norm(self.orientation_vectors(), axis=1)
        if (nrm <= DEGENERATE_J).any():
            j = int(np.argmin(nrm))
            raise GeometryError(f"degenerate triangle {j}: |J| = {nrm[j]:.3e}")
        if self.enclosed_volume() <= 0.0:
            raise GeometryError("mesh is oriented inward (signed volume <= 0)")

    # -- per-triangle geometry -------------------------------------------

    def corner_positions(self):
        """Vertex positions per triangle corner, shape (F, 3, 3)."""
        return self.vertices[self.triangles]

    def orientation_vectors(self):
        """J(sigma_j) = (q2 - q1) x (q3 - q2) for every triangle, (F, 3)."""
        j = self._cache.get("J")
        if j is None:
            q = self.corner_positions()
            j = np.cross(q[:, 1] - q[:, 0], q[:, 2] - q[:, 1])
            self._cache["J"] = j
        return j

    def orientation_vector(self, j):
        """Orientation vector of triangle `j`."""
        return self.orientation_vectors()[j]

    def areas(self):
        """Triangle areas |J|/2, shape (F,)."""
        a = self._cache.get("area")
        if a is None:
            a = 0.5 * np.linalg.norm(self.orientation_vectors(), axis=1)
            self._cache["area"] = a
        return a

    def normals(self):
        """Outward unit normals J/|J|, shape (F, 3)."""
        n = self._cache.get("normal")
        if n is None:
            jv = self.orientation_vectors()
            nrm = np.linalg.norm(jv, axis=1, keepdims=True)
            if (nrm <= DEGENERATE_J).any():
                k = int(np.argmin(nrm[:, 0]))
                raise GeometryError(f"degenerate triangle {k}: |J| = {nrm[k, 0]:.3e}")
            n = jv / nrm
            self._cache["normal"] = n
        return n

    def hat_gradients(self):
        """Surface gradients of the three nodal hat functions per triangle.

        Returns (F, 3, 3); row l of triangle j is the constant surface
        gradient of the hat function of local vertex l,

            g_l = (q_{l+1} - q_{l+2}) x n_j / |J_j|,

        so a nodal field f has per-triangle gradient sum_l f_l g_l.
        """
        g = self._cache.get("hatgrad")
        if g is None:
            q = self.corner_positions()
            jv = self.orientation_vectors()
            jn = np.linalg.norm(jv, axis=1)
            n = jv / jn[:, None]
            g = np.empty_like(q)
            for l in range(3):
                a, b = _cyclic(l)
                g[:, l] = np.cross(q[:, a] - q[:, b], n) / jn[:, None]
            self._cache["hatgrad"] = g
        return g

    def surface_gradient(self, f, j=None):
        """Discrete surface gradient of a nodal field, constant per triangle.

        Parameters
        ----------
        f : (V,) or (V, 3) array_like
            Scalar or vector nodal field, piecewise linear.
        j : int, optional
            Restrict to one triangle.

        Returns
        -------
        ndarray
            Scalar field: (F, 3) tangential gradients, or (3,) for one
            triangle.  Vector field: (F, 3, 3) matrices whose row c is the
            gradient of component c, or (3, 3) for one triangle.
        """
        f = np.asarray(f, dtype=float)
        if len(f) != len(self.vertices):
            raise ValueError("field length must match vertex count")
        g = self.hat_gradients()
        t = self.triangles
        if f.ndim == 1:
            out = np.einsum("fl,flc->fc", f[t], g)
        elif f.ndim == 2 and f.shape[1] == 3:
            out = np.einsum("fld,flc->fdc", f[t], g)
        else:
            raise ValueError(f"field must be (V,) or (V, 3), got {f.shape}")
        return out if j is None else out[j]

    def lumped_inner(self, f, g):
        """Mass-lumped inner product (1/3) sum_j |sigma_j| sum_i f_i g_i.

        Scalar fields multiply pointwise; vector fields contract with the
        Euclidean dot product.  Symmetric, bilinear, and positive definite
        on nonzero nodal data.
        """
        f = np.asarray(f, dtype=float)
        g = np.asarray(g, dtype=float)
        if len(f) != len(self.vertices) or len(g) != len(self.vertices):
            raise ValueError("field length must match vertex count")
        if f.shape != g.shape:
            raise ValueError("fields must have matching shapes")
        t = self.triangles
        prod = f[t] * g[t]
        if prod.ndim == 3:
            prod = prod.sum(axis=2)
        return float(np.sum(self.areas()[:, None] / 3.0 * prod))

    def vertex_weights(self):
        """Lumped vertex masses w_i = (1/3) sum_{j : i in j} |sigma_j|."""
        w = np.zeros(len(self.vertices))
        np.add.at(w, self.triangles, self.areas()[:, None] / 3.0)
        return w

    # -- global quantities -----------------------------------------------

    def enclosed_volume(self):
        """Signed enclosed volume (1/9) sum_j sum_i |sigma_j| q_ji . n_j."""
        q = self.corner_positions()
        jv = self.orientation_vectors()
        return float(np.einsum("flc,fc->", q, jv) / 18.0)

    def surface_energy(self, model):
        """Weighted area sum_j |sigma_j| gamma(n_j)."""
        return float(np.sum(self.areas() * model.gamma_many(self.normals())))

    def triangle_quality(self):
        """Shape quality 4 sqrt(3) |sigma| / (sum of squared edge lengths).

        Equals 1 for equilateral triangles and tends to 0 on slivers.
        """
        q = self.corner_positions()
        e = q - np.roll(q, -1, axis=1)
        l2 = np.sum(e**2, axis=(1, 2))
        return 4.0 * np.sqrt(3.0) * self.areas() / l2

    # -- derivation ------------------------------------------------------

    def with_vertices(self, vertices, check=True):
        """Same connectivity over new vertex positions.

        Topology is unchanged by construction, so `check` only revisits
        the geometric invariants (non-degeneracy, outwardness).
        """
        out = SurfaceMesh(vertices, self.triangles, check=False)
        if check:
            out._check_geometry()
        return out

    # -- serialization ---------------------------------------------------

    def write_obj(self, path):
        """Write OBJ: `v x y z` then 1-based counterclockwise `f i j k`."""
        with open(path, "w") as fh:
            for p in self.vertices:
                fh.write(f"v {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
            for t in self.triangles + 1:
                fh.write(f"f {t[0]} {t[1]} {t[2]}\n")

    def write_vtk(self, path, model=None, mu=None):
        """Write legacy ASCII VTK polydata.

        Optionally attaches gamma(n_j) as cell data and the nodal chemical
        potential `mu` as point data.
        """
        v, t = self.vertices, self.triangles
        lines = [
            "# vtk DataFile Version 3.0",
            "anisotropic surface diffusion snapshot",
            "ASCII",
            "DATASET POLYDATA",
            f"POINTS {len(v)} double",
        ]
        lines += [f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}" for p in v]
        lines.append(f"POLYGONS {len(t)} {4 * len(t)}")
        lines += [f"3 {a} {b} {c}" for a, b, c in t]
        if model is not None:
            gam = model.gamma_many(self.normals())
            lines.append(f"CELL_DATA {len(t)}")
            lines.append("SCALARS gamma double 1")
            lines.append("LOOKUP_TABLE default")
            lines += [f"{x:.17g}" for x in gam]
        if mu is not None:
            mu = np.asarray(mu, dtype=float)
            if len(mu) != len(v):
                raise ValueError("mu length must match vertex count")
            lines.append(f"POINT_DATA {len(v)}")
            lines.append("SCALARS mu double 1")
            lines.append("LOOKUP_TABLE default")
            lines += [f"{x:.17g}" for x in mu]
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def read_obj(path):
    """Read a closed triangulated surface from an OBJ file.

    Accepts `v` and `f` records (`f` entries may carry `/`-separated
    texture and normal indices, which are ignored).  Faces must be
    triangles.  If the signed volume comes out negative the global
    orientation is flipped, then the full validation runs.
    """
    verts, tris = [], []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ConfigError(f"{path}:{ln}: malformed vertex line")
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [p.split("/")[0] for p in parts[1:]]
                if len(idx) != 3:
                    raise ConfigError(
                        f"{path}:{ln}: only triangular faces are supported"
                    )
                tris.append([int(x) - 1 for x in idx])
    if not verts or not tris:
        raise ConfigError(f"{path}: no triangulated surface found")
    mesh = SurfaceMesh(verts, tris, check=False)
    if mesh.enclosed_volume() < 0.0:
        mesh = SurfaceMesh(
            mesh.vertices, mesh.triangles[:, [0, 2, 1]], check=False
        )
    mesh._check_topology()
    mesh._check_geometry()
    return mesh


# -- shape generators ----------------------------------------------------


def make_cuboid(a, b, c, h):
    """Axis-aligned a x b x c cuboid centered at the origin.

    Each face is a structured grid of quads of extent at most `h`, split
    into two triangles along a fixed diagonal.  Shared face boundaries
    reuse exactly the same lattice vertices, so the mesh is closed and
    outward-oriented by construction; deterministic for fixed inputs.

    Raises
    ------
    ConfigError
        Non-positive dimensions, or `h > min(a, b, c)` (too coarse to
        resolve the thinnest extent with even one cell).
    """
    if min(a, b, c) <= 0 or h <= 0:
        raise ConfigError("cuboid dimensions and h must be positive")
    if h > min(a, b, c):
        raise ConfigError(
            f"h = {h:g} too coarse for a {a:g} x {b:g} x {c:g} cuboid; "
            "need h <= min extent"
        )
    nx = int(np.ceil(a / h))
    ny = int(np.ceil(b / h))
    nz = int(np.ceil(c / h))
    xs = np.linspace(-0.5 * a, 0.5 * a, nx + 1)
    ys = np.linspace(-0.5 * b, 0.5 * b, ny + 1)
    zs = np.linspace(-0.5 * c, 0.5 * c, nz + 1)

    index = {}
    verts = []

    def vid(i, j, k):
        key = (i, j, k)
        out = index.get(key)
        if out is None:
            out = len(verts)
            index[key] = out
            verts.append((xs[i], ys[j], zs[k]))
        return out

    tris = []

    def face(corner_of, nu, nv, flip):
        # corner_of maps lattice (u, v) to a global (i, j, k) lattice point;
        # flip reverses orientation for the negative-side face
        for u in range(nu):
            for v in range(nv):
                v00 = vid(*corner_of(u, v))
                v10 = vid(*corner_of(u + 1, v))
                v11 = vid(*corner_of(u + 1, v + 1))
                v01 = vid(*corner_of(u, v + 1))
                if flip:
                    tris.append((v00, v11, v10))
                    tris.append((v00, v01, v11))
                else:
                    tris.append((v00, v10, v11))
                    tris.append((v00, v11, v01))

    face(lambda u, v: (u, v, nz), nx, ny, False)   # +z
    face(lambda u, v: (u, v, 0), nx, ny, True)     # -z
    face(lambda u, v: (u, ny, v), nx, nz, True)    # +y
    face(lambda u, v: (u, 0, v), nx, nz, False)    # -y
    face(lambda u, v: (nx, u, v), ny, nz, False)   # +x
    face(lambda u, v: (0, u, v), ny, nz, True)     # -x
    return SurfaceMesh(np.array(verts), np.array(tris))


def _icosahedron():
    p = 0.5 * (1.0 + np.sqrt(5.0))
    v = np.array(
        [
            [-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
            [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
            [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1],
        ],
        dtype=float,
    )
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    # fix outwardness per face; convexity about the origin makes the
    # per-face condition globally consistent
    q = v[f]
    j = np.cross(q[:, 1] - q[:, 0], q[:, 2] - q[:, 1])
    inward = np.einsum("fc,fc->f", j, q.mean(axis=1)) < 0
    f[inward] = f[inward][:, [0, 2, 1]]
    return v, f


def _subdivide_on_sphere(verts, tris):
    """One 1-to-4 refinement with midpoints projected to the unit sphere."""
    verts = list(map(np.asarray, verts))
    cache = {}

    def midpoint(i, j):
        key = (i, j) if i < j else (j, i)
        out = cache.get(key)
        if out is None:
            m = verts[i] + verts[j]
            m = m / np.linalg.norm(m)
            out = len(verts)
            cache[key] = out
            verts.append(m)
        return out

    new_tris = []
    for t0, t1, t2 in tris:
        m01 = midpoint(t0, t1)
        m12 = midpoint(t1, t2)
        m20 = midpoint(t2, t0)
        new_tris += [
            (t0, m01, m20), (t1, m12, m01), (t2, m20, m12), (m01, m12, m20)
        ]
    return verts, np.array(new_tris, dtype=np.int64)


def make_ellipsoid(a, b, c, h):
    """Ellipsoid with bounding box a x b x c, centered at the origin.

    A recursively subdivided icosahedron is projected to the unit sphere
    and scaled by diag(a, b, c)/2; the subdivision depth is the smallest
    for which the maximum edge of the scaled mesh is at most `h`.
    """
    if min(a, b, c) <= 0 or h <= 0:
        raise ConfigError("ellipsoid extents and h must be positive")
    scale = 0.5 * np.array([a, b, c])

    def max_edge(verts, tris):
        q = (np.asarray(verts) * scale)[tris]
        e = q - np.roll(q, -1, axis=1)
        return float(np.sqrt(np.sum(e**2, axis=2).max()))

    verts, tris = _icosahedron()
    verts = [p for p in verts]
    while max_edge(verts, tris) > h:
        verts, tris = _subdivide_on_sphere(verts, tris)
    return SurfaceMesh(np.array(verts) * scale, tris)
