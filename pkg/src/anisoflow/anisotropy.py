"""Orientation-dependent surface energy densities.

A surface energy density is a smooth, positive, even function gamma(n) on unit
normals.  Every model here exposes

* ``gamma(n)``        - the density itself,
* ``gamma_ext(p)``    - its one-homogeneous extension |p| * gamma(p/|p|),
* ``xi(n)``           - the gradient of the extension at p = n,
* ``hessian(n)``      - the Hessian of the extension at p = n,

plus a weak/strong classifier based on the sign of the tangential Hessian.
Catalog families carry closed-form xi and Hessian; ``Custom`` models fall back
to central finite differences of the extension.

All evaluators accept a single vector or an (M, 3) stack of row vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ModelValidationError

__all__ = [
    "AnisotropyModel",
    "Isotropic",
    "Ellipsoidal",
    "LrNorm",
    "FourFold",
    "RegularizedBGN",
    "Custom",
    "Classification",
    "gamma",
    "gamma_ext",
    "xi",
    "hessian",
    "classify",
    "fibonacci_sphere",
    "tangent_basis",
]

_UNIT_TOL = 1e-9
# Finite-difference steps for Custom models without analytic evaluators.
_FD_STEP_GRAD = 1e-6
_FD_STEP_HESS = 1e-5


def _as_points(v):
    """Return (points as (M,3) float array, was_single flag)."""
    a = np.asarray(v, dtype=float)
    if a.ndim == 1:
        if a.shape != (3,):
            raise ValueError(f"expected a 3-vector, got shape {a.shape}")
        return a[None, :], True
    if a.ndim == 2 and a.shape[1] == 3:
        return a, False
    raise ValueError(f"expected (3,) or (M, 3) array, got shape {a.shape}")


def _check_unit(n):
    """Validate unit rows; returns the (M,3) array and single flag."""
    a, single = _as_points(n)
    err = np.abs(np.linalg.norm(a, axis=1) - 1.0)
    if np.any(err > _UNIT_TOL):
        worst = float(err.max())
        raise ValueError(
            f"direction must be a unit vector (norm deviates by {worst:.3e})"
        )
    return a, single


def fibonacci_sphere(count):
    """Deterministic quasi-uniform unit directions (golden-angle lattice).

    Parameters
    ----------
    count : int
        Number of points, at least 1.

    Returns
    -------
    ndarray of shape (count, 3)
    """
    if count < 1:
        raise ValueError("count must be positive")
    i = np.arange(count, dtype=float)
    z = 1.0 - (2.0 * i + 1.0) / count
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    theta = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), z])


def tangent_basis(n):
    """Orthonormal tangent pair (t1, t2) for unit rows n, each (M, 3).

    t1 is built by Gram-Schmidt from the coordinate axis least aligned
    with n, t2 = n x t1.  Deterministic in n.
    """
    a, single = _as_points(n)
    pick = np.argmin(np.abs(a), axis=1)
    e = np.zeros_like(a)
    e[np.arange(len(a)), pick] = 1.0
    t1 = e - (np.sum(e * a, axis=1, keepdims=True)) * a
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(a, t1)
    if single:
        return t1[0], t2[0]
    return t1, t2


@dataclass(frozen=True)
class Classification:
    """Outcome of the weak/strong test.

    Attributes
    ----------
    kind : str
        ``"Weak"`` or ``"Strong"``.
    witness_normal, witness_tangent : ndarray or None
        For Strong, a unit normal n* and unit tangent t* with
        t* . n* = 0 and t*^T H(n*) t* < 0.
    lambda_min, lambda_max : float
        Extreme tangential Hessian eigenvalues over the sample set.
    sample_count : int
    """

    kind: str
    witness_normal: np.ndarray | None
    witness_tangent: np.ndarray | None
    lambda_min: float
    lambda_max: float
    sample_count: int


class AnisotropyModel:
    """Base class: even, positive surface energy density on the unit sphere.

    Subclasses implement the vectorized kernels ``gamma_many`` (and, for
    catalog families, ``xi_many`` / ``hessian_many``).  The base class
    provides validated scalar entry points, the one-homogeneous extension,
    finite-difference fallbacks, and classification.
    """

    family = "abstract"

    # -- vectorized kernels (rows assumed unit, no validation) -----------

    def gamma_many(self, n):
        raise NotImplementedError

    def xi_many(self, n):
        # central differences of the extension, component-wise
        return _fd_gradient(self, n, _FD_STEP_GRAD)

    def hessian_many(self, n):
        h = _fd_hessian(self, n, _FD_STEP_HESS)
        # the true Hessian of a 1-homogeneous function annihilates n;
        # symmetrize and project so the identity holds exactly
        h = 0.5 * (h + np.swapaxes(h, 1, 2))
        proj = np.eye(3)[None] - n[:, :, None] * n[:, None, :]
        return proj @ h @ proj

    def gamma_ext_many(self, p):
        """One-homogeneous extension on arbitrary rows; 0 rows map to 0."""
        norms = np.linalg.norm(p, axis=1)
        out = np.zeros(len(p))
        ok = norms > 0.0
        if np.any(ok):
            out[ok] = norms[ok] * self.gamma_many(p[ok] / norms[ok, None])
        return out

    # -- validated entry points ------------------------------------------

    def gamma(self, n):
        """Energy density at unit normal(s) n."""
        a, single = _check_unit(n)
        g = self.gamma_many(a)
        return float(g[0]) if single else g

    def gamma_ext(self, p):
        """One-homogeneous extension at nonzero point(s) p."""
        a, single = _as_points(p)
        if np.any(np.linalg.norm(a, axis=1) == 0.0):
            raise ValueError("extension is undefined at the origin")
        g = self.gamma_ext_many(a)
        return float(g[0]) if single else g

    def xi(self, n):
        """Gradient of the extension at unit normal(s) n."""
        a, single = _check_unit(n)
        x = self.xi_many(a)
        euler = np.abs(np.sum(x * a, axis=1) - self.gamma_many(a))
        if np.any(euler > 1e-6):
            raise ModelValidationError(
                "xi violates the degree-one identity xi . n = gamma(n) "
                f"(worst deviation {float(euler.max()):.3e})"
            )
        return x[0] if single else x

    def hessian(self, n):
        """Hessian of the extension at unit normal(s) n; H(n) n = 0."""
        a, single = _check_unit(n)
        h = self.hessian_many(a)
        return h[0] if single else h

    # -- classification ---------------------------------------------------

    def classify(self, sample_count=2000):
        """Weak/strong decision by sampling tangential Hessian eigenvalues.

        Parameters
        ----------
        sample_count : int
            Fibonacci-lattice size, at least 200.  Deterministic for a
            fixed count.

        Returns
        -------
        Classification
        """
        if sample_count < 200:
            raise ValueError("sample_count must be at least 200")
        ns = fibonacci_sphere(sample_count)
        h = self.hessian_many(ns)
        t1, t2 = tangent_basis(ns)
        a11 = np.einsum("mi,mij,mj->m", t1, h, t1)
        a22 = np.einsum("mi,mij,mj->m", t2, h, t2)
        a12 = np.einsum("mi,mij,mj->m", t1, h, t2)
        half_tr = 0.5 * (a11 + a22)
        disc = np.sqrt(0.25 * (a11 - a22) ** 2 + a12**2)
        lam_lo = half_tr - disc
        lam_hi = half_tr + disc
        lam_min = float(lam_lo.min())
        lam_max = float(lam_hi.max())
        if lam_min < -1e-10:
            m = int(np.argmin(lam_lo))
            # eigenvector of the 2x2 problem for the smaller eigenvalue
            b11, b22, b12 = a11[m], a22[m], a12[m]
            lam = lam_lo[m]
            if abs(b12) > 1e-300:
                c = np.array([b12, lam - b11])
            elif b11 <= b22:
                c = np.array([1.0, 0.0])
            else:
                c = np.array([0.0, 1.0])
            c = c / np.linalg.norm(c)
            tau = c[0] * t1[m] + c[1] * t2[m]
            tau /= np.linalg.norm(tau)
            return Classification(
                "Strong", ns[m].copy(), tau, lam_min, lam_max, sample_count
            )
        return Classification("Weak", None, None, lam_min, lam_max, sample_count)

    # -- misc --------------------------------------------------------------

    def params_text(self):
        """Canonical parameter string used for hashing and manifests."""
        return ""

    def __repr__(self):
        text = self.params_text()
        return f"{self.family}({text})" if text else self.family


def _fd_gradient(model, n, step):
    grads = np.empty_like(n, dtype=float)
    for c in range(3):
        dp = np.zeros(3)
        dp[c] = step
        grads[:, c] = (
            model.gamma_ext_many(n + dp) - model.gamma_ext_many(n - dp)
        ) / (2.0 * step)
    return grads


def _fd_hessian(model, n, step):
    m = len(n)
    h = np.empty((m, 3, 3))
    f0 = model.gamma_ext_many(n)
    eye = np.eye(3) * step
    for a in range(3):
        fpp = model.gamma_ext_many(n + eye[a])
        fmm = model.gamma_ext_many(n - eye[a])
        h[:, a, a] = (fpp - 2.0 * f0 + fmm) / step**2
        for b in range(a + 1, 3):
            fab = model.gamma_ext_many(n + eye[a] + eye[b])
            fa_b = model.gamma_ext_many(n + eye[a] - eye[b])
            f_ab = model.gamma_ext_many(n - eye[a] + eye[b])
            f_a_b = model.gamma_ext_many(n - eye[a] - eye[b])
            h[:, a, b] = h[:, b, a] = (fab - fa_b - f_ab + f_a_b) / (
                4.0 * step**2
            )
    return h


class Isotropic(AnisotropyModel):
    """Constant density gamma = 1; the extension is the Euclidean norm."""

    family = "isotropic"

    def gamma_many(self, n):
        return np.ones(len(n))

    def xi_many(self, n):
        return n.copy()

    def hessian_many(self, n):
        return np.eye(3)[None] - n[:, :, None] * n[:, None, :]


class Ellipsoidal(AnisotropyModel):
    """gamma(n) = sqrt(n^T G n) for a symmetric positive definite G."""

    family = "ellipsoidal"

    def __init__(self, G):
        G = np.asarray(G, dtype=float)
        if G.shape != (3, 3):
            raise ValueError("G must be a 3x3 matrix")
        if not np.allclose(G, G.T, atol=1e-12):
            raise ValueError("G must be symmetric")
        if np.linalg.eigvalsh(G).min() <= 0.0:
            raise ValueError("G must be positive definite")
        self.G = 0.5 * (G + G.T)

    def gamma_many(self, n):
        return np.sqrt(np.einsum("mi,ij,mj->m", n, self.G, n))

    def xi_many(self, n):
        g = self.gamma_many(n)
        return (n @ self.G) / g[:, None]

    def hessian_many(self, n):
        g = self.gamma_many(n)
        gn = n @ self.G
        return self.G[None] / g[:, None, None] - (
            gn[:, :, None] * gn[:, None, :]
        ) / (g**3)[:, None, None]

    def params_text(self):
        return "G=" + ",".join(f"{v:.17g}" for v in self.G.ravel())


class LrNorm(AnisotropyModel):
    """gamma(n) = (sum_i |n_i|^r)^(1/r), r >= 2."""

    family = "lrnorm"

    def __init__(self, r):
        if r < 2:
            raise ValueError("r must be at least 2")
        self.r = float(r)

    def gamma_many(self, n):
        return (np.abs(n) ** self.r).sum(axis=1) ** (1.0 / self.r)

    def _signed_power(self, n):
        # |n_i|^(r-2) n_i, with 0^0 = 1 (continuous limit for r = 2)
        return np.abs(n) ** (self.r - 2.0) * n

    def xi_many(self, n):
        g = self.gamma_many(n)
        return g[:, None] ** (1.0 - self.r) * self._signed_power(n)

    def hessian_many(self, n):
        r = self.r
        g = self.gamma_many(n)
        s = self._signed_power(n)
        diag = np.zeros((len(n), 3, 3))
        idx = np.arange(3)
        diag[:, idx, idx] = np.abs(n) ** (r - 2.0)
        return (r - 1.0) * (
            g[:, None, None] ** (1.0 - r) * diag
            - g[:, None, None] ** (1.0 - 2.0 * r)
            * s[:, :, None]
            * s[:, None, :]
        )

    def params_text(self):
        return f"r={self.r:.17g}"


class FourFold(AnisotropyModel):
    """gamma(n) = 1 + beta (n1^4 + n2^4 + n3^4), cubic symmetry."""

    family = "fourfold"

    def __init__(self, beta):
        if beta < 0:
            raise ValueError("beta must be nonnegative")
        self.beta = float(beta)

    def gamma_many(self, n):
        return 1.0 + self.beta * (n**4).sum(axis=1)

    def xi_many(self, n):
        s = (n**4).sum(axis=1)
        return n + self.beta * (4.0 * n**3 - 3.0 * s[:, None] * n)

    def hessian_many(self, n):
        b = self.beta
        s = (n**4).sum(axis=1)[:, None, None]
        eye = np.eye(3)[None]
        nnt = n[:, :, None] * n[:, None, :]
        n3 = n**3
        diag2 = np.zeros((len(n), 3, 3))
        idx = np.arange(3)
        diag2[:, idx, idx] = n**2
        cross = n3[:, :, None] * n[:, None, :] + n[:, :, None] * n3[:, None, :]
        return (eye - nnt) + b * (
            12.0 * diag2 - 12.0 * cross - 3.0 * s * eye + 15.0 * s * nnt
        )

    def params_text(self):
        return f"beta={self.beta:.17g}"


class RegularizedBGN(AnisotropyModel):
    """gamma(n) = (sum_l (n^T G_l n)^(r/2))^(1/r), r >= 1, each G_l SPD."""

    family = "regularizedbgn"

    def __init__(self, r, G_list):
        if r < 1:
            raise ValueError("r must be at least 1")
        mats = []
        for G in G_list:
            G = np.asarray(G, dtype=float)
            if G.shape != (3, 3) or not np.allclose(G, G.T, atol=1e-12):
                raise ValueError("each G_l must be symmetric 3x3")
            if np.linalg.eigvalsh(G).min() <= 0.0:
                raise ValueError("each G_l must be positive definite")
            mats.append(0.5 * (G + G.T))
        if not mats:
            raise ValueError("G_list must be nonempty")
        self.r = float(r)
        self.G_list = mats

    def _pieces(self, n):
        # per-matrix gamma_l = sqrt(n^T G_l n) and G_l n, shapes (L,M), (L,M,3)
        gl = np.array([np.einsum("mi,ij,mj->m", n, G, n) for G in self.G_list])
        gn = np.array([n @ G for G in self.G_list])
        return np.sqrt(gl), gn

    def gamma_many(self, n):
        gl, _ = self._pieces(n)
        return (gl**self.r).sum(axis=0) ** (1.0 / self.r)

    def xi_many(self, n):
        r = self.r
        gl, gn = self._pieces(n)
        g = (gl**r).sum(axis=0) ** (1.0 / r)
        s = (gl[:, :, None] ** (r - 2.0) * gn).sum(axis=0)
        return g[:, None] ** (1.0 - r) * s

    def hessian_many(self, n):
        r = self.r
        gl, gn = self._pieces(n)
        g = (gl**r).sum(axis=0) ** (1.0 / r)
        s = (gl[:, :, None] ** (r - 2.0) * gn).sum(axis=0)
        term = np.zeros((len(n), 3, 3))
        for li, G in enumerate(self.G_list):
            outer = gn[li][:, :, None] * gn[li][:, None, :]
            term += (r - 2.0) * gl[li][:, None, None] ** (r - 4.0) * outer
            term += gl[li][:, None, None] ** (r - 2.0) * G[None]
        h = (1.0 - r) * g[:, None, None] ** (1.0 - 2.0 * r) * (
            s[:, :, None] * s[:, None, :]
        )
        return h + g[:, None, None] ** (1.0 - r) * term

    def params_text(self):
        mats = ";".join(
            ",".join(f"{v:.17g}" for v in G.ravel()) for G in self.G_list
        )
        return f"r={self.r:.17g};{mats}"


class Custom(AnisotropyModel):
    """User-supplied density with optional analytic xi / Hessian.

    Parameters
    ----------
    gamma_fn : callable
        Maps an (M, 3) array of unit rows to an (M,) array of densities.
    xi_fn, hessian_fn : callable, optional
        Same calling convention, returning (M, 3) and (M, 3, 3).  When
        absent, central finite differences of the extension are used
        (steps 1e-6 and 1e-5); the finite-difference Hessian is
        symmetrized and projected tangentially.
    name : str
        Label used in reprs and hashing.
    """

    family = "custom"

    def __init__(self, gamma_fn, xi_fn=None, hessian_fn=None, name="custom"):
        self._gamma_fn = gamma_fn
        self._xi_fn = xi_fn
        self._hessian_fn = hessian_fn
        self.name = str(name)
        ns = fibonacci_sphere(32)
        vals = np.asarray(gamma_fn(ns), dtype=float)
        if vals.shape != (32,):
            raise ModelValidationError(
                "gamma_fn must map (M, 3) rows to an (M,) array"
            )
        if np.any(vals <= 0.0):
            raise ModelValidationError("gamma must be positive on the sphere")
        if np.any(np.abs(vals - np.asarray(gamma_fn(-ns))) > 1e-12):
            raise ModelValidationError("gamma must be even: gamma(-n) = gamma(n)")

    def gamma_many(self, n):
        return np.asarray(self._gamma_fn(n), dtype=float)

    def xi_many(self, n):
        if self._xi_fn is not None:
            return np.asarray(self._xi_fn(n), dtype=float)
        return _fd_gradient(self, n, _FD_STEP_GRAD)

    def hessian_many(self, n):
        if self._hessian_fn is not None:
            return np.asarray(self._hessian_fn(n), dtype=float)
        return AnisotropyModel.hessian_many(self, n)

    def params_text(self):
        samples = self.gamma_many(fibonacci_sphere(60))
        return f"name={self.name};" + ",".join(f"{v:.17g}" for v in samples)


# -- module-level operation wrappers --------------------------------------


def gamma(model, n):
    """Energy density gamma(n) of `model` at unit normal n."""
    return model.gamma(n)


def gamma_ext(model, p):
    """One-homogeneous extension |p| gamma(p/|p|) at nonzero p."""
    return model.gamma_ext(p)


def xi(model, n):
    """Gradient of the extension at p = n (satisfies xi . n = gamma)."""
    return model.xi(n)


def hessian(model, n):
    """Hessian of the extension at p = n (satisfies H n = 0)."""
    return model.hessian(n)


def classify(model, sample_count=2000):
    """Weak/strong classification of `model`; see AnisotropyModel.classify."""
    return model.classify(sample_count)
