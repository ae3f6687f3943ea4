"""Nonnegative blob representation of the scattering source.

The marched field is accurate only in a low-lateral-frequency band that
narrows with depth, so pointwise differentiation of it amplifies the
near-cutoff error by kappa^2.  Instead, the trusted shallow planes (plus
the measured face derivative) are fitted by the potential of a lattice
of isotropic Gaussian blobs with nonnegative masses.  The blob potential
is smooth and satisfies the same reduced system, the nonnegativity
matches a weak scatterer (q >= 0), and the fitted model extends the
reconstruction to depths the march itself cannot reach pointwise.

Fit rows are weighted in absolute scale: the component fields span
orders of magnitude, and the march error is absolute, so normalizing
per component would hand the noisiest components the largest votes.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ConfigError, NumericalError
from .geometry import Grid3, DomainConfig, FACE_BACKSCATTER, FACE_TRANSMITTED
from .basis import BasisSet
from .marching import source_line_points

__all__ = ["SourceModel", "plane_weights"]


def plane_weights(nz: int, trust_depth: int, face: str) -> np.ndarray:
    """Per-plane fit weights: 1 near the data face, cosine taper at the end.

    Weights are indexed by physical plane; the trusted window starts at
    the measurement face and extends `trust_depth` planes inward, the
    last two of which get weights 0.75 and 0.25.
    """
    if trust_depth >= nz:
        raise ConfigError(f"trust_depth={trust_depth} exceeds the grid depth {nz}")
    w = np.zeros(nz)
    w[: trust_depth + 1] = 1.0
    for j, val in ((0, 0.25), (1, 0.75)):
        k = trust_depth - j
        if 0 <= k < nz:
            w[k] = val
    if face == FACE_TRANSMITTED:
        w = w[::-1].copy()
    elif face != FACE_BACKSCATTER:
        raise ConfigError(f"unknown face {face!r}")
    return w


class SourceModel:
    """Design matrices and fitting for the blob source representation.

    Parameters
    ----------
    basis : BasisSet
        Source-parameter basis; its quadrature nodes define the source
        line points the projected kernels integrate over.
    cfg : DomainConfig
        Supplies the lattice (blob_grid, blob_extent), the blob width,
        and the source geometry.
    grid : Grid3
        Reporting grid; design blocks are evaluated on its planes.

    Notes
    -----
    The projected potential of blob j at plane node f is

        G[n, f, j] = M_b erf(D / (sqrt(2) sig)) / (4 pi D)
                     * sum_k c_nk |x_f - s_k| / |xi_j - s_k|,

    with D = |x_f - xi_j|, s_k the source-line quadrature points,
    c_nk the basis quadrature row, and M_b the unit-mass normalization
    (2 pi)^{3/2} sig^3.  Plane design blocks are cached on first use.
    """

    def __init__(self, basis: BasisSet, cfg: DomainConfig, grid: Grid3):
        self.basis = basis
        self.grid = grid
        self.sig = cfg.blob_sigma
        self.N = basis.N
        ax = np.linspace(-cfg.blob_extent, cfg.blob_extent, cfg.blob_grid)
        BX, BY, BZ = np.meshgrid(ax, ax, ax, indexing="ij")
        self.xi = np.stack([BX.ravel(), BY.ravel(), BZ.ravel()], axis=1)
        self.J = len(self.xi)
        self.mass = (2 * np.pi) ** 1.5 * self.sig**3
        self.src = source_line_points(basis, cfg.source_z)
        self.c_nk = basis.quad_weights[None, :] * basis.psi_q.T
        self.R2b = np.linalg.norm(self.xi[:, None, :] - self.src[None, :, :], axis=2)
        if self.R2b.min() < 10 * self.sig:
            raise ConfigError("blob lattice reaches the source line")
        self._planes: dict[int, np.ndarray] = {}
        self._ata: dict[int, np.ndarray] = {}
        self._face_dz: dict[int, np.ndarray] = {}

    # -- design blocks -------------------------------------------------------

    def _plane_nodes(self, k: int) -> np.ndarray:
        gx, gy = self.grid.axis(0), self.grid.axis(1)
        XX, YY = np.meshgrid(gx, gy, indexing="ij")
        z = self.grid.axis(2)[k]
        return np.stack([XX.ravel(), YY.ravel(), np.full(XX.size, z)], axis=1)

    def design_plane(self, k: int) -> np.ndarray:
        """(N, nx * ny, J) block of projected blob potentials on plane k."""
        if k not in self._planes:
            nodes = self._plane_nodes(k)
            R1 = np.linalg.norm(nodes[:, None, :] - self.src[None, :, :], axis=2)
            D = np.maximum(
                np.linalg.norm(nodes[:, None, :] - self.xi[None, :, :], axis=2), 1e-9
            )
            pot = self.mass * erf(D / (np.sqrt(2) * self.sig)) / (4 * np.pi * D)
            S = np.einsum("nk,fk,jk->nfj", self.c_nk, R1, 1.0 / self.R2b)
            self._planes[k] = pot[None, :, :] * S
        return self._planes[k]

    def design_face_dz(self, k: int, source_z: float) -> np.ndarray:
        """(N, nx * ny, J) block of d/dz of the projected potential on plane k."""
        if k not in self._face_dz:
            nodes = self._plane_nodes(k)
            zf = self.grid.axis(2)[k]
            R1 = np.linalg.norm(nodes[:, None, :] - self.src[None, :, :], axis=2)
            D = np.maximum(
                np.linalg.norm(nodes[:, None, :] - self.xi[None, :, :], axis=2), 1e-9
            )
            u = D / (np.sqrt(2) * self.sig)
            E = erf(u)
            dpot = self.mass * ((2 / np.sqrt(np.pi)) * np.exp(-(u**2)) * u - E) / (
                4 * np.pi * D**2
            )
            pot = self.mass * E / (4 * np.pi * D)
            dzD = (zf - self.xi[None, :, 2]) / D
            S = np.einsum("nk,fk,jk->nfj", self.c_nk, R1, 1.0 / self.R2b)
            dzR1 = (zf - source_z) / R1
            S1 = np.einsum("nk,fk,jk->nfj", self.c_nk, dzR1, 1.0 / self.R2b)
            self._face_dz[k] = (dpot * dzD)[None, :, :] * S + pot[None, :, :] * S1
        return self._face_dz[k]

    def _plane_normal_block(self, k: int) -> np.ndarray:
        if k not in self._ata:
            G = self.design_plane(k)
            self._ata[k] = sum(G[n].T @ G[n] for n in range(self.N))
        return self._ata[k]

    # -- fitting ---------------------------------------------------------------

    def fit(
        self,
        U: np.ndarray,
        phi1: np.ndarray,
        cfg: DomainConfig,
        face: str,
    ) -> tuple[np.ndarray, dict]:
        """Nonnegative ridge fit of blob masses to the trusted planes.

        Parameters
        ----------
        U : ndarray, (N,) + grid.shape
            Marched component field on the reporting grid (physical z order).
        phi1 : ndarray, (N, nx, ny)
            Measured outward normal derivative coefficients on the face.
        cfg : DomainConfig
            trust_depth, fit_ridge, fit_face_weight.
        face : str
            Which face carries the data.

        Returns
        -------
        m : ndarray, (J,)
            Nonnegative blob masses.
        info : dict
            Active count, refits, effective ridge, row-block weights.
        """
        nz = self.grid.shape[2]
        if U.shape != (self.N, *self.grid.shape):
            raise ConfigError(f"marched field {U.shape} does not match the grid")
        w = plane_weights(nz, cfg.trust_depth, face)
        face_k = 0 if face == FACE_BACKSCATTER else nz - 1
        nz_sign = -1.0 if face == FACE_BACKSCATTER else 1.0

        AtA = np.zeros((self.J, self.J))
        Atb = np.zeros(self.J)
        for k in np.flatnonzero(w):
            AtA += w[k] ** 2 * self._plane_normal_block(k)
            G = self.design_plane(k)
            dk = U[:, :, :, k].reshape(self.N, -1)
            Atb += w[k] ** 2 * sum(G[n].T @ dk[n] for n in range(self.N))
        wf = cfg.fit_face_weight
        if wf > 0:
            G1 = self.design_face_dz(face_k, self.src[0, 2])
            AtA += wf**2 * sum(G1[n].T @ G1[n] for n in range(self.N))
            # phi1 is outward; the design differentiates along +z.
            d1 = (nz_sign * phi1).reshape(self.N, -1)
            Atb += wf**2 * sum(G1[n].T @ d1[n] for n in range(self.N))

        tr = np.trace(AtA) / self.J
        if tr <= 0 or not np.isfinite(tr):
            raise NumericalError("source-fit normal matrix is degenerate")
        reg = cfg.fit_ridge * tr
        m = np.linalg.solve(AtA + reg * np.eye(self.J), Atb)
        active = np.ones(self.J, dtype=bool)
        refits = 0
        for _ in range(4):
            neg = m < 0
            if not neg.any():
                break
            active &= ~neg
            m = np.zeros(self.J)
            if active.any():
                m[active] = np.linalg.solve(
                    AtA[np.ix_(active, active)] + reg * np.eye(int(active.sum())),
                    Atb[active],
                )
            refits += 1
        m = np.maximum(m, 0.0)
        info = {
            "n_active": int((m > 0).sum()),
            "refits": refits,
            "ridge": float(reg),
            "plane_weights": w.tolist(),
            "face_weight": float(wf),
            "face_plane": face_k,
        }
        return m, info

    # -- evaluation --------------------------------------------------------------

    def synth_components(self, m: np.ndarray) -> np.ndarray:
        """Model component field G m on the full grid, (N,) + grid.shape."""
        nz = self.grid.shape[2]
        out = np.empty((self.N, *self.grid.shape))
        for k in range(nz):
            G = self.design_plane(k)
            for n in range(self.N):
                out[n, :, :, k] = (G[n] @ m).reshape(self.grid.shape[:2])
        return out

    def coefficient_values(self, m: np.ndarray) -> np.ndarray:
        """The blob superposition itself (the model's q) on the grid."""
        X, Y, Z = self.grid.meshgrid()
        pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
        out = np.zeros(len(pts))
        step = 200
        for a in range(0, self.J, step):
            b = min(a + step, self.J)
            d2 = ((pts[None, :, :] - self.xi[a:b, None, :]) ** 2).sum(axis=2)
            out += m[a:b] @ np.exp(-d2 / (2 * self.sig**2))
        return out.reshape(self.grid.shape)
