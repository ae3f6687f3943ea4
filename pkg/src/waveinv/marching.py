"""Filtered depth marching of the reduced system from one-face Cauchy data.

One-sided continuation of an elliptic system is only conditionally
stable: a lateral mode of wavenumber kappa, seeded with relative error
eta at the face, reaches eta * exp(kappa * depth) after continuing a
distance `depth`.  The march therefore keeps, at each depth, only the
modes with kappa * depth <= march_budget and removes the rest with a
super-Gaussian DCT filter; the retained band is accurate while the
removed one is unrecoverable from face data at working precision.

The face window is padded laterally before marching (extend_face_data)
so the artificial lateral closure sits away from the reporting region;
the padded values come from a coarse interior point-mass fit of the
measured window, which completes the smooth potential tail without
inventing structure.

All component fields here use the (N, nx, ny[, nz]) layout, and the
march always steps from plane k = 0 into the volume; callers flip the
z axis (and the sign of the first-order z coefficient) to march from
the transmitted face.
"""

from __future__ import annotations

import numpy as np
import scipy.fft as sfft

from .errors import ConfigError, NumericalError
from .geometry import Grid3, DomainConfig
from .basis import BasisSet
from .system import CoefficientMatrices

__all__ = ["padded_grid", "source_line_points", "extend_face_data", "march_field"]


def padded_grid(grid: Grid3, pad: int) -> Grid3:
    """`grid` widened by `pad` cells on all four lateral sides."""
    if pad < 0:
        raise ConfigError(f"pad={pad} must be nonnegative")
    h = grid.step
    return Grid3(
        origin=(grid.origin[0] - pad * h, grid.origin[1] - pad * h, grid.origin[2]),
        step=h,
        counts=(grid.shape[0] + 2 * pad, grid.shape[1] + 2 * pad, grid.shape[2]),
    )


def source_line_points(basis: BasisSet, source_z: float) -> np.ndarray:
    """Quadrature nodes of the source parameter as 3D points, (K, 3)."""
    K = len(basis.quad_nodes)
    return np.stack(
        [basis.quad_nodes, np.zeros(K), np.full(K, source_z)], axis=1
    )


def extend_face_data(
    phi0: np.ndarray,
    phi1: np.ndarray,
    basis: BasisSet,
    cfg: DomainConfig,
    pgrid: Grid3,
    face_z: float,
    nz_sign: float,
    n_lattice: int = 5,
    ridge: float = 1e-8,
) -> tuple[np.ndarray, np.ndarray]:
    """Extend (N, nx, ny) face data onto the padded window of `pgrid`.

    Fits interior point masses on a coarse lattice to the measured phi0
    window (all components jointly, each scaled to unit peak), then
    evaluates the fitted potential's trace and outward normal derivative
    on the pad ring.  The measured window itself is kept verbatim.
    `nz_sign` is the z component of the outward face normal.
    """
    N, nx, ny = phi0.shape
    nxp, nyp = pgrid.shape[0], pgrid.shape[1]
    pad = (nxp - nx) // 2
    if (nxp - nx) % 2 or (nyp - ny) % 2 or pad != (nyp - ny) // 2:
        raise ConfigError("padded grid is not centered on the data window")
    if pad == 0:
        return phi0.copy(), phi1.copy()

    # Coarse lattice well inside Omega: only the smooth exterior tail of
    # the potential is needed on the pad, not interior resolution.
    ax_m = np.linspace(-0.55 * cfg.A / 0.75, 0.55 * cfg.A / 0.75, n_lattice)
    MX, MY, MZ = np.meshgrid(ax_m, ax_m, ax_m, indexing="ij")
    xi = np.stack([MX.ravel(), MY.ravel(), MZ.ravel()], axis=1)
    J = len(xi)

    src = source_line_points(basis, cfg.source_z)
    fx, fy = np.meshgrid(pgrid.axis(0), pgrid.axis(1), indexing="ij")
    fpts = np.stack([fx.ravel(), fy.ravel(), np.full(fx.size, face_z)], axis=1)
    c_nk = basis.quad_weights[None, :] * basis.psi_q.T

    R1 = np.linalg.norm(fpts[:, None, :] - src[None, :, :], axis=2)
    R2 = np.linalg.norm(xi[:, None, :] - src[None, :, :], axis=2)
    D = np.linalg.norm(fpts[:, None, :] - xi[None, :, :], axis=2)
    if D.min() < 0.1 * pgrid.step:
        raise NumericalError("pad-fit lattice touches the measurement face")
    S = np.einsum("nk,fk,jk->nfj", c_nk, R1, 1.0 / R2)
    G0 = S / (4 * np.pi * D[None, :, :])
    dzD = fpts[:, 2:3] - xi[None, :, 2] * np.ones((len(fpts), 1))
    dzR1 = (face_z - cfg.source_z) / R1
    S1 = np.einsum("nk,fk,jk->nfj", c_nk, dzR1, 1.0 / R2)
    G1 = (-dzD / D**3)[None] * S / (4 * np.pi) + S1 / (4 * np.pi * D[None])

    win = np.zeros((nxp, nyp), dtype=bool)
    win[pad:pad + nx, pad:pad + ny] = True
    wflat = win.ravel()
    rows = []
    rhs = []
    for n in range(N):
        sc = max(np.abs(phi0[n]).max(), 1e-30)
        rows.append(G0[n][wflat] / sc)
        rhs.append(phi0[n].ravel() / sc)
    Amat = np.vstack(rows)
    bvec = np.concatenate(rhs)
    AtA = Amat.T @ Amat + ridge * np.eye(J)
    m = np.linalg.solve(AtA, Amat.T @ bvec)

    p0 = np.einsum("nfj,j->nf", G0, m).reshape(N, nxp, nyp)
    p1 = nz_sign * np.einsum("nfj,j->nf", G1, m).reshape(N, nxp, nyp)
    sl_x = slice(pad, pad + nx)
    sl_y = slice(pad, pad + ny)
    p0[:, sl_x, sl_y] = phi0
    p1[:, sl_x, sl_y] = phi1
    return p0, p1


def _depth_filter_profile(nxp: int, nyp: int, h: float) -> np.ndarray:
    """Lateral wavenumber magnitude of each DCT mode, in rad per length."""
    kx = np.arange(nxp) * np.pi / (nxp * h)
    ky = np.arange(nyp) * np.pi / (nyp * h)
    return np.sqrt(kx[:, None] ** 2 + ky[None, :] ** 2)


def _lowpass(planes: np.ndarray, kr: np.ndarray, k_cut: float, order: int) -> np.ndarray:
    co = sfft.dctn(planes, axes=(1, 2), norm="ortho")
    co *= np.exp(-((kr / k_cut) ** order))[None, :, :]
    return sfft.idctn(co, axes=(1, 2), norm="ortho")


def _close_edges(P: np.ndarray) -> np.ndarray:
    # One-sided second-order zero-slope closure of the lateral boundary
    # ring; on the padded window this sits away from the reported region.
    P[:, 0, :] = (4 * P[:, 1, :] - P[:, 2, :]) / 3
    P[:, -1, :] = (4 * P[:, -2, :] - P[:, -3, :]) / 3
    P[:, :, 0] = (4 * P[:, :, 1] - P[:, :, 2]) / 3
    P[:, :, -1] = (4 * P[:, :, -2] - P[:, :, -3]) / 3
    return P


def march_field(
    phi0: np.ndarray,
    phi1_march: np.ndarray,
    coeffs: CoefficientMatrices,
    cfg: DomainConfig,
) -> np.ndarray:
    """Continue the Cauchy pair through the volume, filtering per depth.

    `phi0` and `phi1_march` are (N, nx, ny) on the k = 0 plane of
    `coeffs.grid`; `phi1_march` is the derivative along the march
    direction (minus the outward normal derivative).  Returns the
    (N, nx, ny, nz) continued field.  The z-second-derivative is
    isolated from the reduced system plane by plane; each new plane is
    closed at the lateral ring, then low-passed at the depth-dependent
    cutoff max(floor, budget / depth).
    """
    grid = coeffs.grid
    nx, ny, nz = grid.shape
    N = coeffs.N
    if phi0.shape != (N, nx, ny) or phi1_march.shape != (N, nx, ny):
        raise ConfigError(
            f"face data {phi0.shape} does not match grid planes {(N, nx, ny)}"
        )
    if nx < 3 or ny < 3 or nz < 2:
        raise ConfigError(f"grid {grid.shape} too small to march")
    h = grid.step
    A1, A2, A3 = coeffs.A1, coeffs.A2, coeffs.A3
    kr = _depth_filter_profile(nx, ny, h)
    k_floor = cfg.march_floor * np.pi / (max(nx, ny) * h)

    def lat_ops(P):
        lat = np.zeros((N, nx, ny))
        dx = np.zeros((N, nx, ny))
        dy = np.zeros((N, nx, ny))
        lat[:, 1:-1, 1:-1] = (
            (P[:, 2:, 1:-1] - 2 * P[:, 1:-1, 1:-1] + P[:, :-2, 1:-1]) / h**2
            + (P[:, 1:-1, 2:] - 2 * P[:, 1:-1, 1:-1] + P[:, 1:-1, :-2]) / h**2
        )
        dx[:, 1:-1, 1:-1] = (P[:, 2:, 1:-1] - P[:, :-2, 1:-1]) / (2 * h)
        dy[:, 1:-1, 1:-1] = (P[:, 1:-1, 2:] - P[:, 1:-1, :-2]) / (2 * h)
        return lat, dx, dy

    U = np.zeros((N, nx, ny, nz))
    U[:, :, :, 0] = phi0
    dz0 = phi1_march

    # Second-order start: u_zz at the face from the reduced system itself.
    lat0, dx0, dy0 = lat_ops(U[:, :, :, 0])
    uzz0 = -(
        lat0
        + np.einsum("xymn,nxy->mxy", A1[:, :, 0], dx0)
        + np.einsum("xymn,nxy->mxy", A2[:, :, 0], dy0)
        + np.einsum("xymn,nxy->mxy", A3[:, :, 0], dz0)
    )
    U[:, :, :, 1] = _close_edges(U[:, :, :, 0] + h * dz0 + 0.5 * h * h * uzz0)

    eyeN = np.eye(N)[None, None]
    for k in range(1, nz - 1):
        Uk = U[:, :, :, k]
        Um = U[:, :, :, k - 1]
        lat, dx, dy = lat_ops(Uk)
        a1 = np.einsum("xymn,nxy->mxy", A1[:, :, k], dx)
        a2 = np.einsum("xymn,nxy->mxy", A2[:, :, k], dy)
        A3k = A3[1:-1, 1:-1, k]
        # Per-node N x N solve: the N-coupled centered z stencil,
        # (I/h^2 + A3/2h) U_{k+1} = -(lat + a1 + a2) + 2 U_k/h^2
        #                            - (I/h^2 - A3/2h) U_{k-1}.
        Mk = eyeN / h**2 + A3k / (2 * h)
        rhs = (-(lat + a1 + a2) + 2 * Uk / h**2)[:, 1:-1, 1:-1]
        rhs = np.moveaxis(rhs, 0, -1)
        um = np.moveaxis(Um[:, 1:-1, 1:-1], 0, -1)
        rhs -= um / h**2 - np.einsum("xymn,xyn->xym", A3k, um) / (2 * h)
        sol = np.linalg.solve(Mk, rhs[..., None])[..., 0]
        Up = np.zeros((N, nx, ny))
        Up[:, 1:-1, 1:-1] = np.moveaxis(sol, -1, 0)
        Up = _close_edges(Up)
        k_cut = max(k_floor, cfg.march_budget / ((k + 1) * h))
        Up = _lowpass(Up, kr, k_cut, cfg.march_filter_order)
        if not np.all(np.isfinite(Up)):
            raise NumericalError(f"march diverged at plane {k + 1}")
        U[:, :, :, k + 1] = Up
    return U
