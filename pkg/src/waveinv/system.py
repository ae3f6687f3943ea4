"""Reduction of the integral-equation data to a coupled elliptic system.

Writing the moment field as u(x, x0) = g0(x, x0) |x - x0| and expanding
its source dependence in the weighted basis, u = sum_n u_n(x) psi_n(x0),
the x0-derivative of the governing identity

    |x - x0| Laplace_x(v) = Laplace_x(u) - (2 / r^2) (x - x0_vec) . grad u,
    r^2 = (x - x0)^2 + y^2 + (z - z_s)^2,

kills the unknown right side and, projected on psi_m, leaves

    M dU - 2 (C1 U_x + C2 U_y + C3 U_z) = 0
    =>  L(U) = dU + A1 U_x + A2 U_y + A3 U_z + A0 U = 0,

with A_i = -2 M^{-1} C_i and A0 = 0 (the zeroth-order term cancels
identically; the manufactured-field test pins this down).  The C kernels
are integrals over x0 of rational functions times basis values and are
evaluated with the basis quadrature, either from the closed-form
x0-derivative or by numerical differentiation (cross-check path).

Boundary data enter through the projected Cauchy pair (phi0, phi1) on the
measurement face and a smooth extension field F that carries them into
the volume.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline, RectBivariateSpline, RegularGridInterpolator

from waveinv.basis import BasisSet
from waveinv.data import BoundaryDataSet
from waveinv.errors import ConfigError, NumericalError
from waveinv.geometry import (
    DomainConfig,
    Grid3,
    SourceDetectorLayout,
    inversion_grid,
)


@dataclass
class VectorField:
    """N-component field on a Grid3; the component index comes first."""

    grid: Grid3
    components: np.ndarray  # (N, nx, ny, nz)

    def __post_init__(self):
        self.components = np.asarray(self.components, dtype=np.float64)
        if self.components.ndim != 4 or self.components.shape[1:] != self.grid.shape:
            raise ConfigError(
                f"components shape {self.components.shape} does not match grid {self.grid.shape}"
            )

    @property
    def N(self) -> int:
        return self.components.shape[0]


@dataclass
class BoundaryVectors:
    """Projected Cauchy data on the measurement-face node grid.

    phi0[i, j, n] is the n-th basis coefficient of u at face node
    (x_i, y_j); phi1 likewise for the outward normal derivative.
    """

    phi0: np.ndarray
    phi1: np.ndarray
    face: str
    face_z: float
    face_x: np.ndarray
    face_y: np.ndarray
    interpolated: bool
    truncation_residual_u: np.ndarray
    truncation_residual_dnu: np.ndarray

    @property
    def N(self) -> int:
        return self.phi0.shape[2]


@dataclass
class CoefficientMatrices:
    """First- and zeroth-order coefficients of the reduced operator."""

    grid: Grid3
    A1: np.ndarray  # (nx, ny, nz, N, N)
    A2: np.ndarray
    A3: np.ndarray
    A0: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.A1.shape[-1]


# ---------------------------------------------------------------------------
# boundary projection
# ---------------------------------------------------------------------------


def project_boundary_data(
    data: BoundaryDataSet,
    layout: SourceDetectorLayout,
    basis: BasisSet,
    cfg: DomainConfig,
    grid: Grid3 | None = None,
) -> BoundaryVectors:
    """Project per-source boundary data onto the basis, per face node.

    The measured pair (g0, g1) is first converted to the moment field and
    its normal derivative,

        u = g0 * r,   du/dn = g1 * r + g0 * (n . (x - x0_vec)) / r,

    then each detector's source dependence is interpolated onto the basis
    quadrature nodes (cubic spline) and integrated against psi_n.  The
    resulting coefficient maps are transferred from the detector grid to
    the inversion-grid face nodes, bilinearly when the grids differ.
    """
    if data.layout_hash != layout.layout_hash():
        raise ConfigError("boundary data was produced under a different layout")
    if grid is None:
        grid = inversion_grid(cfg)
    params = layout.source_params
    if abs(params[0] + basis.d) > 1e-9 or abs(params[-1] - basis.d) > 1e-9:
        raise ConfigError(
            f"source parameters span [{params[0]}, {params[-1]}] but the basis"
            f" interval is [-{basis.d}, {basis.d}]"
        )
    if len(params) < 2 * basis.N + 1:
        warnings.warn(
            f"{len(params)} source samples for N={basis.N} basis functions;"
            " the projection may alias high orders (recommend >= 2N+1 samples)",
            stacklevel=2,
        )

    diff = layout.detectors[:, None, :] - layout.sources[None, :, :]  # (D, S, 3)
    r = np.sqrt(np.sum(diff * diff, axis=2))
    dn_r = (diff @ layout.normal) / r
    u = data.g0 * r
    dnu = data.g1 * r + data.g0 * dn_r

    phi0_det = _project_samples(u, params, basis)
    phi1_det = _project_samples(dnu, params, basis)

    # per-detector relative truncation residual at the source samples
    psi_s, _ = basis.eval(params)  # (S, N)
    res_u = _rel_residual(u, phi0_det @ psi_s.T)
    res_dnu = _rel_residual(dnu, phi1_det @ psi_s.T)

    nx_d, ny_d = layout.det_shape
    phi0_det = phi0_det.reshape(nx_d, ny_d, basis.N)
    phi1_det = phi1_det.reshape(nx_d, ny_d, basis.N)

    face_x, face_y = grid.axis(0), grid.axis(1)
    aligned = (
        len(layout.det_x) == len(face_x)
        and len(layout.det_y) == len(face_y)
        and np.allclose(layout.det_x, face_x, atol=1e-12)
        and np.allclose(layout.det_y, face_y, atol=1e-12)
    )
    if aligned:
        phi0, phi1 = phi0_det.copy(), phi1_det.copy()
    else:
        tol = 1e-6 * grid.step
        if (
            layout.det_x[0] > face_x[0] + tol
            or layout.det_x[-1] < face_x[-1] - tol
            or layout.det_y[0] > face_y[0] + tol
            or layout.det_y[-1] < face_y[-1] - tol
        ):
            raise ConfigError(
                "detector grid does not cover the measurement face; cannot"
                " interpolate the projected data onto the face nodes"
            )
        gx, gy = np.meshgrid(face_x, face_y, indexing="ij")
        # clamp away float rounding at the shared corners
        qx = np.clip(gx.ravel(), layout.det_x[0], layout.det_x[-1])
        qy = np.clip(gy.ravel(), layout.det_y[0], layout.det_y[-1])
        query = np.column_stack([qx, qy])
        interp0 = RegularGridInterpolator((layout.det_x, layout.det_y), phi0_det)
        interp1 = RegularGridInterpolator((layout.det_x, layout.det_y), phi1_det)
        phi0 = interp0(query).reshape(len(face_x), len(face_y), basis.N)
        phi1 = interp1(query).reshape(len(face_x), len(face_y), basis.N)

    return BoundaryVectors(
        phi0=phi0,
        phi1=phi1,
        face=layout.face,
        face_z=layout.face_z,
        face_x=face_x,
        face_y=face_y,
        interpolated=not aligned,
        truncation_residual_u=res_u,
        truncation_residual_dnu=res_dnu,
    )


def _project_samples(values: np.ndarray, params: np.ndarray, basis: BasisSet) -> np.ndarray:
    """Basis coefficients of per-detector samples given at the source params."""
    if len(params) >= 4:
        spline = CubicSpline(params, values, axis=1)
        at_nodes = spline(basis.quad_nodes)  # (D, K)
    else:
        at_nodes = np.stack(
            [np.interp(basis.quad_nodes, params, row) for row in values]
        )
    return basis.project(at_nodes)


def _rel_residual(exact: np.ndarray, approx: np.ndarray) -> np.ndarray:
    num = np.linalg.norm(exact - approx, axis=1)
    den = np.linalg.norm(exact, axis=1)
    return num / np.where(den > 0, den, 1.0)


# ---------------------------------------------------------------------------
# coefficient assembly
# ---------------------------------------------------------------------------


def _kernel_matrices(
    psi: np.ndarray,
    dpsi: np.ndarray,
    weights: np.ndarray,
    ex: np.ndarray,
    rho2: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form x0-derivative kernels, integrated with the basis rule.

    Parameters
    ----------
    psi, dpsi : (K, N)
        Basis values/derivatives at the quadrature nodes.
    weights : (K,)
    ex : (B, K)
        x - x0 at every node/batch point.
    rho2 : (B,)
        (y - y_s)^2 + (z - z_s)^2 per batch point.

    Returns
    -------
    I1, I2 : (B, N, N)
        I1[b, m, n] = int [(-psi_n + ex psi_n') / r^2 + 2 ex^2 psi_n / r^4] psi_m
        I2[b, m, n] = int [psi_n' / r^2 + 2 ex psi_n / r^4] psi_m
    """
    r2 = ex * ex + rho2[:, None]  # (B, K)
    inv2 = 1.0 / r2
    inv4 = inv2 * inv2
    t1 = (
        (-psi[None] + ex[..., None] * dpsi[None]) * inv2[..., None]
        + 2.0 * (ex * ex * inv4)[..., None] * psi[None]
    )  # (B, K, N)
    t2 = dpsi[None] * inv2[..., None] + 2.0 * (ex * inv4)[..., None] * psi[None]
    wpsi = weights[:, None] * psi  # (K, M)
    I1 = np.einsum("bkn,km->bmn", t1, wpsi)
    I2 = np.einsum("bkn,km->bmn", t2, wpsi)
    return I1, I2


def _kernel_matrices_fd(
    basis: BasisSet,
    ex: np.ndarray,
    rho2: np.ndarray,
    delta: float = 1e-4,
) -> tuple[np.ndarray, np.ndarray]:
    """Same kernels with the x0-derivative taken by Richardson differences.

    Independent of the closed-form algebra; used to cross-validate the
    assembly.  ex = x - t at the unshifted quadrature nodes.
    """
    t = basis.quad_nodes
    w = basis.quad_weights
    psi_m = basis.psi_q  # (K, M)
    x = ex + t[None, :]  # recover node coordinates per batch point

    def h_values(shift: float):
        psi_s = basis._eval_raw(t + shift)[0]  # (K, N)
        exs = x - (t + shift)[None, :]
        r2 = exs * exs + rho2[:, None]
        hx = (exs[..., None] * psi_s[None]) / r2[..., None]
        hy = psi_s[None] / r2[..., None]
        return hx, hy

    hx_p, hy_p = h_values(delta)
    hx_m, hy_m = h_values(-delta)
    hx_2p, hy_2p = h_values(2 * delta)
    hx_2m, hy_2m = h_values(-2 * delta)
    dx = (8.0 * (hx_p - hx_m) - (hx_2p - hx_2m)) / (12.0 * delta)
    dy = (8.0 * (hy_p - hy_m) - (hy_2p - hy_2m)) / (12.0 * delta)
    wpsi = w[:, None] * psi_m
    I1 = np.einsum("bkn,km->bmn", dx, wpsi)
    I2 = np.einsum("bkn,km->bmn", dy, wpsi)
    return I1, I2


def assemble_coefficients(
    basis: BasisSet,
    cfg: DomainConfig,
    grid: Grid3 | None = None,
    method: str = "closed",
) -> CoefficientMatrices:
    """Assemble A1, A2, A3 (and the zero A0) at every inversion node.

    method "closed" uses the analytic x0-derivative of the kernels;
    "fd" differentiates numerically (slower, for cross-validation).
    """
    if grid is None:
        grid = inversion_grid(cfg)
    if method not in ("closed", "fd"):
        raise ConfigError(f"unknown assembly method {method!r}")
    xs, ys, zs = grid.meshgrid()
    coords = np.column_stack([xs.ravel(), ys.ravel(), zs.ravel()])
    src = cfg.source_point
    B = coords.shape[0]
    N = basis.N
    ex = coords[:, 0:1] - basis.quad_nodes[None, :]  # (B, K)
    ytil = coords[:, 1] - src[1]
    ztil = coords[:, 2] - src[2]
    rho2 = ytil**2 + ztil**2

    if method == "closed":
        I1, I2 = _kernel_matrices(basis.psi_q, basis.dpsi_q, basis.quad_weights, ex, rho2)
    else:
        I1, I2 = _kernel_matrices_fd(basis, ex, rho2)

    _assert_kernel_bound(I1, I2, basis, ex, rho2)

    C1 = I1
    C2 = ytil[:, None, None] * I2
    C3 = ztil[:, None, None] * I2
    minv = np.linalg.inv(basis.M)
    shape = grid.shape + (N, N)
    A1 = (-2.0 * np.einsum("mn,bnk->bmk", minv, C1)).reshape(shape)
    A2 = (-2.0 * np.einsum("mn,bnk->bmk", minv, C2)).reshape(shape)
    A3 = (-2.0 * np.einsum("mn,bnk->bmk", minv, C3)).reshape(shape)
    A0 = np.zeros(shape)
    return CoefficientMatrices(
        grid=grid,
        A1=A1,
        A2=A2,
        A3=A3,
        A0=A0,
        meta={"method": method, "source_z": float(src[2]), "N": N},
    )


def _assert_kernel_bound(I1, I2, basis: BasisSet, ex, rho2) -> None:
    """Triangle-inequality bound from the stand-off distance to the source line."""
    r2min = np.min(ex * ex, axis=1) + rho2  # lower bound of r^2 at the quad nodes
    pmax = float(np.abs(basis.psi_q).max())
    dmax = float(np.abs(basis.dpsi_q).max())
    wsum = float(basis.quad_weights.sum())
    exmax = np.abs(ex).max(axis=1)
    b1 = wsum * pmax * ((pmax + exmax * dmax) / r2min + 2 * exmax**2 * pmax / r2min**2)
    b2 = wsum * pmax * (dmax / r2min + 2 * exmax * pmax / r2min**2)
    if not (
        np.all(np.abs(I1).max(axis=(1, 2)) <= b1 * (1 + 1e-9) + 1e-12)
        and np.all(np.abs(I2).max(axis=(1, 2)) <= b2 * (1 + 1e-9) + 1e-12)
    ):
        raise NumericalError("assembled kernels exceed their analytic bound; assembly bug")


def apply_reduced_operator(
    coeffs: CoefficientMatrices,
    lap_U: np.ndarray,
    grad_U: tuple[np.ndarray, np.ndarray, np.ndarray],
) -> np.ndarray:
    """L(U) given analytic Laplacians / gradients of the components.

    All inputs are (N,) + grid.shape arrays; returns the same shape.
    """
    gx, gy, gz = grad_U
    out = lap_U.copy()
    out += np.einsum("xyzmn,nxyz->mxyz", coeffs.A1, gx)
    out += np.einsum("xyzmn,nxyz->mxyz", coeffs.A2, gy)
    out += np.einsum("xyzmn,nxyz->mxyz", coeffs.A3, gz)
    return out


# ---------------------------------------------------------------------------
# extension of the Cauchy data into the volume
# ---------------------------------------------------------------------------


def _smoothstep(t: np.ndarray) -> np.ndarray:
    """Quintic smoothstep: 0 -> 1 on [0, 1] with zero first/second derivatives."""
    t = np.clip(t, 0.0, 1.0)
    return t**3 * (10.0 - 15.0 * t + 6.0 * t**2)


def _clamp_map(coords: np.ndarray, A: float, margin_frac: float = 0.5) -> np.ndarray:
    """Smooth reparametrization of [-A, A] that flattens near the ends.

    Identity on |x| <= A(1 - margin_frac); beyond that a quintic with zero
    slope and curvature at |x| = A, so fields composed with it have
    vanishing tangential derivatives at the lateral faces.
    """
    a = A * (1.0 - margin_frac)
    if a <= 0:
        raise ConfigError("margin_frac must be < 1")
    # quintic p with p(a)=a, p'(a)=1, p''(a)=0, p(A)=(a+A)/2, p'(A)=0, p''(A)=0
    rows = []
    rhs = []
    for cond, x0 in (("v", a), ("d", a), ("dd", a), ("v", A), ("d", A), ("dd", A)):
        k = np.arange(6, dtype=float)
        if cond == "v":
            rows.append(x0**k)
        elif cond == "d":
            rows.append(k * x0 ** np.maximum(k - 1, 0))
        else:
            rows.append(k * (k - 1) * x0 ** np.maximum(k - 2, 0))
    rhs = [a, 1.0, 0.0, (a + A) / 2.0, 0.0, 0.0]
    p = np.linalg.solve(np.array(rows), np.array(rhs))
    out = coords.copy()
    hi = np.abs(coords) > a
    out[hi] = np.sign(coords[hi]) * np.polyval(p[::-1], np.abs(coords[hi]))
    return out


def build_extension(
    bvecs: BoundaryVectors,
    cfg: DomainConfig,
    grid: Grid3 | None = None,
) -> VectorField:
    """Carry the Cauchy pair into Omega with compact quintic cutoffs.

    F = Phi0 * chi0(zeta) - Phi1 * chi1(zeta) with zeta the inward distance
    from the data face, chi0(0) = 1, chi0'(0) = 0, chi1(0) = 0,
    chi1'(0) = 1, both supported on zeta < A/2.  Away from the face the
    in-plane fields are composed with a smooth clamp so their tangential
    gradients die off near the lateral faces; the blend ramps in with
    zeta, keeping the face trace exact.
    """
    if grid is None:
        grid = inversion_grid(cfg)
    N = bvecs.N
    A = cfg.A
    L = A / 2.0
    zeta_axis = (grid.axis(2) - bvecs.face_z) * (1.0 if bvecs.face_z < 0 else -1.0)
    if zeta_axis.min() < -1e-9:
        raise ConfigError("inversion grid extends behind the measurement face")

    chi0 = 1.0 - _smoothstep(zeta_axis / L)
    chi1 = zeta_axis * (1.0 - _smoothstep(zeta_axis / L))
    beta = _smoothstep(zeta_axis / (A / 4.0))

    gx, gy = grid.axis(0), grid.axis(1)
    xm, ym = np.meshgrid(gx, gy, indexing="ij")
    xm_cl = _clamp_map(xm.ravel(), A)
    ym_cl = _clamp_map(ym.ravel(), A)

    comps = np.zeros((N,) + grid.shape)
    kdeg = min(3, len(bvecs.face_x) - 1, len(bvecs.face_y) - 1)
    splines0 = [
        RectBivariateSpline(bvecs.face_x, bvecs.face_y, bvecs.phi0[:, :, n], kx=kdeg, ky=kdeg)
        for n in range(N)
    ]
    splines1 = [
        RectBivariateSpline(bvecs.face_x, bvecs.face_y, bvecs.phi1[:, :, n], kx=kdeg, ky=kdeg)
        for n in range(N)
    ]
    # zeta_axis, chi and beta are all indexed by the z-plane of the grid
    for k in range(grid.counts[2]):
        if chi0[k] == 0.0 and chi1[k] == 0.0:
            continue
        bx = (1.0 - beta[k]) * xm.ravel() + beta[k] * xm_cl
        by = (1.0 - beta[k]) * ym.ravel() + beta[k] * ym_cl
        for n in range(N):
            p0 = splines0[n](bx, by, grid=False).reshape(xm.shape)
            p1 = splines1[n](bx, by, grid=False).reshape(xm.shape)
            comps[n, :, :, k] = p0 * chi0[k] - p1 * chi1[k]
    return VectorField(grid=grid, components=comps)


# ---------------------------------------------------------------------------
# coefficient cache
# ---------------------------------------------------------------------------


def _grid_key(grid: Grid3) -> str:
    return (
        f"{grid.origin[0]:.12g},{grid.origin[1]:.12g},{grid.origin[2]:.12g};"
        f"{grid.step:.12g};{grid.shape[0]}x{grid.shape[1]}x{grid.shape[2]}"
    )


def save_coefficients(
    coeffs: CoefficientMatrices,
    path: str,
    basis: BasisSet,
    layout: SourceDetectorLayout,
) -> None:
    """Cache assembled coefficients, keyed so a stale file cannot be reused."""
    np.savez_compressed(
        path,
        A1=coeffs.A1,
        A2=coeffs.A2,
        A3=coeffs.A3,
        A0=coeffs.A0,
        grid_key=np.array(_grid_key(coeffs.grid)),
        N=np.array(basis.N),
        d=np.array(basis.d),
        layout_hash=np.array(layout.layout_hash()),
        origin=np.array(coeffs.grid.origin, dtype=np.float64),
        step=np.array(coeffs.grid.step),
        counts=np.array(coeffs.grid.shape, dtype=np.int64),
    )


def load_coefficients(
    path: str,
    grid: Grid3,
    basis: BasisSet,
    layout: SourceDetectorLayout,
) -> CoefficientMatrices:
    """Load a coefficient cache; the key must match the requested setup."""
    try:
        with np.load(path) as z:
            payload = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read coefficient cache {path}: {exc}") from None
    key = (str(payload["grid_key"]), int(payload["N"]), float(payload["d"]),
           str(payload["layout_hash"]))
    want = (_grid_key(grid), basis.N, basis.d, layout.layout_hash())
    if key != want:
        raise ConfigError(
            f"coefficient cache {path} was built for {key}, requested {want}"
        )
    return CoefficientMatrices(
        grid=grid,
        A1=payload["A1"],
        A2=payload["A2"],
        A3=payload["A3"],
        A0=payload["A0"],
        meta={"cache": path},
    )
