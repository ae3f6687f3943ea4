"""Coefficient recovery, voxel phantoms, and reconstruction metrics.

The solved vector field U holds basis coefficients of the rescaled data
function w(x, t) = |x - X(t)| g(x, t) over the source parameter t.  At a
fixed evaluation parameter, w satisfies

    lap w - (2 / r^2) (x - X) . grad w = -q,      r = |x - X|,

with X the source position, so q is read off pointwise from centered
differences of the contracted field.  Recovered values are clamped to
q >= 0 (the medium is never faster than the background); pre-clamp values
are kept for linearity diagnostics.

Phantoms are procedurally defined voxel shapes (ball, three balls, a
digit-1 glyph, a letter-C glyph, a smooth bump) with frozen geometry so
runs are comparable across machines.  Metrics are evaluated on the
subdomain that excludes a slab next to the face opposite the measurements,
where reconstructions are not expected to be reliable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from waveinv.basis import BasisSet
from waveinv.errors import ConfigError, NumericalError
from waveinv.forward import Phantom
from waveinv.geometry import (
    FACE_BACKSCATTER,
    FACE_TRANSMITTED,
    DomainConfig,
    Grid3,
    ScalarField3,
    SourceDetectorLayout,
    inversion_grid,
)
from waveinv.qrm import QrmSolution
from waveinv.stencils import gradient, laplacian

PHANTOM_KINDS = ("zero", "ball", "three_balls", "digit_one", "letter_c", "bump")

# frozen glyph geometry: stroke half-width, bounding half-extents in (x, z)
_STROKE = 0.075
_BOX_X = 0.25
_BOX_Z = 0.35


# ---------------------------------------------------------------------------
# phantom construction
# ---------------------------------------------------------------------------


def _segment_distance(X, Z, p1, p2):
    """Pointwise distance from (X, Z) to the segment p1-p2."""
    vx, vz = p2[0] - p1[0], p2[1] - p1[1]
    L2 = vx * vx + vz * vz
    t = ((X - p1[0]) * vx + (Z - p1[1]) * vz) / L2
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(X - (p1[0] + t * vx), Z - (p1[1] + t * vz))


def _ball_values(X, Y, Z, center, radius, amplitude):
    c = np.asarray(center, dtype=np.float64)
    inside = (X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2 <= radius**2
    return np.where(inside, amplitude, 0.0)


def _phantom_values(kind: str, grid: Grid3, params: dict) -> np.ndarray:
    X, Y, Z = grid.meshgrid()
    if kind == "zero":
        return np.zeros(grid.shape)
    if kind == "ball":
        return _ball_values(X, Y, Z, params["center"], params["radius"], params["amplitude"])
    if kind == "three_balls":
        q = np.zeros(grid.shape)
        for c in params["centers"]:
            q = np.maximum(
                q, _ball_values(X, Y, Z, c, params["radius"], params["amplitude"])
            )
        return q
    if kind == "bump":
        c = np.asarray(params["center"], dtype=np.float64)
        s = ((X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2) / params["radius"] ** 2
        q = np.zeros(grid.shape)
        inside = s < 1.0
        q[inside] = params["amplitude"] * np.exp(1.0 - 1.0 / (1.0 - s[inside]))
        return q
    w = params["stroke"]
    thick = np.abs(Y) <= w
    if kind == "digit_one":
        bar = (np.abs(X - 0.05) <= w) & (np.abs(Z) <= _BOX_Z)
        flag = (
            (_segment_distance(X, Z, (0.05, _BOX_Z - w), (-_BOX_X + w, 0.1)) <= w)
            & (np.abs(X) <= _BOX_X)
            & (np.abs(Z) <= _BOX_Z)
        )
        inside = (bar | flag) & thick
        return np.where(inside, params["amplitude"], 0.0)
    if kind == "letter_c":
        # x is squeezed so the glyph fits the same bounding box as the digit
        Xs = X * (_BOX_Z / _BOX_X)
        rho = np.hypot(Xs, Z)
        ring = (rho >= _BOX_Z - 2 * w) & (rho <= _BOX_Z)
        gap = (Xs > 0) & (np.abs(Z) < 0.12)
        inside = ring & ~gap & thick
        return np.where(inside, params["amplitude"], 0.0)
    raise ConfigError(f"unknown phantom kind {kind!r}; choose from {PHANTOM_KINDS}")


_DEFAULTS = {
    "zero": {},
    "ball": {"center": (0.0, 0.0, 0.0), "radius": 0.25, "amplitude": 1.0},
    "three_balls": {
        "centers": ((-0.38, 0.0, 0.0), (0.0, 0.0, 0.0), (0.38, 0.0, 0.0)),
        "radius": 0.15,
        "amplitude": 3.0,
    },
    "digit_one": {"amplitude": 1.0, "stroke": _STROKE},
    "letter_c": {"amplitude": 1.0, "stroke": _STROKE},
    "bump": {"center": (0.0, 0.0, 0.0), "radius": 0.35, "amplitude": 0.5},
}


def make_phantom(
    kind: str,
    cfg: DomainConfig,
    grid: Grid3 | None = None,
    step: float | None = None,
    **overrides,
) -> Phantom:
    """Voxelize a named inclusion shape on a cube grid.

    By default the phantom lives on the inversion grid; pass `step` to
    voxelize the same analytic shape at a different resolution (for the
    wave solver), or `grid` to take full control.  Keyword overrides
    replace the frozen default geometry parameters.  The support must stay
    at least two cells away from every face of the cube.
    """
    if kind not in PHANTOM_KINDS:
        raise ConfigError(f"unknown phantom kind {kind!r}; choose from {PHANTOM_KINDS}")
    if grid is None:
        if step is None:
            grid = inversion_grid(cfg)
        else:
            n = round(2 * cfg.A / step)
            if abs(n * step - 2 * cfg.A) > 1e-9 * cfg.A:
                raise ConfigError(f"step={step} does not tile the cube of half-width {cfg.A}")
            grid = Grid3(
                origin=(-cfg.A, -cfg.A, -cfg.A), step=float(step), counts=(n + 1, n + 1, n + 1)
            )
    params = dict(_DEFAULTS[kind])
    unknown = set(overrides) - set(params)
    if unknown:
        raise ConfigError(f"phantom kind {kind!r} does not take parameters {sorted(unknown)}")
    params.update(overrides)
    values = _phantom_values(kind, grid, params)
    margin = 2.0 * grid.step
    support = values != 0.0
    if support.any():
        X, Y, Z = grid.meshgrid()
        reach = max(
            float(np.abs(c[support]).max()) for c in (X, Y, Z)
        )
        if reach > cfg.A - margin + 1e-12:
            raise ConfigError(
                f"phantom support reaches {reach:.4f}, must stay below"
                f" {cfg.A - margin:.4f} (two cells inside the cube)"
            )
    meta = {"kind": kind, **{k: v for k, v in params.items()}}
    meta["note"] = "procedurally frozen geometry; not fitted to any external dataset"
    return Phantom(q_field=ScalarField3(grid=grid, values=values), kind=kind, params=meta)


# ---------------------------------------------------------------------------
# coefficient recovery
# ---------------------------------------------------------------------------


def contract_field(U_components: np.ndarray, basis: BasisSet, x0_eval: float) -> np.ndarray:
    """Collapse basis components to the data function at one parameter."""
    psi, _ = basis.eval(np.array([x0_eval]))
    return np.einsum("n,nxyz->xyz", psi[0], U_components)


def recover_q(
    sol: QrmSolution,
    basis: BasisSet,
    layout: SourceDetectorLayout,
    x0_eval: float = 0.0,
    clamp: bool = True,
) -> ScalarField3:
    """Pointwise coefficient from the solved field at one source parameter.

    Contracts the component fields with the basis at `x0_eval`, forms the
    centered-difference Laplacian and gradient, and evaluates

        q = -[lap w - (2 / r^2) ((x - x0) w_x + y w_y + (z - zs) w_z)].

    With `clamp` the result is truncated at zero.
    """
    if not (-basis.d < x0_eval < basis.d):
        raise ConfigError(f"x0_eval={x0_eval} outside the source interval (+-{basis.d})")
    grid = sol.U.grid
    w = contract_field(sol.U.components, basis, x0_eval)
    h = grid.step
    lap = laplacian(w, h)
    wx = gradient(w, h, 0)
    wy = gradient(w, h, 1)
    wz = gradient(w, h, 2)
    X, Y, Z = grid.meshgrid()
    zs = float(layout.sources[0, 2])
    dx = X - x0_eval
    dz = Z - zs
    r2 = dx * dx + Y * Y + dz * dz
    q = -(lap - (2.0 / r2) * (dx * wx + Y * wy + dz * wz))
    bad = ~np.isfinite(q)
    if bad.any():
        idx = np.argwhere(bad)[:5]
        raise NumericalError(
            f"recovered coefficient has {int(bad.sum())} non-finite nodes,"
            f" first at indices {idx.tolist()}"
        )
    if clamp:
        q = np.maximum(q, 0.0)
    return ScalarField3(grid=grid, values=q)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def metric_mask(grid: Grid3, epsilon: float, face: str = FACE_BACKSCATTER) -> np.ndarray:
    """Nodes kept for error metrics: drop a slab next to the far face."""
    z = grid.axis(2)
    if face == FACE_BACKSCATTER:
        keep = z < z[-1] - epsilon + 1e-12
    elif face == FACE_TRANSMITTED:
        keep = z > z[0] + epsilon - 1e-12
    else:
        raise ConfigError(f"unknown face {face!r}")
    mask = np.zeros(grid.shape, dtype=bool)
    mask[:, :, keep] = True
    return mask


def compute_metrics(
    q_rec: ScalarField3,
    q_true: ScalarField3,
    epsilon: float,
    face: str = FACE_BACKSCATTER,
) -> dict:
    """Error and localization metrics on the reliable subdomain.

    Relative L2 error, peak values/locations of both fields, and the Dice
    overlap of the half-peak support sets.  A zero truth with a nonzero
    reconstruction reports an infinite relative error.
    """
    ga, gb = q_rec.grid, q_true.grid
    if ga.shape != gb.shape or not np.allclose(ga.origin, gb.origin) or ga.step != gb.step:
        raise ConfigError("metrics need both fields on the same grid")
    mask = metric_mask(ga, epsilon, face)
    rec = np.where(mask, q_rec.values, 0.0)
    tru = np.where(mask, q_true.values, 0.0)
    h3 = ga.step**3
    abs_l2 = float(np.sqrt(np.sum((rec - tru) ** 2) * h3))
    true_l2 = float(np.sqrt(np.sum(tru**2) * h3))
    if true_l2 > 0:
        rel_l2 = abs_l2 / true_l2
    else:
        rel_l2 = 0.0 if abs_l2 == 0.0 else float("inf")

    def peak(v):
        flat = int(np.argmax(v))
        ijk = np.unravel_index(flat, v.shape)
        loc = tuple(float(ga.axis(ax)[ijk[ax]]) for ax in range(3))
        return float(v[ijk]), loc

    peak_value, peak_location = peak(rec)
    true_peak_value, true_peak_location = peak(tru)
    a = rec > 0.5 * peak_value if peak_value > 0 else np.zeros_like(mask)
    b = tru > 0.5 * true_peak_value if true_peak_value > 0 else np.zeros_like(mask)
    denom = int(a.sum()) + int(b.sum())
    support_overlap = 1.0 if denom == 0 else 2.0 * int((a & b).sum()) / denom
    return {
        "rel_l2_error": rel_l2,
        "abs_l2_error": abs_l2,
        "true_l2_norm": true_l2,
        "peak_value": peak_value,
        "peak_location": peak_location,
        "true_peak_value": true_peak_value,
        "true_peak_location": true_peak_location,
        "support_overlap": float(support_overlap),
        "epsilon": float(epsilon),
        "face": face,
        "n_mask_nodes": int(mask.sum()),
    }


def local_maxima(field: ScalarField3, min_value: float = 0.0) -> list[tuple[tuple[int, int, int], float]]:
    """Strict-interior local maxima over the 26-neighborhood, sorted by value.

    Plateaus count once (the first index of the connected plateau).
    """
    v = field.values
    mx = ndimage.maximum_filter(v, size=3, mode="constant", cval=-np.inf)
    cand = (v >= mx) & (v > min_value)
    labels, n = ndimage.label(cand, structure=np.ones((3, 3, 3), dtype=int))
    out = []
    for lab in range(1, n + 1):
        idx = np.argwhere(labels == lab)[0]
        out.append(((int(idx[0]), int(idx[1]), int(idx[2])), float(v[tuple(idx)])))
    out.sort(key=lambda t: -t[1])
    return out


def dilate_support(mask: np.ndarray, cells: int) -> np.ndarray:
    """Grow a support mask by `cells` in the Chebyshev metric."""
    if cells <= 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=np.ones((3, 3, 3), dtype=bool), iterations=cells)


# ---------------------------------------------------------------------------
# result container
# ---------------------------------------------------------------------------


@dataclass
class ReconstructionResult:
    """Recovered coefficient with its derived wave speed and quality metrics."""

    q_rec: ScalarField3
    c_rec: ScalarField3
    metrics: dict
    run_metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.array_equal(self.c_rec.values, self.q_rec.values + 1.0):
            raise ConfigError("wave speed field must equal the coefficient field plus one")


def reconstruct(
    sol: QrmSolution,
    basis: BasisSet,
    layout: SourceDetectorLayout,
    cfg: DomainConfig,
    q_true: ScalarField3 | None = None,
    x0_eval: float | None = None,
) -> ReconstructionResult:
    """Recover q from a solve, attach the wave speed, and score vs truth."""
    x0 = cfg.x0_eval if x0_eval is None else x0_eval
    raw = recover_q(sol, basis, layout, x0, clamp=False)
    q = ScalarField3(grid=raw.grid, values=np.maximum(raw.values, 0.0))
    c = ScalarField3(grid=raw.grid, values=q.values + 1.0)
    metrics = {}
    if q_true is not None:
        metrics = compute_metrics(q, q_true, cfg.omega_eps, face=layout.face)
    meta = {
        "x0_eval": float(x0),
        "basis_order": basis.N,
        "solver_method": sol.method,
        "solver_iterations": sol.iterations,
        "gamma": sol.gamma,
        "qrm_residual": sol.residual,
        "layout_hash": layout.layout_hash(),
        "preclamp_min": float(raw.values.min()),
        "preclamp_max": float(raw.values.max()),
        "clamped_fraction": float(np.mean(raw.values < 0.0)),
        "q_preclamp": raw.values,
    }
    return ReconstructionResult(q_rec=q, c_rec=c, metrics=metrics, run_metadata=meta)
