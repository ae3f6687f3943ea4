"""Domain description, grids, and source/detector layout.

Geometry conventions used throughout the package:

* the reconstruction cube is Omega = (-A, A)^3,
* the simulation cube Phi is a larger cube centered at the origin,
* point sources run along the line segment L_s = {(x0, 0, z_s), |x0| <= d}
  with z_s = -A - |source_offset|, i.e. the sources sit below Omega,
* measurements live on one horizontal face of Omega: the backscattering
  face z = -A (nearest the sources) or the transmitted face z = +A.

All node coordinates are generated multiplicatively (origin + index * step)
so that equality checks against other grids are reproducible.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from waveinv.errors import ConfigError

FACE_BACKSCATTER = "backscattering"
FACE_TRANSMITTED = "transmitted"

_SCHEMES = ("leapfrog", "crank_nicolson")
_SUBTRACTIONS = ("numerical", "analytic")
_SOLVERS = ("march", "auto", "direct", "cg", "lsmr")


@dataclass
class DomainConfig:
    """Full run configuration with defaults at the production scale.

    Parameters
    ----------
    A : float
        Half-width of the reconstruction cube Omega.
    source_offset : float
        Signed stand-off b of the source line; the line is placed at
        z = -A - |b|.  Must be nonzero.
    d : float
        Half-length of the source segment; also the half-width of the
        basis interval in the source parameter x0.
    phi_half_width : float
        Half-width of the simulation cube Phi.
    n_sources : int
        Number of source positions, uniformly spaced on [-d, d] with both
        endpoints included.
    detector_grid : tuple[int, int]
        Detectors per axis on the measurement face, uniformly spaced with
        the face corners included.
    forward_h, forward_tau : float
        Space and time steps of the wave solver.
    inv_h : float
        Node spacing of the inversion grid on Omega.
    N : int
        Number of basis functions in the source-parameter expansion.
    gamma : float
        Quasi-reversibility regularization weight (0 = pure least squares).
    measurement_face : str
        "backscattering" (z = -A) or "transmitted" (z = +A).
    source_eps : float
        Width parameter of the mollified delta used as initial velocity.
    t_max : float
        Hard cap on simulated time if the decay stopping rule never fires.
    stop_threshold : float
        The solver halts once max |u| over Phi falls below this value.
    scheme : str
        "leapfrog" (explicit, default) or "crank_nicolson" (implicit).
    free_space_subtraction : str
        "numerical": subtract a background run with c == 1 on the same
        grid (default; cancels source-mollification and scheme bias).
        "analytic": subtract the closed-form free-space moment instead.
    omega_eps : float
        Margin of the subdomain Omega_eps on which errors are reported;
        a slab of this thickness adjacent to the face opposite the
        measurement face is excluded.
    x0_eval : float
        Source parameter at which the recovered field is differentiated
        to produce q.
    free_far_neumann : bool
        If True, do not constrain the normal derivative of the
        quasi-reversibility unknown on the face opposite the data face.
    solver : str
        "march" (default) reconstructs by depth marching plus a source-model
        fit; "auto", "direct", "cg", or "lsmr" select the one-shot
        least-squares / quasi-reversibility normal-equation solve.
    solver_direct_threshold : int
        Free-unknown count above which "auto" avoids the direct factorization.
    march_pad : int
        Lateral padding cells added around the face window before marching.
    march_budget : float
        Depth-bandwidth product: the march keeps lateral modes with
        kappa * depth <= march_budget, kappa in rad per unit length.
    march_floor : float
        Minimum retained mode index of the depth filter, so a few smooth
        lateral modes always survive.
    march_filter_order : int
        Exponent of the super-Gaussian rolloff of the depth filter.
    trust_depth : int
        Number of marched planes past the face that the source fit treats
        as data (with a cosine taper at the far end).
    blob_sigma : float
        Gaussian width of the source-model blobs.
    blob_extent : float
        Half-width of the blob lattice in each axis.
    blob_grid : int
        Blob lattice nodes per axis.
    fit_ridge : float
        Ridge weight of the source fit, relative to the mean diagonal of
        its normal matrix.
    fit_face_weight : float
        Weight of the face normal-derivative rows in the source fit.
    """

    A: float = 0.75
    source_offset: float = -5.0
    d: float = 1.0
    phi_half_width: float = 10.0
    n_sources: int = 101
    detector_grid: tuple[int, int] = (16, 16)
    forward_h: float = 0.05
    forward_tau: float = 0.01
    inv_h: float = 0.1
    N: int = 6
    gamma: float = 0.0
    measurement_face: str = FACE_BACKSCATTER
    source_eps: float = 0.05
    t_max: float = 25.0
    stop_threshold: float = 1e-3
    scheme: str = "leapfrog"
    free_space_subtraction: str = "numerical"
    omega_eps: float = 0.15
    x0_eval: float = 0.0
    free_far_neumann: bool = False
    solver: str = "march"
    solver_direct_threshold: int = 60000
    cn_tol: float = 1e-10
    march_pad: int = 8
    march_budget: float = 4.0
    march_floor: float = 2.5
    march_filter_order: int = 8
    trust_depth: int = 3
    blob_sigma: float = 0.11
    blob_extent: float = 0.65
    blob_grid: int = 13
    fit_ridge: float = 1e-3
    fit_face_weight: float = 1.0

    def __post_init__(self) -> None:
        self.detector_grid = tuple(int(v) for v in self.detector_grid)
        self.validate()

    # -- derived quantities ------------------------------------------------

    @property
    def source_z(self) -> float:
        return -self.A - abs(self.source_offset)

    @property
    def source_point(self) -> np.ndarray:
        """3D anchor of the source line at parameter x0 = 0."""
        return np.array([0.0, 0.0, self.source_z])

    @property
    def face_z(self) -> float:
        return -self.A if self.measurement_face == FACE_BACKSCATTER else self.A

    @property
    def face_normal(self) -> np.ndarray:
        """Outward unit normal of the measurement face."""
        nz = -1.0 if self.measurement_face == FACE_BACKSCATTER else 1.0
        return np.array([0.0, 0.0, nz])

    @property
    def source_support_radius(self) -> float:
        """Radius of the mollified-delta support ball."""
        return math.sqrt(self.source_eps)

    def validate(self) -> None:
        if self.A <= 0 or self.d <= 0 or self.inv_h <= 0 or self.forward_h <= 0:
            raise ConfigError("A, d, inv_h and forward_h must all be positive")
        if self.forward_tau <= 0 or self.t_max <= 0:
            raise ConfigError("forward_tau and t_max must be positive")
        if self.source_offset == 0:
            raise ConfigError("source_offset must be nonzero: the source line may not touch Omega")
        if self.phi_half_width <= self.A:
            raise ConfigError(
                f"phi_half_width={self.phi_half_width} must exceed A={self.A}"
            )
        if self.n_sources < 2:
            raise ConfigError(f"n_sources={self.n_sources} must be at least 2")
        if len(self.detector_grid) != 2 or min(self.detector_grid) < 2:
            raise ConfigError(f"detector_grid={self.detector_grid} must be two counts >= 2")
        if self.N < 1:
            raise ConfigError(f"N={self.N} must be at least 1")
        if self.gamma < 0:
            raise ConfigError(f"gamma={self.gamma} must be nonnegative")
        if self.measurement_face not in (FACE_BACKSCATTER, FACE_TRANSMITTED):
            raise ConfigError(f"unknown measurement_face {self.measurement_face!r}")
        if self.scheme not in _SCHEMES:
            raise ConfigError(f"scheme must be one of {_SCHEMES}, got {self.scheme!r}")
        if self.free_space_subtraction not in _SUBTRACTIONS:
            raise ConfigError(
                f"free_space_subtraction must be one of {_SUBTRACTIONS},"
                f" got {self.free_space_subtraction!r}"
            )
        if self.solver not in _SOLVERS:
            raise ConfigError(f"solver must be one of {_SOLVERS}, got {self.solver!r}")
        if self.march_pad < 0:
            raise ConfigError(f"march_pad={self.march_pad} must be nonnegative")
        if self.march_budget <= 0 or self.march_floor <= 0:
            raise ConfigError("march_budget and march_floor must be positive")
        if self.march_filter_order < 2 or self.march_filter_order % 2:
            raise ConfigError(
                f"march_filter_order={self.march_filter_order} must be an even"
                " integer >= 2"
            )
        if self.trust_depth < 0:
            raise ConfigError(f"trust_depth={self.trust_depth} must be nonnegative")
        if self.blob_sigma <= 0 or self.blob_extent <= 0:
            raise ConfigError("blob_sigma and blob_extent must be positive")
        if self.blob_grid < 2:
            raise ConfigError(f"blob_grid={self.blob_grid} must be at least 2")
        if self.blob_extent >= self.A:
            raise ConfigError(
                f"blob_extent={self.blob_extent} must stay inside Omega (A={self.A})"
            )
        if self.fit_ridge < 0 or self.fit_face_weight < 0:
            raise ConfigError("fit_ridge and fit_face_weight must be nonnegative")
        if self.source_eps <= 0:
            raise ConfigError("source_eps must be positive")
        if not 0 <= self.omega_eps < 2 * self.A:
            raise ConfigError(f"omega_eps={self.omega_eps} outside [0, 2A)")
        if abs(self.x0_eval) > self.d:
            raise ConfigError(f"x0_eval={self.x0_eval} outside the source interval [-d, d]")
        for name, h in (("inv_h", self.inv_h), ("forward_h", self.forward_h)):
            ratio = 2 * self.A / h
            if abs(ratio - round(ratio)) > 1e-9:
                raise ConfigError(
                    f"2A = {2 * self.A} must be an integer multiple of {name} = {h}"
                    " so the faces of Omega fall on grid planes"
                )
        # Explicit scheme stability: wave speed is at most 1 (c >= 1), so the
        # three-dimensional CFL bound tau <= h / sqrt(3) suffices for any phantom.
        if self.scheme == "leapfrog" and self.forward_tau > self.forward_h / math.sqrt(3.0) + 1e-12:
            raise ConfigError(
                f"forward_tau={self.forward_tau} violates the CFL bound"
                f" h/sqrt(3) = {self.forward_h / math.sqrt(3.0):.6g}"
            )
        margin = 2 * self.forward_h + self.source_support_radius
        if abs(self.source_offset) <= self.source_support_radius:
            raise ConfigError(
                "source line too close to Omega: |source_offset| ="
                f" {abs(self.source_offset)} <= mollifier radius"
                f" {self.source_support_radius:.4g}"
            )
        if abs(self.source_z) + margin >= self.phi_half_width:
            raise ConfigError(
                "source line too close to the boundary of Phi:"
                f" |z_s| + margin = {abs(self.source_z) + margin:.4g}"
                f" >= phi_half_width = {self.phi_half_width}"
            )
        if self.d + margin >= self.phi_half_width:
            raise ConfigError(
                "source segment endpoints too close to the boundary of Phi:"
                f" d + margin = {self.d + margin:.4g} >= {self.phi_half_width}"
            )

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["detector_grid"] = list(self.detector_grid)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "DomainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "detector_grid" in kwargs:
            kwargs["detector_grid"] = tuple(kwargs["detector_grid"])
        try:
            return cls(**kwargs)
        except TypeError as exc:  # wrong value type for a field
            raise ConfigError(str(exc)) from None

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "DomainConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must contain a JSON object")
        return cls.from_dict(data)

    def replace(self, **kwargs) -> "DomainConfig":
        return dataclasses.replace(self, **kwargs)


# Reduced problem sizes for commodity hardware.  The simulation cube
# shrinks with the source stand-off so the wave solver stays affordable;
# the reconstruction cube, basis size, and inversion grid are unchanged.
# The detector grid matches the inversion-grid face nodes (16 x 16 at
# inv_h = 0.1) so the projected data transfer is exact; coarser detector
# grids go through a bilinear transfer that measurably degrades the
# marching reconstruction.
DESK_PROFILE = {
    "forward_h": 0.1,
    "forward_tau": 0.05,
    "phi_half_width": 5.0,
    "source_offset": -3.0,
    "n_sources": 21,
    "detector_grid": (16, 16),
    "t_max": 20.0,
}


def desk_profile(**overrides) -> DomainConfig:
    """Small self-consistent profile that runs on a workstation.

    Coarser grid, smaller simulation cube, and fewer sources/detectors than
    the production defaults.  The source stand-off shrinks to 3 so the
    source line keeps a safe margin inside the smaller Phi.
    """
    params = dict(DESK_PROFILE)
    params.update(overrides)
    return DomainConfig(**params)


def paper_profile(**overrides) -> DomainConfig:
    """Production-scale defaults (expensive: meant for batch runs)."""
    return DomainConfig(**overrides)


PROFILES = {"paper": paper_profile, "desk": desk_profile}


# ---------------------------------------------------------------------------
# grids and fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Grid3:
    """Uniform tensor grid: node i along axis a sits at origin[a] + i * step."""

    origin: tuple[float, float, float]
    step: float
    counts: tuple[int, int, int]

    def __post_init__(self):
        if self.step <= 0:
            raise ConfigError(f"grid step {self.step} must be positive")
        if min(self.counts) < 2:
            raise ConfigError(f"grid counts {self.counts} must all be >= 2")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.counts)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.counts))

    def axis(self, a: int) -> np.ndarray:
        return self.origin[a] + self.step * np.arange(self.counts[a])

    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.axis(0), self.axis(1), self.axis(2)

    def meshgrid(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return np.meshgrid(*self.axes(), indexing="ij")

    def index_of(self, coord: float, axis: int, tol: float = 1e-9) -> int:
        """Index of the node at `coord`; raises if no node matches."""
        pos = (coord - self.origin[axis]) / self.step
        idx = int(round(pos))
        if abs(pos - idx) > tol or not 0 <= idx < self.counts[axis]:
            raise ConfigError(
                f"coordinate {coord} is not a node of axis {axis}"
                f" (origin {self.origin[axis]}, step {self.step})"
            )
        return idx

    def describe(self) -> dict:
        return {"origin": list(self.origin), "step": self.step, "counts": list(self.counts)}


@dataclass
class ScalarField3:
    """Nodal scalar field on a Grid3 (axis order x, y, z)."""

    grid: Grid3
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.grid.shape:
            raise ConfigError(
                f"field shape {self.values.shape} does not match grid {self.grid.shape}"
            )

    def copy(self) -> "ScalarField3":
        return ScalarField3(self.grid, self.values.copy())


def inversion_grid(cfg: DomainConfig) -> Grid3:
    """Grid covering the closed cube Omega with spacing inv_h."""
    n = int(round(2 * cfg.A / cfg.inv_h)) + 1
    return Grid3(origin=(-cfg.A, -cfg.A, -cfg.A), step=cfg.inv_h, counts=(n, n, n))


def forward_grid(cfg: DomainConfig) -> Grid3:
    """Simulation grid covering Phi, aligned so z = +-A are node planes.

    The half-width is rounded up to A + m * h >= phi_half_width so both
    faces of Omega (and, with it, every detector plane) coincide with grid
    planes in every axis.
    """
    h = cfg.forward_h
    m = math.ceil((cfg.phi_half_width - cfg.A) / h - 1e-9)
    half = cfg.A + m * h
    n = int(round(2 * half / h)) + 1
    return Grid3(origin=(-half, -half, -half), step=h, counts=(n, n, n))


# ---------------------------------------------------------------------------
# source / detector layout
# ---------------------------------------------------------------------------


@dataclass
class SourceDetectorLayout:
    """Concrete source and detector coordinates for one measurement face.

    Attributes
    ----------
    sources : ndarray, shape (n_sources, 3)
        Source centers along L_s, ordered by increasing x0.
    source_params : ndarray, shape (n_sources,)
        The x0 parameter of each source.
    detectors : ndarray, shape (n_det, 3)
        Detector positions on the measurement face, row-major over the
        (x, y) detector axes.
    det_x, det_y : ndarray
        The detector coordinate axes on the face.
    face : str
        Which face carries the data.
    face_z : float
        z coordinate of that face.
    normal : ndarray, shape (3,)
        Outward unit normal of the face.
    """

    sources: np.ndarray
    source_params: np.ndarray
    detectors: np.ndarray
    det_x: np.ndarray
    det_y: np.ndarray
    face: str
    face_z: float
    normal: np.ndarray

    @property
    def n_sources(self) -> int:
        return len(self.sources)

    @property
    def n_detectors(self) -> int:
        return len(self.detectors)

    @property
    def det_shape(self) -> tuple[int, int]:
        return (len(self.det_x), len(self.det_y))

    def layout_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.face.encode())
        for arr in (self.sources, self.detectors):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def build_layout(cfg: DomainConfig) -> SourceDetectorLayout:
    """Construct the source line and detector grid for `cfg`.

    Sources are uniform on [-d, d] including both endpoints; detectors are
    a uniform tensor grid on the measurement face including the face
    corners.  Validity of the stand-offs is checked by cfg.validate().
    """
    params = np.linspace(-cfg.d, cfg.d, cfg.n_sources)
    sources = np.column_stack(
        [params, np.zeros_like(params), np.full_like(params, cfg.source_z)]
    )
    det_x = np.linspace(-cfg.A, cfg.A, cfg.detector_grid[0])
    det_y = np.linspace(-cfg.A, cfg.A, cfg.detector_grid[1])
    gx, gy = np.meshgrid(det_x, det_y, indexing="ij")
    detectors = np.column_stack(
        [gx.ravel(), gy.ravel(), np.full(gx.size, cfg.face_z)]
    )
    return SourceDetectorLayout(
        sources=sources,
        source_params=params,
        detectors=detectors,
        det_x=det_x,
        det_y=det_y,
        face=cfg.measurement_face,
        face_z=cfg.face_z,
        normal=cfg.face_normal,
    )


def omega_eps_mask(cfg: DomainConfig, grid: Grid3) -> np.ndarray:
    """Boolean mask of nodes in Omega_eps.

    A slab of thickness omega_eps adjacent to the face opposite the
    measurement face is dropped; reconstruction quality deteriorates there
    because the data live on the other side.
    """
    z = grid.axis(2)
    if cfg.measurement_face == FACE_BACKSCATTER:
        keep = z < cfg.A - cfg.omega_eps + 1e-12
    else:
        keep = z > -cfg.A + cfg.omega_eps - 1e-12
    mask = np.zeros(grid.shape, dtype=bool)
    mask[:, :, keep] = True
    return mask
