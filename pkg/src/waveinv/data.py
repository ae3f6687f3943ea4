"""Reduction of wave traces to the two boundary data functions g0 and g1.

For a source at y and a detector at x on the measurement face, the
weighted time integrals of the trace p0 = u|_S and its normal derivative
p1 produce data for the linear integral equation

    (1/4pi) int_Omega q(xi) / (|x - xi| |xi - y|) d xi = g0(x, y),

whose normal derivative in x equals g1.  Concretely

    g0 = -2pi * int t^2 p0 dt + |x - y| / 2,

and the free-space term |x - y|/2 is either evaluated in closed form or
replaced by the same moment of a background run with c == 1, which also
cancels the source-mollification and grid-dispersion bias of the solver.

The module also provides a direct quadrature evaluation of the integral
equation's left side for a known phantom (synthetic data independent of
the wave solver) and the measurement-noise model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from waveinv.errors import ConfigError, NumericalError
from waveinv.forward import Phantom, TraceStore
from waveinv.geometry import DomainConfig, SourceDetectorLayout

PROVENANCES = ("fdtd", "oracle")


def time_moment(samples: np.ndarray, dt: float) -> np.ndarray:
    """Trapezoid approximation of int_0^T t^2 p(t) dt along the last axis."""
    if dt <= 0:
        raise ConfigError(f"dt={dt} must be positive")
    p = np.asarray(samples, dtype=np.float64)
    n = p.shape[-1]
    if n < 2:
        raise ConfigError("need at least two time samples")
    t = dt * np.arange(n)
    return np.trapezoid(t * t * p, dx=dt, axis=-1)


def free_space_moment(r) -> np.ndarray:
    """Closed-form moment of the impulse response at distance r: r / (4 pi)."""
    return np.asarray(r, dtype=np.float64) / (4.0 * np.pi)


@dataclass
class BoundaryDataSet:
    """g0 and g1 sampled on the (detector, source) grid.

    g0[i, j] belongs to detector i (row-major over the detector axes) and
    source j (increasing x0).  noise_delta is 0 for clean data.
    """

    g0: np.ndarray
    g1: np.ndarray
    layout_hash: str
    provenance: str
    noise_delta: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.g0 = np.asarray(self.g0, dtype=np.float64)
        self.g1 = np.asarray(self.g1, dtype=np.float64)
        if self.g0.shape != self.g1.shape or self.g0.ndim != 2:
            raise ConfigError(
                f"g0 {self.g0.shape} and g1 {self.g1.shape} must be equal 2D shapes"
            )
        if self.provenance not in PROVENANCES:
            raise ConfigError(f"provenance must be one of {PROVENANCES}")
        if not (np.all(np.isfinite(self.g0)) and np.all(np.isfinite(self.g1))):
            raise NumericalError("boundary data contains non-finite entries")

    @property
    def n_detectors(self) -> int:
        return self.g0.shape[0]

    @property
    def n_sources(self) -> int:
        return self.g0.shape[1]


def assemble_boundary_data(
    traces: TraceStore,
    layout: SourceDetectorLayout,
    cfg: DomainConfig,
) -> BoundaryDataSet:
    """Turn recorded traces into the boundary data functions.

    With cfg.free_space_subtraction == "numerical" the background moments
    come from the stored c == 1 traces; "analytic" uses the closed form
    |x - y| / (4 pi), which leaves the solver's mollification bias in the
    data (kept for diagnostics).
    """
    if traces.layout_hash != layout.layout_hash():
        raise ConfigError("trace store was recorded with a different layout")
    if traces.n_sources != layout.n_sources:
        raise ConfigError(
            f"trace store has {traces.n_sources} sources, layout {layout.n_sources}"
        )
    numerical = cfg.free_space_subtraction == "numerical"
    g0 = np.empty((layout.n_detectors, layout.n_sources))
    g1 = np.empty_like(g0)
    for j, st in enumerate(traces.sources):
        m0 = time_moment(st.u, st.dt)
        m1 = time_moment(st.dnu, st.dt)
        if numerical:
            if st.u0 is None:
                raise ConfigError(
                    "numerical free-space subtraction requested but the trace"
                    " store has no background traces"
                )
            g0[:, j] = -2.0 * np.pi * (m0 - time_moment(st.u0, st.dt))
            g1[:, j] = -2.0 * np.pi * (m1 - time_moment(st.dnu0, st.dt))
        else:
            diff = layout.detectors - layout.sources[j]
            r = np.linalg.norm(diff, axis=1)
            dn_r = (diff @ layout.normal) / r
            g0[:, j] = -2.0 * np.pi * m0 + 0.5 * r
            g1[:, j] = -2.0 * np.pi * m1 + 0.5 * dn_r
    return BoundaryDataSet(
        g0=g0,
        g1=g1,
        layout_hash=layout.layout_hash(),
        provenance="fdtd",
        meta={
            "subtraction": cfg.free_space_subtraction,
            "truncated_sources": [st.source_index for st in traces.sources if st.truncated],
        },
    )


def direct_oracle_data(
    phantom: Phantom,
    layout: SourceDetectorLayout,
    cfg: DomainConfig | None = None,
) -> BoundaryDataSet:
    """Evaluate the integral-equation left side by midpoint quadrature.

    Every phantom node with q != 0 contributes q * h^3 times the kernel
    1 / (4 pi |x - xi| |xi - y|); g1 differentiates the detector factor
    along the outward face normal.  Detectors and sources must stay away
    from the phantom support for the kernel to remain bounded.
    """
    q = phantom.q_field.values
    grid = phantom.q_field.grid
    mask = q != 0.0
    h3 = grid.step**3
    dets = layout.detectors
    srcs = layout.sources
    if not mask.any():
        zero = np.zeros((len(dets), len(srcs)))
        return BoundaryDataSet(
            g0=zero,
            g1=zero.copy(),
            layout_hash=layout.layout_hash(),
            provenance="oracle",
            meta={"phantom": phantom.describe(), "quad_h": grid.step},
        )
    xs, ys, zs = grid.meshgrid()
    pts = np.column_stack([xs[mask], ys[mask], zs[mask]])
    w = q[mask] * h3

    min_det = _min_distance(dets, pts)
    min_src = _min_distance(srcs, pts)
    if min_det < 2 * grid.step:
        raise ConfigError(
            f"phantom support comes within {min_det:.3g} of a detector;"
            " the quadrature kernel is unresolved there"
        )
    if min_src < 2 * grid.step:
        raise ConfigError("phantom support overlaps the source line neighborhood")

    # detector factor and its outward normal derivative
    dvec = dets[:, None, :] - pts[None, :, :]  # (D, Q, 3)
    rdet = np.sqrt(np.sum(dvec * dvec, axis=2))
    kdet = 1.0 / rdet
    kdet_dn = -(dvec @ layout.normal) / rdet**3
    # source factor
    svec = pts[:, None, :] - srcs[None, :, :]  # (Q, S, 3)
    ksrc = 1.0 / np.sqrt(np.sum(svec * svec, axis=2))
    wksrc = w[:, None] * ksrc
    coef = 1.0 / (4.0 * np.pi)
    g0 = coef * (kdet @ wksrc)
    g1 = coef * (kdet_dn @ wksrc)
    return BoundaryDataSet(
        g0=g0,
        g1=g1,
        layout_hash=layout.layout_hash(),
        provenance="oracle",
        meta={"phantom": phantom.describe(), "quad_h": grid.step},
    )


def _min_distance(points: np.ndarray, cloud: np.ndarray) -> float:
    d = points[:, None, :] - cloud[None, :, :]
    return float(np.sqrt(np.sum(d * d, axis=2)).min())


def add_noise(data: BoundaryDataSet, delta: float, seed: int) -> BoundaryDataSet:
    """Multiplicative-scale uniform noise, one draw per source.

    Every detector of source j receives the same perturbation
    delta * max|g| * xi_j with xi_j ~ U(-1, 1); g0 and g1 use independent
    draws.  delta = 0 returns an identical copy.
    """
    if delta < 0:
        raise ConfigError(f"delta={delta} must be nonnegative")
    rng = np.random.default_rng(seed)
    xi0 = rng.uniform(-1.0, 1.0, data.n_sources)
    xi1 = rng.uniform(-1.0, 1.0, data.n_sources)
    g0 = data.g0 + delta * np.abs(data.g0).max() * xi0[None, :]
    g1 = data.g1 + delta * np.abs(data.g1).max() * xi1[None, :]
    if delta == 0.0:
        g0, g1 = data.g0.copy(), data.g1.copy()
    meta = dict(data.meta)
    meta.update(
        noise_seed=int(seed),
        noise_model="per-source uniform scaled by max|g|, shared across detectors;"
        " g0 and g1 use independent draws",
    )
    return BoundaryDataSet(
        g0=g0,
        g1=g1,
        layout_hash=data.layout_hash,
        provenance=data.provenance,
        noise_delta=float(delta),
        meta=meta,
    )


# ---------------------------------------------------------------------------
# persistence: npz tensor file + JSON sidecar
# ---------------------------------------------------------------------------


def save_boundary_data(data: BoundaryDataSet, path: str) -> tuple[str, str]:
    """Write <path>.npz with the tensors and <path>.json with the metadata."""
    base = path[:-4] if path.endswith(".npz") else path
    npz_path, json_path = base + ".npz", base + ".json"
    np.savez(npz_path, g0=data.g0, g1=data.g1)
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "layout_hash": data.layout_hash,
                "provenance": data.provenance,
                "noise_delta": data.noise_delta,
                "shape": list(data.g0.shape),
                "meta": data.meta,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    return npz_path, json_path


def load_boundary_data(path: str) -> BoundaryDataSet:
    base = path[:-4] if path.endswith(".npz") else path
    try:
        with np.load(base + ".npz") as npz:
            g0, g1 = npz["g0"], npz["g1"]
        with open(base + ".json", encoding="utf-8") as fh:
            meta = json.load(fh)
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read boundary data {base}: {exc}") from None
    if list(g0.shape) != meta.get("shape"):
        raise ConfigError(f"tensor shape {g0.shape} disagrees with sidecar {meta.get('shape')}")
    return BoundaryDataSet(
        g0=g0,
        g1=g1,
        layout_hash=meta["layout_hash"],
        provenance=meta["provenance"],
        noise_delta=float(meta.get("noise_delta", 0.0)),
        meta=meta.get("meta", {}),
    )
