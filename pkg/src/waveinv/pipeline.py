"""End-to-end pipeline stages, experiment drivers, and run manifests.

Stages are pure functions over immutable inputs; every driver threads a
RunManifest that snapshots the config, the seed, per-stage wall times,
and a content digest of every file written, so a finished run can be
audited or re-run bit-identically.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import platform
import time
from dataclasses import dataclass, field

import numpy as np
import scipy

from . import __version__
from .basis import build_basis
from .data import (
    BoundaryDataSet,
    add_noise,
    assemble_boundary_data,
    direct_oracle_data,
    save_boundary_data,
)
from .errors import ConfigError
from .forward import Phantom, solve_all_sources
from .geometry import (
    DESK_PROFILE as _DESK_PROFILE,
    DomainConfig,
    FACE_BACKSCATTER,
    FACE_TRANSMITTED,
    Grid3,
    ScalarField3,
    SourceDetectorLayout,
    build_layout,
    inversion_grid,
)
from .qrm import QrmSolution, build_qrm_system, discrete_h2_norm, solve_marching, solve_qrm
from .recon import PHANTOM_KINDS, ReconstructionResult, make_phantom, reconstruct
from .system import assemble_coefficients, build_extension, project_boundary_data

__all__ = [
    "DESK_PROFILE",
    "TESTS",
    "RunManifest",
    "scaled_config",
    "make_synthetic_data",
    "invert",
    "reproduce_test",
    "convergence_experiment",
    "save_volume",
    "load_volume",
    "save_midplane_slices",
]


# ---------------------------------------------------------------------------
# configuration profiles
# ---------------------------------------------------------------------------

DESK_PROFILE = dict(_DESK_PROFILE)  # re-export; geometry owns the values

# Deep-structure solver profile: phantoms reaching the far half of the
# cube need a longer trusted march window than the defaults.
DEEP_PROFILE = {
    "march_budget": 6.0,
    "trust_depth": 6,
}

# The eight reference reconstructions: shapes 1/C at unit contrast and
# the high-contrast ball triple, each from one face, with the noisy
# variants regularized.
TESTS = {
    1: {"phantom": "digit_one", "face": FACE_BACKSCATTER, "delta": 0.0, "gamma": 0.0},
    2: {"phantom": "three_balls", "face": FACE_BACKSCATTER, "delta": 0.0, "gamma": 0.0},
    3: {"phantom": "letter_c", "face": FACE_BACKSCATTER, "delta": 0.0, "gamma": 0.0},
    4: {"phantom": "letter_c", "face": FACE_BACKSCATTER, "delta": 0.05, "gamma": 1e-8},
    5: {"phantom": "digit_one", "face": FACE_TRANSMITTED, "delta": 0.0, "gamma": 0.0},
    6: {"phantom": "three_balls", "face": FACE_TRANSMITTED, "delta": 0.0, "gamma": 0.0},
    7: {"phantom": "letter_c", "face": FACE_TRANSMITTED, "delta": 0.0, "gamma": 0.0},
    8: {"phantom": "letter_c", "face": FACE_TRANSMITTED, "delta": 0.05, "gamma": 1e-8},
}


def scaled_config(scale: str = "desk", **overrides) -> DomainConfig:
    """DomainConfig for a named profile with keyword overrides on top."""
    if scale == "paper":
        base: dict = {}
    elif scale == "desk":
        base = dict(DESK_PROFILE)
    else:
        raise ConfigError(f"unknown scale {scale!r}; choose 'paper' or 'desk'")
    base.update(overrides)
    return DomainConfig(**base)


# ---------------------------------------------------------------------------
# run manifest
# ---------------------------------------------------------------------------


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    """Audit record of one pipeline run."""

    config: dict
    seed: int
    stages: list = field(default_factory=list)
    outputs: dict = field(default_factory=dict)
    versions: dict = field(default_factory=lambda: {
        "waveinv": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    })
    extra: dict = field(default_factory=dict)

    def add_stage(self, name: str, wall_s: float, **details) -> None:
        self.stages.append({"name": name, "wall_s": float(wall_s), **details})

    def add_output(self, path: str) -> None:
        self.outputs[os.path.basename(path)] = _sha256_file(path)

    def save(self, path: str) -> None:
        payload = dataclasses.asdict(self)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


class _StageTimer:
    def __init__(self, manifest: RunManifest | None):
        self.manifest = manifest

    def record(self, name: str, t0: float, **details) -> None:
        if self.manifest is not None:
            self.manifest.add_stage(name, time.perf_counter() - t0, **details)


# ---------------------------------------------------------------------------
# volume export
# ---------------------------------------------------------------------------


def save_volume(fld: ScalarField3, base: str) -> list[str]:
    """Write `base`.raw (little-endian float64, C order) and `base`.json."""
    raw = base + ".raw"
    values = np.ascontiguousarray(fld.values, dtype="<f8")
    values.tofile(raw)
    header = {
        "shape": list(fld.values.shape),
        "origin": [float(v) for v in fld.grid.origin],
        "step": float(fld.grid.step),
        "dtype": "<f8",
        "order": "C",
        "raw_sha256": _sha256_file(raw),
    }
    meta = base + ".json"
    with open(meta, "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return [raw, meta]


def load_volume(base: str) -> ScalarField3:
    """Read a save_volume pair back into a field."""
    try:
        with open(base + ".json", encoding="utf-8") as fh:
            header = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read volume header {base}.json: {exc}") from None
    raw = base + ".raw"
    if header.get("raw_sha256") and _sha256_file(raw) != header["raw_sha256"]:
        raise ConfigError(f"digest mismatch for {raw}")
    shape = tuple(header["shape"])
    values = np.fromfile(raw, dtype=header.get("dtype", "<f8")).reshape(shape)
    grid = Grid3(origin=tuple(header["origin"]), step=header["step"], counts=shape)
    return ScalarField3(grid=grid, values=values.astype(np.float64))


def save_midplane_slices(fld: ScalarField3, base: str) -> list[str]:
    """Mid-plane slice of the volume per axis, one CSV each."""
    paths = []
    names = ("x", "y", "z")
    for ax in range(3):
        mid = fld.values.shape[ax] // 2
        plane = np.take(fld.values, mid, axis=ax)
        path = f"{base}_mid{names[ax]}.csv"
        np.savetxt(path, plane, delimiter=",")
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# data synthesis
# ---------------------------------------------------------------------------


def make_synthetic_data(
    cfg: DomainConfig,
    phantom_kind: str,
    phantom_overrides: dict | None = None,
    provenance: str = "oracle",
    oracle_step: float | None = None,
    threads: int | None = None,
    layout: SourceDetectorLayout | None = None,
    manifest: RunManifest | None = None,
) -> tuple[BoundaryDataSet, Phantom]:
    """Boundary data for a named phantom, by kernel quadrature or FDTD.

    The oracle path voxelizes the phantom at `oracle_step` (default:
    half the inversion spacing) and evaluates the integral identity
    directly; the FDTD path runs the wave solver per source and reduces
    the traces to time moments.  Returns the data and the phantom the
    data was generated from.
    """
    timer = _StageTimer(manifest)
    if layout is None:
        layout = build_layout(cfg)
    overrides = dict(phantom_overrides or {})
    t0 = time.perf_counter()
    if provenance == "oracle":
        step = oracle_step if oracle_step is not None else cfg.inv_h / 2.0
        phantom = make_phantom(phantom_kind, cfg, step=step, **overrides)
        data = direct_oracle_data(phantom, layout, cfg)
        timer.record("oracle_data", t0, phantom=phantom_kind, quad_step=step)
    elif provenance == "fdtd":
        phantom = make_phantom(phantom_kind, cfg, step=cfg.forward_h, **overrides)
        traces = solve_all_sources(phantom, cfg, layout=layout, threads=threads)
        timer.record("forward", t0, phantom=phantom_kind, sources=layout.n_sources)
        t0 = time.perf_counter()
        data = assemble_boundary_data(traces, layout, cfg)
        timer.record("assemble_data", t0)
    else:
        raise ConfigError(f"unknown provenance {provenance!r}; 'oracle' or 'fdtd'")
    return data, phantom


# ---------------------------------------------------------------------------
# inversion
# ---------------------------------------------------------------------------


def invert(
    data: BoundaryDataSet,
    cfg: DomainConfig,
    q_true: ScalarField3 | None = None,
    layout: SourceDetectorLayout | None = None,
    manifest: RunManifest | None = None,
) -> tuple[ReconstructionResult, QrmSolution]:
    """Projection, solve, and coefficient recovery for one data set.

    cfg.solver picks the route: "march" (default) or the least-squares /
    quasi-reversibility family ("auto", "direct", "cg", "lsmr").
    """
    timer = _StageTimer(manifest)
    grid = inversion_grid(cfg)
    if q_true is not None and hasattr(q_true, "q_field"):
        # a Phantom carries its analytic shape: re-voxelize on the
        # inversion grid when it was sampled at a different step
        if q_true.q_field.grid.shape == grid.shape:
            q_true = q_true.q_field
        elif q_true.kind in PHANTOM_KINDS:
            params = {k: v for k, v in q_true.params.items() if k not in ("kind", "note")}
            q_true = make_phantom(q_true.kind, cfg, grid=grid, **params).q_field
        else:
            raise ConfigError(
                "q_true phantom lives on a different grid and has no shape"
                " recipe; pass a ScalarField3 on the inversion grid"
            )
    if layout is None:
        layout = build_layout(cfg)
    basis = build_basis(cfg.N, cfg.d)

    t0 = time.perf_counter()
    bvecs = project_boundary_data(data, layout, basis, cfg, grid=grid)
    timer.record("project", t0, N=basis.N)

    t0 = time.perf_counter()
    if cfg.solver == "march":
        sol = solve_marching(bvecs, basis, cfg, grid=grid)
    else:
        coeffs = assemble_coefficients(basis, cfg, grid=grid)
        F = build_extension(bvecs, cfg, grid=grid)
        problem = build_qrm_system(coeffs, F, cfg.gamma, cfg)
        method = None if cfg.solver == "auto" else cfg.solver
        sol = solve_qrm(problem, method=method)
    timer.record("solve", t0, method=sol.method, residual=sol.residual)

    t0 = time.perf_counter()
    result = reconstruct(sol, basis, layout, cfg, q_true=q_true)
    timer.record("recover", t0)
    return result, sol


# ---------------------------------------------------------------------------
# reference-test driver
# ---------------------------------------------------------------------------


def reproduce_test(
    test_id: int,
    scale: str = "desk",
    seed: int = 0,
    out: str | None = None,
    provenance: str = "oracle",
    threads: int | None = None,
    **config_overrides,
) -> tuple[ReconstructionResult, RunManifest]:
    """Run one of the eight reference reconstructions end to end.

    Tests 1-4 measure on the backscattering face, 5-8 on the transmitted
    face; tests 4 and 8 add 5% noise and regularize.  `scale` picks the
    problem size ("desk" fits a laptop; "paper" is the full-size setup),
    `provenance` the data route.  Writes volumes, slices, metrics, and a
    manifest under `out` when given.
    """
    if test_id not in TESTS:
        raise ConfigError(f"test_id must be in {sorted(TESTS)}, got {test_id}")
    spec = TESTS[test_id]
    overrides = {
        "measurement_face": spec["face"],
        "gamma": spec["gamma"],
        **DEEP_PROFILE,
        **config_overrides,
    }
    cfg = scaled_config(scale, **overrides)
    manifest = RunManifest(config=cfg.to_dict(), seed=seed)
    manifest.extra["test_id"] = test_id
    manifest.extra["scale"] = scale
    manifest.extra["provenance"] = provenance

    layout = build_layout(cfg)
    data, phantom = make_synthetic_data(
        cfg,
        spec["phantom"],
        provenance=provenance,
        threads=threads,
        layout=layout,
        manifest=manifest,
    )
    if spec["delta"] > 0:
        data = add_noise(data, spec["delta"], seed)
        manifest.extra["delta"] = spec["delta"]

    q_true = make_phantom(spec["phantom"], cfg).q_field
    result, sol = invert(data, cfg, q_true=q_true, layout=layout, manifest=manifest)
    manifest.extra["solver_stats"] = _json_safe(sol.stats)
    manifest.extra["metrics"] = _json_safe(result.metrics)

    if out is not None:
        os.makedirs(out, exist_ok=True)
        cfg.to_json(os.path.join(out, "config.json"))
        manifest.add_output(os.path.join(out, "config.json"))
        for path in save_boundary_data(data, os.path.join(out, "data.bin")):
            manifest.add_output(path)
        for path in save_volume(result.q_rec, os.path.join(out, "q_rec")):
            manifest.add_output(path)
        for path in save_volume(q_true, os.path.join(out, "q_true")):
            manifest.add_output(path)
        for path in save_midplane_slices(result.q_rec, os.path.join(out, "q_rec")):
            manifest.add_output(path)
        with open(os.path.join(out, "metrics.json"), "w", encoding="utf-8") as fh:
            json.dump(_json_safe(result.metrics), fh, indent=2, sort_keys=True)
            fh.write("\n")
        manifest.add_output(os.path.join(out, "metrics.json"))
        manifest.save(os.path.join(out, "manifest.json"))
    return result, manifest


# ---------------------------------------------------------------------------
# convergence-trend driver
# ---------------------------------------------------------------------------


def convergence_experiment(
    deltas: list,
    cfg: DomainConfig | None = None,
    phantom_kind: str = "letter_c",
    phantom_overrides: dict | None = None,
    seed: int = 0,
    out: str | None = None,
    provenance: str = "oracle",
    threads: int | None = None,
) -> dict:
    """Noise-level sweep against a shared noiseless run.

    For each delta (ascending, in [0, 1)) the same data set is perturbed
    with gamma = delta^2 recorded in the config, inverted, and compared
    to the noiseless solution in the discrete H2 metric; the same seed
    is used throughout, so the noise direction is fixed and only its
    amplitude moves.  Returns a row table and writes it as CSV under
    `out` when given.
    """
    if sorted(deltas) != list(deltas):
        raise ConfigError("deltas must be sorted ascending")
    if any(d < 0 or d >= 1 for d in deltas):
        raise ConfigError("every delta must lie in [0, 1)")
    if cfg is None:
        cfg = scaled_config("desk", **DEEP_PROFILE)
    layout = build_layout(cfg)
    manifest = RunManifest(config=cfg.to_dict(), seed=seed)
    manifest.extra["deltas"] = [float(d) for d in deltas]

    data, _ = make_synthetic_data(
        cfg,
        phantom_kind,
        phantom_overrides,
        provenance=provenance,
        threads=threads,
        layout=layout,
        manifest=manifest,
    )
    q_true = make_phantom(phantom_kind, cfg, **(phantom_overrides or {})).q_field

    t0 = time.perf_counter()
    base_cfg = dataclasses.replace(cfg, gamma=0.0)
    base_result, base_sol = invert(data, base_cfg, q_true=q_true, layout=layout)
    manifest.add_stage("invert_noiseless", time.perf_counter() - t0)

    h = base_sol.U.grid.step
    rows = []
    for delta in deltas:
        t0 = time.perf_counter()
        gamma = float(delta) ** 2
        noisy = add_noise(data, float(delta), seed) if delta > 0 else data
        run_cfg = dataclasses.replace(cfg, gamma=gamma)
        result, sol = invert(noisy, run_cfg, q_true=q_true, layout=layout)
        dist = discrete_h2_norm(sol.U.components - base_sol.U.components, h)
        rows.append(
            {
                "delta": float(delta),
                "gamma": gamma,
                "h2_distance": float(dist),
                "q_rel_l2": float(result.metrics["rel_l2_error"]),
            }
        )
        manifest.add_stage(f"invert_delta_{delta}", time.perf_counter() - t0)

    table = {
        "rows": rows,
        "noiseless_rel_l2": float(base_result.metrics["rel_l2_error"]),
        "phantom": phantom_kind,
    }
    if out is not None:
        os.makedirs(out, exist_ok=True)
        csv_path = os.path.join(out, "convergence.csv")
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("delta,gamma,h2_distance,q_rel_l2\n")
            for row in rows:
                fh.write(
                    f"{row['delta']},{row['gamma']},{row['h2_distance']},"
                    f"{row['q_rel_l2']}\n"
                )
        manifest.add_output(csv_path)
        manifest.save(os.path.join(out, "manifest.json"))
    return table


def _json_safe(obj):
    """Recursively convert numpy scalars/arrays for json.dump."""
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj
