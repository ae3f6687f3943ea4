"""Explicit time-domain solver for c(x) u_tt = Laplace(u) on the cube Phi.

The initial state is u = 0 with velocity equal to a mollified delta at a
source point below Omega, normalized to unit discrete mass so the field
matches the point-source impulse response away from the source.  Traces
of u and of its outward normal derivative are recorded at the detectors
on the measurement face at every time step.

First-order absorbing boundary conditions keep reflections from the
boundary of Phi small; whatever residue they leave is common to the
phantom run and the background (c == 1) run and cancels in the data
assembly downstream.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from waveinv.errors import ConfigError, NumericalError
from waveinv.geometry import (
    DomainConfig,
    Grid3,
    ScalarField3,
    SourceDetectorLayout,
    build_layout,
    forward_grid,
)

_BLOWUP = 1e8  # max-norm above this aborts the run as unstable


@dataclass
class Phantom:
    """Wave-speed perturbation q >= 0 sampled on the simulation grid.

    c(x) = 1 + q(x); q vanishes outside Omega with a margin of at least
    two grid cells so inclusions never touch the measured face.
    """

    q_field: ScalarField3
    kind: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        q = self.q_field.values
        if not np.all(np.isfinite(q)):
            raise ConfigError("phantom contains non-finite values")
        if q.min() < 0:
            raise ConfigError(f"phantom must satisfy q >= 0, found min {q.min()}")

    def describe(self) -> dict:
        return {"kind": self.kind, "params": self.params, "max_q": float(self.q_field.values.max())}


@dataclass
class WaveTrace:
    """Time series of one detector for one source."""

    source_index: int
    detector_index: int
    dt: float
    samples_u: np.ndarray
    samples_dnu: np.ndarray


@dataclass
class SourceTraces:
    """All detector traces of a single source position.

    u / dnu are (n_detectors, n_samples) arrays sampled at t = k * dt
    starting from t = 0.  u0 / dnu0 hold the background (c == 1) run on
    the same grid when it was requested.
    """

    source_index: int
    source_param: float
    dt: float
    u: np.ndarray
    dnu: np.ndarray
    u0: np.ndarray | None
    dnu0: np.ndarray | None
    t_stop: float
    truncated: bool

    @property
    def n_samples(self) -> int:
        return self.u.shape[1]

    def trace(self, detector_index: int, background: bool = False) -> WaveTrace:
        u = self.u0 if background else self.u
        dnu = self.dnu0 if background else self.dnu
        if u is None:
            raise ConfigError("no background traces stored for this source")
        return WaveTrace(
            source_index=self.source_index,
            detector_index=detector_index,
            dt=self.dt,
            samples_u=u[detector_index],
            samples_dnu=dnu[detector_index],
        )


def mollified_delta(points: np.ndarray, center: np.ndarray, eps: float) -> np.ndarray:
    """Compactly supported bump approximating a delta at `center`.

    f(x) = (1/eps) exp(-1 / (1 - |x - center|^2 / eps)) for |x - center|^2 < eps,
    zero otherwise.  Not normalized; the solver divides by the discrete mass.
    """
    if eps <= 0:
        raise ConfigError(f"eps={eps} must be positive")
    pts = np.asarray(points, dtype=np.float64)
    diff = pts - np.asarray(center, dtype=np.float64)
    s = np.sum(diff * diff, axis=-1) / eps
    out = np.zeros_like(s)
    inside = s < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - s[inside])) / eps
    return out


def _bump_on_grid(grid: Grid3, center: np.ndarray, eps: float) -> np.ndarray:
    """mollified_delta sampled on the full grid without forming (n,3) points."""
    x, y, z = grid.axes()
    s = (
        (x[:, None, None] - center[0]) ** 2
        + (y[None, :, None] - center[1]) ** 2
        + (z[None, None, :] - center[2]) ** 2
    ) / eps
    out = np.zeros(grid.shape)
    inside = s < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - s[inside])) / eps
    return out


# ---------------------------------------------------------------------------
# detector sampling
# ---------------------------------------------------------------------------


class _FaceProbe:
    """Bilinear in-plane sampling of u and its one-sided normal derivative.

    The face z-plane and the two planes behind it (in the outward normal
    direction) are combined with the second-order stencil
    (-3 u0 + 4 u1 - u2) / (2h).
    """

    def __init__(self, grid: Grid3, layout: SourceDetectorLayout):
        self.h = grid.step
        k_face = grid.index_of(layout.face_z, axis=2)
        step = int(layout.normal[2])  # +-1, pointing out of Omega
        self.k_planes = (k_face, k_face + step, k_face + 2 * step)
        if not all(0 <= k < grid.counts[2] for k in self.k_planes):
            raise ConfigError("normal-derivative stencil leaves the simulation grid")
        xs, ys = grid.axis(0), grid.axis(1)
        self.ix, self.wx = self._axis_weights(xs, layout.detectors[:, 0])
        self.iy, self.wy = self._axis_weights(ys, layout.detectors[:, 1])

    @staticmethod
    def _axis_weights(axis: np.ndarray, coords: np.ndarray):
        if coords.min() < axis[0] - 1e-9 or coords.max() > axis[-1] + 1e-9:
            raise ConfigError("detector outside the simulation grid")
        pos = (coords - axis[0]) / (axis[1] - axis[0])
        i0 = np.clip(np.floor(pos).astype(int), 0, len(axis) - 2)
        w = pos - i0
        return i0, w

    def _plane_sample(self, plane: np.ndarray) -> np.ndarray:
        ix, wx, iy, wy = self.ix, self.wx, self.iy, self.wy
        return (
            plane[ix, iy] * (1 - wx) * (1 - wy)
            + plane[ix + 1, iy] * wx * (1 - wy)
            + plane[ix, iy + 1] * (1 - wx) * wy
            + plane[ix + 1, iy + 1] * wx * wy
        )

    def sample(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        p0 = self._plane_sample(u[:, :, self.k_planes[0]])
        p1 = self._plane_sample(u[:, :, self.k_planes[1]])
        p2 = self._plane_sample(u[:, :, self.k_planes[2]])
        dnu = (-3.0 * p0 + 4.0 * p1 - p2) / (2.0 * self.h)
        return p0, dnu


# ---------------------------------------------------------------------------
# time stepping
# ---------------------------------------------------------------------------


def _mur_faces(u_new: np.ndarray, u_old: np.ndarray, coef: float) -> None:
    """First-order absorbing update of all six faces (c = 1 there)."""
    u_new[0] = u_old[1] + coef * (u_new[1] - u_old[0])
    u_new[-1] = u_old[-2] + coef * (u_new[-2] - u_old[-1])
    u_new[:, 0] = u_old[:, 1] + coef * (u_new[:, 1] - u_old[:, 0])
    u_new[:, -1] = u_old[:, -2] + coef * (u_new[:, -2] - u_old[:, -1])
    u_new[:, :, 0] = u_old[:, :, 1] + coef * (u_new[:, :, 1] - u_old[:, :, 0])
    u_new[:, :, -1] = u_old[:, :, -2] + coef * (u_new[:, :, -2] - u_old[:, :, -1])


def _laplacian_interior(u: np.ndarray, out: np.ndarray) -> None:
    """7-point Laplacian times h^2 on the interior, written into out[1:-1,...]."""
    c = u[1:-1, 1:-1, 1:-1]
    out[1:-1, 1:-1, 1:-1] = (
        u[2:, 1:-1, 1:-1]
        + u[:-2, 1:-1, 1:-1]
        + u[1:-1, 2:, 1:-1]
        + u[1:-1, :-2, 1:-1]
        + u[1:-1, 1:-1, 2:]
        + u[1:-1, 1:-1, :-2]
        - 6.0 * c
    )


def _cn_matvec(v: np.ndarray, shape, c_over_tau2, h2half):
    """(c/tau^2) v - Laplace(v)/2 with homogeneous Dirichlet halo."""
    v3 = v.reshape(shape)
    out = c_over_tau2 * v3
    lap = np.zeros(shape)
    _laplacian_interior(v3, lap)
    out -= h2half * lap
    return out.ravel()


def solve_wave(
    phantom: Phantom | None,
    source,
    cfg: DomainConfig,
    layout: SourceDetectorLayout | None = None,
    *,
    amplitude: float = 1.0,
    with_background: bool | None = None,
    source_index: int = 0,
) -> SourceTraces:
    """Run the wave solver for one source and record detector traces.

    Parameters
    ----------
    phantom : Phantom or None
        None means the background medium c == 1.
    source : float or (3,) array
        Either the source parameter x0 (placed on the source line) or an
        explicit source center.
    cfg : DomainConfig
    layout : SourceDetectorLayout, optional
        Built from cfg when omitted.
    amplitude : float
        Scales the initial velocity; traces are linear in it.
    with_background : bool, optional
        Also run c == 1 on the same grid and store its traces.  Defaults
        to True when cfg.free_space_subtraction == "numerical" and a
        phantom is present.

    Returns
    -------
    SourceTraces
    """
    if layout is None:
        layout = build_layout(cfg)
    src = np.asarray(source, dtype=np.float64)
    if src.ndim == 0:
        param = float(src)
        src = np.array([param, 0.0, cfg.source_z])
    else:
        param = float(src[0])
    if with_background is None:
        with_background = phantom is not None and cfg.free_space_subtraction == "numerical"

    grid = forward_grid(cfg)
    u, dnu, t_stop, truncated = _run_single(phantom, src, cfg, grid, layout, amplitude)
    u0 = dnu0 = None
    if with_background:
        u0, dnu0, t0_stop, trunc0 = _run_single(None, src, cfg, grid, layout, amplitude)
        n = max(u.shape[1], u0.shape[1])
        u, dnu = _pad_to(u, n), _pad_to(dnu, n)
        u0, dnu0 = _pad_to(u0, n), _pad_to(dnu0, n)
        t_stop = max(t_stop, t0_stop)
        truncated = truncated or trunc0
    return SourceTraces(
        source_index=source_index,
        source_param=param,
        dt=cfg.forward_tau,
        u=u,
        dnu=dnu,
        u0=u0,
        dnu0=dnu0,
        t_stop=t_stop,
        truncated=truncated,
    )


def _pad_to(arr: np.ndarray, n: int) -> np.ndarray:
    if arr.shape[1] == n:
        return arr
    out = np.zeros((arr.shape[0], n))
    out[:, : arr.shape[1]] = arr
    return out


def _run_single(phantom, src, cfg, grid, layout, amplitude):
    tau, h = cfg.forward_tau, cfg.forward_h

    if phantom is None:
        inv_c = 1.0
        c_min = 1.0
    else:
        q = _phantom_on(grid, phantom)
        inv_c = 1.0 / (1.0 + q)
        c_min = 1.0 + float(q.min())
    # CFL uses the slowest local speed 1/sqrt(c); q >= 0 keeps it below 1
    if cfg.scheme == "leapfrog" and tau > h * np.sqrt(c_min / 3.0) + 1e-12:
        raise ConfigError(f"tau={tau} violates CFL h*sqrt(c_min/3)={h * np.sqrt(c_min / 3.0):.6g}")

    probe = _FaceProbe(grid, layout)
    bump = _bump_on_grid(grid, src, cfg.source_eps)
    mass = float(bump.sum()) * h**3
    if mass <= 0:
        raise NumericalError("mollified source has zero discrete mass; refine forward_h")
    u_prev = np.zeros(grid.shape)
    u_cur = (tau * amplitude / mass) * bump

    traces_u = [np.zeros(layout.n_detectors)]
    traces_dn = [np.zeros(layout.n_detectors)]
    s_u, s_dn = probe.sample(u_cur)
    traces_u.append(s_u)
    traces_dn.append(s_dn)

    r2 = tau * tau / (h * h)
    mur = (tau - h) / (tau + h)
    lap = np.zeros(grid.shape)
    n_steps = int(np.ceil(cfg.t_max / tau))
    armed = False
    t = tau
    truncated = True
    use_cn = cfg.scheme == "crank_nicolson"
    if use_cn:
        from scipy.sparse.linalg import LinearOperator, cg

        c_over_tau2 = (1.0 / inv_c) / tau**2 if phantom is not None else 1.0 / tau**2
        h2half = 0.5 / h**2
        nflat = int(np.prod(grid.shape))
        op = LinearOperator(
            (nflat, nflat),
            matvec=lambda v: _cn_matvec(v, grid.shape, c_over_tau2, h2half),
        )
        diag = (c_over_tau2 if np.isscalar(c_over_tau2) else c_over_tau2) + 3.0 / h**2

    for k in range(2, n_steps + 1):
        if use_cn:
            _laplacian_interior(u_prev, lap)
            rhs = c_over_tau2 * (2.0 * u_cur - u_prev) + h2half * lap
            x0 = (2.0 * u_cur - u_prev).ravel()
            sol, info = cg(
                op, rhs.ravel(), x0=x0, rtol=cfg.cn_tol, atol=0.0,
                M=LinearOperator((nflat, nflat), matvec=lambda v: v / np.ravel(diag)),
            )
            if info != 0:
                raise NumericalError(f"implicit step CG failed at t={t:.3f} (info={info})")
            u_new = sol.reshape(grid.shape)
        else:
            _laplacian_interior(u_cur, lap)
            u_new = 2.0 * u_cur - u_prev
            u_new[1:-1, 1:-1, 1:-1] += (
                r2
                * (inv_c[1:-1, 1:-1, 1:-1] if phantom is not None else 1.0)
                * lap[1:-1, 1:-1, 1:-1]
            )
        _mur_faces(u_new, u_cur, mur)
        u_prev, u_cur = u_cur, u_new
        t = k * tau
        s_u, s_dn = probe.sample(u_cur)
        traces_u.append(s_u)
        traces_dn.append(s_dn)

        gmax = float(np.max(np.abs(u_cur)))
        if not np.isfinite(gmax) or gmax > _BLOWUP:
            raise NumericalError(
                f"wave solver unstable at t={t:.3f}: max|u|={gmax:.3e}"
                f" (tau={tau}, h={h}); reduce forward_tau"
            )
        if gmax > cfg.stop_threshold:
            armed = True
        elif armed:
            truncated = False
            break

    if truncated:
        warnings.warn(
            f"wave field still above {cfg.stop_threshold} at t_max={cfg.t_max};"
            " traces truncated",
            stacklevel=2,
        )
    return (
        np.column_stack(traces_u),
        np.column_stack(traces_dn),
        t,
        truncated,
    )


def _phantom_on(grid: Grid3, phantom: Phantom) -> np.ndarray:
    """Embed the phantom's q into the simulation grid (zero outside)."""
    pg = phantom.q_field.grid
    if pg.shape == grid.shape and pg.origin == grid.origin and abs(pg.step - grid.step) < 1e-12:
        return phantom.q_field.values
    if abs(pg.step - grid.step) > 1e-12:
        raise ConfigError(
            f"phantom grid step {pg.step} differs from simulation step {grid.step}"
        )
    out = np.zeros(grid.shape)
    idx = [grid.index_of(pg.origin[a], axis=a) for a in range(3)]
    sl = tuple(slice(i, i + n) for i, n in zip(idx, pg.shape))
    out[sl] = phantom.q_field.values
    return out


# ---------------------------------------------------------------------------
# multi-source driver
# ---------------------------------------------------------------------------


@dataclass
class TraceStore:
    """Traces of every source, plus enough metadata to rebuild the setup."""

    sources: list[SourceTraces]
    layout_hash: str
    config: dict
    timings: dict = field(default_factory=dict)

    def __post_init__(self):
        order = sorted(range(len(self.sources)), key=lambda i: self.sources[i].source_index)
        self.sources = [self.sources[i] for i in order]

    @property
    def n_sources(self) -> int:
        return len(self.sources)

    def get(self, source_index: int) -> SourceTraces:
        return self.sources[source_index]


def _solve_one_task(args):
    phantom, param, idx, cfg = args
    t0 = time.perf_counter()
    st = solve_wave(phantom, param, cfg, source_index=idx)
    return st, time.perf_counter() - t0


def solve_all_sources(
    phantom: Phantom | None,
    cfg: DomainConfig,
    layout: SourceDetectorLayout | None = None,
    threads: int | None = None,
    progress: bool = False,
) -> TraceStore:
    """Run solve_wave for every source of the layout.

    `threads` > 1 distributes sources over worker processes; the default
    uses the CPU count.  Results are deterministic regardless of the
    worker count (each source is solved independently).
    """
    if layout is None:
        layout = build_layout(cfg)
    if threads is None:
        threads = os.cpu_count() or 1
    tasks = [
        (phantom, float(layout.source_params[i]), i, cfg) for i in range(layout.n_sources)
    ]
    results: list[SourceTraces] = []
    wall0 = time.perf_counter()
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for st, dt_run in pool.map(_solve_one_task, tasks):
                results.append(st)
                if progress:
                    print(f"  source {st.source_index:3d} done in {dt_run:.1f}s", flush=True)
    else:
        for task in tasks:
            st, dt_run = _solve_one_task(task)
            results.append(st)
            if progress:
                print(f"  source {st.source_index:3d} done in {dt_run:.1f}s", flush=True)
    timings = {"wall_s": time.perf_counter() - wall0, "threads": threads}
    return TraceStore(
        sources=results,
        layout_hash=layout.layout_hash(),
        config=cfg.to_dict(),
        timings=timings,
    )


# ---------------------------------------------------------------------------
# persistence: one binary file per source plus a JSON manifest
# ---------------------------------------------------------------------------

_MAGIC = b"WVTR"
_HEADER = struct.Struct("<4sBqdqqBBdd")  # magic, version, idx, dt, ndet, nsamp, bg, trunc, tstop, param


def _write_source_file(path: str, st: SourceTraces) -> None:
    has_bg = st.u0 is not None
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                _MAGIC,
                1,
                st.source_index,
                st.dt,
                st.u.shape[0],
                st.u.shape[1],
                int(has_bg),
                int(st.truncated),
                st.t_stop,
                st.source_param,
            )
        )
        arrays = [st.u, st.dnu] + ([st.u0, st.dnu0] if has_bg else [])
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_source_file(path: str) -> SourceTraces:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        magic, version, idx, dt, ndet, nsamp, has_bg, trunc, tstop, param = _HEADER.unpack(head)
        if magic != _MAGIC:
            raise ConfigError(f"{path} is not a trace file")
        if version != 1:
            raise ConfigError(f"unsupported trace file version {version}")
        count = ndet * nsamp
        n_arrays = 4 if has_bg else 2
        flat = np.frombuffer(fh.read(8 * count * n_arrays), dtype="<f8")
        if flat.size != count * n_arrays:
            raise ConfigError(f"{path} is truncated")
    arrs = flat.reshape(n_arrays, ndet, nsamp)
    return SourceTraces(
        source_index=idx,
        source_param=param,
        dt=dt,
        u=arrs[0].copy(),
        dnu=arrs[1].copy(),
        u0=arrs[2].copy() if has_bg else None,
        dnu0=arrs[3].copy() if has_bg else None,
        t_stop=tstop,
        truncated=bool(trunc),
    )


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_traces(store: TraceStore, out_dir: str) -> str:
    """Write per-source binaries and a manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for st in store.sources:
        name = f"source_{st.source_index:04d}.trc"
        path = os.path.join(out_dir, name)
        _write_source_file(path, st)
        entries.append(
            {
                "path": name,
                "sha256": _sha256(path),
                "source_index": st.source_index,
                "source_param": st.source_param,
                "t_stop": st.t_stop,
                "truncated": st.truncated,
            }
        )
    manifest = {
        "format": "waveinv-traces-v1",
        "layout_hash": store.layout_hash,
        "config": store.config,
        "timings": store.timings,
        "files": entries,
    }
    mpath = os.path.join(out_dir, "manifest.json")
    with open(mpath, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return mpath


def load_traces(in_dir: str) -> TraceStore:
    mpath = os.path.join(in_dir, "manifest.json")
    try:
        with open(mpath, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read trace manifest {mpath}: {exc}") from None
    if manifest.get("format") != "waveinv-traces-v1":
        raise ConfigError(f"{mpath} has unknown format {manifest.get('format')!r}")
    sources = []
    for entry in manifest["files"]:
        path = os.path.join(in_dir, entry["path"])
        if _sha256(path) != entry["sha256"]:
            raise ConfigError(f"digest mismatch for {path}; trace set corrupted")
        sources.append(_read_source_file(path))
    return TraceStore(
        sources=sources,
        layout_hash=manifest["layout_hash"],
        config=manifest["config"],
        timings=manifest.get("timings", {}),
    )
