"""Command-line entry points for the reconstruction pipeline.

Every subcommand takes --config (a DomainConfig JSON), --seed, --out,
and --threads; exit codes are 0 on success, 2 for configuration errors,
and 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .basis import build_basis
from .data import add_noise, assemble_boundary_data, load_boundary_data, save_boundary_data
from .errors import ConfigError, NumericalError
from .forward import TraceStore, load_traces, save_traces, solve_all_sources, solve_wave
from .geometry import (
    DomainConfig,
    FACE_BACKSCATTER,
    FACE_TRANSMITTED,
    build_layout,
)
from .pipeline import (
    TESTS,
    RunManifest,
    convergence_experiment,
    invert,
    load_volume,
    make_synthetic_data,
    reproduce_test,
    save_midplane_slices,
    save_volume,
)
from .recon import PHANTOM_KINDS, compute_metrics, make_phantom


def _load_config(path: str | None, overrides: dict | None = None) -> DomainConfig:
    data: dict = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    data.update(overrides or {})
    return DomainConfig.from_dict(data)


def _phantom_params(raw: str | None) -> dict:
    if not raw:
        return {}
    try:
        params = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--params is not valid JSON: {exc}") from None
    if not isinstance(params, dict):
        raise ConfigError("--params must be a JSON object")
    return {k: tuple(v) if isinstance(v, list) else v for k, v in params.items()}


def _parse_source_range(raw: str | None, n: int) -> range:
    if raw is None:
        return range(n)
    try:
        a, b = raw.split("..")
        lo, hi = int(a), int(b)
    except ValueError:
        raise ConfigError(f"--sources expects 'a..b', got {raw!r}") from None
    if not (0 <= lo <= hi < n):
        raise ConfigError(f"--sources {raw} outside the layout's 0..{n - 1}")
    return range(lo, hi + 1)


# ---------------------------------------------------------------------------
# subcommand bodies
# ---------------------------------------------------------------------------


def _cmd_forward(args) -> int:
    cfg = _load_config(args.config)
    if args.out is None:
        raise ConfigError("forward requires --out for the trace files")
    layout = build_layout(cfg)
    phantom = make_phantom(
        args.phantom, cfg, step=cfg.forward_h, **_phantom_params(args.params)
    )
    idxs = _parse_source_range(args.sources, layout.n_sources)
    if len(idxs) == layout.n_sources:
        store = solve_all_sources(phantom, cfg, layout=layout, threads=args.threads)
    else:
        # Sharded run: solve the requested span, keep other sources already
        # present in the output directory, and rewrite the manifest.
        solved = []
        for i in idxs:
            solved.append(
                solve_wave(phantom, float(layout.source_params[i]), cfg, source_index=i)
            )
        have = {st.source_index for st in solved}
        if os.path.exists(os.path.join(args.out, "manifest.json")):
            old = load_traces(args.out)
            solved.extend(st for st in old.sources if st.source_index not in have)
        store = TraceStore(
            sources=solved, layout_hash=layout.layout_hash(), config=cfg.to_dict()
        )
    path = save_traces(store, args.out)
    print(f"wrote {store.n_sources} trace files, manifest {path}")
    return 0


def _cmd_make_data(args) -> int:
    cfg = _load_config(args.config)
    if args.out is None:
        raise ConfigError("make-data requires --out for the data file")
    if args.traces is not None:
        if args.source != "fdtd":
            raise ConfigError("--traces only applies to --from fdtd")
        layout = build_layout(cfg)
        data = assemble_boundary_data(load_traces(args.traces), layout, cfg)
    else:
        data, _ = make_synthetic_data(
            cfg,
            args.phantom,
            _phantom_params(args.params),
            provenance=args.source,
            threads=args.threads,
        )
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    paths = save_boundary_data(data, args.out)
    print(f"wrote {paths[0]} ({data.provenance}, {data.g0.shape})")
    return 0


def _cmd_add_noise(args) -> int:
    if args.out is None:
        raise ConfigError("add-noise requires --out for the perturbed file")
    data = load_boundary_data(args.data)
    noisy = add_noise(data, args.delta, args.seed)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    paths = save_boundary_data(noisy, args.out)
    print(f"wrote {paths[0]} (delta={args.delta}, seed={args.seed})")
    return 0


def _cmd_invert(args) -> int:
    overrides: dict = {}
    if args.gamma is not None:
        overrides["gamma"] = args.gamma
    if args.bvp is not None:
        overrides["measurement_face"] = (
            FACE_BACKSCATTER if args.bvp == 1 else FACE_TRANSMITTED
        )
    cfg = _load_config(args.config, overrides)
    data = load_boundary_data(args.data)
    manifest = RunManifest(config=cfg.to_dict(), seed=args.seed)
    result, sol = invert(data, cfg, manifest=manifest)
    stats = {
        "method": sol.method,
        "iterations": sol.iterations,
        "residual": sol.residual,
        "normal_residual": sol.normal_residual,
        "gamma": sol.gamma,
        **{k: v for k, v in sol.stats.items()},
    }
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
        for path in save_volume(result.q_rec, os.path.join(args.out, "q_rec")):
            manifest.add_output(path)
        for path in save_midplane_slices(result.q_rec, os.path.join(args.out, "q_rec")):
            manifest.add_output(path)
        log_path = os.path.join(args.out, "solve_log.json")
        log = []
        if os.path.exists(log_path):
            with open(log_path, encoding="utf-8") as fh:
                log = json.load(fh)
        log.append(_plain(stats))
        with open(log_path, "w", encoding="utf-8") as fh:
            json.dump(log, fh, indent=2, sort_keys=True)
            fh.write("\n")
        manifest.save(os.path.join(args.out, "manifest.json"))
    print(json.dumps(_plain(stats), indent=2, sort_keys=True))
    return 0


def _cmd_phantom(args) -> int:
    cfg = _load_config(args.config)
    phantom = make_phantom(
        args.kind, cfg, step=args.step, **_phantom_params(args.params)
    )
    values = phantom.q_field.values
    print(
        f"{args.kind}: grid {values.shape}, support {int((values != 0).sum())} nodes,"
        f" max {values.max():.3g}"
    )
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
        base = os.path.join(args.out, f"phantom_{args.kind}")
        written = save_volume(phantom.q_field, base)
        written += save_midplane_slices(phantom.q_field, base)
        print("wrote " + ", ".join(written))
    return 0


def _cmd_metrics(args) -> int:
    cfg = _load_config(args.config)
    rec = load_volume(args.rec)
    true = load_volume(args.true)
    met = compute_metrics(rec, true, args.epsilon if args.epsilon is not None else cfg.omega_eps,
                          face=cfg.measurement_face)
    print(json.dumps(_plain(met), indent=2, sort_keys=True))
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "metrics.json"), "w", encoding="utf-8") as fh:
            json.dump(_plain(met), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def _cmd_reproduce_test(args) -> int:
    result, manifest = reproduce_test(
        args.test,
        scale=args.scale,
        seed=args.seed,
        out=args.out,
        provenance=args.source,
        threads=args.threads,
    )
    print(json.dumps(_plain(result.metrics), indent=2, sort_keys=True))
    if args.out is not None:
        print(f"artifacts under {args.out}")
    return 0


def _cmd_convergence(args) -> int:
    cfg = _load_config(args.config) if args.config else None
    deltas = [float(v) for v in args.deltas.split(",") if v.strip()]
    table = convergence_experiment(
        deltas,
        cfg=cfg,
        phantom_kind=args.phantom,
        seed=args.seed,
        out=args.out,
        provenance=args.source,
        threads=args.threads,
    )
    print("delta,gamma,h2_distance,q_rel_l2")
    for row in table["rows"]:
        print(f"{row['delta']},{row['gamma']},{row['h2_distance']},{row['q_rel_l2']}")
    return 0


def _cmd_basis(args) -> int:
    basis = build_basis(args.N, args.d)
    if args.dump:
        print("# polynomial coefficients, row n = P_n, columns x0^k")
        for row in basis.coeffs:
            print(",".join(f"{v:.17g}" for v in row))
        print("# M")
        for row in basis.M:
            print(",".join(f"{v:.17g}" for v in row))
    else:
        gram_err = float(np.abs(basis.gram() - np.eye(basis.N)).max())
        print(
            f"N={basis.N} d={basis.d} quad_nodes={len(basis.quad_nodes)}"
            f" gram_err={gram_err:.3g}"
        )
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="DomainConfig JSON file")
    common.add_argument("--seed", type=int, default=0, help="run seed")
    common.add_argument("--out", help="output directory or file")
    common.add_argument("--threads", type=int, default=None, help="worker processes")

    p = argparse.ArgumentParser(
        prog="waveinv",
        description="Wave-speed reconstruction from one-face boundary data",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("forward", parents=[common], help="run the wave solver, store traces")
    sp.add_argument("--phantom", default="zero", choices=PHANTOM_KINDS)
    sp.add_argument("--params", help="phantom parameter overrides as JSON")
    sp.add_argument("--sources", help="inclusive source shard 'a..b'")
    sp.set_defaults(func=_cmd_forward)

    sp = sub.add_parser("make-data", parents=[common], help="boundary data from fdtd or oracle")
    sp.add_argument("--from", dest="source", default="oracle", choices=("fdtd", "oracle"))
    sp.add_argument("--phantom", default="ball", choices=PHANTOM_KINDS)
    sp.add_argument("--params", help="phantom parameter overrides as JSON")
    sp.add_argument("--traces", help="existing trace directory (fdtd)")
    sp.set_defaults(func=_cmd_make_data)

    sp = sub.add_parser("add-noise", parents=[common], help="perturb a data file")
    sp.add_argument("--data", required=True, help="boundary data file")
    sp.add_argument("--delta", type=float, required=True)
    sp.set_defaults(func=_cmd_add_noise)

    sp = sub.add_parser("invert", parents=[common], help="reconstruct q from a data file")
    sp.add_argument("--data", required=True, help="boundary data file")
    sp.add_argument("--gamma", type=float, default=None)
    sp.add_argument("--bvp", type=int, choices=(1, 2), default=None,
                    help="1: backscattering face, 2: transmitted face")
    sp.set_defaults(func=_cmd_invert)

    sp = sub.add_parser("phantom", parents=[common], help="voxelize a named phantom")
    sp.add_argument("--kind", required=True, choices=PHANTOM_KINDS)
    sp.add_argument("--step", type=float, default=None)
    sp.add_argument("--params", help="phantom parameter overrides as JSON")
    sp.set_defaults(func=_cmd_phantom)

    sp = sub.add_parser("metrics", parents=[common], help="score a reconstruction")
    sp.add_argument("--rec", required=True, help="volume base path (no extension)")
    sp.add_argument("--true", required=True, help="volume base path (no extension)")
    sp.add_argument("--epsilon", type=float, default=None)
    sp.set_defaults(func=_cmd_metrics)

    sp = sub.add_parser("reproduce-test", parents=[common], help="run a reference test")
    sp.add_argument("--test", type=int, required=True, choices=sorted(TESTS))
    sp.add_argument("--scale", default="desk", choices=("desk", "paper"))
    sp.add_argument("--from", dest="source", default="oracle", choices=("fdtd", "oracle"))
    sp.set_defaults(func=_cmd_reproduce_test)

    sp = sub.add_parser("convergence", parents=[common], help="noise-level sweep")
    sp.add_argument("--deltas", default="0.01,0.03,0.05")
    sp.add_argument("--phantom", default="letter_c", choices=PHANTOM_KINDS)
    sp.add_argument("--from", dest="source", default="oracle", choices=("fdtd", "oracle"))
    sp.set_defaults(func=_cmd_convergence)

    sp = sub.add_parser("basis", parents=[common], help="inspect the source basis")
    sp.add_argument("--N", type=int, default=6)
    sp.add_argument("--d", type=float, default=1.0)
    sp.add_argument("--dump", action="store_true")
    sp.set_defaults(func=_cmd_basis)
    return p


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
