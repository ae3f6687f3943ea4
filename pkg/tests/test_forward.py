"""Explicit wave solver: causality, symmetry, linearity, persistence."""

import dataclasses
import json
import warnings

import numpy as np
import pytest

from waveinv.errors import ConfigError
from waveinv.forward import (
    Phantom,
    TraceStore,
    load_traces,
    mollified_delta,
    save_traces,
    solve_all_sources,
    solve_wave,
)
from waveinv.geometry import ScalarField3, build_layout, forward_grid
from waveinv.recon import make_phantom


@pytest.fixture(scope="module")
def bg_traces(mini_cfg, mini_layout):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return solve_wave(None, 0.0, mini_cfg, mini_layout)


def test_trace_shapes_and_clock(mini_cfg, mini_layout, bg_traces):
    st = bg_traces
    n_steps = int(round(mini_cfg.t_max / mini_cfg.forward_tau)) + 1
    assert st.u.shape == (mini_layout.n_detectors, n_steps)
    assert st.dnu.shape == st.u.shape
    assert st.dt == mini_cfg.forward_tau
    assert st.source_param == 0.0
    # background-only run: no second field stored
    assert st.u0 is None and st.dnu0 is None


def test_causality_before_first_arrival(mini_cfg, mini_layout, bg_traces):
    # the leapfrog domain of dependence grows by h per step with
    # tau < h, so detectors are exactly quiet before the wavefront
    st = bg_traces
    r = np.linalg.norm(mini_layout.detectors - mini_layout.sources[4], axis=1)
    peak = np.abs(st.u).max()
    t = st.dt * np.arange(st.n_samples)
    for i in (0, mini_layout.n_detectors // 2, mini_layout.n_detectors - 1):
        quiet = t < r[i] - mini_cfg.source_support_radius - 2 * mini_cfg.forward_h
        assert np.abs(st.u[i, quiet]).max() < 1e-12 * peak


def test_arrival_time_tracks_distance(mini_cfg, mini_layout, bg_traces):
    st = bg_traces
    r = np.linalg.norm(mini_layout.detectors - mini_layout.sources[4], axis=1)
    t = st.dt * np.arange(st.n_samples)
    arrivals = []
    for i in range(mini_layout.n_detectors):
        k = int(np.argmax(np.abs(st.u[i]) > 1e-6 * np.abs(st.u[i]).max()))
        arrivals.append(t[k])
    arrivals = np.asarray(arrivals)
    # first response within the mollifier width of the geometric distance
    assert np.all(np.abs(arrivals - r) < mini_cfg.source_support_radius + 2 * mini_cfg.forward_h)


def test_mirror_symmetry(mini_cfg, mini_layout):
    # symmetric phantom: swapping the source sign mirrors the detector field
    ph = make_phantom("bump", mini_cfg, step=mini_cfg.forward_h, radius=0.15, amplitude=0.3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sp = solve_wave(ph, mini_layout.source_params[6], mini_cfg, mini_layout)
        sm = solve_wave(ph, mini_layout.source_params[2], mini_cfg, mini_layout)
    nx, ny = mini_layout.det_shape
    up = sp.u.reshape(nx, ny, -1)
    um = sm.u.reshape(nx, ny, -1)
    rel = np.abs(up - um[::-1, :, :]).max() / np.abs(up).max()
    assert rel < 1e-12


def test_scattered_field_linear_in_small_contrast(mini_cfg, mini_layout):
    mk = lambda a: make_phantom("bump", mini_cfg, step=mini_cfg.forward_h, radius=0.15, amplitude=a)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        s1 = solve_wave(mk(1e-3), 0.0, mini_cfg, mini_layout)
        s2 = solve_wave(mk(2e-3), 0.0, mini_cfg, mini_layout)
    sc1 = s1.u - s1.u0
    sc2 = s2.u - s2.u0
    ratio = np.linalg.norm(sc2) / np.linalg.norm(sc1)
    np.testing.assert_allclose(ratio, 2.0, rtol=5e-3)
    assert np.linalg.norm(sc2 - 2 * sc1) / np.linalg.norm(sc2) < 2e-2


def test_background_pair_identical_for_zero_phantom(mini_cfg, mini_layout):
    # c == 1 on both runs: bitwise equal traces, so the subtracted data
    # vanish exactly (the null-test mechanism)
    zero = make_phantom("zero", mini_cfg, step=mini_cfg.forward_h)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        st = solve_wave(zero, 0.0, mini_cfg, mini_layout)
    assert st.u0 is not None
    np.testing.assert_array_equal(st.u, st.u0)
    np.testing.assert_array_equal(st.dnu, st.dnu0)


def test_background_run_only_when_needed(mini_cfg, mini_layout):
    ph = make_phantom("bump", mini_cfg, step=mini_cfg.forward_h, radius=0.15, amplitude=0.1)
    cfg_analytic = dataclasses.replace(mini_cfg, free_space_subtraction="analytic")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        st = solve_wave(ph, 0.0, cfg_analytic, mini_layout)
        st_forced = solve_wave(ph, 0.0, cfg_analytic, mini_layout, with_background=True)
    assert st.u0 is None
    assert st_forced.u0 is not None


def test_amplitude_scaling_exact(mini_cfg, mini_layout):
    # the discrete scheme is linear in the source amplitude
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = solve_wave(None, 0.0, mini_cfg, mini_layout, amplitude=1.0)
        b = solve_wave(None, 0.0, mini_cfg, mini_layout, amplitude=3.0)
    np.testing.assert_allclose(b.u, 3.0 * a.u, rtol=0, atol=1e-13 * np.abs(a.u).max())


def test_phantom_step_must_match_solver(mini_cfg, mini_layout):
    ph = make_phantom("bump", mini_cfg, step=0.05, radius=0.15, amplitude=0.1)
    with pytest.raises(ConfigError):
        solve_wave(ph, 0.0, mini_cfg, mini_layout)


def test_phantom_rejects_negative_or_nonfinite(mini_cfg):
    g = forward_grid(mini_cfg)
    bad = np.zeros(g.shape)
    bad[5, 5, 5] = -0.1
    with pytest.raises(ConfigError):
        Phantom(q_field=ScalarField3(grid=g, values=bad))
    bad[5, 5, 5] = np.nan
    with pytest.raises(ConfigError):
        Phantom(q_field=ScalarField3(grid=g, values=bad))


def test_solve_all_sources_and_store_roundtrip(mini_cfg, tmp_path):
    cfg = dataclasses.replace(mini_cfg, n_sources=3)
    layout = build_layout(cfg)
    ph = make_phantom("bump", cfg, step=cfg.forward_h, radius=0.15, amplitude=0.2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        store = solve_all_sources(ph, cfg, layout, threads=1)
    assert isinstance(store, TraceStore)
    assert store.n_sources == 3
    assert store.layout_hash == layout.layout_hash()

    manifest = save_traces(store, str(tmp_path))
    loaded = load_traces(str(tmp_path))
    assert loaded.layout_hash == store.layout_hash
    for a, b in zip(store.sources, loaded.sources):
        np.testing.assert_array_equal(a.u, b.u)
        np.testing.assert_array_equal(a.dnu, b.dnu)
        np.testing.assert_array_equal(a.u0, b.u0)
        assert a.source_param == b.source_param

    # tampering with a trace file must be detected via the digests
    with open(manifest, encoding="utf-8") as fh:
        man = json.load(fh)
    victim = tmp_path / man["files"][0]["path"]
    blob = bytearray(victim.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    victim.write_bytes(bytes(blob))
    with pytest.raises(ConfigError):
        load_traces(str(tmp_path))


def test_mollified_delta_properties():
    pts = np.array([[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.5, 0.0, 0.0]])
    eps = 0.05
    vals = mollified_delta(pts, np.zeros(3), eps)
    np.testing.assert_allclose(vals[0], np.exp(-1.0) / eps)
    assert vals[1] > 0.0  # |x|^2 = 0.01 < eps
    assert vals[2] == 0.0  # outside the support ball
    with pytest.raises(ConfigError):
        mollified_delta(pts, np.zeros(3), 0.0)
