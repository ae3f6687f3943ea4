"""Configuration, grids, and layout construction."""

import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from waveinv.errors import ConfigError
from waveinv.geometry import (
    DESK_PROFILE,
    FACE_BACKSCATTER,
    FACE_TRANSMITTED,
    DomainConfig,
    Grid3,
    ScalarField3,
    build_layout,
    desk_profile,
    forward_grid,
    inversion_grid,
    omega_eps_mask,
    paper_profile,
)


def test_defaults_validate():
    cfg = DomainConfig()
    cfg.validate()
    assert cfg.A == 0.75
    assert cfg.N == 6
    assert cfg.inv_h == 0.1


def test_source_line_outside_omega():
    cfg = DomainConfig()
    assert cfg.source_z == -cfg.A - abs(cfg.source_offset)
    assert cfg.source_z < -cfg.A
    np.testing.assert_allclose(cfg.source_point, [0.0, 0.0, cfg.source_z])
    # sign of the offset is irrelevant: the line always sits below z = -A
    flipped = dataclasses.replace(cfg, source_offset=-cfg.source_offset)
    assert flipped.source_z == cfg.source_z


def test_face_geometry_both_sides():
    bsc = DomainConfig()
    assert bsc.measurement_face == FACE_BACKSCATTER
    assert bsc.face_z == -bsc.A
    np.testing.assert_allclose(bsc.face_normal, [0, 0, -1.0])
    trn = dataclasses.replace(bsc, measurement_face=FACE_TRANSMITTED)
    assert trn.face_z == trn.A
    np.testing.assert_allclose(trn.face_normal, [0, 0, 1.0])


@pytest.mark.parametrize(
    "patch",
    [
        {"A": -1.0},
        {"source_offset": 0.0},
        {"phi_half_width": 0.5},
        {"n_sources": 1},
        {"detector_grid": (1, 5)},
        {"N": 0},
        {"gamma": -1e-9},
        {"measurement_face": "side"},
        {"scheme": "verlet"},
        {"solver": "newton"},
        {"inv_h": 0.07},  # does not tile 2A = 1.5
        {"forward_tau": 0.1},  # violates CFL h / sqrt(3)
        {"omega_eps": 2.0},
        {"x0_eval": 5.0},
        {"march_pad": -1},
        {"march_budget": 0.0},
        {"march_filter_order": 5},
        {"trust_depth": -2},
        {"blob_grid": 1},
        {"blob_extent": 0.75},
        {"fit_ridge": -1.0},
    ],
)
def test_validate_rejects(patch):
    with pytest.raises(ConfigError):
        DomainConfig(**patch)


def test_phi_must_contain_source_line():
    # |source_z| plus the solver margin must fit inside the simulation cube
    with pytest.raises(ConfigError):
        DomainConfig(source_offset=-5.0, phi_half_width=5.0)


def test_round_trip_dict_and_json(tmp_path):
    cfg = desk_profile(N=4, gamma=1e-6)
    d = cfg.to_dict()
    again = DomainConfig.from_dict(d)
    assert again == cfg
    path = tmp_path / "config.json"
    cfg.to_json(path)
    assert DomainConfig.from_json(path) == cfg
    # the file is plain JSON
    json.loads(path.read_text())


def test_from_dict_rejects_unknown_keys():
    d = DomainConfig().to_dict()
    d["typo_field"] = 1.0
    with pytest.raises(ConfigError):
        DomainConfig.from_dict(d)


def test_profiles():
    desk = desk_profile()
    assert desk.forward_h == DESK_PROFILE["forward_h"]
    assert desk.detector_grid == tuple(DESK_PROFILE["detector_grid"])
    paper = paper_profile()
    assert paper == DomainConfig()
    # overrides land on top of the profile
    assert desk_profile(N=4).N == 4


def test_inversion_grid_covers_omega():
    cfg = DomainConfig()
    g = inversion_grid(cfg)
    assert g.shape == (16, 16, 16)
    for a in range(3):
        ax = g.axis(a)
        assert ax[0] == -cfg.A
        np.testing.assert_allclose(ax[-1], cfg.A)
        np.testing.assert_allclose(np.diff(ax), cfg.inv_h)


def test_forward_grid_contains_omega_faces():
    cfg = desk_profile()
    g = forward_grid(cfg)
    half = -g.origin[2]
    assert half >= cfg.phi_half_width - 1e-12
    # both faces of Omega are node planes
    for z in (-cfg.A, cfg.A):
        k = g.index_of(z, axis=2)
        np.testing.assert_allclose(g.axis(2)[k], z, atol=1e-12)


def test_grid_index_of_rejects_off_node():
    g = Grid3(origin=(0.0, 0.0, 0.0), step=0.1, counts=(5, 5, 5))
    assert g.index_of(0.2, axis=0) == 2
    with pytest.raises(ConfigError):
        g.index_of(0.25, axis=0)
    with pytest.raises(ConfigError):
        g.index_of(0.7, axis=0)  # outside


def test_meshgrid_shapes():
    g = Grid3(origin=(-1.0, 0.0, 1.0), step=0.5, counts=(3, 4, 5))
    X, Y, Z = g.meshgrid()
    assert X.shape == Y.shape == Z.shape == (3, 4, 5)
    assert g.n_nodes == 60
    np.testing.assert_allclose(X[:, 0, 0], [-1.0, -0.5, 0.0])
    np.testing.assert_allclose(Z[0, 0, :], [1.0, 1.5, 2.0, 2.5, 3.0])


def test_scalar_field_shape_guard():
    g = Grid3(origin=(0, 0, 0), step=1.0, counts=(3, 3, 3))
    with pytest.raises(ConfigError):
        ScalarField3(grid=g, values=np.zeros((3, 3)))


def test_layout_sources_span_interval(mini_cfg, mini_layout):
    lay = mini_layout
    assert lay.n_sources == mini_cfg.n_sources
    np.testing.assert_allclose(lay.source_params[0], -mini_cfg.d)
    np.testing.assert_allclose(lay.source_params[-1], mini_cfg.d)
    assert np.all(np.diff(lay.source_params) > 0)
    # all sources sit on the line (x0, 0, z_s)
    np.testing.assert_allclose(lay.sources[:, 1], 0.0)
    np.testing.assert_allclose(lay.sources[:, 2], mini_cfg.source_z)
    np.testing.assert_allclose(lay.sources[:, 0], lay.source_params)


def test_layout_detectors_cover_face(mini_cfg, mini_layout):
    lay = mini_layout
    nx, ny = mini_cfg.detector_grid
    assert lay.n_detectors == nx * ny
    assert lay.det_shape == (nx, ny)
    np.testing.assert_allclose(lay.detectors[:, 2], mini_cfg.face_z)
    assert lay.det_x[0] == -mini_cfg.A and lay.det_x[-1] == mini_cfg.A
    # row-major over (x, y): first ny rows share det_x[0]
    np.testing.assert_allclose(lay.detectors[:ny, 0], lay.det_x[0])
    np.testing.assert_allclose(lay.detectors[:ny, 1], lay.det_y)


def test_layout_hash_tracks_geometry(mini_cfg):
    a = build_layout(mini_cfg)
    b = build_layout(mini_cfg)
    assert a.layout_hash() == b.layout_hash()
    c = build_layout(dataclasses.replace(mini_cfg, n_sources=mini_cfg.n_sources + 2))
    assert c.layout_hash() != a.layout_hash()
    d = build_layout(dataclasses.replace(mini_cfg, measurement_face=FACE_TRANSMITTED))
    assert d.layout_hash() != a.layout_hash()


def test_omega_eps_mask_drops_far_slab():
    cfg = DomainConfig()  # backscattering at z = -A, omega_eps = 0.15
    g = inversion_grid(cfg)
    mask = omega_eps_mask(cfg, g)
    z = g.axis(2)
    kept = z[mask[0, 0, :]]
    assert kept.max() < cfg.A - cfg.omega_eps + 1e-9
    assert kept.min() == -cfg.A
    trn = dataclasses.replace(cfg, measurement_face=FACE_TRANSMITTED)
    mask_t = omega_eps_mask(trn, g)
    kept_t = z[mask_t[0, 0, :]]
    assert kept_t.min() > -cfg.A + cfg.omega_eps - 1e-9
    np.testing.assert_allclose(mask.sum(), mask_t.sum())


@settings(max_examples=30, deadline=None)
@given(
    n=st.integers(min_value=2, max_value=40),
    a=st.floats(min_value=0.1, max_value=5.0, allow_nan=False),
)
def test_layout_hash_deterministic_under_rebuild(n, a):
    # every length scales with the cube half-width so the config stays valid
    cfg = DomainConfig(
        A=a,
        d=a,
        inv_h=2 * a / 10,
        forward_h=2 * a / 10,
        forward_tau=a / 10,
        phi_half_width=4 * a,
        source_offset=-a,
        source_eps=(0.1 * a) ** 2,
        n_sources=n,
        blob_extent=0.5 * a,
        blob_sigma=0.1 * a,
        omega_eps=0.1 * a,
        x0_eval=0.0,
    )
    assert build_layout(cfg).layout_hash() == build_layout(cfg).layout_hash()
