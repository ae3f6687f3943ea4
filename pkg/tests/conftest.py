"""Shared fixtures: a miniature geometry that runs every stage in seconds.

The mini cube (A = 0.3, 7^3 inversion grid, N = 3) keeps the same
stand-off proportions as the production setup, so every pipeline stage
exercises the identical code paths at a fraction of the cost.  Accuracy
statements about the marching solver are made only at production scale
(see test_acceptance.py); the mini geometry checks structure, shapes,
determinism, and the solver algebra.
"""

import dataclasses

import numpy as np
import pytest

from waveinv.basis import build_basis
from waveinv.data import direct_oracle_data
from waveinv.geometry import DomainConfig, build_layout, inversion_grid
from waveinv.qrm import build_qrm_system, solve_qrm
from waveinv.recon import make_phantom
from waveinv.system import assemble_coefficients, build_extension, project_boundary_data

# detector grid == face nodes (7 x 7 at inv_h = 0.1): exact data transfer
MINI = dict(
    A=0.3,
    d=0.4,
    N=3,
    inv_h=0.1,
    source_offset=-0.7,
    phi_half_width=2.0,
    n_sources=9,
    detector_grid=(7, 7),
    forward_h=0.1,
    forward_tau=0.05,
    t_max=8.0,
    blob_extent=0.22,
    blob_sigma=0.06,
    blob_grid=7,
)


@pytest.fixture(scope="session")
def mini_cfg() -> DomainConfig:
    return DomainConfig(**MINI)


@pytest.fixture(scope="session")
def mini_cfg_coarse_det() -> DomainConfig:
    # detector grid coarser than the face nodes: bilinear transfer path
    return DomainConfig(**{**MINI, "detector_grid": (4, 4)})


@pytest.fixture(scope="session")
def mini_grid(mini_cfg):
    return inversion_grid(mini_cfg)


@pytest.fixture(scope="session")
def mini_layout(mini_cfg):
    return build_layout(mini_cfg)


@pytest.fixture(scope="session")
def mini_basis(mini_cfg):
    return build_basis(mini_cfg.N, mini_cfg.d)


@pytest.fixture(scope="session")
def basis3():
    # unit interval basis pinned against the exact symbolic values
    return build_basis(3, 1.0)


@pytest.fixture(scope="session")
def mini_phantom(mini_cfg):
    # oracle-quadrature phantom at half the inversion step
    return make_phantom("bump", mini_cfg, step=0.05, radius=0.15, amplitude=0.5)


@pytest.fixture(scope="session")
def mini_data(mini_phantom, mini_layout, mini_cfg):
    return direct_oracle_data(mini_phantom, mini_layout, mini_cfg)


@pytest.fixture(scope="session")
def mini_bvecs(mini_data, mini_layout, mini_basis, mini_cfg):
    return project_boundary_data(mini_data, mini_layout, mini_basis, mini_cfg)


@pytest.fixture(scope="session")
def mini_coeffs(mini_basis, mini_cfg):
    return assemble_coefficients(mini_basis, mini_cfg)


@pytest.fixture(scope="session")
def mini_problem(mini_coeffs, mini_bvecs, mini_cfg):
    F = build_extension(mini_bvecs, mini_cfg)
    return build_qrm_system(mini_coeffs, F, 1e-8, mini_cfg)


@pytest.fixture(scope="session")
def mini_direct_solution(mini_problem):
    return solve_qrm(mini_problem, method="direct")


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: release acceptance criteria")
    config.addinivalue_line("markers", "slow: long-running integration tests")
