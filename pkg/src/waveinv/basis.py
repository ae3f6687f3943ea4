"""Orthonormal basis of weighted polynomials on the source interval.

The source dependence of the measured field is expanded in functions

    psi_n(x0) = P_n(x0) * exp(x0),      n = 0 .. N-1,

where P_n is a degree-n polynomial and the family is orthonormal in
L2(-d, d).  The family is produced by Gram-Schmidt on {x0^n exp(x0)}.
Its defining property is that the matrix

    M[m, n] = <psi_n' , psi_m>

is unit upper triangular (psi_n' = (P_n' + P_n) exp(x0) has the same
leading coefficient as psi_n), hence invertible for every truncation
order; this is what makes the elliptic reduction solvable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import polynomial as npp

from waveinv.errors import ConfigError, NumericalError

_ORTHO_TOL = 1e-9  # build-time orthonormality guard
_QUAD_TOL = 1e-12
_QUAD_MAX_NODES = 1024


def _gauss_legendre(n_nodes: int, d: float) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre rule scaled from [-1, 1] to [-d, d]."""
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    return d * x, d * w


def choose_quadrature(N: int, d: float) -> tuple[np.ndarray, np.ndarray]:
    """Rule that integrates x^k exp(2x), k <= 2N, on [-d, d] to ~1e-12.

    Node count is doubled until the probe integral stabilizes.
    """
    k = 2 * N
    n_nodes = max(2 * N + 8, 16)
    nodes, weights = _gauss_legendre(n_nodes, d)
    prev = float(weights @ (nodes**k * np.exp(2 * nodes)))
    while n_nodes < _QUAD_MAX_NODES:
        n_nodes *= 2
        nodes, weights = _gauss_legendre(n_nodes, d)
        cur = float(weights @ (nodes**k * np.exp(2 * nodes)))
        if abs(cur - prev) <= _QUAD_TOL * max(1.0, abs(cur)):
            return nodes, weights
        prev = cur
    raise NumericalError(
        f"quadrature for the basis did not stabilize below {_QUAD_MAX_NODES} nodes"
    )


@dataclass
class BasisSet:
    """Orthonormal weighted-polynomial basis and its derivative matrix.

    Attributes
    ----------
    d : float
        Half-width of the interval.
    N : int
        Number of functions.
    coeffs : ndarray, shape (N, N)
        Row n holds the monomial coefficients of P_n (increasing degree).
    quad_nodes, quad_weights : ndarray
        Gauss-Legendre rule used for all inner products.
    M : ndarray, shape (N, N)
        M[m, n] = <psi_n', psi_m>; unit upper triangular.
    psi_q, dpsi_q : ndarray, shape (n_quad, N)
        Basis values / derivatives tabulated at the quadrature nodes.
    """

    d: float
    N: int
    coeffs: np.ndarray
    quad_nodes: np.ndarray
    quad_weights: np.ndarray
    M: np.ndarray
    psi_q: np.ndarray
    dpsi_q: np.ndarray

    def eval(self, x0) -> tuple[np.ndarray, np.ndarray]:
        """Values and first derivatives of all psi_n at x0.

        Parameters
        ----------
        x0 : float or ndarray
            Evaluation points; must lie in [-d, d].

        Returns
        -------
        psi, dpsi : ndarray, shape x0.shape + (N,)
        """
        x = np.asarray(x0, dtype=np.float64)
        if np.any(np.abs(x) > self.d + 1e-12):
            raise ConfigError(f"basis evaluated outside [-{self.d}, {self.d}]")
        return self._eval_raw(x)

    def _eval_raw(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """eval() without the interval guard (internal cross-check paths)."""
        x = np.asarray(x, dtype=np.float64)
        # polyval with a (deg+1, N) coefficient array returns (N,) + x.shape
        p = npp.polyval(x, self.coeffs.T)
        dp = npp.polyval(x, npp.polyder(self.coeffs.T, axis=0))
        e = np.exp(x)
        psi = np.moveaxis(p * e, 0, -1)
        dpsi = np.moveaxis((dp + p) * e, 0, -1)
        return psi, dpsi

    def project(self, samples_at_nodes: np.ndarray) -> np.ndarray:
        """Coefficients <f, psi_n> of f given its values at the quadrature nodes.

        `samples_at_nodes` has the node axis last; the returned array swaps
        it for the basis axis.
        """
        return (samples_at_nodes * self.quad_weights) @ self.psi_q

    def gram(self) -> np.ndarray:
        return (self.psi_q * self.quad_weights[:, None]).T @ self.psi_q

    def moments(self) -> np.ndarray:
        """Integrals of each psi_n over the interval."""
        return self.quad_weights @ self.psi_q


def eval_basis(basis: BasisSet, x0) -> tuple[np.ndarray, np.ndarray]:
    """Functional wrapper around BasisSet.eval."""
    return basis.eval(x0)


def build_basis(N: int, d: float = 1.0) -> BasisSet:
    """Construct the orthonormal family by modified Gram-Schmidt.

    Parameters
    ----------
    N : int
        Number of functions (highest polynomial degree N-1).
    d : float
        Half-width of the source interval.

    Raises
    ------
    NumericalError
        If double-precision Gram-Schmidt can no longer deliver an
        orthonormal family at this N (reduce N or the interval size).
    """
    if N < 1:
        raise ConfigError(f"N={N} must be at least 1")
    if d <= 0:
        raise ConfigError(f"d={d} must be positive")
    nodes, weights = choose_quadrature(N, d)
    expx = np.exp(nodes)
    # monomial-times-exponential values at the quadrature nodes
    vander = nodes[:, None] ** np.arange(N) * expx[:, None]

    def inner(fa: np.ndarray, fb: np.ndarray) -> float:
        return float(np.sum(weights * fa * fb))

    coeffs = np.zeros((N, N))
    basis_vals = np.zeros((len(nodes), N))
    for n in range(N):
        c = np.zeros(N)
        c[n] = 1.0
        v = vander[:, n].copy()
        for _ in range(2):  # one reorthogonalization pass for stability
            for m in range(n):
                proj = inner(v, basis_vals[:, m])
                c -= proj * coeffs[m]
                v -= proj * basis_vals[:, m]
        norm = inner(v, v)
        if norm <= 0 or not np.isfinite(norm):
            raise NumericalError(
                f"Gram-Schmidt broke down at n={n}: reduce N (requested {N})"
            )
        scale = 1.0 / np.sqrt(norm)
        coeffs[n] = c * scale
        basis_vals[:, n] = v * scale

    gram = (basis_vals * weights[:, None]).T @ basis_vals
    defect = float(np.max(np.abs(gram - np.eye(N))))
    if defect > _ORTHO_TOL:
        raise NumericalError(
            f"orthonormality defect {defect:.2e} exceeds {_ORTHO_TOL:.0e} at N={N};"
            " double precision cannot support this order, reduce N"
        )

    dcoeffs = np.zeros_like(coeffs)
    dcoeffs[:, :-1] = coeffs[:, 1:] * np.arange(1, N)
    dpoly = npp.polyval(nodes, coeffs.T) + npp.polyval(nodes, dcoeffs.T)
    dpsi_q = (dpoly * expx).T
    M = (basis_vals * weights[:, None]).T @ dpsi_q

    return BasisSet(
        d=float(d),
        N=int(N),
        coeffs=coeffs,
        quad_nodes=nodes,
        quad_weights=weights,
        M=M,
        psi_q=basis_vals,
        dpsi_q=dpsi_q,
    )
