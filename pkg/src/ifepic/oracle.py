"""Independent reference solutions for acceptance testing.

Shares no code with the field-solve or solver modules.

OML sheath oracle
-----------------
Stationary Maxwellian plasma around a perfectly absorbing sphere of radius
R_s, monotonic sheath potential φ(r) <= 0. With s = R_s/r, the attracted
species (barrier depth χ(r) = −Zφ(r)·T_e/T_s in units of its own
temperature, χ_s at the surface, β = χ_s − χ):

    n_in/n0  = sqrt(χ/π) + (1/2) e^χ erfc(sqrt(χ))
    n_out/n0 = (1/sqrt(π)) e^χ [ e^{−χ} c
               + sqrt(π(1−s²))/2 · e^{−s²β/(1−s²)} erfc(c/sqrt(1−s²)) ]
    c² = max(0, χ(1−s²) − s²β)

(inbound orbits fully populated for total energy ≥ 0; outbound orbits
empty inside the sphere-grazing angular-momentum boundary
L² ≤ 2 m R_s²(E + T χ_s)). The repelled species keeps the Boltzmann
factor minus the absorbed outbound population:

    n/n0 = e^{−χ} − (e^{−χ}/2)[ erfc(sqrt(β))
           − sqrt(1−s²) e^{s²β/(1−s²)} erfc(sqrt(β)/sqrt(1−s²)) ]

The floating potential comes from the OML current balance
    sqrt(T_e/m_e) e^{−χ_e,s} = sqrt(T_i/m_i) (1 + χ_i,s),
and the radial profile from the 1-D spherical Poisson equation
    (1/r²)(r² φ')' = −(n_i − n_e)
with φ(R_s) = φ_s and φ(r_max) = 0, solved by collocation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_bvp
from scipy.optimize import brentq
from scipy.special import erfc


class OracleError(RuntimeError):
    pass


def attracted_density(chi, chi_s, s):
    """Attracted-species density n/n0 at barrier depth chi, surface depth
    chi_s, radius ratio s = R_s/r."""
    chi = np.asarray(chi, dtype=float)
    s = np.asarray(s, dtype=float)
    chi = np.maximum(chi, 0.0)
    beta = np.maximum(chi_s - chi, 0.0)
    n_in = np.sqrt(chi / np.pi) + 0.5 * np.exp(chi) * erfc(np.sqrt(chi))
    one_m_s2 = np.maximum(1.0 - s ** 2, 0.0)
    c2 = np.maximum(chi * one_m_s2 - s ** 2 * beta, 0.0)
    c = np.sqrt(c2)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        tail = np.where(
            one_m_s2 > 0,
            np.sqrt(np.pi * one_m_s2) / 2.0
            * np.exp(-s ** 2 * beta / np.where(one_m_s2 > 0, one_m_s2, 1.0))
            * erfc(c / np.sqrt(np.where(one_m_s2 > 0, one_m_s2, 1.0))),
            0.0)
    n_out = (np.exp(chi) / np.sqrt(np.pi)) * (np.exp(-chi) * c + tail)
    return n_in + n_out


def repelled_density(chi, chi_s, s):
    """Repelled-species density n/n0 (Boltzmann minus absorbed orbits)."""
    chi = np.asarray(chi, dtype=float)
    s = np.asarray(s, dtype=float)
    chi = np.maximum(chi, 0.0)
    beta = np.maximum(chi_s - chi, 0.0)
    one_m_s2 = np.maximum(1.0 - s ** 2, 0.0)
    sb = np.sqrt(beta)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        safe = np.where(one_m_s2 > 0, one_m_s2, 1.0)
        second = np.where(
            one_m_s2 > 0,
            np.sqrt(safe) * np.exp(np.minimum(s ** 2 * beta / safe, 700.0))
            * erfc(sb / np.sqrt(safe)),
            0.0)
    missing = 0.5 * np.exp(-chi) * (erfc(sb) - second)
    return np.exp(-chi) - missing


def floating_potential(temp_ratio: float, mass_ratio: float) -> float:
    """Surface potential (T_e/e units) from the OML current balance for a
    stationary plasma; temp_ratio = T_i/T_e."""

    def balance(phi_s):
        chi_e = -phi_s
        chi_i = -phi_s / temp_ratio
        return np.exp(-chi_e) - np.sqrt(temp_ratio / mass_ratio) * (1.0 + chi_i)

    lo, hi = -10.0, 0.0
    if balance(lo) * balance(hi) > 0:
        raise OracleError("floating-potential current balance has no root in [-10, 0]")
    return float(brentq(balance, lo, hi, xtol=1e-12))


@dataclass
class OMLProfile:
    r: np.ndarray
    phi: np.ndarray
    n_i: np.ndarray
    n_e: np.ndarray
    surface_potential: float

    def interp_phi(self, r):
        return np.interp(r, self.r, self.phi)

    def write_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("r,phi,n_i,n_e\n")
            for row in zip(self.r, self.phi, self.n_i, self.n_e):
                f.write(",".join(f"{v:.12g}" for v in row) + "\n")


def oml_sheath_profile(radius: float, temp_ratio: float = 1.0,
                       mass_ratio: float = 1836.0, r_max: float = 10.0,
                       n_grid: int = 400, tol: float = 1e-8) -> OMLProfile:
    """Revised-OML radial sheath around a floating absorbing sphere."""
    if radius <= 0 or r_max <= radius:
        raise OracleError("need 0 < R_s < r_max")
    phi_s = floating_potential(temp_ratio, mass_ratio)
    chi_es = -phi_s
    chi_is = -phi_s / temp_ratio

    def densities(phi, r):
        s = radius / r
        chi_e = np.maximum(-phi, 0.0)
        chi_i = np.maximum(-phi / temp_ratio, 0.0)
        n_i = attracted_density(chi_i, chi_is, s)
        n_e = repelled_density(chi_e, chi_es, s)
        return n_i, n_e

    def rhs(r, y):
        phi, dphi = y
        n_i, n_e = densities(phi, r)
        return np.vstack([dphi, -(n_i - n_e) - 2.0 * dphi / r])

    def bc(ya, yb):
        return np.array([ya[0] - phi_s, yb[0]])

    r0 = np.linspace(radius, r_max, n_grid)
    guess = np.vstack([phi_s * (radius / r0) * np.exp(-(r0 - radius)),
                       np.gradient(phi_s * (radius / r0) * np.exp(-(r0 - radius)), r0)])
    sol = solve_bvp(rhs, bc, r0, guess, tol=tol, max_nodes=200000)
    if not sol.success:
        raise OracleError(f"OML sheath BVP failed: {sol.message}")
    r = sol.x
    phi = sol.y[0]
    n_i, n_e = densities(phi, r)
    return OMLProfile(r=r, phi=phi, n_i=n_i, n_e=n_e, surface_potential=phi_s)


def ode_residual(profile: OMLProfile, temp_ratio: float = 1.0) -> np.ndarray:
    """Residual of (1/r²)(r²φ')' + (n_i − n_e) on the profile grid,
    using second-order finite differences on the solver's own mesh."""
    r, phi = profile.r, profile.phi
    dphi = np.gradient(phi, r, edge_order=2)
    lap = np.gradient(r ** 2 * dphi, r, edge_order=2) / r ** 2
    return lap + (profile.n_i - profile.n_e)


# ---------------------------------------------------------------------------
# manufactured interface solutions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManufacturedInterface:
    """Radially symmetric piecewise solution of the interface problem:

        φ⁻ = r²/ε⁻                          (r < R)
        φ⁺ = r²/ε⁺ + C0 + c/r               (r ≥ R)

    with −∇·(ε∇φ) = −6 on both sides, potential continuity at R, and a
    constant realized flux jump ε⁺E⁺·n̂ − ε⁻E⁻·n̂ = q (q = 0 default).
    """
    eps_minus: float
    eps_plus: float
    radius: float
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    q: float = 0.0

    @property
    def _c(self) -> float:
        return self.q * self.radius ** 2 / self.eps_plus

    @property
    def _c0(self) -> float:
        return (self.radius ** 2 * (1.0 / self.eps_minus - 1.0 / self.eps_plus)
                - self._c / self.radius)

    def _r(self, points):
        p = np.atleast_2d(np.asarray(points, dtype=float))
        return np.linalg.norm(p - np.asarray(self.center), axis=1)

    def phi(self, points):
        r = self._r(points)
        inside = r < self.radius
        out = np.empty_like(r)
        out[inside] = r[inside] ** 2 / self.eps_minus
        rs = np.maximum(r[~inside], 1e-300)
        out[~inside] = rs ** 2 / self.eps_plus + self._c0 + self._c / rs
        return out

    def rho(self, points):
        return np.full(len(np.atleast_2d(points)), -6.0)

    def grad_phi(self, points):
        p = np.atleast_2d(np.asarray(points, dtype=float))
        d = p - np.asarray(self.center)
        r = np.linalg.norm(d, axis=1)
        r = np.maximum(r, 1e-300)
        inside = r < self.radius
        dphi_dr = np.where(inside, 2.0 * r / self.eps_minus,
                           2.0 * r / self.eps_plus - self._c / r ** 2)
        return (dphi_dr / r)[:, None] * d

    def dirichlet(self):
        return lambda points: self.phi(points)
