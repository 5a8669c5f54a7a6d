"""Constitutive layer: isotropic elasticity, tensile/compressive energy split,
degradation, history field, and the no-interpenetration constraint.

Plane strain throughout: the out-of-plane principal strain is zero, so the
split runs over the two in-plane principal values.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MaterialParams:
    """Lame constants in kN/mm^2, toughness in kN/mm, lengths in mm."""

    lam: float
    mu: float
    gc: float
    lo: float
    kp: float = 1e-6

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("shear modulus must be positive")
        if self.lam <= -2.0 / 3.0 * self.mu:
            raise ValueError("first Lame constant out of the admissible range")
        if self.gc <= 0 or self.lo <= 0:
            raise ValueError("G_c and the length scale must be positive")
        if not (0 < self.kp < 1):
            raise ValueError("residual stiffness k_p must be in (0, 1)")

    @classmethod
    def from_engineering(cls, E, nu, gc, lo, kp=1e-6) -> "MaterialParams":
        lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
        mu = E / (2.0 * (1.0 + nu))
        return cls(lam=lam, mu=mu, gc=gc, lo=lo, kp=kp)

    @property
    def youngs(self) -> float:
        return self.mu * (3.0 * self.lam + 2.0 * self.mu) / (self.lam + self.mu)

    @property
    def poisson(self) -> float:
        return self.lam / (2.0 * (self.lam + self.mu))

    def with_lo(self, lo) -> "MaterialParams":
        return MaterialParams(self.lam, self.mu, self.gc, lo, self.kp)


@dataclass(frozen=True)
class SplitResult:
    psi_plus: float
    psi_minus: float
    eps_plus: np.ndarray  # (2, 2)
    eps_minus: np.ndarray
    principal: np.ndarray  # (2,) descending
    directions: np.ndarray  # (2, 2) columns are principal directions


def _eig2_sym(exx, eyy, exy):
    """Closed-form eigenpairs of symmetric 2x2 tensors (batched)."""
    mean = 0.5 * (exx + eyy)
    rad = np.sqrt((0.5 * (exx - eyy)) ** 2 + exy**2)
    lam1 = mean + rad
    lam2 = mean - rad
    theta = 0.5 * np.arctan2(2.0 * exy, exx - eyy)
    return lam1, lam2, theta


def spectral_split(eps, lam=1.0, mu=1.0) -> SplitResult:
    """Decompose a symmetric 2x2 strain into tensile/compressive parts.

    Energies use the supplied Lame constants:
        psi+- = lam/2 <tr eps>+-^2 + mu tr(eps+-^2).
    """
    eps = np.asarray(eps, dtype=float)
    if eps.shape != (2, 2) or abs(eps[0, 1] - eps[1, 0]) > 1e-12 * (
        1.0 + np.abs(eps).max()
    ):
        raise ValueError("strain must be a symmetric 2x2 tensor")
    l1, l2, theta = _eig2_sym(eps[0, 0], eps[1, 1], 0.5 * (eps[0, 1] + eps[1, 0]))
    n1 = np.array([np.cos(theta), np.sin(theta)])
    n2 = np.array([-np.sin(theta), np.cos(theta)])
    eps_plus = max(l1, 0.0) * np.outer(n1, n1) + max(l2, 0.0) * np.outer(n2, n2)
    eps_minus = min(l1, 0.0) * np.outer(n1, n1) + min(l2, 0.0) * np.outer(n2, n2)
    tr = l1 + l2
    psi_plus = 0.5 * lam * max(tr, 0.0) ** 2 + mu * (max(l1, 0.0) ** 2 + max(l2, 0.0) ** 2)
    psi_minus = 0.5 * lam * min(tr, 0.0) ** 2 + mu * (min(l1, 0.0) ** 2 + min(l2, 0.0) ** 2)
    return SplitResult(
        psi_plus=float(psi_plus),
        psi_minus=float(psi_minus),
        eps_plus=eps_plus,
        eps_minus=eps_minus,
        principal=np.array([l1, l2]),
        directions=np.stack([n1, n2], axis=1),
    )


def split_energies_voigt(eps_voigt, lam, mu):
    """Batched psi+/psi- for strains in Voigt order (exx, eyy, gxy)."""
    e = np.asarray(eps_voigt, dtype=float)
    exx, eyy, exy = e[..., 0], e[..., 1], 0.5 * e[..., 2]
    l1, l2, _ = _eig2_sym(exx, eyy, exy)
    tr = l1 + l2
    p1 = np.maximum(l1, 0.0)
    p2 = np.maximum(l2, 0.0)
    m1 = np.minimum(l1, 0.0)
    m2 = np.minimum(l2, 0.0)
    psi_plus = 0.5 * lam * np.maximum(tr, 0.0) ** 2 + mu * (p1**2 + p2**2)
    psi_minus = 0.5 * lam * np.minimum(tr, 0.0) ** 2 + mu * (m1**2 + m2**2)
    return psi_plus, psi_minus


def split_stress(result: SplitResult, lam, mu, sign=+1) -> np.ndarray:
    """d(psi+-)/d(eps) assembled from a split (away from repeated eigenvalues)."""
    tr = result.principal.sum()
    if sign > 0:
        return lam * max(tr, 0.0) * np.eye(2) + 2.0 * mu * result.eps_plus
    return lam * min(tr, 0.0) * np.eye(2) + 2.0 * mu * result.eps_minus


def degradation(phi, kp):
    """Stiffness degradation (1 - phi)^2 + k_p."""
    return (1.0 - np.asarray(phi, dtype=float)) ** 2 + kp


def update_history(h_old, psi_plus):
    """Irreversible history update H = max(H_old, psi+)."""
    return np.maximum(h_old, psi_plus)


def apply_hybrid_constraint(phi, psi_plus_nodal, psi_minus_nodal):
    """Zero the phase field wherever the compressive energy dominates."""
    phi = np.asarray(phi, dtype=float).copy()
    mask = np.asarray(psi_plus_nodal) < np.asarray(psi_minus_nodal)
    phi[mask] = 0.0
    return phi


def constitutive_matrix(params: MaterialParams) -> np.ndarray:
    """Plane-strain isotropic stiffness in Voigt order (exx, eyy, gxy)."""
    lam, mu = params.lam, params.mu
    return np.array(
        [
            [lam + 2.0 * mu, lam, 0.0],
            [lam, lam + 2.0 * mu, 0.0],
            [0.0, 0.0, mu],
        ]
    )


def von_mises_plane_strain(sigma_voigt, nu):
    """Von Mises stress with sigma_zz = nu (sigma_xx + sigma_yy)."""
    s = np.asarray(sigma_voigt, dtype=float)
    sxx, syy, txy = s[..., 0], s[..., 1], s[..., 2]
    szz = nu * (sxx + syy)
    return np.sqrt(
        0.5 * ((sxx - syy) ** 2 + (syy - szz) ** 2 + (szz - sxx) ** 2) + 3.0 * txy**2
    )
