r"""Power-law stress maps, friction laws and their dissipation potentials.

The bulk law is of Ladyzhenskaya type

.. math::

    S(A) = 2(\sigma_2 + c|A|^2)^{(r-2)/2} A, \qquad c = \sigma_r^{2/(r-2)},

with the linear law :math:`S(A) = 2\sigma_2 A` used for ``r == 2``. The
regularized variant adds :math:`\varepsilon\sigma_4|A|^2A +
\varepsilon\sigma_q|A|^{q-2}A`. The wall friction ``s`` has the same form
with the ``rho`` coefficients acting on a velocity vector.

Symmetric tensors are stored as trailing triples ``(a11, a22, a12)``; the
norm is Frobenius and the contraction is the full double-dot product.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

__all__ = [
    "ConstitutiveParams",
    "ParameterError",
    "ValidationReport",
    "sym_norm2",
    "sym_dot",
    "stress_bulk",
    "stress_boundary",
    "potential_bulk",
    "potential_boundary",
    "secant_bulk",
    "secant_boundary",
    "validate_params",
]


class ParameterError(ValueError):
    """Raised for parameter sets outside the supported model class."""


@dataclass(frozen=True)
class ConstitutiveParams:
    """Exponents and coefficients of the bulk and wall laws.

    Units follow the usual generalized-viscosity convention: ``sigma2`` in
    m^2/s, ``sigma_r`` in m^2 s^(r-3), ``sigma4`` in m^2, ``sigma_q`` in
    m^2 s^(q-4); the ``rho`` coefficients are the wall analogues. ``eps`` is
    the regularization time scale in seconds.
    """

    r: float = 2.5
    q: float = 4.5
    sigma2: float = 0.1
    sigma_r: float = 0.1
    sigma4: float = 0.01
    sigma_q: float = 0.01
    rho2: float = 0.1
    rho_r: float = 0.1
    rho4: float = 0.01
    rho_q: float = 0.01
    eps: float = 0.1

    def __post_init__(self):
        _check_fatal(self)

    def with_eps(self, eps: float) -> "ConstitutiveParams":
        return replace(self, eps=float(eps))

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def bulk_coeffs(self):
        return self.r, self.q, self.sigma2, self.sigma_r, self.sigma4, self.sigma_q

    def boundary_coeffs(self):
        return self.r, self.q, self.rho2, self.rho_r, self.rho4, self.rho_q


def _check_fatal(p) -> None:
    names = ("sigma2", "sigma_r", "sigma4", "sigma_q", "rho2", "rho_r", "rho4", "rho_q", "eps")
    bad = [n for n in names if not (getattr(p, n) > 0)]
    if bad:
        raise ParameterError("coefficients must be positive: " + ", ".join(bad))
    if not (p.r >= 2):
        raise ParameterError(
            f"r = {p.r} is not supported: the model class requires r >= 2 "
            "(shear-thinning laws and 6/5 < r < 11/5 other than r = 2 are excluded)"
        )
    if not (p.q > 1):
        raise ParameterError(f"q = {p.q} must exceed 1")


# ---------------------------------------------------------------- tensors

def sym_norm2(A):
    """Squared Frobenius norm of symmetric tensors stored as (a11, a22, a12)."""
    A = np.asarray(A, dtype=float)
    return A[..., 0] ** 2 + A[..., 1] ** 2 + 2.0 * A[..., 2] ** 2


def sym_dot(A, B):
    """Double-dot product of two symmetric tensors in triple storage."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    return A[..., 0] * B[..., 0] + A[..., 1] * B[..., 1] + 2.0 * A[..., 2] * B[..., 2]


# ------------------------------------------------------ scalar profiles
#
# Both laws have the form F(X) = mu(|X|^2) X with a potential Phi(|X|^2)
# satisfying Phi'(x) = mu(x) / 2, so that d Phi(|X|^2) / dX = F(X).

def _secant(x, coeffs, eps, stabilized):
    r, q, a2, ar, a4, aq = coeffs
    x = np.asarray(x, dtype=float)
    if r == 2.0:
        mu = np.full_like(x, 2.0 * a2)
    else:
        c = ar ** (2.0 / (r - 2.0))
        mu = 2.0 * (a2 + c * x) ** ((r - 2.0) / 2.0)
    if stabilized:
        # at x = 0 the q-term of mu may blow up for q < 2 but mu X -> 0
        with np.errstate(divide="ignore", invalid="ignore"):
            xq = np.where(x > 0, np.abs(x) ** ((q - 2.0) / 2.0), 0.0)
        mu = mu + eps * a4 * x + eps * aq * xq
    return mu


def _potential(x, coeffs, eps, stabilized):
    r, q, a2, ar, a4, aq = coeffs
    x = np.asarray(x, dtype=float)
    if r == 2.0:
        phi = a2 * x
    else:
        c = ar ** (2.0 / (r - 2.0))
        half_r = r / 2.0
        # 2[(a2 + c x)^{r/2} - a2^{r/2}] / (r c) without cancellation
        phi = 2.0 * a2 ** half_r * np.expm1(half_r * np.log1p(c * x / a2)) / (r * c)
    if stabilized:
        phi = phi + eps * a4 * x * x / 4.0 + eps * aq * np.abs(x) ** (q / 2.0) / q
    return phi


def _secant_derivative(x, coeffs, eps, stabilized):
    """d mu / d x, used for tangent operators."""
    r, q, a2, ar, a4, aq = coeffs
    x = np.asarray(x, dtype=float)
    if r == 2.0:
        dmu = np.zeros_like(x)
    else:
        c = ar ** (2.0 / (r - 2.0))
        dmu = (r - 2.0) * c * (a2 + c * x) ** ((r - 4.0) / 2.0)
    if stabilized:
        dmu = dmu + eps * a4
        if q != 2.0:
            with np.errstate(divide="ignore", invalid="ignore"):
                dmu = dmu + np.where(
                    x > 0, eps * aq * (q - 2.0) / 2.0 * np.abs(x) ** ((q - 4.0) / 2.0), 0.0
                )
    return dmu


# ------------------------------------------------------------ public API

def secant_bulk(norm2, p: ConstitutiveParams, stabilized: bool = True):
    """Scalar ``mu`` with ``S_eps(A) = mu(|A|^2) A``."""
    return _secant(norm2, p.bulk_coeffs(), p.eps, stabilized)


def secant_boundary(norm2, p: ConstitutiveParams, stabilized: bool = True):
    """Scalar ``mu`` with ``s_eps(u) = mu(|u|^2) u``."""
    return _secant(norm2, p.boundary_coeffs(), p.eps, stabilized)


def stress_bulk(A, p: ConstitutiveParams, stabilized: bool = True):
    """Bulk stress ``S(A)`` or ``S_eps(A)`` for tensors in triple storage.

    Parameters
    ----------
    A : array_like, shape (..., 3)
        Symmetric strain rates ``(a11, a22, a12)``.
    p : ConstitutiveParams
    stabilized : bool
        Add the ``eps``-weighted quartic and ``q`` growth terms.

    Returns
    -------
    ndarray, shape (..., 3)
    """
    A = np.asarray(A, dtype=float)
    mu = secant_bulk(sym_norm2(A), p, stabilized)
    return mu[..., None] * A


def stress_boundary(u, p: ConstitutiveParams, stabilized: bool = True):
    """Wall friction ``s(u)`` or ``s_eps(u)`` for vectors of shape (..., d)."""
    u = np.asarray(u, dtype=float)
    mu = secant_boundary(np.sum(u * u, axis=-1), p, stabilized)
    return mu[..., None] * u


def potential_bulk(A, p: ConstitutiveParams, stabilized: bool = True):
    r"""Dissipation potential :math:`\int_0^1 S_\varepsilon(\lambda A)\cdot A\,d\lambda`."""
    return _potential(sym_norm2(A), p.bulk_coeffs(), p.eps, stabilized)


def potential_boundary(u, p: ConstitutiveParams, stabilized: bool = True):
    r"""Wall potential :math:`\int_0^1 s_\varepsilon(\lambda u)\cdot u\,d\lambda`."""
    u = np.asarray(u, dtype=float)
    return _potential(np.sum(u * u, axis=-1), p.boundary_coeffs(), p.eps, stabilized)


def secant_bulk_derivative(norm2, p: ConstitutiveParams, stabilized: bool = True):
    return _secant_derivative(norm2, p.bulk_coeffs(), p.eps, stabilized)


def secant_boundary_derivative(norm2, p: ConstitutiveParams, stabilized: bool = True):
    return _secant_derivative(norm2, p.boundary_coeffs(), p.eps, stabilized)


# ------------------------------------------------------------ validation

@dataclass
class ValidationReport:
    """Outcome of :func:`validate_params`.

    ``in_window`` refers to the exponent window 11/5 <= r < 4, 4 < q <= 3r'.
    ``flags`` holds short codes with human-readable messages; none of them
    is fatal.
    """

    in_window: bool
    flags: dict = field(default_factory=dict)

    def __str__(self) -> str:
        lines = [f"exponent window: {'OK' if self.in_window else 'outside'}"]
        lines += [f"{k}: {v}" for k, v in self.flags.items()]
        return "\n".join(lines)


def _lower_bound_ok(r, a2, ar):
    if r == 2.0:
        return ar <= a2
    alpha = (r - 2.0) / 2.0
    if alpha <= 1.0:
        return a2 <= 1.0
    return 2.0 * a2 ** alpha >= a2


def validate_params(p, korn_c4: Optional[float] = None) -> ValidationReport:
    """Check a parameter set against the structural hypotheses.

    Parameters
    ----------
    p : ConstitutiveParams or mapping
        A mapping is converted first; fatal problems (non-positive
        coefficients, ``r < 2``, ``q <= 1``) raise :class:`ParameterError`.
    korn_c4 : float, optional
        Lower estimate of the Korn constant for exponent 4. When given, the
        stabilization condition ``min(sigma4, rho4) > c4 / 4`` is reported as
        "not contradicted" or "contradicted"; otherwise it is reported as
        requiring the estimate.

    Returns
    -------
    ValidationReport
    """
    if not isinstance(p, ConstitutiveParams):
        p = ConstitutiveParams(**dict(p))
    r, q = p.r, p.q
    flags = {}
    r_dual = r / (r - 1.0)
    in_window = (11.0 / 5.0 <= r < 4.0) and (4.0 < q <= 3.0 * r_dual)
    if r == 2.0:
        flags["linear_case"] = "r = 2: linear (Newtonian) stress, classical case is covered"
        in_window = 4.0 < q <= 3.0 * r_dual
    elif r < 11.0 / 5.0:
        flags["r_below_window"] = f"r = {r} < 11/5: not covered by the existence theory"
    elif r >= 4.0:
        flags["r_subcritical"] = f"r = {r} >= 4: sub-critical regime, outside the window"
    if not (4.0 < q <= 3.0 * r_dual):
        flags["q_outside_window"] = f"q = {q} not in (4, 3r'] = (4, {3.0 * r_dual:.6g}]"
    if not _lower_bound_ok(r, p.sigma2, p.sigma_r):
        flags["bulk_lower_bound"] = "lower bound S(A).A >= s2|A|^2 + sr|A|^r not guaranteed"
    if not _lower_bound_ok(r, p.rho2, p.rho_r):
        flags["wall_lower_bound"] = "lower bound s(u).u >= r2|u|^2 + rr|u|^r not guaranteed"
    m4 = min(p.sigma4, p.rho4)
    if korn_c4 is None:
        flags["stabilization_c4"] = "requires Korn constant estimate"
    elif m4 > korn_c4 / 4.0:
        flags["stabilization_c4"] = (
            f"not contradicted: min(sigma4, rho4) = {m4:.6g} > c4/4 >= {korn_c4 / 4.0:.6g}"
        )
    else:
        flags["stabilization_c4"] = (
            f"contradicted: min(sigma4, rho4) = {m4:.6g} <= {korn_c4 / 4.0:.6g} <= c4/4"
        )
    return ValidationReport(in_window=in_window, flags=flags)
