"""Oscillatory Whittle-Matern random fields as sparse GMRF precisions.

The fields live on the plane, the circle, or the time line, with spectra

    f(omega) ~ sigma^2 / (kappa^4 + 2 phi kappa^2 |omega|^2 + |omega|^4),

covering underdamped (phi < 1, oscillating covariance), critically damped
(phi = 1, classic Matern with shape 2) and overdamped (phi > 1) regimes.
On each mesh the field reduces to a Gaussian weight vector with precision
tau^2 (kappa^4 C + 2 phi kappa^2 G + G C^{-1} G).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.integrate
import scipy.sparse as sp
import scipy.special

from .errors import NoClosedFormError, ValidationError
from .linalg import SparseFactor
from .meshes import MassStiffness

DOMAINS = ("plane", "circle", "line")

# Range reparameterization: rho = sqrt(8 nu) / kappa with nu = alpha - d/2,
# alpha = 2 throughout: nu = 1 on the plane, 3/2 on the circle and line.
_RANGE_FACTOR = {"plane": np.sqrt(8.0), "circle": np.sqrt(12.0), "line": np.sqrt(12.0)}


def _check_domain(domain: str) -> None:
    if domain not in DOMAINS:
        raise ValidationError(f"unknown domain {domain!r}; expected one of {DOMAINS}")


def kappa_from_range(domain: str, rho: float) -> float:
    _check_domain(domain)
    if rho <= 0:
        raise ValidationError("range rho must be positive")
    return _RANGE_FACTOR[domain] / rho


@dataclass(frozen=True)
class SpdeParams:
    """Hyperparameters of one latent field.

    `rho` is the correlation range, `s` the nominal marginal standard
    deviation, `phi` the damping coefficient (> -1).  `kappa` is derived
    from `rho`; `tau` is the precision scale fixed by normalize_tau so the
    continuum field has standard deviation `s`.  `sigma` is the internal
    spectral amplitude and stays at 1.
    """

    domain: str
    rho: float
    s: float
    phi: float
    tau: float | None = None
    sigma: float = 1.0
    alpha: int = 2

    def __post_init__(self):
        _check_domain(self.domain)
        if self.rho <= 0 or self.s <= 0 or self.sigma <= 0:
            raise ValidationError("rho, s and sigma must be positive")
        if self.phi <= -1:
            raise ValidationError("damping phi must exceed -1")

    @property
    def kappa(self) -> float:
        return kappa_from_range(self.domain, self.rho)


def normalize_tau(params: SpdeParams) -> SpdeParams:
    """Fix tau so the discretized field has nominal marginal std `s`.

    With sigma = 1 the continuum field has variance v = marginal_variance;
    scaling the weights by 1/tau with tau = sqrt(v)/s yields std s.
    """
    v = marginal_variance(params.domain, params.kappa, params.phi, 1.0)
    return replace(params, tau=float(np.sqrt(v) / params.s), sigma=1.0)


@dataclass
class PrecisionMatrix:
    """Sparse SPD precision with a cached Cholesky factorization."""

    matrix: sp.csc_matrix
    domain: str

    def __post_init__(self):
        self._factor: SparseFactor | None = None

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def factor(self) -> SparseFactor:
        if self._factor is None:
            self._factor = SparseFactor(self.matrix)
        return self._factor


def assemble_precision(ms: MassStiffness, params: SpdeParams) -> PrecisionMatrix:
    """tau^2 (kappa^4 C + 2 phi kappa^2 G + G C^{-1} G) on the mesh.

    SPD for phi > -1: the form equals (kappa^2 C + G) C^{-1} (kappa^2 C + G)
    + 2 (phi - 1) kappa^2 G, and for phi in (-1, 1) also equals
    (kappa^2 C - G) C^{-1} (kappa^2 C - G) + 2 (phi + 1) kappa^2 G.
    """
    if params.tau is None:
        params = normalize_tau(params)
    k2 = params.kappa**2
    c = sp.diags(ms.mass_diag)
    cinv = sp.diags(1.0 / ms.mass_diag)
    g = ms.stiffness
    base = k2**2 * c + 2.0 * params.phi * k2 * g + g @ cinv @ g
    q = (params.tau**2 * base).tocsc()
    q.sum_duplicates()
    return PrecisionMatrix(q, params.domain)


def kron_precision(qa: PrecisionMatrix, qb: PrecisionMatrix) -> PrecisionMatrix:
    """Kronecker-product precision qa (x) qb.

    Index convention: the flattened weight vector runs row-major over
    (qa index, qb index), i.e. entry r * p_b + c couples basis r of the
    first factor with basis c of the second.
    """
    q = sp.kron(qa.matrix, qb.matrix, format="csc")
    return PrecisionMatrix(q, f"{qa.domain}*{qb.domain}")


def _check_spectral_args(kappa, phi, sigma):
    if kappa <= 0 or sigma <= 0:
        raise ValidationError("kappa and sigma must be positive")
    if phi <= -1:
        raise ValidationError("damping phi must exceed -1")


def spectral_density(domain: str, omega, kappa: float, phi: float, sigma: float):
    """Power spectral density (plane, line) or spectral mass (circle)."""
    _check_domain(domain)
    _check_spectral_args(kappa, phi, sigma)
    w = np.asarray(omega, dtype=np.float64)
    if domain == "circle" and np.any(np.abs(w - np.round(w)) > 1e-9):
        raise ValidationError("circle spectrum is defined on integer frequencies")
    w2 = w * w
    quartic = kappa**4 + 2.0 * phi * kappa**2 * w2 + w2 * w2
    norm = (2.0 * np.pi) ** 2 if domain == "plane" else 2.0 * np.pi
    out = sigma**2 / (norm * quartic)
    return float(out) if np.isscalar(omega) else out


def _coth_over(m):
    """coth(pi m)/m for complex m with Re(m) > 0, safe for large |Re|."""
    if np.real(m) * np.pi > 30.0:
        return 1.0 / m
    return 1.0 / (np.tanh(np.pi * m) * m)


def _circle_variance(kappa: float, phi: float) -> float:
    pk = np.pi * kappa
    if abs(phi - 1.0) < 1e-12:
        if pk > 300.0:
            return 1.0 / (4.0 * kappa**3)
        coth = 1.0 / np.tanh(pk)
        return (coth + pk / np.sinh(pk) ** 2) / (4.0 * kappa**3)
    sq = np.sqrt(complex(phi * phi - 1.0))
    m_plus = kappa * np.sqrt(phi - sq)
    m_minus = kappa * np.sqrt(phi + sq)
    val = (_coth_over(m_plus) - _coth_over(m_minus)) / (4.0 * kappa**2 * sq)
    return float(np.real(val))


def _plane_variance(kappa: float, phi: float) -> float:
    base = 1.0 / (4.0 * np.pi * kappa**2)
    d = phi - 1.0
    if abs(d) < 1e-6:
        return base * (1.0 - d / 3.0 + 2.0 * d * d / 15.0)
    if phi < 1.0:
        return base * np.arccos(phi) / np.sqrt(1.0 - phi * phi)
    # analytic continuation of arccos(phi)/sqrt(1 - phi^2) past phi = 1
    return base * np.arccosh(phi) / np.sqrt(phi * phi - 1.0)


def marginal_variance(domain: str, kappa: float, phi: float, sigma: float) -> float:
    """Closed-form stationary variance of the continuum field."""
    _check_domain(domain)
    _check_spectral_args(kappa, phi, sigma)
    if domain == "plane":
        return sigma**2 * _plane_variance(kappa, phi)
    if domain == "line":
        return sigma**2 / (4.0 * kappa**3) * np.sqrt(2.0 / (1.0 + phi))
    return sigma**2 * _circle_variance(kappa, phi)


def marginal_variance_oracle(domain: str, kappa: float, phi: float, sigma: float) -> float:
    """Independent variance via spectral quadrature (plane, line) or summation.

    Plane: radial integral sigma^2/(4 pi kappa^2) int_0^inf dv/(v^2+2 phi v+1),
    folded onto [0, 1] by the v <-> 1/v symmetry.  Line: same fold of the
    frequency integral.  Circle: direct summation plus an analytic tail.
    """
    _check_domain(domain)
    _check_spectral_args(kappa, phi, sigma)
    if domain == "plane":
        val, _ = scipy.integrate.quad(
            lambda v: 2.0 / (v * v + 2.0 * phi * v + 1.0), 0.0, 1.0,
            epsabs=1e-14, epsrel=1e-12, limit=200,
        )
        return sigma**2 / (4.0 * np.pi * kappa**2) * val
    if domain == "line":
        val, _ = scipy.integrate.quad(
            lambda v: (1.0 + v * v) / (v**4 + 2.0 * phi * v * v + 1.0), 0.0, 1.0,
            epsabs=1e-14, epsrel=1e-12, limit=200,
        )
        return sigma**2 / (np.pi * kappa**3) * val
    n = int(max(2000, np.ceil(500 * kappa)))
    w = np.arange(1, n + 1, dtype=np.float64)
    w2 = w * w
    terms = 1.0 / (kappa**4 + 2.0 * phi * kappa**2 * w2 + w2 * w2)
    total = 1.0 / kappa**4 + 2.0 * terms.sum()
    tail = 2.0 * (1.0 / (3.0 * n**3) + 1.0 / (2.0 * n**4) - 2.0 * phi * kappa**2 / (5.0 * n**5))
    return sigma**2 / (2.0 * np.pi) * (total + tail)


def covariance(domain: str, lag, kappa: float, phi: float, sigma: float) -> float:
    """Closed-form covariance at a given lag.

    Available for the plane and line with phi in (-1, 1] and for the circle
    with phi = 1 only; other combinations raise NoClosedFormError.
    """
    _check_domain(domain)
    _check_spectral_args(kappa, phi, sigma)
    if domain == "circle":
        if abs(phi - 1.0) > 1e-12:
            raise NoClosedFormError("circle covariance has a closed form only at phi = 1")
        th = float(np.mod(abs(lag), 2.0 * np.pi))
        pk = np.pi * kappa
        pref = sigma**2 / (4.0 * np.sinh(pk) ** 2 * kappa**2)
        return pref * (
            0.5 * th * np.cosh((2.0 * np.pi - th) * kappa)
            + (np.pi - 0.5 * th) * np.cosh(th * kappa)
            + np.cosh((np.pi - th) * kappa) * np.sinh(pk) / kappa
        )
    if phi > 1.0 + 1e-12:
        raise NoClosedFormError(f"{domain} covariance closed form requires phi <= 1")
    d = abs(float(np.linalg.norm(lag)) if np.ndim(lag) else float(lag))
    if d == 0.0:
        return marginal_variance(domain, kappa, phi, sigma)
    near_critical = abs(phi - 1.0) < 1e-6
    if domain == "line":
        if near_critical:
            return sigma**2 * (1.0 + kappa * d) * np.exp(-kappa * d) / (4.0 * kappa**3)
        gamma = np.arccos(phi) / np.pi
        a = np.cos(np.pi * gamma / 2.0)
        b = np.sin(np.pi * gamma / 2.0)
        return (
            sigma**2
            * np.exp(-kappa * a * d)
            * np.sin(np.pi * gamma / 2.0 + kappa * b * d)
            / (2.0 * kappa**3 * np.sin(np.pi * gamma))
        )
    if near_critical:
        x = kappa * d
        return sigma**2 / (4.0 * np.pi * kappa**2) * x * scipy.special.k1(x)
    import mpmath

    gamma = np.arccos(phi) / np.pi
    z = kappa * d * mpmath.exp(1j * np.pi * gamma / 2.0)
    k0_im = float(mpmath.im(mpmath.besselk(0, z)))
    return -sigma**2 * k0_im / (2.0 * np.pi * np.sin(np.pi * gamma) * kappa**2)


def sample_gmrf(q: PrecisionMatrix, seed, size: int | None = None) -> np.ndarray:
    """Draws from N(0, Q^{-1}) by back-substituting standard normals.

    `seed` may be an int or a numpy Generator.  Returns a (p,) vector, or a
    (p, size) matrix when `size` is given.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = 1 if size is None else int(size)
    z = rng.standard_normal((q.size, k))
    x = q.factor().backsolve_white(z)
    return x[:, 0] if size is None else x
