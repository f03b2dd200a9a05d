"""Latent Gaussian point-process models: likelihoods, MAP fits, Laplace evidence.

The four model kinds share one latent layout [beta, w_main, w_time?]:

    m0    spatial field only
    m0t   spatial field, temporally modulated
    mxt   space-direction interaction field
    mxtt  interaction field, temporally modulated

All likelihoods are jointly log-concave in the latent vector (each quadrature
term is -exp(affine)), so the Newton solver uses the exact Hessian.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.optimize
import scipy.sparse as sp
import scipy.special
import scipy.stats

from .errors import ConvergenceError, ValidationError
from .linalg import SparseFactor
from .meshes import CircularMesh, MassStiffness, TemporalMesh, TriMesh2D, mass_stiffness
from .spde import PrecisionMatrix, SpdeParams, assemble_precision, kron_precision, normalize_tau
from .trajectory import MODEL_KINDS, IntegrationWeights

TEMPORAL_KINDS = ("m0t", "mxtt")
INTERACTION_KINDS = ("mxt", "mxtt")


@dataclass(frozen=True)
class PriorConfig:
    """Hyperprior constants.

    The spatial range gets a log-normal prior with median `mu_omega` (cm) and
    log-scale sd `sigma_omega`; directional/temporal ranges and all field
    standard deviations get exponential priors; the spatial damping gets a
    location-scale Beta on (-1, 1); directional and temporal damping are fixed
    at 1.  The intercept beta gets a Gaussian prior.
    """

    mu_omega: float = 20.0
    sigma_omega: float = 0.4
    a_omega: float = 2.0
    b_omega: float = 20.0
    nu_omega: float = 0.5
    nu_theta: float = 1.0
    nu_time: float = 1.0 / 3.0
    eta_theta: float = 1.0 / (2.0 * np.pi)
    eta_time: float = 1.0 / 100.0
    beta_mean: float = 0.0
    beta_std: float = 10.0

    def __post_init__(self):
        for name in ("sigma_omega", "a_omega", "b_omega", "nu_omega", "nu_theta",
                     "nu_time", "eta_theta", "eta_time", "beta_std", "mu_omega"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"prior constant {name} must be positive")


@dataclass(frozen=True)
class Hyperparameters:
    """Per-block field hyperparameters; blocks unused by a kind are None."""

    spatial: SpdeParams
    directional: SpdeParams | None = None
    temporal: SpdeParams | None = None

    def blocks(self):
        out = {"spatial": self.spatial}
        if self.directional is not None:
            out["directional"] = self.directional
        if self.temporal is not None:
            out["temporal"] = self.temporal
        return out


@dataclass
class LatentState:
    """Intercept plus active weight blocks."""

    beta: float
    w_main: np.ndarray
    w_time: np.ndarray | None = None

    def pack(self) -> np.ndarray:
        parts = [np.atleast_1d(self.beta), self.w_main]
        if self.w_time is not None:
            parts.append(self.w_time)
        return np.concatenate(parts)

    @staticmethod
    def unpack(x: np.ndarray, p_main: int, p_time: int) -> "LatentState":
        w_time = x[1 + p_main:1 + p_main + p_time] if p_time else None
        return LatentState(float(x[0]), x[1:1 + p_main], w_time)


class ModelSpec:
    """A model kind bound to its meshes and prior configuration."""

    def __init__(self, kind: str, tri: TriMesh2D, circ: CircularMesh | None = None,
                 temporal: TemporalMesh | None = None, prior: PriorConfig | None = None):
        if kind not in MODEL_KINDS:
            raise ValidationError(f"unknown model kind {kind!r}")
        if kind in INTERACTION_KINDS and circ is None:
            raise ValidationError(f"{kind} requires a circular mesh")
        if kind in TEMPORAL_KINDS and temporal is None:
            raise ValidationError(f"{kind} requires a temporal mesh")
        self.kind = kind
        self.tri = tri
        self.circ = circ
        self.temporal = temporal
        self.prior = prior or PriorConfig()
        self._ms: dict[str, MassStiffness] = {}

    @property
    def p_main(self) -> int:
        p = self.tri.vertex_count
        if self.kind in INTERACTION_KINDS:
            p *= self.circ.knot_count
        return p

    @property
    def p_time(self) -> int:
        return self.temporal.knot_count if self.kind in TEMPORAL_KINDS else 0

    @property
    def latent_dim(self) -> int:
        return 1 + self.p_main + self.p_time

    def mass_stiffness(self, which: str) -> MassStiffness:
        if which not in self._ms:
            mesh = {"tri": self.tri, "circ": self.circ, "temporal": self.temporal}[which]
            self._ms[which] = mass_stiffness(mesh)
        return self._ms[which]

    def main_precision(self, hyper: Hyperparameters) -> PrecisionMatrix:
        q_omega = assemble_precision(self.mass_stiffness("tri"), hyper.spatial)
        if self.kind not in INTERACTION_KINDS:
            return q_omega
        q_theta = assemble_precision(self.mass_stiffness("circ"), hyper.directional)
        # flat index r * p_omega + c: direction-major, so directional factor first
        return kron_precision(q_theta, q_omega)

    def time_precision(self, hyper: Hyperparameters) -> PrecisionMatrix | None:
        if self.kind not in TEMPORAL_KINDS:
            return None
        return assemble_precision(self.mass_stiffness("temporal"), hyper.temporal)

    def default_hyper(self) -> Hyperparameters:
        """Prior medians, the deterministic optimizer start point."""
        pc = self.prior
        phi_med = -1.0 + 2.0 * float(scipy.stats.beta.ppf(0.5, pc.a_omega, pc.b_omega))
        ln2 = np.log(2.0)
        spatial = normalize_tau(SpdeParams("plane", pc.mu_omega, ln2 / pc.nu_omega, phi_med))
        directional = None
        temporal = None
        if self.kind in INTERACTION_KINDS:
            directional = normalize_tau(
                SpdeParams("circle", ln2 / pc.eta_theta, ln2 / pc.nu_theta, 1.0)
            )
        if self.kind in TEMPORAL_KINDS:
            temporal = normalize_tau(
                SpdeParams("line", ln2 / pc.eta_time, ln2 / pc.nu_time, 1.0)
            )
        return Hyperparameters(spatial, directional, temporal)


class PointProcessLikelihood:
    """Approximate log-likelihood of one model kind, with exact derivatives.

    Non-temporal kinds:  -e^beta b' exp(w) + n beta + 1' A w.
    Temporal kinds:      -e^beta exp(w_T)' B exp(w) + n beta + observation terms.
    """

    def __init__(self, iw: IntegrationWeights):
        self.iw = iw
        self.temporal = iw.kind in TEMPORAL_KINDS
        self.n = iw.n_spikes
        self.p_main = iw.p_main
        self.p_time = iw.p_time
        self.a_main = (
            np.asarray(iw.a_obs["main"].sum(axis=0)).ravel()
            if "main" in iw.a_obs else np.zeros(iw.p_main)
        )
        if self.temporal:
            self.a_time = (
                np.asarray(iw.a_obs["time"].sum(axis=0)).ravel()
                if "time" in iw.a_obs else np.zeros(iw.p_time)
            )
            self.B = iw.B.tocsr()
            self.Bt = self.B.T.tocsr()
        else:
            self.b = iw.b

    @property
    def dim(self) -> int:
        return 1 + self.p_main + self.p_time if self.temporal else 1 + self.p_main

    def _split(self, x):
        beta = x[0]
        w = x[1:1 + self.p_main]
        wt = x[1 + self.p_main:] if self.temporal else None
        return beta, w, wt

    def _exps(self, x):
        beta, w, wt = self._split(x)
        if np.max(w, initial=-np.inf) > 700 or beta > 700 or (
            self.temporal and np.max(wt, initial=-np.inf) > 700
        ):
            return beta, None, None
        return beta, np.exp(w), (np.exp(wt) if self.temporal else None)

    def value(self, x) -> float:
        beta, ew, et = self._exps(x)
        if ew is None:
            return -np.inf
        _, w, wt = self._split(x)
        obs = self.n * beta + self.a_main @ w
        if self.temporal:
            obs += self.a_time @ wt
            quad = et @ (self.B @ ew)
        else:
            quad = self.b @ ew
        return float(-np.exp(beta) * quad + obs)

    def grad(self, x) -> np.ndarray:
        beta, ew, et = self._exps(x)
        q = np.exp(beta)
        if self.temporal:
            u = self.Bt @ et
            v = self.B @ ew
            s = v @ et
            return np.concatenate([
                [-q * s + self.n],
                -q * u * ew + self.a_main,
                -q * v * et + self.a_time,
            ])
        g = self.b * ew
        return np.concatenate([[-q * g.sum() + self.n], -q * g + self.a_main])

    def hessian(self, x) -> sp.csc_matrix:
        """Exact (negative semidefinite) Hessian of the log-likelihood."""
        beta, ew, et = self._exps(x)
        q = np.exp(beta)
        if not self.temporal:
            g = q * self.b * ew
            top = np.concatenate([[g.sum()], g])
            h = sp.bmat(
                [
                    [sp.csc_matrix(([top[0]], ([0], [0])), shape=(1, 1)),
                     sp.csc_matrix(g[None, :])],
                    [sp.csc_matrix(g[:, None]), sp.diags(g)],
                ],
                format="csc",
            )
            return -h
        u = q * (self.Bt @ et) * ew
        v = q * (self.B @ ew) * et
        cross = self.B.multiply(et[:, None]).multiply(ew[None, :]) * q
        h = sp.bmat(
            [
                [sp.csc_matrix(([u.sum()], ([0], [0])), shape=(1, 1)),
                 sp.csc_matrix(u[None, :]), sp.csc_matrix(v[None, :])],
                [sp.csc_matrix(u[:, None]), sp.diags(u), cross.T],
                [sp.csc_matrix(v[:, None]), cross, sp.diags(v)],
            ],
            format="csc",
        )
        return -h


def log_likelihood(latent: LatentState, iw: IntegrationWeights) -> float:
    """Approximate log-likelihood at a latent state."""
    lik = PointProcessLikelihood(iw)
    x = latent.pack()
    if x.size != lik.dim:
        raise ValidationError(
            f"latent dimension {x.size} does not match weights for kind {iw.kind}"
        )
    return lik.value(x)


def _prior_blocks(spec: ModelSpec, hyper: Hyperparameters):
    """Full-latent prior precision, mean, and its log-determinant."""
    q_main = spec.main_precision(hyper)
    q_time = spec.time_precision(hyper)
    beta_prec = 1.0 / spec.prior.beta_std**2
    blocks = [sp.csc_matrix(([beta_prec], ([0], [0])), shape=(1, 1)), q_main.matrix]
    logdet = float(np.log(beta_prec))
    if spec.kind in INTERACTION_KINDS:
        # kron factors: logdet(Qa x Qb) = p_b logdet Qa + p_a logdet Qb
        q_omega = assemble_precision(spec.mass_stiffness("tri"), hyper.spatial)
        q_theta = assemble_precision(spec.mass_stiffness("circ"), hyper.directional)
        logdet += (
            q_omega.size * q_theta.factor().logdet()
            + q_theta.size * q_omega.factor().logdet()
        )
    else:
        logdet += q_main.factor().logdet()
    if q_time is not None:
        blocks.append(q_time.matrix)
        logdet += q_time.factor().logdet()
    q_full = sp.block_diag(blocks, format="csc")
    mean = np.zeros(q_full.shape[0])
    mean[0] = spec.prior.beta_mean
    return q_full, mean, logdet


@dataclass
class PosteriorFit:
    """MAP latent state with the posterior precision factorization."""

    spec: ModelSpec
    hyper: Hyperparameters
    mode: LatentState
    factor: SparseFactor
    log_posterior: float
    log_likelihood_at_mode: float
    iterations: int
    grad_norm: float
    laplace_log_marginal: float | None = None

    def pack_mode(self) -> np.ndarray:
        return self.mode.pack()


def newton_map(lik, q_full: sp.csc_matrix, prior_mean: np.ndarray,
               tol: float = 1e-6, max_iter: int = 100, x0=None):
    """Maximize lik(x) - (x-mu)' Q (x-mu)/2 by damped Newton with backtracking.

    Returns (x, factor_of_negative_hessian, objective, iterations, grad_norm).
    Deterministic from the zero start.  Raises ConvergenceError when the
    gradient tolerance is not reached within max_iter iterations.
    """
    x = np.zeros(q_full.shape[0]) if x0 is None else np.array(x0, dtype=np.float64)

    def objective(z):
        d = z - prior_mean
        return lik.value(z) - 0.5 * float(d @ (q_full @ d))

    f = objective(x)
    factor = None
    gnorm = np.inf
    for it in range(1, max_iter + 1):
        g = lik.grad(x) - q_full @ (x - prior_mean)
        gnorm = float(np.abs(g).max())
        if gnorm < tol * max(1.0, abs(f)):
            if factor is None:
                factor = SparseFactor((q_full - lik.hessian(x)).tocsc())
            return x, factor, f, it - 1, gnorm
        h = (q_full - lik.hessian(x)).tocsc()
        boost = 0.0
        while True:
            try:
                factor = SparseFactor(
                    h if boost == 0.0 else (h + boost * sp.eye(h.shape[0], format="csc")).tocsc()
                )
                break
            except np.linalg.LinAlgError:
                boost = max(1e-8, 10.0 * boost)
                if boost > 1e8:
                    raise ConvergenceError("posterior Hessian could not be stabilized")
        step = factor.solve(g)
        t = 1.0
        gd = float(g @ step)
        while t > 1e-12:
            f_new = objective(x + t * step)
            if f_new >= f + 1e-4 * t * gd:
                break
            t *= 0.5
        else:
            raise ConvergenceError(f"line search failed at iteration {it}")
        x = x + t * step
        f = f_new
    raise ConvergenceError(
        f"Newton did not converge in {max_iter} iterations (grad norm {gnorm:.3e})"
    )


def grad_hessian(spec: ModelSpec, latent: LatentState, iw: IntegrationWeights,
                 hyper: Hyperparameters):
    """Gradient and sparse Hessian of the log posterior in the latent vector."""
    lik = PointProcessLikelihood(iw)
    q_full, mean, _ = _prior_blocks(spec, hyper)
    x = latent.pack()
    g = lik.grad(x) - q_full @ (x - mean)
    h = (lik.hessian(x) - q_full).tocsc()
    return g, h


def fit_map(spec: ModelSpec, iw: IntegrationWeights, hyper: Hyperparameters,
            tol: float = 1e-6, max_iter: int = 100) -> PosteriorFit:
    """MAP latent state at fixed hyperparameters, from a zero initial state."""
    lik = PointProcessLikelihood(iw)
    if lik.dim != spec.latent_dim:
        raise ValidationError("integration weights do not match the model spec")
    q_full, mean, _ = _prior_blocks(spec, hyper)
    x, factor, f, iters, gnorm = newton_map(lik, q_full, mean, tol=tol, max_iter=max_iter)
    mode = LatentState.unpack(x, spec.p_main, spec.p_time)
    return PosteriorFit(
        spec, hyper, mode, factor, f, lik.value(x), iters, gnorm
    )


def log_prior_density(hyper: Hyperparameters, config: PriorConfig) -> float:
    """Joint log prior of the hyperparameters on the (rho, s, phi) scale.

    Out-of-support values yield -inf; Dirac-fixed damping parameters
    contribute nothing.
    """
    sp_ = hyper.spatial
    if sp_.rho <= 0 or sp_.s <= 0 or not (-1.0 < sp_.phi < 1.0):
        return -np.inf
    total = float(
        scipy.stats.lognorm.logpdf(sp_.rho, s=config.sigma_omega,
                                   scale=config.mu_omega)
        + scipy.stats.expon.logpdf(sp_.s, scale=1.0 / config.nu_omega)
        + scipy.stats.beta.logpdf((sp_.phi + 1.0) / 2.0, config.a_omega, config.b_omega)
        - np.log(2.0)
    )
    if hyper.directional is not None:
        d = hyper.directional
        if d.rho <= 0 or d.s <= 0:
            return -np.inf
        total += float(
            scipy.stats.expon.logpdf(d.rho, scale=1.0 / config.eta_theta)
            + scipy.stats.expon.logpdf(d.s, scale=1.0 / config.nu_theta)
        )
    if hyper.temporal is not None:
        t = hyper.temporal
        if t.rho <= 0 or t.s <= 0:
            return -np.inf
        total += float(
            scipy.stats.expon.logpdf(t.rho, scale=1.0 / config.eta_time)
            + scipy.stats.expon.logpdf(t.s, scale=1.0 / config.nu_time)
        )
    return total


def _log_transform_jacobian(hyper: Hyperparameters) -> float:
    """log |d(rho, s, phi)/d(internal)| for the unconstrained parameterization.

    Internal coordinates are log rho, log s per block and, for the spatial
    damping, the logit of (phi+1)/2.
    """
    sp_ = hyper.spatial
    total = np.log(sp_.rho) + np.log(sp_.s)
    y = (sp_.phi + 1.0) / 2.0
    total += np.log(2.0) + np.log(y) + np.log1p(-y)
    for block in (hyper.directional, hyper.temporal):
        if block is not None:
            total += np.log(block.rho) + np.log(block.s)
    return float(total)


def laplace_evidence(lik, q_full, prior_mean, logdet_prior, log_hyper_prior=0.0,
                     tol: float = 1e-6, max_iter: int = 100):
    """Laplace approximation of the log evidence for one likelihood object.

    Returns (value, mode_x, factor, iterations, grad_norm) with

        value = log_hyper_prior + lik(mode) - quad(mode)
                + logdet_prior/2 - logdet_posterior/2,

    where quad is the prior quadratic form; the 2*pi factors of the prior
    normalization and the Laplace integral cancel exactly.
    """
    x, factor, f, iters, gnorm = newton_map(lik, q_full, prior_mean, tol, max_iter)
    value = log_hyper_prior + f + 0.5 * logdet_prior - 0.5 * factor.logdet()
    return float(value), x, factor, iters, gnorm


def laplace_log_marginal(spec: ModelSpec, iw: IntegrationWeights,
                         hyper: Hyperparameters, tol: float = 1e-6,
                         max_iter: int = 100) -> float:
    """Laplace-approximate log marginal of the hyperparameters.

    Includes the hyperprior density on the (rho, s, phi) scale plus the
    Jacobian of the internal log/logit transforms, so the value is the
    (unnormalized) hyperparameter posterior density in internal coordinates.
    """
    value, _ = _laplace_fit(spec, iw, hyper, tol, max_iter)
    return value


def _laplace_fit(spec: ModelSpec, iw: IntegrationWeights, hyper: Hyperparameters,
                 tol: float = 1e-6, max_iter: int = 100):
    lik = PointProcessLikelihood(iw)
    if lik.dim != spec.latent_dim:
        raise ValidationError("integration weights do not match the model spec")
    lp = log_prior_density(hyper, spec.prior)
    if not np.isfinite(lp):
        raise ValidationError("hyperparameters outside the prior support")
    lp += _log_transform_jacobian(hyper)
    q_full, mean, logdet_prior = _prior_blocks(spec, hyper)
    value, x, factor, iters, gnorm = laplace_evidence(
        lik, q_full, mean, logdet_prior, lp, tol, max_iter
    )
    mode = LatentState.unpack(x, spec.p_main, spec.p_time)
    d = x - mean
    fit = PosteriorFit(
        spec, hyper, mode, factor,
        lik.value(x) - 0.5 * float(d @ (q_full @ d)),
        lik.value(x), iters, gnorm, laplace_log_marginal=value,
    )
    return value, fit


@dataclass(frozen=True)
class SearchConfig:
    """Hyperparameter search settings (Nelder-Mead over internal coordinates)."""

    seed: int = 0
    restarts: int = 3
    max_evals: int = 200
    jitter: float = 0.3
    xatol: float = 2e-3
    fatol: float = 2e-3


def _hyper_to_internal(spec: ModelSpec, hyper: Hyperparameters) -> np.ndarray:
    z = [np.log(hyper.spatial.rho), np.log(hyper.spatial.s),
         scipy.special.logit((hyper.spatial.phi + 1.0) / 2.0)]
    if spec.kind in INTERACTION_KINDS:
        z += [np.log(hyper.directional.rho), np.log(hyper.directional.s)]
    if spec.kind in TEMPORAL_KINDS:
        z += [np.log(hyper.temporal.rho), np.log(hyper.temporal.s)]
    return np.asarray(z)


def _internal_to_hyper(spec: ModelSpec, z: np.ndarray) -> Hyperparameters:
    phi = -1.0 + 2.0 * scipy.special.expit(z[2])
    spatial = normalize_tau(SpdeParams("plane", np.exp(z[0]), np.exp(z[1]), phi))
    directional = None
    temporal = None
    k = 3
    if spec.kind in INTERACTION_KINDS:
        directional = normalize_tau(SpdeParams("circle", np.exp(z[k]), np.exp(z[k + 1]), 1.0))
        k += 2
    if spec.kind in TEMPORAL_KINDS:
        temporal = normalize_tau(SpdeParams("line", np.exp(z[k]), np.exp(z[k + 1]), 1.0))
    return Hyperparameters(spatial, directional, temporal)


def optimize_hyper(spec: ModelSpec, iw: IntegrationWeights,
                   search: SearchConfig | None = None,
                   tol: float = 1e-6, max_iter: int = 100) -> PosteriorFit:
    """Maximize the Laplace log marginal over the free hyperparameters.

    Nelder-Mead on (log rho, log s, logit-damping) coordinates, started at
    the prior medians with seeded jittered restarts; Dirac-fixed damping
    parameters are never free coordinates.
    """
    search = search or SearchConfig()
    z0 = _hyper_to_internal(spec, spec.default_hyper())
    rng = np.random.default_rng(search.seed)
    starts = [z0]
    for _ in range(max(0, search.restarts - 1)):
        starts.append(z0 + search.jitter * rng.standard_normal(z0.size))

    cache: dict[bytes, float] = {}

    def negobj(z):
        key = np.asarray(z).tobytes()
        if key in cache:
            return cache[key]
        try:
            val = -_laplace_fit(spec, iw, _internal_to_hyper(spec, z), tol, max_iter)[0]
        except (np.linalg.LinAlgError, ConvergenceError, ValidationError):
            val = 1e12
        cache[key] = val
        return val

    best_z = None
    best_val = np.inf
    for s in starts:
        res = scipy.optimize.minimize(
            negobj, s, method="Nelder-Mead",
            options={
                "maxfev": search.max_evals, "xatol": search.xatol,
                "fatol": search.fatol, "disp": False,
            },
        )
        if res.fun < best_val:
            best_val = res.fun
            best_z = res.x
    if best_z is None or not np.isfinite(best_val):
        raise ConvergenceError("hyperparameter search failed at every start point")
    # the optimizer never worsens its own start
    start_val = negobj(starts[0])
    if best_val > start_val:
        best_z = starts[0]
    _, fit = _laplace_fit(spec, iw, _internal_to_hyper(spec, best_z), tol, max_iter)
    return fit


def sample_posterior(fit: PosteriorFit, k: int, seed) -> np.ndarray:
    """K Gaussian draws (latent_dim, K) around the mode; deterministic in seed."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z = rng.standard_normal((fit.factor.shape[0], k))
    return fit.pack_mode()[:, None] + fit.factor.backsolve_white(z)
