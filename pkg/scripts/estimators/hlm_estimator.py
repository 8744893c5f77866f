"""
Two-Level Mixed Model Estimator

Fits y_ij = x_ijᵀγ + z_ijᵀu_j + r_ij with u_j ~ N(0, tau) and r_ij ~ N(0, sigma2):
- random intercept, optional random slopes on level-1 terms
- level-2 predictors of the intercept only (no cross-level interactions)
- REML (default) or ML, fixed effects profiled out by generalized least squares

Optimization runs EM on the variance components, then BFGS on the Cholesky
factor of the relative covariance tau/sigma2, then a Newton polish on the
profile gradient. Boundary solutions (zero variances) are allowed and flagged.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg, optimize, stats

from common.errors import (ConvergenceError, ModelSpecError, ReliabilityUndefinedError,
                           SingularDesignError, SpecDataMismatchError, Level2VariationError,
                           TestDegreesOfFreedomError)
from parsers.csv_processor import (Dataset, DeletionReport, build_group_index,
                                   grand_mean_center, listwise_delete)

logger = logging.getLogger(__name__)

METHODS = ('REML', 'ML')
CENTERINGS = ('grand', 'none')
DF_CONVENTIONS = ('hlm', 'residual')
INTERCEPT = 'intercept'


# ---------------------------------------------------------------------------
# Model specification and results
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Level1Term:
    name: str
    centering: str = 'grand'
    random_slope: bool = False


@dataclass(frozen=True)
class ModelSpec:
    outcome: str
    level1_terms: Tuple[Level1Term, ...] = ()
    level2_intercept_predictors: Tuple[str, ...] = ()
    method: str = 'REML'
    tol: float = 1e-8
    max_iter: int = 1000
    name: str = ''
    plausible_values: Tuple[str, ...] = ()

    def __post_init__(self):
        predictors = self.predictors
        if not self.outcome:
            raise ModelSpecError("outcome is required")
        if self.outcome in predictors:
            raise ModelSpecError(f"outcome '{self.outcome}' is also a predictor")
        if len(set(predictors)) != len(predictors):
            raise ModelSpecError("predictor names must be unique")
        if self.method not in METHODS:
            raise ModelSpecError(f"method must be one of {METHODS}")
        if not self.tol > 0:
            raise ModelSpecError("tol must be > 0")
        if self.max_iter < 1:
            raise ModelSpecError("max_iter must be ≥ 1")
        for term in self.level1_terms:
            if term.centering not in CENTERINGS:
                raise ModelSpecError(f"centering for '{term.name}' must be one of {CENTERINGS}")

    @property
    def predictors(self) -> List[str]:
        return [t.name for t in self.level1_terms] + list(self.level2_intercept_predictors)

    @property
    def model_variables(self) -> List[str]:
        return [self.outcome] + self.predictors

    @property
    def random_slopes(self) -> List[str]:
        return [t.name for t in self.level1_terms if t.random_slope]

    @property
    def label(self) -> str:
        return self.name or f"{self.outcome} model"


@dataclass(frozen=True)
class EstimationOptions:
    em_iterations: int = 50
    gradient_tol: float = 1e-6
    boundary_tol: float = 1e-8
    degrees_of_freedom: str = 'hlm'

    @classmethod
    def from_settings(cls, settings: Optional[dict]) -> "EstimationOptions":
        est = (settings or {}).get('estimation', {})
        options = cls(
            em_iterations=int(est.get('em_iterations', cls.em_iterations)),
            gradient_tol=float(est.get('gradient_tol', cls.gradient_tol)),
            boundary_tol=float(est.get('boundary_tol', cls.boundary_tol)),
            degrees_of_freedom=est.get('degrees_of_freedom', cls.degrees_of_freedom),
        )
        if options.degrees_of_freedom not in DF_CONVENTIONS:
            raise ModelSpecError(f"degrees_of_freedom must be one of {DF_CONVENTIONS}")
        return options


@dataclass(frozen=True)
class VarianceComponents:
    tau: np.ndarray
    sigma2: float
    names: Tuple[str, ...] = (INTERCEPT,)

    def __post_init__(self):
        tau = np.atleast_2d(np.asarray(self.tau, dtype=float))
        object.__setattr__(self, 'tau', tau)
        if tau.shape[0] != tau.shape[1] or not np.allclose(tau, tau.T):
            raise ValueError("tau must be a symmetric square matrix")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be ≥ 0")

    @property
    def tau00(self) -> float:
        return float(self.tau[0, 0])

    @property
    def q(self) -> int:
        return self.tau.shape[0]


@dataclass(frozen=True)
class FixedEffect:
    name: str
    gamma_hat: float
    se: float
    t: float
    df: float
    p: float


@dataclass(frozen=True)
class VarianceTest:
    effect: str
    statistic: float
    df: int
    p: float
    groups_used: int
    groups_excluded: int


@dataclass(frozen=True)
class Convergence:
    converged: bool
    iterations: int
    em_iterations: int
    optimizer_iterations: int
    relative_change: float
    gradient_norm: float
    boundary: bool
    message: str
    deviance_trace: Tuple[float, ...] = ()


@dataclass(frozen=True)
class FitResult:
    spec: ModelSpec
    fixed: Tuple[FixedEffect, ...]
    vc: VarianceComponents
    vc_tests: Tuple[VarianceTest, ...]
    loglik: float
    deviance: float
    n_params: int
    reliability_mean: float
    reliability_per_group: pd.Series
    convergence: Convergence
    N: int
    J: int
    fixed_cov: np.ndarray = None
    grand_means: Dict[str, float] = field(default_factory=dict)

    @property
    def method(self) -> str:
        return self.spec.method

    @property
    def converged(self) -> bool:
        return self.convergence.converged

    @property
    def iterations(self) -> int:
        return self.convergence.iterations

    @property
    def aic(self) -> float:
        return self.deviance + 2 * self.n_params

    @property
    def bic(self) -> float:
        return self.deviance + self.n_params * np.log(self.N)

    def effect(self, name: str) -> FixedEffect:
        for fe in self.fixed:
            if fe.name == name:
                return fe
        raise KeyError(name)

    def fixed_table(self) -> pd.DataFrame:
        return pd.DataFrame([fe.__dict__ for fe in self.fixed]).set_index('name')

    def vc_test(self, effect: str) -> Optional[VarianceTest]:
        for test in self.vc_tests:
            if test.effect == effect:
                return test
        return None


# ---------------------------------------------------------------------------
# Design construction
# ---------------------------------------------------------------------------

@dataclass
class ModelDesign:
    spec: ModelSpec
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    fixed_names: List[str]
    random_names: List[str]
    groups: List[np.ndarray]      # row positions, canonical (sorted label) order
    labels: List[str]
    index_labels: List[str]       # first-appearance order, for reporting
    index_sizes: np.ndarray
    grand_means: Dict[str, float]

    @property
    def N(self) -> int:
        return len(self.y)

    @property
    def J(self) -> int:
        return len(self.groups)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Z.shape[1]


def _check_level2_constant(ds: Dataset, name: str, groups) -> None:
    x = ds.values(name)
    scale = max(1.0, float(np.max(np.abs(x))))
    for label, rows in groups:
        block = x[rows]
        if block.max() - block.min() > 1e-12 * scale:
            raise Level2VariationError(name, label)


def build_design(spec: ModelSpec, ds: Dataset) -> ModelDesign:
    """Assemble y, X = [intercept | level-2 | level-1] and Z = [intercept | random slopes]."""
    missing = [v for v in spec.model_variables if not ds.has(v)]
    if missing:
        raise SpecDataMismatchError(f"model variables absent from data: {missing}")
    incomplete = [v for v in spec.model_variables if ds.missing_mask(v).any()]
    if incomplete:
        raise SpecDataMismatchError(f"missing cells in {incomplete}; run listwise deletion first")

    index = build_group_index(ds)
    if index.J < 2:
        raise SpecDataMismatchError("J ≥ 2 required")

    for name in spec.level2_intercept_predictors:
        _check_level2_constant(ds, name, index.groups)

    # rows regrouped in sorted-label order; every downstream sum runs in this order
    canonical = sorted(index.groups, key=lambda g: g[0])
    order = np.concatenate([rows for _, rows in canonical])
    ds = Dataset(ds.frame.iloc[order].reset_index(drop=True), ds.cluster_column)
    bounds = np.cumsum([len(rows) for _, rows in canonical])
    groups = [np.arange(start, stop) for start, stop in zip(np.r_[0, bounds[:-1]], bounds)]

    columns = {INTERCEPT: np.ones(ds.n_rows)}
    grand_means = {}
    for name in spec.level2_intercept_predictors:
        columns[name] = ds.values(name)
    for term in spec.level1_terms:
        if term.centering == 'grand':
            centered = grand_mean_center(ds, term.name)
            columns[term.name] = centered.values
            grand_means[term.name] = centered.grand_mean
        else:
            columns[term.name] = ds.values(term.name)

    fixed_names = list(columns)
    random_names = [INTERCEPT] + spec.random_slopes
    X = np.column_stack([columns[n] for n in fixed_names])
    Z = np.column_stack([columns[n] for n in random_names])

    N, p = X.shape
    if N <= p + 2:
        raise SpecDataMismatchError(f"N = {N} must exceed the number of fixed effects + 2 ({p + 2})")
    if np.linalg.matrix_rank(X) < p:
        raise SingularDesignError(f"fixed-effects design is singular (columns {fixed_names})")

    return ModelDesign(
        spec=spec,
        y=ds.values(spec.outcome),
        X=X,
        Z=Z,
        fixed_names=fixed_names,
        random_names=random_names,
        groups=groups,
        labels=[label for label, _ in canonical],
        index_labels=index.labels,
        index_sizes=index.sizes,
        grand_means=grand_means,
    )


def prepare_analysis_data(spec: ModelSpec, ds: Dataset,
                          extra_vars: Sequence[str] = ()) -> Tuple[Dataset, DeletionReport]:
    """Listwise deletion over every variable the model (and extra_vars) touches."""
    missing = [v for v in list(spec.model_variables) + list(extra_vars) if not ds.has(v)]
    if missing:
        raise SpecDataMismatchError(f"model variables absent from data: {missing}")
    return listwise_delete(ds, list(spec.model_variables) + list(extra_vars))


# ---------------------------------------------------------------------------
# Per-group moments and profiled likelihood
# ---------------------------------------------------------------------------

class _GroupMoments:
    """Per-group cross products; every likelihood evaluation is O(J q³ + J q p²)."""

    def __init__(self, design: ModelDesign):
        X, Z, y = design.X, design.Z, design.y
        J, p, q = design.J, design.p, design.q
        self.n = np.array([len(rows) for rows in design.groups], dtype=float)
        self.G = np.empty((J, q, q))
        self.ZX = np.empty((J, q, p))
        self.Zy = np.empty((J, q))
        self.XX = np.empty((J, p, p))
        self.Xy = np.empty((J, p))
        self.yy = np.empty(J)
        for j, rows in enumerate(design.groups):
            Xj, Zj, yj = X[rows], Z[rows], y[rows]
            self.G[j] = Zj.T @ Zj
            self.ZX[j] = Zj.T @ Xj
            self.Zy[j] = Zj.T @ yj
            self.XX[j] = Xj.T @ Xj
            self.Xy[j] = Xj.T @ yj
            self.yy[j] = yj @ yj
        self.N = int(self.n.sum())
        self.J, self.p, self.q = J, p, q


@dataclass
class _Profile:
    psi: np.ndarray
    K: np.ndarray
    logdet_w: float
    H: np.ndarray
    H_chol: tuple
    b: np.ndarray
    beta: np.ndarray
    qf: float
    dof: int
    ZWX: np.ndarray
    a: np.ndarray

    @property
    def logdet_h(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.H_chol[0]))))

    @property
    def sigma2(self) -> float:
        return self.qf / self.dof


def _profile(psi: np.ndarray, m: _GroupMoments, reml: bool) -> _Profile:
    q = m.q
    A = np.eye(q) + psi @ m.G                              # I + ΨG_j
    K = np.linalg.solve(A, np.broadcast_to(psi, A.shape))  # (I + ΨG_j)⁻¹Ψ, so W_j⁻¹ = I − Z K Zᵀ
    K = 0.5 * (K + np.swapaxes(K, 1, 2))
    sign, logdet = np.linalg.slogdet(A)
    if np.any(sign <= 0):
        raise SingularDesignError("marginal covariance is not positive definite")

    GK = m.G @ K
    ZWX = m.ZX - GK @ m.ZX
    ZWy = m.Zy - np.einsum('jqr,jr->jq', GK, m.Zy)
    XWX = m.XX - np.einsum('jqp,jqr,jrs->jps', m.ZX, K, m.ZX)
    XWy = m.Xy - np.einsum('jqp,jqr,jr->jp', m.ZX, K, m.Zy)
    yWy = m.yy - np.einsum('jq,jqr,jr->j', m.Zy, K, m.Zy)

    H = XWX.sum(axis=0)
    H = 0.5 * (H + H.T)
    b = XWy.sum(axis=0)
    try:
        H_chol = linalg.cho_factor(H)
    except linalg.LinAlgError:
        raise SingularDesignError("GLS information matrix is singular")
    beta = linalg.cho_solve(H_chol, b)
    qf = float(yWy.sum() - beta @ b)
    if not qf > 0:
        raise SingularDesignError("residual sum of squares is zero; outcome is fitted exactly")

    a = ZWy - ZWX @ beta                                    # Z_jᵀ W_j⁻¹ r_j
    return _Profile(psi=psi, K=K, logdet_w=float(logdet.sum()), H=H, H_chol=H_chol, b=b,
                    beta=beta, qf=qf, dof=m.N - m.p if reml else m.N, ZWX=ZWX, a=a)


def _neg_loglik(prof: _Profile, reml: bool) -> float:
    dof = prof.dof
    value = prof.logdet_w + dof * np.log(prof.sigma2) + dof + dof * np.log(2 * np.pi)
    if reml:
        value += prof.logdet_h
    return 0.5 * value


def _psi_gradient(prof: _Profile, m: _GroupMoments, reml: bool) -> np.ndarray:
    """d(deviance)/dΨ as a symmetric matrix."""
    gamma = (m.G - m.G @ prof.K @ m.G).sum(axis=0)
    gamma -= (prof.dof / prof.qf) * np.einsum('jq,jr->qr', prof.a, prof.a)
    if reml:
        H_inv = linalg.cho_solve(prof.H_chol, np.eye(m.p))
        gamma -= np.einsum('jqp,ps,jrs->qr', prof.ZWX, H_inv, prof.ZWX)
    return 0.5 * (gamma + gamma.T)


def _unpack(theta: np.ndarray, q: int) -> np.ndarray:
    L = np.zeros((q, q))
    L[np.tril_indices(q)] = theta
    return L


def _pack(L: np.ndarray) -> np.ndarray:
    return L[np.tril_indices(L.shape[0])].copy()


def _psd_cholesky(psi: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a PSD matrix, tolerating singular input."""
    w, v = np.linalg.eigh(0.5 * (psi + psi.T))
    w = np.clip(w, 0.0, None)
    jitter = 1e-14 * max(1.0, float(w.max()))
    return np.linalg.cholesky((v * w) @ v.T + jitter * np.eye(len(w)))


class _Objective:
    """Profiled negative (restricted) log-likelihood over vech(L), Ψ = L Lᵀ."""

    def __init__(self, m: _GroupMoments, reml: bool):
        self.m, self.reml = m, reml
        self.evaluations = 0

    def profile(self, theta: np.ndarray) -> _Profile:
        L = _unpack(theta, self.m.q)
        return _profile(L @ L.T, self.m, self.reml)

    def value_and_grad(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        self.evaluations += 1
        L = _unpack(theta, self.m.q)
        prof = _profile(L @ L.T, self.m, self.reml)
        grad = _psi_gradient(prof, self.m, self.reml) @ L    # d(−ℓ)/dL = Γ L
        return _neg_loglik(prof, self.reml), _pack(grad)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.value_and_grad(theta)[1]


# ---------------------------------------------------------------------------
# EM on (tau, sigma2)
# ---------------------------------------------------------------------------

def _full_deviance(prof: _Profile, sigma2: float, m: _GroupMoments, reml: bool) -> float:
    """−2 log-likelihood at GLS β, tau = sigma2·Ψ and the given sigma2."""
    dof = m.N - m.p if reml else m.N
    value = prof.logdet_w + dof * np.log(sigma2) + prof.qf / sigma2 + dof * np.log(2 * np.pi)
    if reml:
        value += prof.logdet_h
    return float(value)


def _em_step(prof: _Profile, sigma2: float, m: _GroupMoments,
             reml: bool) -> Tuple[np.ndarray, float]:
    psi, K, beta = prof.psi, prof.K, prof.beta
    u_hat = prof.a @ psi                                   # posterior means Ψ Zᵀ W⁻¹ r
    S = m.G - m.G @ K @ m.G                                # Zᵀ W⁻¹ Z per group
    trace_w = m.n - np.einsum('jqr,jrq->j', K, m.G)        # tr W⁻¹ per group
    trace_p = trace_w.sum()
    if reml:
        H_inv = linalg.cho_solve(prof.H_chol, np.eye(m.p))
        S = S - np.einsum('jqp,ps,jrs->jqr', prof.ZWX, H_inv, prof.ZWX)
        KZX = K @ m.ZX
        XW2X = (m.XX.sum(axis=0)
                - 2 * np.einsum('jqp,jqs->ps', m.ZX, KZX)
                + np.einsum('jqp,jqr,jrs->ps', KZX, m.G, KZX))
        trace_p -= float(np.sum(H_inv * XW2X))

    tau = sigma2 * psi
    tau_new = (np.einsum('jq,jr->qr', u_hat, u_hat) / m.J
               + tau - sigma2 * psi @ S.mean(axis=0) @ psi)
    tau_new = 0.5 * (tau_new + tau_new.T)

    rr = m.yy - 2 * m.Xy @ beta + np.einsum('p,jps,s->j', beta, m.XX, beta)
    Zr = m.Zy - m.ZX @ beta
    ee = (rr - 2 * np.einsum('jq,jq->j', u_hat, Zr)
          + np.einsum('jq,jqr,jr->j', u_hat, m.G, u_hat))
    sigma2_new = float((ee.sum() + sigma2 * (m.N - trace_p)) / m.N)
    return tau_new, sigma2_new


def _starting_values(design: ModelDesign) -> Tuple[np.ndarray, float]:
    beta, *_ = np.linalg.lstsq(design.X, design.y, rcond=None)
    resid = design.y - design.X @ beta
    sigma2 = float(resid @ resid) / (design.N - design.p)
    if not sigma2 > 0:
        raise SingularDesignError("residual sum of squares is zero; outcome is fitted exactly")
    group_means = np.array([resid[rows].mean() for rows in design.groups])
    n_bar = design.N / design.J
    psi0 = max(float(group_means.var(ddof=1)) - sigma2 / n_bar, 0.05 * sigma2) / sigma2
    scales = [psi0] + [0.1 / max(float(np.mean(design.Z[:, k] ** 2)), 1e-12)
                       for k in range(1, design.q)]
    return np.diag(scales), sigma2


def _run_em(m: _GroupMoments, psi: np.ndarray, sigma2: float, reml: bool, tol: float,
            iterations: int) -> Tuple[np.ndarray, List[float]]:
    trace = []
    for _ in range(iterations):
        prof = _profile(psi, m, reml)
        trace.append(_full_deviance(prof, sigma2, m, reml))
        if len(trace) > 1 and abs(trace[-2] - trace[-1]) <= tol * abs(trace[-1]):
            break
        tau, sigma2 = _em_step(prof, sigma2, m, reml)
        if not sigma2 > 0:
            break
        psi = tau / sigma2
    return psi, trace


# ---------------------------------------------------------------------------
# Quasi-Newton refinement and Newton polish
# ---------------------------------------------------------------------------

def _newton_polish(objective: _Objective, theta: np.ndarray, target: float,
                   max_steps: int) -> Tuple[np.ndarray, int]:
    """Drive the profile gradient to zero; accepts a step only if −ℓ does not rise."""
    f, g = objective.value_and_grad(theta)
    steps = 0
    while steps < max_steps and np.max(np.abs(g)) > target:
        steps += 1
        k = len(theta)
        hess = np.empty((k, k))
        for i in range(k):
            h = 1e-6 * max(1.0, abs(theta[i]))
            e = np.zeros(k)
            e[i] = h
            hess[:, i] = (objective.grad(theta + e) - objective.grad(theta - e)) / (2 * h)
        hess = 0.5 * (hess + hess.T)
        step = -np.linalg.lstsq(hess, g, rcond=None)[0]
        for _ in range(20):
            candidate = theta + step
            f_new, g_new = objective.value_and_grad(candidate)
            if f_new <= f + 1e-12 * abs(f) and np.max(np.abs(g_new)) < np.max(np.abs(g)):
                theta, f, g = candidate, f_new, g_new
                break
            step = step / 2
        else:
            break
    return theta, steps


def _snap_boundary(objective: _Objective, theta: np.ndarray, tol: float) -> np.ndarray:
    """Zero random effects whose relative variance is below tol when that does not cost likelihood."""
    L = _unpack(theta, objective.m.q)
    small = np.diag(L @ L.T) <= tol
    if not small.any():
        return theta
    snapped = L.copy()
    snapped[small, :] = 0.0
    f_old, _ = objective.value_and_grad(theta)
    f_new, _ = objective.value_and_grad(_pack(snapped))
    if f_new <= f_old + 1e-12 * abs(f_old):
        return _pack(snapped)
    return theta


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def gls_fixed_effects(vc: VarianceComponents, x_blocks: Sequence[np.ndarray],
                      y_blocks: Sequence[np.ndarray],
                      z_blocks: Optional[Sequence[np.ndarray]] = None
                      ) -> Tuple[np.ndarray, np.ndarray]:
    """
    GLS estimates (Σ XᵀV⁻¹X)⁻¹ Σ XᵀV⁻¹y and their covariance (Σ XᵀV⁻¹X)⁻¹,
    with V_j = Z_j tau Z_jᵀ + sigma2·I. Z_j defaults to an intercept column.
    """
    p = np.asarray(x_blocks[0]).shape[1]
    info = np.zeros((p, p))
    score = np.zeros(p)
    for j, (Xj, yj) in enumerate(zip(x_blocks, y_blocks)):
        Xj, yj = np.asarray(Xj, dtype=float), np.asarray(yj, dtype=float)
        Zj = np.ones((len(yj), 1)) if z_blocks is None else np.asarray(z_blocks[j], dtype=float)
        Vj = Zj @ vc.tau @ Zj.T + vc.sigma2 * np.eye(len(yj))
        try:
            factor = linalg.cho_factor(Vj)
        except linalg.LinAlgError:
            raise SingularDesignError(f"marginal covariance of group {j} is not invertible")
        info += Xj.T @ linalg.cho_solve(factor, Xj)
        score += Xj.T @ linalg.cho_solve(factor, yj)
    info = 0.5 * (info + info.T)
    try:
        factor = linalg.cho_factor(info)
    except linalg.LinAlgError:
        raise SingularDesignError("GLS information matrix is singular")
    cov = linalg.cho_solve(factor, np.eye(p))
    return linalg.cho_solve(factor, score), 0.5 * (cov + cov.T)


def reliability(vc: VarianceComponents, sizes: Sequence[float]) -> Tuple[np.ndarray, float]:
    """Intercept reliability λ_j = τ00 / (τ00 + σ²/n_j) and its mean over groups."""
    tau00, sigma2 = vc.tau00, vc.sigma2
    if tau00 <= 0 and sigma2 <= 0:
        raise ReliabilityUndefinedError()
    sizes = np.asarray(sizes, dtype=float)
    if tau00 <= 0:
        per_group = np.zeros(len(sizes))
    else:
        per_group = tau00 / (tau00 + sigma2 / sizes)
    return per_group, float(per_group.mean())


def _fixed_effect_df(design: ModelDesign, options: EstimationOptions) -> List[float]:
    N, J, p = design.N, design.J, design.p
    if options.degrees_of_freedom == 'residual':
        return [float(N - p)] * p
    spec = design.spec
    S = len(spec.level2_intercept_predictors)
    K = len(spec.level1_terms)
    random = set(spec.random_slopes)
    dfs = []
    for name in design.fixed_names:
        if name == INTERCEPT or name in spec.level2_intercept_predictors:
            dfs.append(float(J - S - 1))
        elif name in random:
            dfs.append(float(J - 1))
        else:
            dfs.append(float(N - J - K))
    return dfs


def tau_chi_square_test(ds: Dataset, spec: ModelSpec, fit: FitResult,
                        effect: str = INTERCEPT) -> VarianceTest:
    """
    Homogeneity test of a random coefficient: Σ_j (β̂_j,OLS − predicted)² / V̂_j
    over groups with enough rows for a per-group OLS fit.
    """
    design = build_design(spec, ds)
    if effect not in design.random_names:
        raise KeyError(f"'{effect}' is not a random effect of this model")
    k = design.random_names.index(effect)

    gamma = {fe.name: fe.gamma_hat for fe in fit.fixed}
    fixed_only = [t.name for t in spec.level1_terms if not t.random_slope]
    cols = [design.fixed_names.index(n) for n in fixed_only]
    y_star = design.y - design.X[:, cols] @ np.array([gamma[n] for n in fixed_only]) \
        if cols else design.y

    statistic, used = 0.0, 0
    for rows in design.groups:
        Zj = design.Z[rows]
        if len(rows) <= design.q or np.linalg.matrix_rank(Zj) < design.q:
            continue
        ZtZ_inv = np.linalg.inv(Zj.T @ Zj)
        b_j = ZtZ_inv @ (Zj.T @ y_star[rows])
        if effect == INTERCEPT:
            first = rows[0]
            predicted = gamma[INTERCEPT] + sum(
                gamma[s] * design.X[first, design.fixed_names.index(s)]
                for s in spec.level2_intercept_predictors)
        else:
            predicted = gamma[effect]
        v_j = fit.vc.sigma2 * ZtZ_inv[k, k]
        statistic += (b_j[k] - predicted) ** 2 / v_j
        used += 1

    n_predictors = len(spec.level2_intercept_predictors) if effect == INTERCEPT else 0
    df = used - n_predictors - 1
    if df <= 0:
        raise TestDegreesOfFreedomError(df)
    excluded = design.J - used
    if excluded:
        logger.warning(f"{excluded} groups too small for the '{effect}' variance test were excluded")
    return VarianceTest(effect=effect, statistic=float(statistic), df=int(df),
                        p=float(stats.chi2.sf(statistic, df)), groups_used=used,
                        groups_excluded=excluded)


def fit(spec: ModelSpec, ds: Dataset, options: Optional[EstimationOptions] = None) -> FitResult:
    """Maximize the profiled (restricted) likelihood of the two-level model."""
    options = options or EstimationOptions()
    design = build_design(spec, ds)
    reml = spec.method == 'REML'
    m = _GroupMoments(design)

    logger.info(f"Fitting {spec.label} ({spec.method}): N={design.N}, J={design.J}, "
                f"p={design.p}, q={design.q}")

    psi, sigma2 = _starting_values(design)
    em_budget = min(options.em_iterations, spec.max_iter)
    psi, trace = _run_em(m, psi, sigma2, reml, spec.tol, em_budget)
    em_iterations = len(trace)

    objective = _Objective(m, reml)
    theta0 = _pack(_psd_cholesky(psi))
    history = [objective.value_and_grad(theta0)[0]]
    remaining = max(spec.max_iter - em_iterations, 1)

    result = optimize.minimize(objective.value_and_grad, theta0, jac=True, method='BFGS',
                               callback=lambda xk: history.append(objective.value_and_grad(xk)[0]),
                               options={'gtol': options.gradient_tol * 1e-3, 'maxiter': remaining})
    theta = result.x
    optimizer_iterations = int(result.nit)

    theta, polish_steps = _newton_polish(objective, theta, options.gradient_tol * 1e-3,
                                         max_steps=max(min(20, remaining - optimizer_iterations), 0))
    theta = _snap_boundary(objective, theta, options.boundary_tol)

    f_final, g_final = objective.value_and_grad(theta)
    if polish_steps or not np.isclose(history[-1], f_final, rtol=0, atol=0):
        history.append(f_final)
    relative_change = (abs(history[-2] - history[-1]) / max(1.0, abs(history[-1]))
                       if len(history) > 1 else 0.0)
    gradient_norm = float(np.max(np.abs(g_final)))
    iterations = em_iterations + optimizer_iterations + polish_steps
    converged = gradient_norm <= options.gradient_tol and relative_change <= spec.tol

    prof = objective.profile(theta)
    L = _unpack(theta, design.q)
    sigma2 = prof.sigma2
    tau = sigma2 * (L @ L.T)
    boundary = bool(np.min(np.linalg.eigvalsh(L @ L.T)) <= options.boundary_tol)
    vc = VarianceComponents(tau=0.5 * (tau + tau.T), sigma2=sigma2,
                            names=tuple(design.random_names))

    beta, cov = gls_fixed_effects(vc, [design.X[r] for r in design.groups],
                                  [design.y[r] for r in design.groups],
                                  [design.Z[r] for r in design.groups])
    se = np.sqrt(np.diag(cov))
    dfs = _fixed_effect_df(design, options)
    fixed = []
    for name, g, s, df in zip(design.fixed_names, beta, se, dfs):
        t = g / s if s > 0 else np.nan
        p = float(2 * stats.t.sf(abs(t), df)) if s > 0 and df > 0 else np.nan
        fixed.append(FixedEffect(name=name, gamma_hat=float(g), se=float(s), t=float(t),
                                 df=df, p=p))

    per_group, mean_rel = reliability(vc, design.index_sizes)
    loglik = -f_final
    convergence = Convergence(
        converged=bool(converged), iterations=int(iterations), em_iterations=em_iterations,
        optimizer_iterations=optimizer_iterations + polish_steps,
        relative_change=float(relative_change), gradient_norm=gradient_norm,
        boundary=boundary, message=str(result.message), deviance_trace=tuple(trace))

    fit_result = FitResult(
        spec=spec, fixed=tuple(fixed), vc=vc, vc_tests=(), loglik=float(loglik),
        deviance=float(-2 * loglik), n_params=design.p + design.q * (design.q + 1) // 2 + 1,
        reliability_mean=mean_rel,
        reliability_per_group=pd.Series(per_group, index=design.index_labels, name='reliability'),
        convergence=convergence, N=design.N, J=design.J, fixed_cov=cov,
        grand_means=design.grand_means)

    if not converged:
        raise ConvergenceError(
            f"{spec.label} did not converge in {spec.max_iter} iterations "
            f"(gradient {gradient_norm:.2e}, relative change {relative_change:.2e})",
            result=fit_result)
    if boundary:
        logger.warning(f"{spec.label}: variance estimate on the boundary (zero variance)")

    tests = []
    for effect in design.random_names:
        try:
            tests.append(tau_chi_square_test(ds, spec, fit_result, effect))
        except TestDegreesOfFreedomError as e:
            logger.warning(f"Variance test for '{effect}' skipped: {e}")
    fit_result = replace(fit_result, vc_tests=tuple(tests))

    logger.info(f"✓ {spec.label}: deviance {fit_result.deviance:.2f} after {iterations} iterations")
    return fit_result


def fit_random_slopes(spec: ModelSpec, ds: Dataset,
                      options: Optional[EstimationOptions] = None) -> FitResult:
    """Fit with the model's random-slope flags and report each slope-variance test."""
    result = fit(spec, ds, options)
    for name in spec.random_slopes:
        test = result.vc_test(name)
        if test is not None:
            verdict = "varies" if test.p <= 0.05 else "does not vary"
            logger.info(f"Slope of '{name}' {verdict} between groups "
                        f"(chi2={test.statistic:.2f}, df={test.df}, p={test.p:.3f})")
    if result.convergence.boundary:
        logger.info("Random-effect covariance estimate is on the PSD boundary")
    return result


def drop_invariant_slopes(spec: ModelSpec, result: FitResult, alpha: float = 0.05) -> ModelSpec:
    """Fix every random slope whose variance test is not significant at alpha."""
    terms = []
    for term in spec.level1_terms:
        test = result.vc_test(term.name) if term.random_slope else None
        if test is not None and test.p > alpha:
            logger.info(f"Fixing slope of '{term.name}' (p={test.p:.3f} > {alpha})")
            term = replace(term, random_slope=False)
        terms.append(term)
    return replace(spec, level1_terms=tuple(terms))


@dataclass(frozen=True)
class DevianceTest:
    statistic: float
    df: int
    p: float


def compare_deviance(reduced: FitResult, full: FitResult) -> DevianceTest:
    """Likelihood-ratio test between nested fits on the same rows."""
    if reduced.method != full.method:
        raise ValueError("deviance comparison needs both fits estimated by the same method")
    if reduced.N != full.N:
        raise ValueError("deviance comparison needs fits on the same rows")
    if full.method == 'REML' and [f.name for f in reduced.fixed] != [f.name for f in full.fixed]:
        raise ValueError("REML deviances are comparable only with identical fixed effects; refit with ML")
    df = full.n_params - reduced.n_params
    if df <= 0:
        raise ValueError("the full model must have more parameters than the reduced model")
    statistic = max(reduced.deviance - full.deviance, 0.0)
    return DevianceTest(statistic=float(statistic), df=int(df),
                        p=float(stats.chi2.sf(statistic, df)))
