"""Posterior inference for the joint incidence-mortality models.

Two fitting modes share one machinery:

* ``run_mcmc`` : a blocked sampler.  The whole latent field is proposed from
  the sum-to-zero-constrained Gaussian approximation at the current
  hyperparameters and accepted through a Metropolis-Hastings step; every log
  precision and log loading moves by Gaussian random-walk MH against the full
  posterior.
* ``fit_empirical_bayes`` : maximizes the Laplace-approximate marginal
  posterior of the hyperparameters by deterministic coordinate search and
  reports the constrained Gaussian approximation of the field at the optimum.

The Gaussian approximation itself comes from Newton iterations on the
Poisson log likelihood: the likelihood is expanded to second order around the
current point, giving a Gaussian whose precision is the prior precision plus
the observation curvature.  Constraints are imposed by conditioning by
kriging: an unconstrained draw ``x`` becomes
``x - Q^{-1} A' (A Q^{-1} A')^{-1} A x``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .cholesky import SparseCholesky
from .model import (
    INCIDENCE,
    MORTALITY,
    HyperParams,
    LatentLayout,
    ModelConfig,
    build_layout,
    expand_year_loadings,
    gamma_log_pdf,
    joint_prior_precision,
    loading_parameters,
    log_rate_field,
    precision_log_prior,
    quad_forms,
)
from .panel import ObservationPanel

__all__ = [
    "FitSettings",
    "GaussianApprox",
    "ConstrainedGaussian",
    "PosteriorSamples",
    "EmpiricalBayesFit",
    "NewtonDivergenceError",
    "gaussian_approximation",
    "sample_constrained_gaussian",
    "run_mcmc",
    "fit_empirical_bayes",
    "eb_posterior_samples",
    "fit_model",
    "predictive_counts",
    "forecast_horizon",
    "marginal_log_posterior",
    "effective_sample_size",
]


class NewtonDivergenceError(RuntimeError):
    """The mode search failed to converge."""


@dataclass
class FitSettings:
    """Sampler and optimizer settings.

    ``fixed`` freezes named hyperparameters ("tau_kappa", "spatial_loading",
    ...) at the given natural-scale values; frozen parameters are never
    updated but still appear in the recorded draws.  ``likelihood`` selects
    the observation model; "gaussian-test" replaces the Poisson terms by a
    fixed quadratic and exists for verification only.
    """

    burn_in: int = 5000
    n_samples: int = 2000
    thin: int = 5
    rng_seed: int = 0
    mode: str = "MCMC"  # or "EmpiricalBayesLaplace"
    step_sizes: dict = field(default_factory=dict)
    fixed: dict = field(default_factory=dict)
    tune_interval: int = 50
    likelihood: str = "poisson"
    eb_draws: int = 1000

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        if self.mode not in ("MCMC", "EmpiricalBayesLaplace"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.likelihood not in ("poisson", "gaussian-test"):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")


@dataclass
class GaussianApprox:
    """Constrained mode and curvature of the latent field given hyperparameters.

    ``constrained`` is the ready-to-sample conditioned Gaussian centred at
    the mode; ``mode`` itself satisfies every sum-to-zero constraint.
    """

    mode: np.ndarray
    precision: sp.csc_matrix
    factor: SparseCholesky
    prior_precision: sp.csc_matrix
    iterations: int
    constrained: "ConstrainedGaussian | None" = None


def _constraints_independent(constraints: np.ndarray) -> bool:
    """Full row rank check, including rejection of zero rows."""
    if not np.any(constraints, axis=1).all():
        return False
    return np.linalg.matrix_rank(constraints) == constraints.shape[0]


class ConstrainedGaussian:
    """A Gaussian N(mode, Q^{-1}) conditioned on ``constraints @ x = 0``.

    The correction is conditioning by kriging; with no constraint rows the
    object degrades to the unconstrained Gaussian.  ``checked=True`` skips
    the row-rank validation for callers that have already performed it.
    """

    def __init__(self, mode: np.ndarray, factor: SparseCholesky, constraints: np.ndarray,
                 precision=None, checked: bool = False):
        constraints = np.atleast_2d(np.asarray(constraints, dtype=float))
        if constraints.size == 0:
            constraints = constraints.reshape(0, factor.dim)
        if constraints.shape[1] != factor.dim:
            raise ValueError("constraint row length must match the field dimension")
        self.factor = factor
        self.precision = precision
        self.constraints = constraints
        self._mode = np.asarray(mode, dtype=float)
        if constraints.shape[0]:
            if not checked and not _constraints_independent(constraints):
                raise ValueError("constraint rows are rank deficient")
            self._solved = factor.solve(constraints.T)  # Q^{-1} A'
            gram = constraints @ self._solved  # A Q^{-1} A'
            try:
                self._gram_chol = scipy.linalg.cho_factor(gram)
            except scipy.linalg.LinAlgError as exc:
                raise ValueError("constraint rows are linearly dependent") from exc
        else:
            self._solved = None
            self._gram_chol = None
        self.mean = self.correct(self._mode)

    def correct(self, x: np.ndarray) -> np.ndarray:
        """Project a vector onto the constraint set under the model metric."""
        if self._solved is None:
            return np.asarray(x, dtype=float)
        resid = self.constraints @ x
        return x - self._solved @ scipy.linalg.cho_solve(self._gram_chol, resid)

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Constraint-satisfying draw(s)."""
        if size is None:
            return self.correct(self._mode + self.factor.sample_zero_mean(rng))
        draws = self._mode + self.factor.sample_zero_mean(rng, size=size)
        return np.vstack([self.correct(d) for d in draws])

    def log_density_unnorm(self, x: np.ndarray) -> float:
        """Log density up to the subspace normalizing constant."""
        if self.precision is None:
            raise ValueError("precision matrix not attached")
        d = x - self._mode
        return -0.5 * float(d @ (self.precision @ d))

    def constraint_gram_logdet(self) -> float:
        """log det(A Q^{-1} A'), zero when unconstrained."""
        if self._gram_chol is None:
            return 0.0
        return 2.0 * float(np.log(np.diag(self._gram_chol[0])).sum())


def sample_constrained_gaussian(mode, precision, constraints, rng) -> np.ndarray:
    """One draw from N(mode, precision^{-1}) conditioned on ``constraints @ x = 0``.

    ``precision`` may be a sparse matrix or an existing
    :class:`~jointcast.cholesky.SparseCholesky` factor.
    """
    factor = precision if isinstance(precision, SparseCholesky) else SparseCholesky(precision)
    return ConstrainedGaussian(mode, factor, constraints).sample(rng)


# design-entry value kinds
_K_ONE, _K_LAM, _K_INV_LAM, _K_TL, _K_INV_TL, _K_RHO, _K_INV_RHO = range(7)


def _constraint_augmentation(layout: LatentLayout) -> sp.csc_matrix:
    """Sum of embedded constraint outer products for rank-deficient blocks.

    Adding a positive multiple of this matrix to the posterior precision
    leaves the distribution conditioned on the constraints untouched (the
    extra quadratic term is constant on the constraint subspace) but makes
    the precision factorizable even when whole blocks carry no data, e.g.
    areas with their entire incidence series missing.
    """
    n = layout.total_dim
    total = sp.csc_matrix((n, n))
    for b in layout.blocks:
        if b.structure is None or b.constraints is None or b.structure.null_dim == 0:
            continue
        a = sp.csr_matrix(b.constraints.matrix)
        outer = (a.T @ a).tocoo()
        embedded = sp.coo_matrix(
            (outer.data, (outer.row + b.offset, outer.col + b.offset)), shape=(n, n)
        )
        total = total + embedded.tocsc()
    return total


class _FitContext:
    """Precomputed observation/design structure shared by both fit modes."""

    def __init__(self, cfg: ModelConfig, layout: LatentLayout, panel: ObservationPanel,
                 likelihood: str = "poisson"):
        self.cfg = cfg
        self.layout = layout
        self.panel = panel
        obs = np.argwhere(~panel.missing)  # rows of (i, t, d), row-major order
        if obs.shape[0] == 0:
            raise ValueError("panel has no observed cells")
        self.obs_cells = obs
        self.n_obs = obs.shape[0]
        self.obs_counts = panel.counts[~panel.missing]
        self.obs_logn = np.log(panel.populations[~panel.missing])
        self.constraints = layout.constraint_matrix()
        self.augmentation = _constraint_augmentation(layout)
        if self.constraints.shape[0]:
            if not _constraints_independent(self.constraints):
                raise ValueError("layout produced rank-deficient constraints")
            self._constraint_gram = scipy.linalg.cho_factor(
                self.constraints @ self.constraints.T
            )
        else:
            self._constraint_gram = None
        self._build_design_index()
        self._build_prior_template()
        self._design_cache_key = None
        self._design_cache = None
        self.likelihood = likelihood
        if likelihood == "gaussian-test":
            # quadratic stand-in for the Poisson terms (verification hook)
            self._quad_w = self.obs_counts + 0.5
            self._quad_z = np.log(self.obs_counts + 0.5) - self.obs_logn

    def _build_prior_template(self):
        """Prior precision with unit precisions, plus a data-scaling map.

        The sparsity pattern never changes, so per-hyperparameter rebuilds
        reduce to scaling the stored entry values block by block.
        """
        layout = self.layout
        parts = []
        for b in layout.blocks:
            if b.structure is None:
                parts.append(INTERCEPT_RIDGE * sp.identity(b.length, format="csc"))
            else:
                parts.append(b.structure.entries.tocsc())
        base = sp.block_diag(parts, format="csc")
        base.sort_indices()
        keys = layout.precision_parameter_names()
        key_index = {k: j for j, k in enumerate(keys)}
        block_of_col = np.empty(layout.total_dim, dtype=int)
        col_param = np.empty(layout.total_dim, dtype=int)
        for j, b in enumerate(layout.blocks):
            block_of_col[b.slice] = j
            col_param[b.slice] = -1 if b.precision_key is None else key_index[b.precision_key]
        col_of_entry = np.repeat(np.arange(layout.total_dim), np.diff(base.indptr))
        self._prior_base = base
        self._prior_entry_param = col_param[col_of_entry]
        self._prior_param_keys = keys

    def prior_precision(self, hyper: HyperParams) -> sp.csc_matrix:
        """Joint prior precision, rebuilt by scaling the cached template."""
        mult = np.ones(len(self._prior_param_keys) + 1)
        for j, key in enumerate(self._prior_param_keys):
            mult[j] = hyper.precisions[key]
        data = self._prior_base.data * mult[self._prior_entry_param]
        base = self._prior_base
        return sp.csc_matrix((data, base.indices, base.indptr), shape=base.shape)

    def project_onto_constraints(self, vec: np.ndarray) -> np.ndarray:
        """Euclidean projection onto the constraint subspace {A v = 0}."""
        if self._constraint_gram is None:
            return vec
        return vec - self.constraints.T @ scipy.linalg.cho_solve(
            self._constraint_gram, self.constraints @ vec
        )

    def _build_design_index(self):
        layout, cfg = self.layout, self.cfg
        a = layout.num_areas
        rows, cols, kinds, years = [], [], [], []

        def add(r, col, kind, year=0):
            rows.append(r)
            cols.append(col)
            kinds.append(kind)
            years.append(year)

        off = {b.label: b.offset for b in layout.blocks}
        for r, (i, t, d) in enumerate(self.obs_cells):
            flat = t * a + i
            if d == INCIDENCE:
                add(r, off["alpha_I"], _K_ONE)
                add(r, off["kappa"] + i, _K_LAM)
                if cfg.model_id in ("Model1", "AdditiveBaseline"):
                    add(r, off["gamma_I"] + t, _K_ONE)
                elif cfg.model_id == "Model2":
                    add(r, off["gamma_shared"] + t, _K_TL)
                if cfg.model_id in ("Model1", "Model2"):
                    add(r, off["chi_I"] + flat, _K_ONE)
                elif cfg.model_id == "Model3":
                    add(r, off["chi_shared"] + flat, _K_RHO, t)
            else:
                add(r, off["alpha_M"], _K_ONE)
                add(r, off["kappa"] + i, _K_INV_LAM)
                add(r, off["u"] + i, _K_ONE)
                if cfg.model_id in ("Model1", "AdditiveBaseline", "Model3"):
                    add(r, off["gamma_M"] + t, _K_ONE)
                elif cfg.model_id == "Model2":
                    add(r, off["gamma_shared"] + t, _K_INV_TL)
                if cfg.model_id in ("Model1", "Model2"):
                    add(r, off["chi_M"] + flat, _K_ONE)
                elif cfg.model_id == "Model3":
                    add(r, off["chi_shared"] + flat, _K_INV_RHO, t)
        self._rows = np.array(rows)
        self._cols = np.array(cols)
        self._kinds = np.array(kinds)
        self._years = np.array(years)

    def _loading_key(self, hyper: HyperParams) -> tuple:
        parts = [hyper.spatial_loading]
        if self.cfg.model_id == "Model2":
            parts.append(hyper.temporal_loading)
        if self.cfg.model_id == "Model3":
            parts.extend(np.asarray(hyper.interaction_loadings).tolist())
        return tuple(parts)

    def design_matrix(self, hyper: HyperParams) -> sp.csr_matrix:
        """Sparse map from the latent vector to observed-cell log rates.

        Cached on the loading values; precision changes leave it untouched.
        """
        key = self._loading_key(hyper)
        if key == self._design_cache_key:
            return self._design_cache
        data = np.empty(self._kinds.shape[0])
        lam = hyper.spatial_loading
        data[self._kinds == _K_ONE] = 1.0
        data[self._kinds == _K_LAM] = lam
        data[self._kinds == _K_INV_LAM] = 1.0 / lam
        if self.cfg.model_id == "Model2":
            tl = hyper.temporal_loading
            data[self._kinds == _K_TL] = tl
            data[self._kinds == _K_INV_TL] = 1.0 / tl
        if self.cfg.model_id == "Model3":
            yl = expand_year_loadings(
                hyper.interaction_loadings, self.layout.num_years, self.cfg.num_rho
            )
            m = self._kinds == _K_RHO
            data[m] = yl[self._years[m]]
            m = self._kinds == _K_INV_RHO
            data[m] = 1.0 / yl[self._years[m]]
        shape = (self.n_obs, self.layout.total_dim)
        design = sp.coo_matrix((data, (self._rows, self._cols)), shape=shape).tocsr()
        design.sort_indices()
        self._design_cache_key = key
        self._design_cache = design
        self._design_csc_t = design.T.tocsc()
        self._design_row_of_entry = np.repeat(
            np.arange(self.n_obs), np.diff(design.indptr)
        )
        return design

    def weighted_gram(self, design: sp.csr_matrix, weight: np.ndarray) -> sp.csc_matrix:
        """design' diag(weight) design without intermediate copies."""
        scaled = sp.csr_matrix(
            (design.data * weight[self._design_row_of_entry], design.indices, design.indptr),
            shape=design.shape,
        )
        return (self._design_csc_t @ scaled).tocsc()

    def loglik(self, x: np.ndarray, hyper: HyperParams) -> float:
        """Observation log likelihood of a latent configuration."""
        field_vals = log_rate_field(self.layout, x, hyper)
        eta = field_vals[~self.panel.missing]
        return self.loglik_from_eta(eta)

    def loglik_from_eta(self, eta: np.ndarray) -> float:
        if self.likelihood == "gaussian-test":
            return -0.5 * float(np.sum(self._quad_w * (eta - self._quad_z) ** 2))
        logmu = self.obs_logn + eta
        with np.errstate(over="ignore"):
            mu = np.exp(logmu)
        return float(np.sum(self.obs_counts * logmu) - np.sum(mu))

    def _lik_grad_weight(self, eta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Gradient and curvature of the likelihood terms w.r.t. eta."""
        if self.likelihood == "gaussian-test":
            return self._quad_w * (self._quad_z - eta), self._quad_w
        with np.errstate(over="ignore"):
            mu = np.exp(self.obs_logn + eta)
        return self.obs_counts - mu, mu

    def gaussian_approximation(
        self,
        hyper: HyperParams,
        x0: np.ndarray | None = None,
        tol: float = 1e-8,
        max_iter: int = 50,
    ) -> GaussianApprox:
        """Newton mode search on the constraint subspace.

        Every iterate is kriging-corrected onto the sum-to-zero subspace, so
        the search optimizes the identified model and the returned mode is
        the constrained one.  Stationarity is measured by the gradient
        projected onto that subspace, relative to the size of its opposing
        terms.
        """
        layout = self.layout
        prior = self.prior_precision(hyper)
        design = self.design_matrix(hyper)
        x = np.zeros(layout.total_dim) if x0 is None else np.array(x0, dtype=float)

        def objective(xv, eta):
            return self.loglik_from_eta(eta) - 0.5 * float(xv @ (prior @ xv))

        eta = design @ x
        f_cur = objective(x, eta)
        if not np.isfinite(f_cur):
            x = np.zeros(layout.total_dim)
            eta = design @ x
            f_cur = objective(x, eta)
        for iteration in range(max_iter):
            score, weight = self._lik_grad_weight(eta)
            prior_grad = prior @ x
            grad = design.T @ score - prior_grad
            if not np.all(np.isfinite(grad)):
                raise NewtonDivergenceError("non-finite gradient in mode search")
            scale = max(
                1.0,
                float(np.linalg.norm(design.T @ self.obs_counts))
                + float(np.linalg.norm(prior_grad)),
            )
            hessian = self.weighted_gram(design, weight) + prior
            # constraint augmentation: no effect on the conditioned field, but
            # keeps the precision positive definite under any missingness
            hessian = (hessian + float(hessian.diagonal().mean()) * self.augmentation).tocsc()
            factor = SparseCholesky(hessian)
            cgauss = ConstrainedGaussian(
                x, factor, self.constraints, precision=hessian, checked=True
            )
            grad_sub = self.project_onto_constraints(grad)
            if float(np.linalg.norm(grad_sub)) <= tol * scale:
                return GaussianApprox(
                    mode=x, precision=hessian, factor=factor,
                    prior_precision=prior, iterations=iteration,
                    constrained=cgauss,
                )
            step = factor.solve(grad)
            alpha = 1.0
            for _ in range(40):
                x_new = cgauss.correct(x + alpha * step)
                eta_new = design @ x_new
                f_new = objective(x_new, eta_new)
                if f_new >= f_cur - 1e-10 * (abs(f_cur) + 1.0):
                    break
                alpha *= 0.5
            else:
                raise NewtonDivergenceError("step halving exhausted")
            x, eta, f_cur = x_new, eta_new, f_new
        raise NewtonDivergenceError(f"no convergence in {max_iter} Newton iterations")


def gaussian_approximation(
    layout: LatentLayout,
    panel: ObservationPanel,
    hyper: HyperParams,
    x0: np.ndarray | None = None,
) -> GaussianApprox:
    """Gaussian approximation of the latent field posterior at fixed hyperparameters."""
    hyper.validate()
    ctx = _FitContext(layout.cfg, layout, panel)
    return ctx.gaussian_approximation(hyper, x0=x0)


@dataclass
class _ParamSpec:
    name: str
    kind: str  # "precision" | "loading"
    key: str
    index: int = 0


def _param_specs(layout: LatentLayout) -> list[_ParamSpec]:
    cfg = layout.cfg
    specs = [
        _ParamSpec(name=f"tau_{key}", kind="precision", key=key)
        for key in layout.precision_parameter_names()
    ]
    for name in loading_parameters(cfg):
        if name.startswith("interaction_loading_"):
            idx = int(name.rsplit("_", 1)[1]) - 1
            specs.append(_ParamSpec(name=name, kind="loading", key="interaction", index=idx))
        else:
            specs.append(_ParamSpec(name=name, kind="loading", key=name))
    return specs


def _get_param(hyper: HyperParams, spec: _ParamSpec) -> float:
    if spec.kind == "precision":
        return float(hyper.precisions[spec.key])
    if spec.key == "interaction":
        return float(hyper.interaction_loadings[spec.index])
    return float(getattr(hyper, spec.key))


def _set_param(hyper: HyperParams, spec: _ParamSpec, value: float) -> None:
    if spec.kind == "precision":
        hyper.precisions[spec.key] = value
    elif spec.key == "interaction":
        hyper.interaction_loadings[spec.index] = value
    else:
        setattr(hyper, spec.key, value)


def _log_scale_prior(spec: _ParamSpec, value: float, cfg: ModelConfig) -> float:
    """Prior density of one hyperparameter in its log parameterization."""
    theta = math.log(value)
    if spec.kind == "precision":
        return precision_log_prior(value, cfg.sd_prior_upper) + theta
    return gamma_log_pdf(value, cfg.gamma_shape, cfg.gamma_rate) + theta


def _initial_hyper(layout: LatentLayout, settings: FitSettings) -> HyperParams:
    cfg = layout.cfg
    hyper = HyperParams(
        precisions={k: 10.0 for k in layout.precision_parameter_names()},
        spatial_loading=1.0,
        temporal_loading=1.0 if cfg.model_id == "Model2" else None,
        interaction_loadings=np.ones(cfg.num_rho) if cfg.model_id == "Model3" else None,
    )
    specs = {s.name: s for s in _param_specs(layout)}
    for name, value in settings.fixed.items():
        if name not in specs:
            raise ValueError(f"cannot fix unknown hyperparameter {name!r}")
        _set_param(hyper, specs[name], float(value))
    hyper.validate()
    return hyper


@dataclass
class PosteriorSamples:
    """Retained draws of the latent field, hyperparameters and derived rates."""

    layout: LatentLayout
    latent: np.ndarray  # (S, total_dim)
    hyper_names: list[str]
    hyper_values: np.ndarray  # (S, n_hyper), natural scale
    rates: np.ndarray  # (S, A, T, 2), per-person rates
    diagnostics: dict
    settings: FitSettings
    first_year: int = 0
    count_draws: dict = field(default_factory=dict)  # (i, t, d) -> (S,) int draws

    @property
    def num_draws(self) -> int:
        return self.latent.shape[0]

    def hyper_chain(self, name: str) -> np.ndarray:
        return self.hyper_values[:, self.hyper_names.index(name)]


def effective_sample_size(chain: np.ndarray) -> float:
    """Autocorrelation-based ESS (initial positive sequence estimator)."""
    chain = np.asarray(chain, dtype=float)
    n = chain.size
    if n < 4:
        return float(n)
    centered = chain - chain.mean()
    var = centered @ centered / n
    if var == 0:
        return float(n)
    # autocovariances via FFT
    m = int(2 ** math.ceil(math.log2(2 * n)))
    fft = np.fft.rfft(centered, m)
    acov = np.fft.irfft(fft * np.conj(fft), m)[:n].real / n
    rho = acov / acov[0]
    total = 0.0
    k = 1
    while k + 1 < n:
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        total += pair
        k += 2
    return float(n / (1.0 + 2.0 * total))


def run_mcmc(
    cfg: ModelConfig,
    graph,
    panel: ObservationPanel,
    settings: FitSettings,
) -> PosteriorSamples:
    """Fit a model by the blocked sampler and return posterior draws.

    Reproducible given ``settings.rng_seed``: all randomness flows through a
    single generator consumed in a fixed order.  Every retained latent draw
    satisfies the layout's sum-to-zero constraints.
    """
    layout = build_layout(cfg, graph, panel.num_years)
    ctx = _FitContext(cfg, layout, panel, likelihood=settings.likelihood)
    rng = np.random.default_rng(settings.rng_seed)

    hyper = _initial_hyper(layout, settings)
    all_specs = _param_specs(layout)
    free = [s for s in all_specs if s.name not in settings.fixed]
    steps = {s.name: float(settings.step_sizes.get(s.name, 0.4)) for s in free}

    x = np.zeros(layout.total_dim)
    loglik_cur = ctx.loglik(x, hyper)
    quads = quad_forms(layout, x)
    hyper_changed = True
    approx = None
    cgauss = None

    n_iter = settings.burn_in + settings.n_samples * settings.thin
    accepted = {"latent": 0, **{s.name: 0 for s in free}}
    proposed = {"latent": 0, **{s.name: 0 for s in free}}
    tune_acc = {name: 0 for name in steps}
    tune_prop = {name: 0 for name in steps}
    newton_iters = 0
    post_iters = settings.n_samples * settings.thin

    kept_latent = np.empty((settings.n_samples, layout.total_dim))
    kept_hyper = np.empty((settings.n_samples, len(all_specs)))
    kept_rates = np.empty((settings.n_samples, layout.num_areas, layout.num_years, 2))
    kept = 0

    for it in range(n_iter):
        in_burn = it < settings.burn_in

        # (a) joint latent-field move from the constrained Gaussian approximation
        if hyper_changed:
            x0 = approx.mode if approx is not None else x
            approx = ctx.gaussian_approximation(hyper, x0=x0)
            newton_iters += approx.iterations
            cgauss = approx.constrained
            hyper_changed = False
        prior = approx.prior_precision
        x_prop = cgauss.sample(rng)
        ll_prop = ctx.loglik(x_prop, hyper)
        log_ratio = (
            ll_prop
            - 0.5 * float(x_prop @ (prior @ x_prop))
            - loglik_cur
            + 0.5 * float(x @ (prior @ x))
            - cgauss.log_density_unnorm(x_prop)
            + cgauss.log_density_unnorm(x)
        )
        if not in_burn:
            proposed["latent"] += 1
        if math.log(rng.uniform()) < log_ratio:
            x = x_prop
            loglik_cur = ll_prop
            quads = quad_forms(layout, x)
            if not in_burn:
                accepted["latent"] += 1

        # (b) random-walk moves on log precisions and log loadings
        for spec in free:
            cur = _get_param(hyper, spec)
            prop = cur * math.exp(steps[spec.name] * rng.standard_normal())
            if spec.kind == "precision":
                delta = _log_scale_prior(spec, prop, cfg) - _log_scale_prior(spec, cur, cfg)
                if math.isfinite(delta):
                    ratio = math.log(prop) - math.log(cur)
                    for b in layout.blocks_for_precision(spec.key):
                        rank = b.structure.dim - b.structure.null_dim
                        delta += 0.5 * rank * ratio - 0.5 * (prop - cur) * quads[b.label]
                ll_new = None
            else:
                delta = _log_scale_prior(spec, prop, cfg) - _log_scale_prior(spec, cur, cfg)
                _set_param(hyper, spec, prop)
                ll_new = ctx.loglik(x, hyper)
                _set_param(hyper, spec, cur)
                delta += ll_new - loglik_cur
            tune_prop[spec.name] += 1
            if not in_burn:
                proposed[spec.name] += 1
            if math.log(rng.uniform()) < delta:
                _set_param(hyper, spec, prop)
                if ll_new is not None:
                    loglik_cur = ll_new
                hyper_changed = True
                tune_acc[spec.name] += 1
                if not in_burn:
                    accepted[spec.name] += 1

        # step-size adaptation, burn-in only
        if in_burn and (it + 1) % settings.tune_interval == 0:
            for name in steps:
                if tune_prop[name] == 0:
                    continue
                rate = tune_acc[name] / tune_prop[name]
                if rate < 0.20:
                    steps[name] *= 0.7
                elif rate > 0.50:
                    steps[name] *= 1.4
                tune_acc[name] = 0
                tune_prop[name] = 0

        if not in_burn and (it - settings.burn_in + 1) % settings.thin == 0:
            kept_latent[kept] = x
            kept_hyper[kept] = [_get_param(hyper, s) for s in all_specs]
            with np.errstate(over="ignore"):
                kept_rates[kept] = np.exp(log_rate_field(layout, x, hyper))
            kept += 1

    acc_rates = {k: accepted[k] / max(proposed[k], 1) for k in accepted}
    warnings = [
        f"no accepted moves for block {k!r} after burn-in"
        for k, v in accepted.items()
        if v == 0 and post_iters > 0
    ]
    ess = {}
    for j, spec in enumerate(all_specs):
        chain = kept_hyper[:kept, j]
        if np.ptp(chain) > 0:
            ess[spec.name] = effective_sample_size(np.log(chain))
    diagnostics = {
        "acceptance_rates": acc_rates,
        "effective_sample_size": ess,
        "warnings": warnings,
        "observed_cells": ctx.n_obs,
        "newton_iterations": newton_iters,
        "step_sizes": steps,
        "mode": "MCMC",
    }
    return PosteriorSamples(
        layout=layout,
        latent=kept_latent,
        hyper_names=[s.name for s in all_specs],
        hyper_values=kept_hyper,
        rates=kept_rates,
        diagnostics=diagnostics,
        settings=settings,
        first_year=panel.first_year,
    )


@dataclass
class EmpiricalBayesFit:
    """Hyperparameter point estimate with the field approximation at it."""

    layout: LatentLayout
    hyper: HyperParams
    approx: ConstrainedGaussian
    log_marginal: float
    hyper_names: list[str]
    evaluations: int
    diagnostics: dict


def _eb_objective(ctx: _FitContext, hyper: HyperParams, cfg: ModelConfig,
                  specs, x0=None) -> tuple[float, ConstrainedGaussian, np.ndarray]:
    """Laplace-approximate log marginal posterior of the hyperparameters."""
    approx = ctx.gaussian_approximation(hyper, x0=x0)
    cg = approx.constrained
    x_star = cg.mean
    value = ctx.loglik(x_star, hyper)
    quads = quad_forms(ctx.layout, x_star)
    for key in ctx.layout.precision_parameter_names():
        tau = hyper.precisions[key]
        for b in ctx.layout.blocks_for_precision(key):
            rank = b.structure.dim - b.structure.null_dim
            value += 0.5 * rank * math.log(tau) - 0.5 * tau * quads[b.label]
    for spec in specs:
        value += _log_scale_prior(spec, _get_param(hyper, spec), cfg)
    value -= 0.5 * approx.factor.logdet()
    value -= 0.5 * cg.constraint_gram_logdet()
    return value, cg, approx.mode


def marginal_log_posterior(cfg: ModelConfig, graph, panel: ObservationPanel,
                           hyper: HyperParams) -> float:
    """Laplace-approximate log marginal posterior density at one hyperparameter point.

    This is the objective maximized by :func:`fit_empirical_bayes`, exposed
    for inspection and grid checks.  Constant terms are dropped.
    """
    layout = build_layout(cfg, graph, panel.num_years)
    ctx = _FitContext(cfg, layout, panel)
    value, _, _ = _eb_objective(ctx, hyper, cfg, _param_specs(layout))
    return value


def fit_empirical_bayes(
    cfg: ModelConfig,
    graph,
    panel: ObservationPanel,
    settings: FitSettings,
) -> EmpiricalBayesFit:
    """Deterministic fast fit: coordinate search on the Laplace marginal posterior."""
    layout = build_layout(cfg, graph, panel.num_years)
    ctx = _FitContext(cfg, layout, panel, likelihood=settings.likelihood)
    all_specs = _param_specs(layout)
    free = [s for s in all_specs if s.name not in settings.fixed]
    hyper = _initial_hyper(layout, settings)

    lower = {}
    upper = {}
    for s in free:
        if s.kind == "precision":
            lower[s.name] = math.log(cfg.sd_prior_upper ** -2) + 1e-6
            upper[s.name] = math.log(1e8)
        else:
            lower[s.name] = math.log(1e-2)
            upper[s.name] = math.log(1e2)

    evaluations = 0
    mode_cache = None

    def objective() -> tuple[float, ConstrainedGaussian, np.ndarray]:
        nonlocal evaluations
        evaluations += 1
        return _eb_objective(ctx, hyper, cfg, all_specs, x0=mode_cache)

    best, best_cg, mode_cache = objective()
    step = {s.name: 0.5 for s in free}
    for _ in range(80):
        moved = False
        for s in free:
            if step[s.name] < 1e-3:
                continue
            cur = _get_param(hyper, s)
            theta = math.log(cur)
            improved = False
            for cand in (theta + step[s.name], theta - step[s.name]):
                cand = min(max(cand, lower[s.name]), upper[s.name])
                if cand == theta:
                    continue
                _set_param(hyper, s, math.exp(cand))
                try:
                    val, cg, mode = objective()
                except NewtonDivergenceError:
                    val = -math.inf
                if val > best + 1e-10:
                    best, best_cg, mode_cache = val, cg, mode
                    theta = cand
                    improved = moved = True
                else:
                    _set_param(hyper, s, math.exp(theta))
            if not improved:
                step[s.name] *= 0.5
        if not moved and all(v < 1e-3 for v in step.values()):
            break

    diagnostics = {
        "mode": "EmpiricalBayesLaplace",
        "observed_cells": ctx.n_obs,
        "evaluations": evaluations,
    }
    return EmpiricalBayesFit(
        layout=layout,
        hyper=hyper,
        approx=best_cg,
        log_marginal=best,
        hyper_names=[s.name for s in all_specs],
        evaluations=evaluations,
        diagnostics=diagnostics,
    )


def eb_posterior_samples(fit: EmpiricalBayesFit, settings: FitSettings,
                         first_year: int = 0) -> PosteriorSamples:
    """Draws from the constrained Gaussian approximation of an EB fit.

    Hyperparameters are held at their point estimates, so the draws reflect
    field uncertainty only.
    """
    rng = np.random.default_rng(settings.rng_seed)
    n = settings.eb_draws
    latent = fit.approx.sample(rng, size=n)
    layout = fit.layout
    rates = np.empty((n, layout.num_areas, layout.num_years, 2))
    with np.errstate(over="ignore"):
        for s in range(n):
            rates[s] = np.exp(log_rate_field(layout, latent[s], fit.hyper))
    specs = _param_specs(layout)
    hyper_values = np.tile([_get_param(fit.hyper, s) for s in specs], (n, 1))
    return PosteriorSamples(
        layout=layout,
        latent=latent,
        hyper_names=[s.name for s in specs],
        hyper_values=hyper_values,
        rates=rates,
        diagnostics=dict(fit.diagnostics),
        settings=settings,
        first_year=first_year,
    )


def fit_model(cfg: ModelConfig, graph, panel: ObservationPanel,
              settings: FitSettings) -> PosteriorSamples:
    """Dispatch on ``settings.mode`` and always return posterior draws."""
    if settings.mode == "EmpiricalBayesLaplace":
        fit = fit_empirical_bayes(cfg, graph, panel, settings)
        return eb_posterior_samples(fit, settings, first_year=panel.first_year)
    return run_mcmc(cfg, graph, panel, settings)


def predictive_counts(
    samples: PosteriorSamples,
    panel: ObservationPanel,
    cells,
    seed: int | None = None,
) -> dict:
    """Posterior predictive count draws for the requested (area, year, disease) cells.

    For every retained draw the count is Poisson with mean
    ``population * rate``.  Draws are attached to ``samples.count_draws`` and
    returned.  ``seed`` defaults to the fit seed plus a fixed offset so the
    whole pipeline stays reproducible.
    """
    if seed is None:
        seed = samples.settings.rng_seed + 1_000_003
    rng = np.random.default_rng(seed)
    cells = [tuple(int(v) for v in c) for c in cells]
    if not cells:
        return {}
    a, t_total = samples.rates.shape[1], samples.rates.shape[2]
    for i, t, d in cells:
        if not (0 <= i < a and 0 <= t < t_total and d in (INCIDENCE, MORTALITY)):
            raise ValueError(f"cell {(i, t, d)} outside the fitted grid")
    idx = np.array(cells)
    lam = samples.rates[:, idx[:, 0], idx[:, 1], idx[:, 2]] * panel.populations[
        idx[:, 0], idx[:, 1], idx[:, 2]
    ]
    draws = rng.poisson(lam)
    out = {}
    for j, cell in enumerate(cells):
        arr = draws[:, j]
        out[cell] = arr
        samples.count_draws[cell] = arr
    return out


def forecast_horizon(
    cfg: ModelConfig,
    graph,
    panel: ObservationPanel,
    horizon: int,
    settings: FitSettings,
    projected_populations: np.ndarray | None = None,
) -> PosteriorSamples:
    """Fit with the panel extended by ``horizon`` all-missing future years.

    Temporal structures are rebuilt at the extended length inside the fit.
    ``projected_populations`` supplies exposures for the new years, shape
    (A, horizon) or (A, horizon, 2); with ``horizon == 0`` this is exactly
    :func:`fit_model` on the original panel.
    """
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    if horizon == 0:
        return fit_model(cfg, graph, panel, settings)
    if projected_populations is None:
        raise ValueError("projected populations are required for a positive horizon")
    extended = panel.extend_years(projected_populations)
    if extended.num_years != panel.num_years + horizon:
        raise ValueError(
            f"projected populations cover {extended.num_years - panel.num_years} years, "
            f"expected {horizon}"
        )
    return fit_model(cfg, graph, extended, settings)
