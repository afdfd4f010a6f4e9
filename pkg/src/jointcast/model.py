"""Model configurations, latent layouts, priors and linear predictors.

Four joint incidence-mortality models are supported.  All share a Poisson
observation stage; they differ in which latent components the two outcomes
share and how the shared components are loaded:

* ``Model1`` : shared spatial field (reciprocal loading), outcome-specific
  temporal random walks, outcome-specific space-time interactions.
* ``Model2`` : as Model1 but with a single shared temporal random walk,
  again reciprocally loaded.
* ``Model3`` : shared spatial field plus one shared space-time interaction
  with year-dependent reciprocal loadings; only mortality keeps its own
  temporal random walk.
* ``AdditiveBaseline`` : Model1 without any space-time interaction.

The latent vector is a flat concatenation of blocks.  Interaction blocks are
flattened area-fastest (index = year * num_areas + area).  The disease axis
everywhere is 0 = incidence, 1 = mortality.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .graphs import (
    AreaGraph,
    ConstraintSet,
    StructureMatrix,
    component_constraints,
    icar_structure,
    iid_structure,
    interaction_constraints,
    interaction_structure,
    rw1_structure,
    sum_to_zero_constraint,
)

INCIDENCE = 0
MORTALITY = 1

MODEL_IDS = ("Model1", "Model2", "Model3", "AdditiveBaseline")

#: ridge precision standing in for the flat prior on intercepts
INTERCEPT_RIDGE = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    """Choice of model and its prior settings.

    Parameters
    ----------
    model_id : str
        One of ``Model1``, ``Model2``, ``Model3``, ``AdditiveBaseline``.
    interaction_type : str or None
        Space-time interaction type "I".."IV"; must be None for the additive
        baseline and set for every other model.
    shared_interaction_precision : bool
        Models 1 and 2 only: use a single smoothing precision for both
        outcome-specific interaction fields instead of one each.
    num_rho : int
        Model 3 only: number of distinct year loadings for the shared
        interaction.  Years beyond the last one reuse it.
    sd_prior_upper : float
        Upper bound of the uniform prior on every random-effect standard
        deviation.
    gamma_shape, gamma_rate : float
        Gamma prior parameters for all loading parameters.
    """

    model_id: str = "Model3"
    interaction_type: str | None = "II"
    shared_interaction_precision: bool = False
    num_rho: int = 1
    sd_prior_upper: float = 10.0
    gamma_shape: float = 10.0
    gamma_rate: float = 10.0

    def __post_init__(self):
        if self.model_id not in MODEL_IDS:
            raise ValueError(f"unknown model_id {self.model_id!r}")
        if self.model_id == "AdditiveBaseline":
            if self.interaction_type is not None:
                raise ValueError("AdditiveBaseline must have interaction_type=None")
        elif self.interaction_type not in ("I", "II", "III", "IV"):
            raise ValueError(f"{self.model_id} needs interaction_type in I..IV")
        if self.num_rho < 1:
            raise ValueError("num_rho must be >= 1")
        if self.sd_prior_upper <= 0 or self.gamma_shape <= 0 or self.gamma_rate <= 0:
            raise ValueError("prior parameters must be positive")


@dataclass
class HyperParams:
    """Hyperparameters conditioned on which the latent field is Gaussian.

    ``precisions`` is keyed by precision-parameter name (see
    :func:`precision_parameter_names`).  Loadings are the asymmetry
    parameters: incidence receives ``loading * effect`` and mortality
    ``effect / loading``.
    """

    precisions: dict[str, float]
    spatial_loading: float = 1.0
    temporal_loading: float | None = None
    interaction_loadings: np.ndarray | None = None

    def validate(self) -> None:
        for name, tau in self.precisions.items():
            if not tau > 0:
                raise ValueError(f"precision {name} must be positive, got {tau}")
        if not self.spatial_loading > 0:
            raise ValueError("spatial_loading must be positive")
        if self.temporal_loading is not None and not self.temporal_loading > 0:
            raise ValueError("temporal_loading must be positive")
        if self.interaction_loadings is not None and not np.all(
            np.asarray(self.interaction_loadings) > 0
        ):
            raise ValueError("interaction_loadings must be positive")


@dataclass(frozen=True)
class Block:
    """One contiguous block of the flat latent vector."""

    label: str
    offset: int
    length: int
    structure: StructureMatrix | None  # None marks a flat-prior intercept
    constraints: ConstraintSet | None
    precision_key: str | None

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.length)


@dataclass(frozen=True)
class LatentLayout:
    """Ordered block structure of the latent field for one model."""

    cfg: ModelConfig
    num_areas: int
    num_years: int
    blocks: tuple[Block, ...]

    @property
    def total_dim(self) -> int:
        return sum(b.length for b in self.blocks)

    def block(self, label: str) -> Block:
        for b in self.blocks:
            if b.label == label:
                return b
        raise KeyError(f"no block labelled {label!r}")

    def has_block(self, label: str) -> bool:
        return any(b.label == label for b in self.blocks)

    def get(self, x: np.ndarray, label: str) -> np.ndarray:
        return x[self.block(label).slice]

    def set(self, x: np.ndarray, label: str, values: np.ndarray) -> None:
        b = self.block(label)
        if np.shape(values) != (b.length,):
            raise ValueError(f"block {label} expects length {b.length}")
        x[b.slice] = values

    def constraint_matrix(self) -> np.ndarray:
        """All block constraints embedded into rows over the full latent vector."""
        rows = []
        n = self.total_dim
        for b in self.blocks:
            if b.constraints is None:
                continue
            block_rows = b.constraints.matrix
            full = np.zeros((block_rows.shape[0], n))
            full[:, b.slice] = block_rows
            rows.append(full)
        if not rows:
            return np.zeros((0, n))
        return np.vstack(rows)

    def precision_parameter_names(self) -> list[str]:
        seen: list[str] = []
        for b in self.blocks:
            if b.precision_key is not None and b.precision_key not in seen:
                seen.append(b.precision_key)
        return seen

    def blocks_for_precision(self, key: str) -> list[Block]:
        return [b for b in self.blocks if b.precision_key == key]


@dataclass
class LatentState:
    """One configuration of the latent field plus its hyperparameters."""

    vector: np.ndarray
    hyper: HyperParams


def expand_year_loadings(loadings: np.ndarray, num_years: int, num_rho: int) -> np.ndarray:
    """Per-year loading vector; years past num_rho reuse the last value."""
    loadings = np.asarray(loadings, dtype=float)
    if loadings.shape != (num_rho,):
        raise ValueError(f"expected {num_rho} interaction loadings, got shape {loadings.shape}")
    idx = np.minimum(np.arange(num_years), num_rho - 1)
    return loadings[idx]


def build_layout(cfg: ModelConfig, graph: AreaGraph, num_years: int) -> LatentLayout:
    """Assemble the latent block layout for a model on a given map and span.

    Block order is fixed: intercepts, shared spatial field, unstructured
    mortality field, temporal blocks, interaction blocks.
    """
    num_areas = graph.num_areas
    if num_areas < 2 or num_years < 2:
        raise ValueError("need at least 2 areas and 2 years")
    if cfg.model_id == "Model3" and not (1 <= cfg.num_rho <= num_years):
        raise ValueError(f"num_rho must be within [1, {num_years}]")

    spatial = icar_structure(graph)
    temporal = rw1_structure(num_years)
    comp_labels = graph.component_labels()

    def chi_parts(label: str) -> tuple[StructureMatrix, ConstraintSet]:
        structure = interaction_structure(cfg.interaction_type, temporal, spatial)
        constraints = interaction_constraints(
            cfg.interaction_type, num_areas, num_years, comp_labels, block_label=label
        )
        return structure, constraints

    specs: list[tuple[str, int, StructureMatrix | None, ConstraintSet | None, str | None]] = [
        ("alpha_I", 1, None, None, None),
        ("alpha_M", 1, None, None, None),
        ("kappa", num_areas, spatial, component_constraints(graph, "kappa"), "kappa"),
        ("u", num_areas, iid_structure(num_areas), None, "u"),
    ]
    if cfg.model_id in ("Model1", "AdditiveBaseline"):
        specs.append(("gamma_I", num_years, temporal, sum_to_zero_constraint(num_years, "gamma_I"), "gamma_I"))
        specs.append(("gamma_M", num_years, temporal, sum_to_zero_constraint(num_years, "gamma_M"), "gamma_M"))
    elif cfg.model_id == "Model2":
        specs.append(("gamma_shared", num_years, temporal, sum_to_zero_constraint(num_years, "gamma_shared"), "gamma"))
    else:  # Model3: only mortality keeps its own temporal trend
        specs.append(("gamma_M", num_years, temporal, sum_to_zero_constraint(num_years, "gamma_M"), "gamma_M"))

    if cfg.model_id in ("Model1", "Model2"):
        key_i = "chi" if cfg.shared_interaction_precision else "chi_I"
        key_m = "chi" if cfg.shared_interaction_precision else "chi_M"
        s, c = chi_parts("chi_I")
        specs.append(("chi_I", num_areas * num_years, s, c, key_i))
        s, c = chi_parts("chi_M")
        specs.append(("chi_M", num_areas * num_years, s, c, key_m))
    elif cfg.model_id == "Model3":
        s, c = chi_parts("chi_shared")
        specs.append(("chi_shared", num_areas * num_years, s, c, "chi"))

    blocks = []
    offset = 0
    for label, length, structure, constraints, key in specs:
        blocks.append(Block(label, offset, length, structure, constraints, key))
        offset += length
    return LatentLayout(cfg=cfg, num_areas=num_areas, num_years=num_years, blocks=tuple(blocks))


def _loadings_for(layout: LatentLayout, hyper: HyperParams) -> tuple[float, float | None, np.ndarray | None]:
    cfg = layout.cfg
    lam = float(hyper.spatial_loading)
    tl = None
    yl = None
    if cfg.model_id == "Model2":
        if hyper.temporal_loading is None:
            raise ValueError("Model2 requires temporal_loading")
        tl = float(hyper.temporal_loading)
    if cfg.model_id == "Model3":
        if hyper.interaction_loadings is None:
            raise ValueError("Model3 requires interaction_loadings")
        yl = expand_year_loadings(hyper.interaction_loadings, layout.num_years, cfg.num_rho)
    return lam, tl, yl


def log_rate_field(layout: LatentLayout, x: np.ndarray, hyper: HyperParams) -> np.ndarray:
    """Log rates for every (area, year, disease) cell, shape (A, T, 2)."""
    cfg = layout.cfg
    a, t = layout.num_areas, layout.num_years
    lam, tl, yl = _loadings_for(layout, hyper)

    def mat(label: str) -> np.ndarray:
        # interaction blocks are year-major flat; view them as (A, T)
        return layout.get(x, label).reshape(t, a).T

    kappa = layout.get(x, "kappa")
    u = layout.get(x, "u")
    out = np.empty((a, t, 2))
    out[:, :, INCIDENCE] = layout.get(x, "alpha_I")[0] + lam * kappa[:, None]
    out[:, :, MORTALITY] = layout.get(x, "alpha_M")[0] + kappa[:, None] / lam + u[:, None]

    if cfg.model_id in ("Model1", "AdditiveBaseline"):
        out[:, :, INCIDENCE] += layout.get(x, "gamma_I")[None, :]
        out[:, :, MORTALITY] += layout.get(x, "gamma_M")[None, :]
    elif cfg.model_id == "Model2":
        shared = layout.get(x, "gamma_shared")
        out[:, :, INCIDENCE] += tl * shared[None, :]
        out[:, :, MORTALITY] += shared[None, :] / tl
    else:
        out[:, :, MORTALITY] += layout.get(x, "gamma_M")[None, :]

    if cfg.model_id in ("Model1", "Model2"):
        out[:, :, INCIDENCE] += mat("chi_I")
        out[:, :, MORTALITY] += mat("chi_M")
    elif cfg.model_id == "Model3":
        shared = mat("chi_shared")
        out[:, :, INCIDENCE] += yl[None, :] * shared
        out[:, :, MORTALITY] += shared / yl[None, :]
    return out


def linear_predictor(layout: LatentLayout, state: LatentState, i: int, t: int, d: int) -> float:
    """Log rate of one cell; see :func:`log_rate_field` for the full array."""
    cfg = layout.cfg
    x = state.vector
    lam, tl, yl = _loadings_for(layout, state.hyper)
    kappa_i = layout.get(x, "kappa")[i]
    flat = t * layout.num_areas + i
    if d == INCIDENCE:
        val = layout.get(x, "alpha_I")[0] + lam * kappa_i
        if cfg.model_id in ("Model1", "AdditiveBaseline"):
            val += layout.get(x, "gamma_I")[t]
        elif cfg.model_id == "Model2":
            val += tl * layout.get(x, "gamma_shared")[t]
        if cfg.model_id == "Model1" or cfg.model_id == "Model2":
            val += layout.get(x, "chi_I")[flat]
        elif cfg.model_id == "Model3":
            val += yl[t] * layout.get(x, "chi_shared")[flat]
        return float(val)
    if d == MORTALITY:
        val = layout.get(x, "alpha_M")[0] + kappa_i / lam + layout.get(x, "u")[i]
        if cfg.model_id in ("Model1", "AdditiveBaseline", "Model3"):
            val += layout.get(x, "gamma_M")[t]
        elif cfg.model_id == "Model2":
            val += layout.get(x, "gamma_shared")[t] / tl
        if cfg.model_id == "Model1" or cfg.model_id == "Model2":
            val += layout.get(x, "chi_M")[flat]
        elif cfg.model_id == "Model3":
            val += layout.get(x, "chi_shared")[flat] / yl[t]
        return float(val)
    raise ValueError(f"disease index must be {INCIDENCE} or {MORTALITY}, got {d}")


def quad_forms(layout: LatentLayout, x: np.ndarray) -> dict[str, float]:
    """Structure-matrix quadratic form of every structured block, by label."""
    out = {}
    for b in layout.blocks:
        if b.structure is None:
            continue
        xb = x[b.slice]
        out[b.label] = float(xb @ (b.structure.entries @ xb))
    return out


def gamma_log_pdf(value: float, shape: float, rate: float) -> float:
    """Log density of a Gamma(shape, rate) distribution."""
    if value <= 0:
        return -math.inf
    return shape * math.log(rate) - math.lgamma(shape) + (shape - 1.0) * math.log(value) - rate * value


def precision_log_prior(tau: float, sd_upper: float) -> float:
    """Log density of the precision implied by a uniform prior on the sd.

    sd = tau**-0.5 uniform on (0, sd_upper); the change of variables gives
    p(tau) = 1 / (2 * sd_upper) * tau**-1.5 on tau > sd_upper**-2.
    """
    if tau <= sd_upper ** -2:
        return -math.inf
    return -math.log(2.0 * sd_upper) - 1.5 * math.log(tau)


def loading_parameters(cfg: ModelConfig) -> list[str]:
    """Names of the loading parameters a model carries, in update order."""
    names = ["spatial_loading"]
    if cfg.model_id == "Model2":
        names.append("temporal_loading")
    if cfg.model_id == "Model3":
        names.extend(f"interaction_loading_{k + 1}" for k in range(cfg.num_rho))
    return names


def log_prior(layout: LatentLayout, state: LatentState, hyper: HyperParams, cfg: ModelConfig) -> float:
    """Unnormalized joint log prior of the latent field and hyperparameters.

    Gaussian blocks contribute ``rank/2 * log(tau) - tau/2 * x'Rx`` with rank
    the structure rank (pseudo-determinant convention); loadings contribute
    Gamma log densities; precisions the uniform-sd terms; intercepts are flat.
    """
    total = 0.0
    quads = quad_forms(layout, state.vector)
    for key in layout.precision_parameter_names():
        tau = hyper.precisions[key]
        total += precision_log_prior(tau, cfg.sd_prior_upper)
        if not math.isfinite(total):
            return -math.inf
        for b in layout.blocks_for_precision(key):
            rank = b.structure.dim - b.structure.null_dim
            total += 0.5 * rank * math.log(tau) - 0.5 * tau * quads[b.label]
    total += gamma_log_pdf(hyper.spatial_loading, cfg.gamma_shape, cfg.gamma_rate)
    if cfg.model_id == "Model2":
        total += gamma_log_pdf(hyper.temporal_loading, cfg.gamma_shape, cfg.gamma_rate)
    if cfg.model_id == "Model3":
        for v in np.asarray(hyper.interaction_loadings):
            total += gamma_log_pdf(float(v), cfg.gamma_shape, cfg.gamma_rate)
    return total


def joint_prior_precision(layout: LatentLayout, hyper: HyperParams) -> sp.csc_matrix:
    """Block-diagonal prior precision of the latent field given hyperparameters.

    Intercept blocks receive the small ridge standing in for their flat
    prior; every structured block is its structure matrix scaled by the
    block's precision parameter.
    """
    parts = []
    for b in layout.blocks:
        if b.structure is None:
            parts.append(INTERCEPT_RIDGE * sp.identity(b.length, format="csr"))
        else:
            parts.append(hyper.precisions[b.precision_key] * b.structure.entries)
    return sp.block_diag(parts, format="csc")
