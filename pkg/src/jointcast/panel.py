"""Observed count panel over areas, years and the two outcomes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import INCIDENCE, MORTALITY  # noqa: F401  (re-exported for callers)

DISEASES = ("incidence", "mortality")


@dataclass
class ObservationPanel:
    """Counts and populations on the (area, year, disease) grid.

    ``counts`` entries at missing cells are ignored (set to 0 internally);
    ``missing`` is the authoritative mask.  Populations must be positive
    everywhere, including missing-count cells, because predictive draws for
    those cells still need an exposure.
    """

    counts: np.ndarray  # (A, T, 2) float
    populations: np.ndarray  # (A, T, 2) float, > 0
    missing: np.ndarray  # (A, T, 2) bool
    first_year: int = 0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=float)
        self.populations = np.asarray(self.populations, dtype=float)
        self.missing = np.asarray(self.missing, dtype=bool)
        if self.counts.ndim != 3 or self.counts.shape[2] != 2:
            raise ValueError(f"counts must have shape (A, T, 2), got {self.counts.shape}")
        if self.populations.shape != self.counts.shape or self.missing.shape != self.counts.shape:
            raise ValueError("counts, populations and missing must share one shape")
        if not np.all(self.populations > 0):
            raise ValueError("populations must be strictly positive everywhere")
        observed = ~self.missing
        vals = self.counts[observed]
        if np.any(vals < 0) or np.any(vals != np.round(vals)):
            raise ValueError("observed counts must be non-negative integers")
        self.counts = np.where(self.missing, 0.0, self.counts)

    @property
    def num_areas(self) -> int:
        return self.counts.shape[0]

    @property
    def num_years(self) -> int:
        return self.counts.shape[1]

    @property
    def years(self) -> np.ndarray:
        return self.first_year + np.arange(self.num_years)

    def num_observed(self) -> int:
        return int((~self.missing).sum())

    def copy(self) -> "ObservationPanel":
        return ObservationPanel(
            counts=self.counts.copy(),
            populations=self.populations.copy(),
            missing=self.missing.copy(),
            first_year=self.first_year,
        )

    def with_extra_missing(self, mask: np.ndarray) -> "ObservationPanel":
        """New panel with additional cells marked missing."""
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != self.missing.shape:
            raise ValueError("mask shape mismatch")
        out = self.copy()
        out.missing = self.missing | mask
        out.counts = np.where(out.missing, 0.0, out.counts)
        return out

    def restrict_years(self, num_years: int) -> "ObservationPanel":
        """Panel truncated to the first ``num_years`` years."""
        if not (1 <= num_years <= self.num_years):
            raise ValueError(f"num_years must be in [1, {self.num_years}]")
        return ObservationPanel(
            counts=self.counts[:, :num_years].copy(),
            populations=self.populations[:, :num_years].copy(),
            missing=self.missing[:, :num_years].copy(),
            first_year=self.first_year,
        )

    def extend_years(self, extra_populations: np.ndarray) -> "ObservationPanel":
        """Append future years with all counts missing.

        ``extra_populations`` has shape (A, horizon, 2), or (A, horizon) to
        use one exposure for both outcomes.
        """
        extra = np.asarray(extra_populations, dtype=float)
        if extra.ndim == 2:
            extra = np.repeat(extra[:, :, None], 2, axis=2)
        if extra.ndim != 3 or extra.shape[0] != self.num_areas or extra.shape[2] != 2:
            raise ValueError("extra populations must have shape (A, horizon[, 2])")
        if not np.all(extra > 0):
            raise ValueError("projected populations must be positive")
        horizon = extra.shape[1]
        return ObservationPanel(
            counts=np.concatenate([self.counts, np.zeros((self.num_areas, horizon, 2))], axis=1),
            populations=np.concatenate([self.populations, extra], axis=1),
            missing=np.concatenate(
                [self.missing, np.ones((self.num_areas, horizon, 2), dtype=bool)], axis=1
            ),
            first_year=self.first_year,
        )

    def observed_rates(self) -> np.ndarray:
        """Crude rates count/population, NaN at missing cells."""
        rates = self.counts / self.populations
        return np.where(self.missing, np.nan, rates)


def poisson_loglik(panel: ObservationPanel, log_rates: np.ndarray) -> tuple[float, int]:
    """Poisson log likelihood over the observed cells and the term count.

    Returns the log likelihood (dropping the factorial constant) and the
    number of cells that contributed, which callers can audit against
    ``panel.num_observed()``.
    """
    obs = ~panel.missing
    eta = log_rates[obs] + np.log(panel.populations[obs])
    with np.errstate(over="ignore"):
        mu = np.exp(eta)
    value = float(np.sum(panel.counts[obs] * eta - mu))
    return value, int(obs.sum())
