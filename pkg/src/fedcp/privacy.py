"""Gaussian output perturbation and the zero-concentrated DP ledger.

Budgets are tracked as rho values: serial releases add, releases over the
disjoint site partition average. Conversion to (epsilon, delta) reporting
uses the exact form rho + sqrt(4 rho ln(1/delta)) and the square-root
approximation sqrt(4 rho ln(1/delta)); natural logarithms throughout.
"""

import math
import threading
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError


@dataclass(frozen=True)
class PrivacyParams:
    """Per-epoch, per-factor-matrix budget. ``rho = math.inf`` disables noise."""

    rho: float = 1e-3
    delta: float = 1e-4

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive (math.inf disables noise)")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")

    @property
    def noise_disabled(self) -> bool:
        return math.isinf(self.rho)


def l2_sensitivity(tau: int, lipschitz: float, eta: float) -> float:
    """Worst-case output shift of a tau-pass run with bounded entry gradients:
    2 * tau * L * eta."""
    if tau <= 0 or lipschitz <= 0 or eta <= 0:
        raise ValueError("tau, lipschitz bound, and eta must all be positive")
    return 2.0 * tau * lipschitz * eta


def gaussian_sigma(sensitivity: float, rho: float) -> float:
    """Noise scale sigma = sensitivity * sqrt(1 / (2 rho))."""
    if sensitivity < 0:
        raise ValueError("sensitivity must be non-negative")
    if rho <= 0:
        raise ValueError("rho must be positive")
    if math.isinf(rho):
        return 0.0
    return sensitivity * math.sqrt(1.0 / (2.0 * rho))


def perturb_matrix(m: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add independent N(0, sigma^2) noise per element, drawn from ``rng`` only."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    m = np.asarray(m, dtype=np.float64)
    if sigma == 0.0:
        return m.copy()
    return m + rng.normal(0.0, sigma, size=m.shape)


def compose_serial(rhos) -> float:
    """Budget of a sequence of releases on the same data: the plain sum."""
    total = 0.0
    for r in rhos:
        if r < 0:
            raise ValueError("rho values must be non-negative")
        total += r
    return total


def compose_parallel(rhos_per_site, n_sites: int) -> float:
    """Budget across a disjoint partition: the average of the per-site budgets."""
    rhos = list(rhos_per_site)
    if len(rhos) != n_sites:
        raise DimensionError(f"expected {n_sites} per-site budgets, got {len(rhos)}")
    return compose_serial(rhos) / n_sites


def zcdp_to_dp(rho: float, delta: float) -> float:
    """Exact conversion: epsilon = rho + sqrt(4 rho ln(1/delta))."""
    if rho < 0:
        raise ValueError("rho must be non-negative")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    return rho + math.sqrt(4.0 * rho * math.log(1.0 / delta))


def zcdp_to_dp_approx(rho: float, delta: float) -> float:
    """Square-root approximation: epsilon = sqrt(4 rho ln(1/delta))."""
    if rho < 0:
        raise ValueError("rho must be non-negative")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    return math.sqrt(4.0 * rho * math.log(1.0 / delta))


def rho_for_target(epsilon: float, delta: float, epochs: int) -> float:
    """Per-epoch, per-matrix budget whose 2E-fold serial composition meets the
    (epsilon, delta) target under the approximate conversion:
    rho = epsilon^2 / (8 E ln(1/delta))."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if epochs <= 0:
        raise ValueError("epochs must be positive")
    return epsilon * epsilon / (8.0 * epochs * math.log(1.0 / delta))


@dataclass(frozen=True)
class LedgerEntry:
    epoch: int
    site_id: int
    matrix_tag: str
    rho: float
    sigma: float
    sensitivity: float


class PrivacyAccountant:
    """Append-only record of every noised release, with the running total.

    The total composes each site's releases serially and averages the
    per-site sums over the ``n_sites`` disjoint shards. Appends may arrive
    concurrently; the ledger is reported in (epoch, site_id, matrix_tag)
    order regardless of arrival order.
    """

    def __init__(self, n_sites: int, delta: float):
        if n_sites < 1:
            raise ValueError("n_sites must be at least 1")
        if not 0 < delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        self.n_sites = n_sites
        self.delta = delta
        self._entries: list[LedgerEntry] = []
        self._rho_sum = 0.0
        self._lock = threading.Lock()

    def record(self, epoch, site_id, matrix_tag, rho, sigma, sensitivity):
        if rho < 0:
            raise ValueError("rho must be non-negative")
        if not 0 <= site_id < self.n_sites:
            raise ValueError(f"site_id {site_id} outside [0, {self.n_sites})")
        entry = LedgerEntry(epoch, site_id, matrix_tag, rho, sigma, sensitivity)
        with self._lock:
            self._entries.append(entry)
            self._rho_sum += rho

    @property
    def ledger(self) -> list[LedgerEntry]:
        with self._lock:
            entries = list(self._entries)
        return sorted(entries, key=lambda e: (e.epoch, e.site_id, e.matrix_tag))

    @property
    def rho_total(self) -> float:
        with self._lock:
            return self._rho_sum / self.n_sites

    def replay_total(self) -> float:
        """Recompute the total from the ledger alone."""
        per_site = defaultdict(list)
        for entry in self.ledger:
            per_site[entry.site_id].append(entry.rho)
        sums = [compose_serial(per_site.get(t, [])) for t in range(self.n_sites)]
        return compose_parallel(sums, self.n_sites)

    def epsilon(self) -> tuple[float, float]:
        """Current (exact, approximate) epsilon at the accountant's delta."""
        rho = self.rho_total
        return zcdp_to_dp(rho, self.delta), zcdp_to_dp_approx(rho, self.delta)
