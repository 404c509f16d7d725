"""Empirical distances, quartet resolution, and parameter calibration.

The empirical distance between two +/-1 rows is -log(mean agreement)/2;
when the empirical correlation is nonpositive the value saturates to
math.inf, which every threshold comparison treats as "farther than the
estimator can certify". fpm/me resolve quartets per the four-point method,
and calibrate searches an epsilon grid for settings whose concentration
bound meets the requested failure budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ancestral
from .trees import LAMBDA0

SATURATED = math.inf

EPSILON_GRID_SIZE = 512
EPSILON_GRID_LO = 1e-4
EPSILON_GRID_HI = 0.9 * LAMBDA0


def is_saturated(x: float) -> bool:
    return math.isinf(x)


def empirical_distance(row_u, row_v) -> float:
    """Distance estimate from two +/-1 rows; SATURATED if correlation <= 0."""
    u = np.asarray(row_u)
    v = np.asarray(row_v)
    if u.shape != v.shape or u.ndim != 1 or u.size == 0:
        raise ValueError("rows must be equal-length non-empty vectors")
    disagreements = int(np.count_nonzero(u != v))
    corr = 1.0 - 2.0 * disagreements / u.size
    if corr <= 0.0:
        return SATURATED
    return -0.5 * math.log(corr)


@dataclass(frozen=True)
class FpmResult:
    grouping: tuple | None  # ((a, b), (c, d)) over the given items, or None
    saturated: bool = False
    degenerate: bool = False

    @property
    def ok(self) -> bool:
        return self.grouping is not None


def fpm(dist, a, b, c, d) -> FpmResult:
    """Four-point method over items (a, b, c, d) with distance callable dist.

    Returns the grouping with the strictly smallest within-pair sum. A
    saturated input or an exact tie for the minimum is surfaced, never
    silently broken.
    """
    items = (a, b, c, d)
    vals = {}
    for i in range(4):
        for j in range(i + 1, 4):
            x = dist(items[i], items[j])
            if is_saturated(x):
                return FpmResult(None, saturated=True)
            vals[(i, j)] = x
    sums = [
        vals[(0, 1)] + vals[(2, 3)],
        vals[(0, 2)] + vals[(1, 3)],
        vals[(0, 3)] + vals[(1, 2)],
    ]
    groupings = (((a, b), (c, d)), ((a, c), (b, d)), ((a, d), (b, c)))
    order = sorted(range(3), key=lambda i: sums[i])
    if sums[order[0]] == sums[order[1]]:
        return FpmResult(None, degenerate=True)
    return FpmResult(groupings[order[0]])


def me(dist, pair1, pair2) -> float:
    """Middle-path length of the quartet grouping (pair1 | pair2)."""
    a, b = pair1
    c, d = pair2
    terms = [dist(a, c), dist(b, d), dist(b, c), dist(a, d), dist(a, b), dist(c, d)]
    if any(is_saturated(t) for t in terms):
        raise ValueError("middle-edge estimate needs six finite distances")
    return (terms[0] + terms[1] + terms[2] + terms[3] - 2 * terms[4] - 2 * terms[5]) / 4.0


def failure_bound(m_dist: float, eps_dist: float, n_sites: int) -> float:
    """Per-pair probability bound on a deviation of eps/2 below threshold m.

    Evaluates 1.5 * exp(-(1 - e^-eps)^2 * e^(-4m) * N / 8) in distance units.
    """
    if m_dist <= 0 or eps_dist <= 0 or n_sites < 1:
        raise ValueError("need positive distances and at least one site")
    expo = (1.0 - math.exp(-eps_dist)) ** 2 * math.exp(-4.0 * m_dist) * n_sites / 8.0
    return 1.5 * math.exp(-expo)


def failure_bound_prob_form(y: float, z: float, n_sites: int) -> float:
    """Same bound parameterized by flip probabilities y (threshold) and z (slack)."""
    if not (0 < y < 0.5) or not (0 < z < 0.5) or n_sites < 1:
        raise ValueError("probabilities must be in (0, 0.5)")
    expo = (1.0 - math.sqrt(1.0 - 2.0 * z)) ** 2 * (1.0 - 2.0 * y) ** 2 * n_sites / 8.0
    return 1.5 * math.exp(-expo)


# -- reconstruction parameters -------------------------------------------------


@dataclass(frozen=True)
class ReconstructionParams:
    """Calibrated thresholds governing every guard in the reconstruction.

    certified is True when the concentration inequality
    failure_bound(big_m, epsilon, n_sites) < xi / (16 n^2) holds, i.e. when
    the failure budget xi is rigorously met. Practical operating points at
    simulatable sequence lengths are typically not certified.
    """

    epsilon: float
    lambda_max: float
    depth: int
    beta: float
    big_m: float
    xi: float
    n_sites: int
    n_taxa: int
    certified: bool

    def __post_init__(self):
        if not (0 < self.epsilon < LAMBDA0):
            raise ValueError("epsilon must be in (0, lambda0)")
        if not (0 < self.xi < 1):
            raise ValueError("xi must be in (0, 1)")
        expected_m = 24.0 * LAMBDA0 + 6.0 * self.beta + 12.0 * self.epsilon
        if abs(self.big_m - expected_m) > 1e-9:
            raise ValueError("big_m must equal 24*lambda0 + 6*beta + 12*epsilon")
        if abs(self.lambda_max - (LAMBDA0 - self.epsilon)) > 1e-12:
            raise ValueError("lambda_max must equal lambda0 - epsilon")

    # threshold helpers used throughout the merge algorithm
    @property
    def queue_cutoff(self) -> float:
        return self.big_m / 3.0 - self.epsilon

    @property
    def seed_cutoff(self) -> float:
        return self.big_m / 2.0 + self.epsilon

    @property
    def diameter_cutoff(self) -> float:
        return self.big_m - self.epsilon

    @property
    def min_edge(self) -> float:
        return 3.0 * self.epsilon

    @property
    def proper_cutoff(self) -> float:
        return LAMBDA0 - 2.0 * self.epsilon

    @property
    def long_edge_max(self) -> float:
        return 2.0 * LAMBDA0 - 5.0 * self.epsilon

    @property
    def bound_value(self) -> float:
        return failure_bound(self.big_m, self.epsilon, self.n_sites)

    @property
    def budget(self) -> float:
        return self.xi / (16.0 * self.n_taxa**2)

    def recovery_band(self) -> tuple[float, float]:
        """Edge-length interval [6 eps, lambda0 - 3 eps] for full recovery."""
        return 6.0 * self.epsilon, LAMBDA0 - 3.0 * self.epsilon

    def to_text(self) -> str:
        keys = [
            ("epsilon", repr(self.epsilon)),
            ("lambda_max", repr(self.lambda_max)),
            ("depth", str(self.depth)),
            ("beta", repr(self.beta)),
            ("big_m", repr(self.big_m)),
            ("xi", repr(self.xi)),
            ("sites", str(self.n_sites)),
            ("taxa", str(self.n_taxa)),
            ("certified", "true" if self.certified else "false"),
        ]
        return "\n".join(f"{k}={v}" for k, v in keys) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ReconstructionParams":
        kv = dict(line.split("=", 1) for line in text.strip().splitlines() if "=" in line)
        return cls(
            epsilon=float(kv["epsilon"]),
            lambda_max=float(kv["lambda_max"]),
            depth=int(kv["depth"]),
            beta=float(kv["beta"]),
            big_m=float(kv["big_m"]),
            xi=float(kv["xi"]),
            n_sites=int(kv["sites"]),
            n_taxa=int(kv["taxa"]),
            certified=kv["certified"] == "true",
        )


class CalibrationInfeasibleError(ValueError):
    """No grid epsilon certifies the failure budget at this sequence length."""

    def __init__(self, message: str, min_feasible_sites: int):
        super().__init__(message)
        self.min_feasible_sites = min_feasible_sites


def epsilon_grid() -> np.ndarray:
    return np.geomspace(EPSILON_GRID_LO, EPSILON_GRID_HI, EPSILON_GRID_SIZE)


def _params_at(epsilon: float, depth_choice, n_sites, n_taxa, xi):
    """(depth, beta, M) at a grid epsilon, or None when learning is infeasible."""
    lam = LAMBDA0 - epsilon
    depth = depth_choice if depth_choice is not None else ancestral.default_depth(lam)
    if depth is None:
        return None
    try:
        beta = ancestral.calibrate_beta(lam, depth).beta
    except ancestral.DepthInfeasibleError:
        return None
    big_m = 24.0 * LAMBDA0 + 6.0 * beta + 12.0 * epsilon
    return depth, beta, big_m


def min_sites_for(epsilon: float, big_m: float, n_taxa: int, xi: float) -> int:
    """Smallest N with failure_bound(big_m, epsilon, N) < xi / (16 n^2)."""
    budget = xi / (16.0 * n_taxa**2)
    denom = (1.0 - math.exp(-epsilon)) ** 2 * math.exp(-4.0 * big_m) / 8.0
    n = math.ceil(math.log(1.5 / budget) / denom) + 1
    while failure_bound(big_m, epsilon, n) >= budget:
        n *= 2
    return n


def calibrate(n_sites: int, n_taxa: int, xi: float, depth: int | None = None) -> ReconstructionParams:
    """Smallest grid epsilon whose certified parameters meet the budget.

    Raises CalibrationInfeasibleError carrying the minimal sequence length
    that would succeed at the largest workable grid epsilon.
    """
    if n_sites < 1 or n_taxa < 1:
        raise ValueError("need positive counts")
    if not (0 < xi < 1):
        raise ValueError("xi must be in (0, 1)")
    budget = xi / (16.0 * n_taxa**2)
    best_fallback = None
    for eps in epsilon_grid():
        eps = float(eps)
        got = _params_at(eps, depth, n_sites, n_taxa, xi)
        if got is None:
            continue
        d, beta, big_m = got
        best_fallback = (eps, big_m)
        if failure_bound(big_m, eps, n_sites) < budget:
            return ReconstructionParams(
                epsilon=eps,
                lambda_max=LAMBDA0 - eps,
                depth=d,
                beta=beta,
                big_m=big_m,
                xi=xi,
                n_sites=n_sites,
                n_taxa=n_taxa,
                certified=True,
            )
    if best_fallback is None:
        raise CalibrationInfeasibleError("no grid epsilon admits a learning depth", -1)
    eps, big_m = best_fallback
    need = min_sites_for(eps, big_m, n_taxa, xi)
    raise CalibrationInfeasibleError(
        f"{n_sites} sites cannot certify xi={xi} for {n_taxa} taxa; "
        f"need at least {need} sites at the largest grid epsilon {eps:.6g}",
        need,
    )


def operating_params(
    n_sites: int,
    n_taxa: int,
    xi: float,
    epsilon: float,
    depth: int | None = None,
) -> ReconstructionParams:
    """Parameters at a user-chosen epsilon, certified or not.

    When the requested depth has no self-consistent noise bound, beta falls
    back to the noise after as many learning rounds as a tree on n_taxa
    leaves can require, which is what a finite run actually experiences.
    """
    if not (0 < epsilon < LAMBDA0):
        raise ValueError("epsilon must be in (0, lambda0)")
    lam = LAMBDA0 - epsilon
    d = depth if depth is not None else (ancestral.default_depth(lam) or 3)
    try:
        beta = ancestral.calibrate_beta(lam, d).beta
    except ancestral.DepthInfeasibleError:
        rounds = max(1, math.ceil(math.ceil(math.log2(max(2, n_taxa))) / d)) + 1
        beta = ancestral.iterated_noise_bound(lam, d, rounds)
    big_m = 24.0 * LAMBDA0 + 6.0 * beta + 12.0 * epsilon
    certified = failure_bound(big_m, epsilon, n_sites) < xi / (16.0 * n_taxa**2)
    return ReconstructionParams(
        epsilon=epsilon,
        lambda_max=lam,
        depth=d,
        beta=beta,
        big_m=big_m,
        xi=xi,
        n_sites=n_sites,
        n_taxa=n_taxa,
        certified=certified,
    )
