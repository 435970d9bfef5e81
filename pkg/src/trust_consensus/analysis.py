"""Closed-form deviation bounds, recovery times and deviation metrics.

ℓ₁ and ℓ₂ are evaluated unscaled; the minimum Perron entry ``v_m`` enters
once, in :func:`u_leg`. The exact anchoring product is available next to the
minorant ``ℓ₂ = 1 - e^{s(γ)}`` for the limit and regime checks that only hold
against the exact quantity.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np
import pandas as pd
from scipy.special import spence

from trust_consensus.errors import DomainError, NumericalError
from trust_consensus.protocol import (
    LambdaSchedule,
    NominalReference,
    RunTrace,
    first_stable_round,
    nominal_weights,
    online_weights,
)
from trust_consensus.topology import NetworkTopology, max_legit_in_degree
from trust_consensus.trust import TrustModel

logger = logging.getLogger(__name__)

BOUND_COLUMNS = ("gamma", "c", "Tf", "ell1", "ell2", "ell", "s_gamma", "xi", "u_leg", "u_mal", "u_total")

_SERIES_CUTOFF = 1e-4
_PRODUCT_CHUNK = 1 << 16
_LOG_UNDERFLOW = -800.0

Anchoring = Literal["minorant", "exact"]


def _check_schedule(c: float, gamma: float) -> None:
    if not 0.0 < c < 1.0:
        raise DomainError(f"c must be in (0, 1), got {c}")
    if not gamma > 0.0:
        raise DomainError(f"gamma must be positive, got {gamma}")


def _check_eps(eps: float) -> None:
    if not eps > 0.0:
        raise DomainError(f"epsilon must be positive, got {eps}")


# ─── anchoring exponent ──────────────────────────────────────────────────────


def _s_bar(x: float) -> float:
    """s̄(x) = Σ_{k≥1} x^k / (k(k+1)) = 1 + (1-x)ln(1-x)/x."""
    if x < _SERIES_CUTOFF:
        total, power, k = 0.0, x, 1
        while power > 1e-18 * max(total, 1e-300):
            total += power / (k * (k + 1))
            k += 1
            power *= x
        return total
    return 1.0 + (1.0 - x) * math.log1p(-x) / x


def s_of_gamma(c: float, gamma: float) -> float:
    """s(γ) = -s̄(c·e^{-γ})/γ, always negative."""
    _check_schedule(c, gamma)
    return -_s_bar(c * math.exp(-gamma)) / gamma


def ell2(c: float, gamma: float) -> float:
    """Minorant ℓ₂ = 1 - e^{s(γ)}."""
    return -math.expm1(s_of_gamma(c, gamma))


def dilog_exponent(c: float, gamma: float) -> float:
    """-Li₂(c·e^{-γ})/γ, the log of the tightest bound on Π_{k≥1}(1 - λ_k) in the chain."""
    _check_schedule(c, gamma)
    return -float(spence(1.0 - c * math.exp(-gamma))) / gamma


def anchoring_product(c: float, gamma: float, start: int = 0) -> float:
    """Π_{k≥start} (1 - c·e^{-γk}), truncated once terms fall below one ulp."""
    _check_schedule(c, gamma)
    log_total = 0.0
    k = start
    while True:
        ks = np.arange(k, k + _PRODUCT_CHUNK, dtype=float)
        terms = c * np.exp(-gamma * ks)
        log_total += float(np.log1p(-terms).sum())
        if log_total < _LOG_UNDERFLOW:
            return 0.0
        if terms[-1] < np.finfo(float).eps / 2:
            return math.exp(log_total)
        k += _PRODUCT_CHUNK


def ell2_exact(c: float, gamma: float) -> float:
    return 1.0 - anchoring_product(c, gamma)


def ell1(c: float, gamma: float, tf: int, d_max: int) -> float:
    """Legitimate-contribution term ℓ₁ for a recovery time ``tf``."""
    _check_schedule(c, gamma)
    if tf < 0:
        raise DomainError(f"recovery time must be non-negative, got {tf}")
    one_minus_q = -math.expm1(-gamma)
    decay = math.exp(math.log1p(-c * math.exp(-gamma * max(tf, 1))) / one_minus_q)
    bracket = c * math.exp(-gamma * max(tf - 1, 0))
    if tf > 1:
        ratio = (1.0 - c * math.exp(-gamma)) / (d_max + 1)
        bracket += c * ratio ** (tf - 1) * math.expm1(-gamma * (tf - 1)) / math.expm1(-gamma)
    return decay * bracket


def xi(c: float, gamma: float, e_malicious: float) -> float:
    """Limit of Σ_k (1 - λ_{k+1})(1 - λ_k) e^{-2(k+1)E_M²}.

    ``c = 0`` is accepted and reduces to the geometric sum 1/(e^{2E²} - 1).
    """
    if e_malicious == 0:
        raise DomainError("E_M must be non-zero")
    if not 0.0 <= c < 1.0:
        raise DomainError(f"c must be in [0, 1), got {c}")
    if not gamma > 0.0:
        raise DomainError(f"gamma must be positive, got {gamma}")
    a = math.expm1(2.0 * e_malicious**2)
    q = math.exp(-gamma)
    return 1.0 / a - c * (1.0 + q) / (a - math.expm1(-gamma)) + c * c * q / (a - math.expm1(-2.0 * gamma))


# ─── deviation bounds ────────────────────────────────────────────────────────


@dataclass(frozen=True)
class BoundParams:
    c: float
    gamma: float
    d_max: int
    e_legit: float
    e_malicious: float
    legit_count: int
    malicious_count: int
    v_min: float
    eta: float = 1.0
    tf_samples: tuple[int, ...] = (0,)

    def __post_init__(self) -> None:
        _check_schedule(self.c, self.gamma)
        problems = []
        if not self.e_legit > 0:
            problems.append(f"E_L must be positive, got {self.e_legit}")
        if not self.e_malicious < 0:
            problems.append(f"E_M must be negative, got {self.e_malicious}")
        if not 0.0 < self.v_min <= 1.0:
            problems.append(f"v_m must be in (0, 1], got {self.v_min}")
        if not self.eta > 0:
            problems.append(f"eta must be positive, got {self.eta}")
        if not self.tf_samples:
            problems.append("at least one recovery-time sample is required")
        if problems:
            raise DomainError("; ".join(problems))
        object.__setattr__(self, "tf_samples", tuple(int(t) for t in self.tf_samples))

    @classmethod
    def from_topology(
        cls,
        topo: NetworkTopology,
        trust_model: TrustModel,
        schedule: LambdaSchedule,
        tf_samples: Sequence[int] = (0,),
        eta: float = 1.0,
        reference: NominalReference | None = None,
    ) -> "BoundParams":
        reference = reference or NominalReference.of(topo)
        return cls(
            c=schedule.c,
            gamma=schedule.gamma,
            d_max=max_legit_in_degree(topo),
            e_legit=trust_model.e_legit,
            e_malicious=trust_model.e_malicious,
            legit_count=topo.legit_count,
            malicious_count=topo.malicious_count,
            v_min=float(reference.perron.min()),
            eta=eta,
            tf_samples=tuple(tf_samples),
        )

    @property
    def expected_tf(self) -> float:
        return float(np.mean(self.tf_samples))

    def expected_ell(self) -> float:
        """E[min(ℓ₁, ℓ₂)] over the recovery-time samples."""
        l2 = ell2(self.c, self.gamma)
        cache: dict[int, float] = {}
        for tf in set(self.tf_samples):
            cache[tf] = min(ell1(self.c, self.gamma, tf, self.d_max), l2)
        return float(np.mean([cache[tf] for tf in self.tf_samples]))


def u_leg(eps: float, params: BoundParams) -> float:
    _check_eps(eps)
    anchored = math.exp(s_of_gamma(params.c, params.gamma))
    settle = 1.0 - (1.0 / (params.d_max + 1)) ** params.expected_tf
    return (2.0 / eps) * (anchored * settle + 1.0 - params.v_min * params.expected_ell())


def u_mal(eps: float, params: BoundParams) -> float:
    _check_eps(eps)
    exposure = params.legit_count * min(params.d_max, params.malicious_count)
    if exposure == 0:
        return 0.0
    return exposure / (2.0 * eps) * xi(params.c, params.gamma, params.e_malicious)


def u_total(eps: float, params: BoundParams) -> float:
    _check_eps(eps)
    return u_leg(eps / 2.0, params) + u_mal(eps / 2.0, params)


@dataclass(frozen=True)
class BoundReport:
    gamma: float
    c: float
    tf: float
    ell1: float
    ell2: float
    ell: float
    s_gamma: float
    xi: float
    u_leg: float
    u_mal: float
    u_total: float

    def as_row(self) -> dict[str, float]:
        values = (
            self.gamma, self.c, self.tf, self.ell1, self.ell2, self.ell,
            self.s_gamma, self.xi, self.u_leg, self.u_mal, self.u_total,
        )
        return dict(zip(BOUND_COLUMNS, values))


def bound_report(params: BoundParams, eps: float) -> BoundReport:
    """Every analytical quantity for one parameterization; ℓ columns are sample means."""
    total = u_total(eps, params)
    if params.eta * total > 1.0:
        logger.warning("bound is vacuous at gamma=%g: eta*u=%.3g", params.gamma, params.eta * total)
    return BoundReport(
        gamma=params.gamma,
        c=params.c,
        tf=params.expected_tf,
        ell1=float(np.mean([ell1(params.c, params.gamma, tf, params.d_max) for tf in params.tf_samples])),
        ell2=ell2(params.c, params.gamma),
        ell=params.expected_ell(),
        s_gamma=s_of_gamma(params.c, params.gamma),
        xi=xi(params.c, params.gamma, params.e_malicious),
        u_leg=u_leg(eps / 2.0, params),
        u_mal=u_mal(eps / 2.0, params),
        u_total=total,
    )


# ─── ℓ profile ───────────────────────────────────────────────────────────────


@dataclass(frozen=True, eq=False)
class EllProfile:
    """-v_m·min(ℓ₁, ℓ₂) for every (T_f, γ) cell; rows follow ``tf_values``."""

    gammas: np.ndarray
    tf_values: tuple[int, ...]
    neg_ell: np.ndarray
    ell1_selected: np.ndarray

    def argmin(self) -> dict[int, float]:
        """γ minimizing -ℓ for each recovery time."""
        return {tf: float(self.gammas[int(np.argmin(row))]) for tf, row in zip(self.tf_values, self.neg_ell)}

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"Tf": tf, "gamma": float(g), "neg_ell": float(v), "ell1_selected": bool(sel)}
            for tf, vals, sels in zip(self.tf_values, self.neg_ell, self.ell1_selected)
            for g, v, sel in zip(self.gammas, vals, sels)
        ]
        return pd.DataFrame(rows, columns=["Tf", "gamma", "neg_ell", "ell1_selected"])


def ell_profile(
    c: float,
    d_max: int,
    v_min: float,
    tf_values: Iterable[int],
    gammas: Iterable[float],
    anchoring: Anchoring = "minorant",
) -> EllProfile:
    """Tabulate -ℓ over γ for each T_f.

    ``anchoring="exact"`` compares ℓ₁ against ``1 - Π(1 - λ_k)`` instead of
    the minorant ``1 - e^{s(γ)}``.
    """
    grid = np.asarray(list(gammas), dtype=float)
    tfs = tuple(int(t) for t in tf_values)
    if not grid.size or not tfs:
        raise DomainError("ell profile needs a non-empty gamma grid and T_f range")
    if anchoring not in ("minorant", "exact"):
        raise DomainError(f"unknown anchoring {anchoring!r}")
    second = ell2_exact if anchoring == "exact" else ell2
    l2 = np.array([second(c, g) for g in grid])
    neg = np.empty((len(tfs), grid.size))
    first_wins = np.empty_like(neg, dtype=bool)
    for row, tf in enumerate(tfs):
        l1 = np.array([ell1(c, g, tf, d_max) for g in grid])
        first_wins[row] = l1 <= l2
        neg[row] = -v_min * np.minimum(l1, l2)
    return EllProfile(gammas=grid, tf_values=tfs, neg_ell=neg, ell1_selected=first_wins)


# ─── recovery times ──────────────────────────────────────────────────────────


def empirical_recovery_time(trace: RunTrace, topo: NetworkTopology) -> int | None:
    """First round from which the online weights stay nominal; None when unresolved."""
    if trace.legit_count != topo.legit_count:
        raise DomainError(
            f"trace has {trace.legit_count} legitimate agents, topology has {topo.legit_count}"
        )
    return first_stable_round(trace.weights_nominal)


def resolved_recovery_times(times: Iterable[int | None]) -> tuple[list[int], int]:
    """Split recovery times into resolved values and the unresolved count."""
    resolved, unresolved = [], 0
    for t in times:
        if t is None:
            unresolved += 1
        else:
            resolved.append(int(t))
    return resolved, unresolved


def recovery_time_proxy(topo: NetworkTopology, trust_model: TrustModel) -> float:
    """Union-bound estimate Σ_t min(1, Σ_edges e^{-2E²(t+1)}/(1 - e^{-2E²})) of E[T_f]."""
    edges = topo.monitored_edges()
    n_malicious = int(np.count_nonzero(edges[:, 1] >= topo.legit_count))
    kinds = [(len(edges) - n_malicious, trust_model.e_legit), (n_malicious, trust_model.e_malicious)]
    kinds = [(count, e) for count, e in kinds if count]
    if not kinds:
        return 0.0
    slowest = min(2.0 * e * e for _, e in kinds)
    scale = sum(count / -math.expm1(-2.0 * e * e) for count, e in kinds)
    horizon = int(math.ceil((math.log(scale) + 40.0) / slowest)) + 1
    t = np.arange(horizon, dtype=float)
    tail = np.zeros(horizon)
    for count, e in kinds:
        rate = 2.0 * e * e
        tail += count * np.exp(-rate * (t + 1.0)) / -math.expm1(-rate)
    return float(np.minimum(tail, 1.0).sum())


# ─── deviation metrics ───────────────────────────────────────────────────────


@dataclass(frozen=True, eq=False)
class DeviationMetrics:
    """Per-agent deviation series, shape ``(horizon + 1, L)``."""

    total: np.ndarray
    legit: np.ndarray
    malicious: np.ndarray

    def final_max(self) -> tuple[float, float, float]:
        """Max over agents at the final round of e, e^L and e^M."""
        return float(self.total[-1].max()), float(self.legit[-1].max()), float(self.malicious[-1].max())

    def triangle_slack(self) -> float:
        """min over rounds and agents of e^L + e^M - e; never below -1e-12."""
        return float((self.legit + self.malicious - self.total).min())


def deviation_metrics(trace: RunTrace, x_ss: float | None = None) -> DeviationMetrics:
    target = trace.x_ss if x_ss is None else x_ss
    return DeviationMetrics(
        total=np.abs(trace.x_legit - target),
        legit=np.abs(trace.contrib_legit - target),
        malicious=np.abs(trace.contrib_malicious),
    )


@dataclass(frozen=True)
class DeviationSummary:
    """Mean over runs of the per-run final-round maxima, with standard errors."""

    runs: int
    mean_total: float
    se_total: float
    mean_legit: float
    se_legit: float
    mean_malicious: float
    se_malicious: float


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    if values.size < 2:
        return float(values.mean()), 0.0
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))


def aggregate_deviation(metrics: Sequence[DeviationMetrics]) -> DeviationSummary:
    if not metrics:
        raise DomainError("no runs to aggregate")
    maxima = np.array([m.final_max() for m in metrics])
    (mt, st), (ml, sl), (mm, sm) = (_mean_se(maxima[:, k]) for k in range(3))
    return DeviationSummary(
        runs=len(metrics),
        mean_total=mt,
        se_total=st,
        mean_legit=ml,
        se_legit=sl,
        mean_malicious=mm,
        se_malicious=sm,
    )


# ─── replay ──────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class ReplayReport:
    """``nominal_after_recovery`` is None when no topology was given or T_f is unresolved."""

    horizon: int
    max_residual: float
    recovery_time: int | None
    nominal_after_recovery: bool | None
    final_max_total: float
    final_max_legit: float
    final_max_malicious: float


def replay_trace(trace: RunTrace, tol: float = 1e-12, topo: NetworkTopology | None = None) -> ReplayReport:
    """Recompute metrics from a stored trace and check its invariants.

    The recorded weight status must agree round by round with the
    misclassification counts, and T_f is taken from the weight status. With
    ``topo``, the final ledger is turned back into online weights and compared
    against the nominal matrix.
    """
    residual = float(np.max(np.abs(trace.x_legit - (trace.contrib_legit + trace.contrib_malicious))))
    if residual > tol:
        raise NumericalError(f"decomposition residual {residual:.3e} exceeds {tol:.0e}")

    flags = np.asarray(trace.weights_nominal, dtype=bool)
    misclassified = np.asarray(trace.misclassified)
    if flags.shape != misclassified.shape:
        raise NumericalError(f"weight status has {flags.size} rounds, misclassification counts have {misclassified.size}")
    disagree = np.flatnonzero(flags != (misclassified == 0))
    if disagree.size:
        raise NumericalError(
            f"weight status disagrees with misclassification counts in {disagree.size} round(s), "
            f"first at round {int(disagree[0])}"
        )
    recovery = first_stable_round(flags)
    if recovery != trace.recovery_time:
        stored = "unresolved" if trace.recovery_time is None else trace.recovery_time
        raise NumericalError(f"stored recovery time {stored} disagrees with recomputed {recovery}")

    stable: bool | None = None
    if topo is not None and trace.final_ledger is not None:
        if topo.legit_count != trace.legit_count:
            raise DomainError(f"trace has {trace.legit_count} legitimate agents, topology has {topo.legit_count}")
        ledger_nominal = online_weights(trace.final_ledger, topo).matches(nominal_weights(topo))
        if recovery is None and ledger_nominal:
            raise NumericalError("final ledger yields the nominal weights but the last round is recorded as off-nominal")
        if recovery is not None:
            stable = ledger_nominal
    if recovery is None:
        logger.warning("recovery time unresolved over %d rounds", trace.horizon)

    e, e_legit, e_mal = deviation_metrics(trace).final_max()
    return ReplayReport(
        horizon=trace.horizon,
        max_residual=residual,
        recovery_time=recovery,
        nominal_after_recovery=stable,
        final_max_total=e,
        final_max_legit=e_legit,
        final_max_malicious=e_mal,
    )
