"""Resilient consensus update with online trust weights and a decaying confidence term.

One round ``t`` of a run is synchronous: trust observations are sampled and
folded into the ledger, the online weights are computed from the ledger that
now includes round ``t``, malicious agents broadcast their round-``t`` state and
every legitimate agent applies

    x_i(t+1) = λ_t x_i(0) + (1 - λ_t) Σ_j w_ij(t) x_j(t).

The legitimate state is tracked together with its exact split into the
contribution of legitimate inputs (``a``) and malicious inputs (``b``).
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from trust_consensus.errors import DomainError, NumericalError
from trust_consensus.topology import NetworkTopology
from trust_consensus.trust import (
    TrustLedger,
    TrustModel,
    misclassified_edges,
    sample_observations,
    update_ledger,
)

logger = logging.getLogger(__name__)

_PERRON_TOL = 1e-12
_PERRON_MAX_ITER = 10**6


@dataclass(frozen=True)
class LambdaSchedule:
    """Confidence schedule λ_t = c·e^{-γt}."""

    c: float
    gamma: float

    def __post_init__(self) -> None:
        if not 0.0 < self.c < 1.0:
            raise DomainError(f"c must be in (0, 1), got {self.c}")
        if not self.gamma > 0.0:
            raise DomainError(f"gamma must be positive, got {self.gamma}")

    def values(self, horizon: int) -> np.ndarray:
        return self.c * np.exp(-self.gamma * np.arange(horizon))


def lambda_at(schedule: LambdaSchedule, t: int) -> float:
    if t < 0:
        raise DomainError(f"round must be non-negative, got {t}")
    return schedule.c * math.exp(-schedule.gamma * t)


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """Row-stochastic weights of one round, split by sender label."""

    legit_block: np.ndarray
    malicious_block: np.ndarray
    round: int = 0

    @property
    def full(self) -> np.ndarray:
        return np.hstack([self.legit_block, self.malicious_block])

    def row_sums(self) -> np.ndarray:
        return self.legit_block.sum(axis=1) + self.malicious_block.sum(axis=1)

    def matches(self, other: "WeightMatrix") -> bool:
        return np.array_equal(self.legit_block, other.legit_block) and np.array_equal(
            self.malicious_block, other.malicious_block
        )


@dataclass(frozen=True, eq=False)
class SimulationState:
    x_legit: np.ndarray
    contrib_legit: np.ndarray
    contrib_malicious: np.ndarray
    x_malicious: np.ndarray
    round: int = 0

    @classmethod
    def initial(cls, x0_legit: np.ndarray, x_malicious: np.ndarray) -> "SimulationState":
        x0 = np.asarray(x0_legit, dtype=float)
        return cls(
            x_legit=x0.copy(),
            contrib_legit=x0.copy(),
            contrib_malicious=np.zeros_like(x0),
            x_malicious=np.asarray(x_malicious, dtype=float),
        )

    def decomposition_residual(self) -> float:
        if not self.x_legit.size:
            return 0.0
        return float(np.max(np.abs(self.x_legit - (self.contrib_legit + self.contrib_malicious))))


# ─── weights ─────────────────────────────────────────────────────────────────


def _equal_neighbor_weights(
    legit_count: int, n_cols: int, observers: np.ndarray, senders: np.ndarray
) -> np.ndarray:
    counts = np.bincount(observers, minlength=legit_count)
    share = 1.0 / (counts + 1.0)
    w = np.zeros((legit_count, n_cols))
    w[observers, senders] = share[observers]
    diag = np.arange(legit_count)
    w[diag, diag] = 1.0 - counts * share
    return w


def nominal_weights(topo: NetworkTopology) -> WeightMatrix:
    """W̄^L: equal weights over legitimate neighbors plus self; malicious block all zero."""
    edges = topo.monitored_edges()
    legit = edges[edges[:, 1] < topo.legit_count]
    w = _equal_neighbor_weights(topo.legit_count, topo.legit_count, legit[:, 0], legit[:, 1])
    return WeightMatrix(legit_block=w, malicious_block=np.zeros((topo.legit_count, topo.malicious_count)))


def online_weights(ledger: TrustLedger, topo: NetworkTopology) -> WeightMatrix:
    """Weights of the current round: equal shares over the trusted neighborhood plus self."""
    if not np.array_equal(ledger.edges, topo.monitored_edges()):
        raise DomainError("ledger edges do not match the monitored edges of the topology")
    trusted = ledger.edges[ledger.trusted_mask()]
    w = _equal_neighbor_weights(topo.legit_count, topo.n_agents, trusted[:, 0], trusted[:, 1])
    split = topo.legit_count
    return WeightMatrix(
        legit_block=w[:, :split],
        malicious_block=w[:, split:],
        round=max(ledger.round - 1, 0),
    )


def perron_vector(
    nominal: np.ndarray,
    tol: float = _PERRON_TOL,
    max_iter: int = _PERRON_MAX_ITER,
) -> np.ndarray:
    """Stochastic left eigenvector v with vᵀW̄ = vᵀ, by power iteration from the uniform vector."""
    w = np.asarray(nominal, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise DomainError(f"nominal matrix must be square, got shape {w.shape}")
    v = np.full(w.shape[0], 1.0 / w.shape[0])
    residual = math.inf
    for iteration in range(1, max_iter + 1):
        nxt = v @ w
        nxt /= nxt.sum()
        residual = float(np.max(np.abs(nxt - v)))
        v = nxt
        if residual <= tol:
            logger.debug("Perron vector converged after %d iterations", iteration)
            return v
    raise NumericalError(f"power iteration did not converge in {max_iter} iterations (residual {residual:.3e})")


def nominal_consensus_value(v: np.ndarray, x0_legit: np.ndarray) -> float:
    """x_ss* = vᵀ x^L(0)."""
    v = np.asarray(v, dtype=float)
    if (v < 0).any() or not math.isclose(v.sum(), 1.0, abs_tol=1e-9):
        raise DomainError("v must be a stochastic vector")
    return float(v @ np.asarray(x0_legit, dtype=float))


@dataclass(frozen=True, eq=False)
class NominalReference:
    """Nominal weights and their Perron vector, shared by every run on a topology."""

    weights: WeightMatrix
    perron: np.ndarray

    @classmethod
    def of(cls, topo: NetworkTopology) -> "NominalReference":
        weights = nominal_weights(topo)
        return cls(weights=weights, perron=perron_vector(weights.legit_block))


# ─── state update ────────────────────────────────────────────────────────────


def resilient_update(
    x_legit: np.ndarray,
    x_malicious: np.ndarray,
    weights: WeightMatrix,
    lam: float,
    x0_legit: np.ndarray,
) -> np.ndarray:
    """Direct evaluation of the resilient rule for every legitimate agent."""
    mixed = weights.legit_block @ x_legit + weights.malicious_block @ x_malicious
    return lam * x0_legit + (1.0 - lam) * mixed


def decompose_step(
    state: SimulationState,
    weights: WeightMatrix,
    lam: float,
    x0_legit: np.ndarray,
) -> SimulationState:
    """Advance one round, keeping x = a + b with a driven by legitimate and b by malicious inputs."""
    n_legit, n_mal = weights.malicious_block.shape
    if (
        weights.legit_block.shape != (n_legit, n_legit)
        or state.x_legit.shape != (n_legit,)
        or state.x_malicious.shape != (n_mal,)
        or np.shape(x0_legit) != (n_legit,)
    ):
        raise DomainError("dimension mismatch between state, weights and initial condition")
    if not 0.0 <= lam <= 1.0:
        raise DomainError(f"lambda must be in [0, 1], got {lam}")

    keep = 1.0 - lam
    a = lam * x0_legit + keep * (weights.legit_block @ state.contrib_legit)
    b = keep * (weights.legit_block @ state.contrib_malicious + weights.malicious_block @ state.x_malicious)
    x = resilient_update(state.x_legit, state.x_malicious, weights, lam, x0_legit)
    return SimulationState(
        x_legit=x,
        contrib_legit=a,
        contrib_malicious=b,
        x_malicious=state.x_malicious,
        round=state.round + 1,
    )


# ─── adversary ───────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class AdversaryParams:
    """Oscillation about 2·x_ss*: amplitude ``amplitude_ratio·x_ss*``, period in rounds, Gaussian noise."""

    amplitude_ratio: float = 0.1
    period: float = 50.0
    noise_std: float = 0.05

    def __post_init__(self) -> None:
        if self.period <= 0:
            raise DomainError(f"period must be positive, got {self.period}")
        if self.noise_std < 0:
            raise DomainError(f"noise_std must be non-negative, got {self.noise_std}")


def draw_phases(count: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.0, 2.0 * math.pi, size=count)


def malicious_trajectory(
    x_ss: float,
    t: int,
    params: AdversaryParams,
    rng: np.random.Generator,
    phases: np.ndarray,
    eta: float = 1.0,
) -> np.ndarray:
    """States broadcast by malicious agents at round ``t``, clamped to [-η, η]."""
    amplitude = params.amplitude_ratio * x_ss
    wave = amplitude * np.sin(2.0 * math.pi * t / params.period + phases)
    noise = rng.normal(0.0, params.noise_std, size=len(phases))
    return np.clip(2.0 * x_ss + wave + noise, -eta, eta)


# ─── runs ────────────────────────────────────────────────────────────────────


@dataclass(eq=False)
class RunTrace:
    """Everything recorded by :func:`run_protocol`.

    State arrays have ``horizon + 1`` rows (round 0 is the initial state);
    per-round arrays have ``horizon`` rows and describe the weights used to
    go from round ``t`` to ``t + 1``.
    """

    x_legit: np.ndarray
    contrib_legit: np.ndarray
    contrib_malicious: np.ndarray
    x_malicious: np.ndarray
    misclassified: np.ndarray
    weights_nominal: np.ndarray
    ledger_digests: list[str]
    x_ss: float
    max_residual: float
    final_ledger: TrustLedger | None = None
    recovery_time: int | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return len(self.weights_nominal)

    @property
    def legit_count(self) -> int:
        return self.x_legit.shape[1]


def first_stable_round(flags: np.ndarray) -> int | None:
    """Smallest k with ``flags[k:]`` all true; None if the last flag is false."""
    flags = np.asarray(flags, dtype=bool)
    if not flags.size or not flags[-1]:
        return None
    bad = np.flatnonzero(~flags)
    return int(bad[-1]) + 1 if bad.size else 0


def _seed_sequence(rng_seed: int | np.random.SeedSequence) -> np.random.SeedSequence:
    if isinstance(rng_seed, np.random.SeedSequence):
        return rng_seed
    return np.random.SeedSequence(rng_seed)


def child_rng(seq: np.random.SeedSequence, index: int) -> np.random.Generator:
    # Derived without SeedSequence.spawn so that repeated runs with the same
    # sequence object draw identical streams.
    return np.random.default_rng(np.random.SeedSequence(seq.entropy, spawn_key=(*seq.spawn_key, index)))


def run_protocol(
    topo: NetworkTopology,
    trust_model: TrustModel,
    schedule: LambdaSchedule,
    x0_legit: np.ndarray,
    horizon: int,
    rng_seed: int | np.random.SeedSequence,
    adversary: AdversaryParams | None = None,
    eta: float = 1.0,
    reference: NominalReference | None = None,
    observe: Callable[[int], np.ndarray] | None = None,
) -> RunTrace:
    """Run the resilient protocol for ``horizon`` rounds.

    ``observe(t)`` replaces the stochastic trust model with a scripted
    observation vector aligned with the monitored edges.
    """
    if horizon < 1:
        raise DomainError(f"horizon must be at least 1, got {horizon}")
    x0 = np.asarray(x0_legit, dtype=float)
    if x0.shape != (topo.legit_count,):
        raise DomainError(f"x0_legit must have {topo.legit_count} entries, got {x0.shape}")
    adversary = adversary or AdversaryParams()
    reference = reference or NominalReference.of(topo)
    seq = _seed_sequence(rng_seed)
    trust_rng, adversary_rng = child_rng(seq, 0), child_rng(seq, 1)

    x_ss = nominal_consensus_value(reference.perron, x0)
    phases = draw_phases(topo.malicious_count, adversary_rng)
    ledger = TrustLedger.empty(topo)
    sender_legit = ledger.edges[:, 1] < topo.legit_count

    n_legit, n_mal = topo.legit_count, topo.malicious_count
    xs = np.empty((horizon + 1, n_legit))
    contrib_a = np.empty_like(xs)
    contrib_b = np.empty_like(xs)
    x_mal = np.empty((horizon, n_mal))
    misclassified = np.empty(horizon, dtype=int)
    nominal_flags = np.empty(horizon, dtype=bool)
    digests: list[str] = []

    state = SimulationState.initial(x0, np.zeros(n_mal))
    xs[0], contrib_a[0], contrib_b[0] = state.x_legit, state.contrib_legit, state.contrib_malicious
    max_residual = 0.0
    for t in range(horizon):
        observations = observe(t) if observe is not None else sample_observations(trust_model, sender_legit, trust_rng)
        ledger = update_ledger(ledger, observations)
        weights = online_weights(ledger, topo)
        malicious_now = malicious_trajectory(x_ss, t, adversary, adversary_rng, phases, eta)
        state = decompose_step(replace(state, x_malicious=malicious_now), weights, lambda_at(schedule, t), x0)

        xs[t + 1], contrib_a[t + 1], contrib_b[t + 1] = state.x_legit, state.contrib_legit, state.contrib_malicious
        x_mal[t] = malicious_now
        misclassified[t] = misclassified_edges(ledger, n_legit)
        nominal_flags[t] = weights.matches(reference.weights)
        digests.append(ledger.digest())
        max_residual = max(max_residual, state.decomposition_residual())

    recovery = first_stable_round(nominal_flags)
    if recovery is None:
        logger.debug("run ended with misclassified edges; recovery time unresolved")
    return RunTrace(
        x_legit=xs,
        contrib_legit=contrib_a,
        contrib_malicious=contrib_b,
        x_malicious=x_mal,
        misclassified=misclassified,
        weights_nominal=nominal_flags,
        ledger_digests=digests,
        x_ss=x_ss,
        max_residual=max_residual,
        final_ledger=ledger,
        recovery_time=recovery,
        metadata={
            "seed_entropy": str(seq.entropy),
            "seed_spawn_key": list(seq.spawn_key),
            "mean_legit": trust_model.mean_legit,
            "mean_malicious": trust_model.mean_malicious,
            "c": schedule.c,
            "gamma": schedule.gamma,
            "horizon": horizon,
            "eta": eta,
            "amplitude_ratio": adversary.amplitude_ratio,
            "period": adversary.period,
            "noise_std": adversary.noise_std,
            "n_agents": topo.n_agents,
            "legit_count": topo.legit_count,
            "topology_seed": topo.seed,
            "radius": topo.radius,
        },
    )
