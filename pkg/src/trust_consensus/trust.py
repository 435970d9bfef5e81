"""Stochastic trust observations, the aggregate trust ledger and misclassification bounds."""

from __future__ import annotations

import hashlib
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from enum import Enum

import numpy as np

from trust_consensus.errors import DomainError, ProtocolViolationError
from trust_consensus.topology import NetworkTopology


class SenderKind(str, Enum):
    LEGIT = "legit"
    MALICIOUS = "malicious"


@dataclass(frozen=True)
class TrustModel:
    """Uniform trust observations centered at the sender-kind mean E[α].

    ``mean_legit`` and ``mean_malicious`` are the expected observations, so
    the informativeness offsets are ``E_L = mean_legit - 1/2 > 0`` and
    ``E_M = mean_malicious - 1/2 < 0``.
    """

    mean_legit: float
    mean_malicious: float

    def __post_init__(self) -> None:
        if not 0.5 < self.mean_legit <= 1.0:
            raise DomainError(f"mean_legit must be in (0.5, 1], got {self.mean_legit}")
        if not 0.0 <= self.mean_malicious < 0.5:
            raise DomainError(f"mean_malicious must be in [0, 0.5), got {self.mean_malicious}")

    @property
    def support_half_width(self) -> float:
        return min(1.0 - self.mean_legit, self.mean_malicious)

    @property
    def e_legit(self) -> float:
        return self.mean_legit - 0.5

    @property
    def e_malicious(self) -> float:
        return self.mean_malicious - 0.5

    def mean(self, kind: SenderKind) -> float:
        return self.mean_legit if kind is SenderKind.LEGIT else self.mean_malicious


def sample_trust(
    model: TrustModel,
    edge_kind: SenderKind,
    rng: np.random.Generator,
    size: int | None = None,
) -> float | np.ndarray:
    """Draw α uniformly on ``[μ - w, μ + w]`` for the sender kind's mean μ."""
    mu, w = model.mean(edge_kind), model.support_half_width
    return np.clip(rng.uniform(mu - w, mu + w, size=size), 0.0, 1.0)


def sample_observations(
    model: TrustModel,
    sender_legit: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """One independent observation per monitored edge; ``sender_legit`` is a boolean mask."""
    w = model.support_half_width
    mu = np.where(sender_legit, model.mean_legit, model.mean_malicious)
    return np.clip(mu + rng.uniform(-w, w, size=mu.shape), 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class TrustLedger:
    """Running aggregates β_ij(t) = Σ_{s≤t} (α_ij(s) - 1/2) for every monitored edge.

    ``edges`` holds (observer, sender) pairs sorted by observer then sender;
    ``beta[k]`` is the aggregate of ``edges[k]``. ``round`` counts the
    observation rounds already folded in, so the empty ledger has round 0 and
    every β is the empty sum.
    """

    edges: np.ndarray
    beta: np.ndarray
    round: int = 0

    @classmethod
    def empty(cls, topo: NetworkTopology) -> "TrustLedger":
        edges = topo.monitored_edges()
        return cls(edges=edges, beta=np.zeros(len(edges)))

    def as_mapping(self) -> dict[tuple[int, int], float]:
        return {(int(i), int(j)): float(b) for (i, j), b in zip(self.edges, self.beta)}

    def trusted_mask(self) -> np.ndarray:
        return self.beta >= 0.0

    def observer_slice(self, agent: int) -> slice:
        observers = self.edges[:, 0]
        lo = int(np.searchsorted(observers, agent, side="left"))
        hi = int(np.searchsorted(observers, agent, side="right"))
        return slice(lo, hi)

    def digest(self) -> str:
        return hashlib.sha256(self.beta.tobytes()).hexdigest()[:16]


def update_ledger(
    ledger: TrustLedger,
    observations: np.ndarray | Mapping[tuple[int, int], float],
) -> TrustLedger:
    """Fold one round of observations into the ledger.

    ``observations`` is either an array aligned with ``ledger.edges`` or a
    mapping keyed by (observer, sender). Every monitored edge must be present.
    """
    if isinstance(observations, Mapping):
        missing = [(int(i), int(j)) for i, j in ledger.edges if (int(i), int(j)) not in observations]
        if missing:
            raise ProtocolViolationError(
                f"round {ledger.round}: missing observations for {len(missing)} edge(s), e.g. {missing[0]}"
            )
        obs = np.array([observations[(int(i), int(j))] for i, j in ledger.edges], dtype=float)
    else:
        obs = np.asarray(observations, dtype=float)
        if obs.shape != ledger.beta.shape:
            raise ProtocolViolationError(
                f"round {ledger.round}: expected {ledger.beta.shape[0]} observations, got {obs.shape}"
            )
    if np.isnan(obs).any():
        raise ProtocolViolationError(f"round {ledger.round}: missing (NaN) observations")
    return TrustLedger(edges=ledger.edges, beta=ledger.beta + (obs - 0.5), round=ledger.round + 1)


def trusted_neighborhood(ledger: TrustLedger, topo: NetworkTopology, agent: int) -> set[int]:
    """𝒩_i(t): neighbors whose aggregate trust is non-negative (ties are trusted)."""
    if not topo.is_legitimate(agent):
        raise DomainError(f"agent {agent} is malicious and keeps no trust ledger")
    span = ledger.observer_slice(agent)
    senders = ledger.edges[span, 1]
    return {int(j) for j in senders[ledger.beta[span] >= 0.0]}


def misclassified_edges(ledger: TrustLedger, legit_count: int) -> int:
    """Edges whose trust sign disagrees with the sender's true label."""
    sender_legit = ledger.edges[:, 1] < legit_count
    trusted = ledger.trusted_mask()
    return int(np.count_nonzero(trusted != sender_legit))


def misclassification_bound(e_offset: float, t: int | np.ndarray) -> float | np.ndarray:
    """Hoeffding bound e^{-2E²(t+1)} on misclassifying an edge at round t."""
    if e_offset == 0:
        raise DomainError("trust offset E must be non-zero (observations must be informative)")
    bound = np.exp(-2.0 * e_offset**2 * (np.asarray(t, dtype=float) + 1.0))
    return float(bound) if bound.ndim == 0 else bound


def empirical_misclassification(
    model: TrustModel,
    edge_kind: SenderKind,
    n_edges: int,
    rounds: Sequence[int],
    rng: np.random.Generator,
) -> dict[int, float]:
    """Fraction of ``n_edges`` independent edges misclassified at each requested round."""
    horizon = max(rounds) + 1
    draws = sample_trust(model, edge_kind, rng, size=(horizon, n_edges))
    beta = np.cumsum(draws - 0.5, axis=0)
    if edge_kind is SenderKind.LEGIT:
        wrong = beta < 0.0
    else:
        wrong = beta >= 0.0
    return {t: float(wrong[t].mean()) for t in rounds}
