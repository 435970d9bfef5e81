"""Exception hierarchy shared by the library and the CLI."""

from __future__ import annotations


class TrustConsensusError(Exception):
    """Base class for every error raised by trust-consensus."""

    exit_code = 2


class ConfigError(TrustConsensusError):
    """Invalid experiment configuration; ``fields`` lists each offending dotted key."""

    exit_code = 1

    def __init__(self, problems: list[str]) -> None:
        self.problems = list(problems)
        super().__init__("; ".join(self.problems) or "invalid configuration")

    @property
    def fields(self) -> list[str]:
        return [p.split(":", 1)[0] for p in self.problems]


class NumericalError(TrustConsensusError):
    """A numerical procedure failed to converge or an invariant was violated."""

    exit_code = 2


class TopologyGenerationError(NumericalError):
    """The random geometric graph generator ran out of retries."""

    def __init__(self, seed: int, radius: float, retries: int) -> None:
        self.seed = seed
        self.radius = radius
        self.retries = retries
        super().__init__(
            f"could not generate a topology with a connected legitimate subgraph "
            f"(seed={seed}, radius={radius}, retries={retries})"
        )


class PersistenceError(TrustConsensusError):
    """A trace, topology or samples file could not be read or written."""

    exit_code = 3


class DomainError(TrustConsensusError, ValueError):
    """An operation was called outside of its mathematical domain."""

    exit_code = 2


class ProtocolViolationError(TrustConsensusError, ValueError):
    """Trust observations for a round are missing or malformed."""

    exit_code = 2
