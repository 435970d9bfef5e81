"""Monte Carlo sweeps over (trust regime, decay rate) cells."""

from __future__ import annotations

import asyncio
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from trust_consensus.analysis import (
    DeviationSummary,
    aggregate_deviation,
    deviation_metrics,
    resolved_recovery_times,
)
from trust_consensus.config import ExperimentConfig
from trust_consensus.protocol import NominalReference, child_rng, run_protocol
from trust_consensus.storage import save_trace
from trust_consensus.topology import NetworkTopology, generate_rgg

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = (
    "regime", "mu_legit", "mu_malicious", "gamma", "runs",
    "mean_e", "se_e", "mean_e_legit", "se_e_legit", "mean_e_malicious", "se_e_malicious",
    "mean_tf", "unresolved",
)


def _status(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def run_seed(master_seed: int, regime_index: int, gamma_index: int, run_index: int) -> np.random.SeedSequence:
    """Counter-based stream for one run: entropy is the master seed, the cell indices form the spawn key."""
    return np.random.SeedSequence(master_seed, spawn_key=(regime_index, gamma_index, run_index))


def initial_states(seq: np.random.SeedSequence, legit_count: int, eta: float) -> np.ndarray:
    """x^L(0) ~ U(0, η), drawn from the run's third child stream."""
    return child_rng(seq, 2).uniform(0.0, eta, size=legit_count)


def build_topology(config: ExperimentConfig) -> NetworkTopology:
    return generate_rgg(
        config.n,
        config.radius,
        config.topology_seed,
        malicious_count=config.malicious,
        max_retries=config.max_retries,
    )


@dataclass(frozen=True)
class CellTask:
    config: ExperimentConfig
    topo: NetworkTopology
    regime_index: int
    gamma_index: int


@dataclass(frozen=True)
class CellOutcome:
    regime_index: int
    gamma_index: int
    summary: DeviationSummary
    recovery_times: tuple[int | None, ...]
    max_residual: float


def trace_path(output_dir: Path, regime_index: int, gamma_index: int, run_index: int) -> Path:
    return output_dir / "traces" / f"regime{regime_index}_gamma{gamma_index}_run{run_index:04d}.csv"


def _run_cell(task: CellTask) -> CellOutcome:
    cfg = task.config
    model = cfg.trust_models()[task.regime_index]
    schedule = cfg.schedules()[task.gamma_index]
    adversary = cfg.adversary()
    reference = NominalReference.of(task.topo)

    metrics, times, residual = [], [], 0.0
    for run_index in range(cfg.runs):
        seq = run_seed(cfg.seed, task.regime_index, task.gamma_index, run_index)
        trace = run_protocol(
            task.topo,
            model,
            schedule,
            initial_states(seq, task.topo.legit_count, cfg.eta),
            cfg.horizon,
            seq,
            adversary=adversary,
            eta=cfg.eta,
            reference=reference,
        )
        metrics.append(deviation_metrics(trace))
        times.append(trace.recovery_time)
        residual = max(residual, trace.max_residual)
        if cfg.keep_traces:
            save_trace(trace, trace_path(cfg.output_dir, task.regime_index, task.gamma_index, run_index))

    logger.debug(
        "cell regime=%d gamma=%g done: %d runs, max residual %.2e",
        task.regime_index, schedule.gamma, cfg.runs, residual,
    )
    return CellOutcome(
        regime_index=task.regime_index,
        gamma_index=task.gamma_index,
        summary=aggregate_deviation(metrics),
        recovery_times=tuple(times),
        max_residual=residual,
    )


@dataclass
class SweepResult:
    config: ExperimentConfig
    cells: list[CellOutcome]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for cell in self.cells:
            mu_l, mu_m = self.config.regimes[cell.regime_index]
            resolved, unresolved = resolved_recovery_times(cell.recovery_times)
            s = cell.summary
            rows.append({
                "regime": cell.regime_index,
                "mu_legit": mu_l,
                "mu_malicious": mu_m,
                "gamma": self.config.gammas[cell.gamma_index],
                "runs": s.runs,
                "mean_e": s.mean_total,
                "se_e": s.se_total,
                "mean_e_legit": s.mean_legit,
                "se_e_legit": s.se_legit,
                "mean_e_malicious": s.mean_malicious,
                "se_e_malicious": s.se_malicious,
                "mean_tf": float(np.mean(resolved)) if resolved else float("nan"),
                "unresolved": unresolved,
            })
        return pd.DataFrame(rows, columns=list(SWEEP_COLUMNS))

    def cell(self, regime_index: int, gamma_index: int) -> CellOutcome:
        for c in self.cells:
            if (c.regime_index, c.gamma_index) == (regime_index, gamma_index):
                return c
        raise KeyError((regime_index, gamma_index))

    def tf_samples(self, regime_index: int, gamma_index: int) -> list[int]:
        return resolved_recovery_times(self.cell(regime_index, gamma_index).recovery_times)[0]


def _tasks(config: ExperimentConfig, topo: NetworkTopology) -> list[CellTask]:
    return [
        CellTask(config=config, topo=topo, regime_index=r, gamma_index=g)
        for r in range(len(config.regimes))
        for g in range(len(config.gammas))
    ]


def _collect(config: ExperimentConfig, outcomes: list[CellOutcome]) -> SweepResult:
    outcomes = sorted(outcomes, key=lambda o: (o.regime_index, o.gamma_index))
    unresolved = sum(t is None for o in outcomes for t in o.recovery_times)
    if unresolved:
        logger.warning("%d run(s) ended with an unresolved recovery time", unresolved)
    return SweepResult(config=config, cells=outcomes)


async def run_experiment_async(config: ExperimentConfig, topo: NetworkTopology | None = None) -> SweepResult:
    """Fan the cells out over a process pool; results come back in cell order."""
    topo = topo or build_topology(config)
    tasks = _tasks(config, topo)
    loop = asyncio.get_running_loop()
    with ProcessPoolExecutor(max_workers=config.workers) as pool:
        outcomes = await asyncio.gather(*(loop.run_in_executor(pool, _run_cell, t) for t in tasks))
    return _collect(config, list(outcomes))


def run_experiment(config: ExperimentConfig, topo: NetworkTopology | None = None) -> SweepResult:
    """Run every (regime, γ) cell; serial in-process when ``config.workers == 1``."""
    topo = topo or build_topology(config)
    n_cells = len(config.regimes) * len(config.gammas)
    _status(f"Running sweep: {n_cells} cells x {config.runs} runs, T={config.horizon}...")
    if config.workers == 1:
        return _collect(config, [_run_cell(t) for t in _tasks(config, topo)])
    return asyncio.run(run_experiment_async(config, topo))
