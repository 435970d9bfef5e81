"""Plot-ready long-format tables (series, x, y, error); rendering is left to downstream tools."""

from __future__ import annotations

import logging
from collections.abc import Iterable
from pathlib import Path

import numpy as np
import pandas as pd

from trust_consensus.analysis import Anchoring, ell_profile
from trust_consensus.config import ExperimentConfig
from trust_consensus.errors import DomainError
from trust_consensus.experiment import SweepResult, build_topology, run_experiment
from trust_consensus.protocol import NominalReference
from trust_consensus.storage import save_table
from trust_consensus.topology import max_legit_in_degree
from trust_consensus.trust import misclassification_bound

logger = logging.getLogger(__name__)

FIGURE_KINDS = ("deviation-sweep", "ell-profile", "lambda-schedule", "misclassification-bounds")
FIGURE_COLUMNS = ["series", "x", "y", "error"]

DEFAULT_TF_RANGE = range(2, 11)


def profile_gammas(lo: float = 1e-3, hi: float = 5.0, points: int = 200) -> np.ndarray:
    return np.geomspace(lo, hi, points)


def _long(series: str, x: Iterable[float], y: Iterable[float], error: Iterable[float] | None = None) -> pd.DataFrame:
    x, y = np.asarray(list(x), dtype=float), np.asarray(list(y), dtype=float)
    err = np.full(x.shape, np.nan) if error is None else np.asarray(list(error), dtype=float)
    return pd.DataFrame({"series": series, "x": x, "y": y, "error": err}, columns=FIGURE_COLUMNS)


def lambda_schedule_frame(config: ExperimentConfig) -> pd.DataFrame:
    t = np.arange(config.horizon)
    frames = [_long(f"gamma={s.gamma:g}", t, s.values(config.horizon)) for s in config.schedules()]
    return pd.concat(frames, ignore_index=True)


def misclassification_frame(config: ExperimentConfig) -> pd.DataFrame:
    offsets = sorted({round(abs(m.e_legit), 12) for m in config.trust_models()}
                     | {round(abs(m.e_malicious), 12) for m in config.trust_models()})
    t = np.arange(config.horizon)
    frames = [_long(f"E={e:g}", t, misclassification_bound(e, t)) for e in offsets]
    return pd.concat(frames, ignore_index=True)


def ell_profile_frame(
    c: float,
    d_max: int,
    v_min: float,
    tf_range: Iterable[int] = DEFAULT_TF_RANGE,
    gammas: Iterable[float] | None = None,
    anchoring: Anchoring = "minorant",
) -> pd.DataFrame:
    grid = profile_gammas() if gammas is None else gammas
    profile = ell_profile(c, d_max, v_min, tf_range, grid, anchoring=anchoring)
    frames = [_long(f"Tf={tf}", profile.gammas, row) for tf, row in zip(profile.tf_values, profile.neg_ell)]
    return pd.concat(frames, ignore_index=True)


def deviation_frame(result: SweepResult) -> pd.DataFrame:
    table = result.to_frame()
    frames = []
    for metric in ("e", "e_legit", "e_malicious"):
        for (mu_l, mu_m), cell in table.groupby(["mu_legit", "mu_malicious"], sort=False):
            frames.append(
                _long(f"{metric}:mu_L={mu_l:g},mu_M={mu_m:g}", cell["gamma"], cell[f"mean_{metric}"], cell[f"se_{metric}"])
            )
    return pd.concat(frames, ignore_index=True)


def emit_figure_data(
    kind: str,
    config: ExperimentConfig,
    out_dir: Path | None = None,
    sweep: SweepResult | None = None,
    tf_range: Iterable[int] = DEFAULT_TF_RANGE,
    anchoring: Anchoring = "minorant",
) -> Path:
    """Write ``<out_dir>/<kind>.csv`` and return its path."""
    if kind not in FIGURE_KINDS:
        raise DomainError(f"unknown figure kind {kind!r}; expected one of {', '.join(FIGURE_KINDS)}")
    if kind == "lambda-schedule":
        frame = lambda_schedule_frame(config)
    elif kind == "misclassification-bounds":
        frame = misclassification_frame(config)
    elif kind == "ell-profile":
        topo = build_topology(config)
        reference = NominalReference.of(topo)
        frame = ell_profile_frame(
            config.c, max_legit_in_degree(topo), float(reference.perron.min()), tf_range, anchoring=anchoring
        )
    else:
        frame = deviation_frame(sweep or run_experiment(config))

    path = (out_dir or config.output_dir) / f"{kind}.csv"
    save_table(frame, path)
    logger.debug("Wrote %d rows of %s data to %s", len(frame), kind, path)
    return path
