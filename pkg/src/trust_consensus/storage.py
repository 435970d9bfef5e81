"""Trace, table and recovery-time sample files.

A trace file starts with one ``# {json}`` metadata line followed by a CSV with
one row per (round, agent). ``misclassified``, ``weights_nominal`` and
``ledger_digest`` describe the weights used to leave that round, so the final
round leaves them empty.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import pandas as pd

from trust_consensus.errors import PersistenceError
from trust_consensus.protocol import RunTrace
from trust_consensus.trust import TrustLedger

if TYPE_CHECKING:
    from trust_consensus.experiment import SweepResult

logger = logging.getLogger(__name__)

TRACE_COLUMNS = (
    "round",
    "agent",
    "state",
    "contrib_legit",
    "contrib_malicious",
    "misclassified",
    "weights_nominal",
    "ledger_digest",
)

_FLOAT_FORMAT = "%.17g"


def _trace_metadata(trace: RunTrace) -> dict:
    meta = dict(trace.metadata)
    meta.update(
        horizon=trace.horizon,
        legit_count=trace.legit_count,
        x_ss=trace.x_ss,
        recovery_time=trace.recovery_time,
        max_residual=trace.max_residual,
    )
    if trace.final_ledger is not None:
        meta["final_ledger"] = {
            "round": trace.final_ledger.round,
            "edges": trace.final_ledger.edges.tolist(),
            "beta": trace.final_ledger.beta.tolist(),
        }
    return meta


def _per_round(values: np.ndarray, n_legit: int) -> pd.api.extensions.ExtensionArray:
    # One value per round repeated over agents; the final round has none.
    return pd.array(np.repeat(np.asarray(values, dtype=int), n_legit).tolist() + [None] * n_legit, dtype="Int64")


def save_trace(trace: RunTrace, path: Path) -> None:
    horizon, n_legit = trace.horizon, trace.legit_count
    digests = np.repeat(np.array(trace.ledger_digests + [""], dtype=object), n_legit)
    frame = pd.DataFrame({
        "round": np.repeat(np.arange(horizon + 1), n_legit),
        "agent": np.tile(np.arange(n_legit), horizon + 1),
        "state": trace.x_legit.ravel(),
        "contrib_legit": trace.contrib_legit.ravel(),
        "contrib_malicious": trace.contrib_malicious.ravel(),
        "misclassified": _per_round(trace.misclassified, n_legit),
        "weights_nominal": _per_round(trace.weights_nominal, n_legit),
        "ledger_digest": digests,
    })
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as fh:
            fh.write("# " + json.dumps(_trace_metadata(trace)) + "\n")
            frame.to_csv(fh, index=False, float_format=_FLOAT_FORMAT)
    except OSError as exc:
        raise PersistenceError(f"cannot write trace {path}: {exc}") from exc
    logger.debug("Wrote trace with %d rounds to %s", horizon, path)


def load_trace(path: Path) -> RunTrace:
    """Read a trace written by :func:`save_trace`.

    Malicious states are not stored, so ``x_malicious`` comes back with zero columns.
    """
    try:
        with path.open(encoding="utf-8") as fh:
            header = fh.readline()
            frame = pd.read_csv(fh, dtype={"ledger_digest": str}, float_precision="round_trip")
    except OSError as exc:
        raise PersistenceError(f"cannot read trace {path}: {exc}") from exc
    except (pd.errors.ParserError, pd.errors.EmptyDataError, ValueError) as exc:
        raise PersistenceError(f"{path}: malformed trace table ({exc})") from exc

    if not header.startswith("# "):
        raise PersistenceError(f"{path}: missing metadata header")
    try:
        meta = json.loads(header[2:])
        horizon, n_legit = int(meta["horizon"]), int(meta["legit_count"])
        x_ss = float(meta["x_ss"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise PersistenceError(f"{path}: malformed metadata header ({exc})") from exc
    missing = [c for c in TRACE_COLUMNS if c not in frame.columns]
    if missing or len(frame) != (horizon + 1) * n_legit:
        raise PersistenceError(f"{path}: trace table does not match its header")

    frame = frame.sort_values(["round", "agent"], kind="stable")
    shape = (horizon + 1, n_legit)
    per_round = frame[frame["agent"] == 0].iloc[:horizon]
    ledger = meta.pop("final_ledger", None)
    final_ledger = None
    if ledger is not None:
        final_ledger = TrustLedger(
            edges=np.array(ledger["edges"], dtype=np.intp).reshape(-1, 2),
            beta=np.array(ledger["beta"], dtype=float),
            round=int(ledger["round"]),
        )
    try:
        misclassified = per_round["misclassified"].to_numpy(dtype=int)
        weights_nominal = per_round["weights_nominal"].to_numpy(dtype=int) != 0
    except (TypeError, ValueError) as exc:
        raise PersistenceError(f"{path}: per-round columns must be integers ({exc})") from exc
    return RunTrace(
        x_legit=frame["state"].to_numpy(dtype=float).reshape(shape),
        contrib_legit=frame["contrib_legit"].to_numpy(dtype=float).reshape(shape),
        contrib_malicious=frame["contrib_malicious"].to_numpy(dtype=float).reshape(shape),
        x_malicious=np.empty((horizon, 0)),
        misclassified=misclassified,
        weights_nominal=weights_nominal,
        ledger_digests=per_round["ledger_digest"].fillna("").tolist(),
        x_ss=x_ss,
        max_residual=float(meta.get("max_residual", 0.0)),
        final_ledger=final_ledger,
        recovery_time=meta.get("recovery_time"),
        metadata=meta,
    )


def save_table(frame: pd.DataFrame, path: Path) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format=_FLOAT_FORMAT)
    except OSError as exc:
        raise PersistenceError(f"cannot write {path}: {exc}") from exc


def save_sweep(result: "SweepResult", path: Path) -> None:
    save_table(result.to_frame(), path)


def load_tf_samples(path: Path) -> list[int]:
    """Recovery-time samples, one integer per line; ``#`` starts a comment."""
    try:
        values = np.loadtxt(path, dtype=float, comments="#", ndmin=1)
    except OSError as exc:
        raise PersistenceError(f"cannot read samples {path}: {exc}") from exc
    except ValueError as exc:
        raise PersistenceError(f"{path}: malformed samples file ({exc})") from exc
    if values.size == 0 or (values < 0).any() or not np.all(np.mod(values, 1) == 0):
        raise PersistenceError(f"{path}: samples must be non-negative integers")
    return values.astype(int).tolist()
