"""CLI entry point for trust-consensus."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import TYPE_CHECKING

import pandas as pd

from trust_consensus.errors import ConfigError, NumericalError, TrustConsensusError

if TYPE_CHECKING:
    from trust_consensus.config import ExperimentConfig


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        print(f"Error: {message}", file=sys.stderr)
        sys.exit(ConfigError.exit_code)


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", type=Path, help="YAML file with dotted keys (topology.n: 60, ...).")
    parser.add_argument("--seed", type=int, help="Master seed (overrides run.seed).")
    parser.add_argument("--runs", type=int, help="Monte Carlo runs per cell (overrides run.runs).")
    parser.add_argument("--horizon", type=int, help="Rounds per run (overrides run.horizon).")
    parser.add_argument("--workers", type=int, help="Worker processes (overrides run.workers).")
    parser.add_argument("--out", metavar="DIR", type=Path, help="Output directory (overrides output.dir).")


def _parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = _Parser(
        prog="trust-consensus",
        description="Simulate trust-and-confidence resilient consensus and evaluate its deviation bounds.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Enable verbose (DEBUG) logging.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    simulate = sub.add_parser("simulate", help="Run one (regime, gamma) cell and keep its traces.")
    _add_run_flags(simulate)
    simulate.add_argument("--regime", type=int, default=0, help="Index into trust.regimes (default: 0).")
    simulate.add_argument("--gamma", type=float, help="Decay rate (default: first of schedule.gammas).")

    sweep = sub.add_parser("sweep", help="Run the full regime x gamma grid and write the sweep CSV.")
    _add_run_flags(sweep)

    bounds = sub.add_parser("bounds", help="Print the closed-form bound quantities as one CSV row.")
    bounds.add_argument("--c", type=float, required=True)
    bounds.add_argument("--gamma", type=float, required=True)
    bounds.add_argument("--dM", dest="d_max", type=int, required=True, help="Max legitimate neighborhood size.")
    bounds.add_argument("--EL", dest="e_legit", type=float, required=True, help="Legitimate offset E_L > 0.")
    bounds.add_argument("--EM", dest="e_malicious", type=float, required=True, help="Malicious offset E_M < 0.")
    bounds.add_argument("--L", dest="legit", type=int, required=True)
    bounds.add_argument("--M", dest="malicious", type=int, required=True)
    bounds.add_argument("--vm", dest="v_min", type=float, required=True, help="Smallest Perron entry.")
    bounds.add_argument("--eta", type=float, default=1.0)
    bounds.add_argument("--eps", type=float, default=0.1, help="Deviation threshold (default: 0.1).")
    bounds.add_argument("--tf", type=int, default=0, help="Fixed recovery time when no samples are given.")
    bounds.add_argument("--tf-samples", metavar="PATH", type=Path, help="File of recovery-time samples.")

    fig_ell = sub.add_parser("figure-ell", help="Write the -ell profile over gamma for a range of T_f.")
    fig_ell.add_argument("--c", type=float, required=True)
    fig_ell.add_argument("--dM", dest="d_max", type=int, required=True)
    fig_ell.add_argument("--vm", dest="v_min", type=float, required=True)
    fig_ell.add_argument("--tf-min", type=int, default=2)
    fig_ell.add_argument("--tf-max", type=int, default=10)
    fig_ell.add_argument("--gamma-min", type=float, default=1e-3)
    fig_ell.add_argument("--gamma-max", type=float, default=5.0)
    fig_ell.add_argument("--points", type=int, default=200)
    fig_ell.add_argument(
        "--anchoring",
        choices=["minorant", "exact"],
        default="minorant",
        help="Compare ℓ₁ against the minorant 1 - e^{s(γ)} or the exact anchoring product (default: minorant).",
    )
    fig_ell.add_argument("--out", metavar="PATH", type=Path, help="CSV path (default: stdout).")

    figure = sub.add_parser("figure", help="Write plot-ready data for one figure kind.")
    figure.add_argument(
        "--kind",
        required=True,
        choices=["deviation-sweep", "ell-profile", "lambda-schedule", "misclassification-bounds"],
    )
    figure.add_argument("--anchoring", choices=["minorant", "exact"], default="minorant", help="ell-profile only.")
    _add_run_flags(figure)

    replay = sub.add_parser("replay", help="Recompute metrics from a stored trace and verify its invariants.")
    replay.add_argument("--trace", metavar="PATH", type=Path, required=True)
    replay.add_argument(
        "--topology",
        metavar="PATH",
        type=Path,
        help="Edge-list file of the run (default: topology.txt next to the traces directory, if present).",
    )

    topology = sub.add_parser("topology", help="Generate a random geometric graph and write its edge list.")
    topology.add_argument("--n", type=int, required=True)
    topology.add_argument("--radius", type=float, required=True)
    topology.add_argument("--seed", type=int, required=True)
    topology.add_argument("--malicious", type=int, default=0)
    topology.add_argument("--max-retries", type=int, default=100)
    topology.add_argument("--out", metavar="PATH", type=Path, required=True)

    return parser.parse_args(argv)


def _load(args: argparse.Namespace) -> "ExperimentConfig":
    from trust_consensus.config import load_config

    return load_config(args.config, {
        "run.seed": args.seed,
        "run.runs": args.runs,
        "run.horizon": args.horizon,
        "run.workers": args.workers,
        "output.dir": args.out,
    })


def _print_frame(frame: pd.DataFrame) -> None:
    frame.to_csv(sys.stdout, index=False, float_format="%.10g")


def _cmd_simulate(args: argparse.Namespace) -> None:
    from trust_consensus.config import load_config
    from trust_consensus.experiment import build_topology, run_experiment
    from trust_consensus.storage import save_table
    from trust_consensus.topology import save_topology

    cfg = _load(args)
    if not 0 <= args.regime < len(cfg.regimes):
        raise ConfigError([f"trust.regimes: regime index {args.regime} out of range"])
    gamma = cfg.gammas[0] if args.gamma is None else args.gamma
    cfg = load_config(None, {
        **cfg.as_dotted(),
        "trust.regimes": [list(cfg.regimes[args.regime])],
        "schedule.gammas": [gamma],
        "output.keep_traces": True,
    })
    topo = build_topology(cfg)
    frame = run_experiment(cfg, topo).to_frame()
    save_topology(topo, cfg.output_dir / "topology.txt")
    save_table(frame, cfg.output_dir / "summary.csv")
    _print_frame(frame)


def _cmd_sweep(args: argparse.Namespace) -> None:
    from trust_consensus.config import dump_config
    from trust_consensus.experiment import build_topology, run_experiment
    from trust_consensus.storage import save_sweep
    from trust_consensus.topology import save_topology

    cfg = _load(args)
    topo = build_topology(cfg)
    result = run_experiment(cfg, topo)
    dump_config(cfg, cfg.output_dir / "config.yaml")
    save_topology(topo, cfg.output_dir / "topology.txt")
    save_sweep(result, cfg.output_dir / "sweep.csv")
    print(cfg.output_dir / "sweep.csv")


def _cmd_bounds(args: argparse.Namespace) -> None:
    from trust_consensus.analysis import BoundParams, bound_report
    from trust_consensus.storage import load_tf_samples

    samples = load_tf_samples(args.tf_samples) if args.tf_samples else [args.tf]
    params = BoundParams(
        c=args.c,
        gamma=args.gamma,
        d_max=args.d_max,
        e_legit=args.e_legit,
        e_malicious=args.e_malicious,
        legit_count=args.legit,
        malicious_count=args.malicious,
        v_min=args.v_min,
        eta=args.eta,
        tf_samples=tuple(samples),
    )
    _print_frame(pd.DataFrame([bound_report(params, args.eps).as_row()]))


def _cmd_figure_ell(args: argparse.Namespace) -> None:
    from trust_consensus.figures import ell_profile_frame, profile_gammas
    from trust_consensus.storage import save_table

    frame = ell_profile_frame(
        args.c,
        args.d_max,
        args.v_min,
        range(args.tf_min, args.tf_max + 1),
        profile_gammas(args.gamma_min, args.gamma_max, args.points),
        anchoring=args.anchoring,
    )
    if args.out:
        save_table(frame, args.out)
        print(args.out)
    else:
        _print_frame(frame)


def _cmd_figure(args: argparse.Namespace) -> None:
    from trust_consensus.figures import emit_figure_data

    print(emit_figure_data(args.kind, _load(args), anchoring=args.anchoring))


def _cmd_replay(args: argparse.Namespace) -> None:
    from trust_consensus.analysis import replay_trace
    from trust_consensus.storage import load_trace
    from trust_consensus.topology import load_topology

    topo_path = args.topology
    if topo_path is None:
        candidate = args.trace.parent.parent / "topology.txt"
        topo_path = candidate if candidate.exists() else None
    topo = load_topology(topo_path) if topo_path is not None else None

    report = replay_trace(load_trace(args.trace), topo=topo)
    if report.nominal_after_recovery is False:
        raise NumericalError(f"final weights are not nominal although recovery happened at round {report.recovery_time}")
    print(f"rounds: {report.horizon}")
    print(f"max decomposition residual: {report.max_residual:.3e}")
    print(f"recovery time: {'unresolved' if report.recovery_time is None else report.recovery_time}")
    if report.nominal_after_recovery is None:
        print("weights after recovery: not checked")
    else:
        print("weights after recovery: nominal")
    print(f"final max deviation: e={report.final_max_total:.6g} "
          f"e_L={report.final_max_legit:.6g} e_M={report.final_max_malicious:.6g}")


def _cmd_topology(args: argparse.Namespace) -> None:
    from trust_consensus.topology import generate_rgg, max_legit_in_degree, save_topology

    topo = generate_rgg(args.n, args.radius, args.seed, malicious_count=args.malicious, max_retries=args.max_retries)
    save_topology(topo, args.out)
    print(f"{args.out}: {len(topo.edges())} edges, d_M={max_legit_in_degree(topo)}, "
          f"{topo.resample_count} resample(s)")


_COMMANDS = {
    "simulate": _cmd_simulate,
    "sweep": _cmd_sweep,
    "bounds": _cmd_bounds,
    "figure-ell": _cmd_figure_ell,
    "figure": _cmd_figure,
    "replay": _cmd_replay,
    "topology": _cmd_topology,
}


def main(argv: list[str] | None = None) -> None:
    args = _parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        _COMMANDS[args.command](args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"Error: {problem}", file=sys.stderr)
        sys.exit(exc.exit_code)
    except TrustConsensusError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        sys.exit(exc.exit_code)


if __name__ == "__main__":
    main()
