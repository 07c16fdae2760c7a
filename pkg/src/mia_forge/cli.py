"""``audit`` command line.

Every flag has a config-file counterpart; flags win over the file.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .accountant import AccountantError, calibrate_sigma, epsilon_for
from .data import DataFormatError, generate_scenario
from .evaluation import ReportSchemaError, validate_report
from .fl import FlConfig, export_curves, federate
from .pipeline import (PRESETS, ConfigError, RunConfig, attack_external, run_all, stage_seed,
                       write_scenario)
from .stacking import AttackStageError
from .targets import TIERS

DEFAULT_OUT = "audit-out"


class CliError(Exception):
    def __init__(self, stage: str, message: str, code: int = 1):
        self.stage = stage
        self.code = code
        super().__init__(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help=f"output directory (default {DEFAULT_OUT})")
    p.add_argument("--tiers", nargs="+", choices=sorted(TIERS), help="privacy tiers to run")
    p.add_argument("--preset", choices=sorted(PRESETS), help="scenario preset")


def _rule_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--percentile", type=float, help="column-condition percentile (default 55)")
    p.add_argument("--lambda", dest="lam", type=float, help="row-condition multiplier (default 1.5)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="audit", description="Stacking membership-inference audit toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic scenario")
    _common(p)

    p = sub.add_parser("run-all", help="targets, attacks, baselines, FL curves and the report")
    _common(p)
    _rule_flags(p)
    p.add_argument("--folds", type=int, help="folds for the out-of-fold ROC analysis")
    p.add_argument("--fl-epochs", type=int, nargs="*", help="local epochs per FL run (none skips FL)")
    p.add_argument("--fl-rounds", type=int, help="FL rounds")

    p = sub.add_parser("attack-external", help="attack pre-exported prediction matrices")
    _common(p)
    _rule_flags(p)
    p.add_argument("--predictions", required=True, help="directory with client_c<k>.csv files")
    p.add_argument("--pools", required=True, help="directory written by 'generate'")

    p = sub.add_parser("fl-sim", help="FedAvg simulation for one tier")
    _common(p)
    p.add_argument("--tier", choices=sorted(TIERS), default="nodp")
    p.add_argument("--epochs", type=int, default=5, help="local epochs per round")
    p.add_argument("--rounds", type=int, help="rounds (default 50)")

    p = sub.add_parser("accountant", help="epsilon for a noise multiplier, or the reverse")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--epsilon", type=float, help="target epsilon; prints the calibrated sigma")
    g.add_argument("--sigma", type=float, help="noise multiplier; prints epsilon")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--delta", type=float, default=1e-5)

    p = sub.add_parser("report", help="validate a report and print its headline table")
    p.add_argument("path", nargs="?", help="report.json or a run directory")
    p.add_argument("--out", help="run directory (alternative to PATH)")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """File first, then flags on top."""
    raw = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        raw.pop("out", None)
    if getattr(args, "preset", None):
        raw["preset"] = args.preset
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "tiers", None):
        raw["tiers"] = list(args.tiers)
    rule = dict(raw.get("rule", {}))
    if getattr(args, "percentile", None) is not None:
        rule["percentile"] = args.percentile
    if getattr(args, "lam", None) is not None:
        rule["lambda"] = args.lam
    if rule:
        raw["rule"] = rule
    if getattr(args, "folds", None) is not None:
        raw["folds"] = args.folds
    if getattr(args, "fl_epochs", None) is not None:
        raw["fl_epochs"] = list(args.fl_epochs)
    if getattr(args, "fl_rounds", None) is not None:
        raw["fl_rounds"] = args.fl_rounds
    return RunConfig.from_dict(raw)


def resolve_out(args: argparse.Namespace) -> Path:
    if args.out:
        return Path(args.out)
    if getattr(args, "config", None):
        raw = json.loads(Path(args.config).read_text())
        if isinstance(raw, dict) and raw.get("out"):
            return Path(raw["out"])
    return Path(DEFAULT_OUT)


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    out = resolve_out(args)
    bundle = generate_scenario(cfg.scenario_config())
    sizes = write_scenario(bundle, out)
    for c in range(bundle.n_clients):
        print(f"client {c + 1}: train={sizes['train'][c]} relevant={sizes['relevant'][c]} "
              f"external={sizes['external'][c]}")
    print(f"challenge={sizes['challenge'][0]} colluding=client {bundle.colluding_client + 1}")
    print(f"written to {out}")
    return 0


def cmd_run_all(args) -> int:
    cfg = resolve_config(args)
    out = resolve_out(args)
    try:
        report = run_all(cfg, out, log=lambda m: print(m, file=sys.stderr))
    except AttackStageError as exc:
        raise CliError(exc.stage, str(exc.cause)) from exc
    _print_table(report)
    print(f"report: {out / 'report.json'}")
    return 0


def cmd_attack_external(args) -> int:
    cfg = resolve_config(args)
    out = resolve_out(args)
    for name, d in (("--pools", args.pools), ("--predictions", args.predictions)):
        if not Path(d).is_dir():
            raise CliError("input", f"{name} directory not found: {d}")
    try:
        result = attack_external(args.pools, args.predictions, cfg.rule, stage_seed(cfg.seed, "attack"), out)
    except AttackStageError as exc:
        raise CliError(exc.stage, str(exc.cause)) from exc
    except (FileNotFoundError, DataFormatError) as exc:
        raise CliError("input", str(exc)) from exc
    members = sum(d.assignment is not None for d in result.decisions)
    print(f"{len(result.decisions)} challenge records, {members} assigned to a client")
    print(f"decisions: {out / 'stacking_decisions.csv'}")
    return 0


def cmd_fl_sim(args) -> int:
    cfg = resolve_config(args)
    out = resolve_out(args)
    rounds = args.rounds if args.rounds is not None else cfg.fl_rounds
    bundle = generate_scenario(cfg.scenario_config())
    try:
        fl_cfg = FlConfig(clients=bundle.n_clients, rounds=rounds, local_epochs=args.epochs,
                          tier=TIERS[args.tier], seed=stage_seed(cfg.seed, "fl"), train=cfg.train)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    fed = federate(bundle, fl_cfg)
    path = export_curves(fed.logs, out / "curves" / f"fl_{args.tier}_e{args.epochs}.csv", args.tier,
                         bundle.config.n_classes)
    for log in fed.logs:
        print(f"round {log.round:3d}  accuracy {log.accuracy:.4f}  loss {log.mean_loss:.4f}")
    print(f"curve: {path}")
    return 0


def cmd_accountant(args) -> int:
    try:
        if args.sigma is not None:
            eps = epsilon_for(args.sigma, args.steps, args.delta)
            print(f"epsilon={eps:.6g} (sigma={args.sigma:g}, steps={args.steps}, delta={args.delta:g})")
        else:
            sigma = calibrate_sigma(args.epsilon, args.steps, args.delta)
            eps = epsilon_for(sigma, args.steps, args.delta)
            print(f"sigma={sigma:.6g} (epsilon={eps:.6g}, steps={args.steps}, delta={args.delta:g})")
    except AccountantError as exc:
        raise CliError("accountant", str(exc), 2) from exc
    return 0


def cmd_report(args) -> int:
    target = Path(args.path or args.out or DEFAULT_OUT)
    if target.is_dir():
        target = target / "report.json"
    if not target.is_file():
        raise CliError("report", f"report not found: {target}")
    report = json.loads(target.read_text())
    try:
        validate_report(report)
    except ReportSchemaError as exc:
        raise CliError("report", f"invalid report: {exc}") from exc
    _print_table(report)
    return 0


def _print_table(report: dict) -> None:
    floor = report["scenario"]["random_floor"]
    print(f"challenge accuracy (random floor {floor:.3f})")
    names = [a["attack"] for a in report["tiers"][report["tier_order"][0]]["attacks"]]
    print("tier".ljust(8) + "".join(n.rjust(16) for n in names))
    for tier in report["tier_order"]:
        accs = {a["attack"]: a["challenge_accuracy"] for a in report["tiers"][tier]["attacks"]}
        print(tier.ljust(8) + "".join(f"{accs[n]:16.4f}" for n in names))
    print("TPR on the colluding client (@1% / @3% FPR)")
    for tier in report["tier_order"]:
        rows = report["tiers"][tier]["tpr"]["rows"]
        print(tier.ljust(8) + "".join(f"{r['attack']:>16}: {r['tpr_at_1pct']:.3f}/{r['tpr_at_3pct']:.3f}"
                                      for r in rows))
    for run in report["fl"]["runs"]:
        print(f"fl {run['tier']} E={run['local_epochs']}: final accuracy {run['final_accuracy']:.4f}")


COMMANDS = {
    "generate": cmd_generate,
    "run-all": cmd_run_all,
    "attack-external": cmd_attack_external,
    "fl-sim": cmd_fl_sim,
    "accountant": cmd_accountant,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return 2
    except CliError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
