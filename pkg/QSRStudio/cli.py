"""Command-line front end: analyze, synthesize, compose, simulate.

Exit codes: 0 certified (or audit passed), 2 not certified / audit failed,
1 on any error.
"""
import argparse
import json
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

from pydantic import BaseModel, ValidationError, validator

from . import __version__
from .feasibility import Objective, SolverSettings
from .messenger import FeedthroughMode, SelectionMeasure
from .model import (NetworkModel, QSRError, SupplyEntry, as_matrix, content_hash, load_network,
                    network_to_dict, subsystem_from_dict, supply_from_entry, supply_preset)
from .pipeline import (CertificationReport, load_report, network_hash, run_analysis, run_compositional, run_switched_synthesis,
                       run_synthesis, save_report, verify_report)
from .sim import audit_dissipation, load_scenario, simulate, trajectory_metadata, write_json, write_trajectory_csv

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_ERROR, EXIT_NOT_CERTIFIED = 0, 1, 2
COMMANDS = ("analyze", "synthesize", "compose", "simulate")


class RunConfig(BaseModel):
    command: str
    network: str
    report: Optional[str] = None
    add: Optional[str] = None
    scenario: Optional[str] = None
    sequence: Optional[List[str]] = None
    supply: Optional[str] = None            # "<preset>[:p1,p2]" applied to every subsystem
    eps: Optional[float] = None
    eps_pd: Optional[float] = None
    tol_audit: Optional[float] = None
    margin: Optional[float] = None
    robust_eps: Dict[int, float] = {}
    feedthrough: FeedthroughMode = FeedthroughMode.STANDARD
    selection: SelectionMeasure = SelectionMeasure.LOWER_BOUND
    objective: Objective = Objective.MARGIN
    out: str = "out"
    seed: Optional[int] = None
    audit_stride: Optional[int] = None
    include_timing: bool = False

    @validator("command")
    def _command(cls, command):
        if command not in COMMANDS:
            raise ValueError(f"unknown command '{command}'")
        return command

    @validator("eps", "eps_pd", "tol_audit", "margin")
    def _positive(cls, value, field):
        if value is not None and value <= 0:
            raise ValueError(f"{field.name} must be positive")
        return value

    @validator("audit_stride")
    def _stride(cls, value):
        if value is not None and value < 1:
            raise ValueError("audit stride must be at least 1")
        return value

    @validator("scenario", always=True)
    def _required(cls, scenario, values):
        command = values.get("command")
        if command == "compose" and (values.get("report") is None or values.get("add") is None):
            raise ValueError("compose needs --report and --add")
        if command == "simulate" and (values.get("report") is None or scenario is None):
            raise ValueError("simulate needs --report and --scenario")
        return scenario

    def settings(self) -> SolverSettings:
        overrides = {"feedthrough": self.feedthrough, "selection": self.selection, "objective": self.objective,
                     "robust_eps": self.robust_eps}
        if self.eps is not None:
            overrides["eps_rel"] = self.eps
        if self.margin is not None:
            overrides["margin_target"] = self.margin
        return SolverSettings(**overrides)


def _robust_eps(text: Optional[str]) -> Dict[str, float]:
    """Per-subsystem bounds written as 0:0.01,2:0.02."""
    if not text:
        return {}
    out = {}
    for part in text.split(","):
        key, _, value = part.partition(":")
        out[key.strip()] = float(value)
    return out


def _parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(prog="qsrstudio", description="Sequential QSR-dissipativity certification and design.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--network", required=True, help="network JSON file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--sequence", help="comma-separated subsystem indices (0-based) or names")
        p.add_argument("--supply", help="supply preset applied to every subsystem, e.g. passive or L2:10")
        if name != "simulate":
            p.add_argument("--eps", type=float, help="relative strictness slack")
            p.add_argument("--eps-pd", type=float, dest="eps_pd", help="tolerance of the centralized check")
            p.add_argument("--margin", type=float, help="margin target of the step programs")
            p.add_argument("--robust-eps", dest="robust_eps",
                           help="uncertainty bound, one value for all subsystems or i:eps pairs")
            p.add_argument("--feedthrough", choices=[m.value for m in FeedthroughMode],
                           default=FeedthroughMode.STANDARD.value)
            p.add_argument("--selection", choices=[m.value for m in SelectionMeasure],
                           default=SelectionMeasure.LOWER_BOUND.value)
            p.add_argument("--objective", choices=[m.value for m in Objective], default=Objective.MARGIN.value,
                           help="margin maximization or the minimum-trace form of the step programs")
            p.add_argument("--include-timing", action="store_true", dest="include_timing")
        if name in ("compose", "simulate"):
            p.add_argument("--report", required=True, help="certification report of --network")
        if name == "compose":
            p.add_argument("--add", required=True, help="JSON file with the joining subsystem, its coupling and supply")
        if name == "simulate":
            p.add_argument("--scenario", required=True, help="scenario JSON file")
            p.add_argument("--seed", type=int)
            p.add_argument("--audit-stride", type=int, dest="audit_stride")
            p.add_argument("--tol-audit", type=float, dest="tol_audit")
    return parser.parse_args(argv)


def _config(args: argparse.Namespace, size: Optional[int] = None) -> RunConfig:
    options = vars(args)
    robust: Dict[int, float] = {}
    text = options.get("robust_eps")
    if text:
        if ":" in text:
            robust = {int(k): v for k, v in _robust_eps(text).items()}
        else:
            robust = {i: float(text) for i in range(size or 0)}
    solver = {key: options[key] for key in ("eps", "eps_pd", "margin", "feedthrough", "selection", "objective",
                                            "include_timing") if options.get(key) is not None}
    return RunConfig(command=args.command, network=args.network, report=options.get("report"),
                     add=options.get("add"), scenario=options.get("scenario"),
                     sequence=args.sequence.split(",") if args.sequence else None, supply=args.supply,
                     tol_audit=options.get("tol_audit"), robust_eps=robust, out=args.out,
                     seed=options.get("seed"), audit_stride=options.get("audit_stride"), **solver)


def setup_logging(out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[
            logging.StreamHandler(sys.stdout),
            logging.FileHandler(os.path.join(out_dir, "qsrstudio.log"))
        ]
    )


# --- Loading ---
def _parse_supply(text: str):
    kind, _, params = text.partition(":")
    return kind.strip(), [float(v) for v in params.split(",") if v.strip()]


def load_configured_network(cfg: RunConfig):
    """Applies --supply and --sequence. A supply override gets the canonical hash of the modified network."""
    net, net_hash = load_network(cfg.network)
    if cfg.supply:
        kind, params = _parse_supply(cfg.supply)
        net = net.copy(update={"supplies": [supply_preset(kind, params, m=net.dims(i).m, l=net.dims(i).l)
                                            for i in range(net.size)]})
        net_hash = network_hash(net)
    if cfg.sequence:
        net = net.with_sequence([s.strip() for s in cfg.sequence])
    return net, net_hash


def _out(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.out, name)


def _write_gains(report: CertificationReport, path: str):
    write_json({"gains": report.to_dict()["gains"], "network_hash": report.network_hash, "version": report.version}, path)
    logger.info("Gains written to %s", path)


def _finish_report(cfg: RunConfig, net: NetworkModel, report: CertificationReport) -> int:
    save_report(report, _out(cfg, "report.json"), cfg.include_timing)
    if not report.certified:
        logger.info("Not certified: %s", report.detail)
        return EXIT_NOT_CERTIFIED
    checks = verify_report(net, report, tol=cfg.eps_pd)
    worst = min(c.min_eig for c in checks)
    if not all(c.verdict for c in checks):
        logger.error("Centralized check rejects the certificate (min eigenvalue %.3e)", worst)
        return EXIT_NOT_CERTIFIED
    logger.info("Certified; centralized check min eigenvalue %.3e over %d mode combination(s)", worst, len(checks))
    return EXIT_OK


# --- Commands ---
def cmd_analyze(cfg: RunConfig) -> int:
    net, net_hash = load_configured_network(cfg)
    report = run_analysis(net, cfg.settings(), net_hash=net_hash)
    return _finish_report(cfg, net, report)


def cmd_synthesize(cfg: RunConfig) -> int:
    net, net_hash = load_configured_network(cfg)
    run = run_switched_synthesis if net.is_switched else run_synthesis
    report = run(net, cfg.settings(), net_hash=net_hash)
    code = _finish_report(cfg, net, report)
    _write_gains(report, _out(cfg, "gains.json"))
    return code


class Addition(BaseModel):
    comment: Optional[str] = None
    subsystem: Dict
    coupling: List[Dict] = []
    supply: Dict


def cmd_compose(cfg: RunConfig) -> int:
    net, net_hash = load_configured_network(cfg)
    base = load_report(cfg.report)
    with open(cfg.add, "r") as f:
        addition = Addition.parse_obj(json.load(f))
    new_sub = subsystem_from_dict(addition.subsystem)
    coupling = {}
    for entry in addition.coupling:
        coupling[(int(entry["to"]), int(entry["from"]))] = as_matrix(entry["H"], "H")
    supply = supply_from_entry(SupplyEntry(subsystem=net.size, **addition.supply), new_sub.dims)
    ext, report = run_compositional(net, base, new_sub, coupling, supply, cfg.settings(), net_hash=net_hash)
    network_path = _out(cfg, "network.json")
    with open(network_path, "w") as f:
        f.write(json.dumps(network_to_dict(ext), sort_keys=True))
    logger.info("Extended network written to %s (%s)", network_path, content_hash(json.dumps(network_to_dict(ext), sort_keys=True)))
    code = _finish_report(cfg, ext, report)
    _write_gains(report, _out(cfg, "gains.json"))
    return code


def cmd_simulate(cfg: RunConfig) -> int:
    net, net_hash = load_configured_network(cfg)
    report = load_report(cfg.report)
    if report.network_hash is not None and report.network_hash != net_hash:
        raise QSRError(f"report was produced for {report.network_hash}, network file is {net_hash}")
    sc = load_scenario(cfg.scenario)
    updates = {}
    if cfg.seed is not None:
        updates["seed"] = cfg.seed
    if cfg.audit_stride is not None:
        updates["audit_stride"] = cfg.audit_stride
    sc = sc.copy(update=updates)
    tr, audit = simulate(net, report, sc)
    if cfg.tol_audit is not None:
        audit = audit_dissipation(tr, sc.audit_stride, cfg.tol_audit)
    write_trajectory_csv(tr, _out(cfg, "trajectory.csv"), sc.record_every)
    write_json(trajectory_metadata(tr, sc), _out(cfg, "trajectory.json"))
    write_json(audit.dict(), _out(cfg, "audit.json"))
    logger.info("Audit %s: min slack %.3e (tolerance %.3e)", "passed" if audit.verdict else "failed",
                audit.min_slack, audit.tolerance)
    return EXIT_OK if audit.verdict else EXIT_NOT_CERTIFIED


HANDLERS = {"analyze": cmd_analyze, "synthesize": cmd_synthesize, "compose": cmd_compose, "simulate": cmd_simulate}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = _parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_ERROR
    try:
        size = None
        text = getattr(args, "robust_eps", None)
        if text and ":" not in text:
            size = load_network(args.network)[0].size
        cfg = _config(args, size)
        setup_logging(cfg.out)
        logger.info("qsrstudio %s: %s %s", __version__, cfg.command, cfg.network)
        return HANDLERS[cfg.command](cfg)
    except (QSRError, ValidationError, json.JSONDecodeError, OSError, ValueError, KeyError) as e:
        logger.error("%s failed: %s", args.command, e)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
