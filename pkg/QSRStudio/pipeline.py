"""Sequential analysis, synthesis and compositional synthesis as a message
exchange between subsystem agents.

An agent owns one subsystem: its modes, supply rate and its row of the
coupling matrix. It never sees another subsystem's matrices; what crosses the
channel is a NeighborPayload (messenger, energy matrix and products).
"""
import itertools
import json
import logging
import time
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, validator

from . import __version__
from .blockpd import GammaCheck, centralized_gamma
from .feasibility import (FeasibilityOutcome, Regime, SolverSettings, StepProblem, Status, solve_analysis_step,
                          solve_compositional_step, solve_design_step, solve_switched_step)
from .messenger import IncomingBlock, NeighborPayload
from .model import (ControllerSet, CouplingMap, FrozenModel, MessengerRecord, NetworkModel, QSRError, SequenceError,
                    Subsystem, SupplyRate, as_matrix, content_hash, extend_network, modes_of, network_to_dict,
                    require_valid)

logger = logging.getLogger(__name__)


class CompositionError(QSRError): pass


class StepStatus(str, Enum):
    ANALYSIS_FEASIBLE = "analysis-feasible"
    SYNTHESIZED = "synthesized"
    INFEASIBLE = "infeasible"
    FAILED = "failed"
    SKIPPED = "skipped"


class RunMode(str, Enum):
    ANALYSIS = "analysis"
    SYNTHESIS = "synthesis"
    COMPOSITIONAL = "compositional"
    SWITCHED = "switched-synthesis"


# --- Channel ---
class Channel:
    """In-process transport; payloads travel as JSON text, the on-disk matrix format."""

    def __init__(self):
        self.sent = 0

    def encode(self, payload: NeighborPayload) -> str:
        return payload.json(sort_keys=True)

    def decode(self, raw: str) -> NeighborPayload:
        return NeighborPayload.parse_raw(raw)

    def transmit(self, payload: NeighborPayload) -> NeighborPayload:
        self.sent += 1
        return self.decode(self.encode(payload))


# --- Agents ---
class AgentState(FrozenModel):
    record: Optional[MessengerRecord] = None
    self_gain: Optional[np.ndarray] = None
    gains: Dict[Tuple[int, int], np.ndarray] = {}      # every K_{i,j} acting on this agent's input
    elimination: Dict[int, np.ndarray] = {}


class SubsystemAgent:
    def __init__(self, index: int, name: str, subsystem: Subsystem, supply: SupplyRate,
                 coupling_row: Dict[int, np.ndarray], robust_eps: float = 0.0):
        self.index = index
        self.name = name
        self.modes = modes_of(subsystem)
        self.supply = supply
        self.coupling_row = dict(coupling_row)    # j -> H_{i,j}
        self.robust_eps = robust_eps
        self.state = AgentState()

    @classmethod
    def from_network(cls, net: NetworkModel, i: int, settings: SolverSettings) -> "SubsystemAgent":
        row = {j: H for (r, j), H in net.coupling.blocks.items() if r == i}
        return cls(i, net.name(i), net.subsystems[i], net.supplies[i], row, settings.robust_eps.get(i, 0.0))

    @property
    def n(self) -> int:
        return self.modes[0].dims.n

    def publish(self, receiver: int, receiver_n: int, adjacent: bool) -> NeighborPayload:
        record = self.state.record
        if record is None:
            raise SequenceError(f"{self.name} has no certificate to send")
        P = record.P
        H = self.coupling_row.get(receiver)
        coupling = [P @ mode.B1 @ H if H is not None else np.zeros((self.n, receiver_n)) for mode in self.modes]
        return NeighborPayload(sender=self.index, M=record.M, P=P, structured=record.structured, adjacent=adjacent,
                               coupling=coupling, actuation=[P @ mode.B3 for mode in self.modes],
                               elimination=self.state.elimination)

    def problem(self, incoming: List[NeighborPayload], neighbors: Optional[List[int]] = None) -> StepProblem:
        blocks = [IncomingBlock(payload=pay, H_in=self.coupling_row.get(pay.sender) if pay.adjacent else None)
                  for pay in incoming]
        return StepProblem(index=self.index, modes=self.modes, supply=self.supply,
                           self_coupling=self.coupling_row.get(self.index), incoming=blocks, robust_eps=self.robust_eps,
                           neighbors=neighbors)

    def step(self, incoming: List[NeighborPayload], design: bool, settings: SolverSettings,
             neighbors: Optional[List[int]] = None) -> FeasibilityOutcome:
        """neighbors is the full interaction set of a node joined last, None for a sequential step."""
        problem = self.problem(incoming, neighbors)
        if neighbors is not None:
            outcome = solve_compositional_step(problem, settings)
        elif len(self.modes) > 1:
            outcome = solve_switched_step(problem, settings, design=design)
        elif design:
            outcome = solve_design_step(problem, settings)
        else:
            outcome = solve_analysis_step(problem, settings)
        if outcome.feasible:
            self.accept(outcome)
        return outcome

    def accept(self, outcome: FeasibilityOutcome):
        sol = outcome.solution
        gains = dict(self.state.gains)
        if sol.self_gain is not None:
            gains[(self.index, self.index)] = sol.self_gain
        for j, K in sol.gains_out.items():
            gains[(self.index, j)] = K
        elimination = {j: G for j, G in outcome.elimination.items() if np.any(G != 0)}
        self.state = AgentState(record=outcome.record, self_gain=sol.self_gain, gains=gains, elimination=elimination)

    def receive_gain(self, sender: int, K: np.ndarray):
        """K_{i,sender}, designed by a later neighbor."""
        self.state = self.state.copy(update={"gains": {**self.state.gains, (self.index, sender): K}})

    def restore(self, record: MessengerRecord, elimination: Dict[int, np.ndarray], gains: Dict[Tuple[int, int], np.ndarray]):
        self.state = AgentState(record=record, self_gain=gains.get((self.index, self.index)),
                                gains={key: K for key, K in gains.items() if key[0] == self.index},
                                elimination=elimination)


# --- Reports ---
def _plain(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


class GainEntry(BaseModel):
    i: int
    j: int
    K: List[List[float]]


class StepReport(FrozenModel):
    subsystem: int
    name: str = ""
    status: StepStatus
    regime: str = ""
    P: Optional[np.ndarray] = None
    M: Optional[np.ndarray] = None
    structured: bool = False
    gamma: Optional[float] = None
    margin: Optional[float] = None
    robust_eps: float = 0.0
    senders: List[int] = []
    combinations: int = 0
    selected_index: Optional[int] = None
    elimination: Dict[int, np.ndarray] = {}
    gains_designed: List[Tuple[int, int]] = []
    verified: Optional[bool] = None
    detail: str = ""
    wall_time: float = 0.0

    @validator("P", "M", pre=True)
    def _matrix(cls, value, field):
        return None if value is None else as_matrix(value, field.name)

    @validator("elimination", pre=True)
    def _rows(cls, rows):
        return {int(k): as_matrix(G, f"G{k}") for k, G in dict(rows or {}).items()}

    @property
    def certified(self) -> bool:
        return self.status in (StepStatus.ANALYSIS_FEASIBLE, StepStatus.SYNTHESIZED)

    def record(self) -> MessengerRecord:
        return MessengerRecord(M=self.M, P=self.P, structured=self.structured, gamma=self.gamma)


class CertificationReport(FrozenModel):
    mode: RunMode
    sequence: List[int]
    steps: List[StepReport]
    gains: ControllerSet = ControllerSet()
    certified: bool = False
    detail: str = ""
    version: str = __version__
    network_hash: Optional[str] = None
    settings: Dict[str, Any] = {}

    def step_for(self, i: int) -> Optional[StepReport]:
        return next((s for s in self.steps if s.subsystem == i), None)

    def records(self) -> Dict[int, MessengerRecord]:
        return {s.subsystem: s.record() for s in self.steps if s.certified}

    def P_blocks(self, size: int) -> List[np.ndarray]:
        blocks = []
        for i in range(size):
            step = self.step_for(i)
            if step is None or not step.certified:
                raise SequenceError(f"subsystem {i} carries no certificate")
            blocks.append(step.P)
        return blocks

    def gammas(self) -> Dict[int, float]:
        return {s.subsystem: s.gamma for s in self.steps if s.gamma is not None}

    def to_dict(self, include_timing: bool = False) -> Dict[str, Any]:
        steps = []
        for s in self.steps:
            entry = _plain(s.dict(exclude=set() if include_timing else {"wall_time"}))
            steps.append(entry)
        gains = [GainEntry(i=i, j=j, K=K.tolist()).dict() for (i, j), K in sorted(self.gains.gains.items())]
        return {"mode": self.mode.value, "sequence": list(self.sequence), "steps": steps, "gains": gains,
                "certified": self.certified, "detail": self.detail, "version": self.version,
                "network_hash": self.network_hash, "settings": _plain(self.settings)}

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)


def report_from_dict(data: Dict[str, Any]) -> CertificationReport:
    gains = {(int(g["i"]), int(g["j"])): g["K"] for g in data.get("gains", [])}
    steps = [StepReport(**step) for step in data.get("steps", [])]
    return CertificationReport(mode=data["mode"], sequence=data["sequence"], steps=steps,
                               gains=ControllerSet(gains=gains), certified=data.get("certified", False),
                               detail=data.get("detail", ""), version=data.get("version", __version__),
                               network_hash=data.get("network_hash"), settings=data.get("settings", {}))


def save_report(report: CertificationReport, path: str, include_timing: bool = False):
    with open(path, "w") as f:
        f.write(report.to_json(include_timing))
    logger.info("Report written to %s", path)


def load_report(path: str) -> CertificationReport:
    with open(path, "r") as f:
        return report_from_dict(json.load(f))


def network_hash(net: NetworkModel) -> str:
    """Hash of the canonical serialization (used for networks built in memory)."""
    return content_hash(json.dumps(network_to_dict(net), sort_keys=True))


# --- Routing and verification ---
def route(net: NetworkModel, agents: Dict[int, SubsystemAgent], processed: Sequence[int], i: int,
          channel: Channel) -> List[NeighborPayload]:
    """Payloads step i needs, in processing order: interacting senders plus senders reached through fill."""
    interaction = set(net.coupling.interaction(i))
    relevant: List[int] = []
    incoming, fill = [], False
    for k in processed:
        elimination = agents[k].state.elimination
        via = [m for m in relevant if m in elimination]
        if k in interaction or via:
            fill = fill or bool(via)
            relevant.append(k)
            incoming.append(channel.transmit(agents[k].publish(i, net.dims(i).n, adjacent=k in interaction)))
    if fill and net.is_switched:
        raise SequenceError(f"sequence {net.order} produces fill-in at {net.name(i)}; switched networks need a "
                            "sequence where each step's processed neighbors are not coupled through earlier steps")
    return incoming


def subnetwork(net: NetworkModel, nodes: Sequence[int]) -> Tuple[NetworkModel, Dict[int, int]]:
    index = {old: new for new, old in enumerate(nodes)}
    blocks = {(index[i], index[j]): H for (i, j), H in net.coupling.blocks.items() if i in index and j in index}
    sub = NetworkModel(subsystems=[net.subsystems[i] for i in nodes], coupling=CouplingMap(blocks=blocks),
                       supplies=[net.supplies[i] for i in nodes])
    return sub, index


def verify_subnetwork(net: NetworkModel, nodes: Sequence[int], records: Dict[int, MessengerRecord],
                      gains: ControllerSet, cap: int = 10_000, tol: Optional[float] = None) -> List[GammaCheck]:
    """centralizedGamma of the processed subnetwork for every mode combination."""
    sub, index = subnetwork(net, nodes)
    kept = ControllerSet(gains={(index[i], index[j]): K for (i, j), K in gains.gains.items() if i in index and j in index})
    supplies = [net.supplies[i].resolved(records[i].gamma) if net.supplies[i].gain_variable else net.supplies[i]
                for i in nodes]
    P_blocks = [records[i].P for i in nodes]
    counts = sub.mode_counts()
    if int(np.prod(counts)) > cap:
        raise SequenceError(f"{int(np.prod(counts))} mode combinations exceed the verification cap of {cap}")
    return [centralized_gamma(sub, kept, P_blocks, combo=combo, supplies=supplies, tol=tol)
            for combo in itertools.product(*[range(c) for c in counts])]


def verify_report(net: NetworkModel, report: CertificationReport, tol: Optional[float] = None) -> List[GammaCheck]:
    records = report.records()
    return verify_subnetwork(net, [i for i in report.sequence if i in records], records, report.gains, tol=tol)


# --- Algorithms ---
def _step_report(i: int, name: str, outcome: FeasibilityOutcome, incoming: List[NeighborPayload],
                 designed: List[Tuple[int, int]], robust_eps: float, wall_time: float) -> StepReport:
    if outcome.feasible:
        status = StepStatus.ANALYSIS_FEASIBLE if outcome.regime == Regime.ANALYSIS else StepStatus.SYNTHESIZED
    elif outcome.status == Status.INFEASIBLE:
        status = StepStatus.INFEASIBLE
    else:
        status = StepStatus.FAILED
    record = outcome.record
    return StepReport(subsystem=i, name=name, status=status, regime=outcome.regime.value,
                      P=record.P if record else None, M=record.M if record else None,
                      structured=record.structured if record else False, gamma=record.gamma if record else None,
                      margin=outcome.min_margin, robust_eps=robust_eps, senders=[p.sender for p in incoming],
                      combinations=len(outcome.combos), selected_index=outcome.selected_index,
                      elimination={j: G for j, G in outcome.elimination.items() if np.any(G != 0)} if outcome.feasible else {},
                      gains_designed=designed, detail=outcome.detail or outcome.status.value, wall_time=wall_time)


def _designed(i: int, outcome: FeasibilityOutcome) -> Dict[Tuple[int, int], np.ndarray]:
    sol = outcome.solution
    if not outcome.feasible or outcome.regime == Regime.ANALYSIS:
        return {}
    gains = {}
    if sol.self_gain is not None:
        gains[(i, i)] = sol.self_gain
    gains.update({(i, j): K for j, K in sol.gains_out.items()})
    gains.update({(j, i): K for j, K in sol.gains_in.items()})
    return gains


def _run(net: NetworkModel, mode: RunMode, settings: Optional[SolverSettings], verify: bool,
         net_hash: Optional[str]) -> CertificationReport:
    settings = settings or SolverSettings()
    require_valid(net)
    design = mode != RunMode.ANALYSIS
    agents = {i: SubsystemAgent.from_network(net, i, settings) for i in range(net.size)}
    channel = Channel()
    processed: List[int] = []
    gains: Dict[Tuple[int, int], np.ndarray] = {}
    steps: List[StepReport] = []
    detail = ""
    logger.info("%s over %d subsystem(s), sequence %s", mode.value, net.size, net.order)
    for i in net.order:
        start = time.perf_counter()
        incoming = route(net, agents, processed, i, channel)
        outcome = agents[i].step(incoming, design, settings)
        designed = _designed(i, outcome)
        # hard zeros: gains left at zero are not reported
        designed = {key: K for key, K in designed.items() if np.any(K != 0)}
        for (r, c), K in designed.items():
            if r != i:
                agents[r].receive_gain(i, K)
        gains.update(designed)
        wall = time.perf_counter() - start
        step = _step_report(i, net.name(i), outcome, incoming, sorted(designed), agents[i].robust_eps, wall)
        logger.info("Step %s: %s (margin %s, %.2fs)", net.name(i), step.status.value,
                    "n/a" if step.margin is None else f"{step.margin:.3e}", wall)
        if outcome.feasible:
            processed.append(i)
            if verify:
                records = {k: agents[k].state.record for k in processed}
                checks = verify_subnetwork(net, processed, records, ControllerSet(gains=gains))
                ok = all(c.verdict for c in checks)
                if not ok:
                    logger.warning("Processed subnetwork after %s fails the centralized check", net.name(i))
                step = step.copy(update={"verified": ok})
        steps.append(step)
        if not outcome.feasible:
            detail = f"{net.name(i)}: {outcome.detail or outcome.status.value}"
            break
    done = {s.subsystem for s in steps}
    steps += [StepReport(subsystem=k, name=net.name(k), status=StepStatus.SKIPPED, detail="not reached")
              for k in net.order if k not in done]
    certified = all(s.certified for s in steps)
    logger.info("%s finished: %s (%d payload(s) exchanged)", mode.value, "certified" if certified else "not certified",
                channel.sent)
    return CertificationReport(mode=mode, sequence=net.order, steps=steps, gains=ControllerSet(gains=gains),
                               certified=certified, detail=detail, network_hash=net_hash or network_hash(net),
                               settings=_settings_summary(settings))


def _settings_summary(settings: SolverSettings) -> Dict[str, Any]:
    return _plain({"feedthrough": settings.feedthrough, "selection": settings.selection,
                   "objective": settings.objective, "eps_rel": settings.eps_rel, "margin_target": settings.margin_target,
                   "robust_eps": {str(k): v for k, v in sorted(settings.robust_eps.items())}})


def run_analysis(net: NetworkModel, settings: Optional[SolverSettings] = None, verify: bool = False,
                 net_hash: Optional[str] = None) -> CertificationReport:
    """Stops at the first step whose analysis problem is not certified."""
    return _run(net, RunMode.ANALYSIS, settings, verify, net_hash)


def run_synthesis(net: NetworkModel, settings: Optional[SolverSettings] = None, verify: bool = False,
                  net_hash: Optional[str] = None) -> CertificationReport:
    """Analysis first at every step, synthesis only where analysis fails; earlier steps are never re-solved."""
    return _run(net, RunMode.SYNTHESIS, settings, verify, net_hash)


def run_switched_synthesis(net: NetworkModel, settings: Optional[SolverSettings] = None, verify: bool = False,
                           net_hash: Optional[str] = None) -> CertificationReport:
    return _run(net, RunMode.SWITCHED, settings, verify, net_hash)


def run_compositional(net: NetworkModel, report: CertificationReport, new_sub: Subsystem,
                      new_coupling: Dict[Tuple[int, int], Any], new_supply: SupplyRate,
                      settings: Optional[SolverSettings] = None, verify: bool = False,
                      net_hash: Optional[str] = None) -> Tuple[NetworkModel, CertificationReport]:
    """Joins new_sub to a certified network, solving only at the new node."""
    settings = settings or SolverSettings()
    if not report.certified:
        raise CompositionError("base report is not certified")
    if net_hash is not None and report.network_hash is not None and net_hash != report.network_hash:
        raise CompositionError(f"base report was produced for {report.network_hash}, network file is {net_hash}")
    if new_sub.name and any(net.name(i) == new_sub.name for i in range(net.size)):
        raise CompositionError(f"node already present: '{new_sub.name}'")
    if sorted(report.sequence) != list(range(net.size)):
        raise CompositionError("base report does not cover the base network")
    ext = extend_network(net, new_sub, new_coupling, new_supply)
    require_valid(ext)
    new = net.size
    agents = {i: SubsystemAgent.from_network(ext, i, settings) for i in range(ext.size)}
    for i in range(net.size):
        step = report.step_for(i)
        agents[i].restore(step.record(), step.elimination, report.gains.gains)
    channel = Channel()
    start = time.perf_counter()
    incoming = route(ext, agents, list(report.sequence), new, channel)
    outcome = agents[new].step(incoming, True, settings, neighbors=ext.coupling.interaction(new))
    designed = {key: K for key, K in _designed(new, outcome).items() if np.any(K != 0)}
    wall = time.perf_counter() - start
    step = _step_report(new, ext.name(new), outcome, incoming, sorted(designed), agents[new].robust_eps, wall)
    gains = dict(report.gains.gains)
    if outcome.feasible:
        gains.update(designed)
        if verify:
            records = {**report.records(), new: outcome.record}
            ok = all(c.verdict for c in verify_subnetwork(ext, list(report.sequence) + [new], records,
                                                          ControllerSet(gains=gains)))
            step = step.copy(update={"verified": ok})
    logger.info("Join of %s: %s (%d sender(s), %.2fs)", ext.name(new), step.status.value, len(incoming), wall)
    out = CertificationReport(mode=RunMode.COMPOSITIONAL, sequence=list(report.sequence) + [new],
                              steps=list(report.steps) + [step], gains=ControllerSet(gains=gains),
                              certified=outcome.feasible, detail="" if outcome.feasible else f"{ext.name(new)}: {step.detail}",
                              network_hash=network_hash(ext), settings=report.settings or _settings_summary(settings))
    return ext, out


def controller_set(report: CertificationReport) -> ControllerSet:
    return report.gains
