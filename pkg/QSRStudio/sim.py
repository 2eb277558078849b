"""Closed-loop assembly, fixed-step integration under switching and the
trajectory audit of the dissipation inequality."""
import csv
import itertools
import json
import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, validator

from .blockpd import stacked_supply
from .model import (FrozenModel, NetworkModel, QSRError, SupplyRate, block_diag,
                    closed_loop_matrices, symmetrize)
from .pipeline import CertificationReport

logger = logging.getLogger(__name__)

DISTURBANCE_KINDS = ("zero", "piecewise", "sinusoid", "load-step")
DIVERGENCE_LIMIT = 1e150
RK4_STABILITY = 2.5      # |h lambda| kept below this per sub-step


class ScenarioError(QSRError): pass


# --- Data Models ---
class ClosedLoopSystem(FrozenModel):
    A: np.ndarray
    B2: np.ndarray
    C: np.ndarray
    D: np.ndarray
    P: np.ndarray
    supply: SupplyRate
    combo: Tuple[int, ...] = ()

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def l(self) -> int:
        return self.B2.shape[1]

    @property
    def m(self) -> int:
        return self.C.shape[0]


class DisturbanceSpec(BaseModel):
    kind: str = "zero"
    amplitude: float = 1.0
    hold: float = 0.1
    frequency: Optional[float] = None
    events: List[Tuple[float, List[float]]] = []

    @validator("kind")
    def _kind(cls, kind):
        if kind not in DISTURBANCE_KINDS:
            raise ValueError(f"unknown disturbance kind '{kind}' (expected one of {', '.join(DISTURBANCE_KINDS)})")
        return kind

    @validator("hold")
    def _hold(cls, hold):
        if hold <= 0:
            raise ValueError("hold time must be positive")
        return hold


class SwitchEvent(BaseModel):
    time: float
    subsystem: int
    mode: int


class Scenario(BaseModel):
    comment: Optional[str] = None
    horizon: float
    step: float
    x0: Optional[List[float]] = None
    initial_modes: Optional[List[int]] = None
    disturbance: DisturbanceSpec = DisturbanceSpec()
    switching: List[SwitchEvent] = []
    seed: int = 0
    record_every: int = 1
    audit_stride: int = 10

    @validator("step")
    def _step(cls, step):
        if step <= 0:
            raise ValueError("step size must be positive")
        return step

    @validator("horizon")
    def _horizon(cls, horizon):
        if horizon < 0:
            raise ValueError("horizon must be nonnegative")
        return horizon

    @validator("record_every", "audit_stride")
    def _stride(cls, value, field):
        if value < 1:
            raise ValueError(f"{field.name} must be at least 1")
        return value

    @validator("switching")
    def _increasing(cls, events):
        last: Dict[int, float] = {}
        for event in events:
            if event.subsystem in last and event.time <= last[event.subsystem]:
                raise ValueError(f"switching times for subsystem {event.subsystem} must be strictly increasing")
            last[event.subsystem] = event.time
        return events

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.step))


class TrajectoryRecord(FrozenModel):
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    w: np.ndarray
    supply_integral: np.ndarray
    storage: np.ndarray
    combos: List[Tuple[int, ...]] = []     # active combination per step
    divergent: bool = False
    seed: int = 0
    step: float = 0.0
    schedule: List[SwitchEvent] = []

    @property
    def samples(self) -> int:
        return len(self.t)


class AuditResult(BaseModel):
    min_slack: float
    tolerance: float
    verdict: bool
    stride: int
    worst_interval: Optional[Tuple[float, float]] = None
    reason: str = ""


# --- Assembly ---
def _resolved_supplies(net: NetworkModel, report: CertificationReport) -> List[SupplyRate]:
    gammas = report.gammas()
    supplies = []
    for i, supply in enumerate(net.supplies):
        if supply.gain_variable:
            if i not in gammas:
                raise ScenarioError(f"{net.name(i)} has an undecided L2 level and no certified gamma")
            supply = supply.resolved(gammas[i])
        supplies.append(supply)
    return supplies


def assemble_closed_loop(net: NetworkModel, report: CertificationReport,
                         mode_combo: Optional[Sequence[int]] = None) -> ClosedLoopSystem:
    """Stacked A + B1 H + B3 K for one mode combination, with P = diag(P_i)."""
    if not report.certified:
        raise ScenarioError(f"report is not certified ({report.detail or 'no detail'})")
    combo = tuple(mode_combo) if mode_combo is not None else (0,) * net.size
    counts = net.mode_counts()
    if len(combo) != net.size or any(not 0 <= c < k for c, k in zip(combo, counts)):
        raise ScenarioError(f"mode combination {combo} does not match mode counts {counts}")
    P = block_diag(report.P_blocks(net.size))
    A, B2, C, D = closed_loop_matrices(net, report.gains, combo)
    return ClosedLoopSystem(A=A, B2=B2, C=C, D=D, P=symmetrize(P, "P"),
                            supply=stacked_supply(_resolved_supplies(net, report)), combo=combo)


class ClosedLoopFamily:
    """Closed loops of a switched network, assembled on first use per combination."""

    def __init__(self, net: NetworkModel, report: CertificationReport):
        self.net, self.report = net, report
        self._cache: Dict[Tuple[int, ...], ClosedLoopSystem] = {}

    @property
    def mode_counts(self) -> List[int]:
        return self.net.mode_counts()

    def at(self, combo: Sequence[int]) -> ClosedLoopSystem:
        combo = tuple(combo)
        if combo not in self._cache:
            self._cache[combo] = assemble_closed_loop(self.net, self.report, combo)
        return self._cache[combo]

    def all(self) -> List[ClosedLoopSystem]:
        return [self.at(c) for c in itertools.product(*[range(k) for k in self.mode_counts])]


# --- Disturbances ---
def disturbance_samples(spec: DisturbanceSpec, steps: int, h: float, l: int, seed: int) -> np.ndarray:
    """w_k held constant over [t_k, t_k+1), shape (steps, l)."""
    rng = np.random.default_rng(seed)
    t = h * np.arange(steps)
    if spec.kind == "zero":
        return np.zeros((steps, l))
    if spec.kind == "piecewise":
        hold = max(1, int(round(spec.hold / h)))
        levels = rng.uniform(-spec.amplitude, spec.amplitude, size=(steps // hold + 1, l))
        return levels[np.arange(steps) // hold]
    if spec.kind == "sinusoid":
        freq = spec.frequency if spec.frequency is not None else rng.uniform(0.5, 5.0)
        phase = rng.uniform(0.0, 2.0 * np.pi, size=l)
        return spec.amplitude * np.sin(freq * t[:, None] + phase[None, :])
    w = np.zeros((steps, l))
    for time_, value in sorted(spec.events, key=lambda e: e[0]):
        value = np.broadcast_to(np.asarray(value, dtype=float), (l,))
        w[t >= time_ - 1e-12] = value
    return w


# --- Integration ---
def rk4_transition(A: np.ndarray, B: np.ndarray, h: float) -> Tuple[np.ndarray, np.ndarray, int]:
    """One RK4 step of x' = Ax + Bw with w held, as x+ = Phi x + Gamma w.

    The step is split into equal sub-steps when h times the spectral radius of A
    leaves the RK4 stability region."""
    radius = float(np.max(np.abs(np.linalg.eigvals(A)))) if A.size else 0.0
    sub = max(1, int(math.ceil(h * radius / RK4_STABILITY)))
    hs = h / sub
    n = A.shape[0]
    I = np.eye(n)
    hA = hs * A
    hA2 = hA @ hA
    hA3 = hA2 @ hA
    phi = I + hA + hA2 / 2.0 + hA3 / 6.0 + hA3 @ hA / 24.0
    gamma = hs * (I + hA / 2.0 + hA2 / 6.0 + hA3 / 24.0) @ B
    Phi, Gamma = I, np.zeros_like(B)
    for _ in range(sub):
        Phi, Gamma = phi @ Phi, phi @ Gamma + gamma
    return Phi, Gamma, sub


def _schedule(sc: Scenario, counts: List[int]) -> Dict[int, List[Tuple[int, int]]]:
    """Grid index -> [(subsystem, mode)] with events snapped to the grid."""
    at: Dict[int, List[Tuple[int, int]]] = {}
    for event in sc.switching:
        if not 0 <= event.subsystem < len(counts) or not 0 <= event.mode < counts[event.subsystem]:
            raise ScenarioError(f"switching event {event.dict()} is out of range for mode counts {counts}")
        k = int(round(event.time / sc.step))
        if abs(k * sc.step - event.time) > 1e-9 * max(1.0, abs(event.time)):
            logger.warning("Switching event at t=%g snapped to grid time %g", event.time, k * sc.step)
        at.setdefault(k, []).append((event.subsystem, event.mode))
    return at


def _supply_rate(y: np.ndarray, w: np.ndarray, supply: SupplyRate) -> float:
    return float(y @ supply.Q @ y + 2.0 * y @ supply.S @ w + w @ supply.R @ w)


def integrate(system: Union[ClosedLoopSystem, ClosedLoopFamily], sc: Scenario) -> TrajectoryRecord:
    """Fixed-step RK4 with zero-order-held disturbances; trapezoidal supply integral on the same grid."""
    if isinstance(system, ClosedLoopSystem):
        if sc.switching:
            raise ScenarioError("a single closed loop cannot follow a switching schedule")
        at = lambda combo: system
        combo = system.combo
        schedule: Dict[int, List[Tuple[int, int]]] = {}
    else:
        counts = system.mode_counts
        at = system.at
        combo = tuple(sc.initial_modes) if sc.initial_modes is not None else (0,) * len(counts)
        if len(combo) != len(counts) or any(not 0 <= c < k for c, k in zip(combo, counts)):
            raise ScenarioError(f"initial modes {combo} do not match mode counts {counts}")
        schedule = _schedule(sc, counts)
    N, h = sc.steps, sc.step
    if N < 1:
        raise ScenarioError(f"horizon {sc.horizon} holds no step of size {h}")
    active = at(combo)
    n, l, m = active.n, active.l, active.m
    x0 = np.zeros(n) if sc.x0 is None else np.asarray(sc.x0, dtype=float)
    if x0.shape != (n,):
        raise ScenarioError(f"initial state has {x0.size} entries, the network has {n} states")
    w = disturbance_samples(sc.disturbance, N, h, l, sc.seed)
    transitions: Dict[Tuple[int, ...], Tuple[np.ndarray, np.ndarray]] = {}

    def transition(c):
        if c not in transitions:
            loop = at(c)
            Phi, Gamma, sub = rk4_transition(loop.A, loop.B2, h)
            if sub > 1:
                logger.warning("Step %g is stiff for combination %s, using %d RK4 sub-steps", h, c, sub)
            transitions[c] = (Phi, Gamma)
        return transitions[c]

    x = np.zeros((N + 1, n))
    y = np.zeros((N + 1, m))
    integral = np.zeros(N + 1)
    storage = np.zeros(N + 1)
    x[0] = x0
    storage[0] = float(x0 @ active.P @ x0)
    combos: List[Tuple[int, ...]] = []
    last = N
    divergent = False
    for k in range(N):
        for sub_idx, mode in schedule.get(k, []):
            combo = tuple(mode if s == sub_idx else c for s, c in enumerate(combo))
        loop = at(combo)
        Phi, Gamma = transition(combo)
        combos.append(combo)
        wk = w[k]
        y[k] = loop.C @ x[k] + loop.D @ wk
        x_next = Phi @ x[k] + Gamma @ wk
        if not np.all(np.isfinite(x_next)) or float(np.max(np.abs(x_next))) > DIVERGENCE_LIMIT:
            logger.warning("Trajectory diverged at t=%g", (k + 1) * h)
            last, divergent = k, True
            break
        y_end = loop.C @ x_next + loop.D @ wk
        integral[k + 1] = integral[k] + 0.5 * h * (_supply_rate(y[k], wk, loop.supply) + _supply_rate(y_end, wk, loop.supply))
        x[k + 1] = x_next
        storage[k + 1] = float(x_next @ loop.P @ x_next)
    w_full = np.vstack([w, w[-1:]])
    if not divergent:
        loop = at(combo)
        y[N] = loop.C @ x[N] + loop.D @ w_full[N]
    keep = slice(0, last + 1)
    events = sorted(sc.switching, key=lambda e: (e.time, e.subsystem))
    return TrajectoryRecord(t=h * np.arange(N + 1)[keep], x=x[keep], y=y[keep], w=w_full[keep],
                            supply_integral=integral[keep], storage=storage[keep], combos=combos,
                            divergent=divergent, seed=sc.seed, step=h, schedule=events)


# --- Audit ---
def audit_tolerance(tr: TrajectoryRecord) -> float:
    return 1e-4 * (1.0 + (float(np.max(tr.storage)) if tr.storage.size else 0.0))


def audit_dissipation(tr: TrajectoryRecord, stride: int = 10, tol: Optional[float] = None) -> AuditResult:
    """Smallest supply-minus-storage-change over every pair t0 < t of the stride grid."""
    tol = audit_tolerance(tr) if tol is None else tol
    if tr.divergent:
        return AuditResult(min_slack=-math.inf, tolerance=tol, verdict=False, stride=stride, reason="divergent")
    idx = np.arange(0, tr.samples, stride)
    if idx[-1] != tr.samples - 1:
        idx = np.append(idx, tr.samples - 1)
    F = tr.supply_integral[idx] - tr.storage[idx]
    if len(idx) < 2:
        return AuditResult(min_slack=0.0, tolerance=tol, verdict=True, stride=stride, reason="single sample")
    best_prev = np.maximum.accumulate(F[:-1])
    argmax_prev = np.zeros(len(F) - 1, dtype=int)
    for k in range(1, len(F) - 1):
        argmax_prev[k] = argmax_prev[k - 1] if F[argmax_prev[k - 1]] >= F[k] else k
    slack = F[1:] - best_prev
    worst = int(np.argmin(slack))
    min_slack = float(slack[worst])
    interval = (float(tr.t[idx[argmax_prev[worst]]]), float(tr.t[idx[worst + 1]]))
    verdict = min_slack >= -tol
    if not verdict:
        logger.info("Dissipation audit fails on [%g, %g]: slack %.3e < -%.3e", interval[0], interval[1], min_slack, tol)
    return AuditResult(min_slack=min_slack, tolerance=tol, verdict=verdict, stride=stride, worst_interval=interval)


# --- Output files ---
def write_trajectory_csv(tr: TrajectoryRecord, path: str, record_every: int = 1):
    n, m, l = tr.x.shape[1], tr.y.shape[1], tr.w.shape[1]
    fields = (["time"] + [f"x{k}" for k in range(n)] + [f"y{k}" for k in range(m)] + [f"w{k}" for k in range(l)]
              + ["supply_integral", "storage"])
    rows = list(range(0, tr.samples, record_every))
    if rows and rows[-1] != tr.samples - 1:
        rows.append(tr.samples - 1)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(fields)
        for k in rows:
            writer.writerow([repr(float(v)) for v in
                             [tr.t[k], *tr.x[k], *tr.y[k], *tr.w[k], tr.supply_integral[k], tr.storage[k]]])
    logger.info("Trajectory written to %s (%d row(s))", path, len(rows))


def trajectory_metadata(tr: TrajectoryRecord, sc: Scenario, audit: Optional[AuditResult] = None) -> Dict[str, object]:
    meta = {"seed": tr.seed, "step": tr.step, "horizon": sc.horizon, "samples": tr.samples,
            "record_every": sc.record_every, "divergent": tr.divergent,
            "disturbance": sc.disturbance.dict(), "schedule": [e.dict() for e in tr.schedule],
            "max_state": float(np.max(np.abs(tr.x))) if tr.x.size else 0.0}
    if audit is not None:
        meta["audit"] = audit.dict()
    return meta


def write_json(data: Dict[str, object], path: str):
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)


def load_scenario(path: str) -> Scenario:
    with open(path, "r") as f:
        return Scenario.parse_obj(json.load(f))


def simulate(net: NetworkModel, report: CertificationReport, sc: Scenario) -> Tuple[TrajectoryRecord, AuditResult]:
    """Integrates the certified closed loop of `net` and audits the trajectory."""
    family = ClosedLoopFamily(net, report)
    system = family if (net.is_switched or sc.switching) else family.at((0,) * net.size)
    tr = integrate(system, sc)
    return tr, audit_dissipation(tr, sc.audit_stride)
