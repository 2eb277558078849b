"""Semidefinite programs behind one sequential step: analysis (energy matrix
only), synthesis (energy matrix plus gains), compositional joins and switched
steps over every mode combination.

Neighbor messengers are moved out of the step LMI by a Schur embedding:

    [[mu_self - diag(t I, eps I), G_1, ..., G_k],
     [G_1',                      S_1,          ],
     [...                              ...,    ],
     [G_k',                               S_k  ]]  >= 0

with G_j the elimination blocks of the processed senders and S_j the state
Schur complements of their published messengers, so the constraint is affine
in P_i, Z_ij = P_i B3_i K_ij and K_ji.
"""
import logging
from enum import Enum
from typing import Dict, List, Optional, Tuple

import cvxpy as cp
import numpy as np
from pydantic import BaseModel, ValidationError, validator

from .messenger import (COMBINATION_CAP, FeedthroughMode, IncomingBlock, MessengerInputs, SelectionMeasure,
                        SingularBlockError, coupling_block, direct_blocks, elimination_blocks, is_structured,
                        mode_combinations, mu_self_expr, positivity_margin, robust_margin, state_schur,
                        switched_messenger)
from .model import (FrozenModel, MessengerRecord, QSRError, SubsystemDynamics, SupplyRate, as_matrix, block_diag)

logger = logging.getLogger(__name__)


class NumericalFailure(QSRError): pass


class Status(str, Enum):
    FEASIBLE = "feasible"
    INFEASIBLE = "infeasible"
    NUMERICAL_FAILURE = "numerical-failure"
    RECOVERY_FAILURE = "recovery-failure"


class Regime(str, Enum):
    ANALYSIS = "analysis"        # P only, every new gain zero
    JOINT = "joint"              # P, Z and K_ji together (Z-substitution)
    FIX_GAINS = "fix-gains"      # own gains fixed, solve P and K_ji
    FIX_ENERGY = "fix-energy"    # P fixed, solve every gain


class Objective(str, Enum):
    MARGIN = "margin"            # maximize t less small trace, gain and gamma penalties
    MIN_TRACE = "min-trace"      # minimize trace(P) + weighted gain norms at t >= eps


# --- Configuration ---
class SolverSettings(BaseModel):
    eps_rel: float = 1e-6
    eps_p: float = 1e-8
    margin_target: float = 0.25
    trace_weight: float = 1e-3
    gain_weight: float = 1e-3
    gamma_weight: float = 1.0
    max_rounds: int = 20
    gamma_rtol: float = 1e-3
    objective: Objective = Objective.MARGIN
    recovery_rtol: float = 1e-6
    prune_rtol: float = 1e-7
    solver: str = "CLARABEL"
    fallback_solver: Optional[str] = "SCS"
    feedthrough: FeedthroughMode = FeedthroughMode.STANDARD
    combination_cap: int = COMBINATION_CAP
    selection: SelectionMeasure = SelectionMeasure.LOWER_BOUND
    robust_eps: Dict[int, float] = {}

    @validator("eps_rel", "eps_p", "margin_target", "recovery_rtol", "prune_rtol", "gamma_rtol")
    def _positive(cls, value, field):
        if value <= 0:
            raise ValueError(f"{field.name} must be positive")
        return value

    @validator("trace_weight", "gain_weight", "gamma_weight")
    def _nonnegative(cls, value, field):
        if value < 0:
            raise ValueError(f"{field.name} must be nonnegative")
        return value

    @validator("max_rounds", "combination_cap")
    def _at_least_one(cls, value, field):
        if value < 1:
            raise ValueError(f"{field.name} must be at least 1")
        return value

    @validator("robust_eps")
    def _robust(cls, values):
        if any(v < 0 for v in values.values()):
            raise ValueError("robust eps values must be nonnegative")
        return values


# --- Data Models ---
class StepProblem(FrozenModel):
    """Everything step i may see: its own modes and supply plus the payloads of
    the processed senders it interacts with (directly or through fill)."""
    index: int = 0
    modes: List[SubsystemDynamics]
    supply: SupplyRate
    self_coupling: Optional[np.ndarray] = None
    incoming: List[IncomingBlock] = []
    robust_eps: float = 0.0
    neighbors: Optional[List[int]] = None    # set for a node joined last

    @validator("self_coupling", pre=True)
    def _matrix(cls, value):
        return None if value is None else as_matrix(value, "H_ii")

    @property
    def n(self) -> int:
        return self.modes[0].dims.n

    @property
    def l(self) -> int:
        return self.modes[0].dims.l

    @property
    def p(self) -> int:
        return self.modes[0].dims.p

    @property
    def adjacent(self) -> List[IncomingBlock]:
        return [inc for inc in self.incoming if inc.payload.adjacent]

    def structured(self, feedthrough=FeedthroughMode.STANDARD) -> bool:
        return all(is_structured(mode, self.supply, feedthrough) for mode in self.modes)

    def combinations(self, cap: int = COMBINATION_CAP) -> List[Tuple[int, ...]]:
        return mode_combinations(len(self.modes), [inc.payload.mode_count for inc in self.adjacent], cap)

    def shared_actuation(self) -> bool:
        B3 = self.modes[0].B3
        return all(np.array_equal(mode.B3, B3) for mode in self.modes[1:])


class StepSolution(FrozenModel):
    P: np.ndarray
    self_gain: Optional[np.ndarray] = None
    gains_out: Dict[int, np.ndarray] = {}    # K_{i,j}
    gains_in: Dict[int, np.ndarray] = {}     # K_{j,i}
    gamma: Optional[float] = None
    t: float = 0.0


class FeasibilityOutcome(FrozenModel):
    status: Status
    regime: Regime = Regime.ANALYSIS
    record: Optional[MessengerRecord] = None
    solution: Optional[StepSolution] = None
    margins: List[float] = []            # one per mode combination, robust bound subtracted
    combos: List[Tuple[int, ...]] = []
    elimination: Dict[int, np.ndarray] = {}
    selected_index: Optional[int] = None
    objective: Optional[float] = None
    rounds: int = 0
    detail: str = ""

    @property
    def feasible(self) -> bool:
        return self.status == Status.FEASIBLE

    @property
    def min_margin(self) -> Optional[float]:
        return min(self.margins) if self.margins else None


# --- Solver backend ---
class SdpBackend:
    """Affine matrix inequalities and a concave objective in, status and point out."""
    name = "abstract"

    def solve(self, objective, constraints) -> Tuple[Status, Optional[float]]:
        raise NotImplementedError


class CvxpyBackend(SdpBackend):
    name = "cvxpy"

    def __init__(self, solver: str = "CLARABEL", fallback: Optional[str] = "SCS"):
        installed = cp.installed_solvers()
        chain = [s for s in (solver, fallback) if s]
        self.chain = [s for s in chain if s in installed]
        if not self.chain:
            raise NumericalFailure(f"none of the solvers {chain} is installed (have {installed})")
        if self.chain[0] != solver:
            logger.warning("Solver %s is not installed, using %s", solver, self.chain[0])

    def solve(self, objective, constraints) -> Tuple[Status, Optional[float]]:
        problem = cp.Problem(cp.Maximize(objective), constraints)
        for k, solver in enumerate(self.chain):
            try:
                problem.solve(solver=solver)
            except cp.error.SolverError as e:
                if k + 1 < len(self.chain):
                    logger.warning("Solver %s failed (%s), retrying with %s", solver, e, self.chain[k + 1])
                    continue
                return Status.NUMERICAL_FAILURE, None
            status = problem.status
            last = k + 1 == len(self.chain)
            if status in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
                if any(v.value is None for v in problem.variables()):
                    logger.warning("Solver %s reported '%s' without a point", solver, status)
                elif status == cp.OPTIMAL:
                    return Status.FEASIBLE, float(problem.value)
                elif last:
                    # the caller re-evaluates the point without the solver before accepting it
                    logger.warning("Solver %s returned an inaccurate optimum", solver)
                    return Status.FEASIBLE, float(problem.value)
                else:
                    logger.warning("Solver %s returned an inaccurate optimum, retrying with %s", solver, self.chain[k + 1])
                    continue
            if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
                return Status.INFEASIBLE, None
            if k + 1 < len(self.chain):
                logger.warning("Solver %s ended with status '%s', retrying with %s", solver, status, self.chain[k + 1])
        return Status.NUMERICAL_FAILURE, None


def backend_for(settings: SolverSettings) -> SdpBackend:
    return CvxpyBackend(settings.solver, settings.fallback_solver)


# --- Scales ---
def data_scale(problem: StepProblem) -> float:
    mats = [getattr(mode, key) for mode in problem.modes for key in ("A", "B1", "B2", "B3", "C")]
    mats += [mode.D for mode in problem.modes if mode.D is not None]
    mats += [problem.supply.Q, problem.supply.S, problem.supply.R]
    mats += [problem.self_coupling] if problem.self_coupling is not None else []
    mats += [inc.H_in for inc in problem.incoming if inc.H_in is not None]
    return max(float(np.max(np.abs(X))) for X in mats if X.size)


def supply_scale(supply: SupplyRate) -> float:
    return max(float(np.max(np.abs(X))) if X.size else 0.0 for X in (supply.Q, supply.S, supply.R))


def strictness_eps(problem: StepProblem, settings: SolverSettings) -> float:
    return settings.eps_rel * (1.0 + data_scale(problem))


# --- Formulation ---
class _Formulation:
    """One convex program over the shared variables of a step; one LMI per mode combination.

    couple=False keeps every coupling gain K_ij, K_ji at zero, so only the
    self gain is designed.
    """

    def __init__(self, problem: StepProblem, settings: SolverSettings, regime: Regime,
                 fixed: Optional[StepSolution] = None, couple: bool = True):
        self.problem, self.settings, self.regime = problem, settings, regime
        n, p = problem.n, problem.p
        self.eps = strictness_eps(problem, settings)
        self.t = cp.Variable()
        self.P = fixed.P if regime == Regime.FIX_ENERGY else cp.Variable((n, n), symmetric=True)
        self.rho = cp.Variable() if problem.supply.gain_variable else None
        senders = problem.adjacent if couple else []
        self.Z_self, self.Z_out, self.K_self, self.K_out, self.K_in = None, {}, None, {}, {}
        if regime != Regime.ANALYSIS:
            self.K_in = {inc.payload.sender: cp.Variable((inc.payload.actuation[0].shape[1], n)) for inc in senders}
        if regime == Regime.JOINT:
            self.Z_self = cp.Variable((n, n))
            self.Z_out = {inc.payload.sender: cp.Variable((n, inc.payload.n)) for inc in senders}
        elif regime == Regime.FIX_GAINS:
            self.K_self = fixed.self_gain if fixed.self_gain is not None else np.zeros((p, n))
            self.K_out = {inc.payload.sender: fixed.gains_out.get(inc.payload.sender, np.zeros((p, inc.payload.n)))
                          for inc in senders}
        elif regime == Regime.FIX_ENERGY:
            self.K_self = cp.Variable((p, n))
            self.K_out = {inc.payload.sender: cp.Variable((p, inc.payload.n)) for inc in senders}
        self.structured = problem.structured(settings.feedthrough)
        self.combos = problem.combinations(settings.combination_cap)
        self.constraints = []
        self.bound = self._robust_bound()
        for combo in self.combos:
            self._add_combination(combo)
        if isinstance(self.P, cp.Variable):
            self.constraints.append(self.P >> settings.eps_p * np.eye(n))
        if regime in (Regime.ANALYSIS, Regime.JOINT):
            self.constraints.append(self.t >= self.eps)
        self.constraints.append(self.t <= settings.margin_target * (1.0 + supply_scale(problem.supply)))
        if self.rho is not None:
            self.constraints.append(self.rho >= self.eps)

    def _robust_bound(self):
        """2 eps lmax(P) I; with P a variable, lmax(P) is replaced by a scalar s with P <= s I."""
        eps, n = self.problem.robust_eps, self.problem.n
        if not eps:
            return np.zeros((n, n))
        if not isinstance(self.P, cp.Variable):
            return robust_margin(self.P, eps, 0)
        s = cp.Variable()
        self.constraints.append(self.P << s * np.eye(n))
        return 2.0 * eps * s * np.eye(n)

    def _z_self(self, own: SubsystemDynamics):
        if self.Z_self is not None:
            return self.Z_self
        if self.K_self is not None:
            return self.P @ own.B3 @ self.K_self
        return None

    def _z_out(self, own: SubsystemDynamics, sender: int):
        if sender in self.Z_out:
            return self.Z_out[sender]
        if sender in self.K_out:
            return self.P @ own.B3 @ self.K_out[sender]
        return None

    def _add_combination(self, combo: Tuple[int, ...]):
        problem, n, l = self.problem, self.problem.n, self.problem.l
        own = problem.modes[combo[0]]
        R = self.rho * problem.supply.R if self.rho is not None else None
        mu = mu_self_expr(own, problem.supply, self.P, self._z_self(own), problem.self_coupling,
                          self.settings.feedthrough, R, stacker="cvxpy")
        sender_mode = {inc.payload.sender: mode for inc, mode in zip(problem.adjacent, combo[1:])}
        direct = {}
        for inc in problem.adjacent:
            pay, mode = inc.payload, sender_mode[inc.payload.sender]
            direct[pay.sender] = coupling_block(own, self.P, pay.n, inc.H_in, self._z_out(own, pay.sender),
                                                pay.coupling[mode] if pay.coupling else None,
                                                pay.actuation[mode] if pay.actuation else None,
                                                self.K_in.get(pay.sender, pay.gain))
        payloads = [inc.payload for inc in problem.incoming]
        G = elimination_blocks(n, direct, payloads)
        if self.structured:
            core = mu[:n, :n] - self.t * np.eye(n) - self.bound
            if l:
                self.constraints.append(mu[:n, n:] == 0)
            columns = [G[pay.sender] for pay in payloads]
        else:
            Ex = block_diag([np.eye(n), np.zeros((l, l))])
            Ew = block_diag([np.zeros((n, n)), np.eye(l)])
            pad = np.zeros((n + l, n))
            pad[:n, :n] = np.eye(n)
            core = mu - self.t * Ex - self.eps * Ew - pad @ self.bound @ pad.T
            columns = [cp.vstack([G[pay.sender], np.zeros((l, pay.n))]) for pay in payloads]
        if columns:
            S = block_diag([state_schur(pay.M, pay.n, pay.structured) for pay in payloads])
            side = cp.hstack(columns)
            lmi = cp.bmat([[core, side], [side.T, S]])
        else:
            lmi = core
        self.constraints.append(0.5 * (lmi + lmi.T) >> 0)

    def objective(self):
        s = self.settings
        gain_terms = [cp.norm(X, "fro") for X in [self.Z_self, *self.Z_out.values(), *self.K_in.values()]
                      if isinstance(X, cp.Variable)]
        if self.regime == Regime.FIX_ENERGY:
            gain_terms += [cp.norm(X, "fro") for X in [self.K_self, *self.K_out.values()]]
        min_trace = s.objective == Objective.MIN_TRACE and self.regime in (Regime.ANALYSIS, Regime.JOINT)
        # alternating passes keep the margin objective
        objective = 0 if min_trace else self.t
        if isinstance(self.P, cp.Variable):
            objective = objective - (1.0 if min_trace else s.trace_weight) * cp.trace(self.P)
        if gain_terms:
            objective = objective - s.gain_weight * cp.sum(cp.hstack(gain_terms))
        if self.rho is not None:
            objective = objective - s.gamma_weight * self.rho
        return objective

    def solve(self, backend: SdpBackend) -> Tuple[Status, Optional[float]]:
        return backend.solve(self.objective(), self.constraints)

    def values(self) -> Dict[str, object]:
        """Numeric values after a successful solve."""
        val = lambda X: None if X is None else (np.array(X.value, dtype=float) if isinstance(X, cp.Expression) else X)
        P = val(self.P)
        return {
            "P": 0.5 * (P + P.T), "t": float(self.t.value),
            "rho": None if self.rho is None else float(self.rho.value),
            "Z_self": val(self.Z_self), "Z_out": {j: val(Z) for j, Z in self.Z_out.items()},
            "K_self": val(self.K_self), "K_out": {j: val(K) for j, K in self.K_out.items()},
            "K_in": {j: val(K) for j, K in self.K_in.items()},
        }


# --- Gain recovery ---
def recover_gain(PB3: np.ndarray, Z: np.ndarray, rtol: float) -> Tuple[np.ndarray, bool]:
    """K = (P B3)^+ Z and whether P B3 K reproduces Z within rtol."""
    K = np.linalg.pinv(PB3) @ Z
    residual = float(np.linalg.norm(PB3 @ K - Z, "fro"))
    return K, residual <= rtol * max(float(np.linalg.norm(Z, "fro")), 1e-12)


def _recovered(problem: StepProblem, values: Dict[str, object], rtol: float) -> Tuple[StepSolution, bool]:
    P = values["P"]
    PB3 = P @ problem.modes[0].B3
    K_self, exact = recover_gain(PB3, values["Z_self"], rtol)
    gains_out = {}
    for j, Z in values["Z_out"].items():
        gains_out[j], ok = recover_gain(PB3, Z, rtol)
        exact = exact and ok
    return StepSolution(P=P, self_gain=K_self, gains_out=gains_out, gains_in=values["K_in"],
                        gamma=_gamma(values), t=values["t"]), exact


def _gamma(values) -> Optional[float]:
    return None if values["rho"] is None else float(np.sqrt(max(values["rho"], 0.0)))


# --- Numeric re-evaluation ---
def _incoming_with(problem: StepProblem, solution: StepSolution) -> List[IncomingBlock]:
    blocks = []
    for inc in problem.incoming:
        j = inc.payload.sender
        blocks.append(inc.copy(update={"K_out": solution.gains_out.get(j), "K_in": solution.gains_in.get(j)}))
    return blocks


def _failed(problem: StepProblem, solution: StepSolution, detail: str) -> FeasibilityOutcome:
    logger.warning("Step %d: %s", problem.index, detail)
    return FeasibilityOutcome(status=Status.NUMERICAL_FAILURE, solution=solution, detail=detail)


def _point_issue(solution: StepSolution) -> Optional[str]:
    """Why a solver point cannot carry a certificate, or None."""
    P = solution.P
    if not np.all(np.isfinite(P)):
        return "energy matrix has non-finite entries"
    if float(np.linalg.eigvalsh(0.5 * (P + P.T))[0]) <= 0:
        return "energy matrix is not positive definite"
    gains = [solution.self_gain, *solution.gains_out.values(), *solution.gains_in.values()]
    if any(K is not None and not np.all(np.isfinite(K)) for K in gains):
        return "gains have non-finite entries"
    if solution.gamma is not None and not np.isfinite(solution.gamma):
        return "L2 level is not finite"
    return None


def evaluate(problem: StepProblem, settings: SolverSettings, solution: StepSolution) -> FeasibilityOutcome:
    """Messenger matrices for the given point, computed without the solver.

    A point that cannot carry a certificate (indefinite P, non-finite entries,
    singular neighbor blocks) comes back as NUMERICAL_FAILURE instead of raising.
    """
    issue = _point_issue(solution)
    if issue:
        return _failed(problem, solution, issue)
    supply = problem.supply.resolved(solution.gamma) if problem.supply.gain_variable else problem.supply
    n, l = problem.n, problem.l
    eps = strictness_eps(problem, settings)
    incoming = _incoming_with(problem, solution)
    try:
        result = switched_messenger(problem.modes, supply, solution.P, problem.self_coupling, solution.self_gain,
                                    incoming, settings.feedthrough, settings.selection, settings.combination_cap,
                                    settings.solver, neighbors=problem.neighbors)
    except (SingularBlockError, np.linalg.LinAlgError, ValidationError) as e:
        return _failed(problem, solution, f"messenger evaluation failed: {e}")
    structured = result.selected.structured
    bound = robust_margin(solution.P, problem.robust_eps, l)
    tol = 1e-6 * (1.0 + data_scale(problem))
    margins = []
    for combo, M in zip(result.combos, result.candidates):
        margin = positivity_margin(M - bound, n, structured)
        if structured and l and float(np.max(np.abs(M[:n, n:]))) > tol:
            margin = -np.inf
        logger.debug("step %d combination %s: margin %.3e", problem.index, combo, margin)
        margins.append(margin)
    feasible = bool(margins) and min(margins) >= 0.5 * eps
    M = result.selected.M - bound
    if structured:
        M = M.copy()
        M[:n, n:] = 0.0
        M[n:, :n] = 0.0
    if feasible and result.selected_index is None and positivity_margin(M, n, structured) < min(margins):
        # c I with c the smallest candidate margin also sits below every candidate
        floor = np.zeros_like(M)
        size = n if structured else M.shape[0]
        floor[:size, :size] = min(margins) * np.eye(size)
        M = floor
    record = None
    if feasible:
        try:
            record = MessengerRecord(M=M, P=solution.P, structured=structured,
                                     margin=bound if problem.robust_eps > 0 else None, gamma=solution.gamma)
        except ValidationError as e:
            return _failed(problem, solution, f"certificate could not be recorded: {e}")
    inputs = MessengerInputs(own=problem.modes[0], supply=supply, P=solution.P, self_coupling=problem.self_coupling,
                             self_gain=solution.self_gain, incoming=incoming, feedthrough=settings.feedthrough)
    elimination = elimination_blocks(n, direct_blocks(inputs), [inc.payload for inc in incoming])
    return FeasibilityOutcome(status=Status.FEASIBLE if feasible else Status.INFEASIBLE, record=record,
                              solution=solution, margins=margins, combos=result.combos,
                              elimination={j: np.asarray(G) for j, G in elimination.items()},
                              selected_index=result.selected_index)


def _prune(problem: StepProblem, settings: SolverSettings, outcome: FeasibilityOutcome) -> FeasibilityOutcome:
    """Zeroes negligible gains when the step stays certified without them."""
    sol = outcome.solution
    floor = settings.prune_rtol * (1.0 + data_scale(problem))
    small = lambda K: K is not None and float(np.linalg.norm(K, "fro")) <= floor
    if not (small(sol.self_gain) or any(small(K) for K in sol.gains_out.values()) or any(small(K) for K in sol.gains_in.values())):
        return outcome
    zero = lambda K: np.zeros_like(K) if small(K) else K
    trimmed = sol.copy(update={"self_gain": zero(sol.self_gain),
                               "gains_out": {j: zero(K) for j, K in sol.gains_out.items()},
                               "gains_in": {j: zero(K) for j, K in sol.gains_in.items()}})
    retried = evaluate(problem, settings, trimmed)
    return retried if retried.feasible else outcome


# --- Steps ---
def _finish(problem, settings, regime, solution, objective, rounds=0, detail="") -> FeasibilityOutcome:
    outcome = evaluate(problem, settings, solution)
    if outcome.feasible and regime != Regime.ANALYSIS:
        outcome = _prune(problem, settings, outcome)
    if not outcome.feasible:
        logger.warning("Step %d: solver point fails re-evaluation (min margin %.3e)", problem.index,
                       outcome.min_margin if outcome.min_margin is not None else float("nan"))
        return outcome.copy(update={"status": Status.NUMERICAL_FAILURE, "regime": regime, "objective": objective,
                                    "rounds": rounds,
                                    "detail": detail or outcome.detail or "solver point fails re-evaluation"})
    return outcome.copy(update={"regime": regime, "objective": objective, "rounds": rounds, "detail": detail})


def solve_analysis_step(problem: StepProblem, settings: Optional[SolverSettings] = None) -> FeasibilityOutcome:
    """Energy matrix P with every new gain zero."""
    settings = settings or SolverSettings()
    form = _Formulation(problem, settings, Regime.ANALYSIS)
    status, objective = form.solve(backend_for(settings))
    if status != Status.FEASIBLE:
        logger.info("Step %d analysis: %s", problem.index, status.value)
        return FeasibilityOutcome(status=status, regime=Regime.ANALYSIS, combos=form.combos,
                                  detail="sufficient condition not established" if status == Status.INFEASIBLE else "")
    values = form.values()
    solution = StepSolution(P=values["P"], gamma=_gamma(values), t=values["t"])
    return _finish(problem, settings, Regime.ANALYSIS, solution, objective)


def _better(outcome: FeasibilityOutcome, best: Optional[FeasibilityOutcome], rtol: float) -> bool:
    """Whether outcome lowers the certified L2 level of best by more than rtol."""
    return best is None or outcome.record.gamma < (1.0 - rtol) * best.record.gamma


def _alternate(problem: StepProblem, settings: SolverSettings, start: StepSolution, backend: SdpBackend,
               couple: bool = True) -> FeasibilityOutcome:
    """Alternating convex passes: gains fixed then energy matrix fixed, until the margin clears eps.

    With an undecided L2 level the passes go on while each certified point
    lowers gamma by more than gamma_rtol, and the lowest one is returned.
    """
    eps = strictness_eps(problem, settings)
    current, best = start, None
    for round_ in range(1, settings.max_rounds + 1):
        for regime in (Regime.FIX_GAINS, Regime.FIX_ENERGY):
            form = _Formulation(problem, settings, regime, fixed=current, couple=couple)
            status, objective = form.solve(backend)
            if status != Status.FEASIBLE:
                continue
            values = form.values()
            if regime == Regime.FIX_GAINS:
                current = current.copy(update={"P": values["P"], "gains_in": values["K_in"],
                                               "gamma": _gamma(values), "t": values["t"]})
            else:
                current = current.copy(update={"self_gain": values["K_self"], "gains_out": values["K_out"],
                                               "gains_in": values["K_in"], "gamma": _gamma(values), "t": values["t"]})
            logger.debug("Step %d round %d (%s): t = %.3e", problem.index, round_, regime.value, values["t"])
            if values["t"] < eps:
                continue
            outcome = _finish(problem, settings, regime, current, objective, round_)
            if not outcome.feasible:
                continue
            if not problem.supply.gain_variable:
                return outcome
            if not _better(outcome, best, settings.gamma_rtol):
                return best if best.record.gamma <= outcome.record.gamma else outcome
            best = outcome
            logger.debug("Step %d round %d: gamma %.4g", problem.index, round_, outcome.record.gamma)
    if best is not None:
        return best
    return FeasibilityOutcome(status=Status.RECOVERY_FAILURE, regime=Regime.FIX_ENERGY, rounds=settings.max_rounds,
                              detail=f"gain recovery failed after {settings.max_rounds} alternating round(s)")


def _synthesize(problem: StepProblem, settings: SolverSettings, backend: SdpBackend, couple: bool) -> FeasibilityOutcome:
    form = _Formulation(problem, settings, Regime.JOINT, couple=couple)
    status, objective = form.solve(backend)
    if status != Status.FEASIBLE:
        logger.info("Step %d synthesis%s: %s", problem.index, "" if couple else " (coupling gains zero)", status.value)
        return FeasibilityOutcome(status=status, regime=Regime.JOINT, combos=form.combos,
                                  detail="sufficient condition not established" if status == Status.INFEASIBLE else "")
    values = form.values()
    issue = _point_issue(StepSolution(P=values["P"], gamma=_gamma(values)))
    if issue:
        return FeasibilityOutcome(status=Status.NUMERICAL_FAILURE, regime=Regime.JOINT, combos=form.combos, detail=issue)
    solution, exact = _recovered(problem, values, settings.recovery_rtol)
    if exact:
        outcome = _finish(problem, settings, Regime.JOINT, solution, objective,
                          detail="" if couple or not problem.adjacent else "coupling gains held at zero")
        if outcome.feasible:
            return outcome
    logger.warning("Step %d: gain recovery residual too large, falling back to alternating passes", problem.index)
    return _alternate(problem, settings, solution, backend, couple)


def solve_synthesis_step(problem: StepProblem, settings: Optional[SolverSettings] = None) -> FeasibilityOutcome:
    """Energy matrix and gains K_ii, K_ij, K_ji towards the processed neighbors.

    A step with adjacent processed neighbors first tries its own gain K_ii
    alone, with every coupling gain held at zero; coupling gains are designed
    only when that fails.
    """
    settings = settings or SolverSettings()
    backend = backend_for(settings)
    n, p = problem.n, problem.p
    if not problem.shared_actuation():
        logger.info("Step %d: actuation differs across modes, solving by alternating passes", problem.index)
        zero_start = StepSolution(P=np.eye(n), self_gain=np.zeros((p, n)),
                                  gains_out={inc.payload.sender: np.zeros((p, inc.payload.n)) for inc in problem.adjacent})
        return _alternate(problem, settings, zero_start, backend)
    outcome = None
    for couple in ([False, True] if problem.adjacent else [True]):
        outcome = _synthesize(problem, settings, backend, couple)
        if outcome.feasible:
            return outcome
    return outcome


def solve_design_step(problem: StepProblem, settings: Optional[SolverSettings] = None) -> FeasibilityOutcome:
    """Analysis first, synthesis only where analysis does not certify.

    An undecided L2 level goes straight to synthesis so that gamma is
    minimized together with the gains.
    """
    settings = settings or SolverSettings()
    if problem.supply.gain_variable:
        return solve_synthesis_step(problem, settings)
    outcome = solve_analysis_step(problem, settings)
    if outcome.status == Status.INFEASIBLE:
        outcome = solve_synthesis_step(problem, settings)
    return outcome


def solve_compositional_step(problem: StepProblem, settings: Optional[SolverSettings] = None) -> FeasibilityOutcome:
    """New node joined last; its messengers are checked against its full neighbor set."""
    logger.info("Joining node %d against %d certified sender(s)", problem.index, len(problem.incoming))
    return solve_design_step(problem, settings)


def solve_switched_step(problem: StepProblem, settings: Optional[SolverSettings] = None,
                        design: bool = True) -> FeasibilityOutcome:
    """Common P (and gains) over every (own mode, sender modes) combination."""
    settings = settings or SolverSettings()
    logger.info("Step %d: %d mode combination(s)", problem.index, len(problem.combinations(settings.combination_cap)))
    return solve_design_step(problem, settings) if design else solve_analysis_step(problem, settings)
