"""Messenger matrices M_i = mu_self - mu_coupling for open-loop, closed-loop,
compositional and switched steps.

The block builders take a `stacker` ("numpy" or "cvxpy") so the feasibility
layer assembles its LMIs from the same expressions that the numeric path
evaluates.
"""
import itertools
import logging
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import cvxpy as cp
import numpy as np
from pydantic import validator
from scipy.linalg import cho_factor, cho_solve

from .model import (DimensionError, FrozenModel, MessengerRecord, QSRError, SubsystemDynamics, SupplyRate,
                    as_matrix)

logger = logging.getLogger(__name__)

COMBINATION_CAP = 10_000


class SingularBlockError(QSRError): pass
class CombinationBudgetError(QSRError): pass


class FeedthroughMode(str, Enum):
    STANDARD = "standard"
    VERBATIM = "verbatim"
    AUGMENTED = "augmented"


class SelectionMeasure(str, Enum):
    LOWER_BOUND = "lower-bound"
    MIN_EIGENVALUE = "min-eigenvalue"
    FROBENIUS = "frobenius"


# --- Data Models ---
class NeighborPayload(FrozenModel):
    """What a processed subsystem j sends to subsystem i. Products only, never (A, B, C)."""
    sender: int
    M: np.ndarray
    P: np.ndarray
    structured: bool = False
    adjacent: bool = True
    coupling: List[np.ndarray] = []      # per sender mode: P_j B1_j H_{j,i}
    actuation: List[np.ndarray] = []     # per sender mode: P_j B3_j
    elimination: Dict[int, np.ndarray] = {}   # G_{j,m}, m processed before j
    gain: Optional[np.ndarray] = None    # K_{j,i} when it is already fixed

    @validator("M", "P", "gain", pre=True)
    def _matrix(cls, value, field):
        return None if value is None else as_matrix(value, field.name)

    @validator("coupling", "actuation", pre=True)
    def _matrices(cls, values, field):
        return [as_matrix(v, field.name) for v in values or []]

    @validator("elimination", pre=True)
    def _rows(cls, rows):
        return {int(m): as_matrix(G, f"G{m}") for m, G in dict(rows or {}).items()}

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def mode_count(self) -> int:
        return max(1, len(self.coupling))


class IncomingBlock(FrozenModel):
    payload: NeighborPayload
    H_in: Optional[np.ndarray] = None   # H_{i,j}
    K_out: Optional[np.ndarray] = None  # K_{i,j}
    K_in: Optional[np.ndarray] = None   # K_{j,i}
    mode: int = 0                       # sender mode whose products are used

    @validator("H_in", "K_out", "K_in", pre=True)
    def _matrix(cls, value, field):
        return None if value is None else as_matrix(value, field.name)


class MessengerInputs(FrozenModel):
    own: SubsystemDynamics
    supply: SupplyRate
    P: np.ndarray
    self_coupling: Optional[np.ndarray] = None   # H_{i,i}
    self_gain: Optional[np.ndarray] = None       # K_{i,i}
    incoming: List[IncomingBlock] = []           # processing order
    feedthrough: FeedthroughMode = FeedthroughMode.STANDARD

    @validator("P", "self_coupling", "self_gain", pre=True)
    def _matrix(cls, value, field):
        return None if value is None else as_matrix(value, field.name)


class SwitchedResult(FrozenModel):
    combos: List[Tuple[int, ...]]
    candidates: List[np.ndarray]
    selected: MessengerRecord
    selected_index: Optional[int] = None


# --- Block builders ---
def _stacker(stacker: str):
    if stacker == "numpy":
        return np.block
    if stacker == "cvxpy":
        return cp.bmat
    raise ValueError(f"Stacker {stacker} must be 'numpy' or 'cvxpy'.")


def supply_blocks(own: SubsystemDynamics, supply: SupplyRate, feedthrough=FeedthroughMode.STANDARD, R=None):
    """(C'QC, output part of the off-diagonal block, corner) of the local dissipation matrix."""
    Q, S, C, D = supply.Q, supply.S, own.C, own.D
    R = supply.R if R is None else R
    CQC = C.T @ Q @ C
    if D is None:
        return CQC, C.T @ S, R
    feedthrough = FeedthroughMode(feedthrough)
    if feedthrough == FeedthroughMode.STANDARD:
        return CQC, C.T @ (S + Q @ D), R + D.T @ Q @ D + D.T @ S + S.T @ D
    replaced = -(D.T @ Q @ D) - (D.T @ S + S.T @ D)
    if feedthrough == FeedthroughMode.VERBATIM:
        return CQC, C.T @ S, replaced
    return CQC, C.T @ S, R + replaced


def is_structured(own: SubsystemDynamics, supply: SupplyRate, feedthrough=FeedthroughMode.STANDARD) -> bool:
    """Whether the effective disturbance corner is exactly zero, so only the state block carries information."""
    if supply.gain_variable:
        return False
    corner = supply_blocks(own, supply, feedthrough)[2]
    return bool(np.linalg.norm(corner) == 0.0)


def mu_self_expr(own: SubsystemDynamics, supply: SupplyRate, P, Z_self=None, H_self=None,
                 feedthrough=FeedthroughMode.STANDARD, R=None, stacker: str = "numpy"):
    """mu_self with H_hat_ii = P B1 H_ii + Z_ii and Z_ii = P B3 K_ii."""
    CQC, off_out, corner = supply_blocks(own, supply, feedthrough, R)
    top = -(own.A.T @ P + P @ own.A) + CQC
    terms = ([P @ own.B1 @ H_self] if H_self is not None else []) + ([Z_self] if Z_self is not None else [])
    for term in terms:
        top = top - (term + term.T)
    off = -P @ own.B2 + off_out
    return _stacker(stacker)([[top, off], [off.T, corner]])


def coupling_block(own: SubsystemDynamics, P, n_other: int, H_in=None, Z_out=None, coupling=None,
                   actuation=None, K_in=None):
    """H_hat_ji' + H_hat_ij, the state block linking i to a processed neighbor j."""
    block = np.zeros((own.dims.n, n_other)) if coupling is None else coupling.T
    if K_in is not None:
        block = block + (actuation @ K_in).T
    if H_in is not None:
        block = block + P @ own.B1 @ H_in
    if Z_out is not None:
        block = block + Z_out
    return block


def state_schur(M: np.ndarray, n: int, structured: bool) -> np.ndarray:
    """State block of M after eliminating its disturbance block (the leading block when structured)."""
    M_xx = M[:n, :n]
    if structured or M.shape[0] == n:
        S = M_xx
    else:
        M_xw, M_ww = M[:n, n:], M[n:, n:]
        try:
            S = M_xx - M_xw @ cho_solve(cho_factor(M_ww), M_xw.T)
        except np.linalg.LinAlgError as e:
            raise SingularBlockError("disturbance block of a neighbor messenger matrix is not invertible") from e
    S = 0.5 * (S + S.T)
    if S.size and float(np.linalg.eigvalsh(S)[0]) <= 0:
        raise SingularBlockError("leading block of a neighbor messenger matrix is singular")
    return S


def inverse_state_schur(payload: NeighborPayload) -> np.ndarray:
    S = state_schur(payload.M, payload.n, payload.structured)
    return cho_solve(cho_factor(S), np.eye(S.shape[0]))


def elimination_blocks(n: int, direct: Dict[int, object], payloads: Sequence[NeighborPayload]) -> Dict[int, object]:
    """G_{i,k} = W_{i,k} - sum_m G_{i,m} E_m G_{k,m}' over the processed senders, in order.

    `direct` maps sender k to its coupling block (W_{i,k} = -block); senders that
    are not coupled to i still receive fill through their elimination rows.
    """
    G: Dict[int, object] = {}
    E: Dict[int, np.ndarray] = {}
    for payload in payloads:
        k = payload.sender
        block = direct.get(k)
        G_k = -block if block is not None else np.zeros((n, payload.n))
        for m, G_km in payload.elimination.items():
            if m in G:
                G_k = G_k - G[m] @ E[m] @ G_km.T
        G[k] = G_k
        E[k] = inverse_state_schur(payload)
    return G


def direct_blocks(inputs: MessengerInputs) -> Dict[int, np.ndarray]:
    P, own = inputs.P, inputs.own
    direct = {}
    for inc in inputs.incoming:
        pay = inc.payload
        if not pay.adjacent:
            continue
        coupling = pay.coupling[inc.mode] if pay.coupling else None
        actuation = pay.actuation[inc.mode] if pay.actuation else None
        K_in = inc.K_in if inc.K_in is not None else pay.gain
        Z_out = P @ own.B3 @ inc.K_out if inc.K_out is not None else None
        direct[pay.sender] = coupling_block(own, P, pay.n, inc.H_in, Z_out, coupling, actuation, K_in)
    return direct


def _check_inputs(inputs: MessengerInputs):
    n, z, l, p, m = inputs.own.dims
    if inputs.P.shape != (n, n):
        raise DimensionError(f"P is {inputs.P.shape[0]}x{inputs.P.shape[1]}, expected {n}x{n}")
    if inputs.self_coupling is not None and inputs.self_coupling.shape != (z, n):
        raise DimensionError("self coupling H_ii does not match the subsystem")
    if inputs.self_gain is not None and inputs.self_gain.shape != (p, n):
        raise DimensionError("self gain K_ii does not match the subsystem")
    for inc in inputs.incoming:
        nj = inc.payload.n
        if inc.H_in is not None and inc.H_in.shape != (z, nj):
            raise DimensionError(f"H from subsystem {inc.payload.sender} is {inc.H_in.shape}, expected {(z, nj)}")
        if inc.K_out is not None and inc.K_out.shape != (p, nj):
            raise DimensionError(f"K towards subsystem {inc.payload.sender} is {inc.K_out.shape}, expected {(p, nj)}")
        if inc.payload.coupling and inc.payload.coupling[inc.mode].shape != (nj, n):
            raise DimensionError(f"coupling product from subsystem {inc.payload.sender} is not {nj}x{n}")


# --- Operations ---
def mu_self(inputs: MessengerInputs) -> np.ndarray:
    _check_inputs(inputs)
    own, P = inputs.own, inputs.P
    Z_self = P @ own.B3 @ inputs.self_gain if inputs.self_gain is not None else None
    mu = mu_self_expr(own, inputs.supply, P, Z_self, inputs.self_coupling, inputs.feedthrough)
    return 0.5 * (mu + mu.T)


def mu_coupling(inputs: MessengerInputs) -> np.ndarray:
    _check_inputs(inputs)
    n, _, l, _, _ = inputs.own.dims
    out = np.zeros((n + l, n + l))
    payloads = [inc.payload for inc in inputs.incoming]
    G = elimination_blocks(n, direct_blocks(inputs), payloads)
    for payload in payloads:
        G_k = G[payload.sender]
        out[:n, :n] += G_k @ inverse_state_schur(payload) @ G_k.T
    return 0.5 * (out + out.T)


def messenger_matrix(inputs: MessengerInputs) -> MessengerRecord:
    """M = mu_self - mu_coupling with the supplied P; positivity is not asserted here."""
    M = mu_self(inputs) - mu_coupling(inputs)
    return MessengerRecord(M=M, P=inputs.P, structured=is_structured(inputs.own, inputs.supply, inputs.feedthrough))


def compositional_messenger(inputs: MessengerInputs, neighbors: Sequence[int]) -> MessengerRecord:
    """Messenger of a node joined last. Every node it is coupled to must already
    be certified and present among the adjacent senders, so the neighbor sum
    covers the whole neighbor set."""
    adjacent = {inc.payload.sender for inc in inputs.incoming if inc.payload.adjacent}
    missing = sorted(set(neighbors) - adjacent)
    if missing:
        raise DimensionError(f"joined node is coupled to {missing}, which sent no certified payload")
    extra = sorted(adjacent - set(neighbors))
    if extra:
        raise DimensionError(f"payloads from {extra} are marked adjacent but carry no coupling to the joined node")
    logger.debug("compositional messenger over %d certified sender(s)", len(inputs.incoming))
    return messenger_matrix(inputs)


def robust_margin(P: np.ndarray, eps: float, l: int) -> np.ndarray:
    """[[2 eps lmax(P) I, 0], [0, 0]]: the messenger lower bound tolerating a
    state-matrix perturbation dA_i with spectral norm below eps.

    dA'P + P dA <= 2 ||dA|| lmax(P) I holds for every such dA; the bound 2 eps P
    would only cover perturbations that are small in the P-weighted norm.
    """
    if eps < 0:
        raise ValueError("uncertainty bound eps must be nonnegative")
    n = P.shape[0]
    bound = np.zeros((n + l, n + l))
    if eps and n:
        bound[:n, :n] = 2.0 * eps * float(np.linalg.eigvalsh(0.5 * (P + P.T))[-1]) * np.eye(n)
    return bound


def positivity_margin(M: np.ndarray, n: int, structured: bool) -> float:
    """Smallest eigenvalue tested for M: its state block when structured."""
    block = M[:n, :n] if structured else M
    return float(np.linalg.eigvalsh(0.5 * (block + block.T))[0]) if block.size else 0.0


def mode_combinations(own_modes: int, sender_modes: Sequence[int], cap: int = COMBINATION_CAP) -> List[Tuple[int, ...]]:
    """(sigma_i, sigma_j1, ...) in lexicographic order."""
    total = own_modes * int(np.prod(sender_modes)) if sender_modes else own_modes
    if total > cap:
        raise CombinationBudgetError(f"{total} mode combinations exceed the cap of {cap}")
    return list(itertools.product(range(own_modes), *[range(k) for k in sender_modes]))


def common_lower_bound(candidates: Sequence[np.ndarray], n: int, structured: bool, solver: str = "CLARABEL") -> np.ndarray:
    """Largest-trace L with L <= every candidate (state block only when structured)."""
    size = n if structured else candidates[0].shape[0]
    L = cp.Variable((size, size), symmetric=True)
    blocks = [0.5 * (c[:size, :size] + c[:size, :size].T) for c in candidates]
    problem = cp.Problem(cp.Maximize(cp.trace(L)), [block - L >> 0 for block in blocks])
    try:
        problem.solve(solver=solver)
    except cp.error.SolverError as e:
        raise SingularBlockError(f"no common lower bound found ({e})") from e
    if L.value is None:
        raise SingularBlockError(f"no common lower bound found ({problem.status})")
    L_val = 0.5 * (L.value + L.value.T)
    violation = max(max(0.0, -float(np.linalg.eigvalsh(block - L_val)[0])) for block in blocks)
    scale = 1.0 + max(float(np.max(np.abs(block))) for block in blocks)
    L_val = L_val - (violation + 1e-12 * scale) * np.eye(size)
    out = np.zeros_like(candidates[0])
    out[:size, :size] = L_val
    return out


def select_candidate(candidates: Sequence[np.ndarray], n: int, structured: bool,
                     measure=SelectionMeasure.LOWER_BOUND, solver: str = "CLARABEL") -> Tuple[np.ndarray, Optional[int]]:
    """Selected messenger over mode combinations; ties go to the lowest combination index."""
    measure = SelectionMeasure(measure)
    if len(candidates) == 1 or all(np.array_equal(candidates[0], c) for c in candidates[1:]):
        return candidates[0], 0
    if measure == SelectionMeasure.LOWER_BOUND:
        return common_lower_bound(candidates, n, structured, solver), None
    if measure == SelectionMeasure.MIN_EIGENVALUE:
        scores = [positivity_margin(c, n, structured) for c in candidates]
    else:
        scores = [float(np.linalg.norm(c, "fro")) for c in candidates]
    index = int(np.argmin(scores))
    return candidates[index], index


def switched_messenger(own_modes: Sequence[SubsystemDynamics], supply: SupplyRate, P: np.ndarray,
                       self_coupling=None, self_gain=None, incoming: Sequence[IncomingBlock] = (),
                       feedthrough=FeedthroughMode.STANDARD, measure=SelectionMeasure.LOWER_BOUND,
                       cap: int = COMBINATION_CAP, solver: str = "CLARABEL",
                       neighbors: Optional[Sequence[int]] = None) -> SwitchedResult:
    """Candidate messenger for every (own mode, adjacent sender modes) combination plus the selected record.

    `neighbors` marks a node joined last: each candidate is then built by
    compositional_messenger against that neighbor set.
    """
    adjacent = [k for k, inc in enumerate(incoming) if inc.payload.adjacent]
    combos = mode_combinations(len(own_modes), [incoming[k].payload.mode_count for k in adjacent], cap)
    candidates = []
    for combo in combos:
        blocks = list(incoming)
        for k, mode in zip(adjacent, combo[1:]):
            blocks[k] = blocks[k].copy(update={"mode": mode})
        inputs = MessengerInputs(own=own_modes[combo[0]], supply=supply, P=P, self_coupling=self_coupling,
                                 self_gain=self_gain, incoming=blocks, feedthrough=feedthrough)
        record = messenger_matrix(inputs) if neighbors is None else compositional_messenger(inputs, neighbors)
        candidates.append(record.M)
    structured = all(is_structured(mode, supply, feedthrough) for mode in own_modes)
    n = P.shape[0]
    M, index = select_candidate(candidates, n, structured, measure, solver)
    logger.debug("switched messenger: %d combination(s), selected %s", len(combos), index)
    return SwitchedResult(combos=combos, candidates=candidates,
                          selected=MessengerRecord(M=M, P=P, structured=structured), selected_index=index)
