"""Sequential block positivity, its Cholesky factor, the (state, disturbance)
interleaving permutation and the centralized dissipation matrix."""
import logging
from typing import List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, validator
from scipy.linalg import cho_factor, cho_solve, cholesky, solve_triangular

from .model import (ControllerSet, DimensionError, FrozenModel, NetworkModel, QSRError, SupplyRate,
                    block_diag, closed_loop_matrices, symmetrize)

logger = logging.getLogger(__name__)


class NotPositiveDefiniteError(QSRError): pass


class BlockPartition(BaseModel):
    sizes: List[int]

    @validator("sizes")
    def _positive(cls, sizes):
        if not sizes or any(s <= 0 for s in sizes):
            raise ValueError("block sizes must be positive")
        return sizes

    @property
    def offsets(self) -> List[int]:
        return [0] + list(np.cumsum(self.sizes))

    @property
    def dim(self) -> int:
        return int(sum(self.sizes))

    def span(self, b: int) -> slice:
        off = self.offsets
        return slice(off[b], off[b + 1])


class PositivityResult(FrozenModel):
    verdict: bool
    pivots: List[np.ndarray]
    margins: List[float]
    failed_block: Optional[int] = None


class GammaCheck(FrozenModel):
    gamma: np.ndarray
    min_eig: float
    tolerance: float
    verdict: bool


def eps_pd(W: np.ndarray) -> float:
    return 1e-8 * (1.0 + float(np.linalg.norm(W, "fro")))


def _as_partition(part) -> BlockPartition:
    return part if isinstance(part, BlockPartition) else BlockPartition(sizes=list(part))


def _checked(W, part: BlockPartition) -> np.ndarray:
    W = symmetrize(np.asarray(W, dtype=float), "W")
    if W.shape[0] != part.dim:
        raise DimensionError(f"partition sums to {part.dim}, matrix is {W.shape[0]}x{W.shape[1]}")
    return W


def structured_inverse(D: np.ndarray, tail: int = 0) -> np.ndarray:
    """Inverse of the leading block only, zero on the trailing `tail` rows and columns."""
    lead = D.shape[0] - tail
    inv = np.zeros_like(D)
    if lead:
        try:
            inv[:lead, :lead] = cho_solve(cho_factor(D[:lead, :lead]), np.eye(lead))
        except np.linalg.LinAlgError as e:
            raise NotPositiveDefiniteError("leading block of a pivot is singular") from e
    return inv


def sequential_positivity(W, part, semidefinite_tail: Optional[Sequence[int]] = None,
                          eps: Optional[float] = None) -> PositivityResult:
    """Block LDL' elimination of W; every pivot is the Schur complement of the
    leading blocks, fill-in included, so the verdict is exact for dense W.

    semidefinite_tail[b] > 0 tests block b as PSD and inverts only its leading
    (size - tail) rows when eliminating it.
    """
    part = _as_partition(part)
    W = _checked(W, part)
    eps = eps_pd(W) if eps is None else eps
    tails = list(semidefinite_tail) if semidefinite_tail is not None else [0] * len(part.sizes)
    S = W.copy()
    pivots, margins = [], []
    for b, size in enumerate(part.sizes):
        here, rest = part.span(b), slice(part.offsets[b + 1], None)
        D = 0.5 * (S[here, here] + S[here, here].T)
        pivots.append(D)
        margin = float(np.linalg.eigvalsh(D)[0])
        margins.append(margin)
        tail = int(tails[b] or 0)
        if tail:
            lead = size - tail
            lead_ok = lead == 0 or float(np.linalg.eigvalsh(D[:lead, :lead])[0]) > eps
            ok = lead_ok and margin >= -eps
        else:
            ok = margin > eps
        if not ok:
            logger.debug("pivot %d fails (min eig %.3e, eps %.3e)", b, margin, eps)
            return PositivityResult(verdict=False, pivots=pivots, margins=margins, failed_block=b)
        inv = structured_inverse(D, tail)
        G = S[rest, here]
        S[rest, rest] -= G @ inv @ G.T
    return PositivityResult(verdict=True, pivots=pivots, margins=margins)


def cholesky_factor(W, part) -> np.ndarray:
    """Block lower-triangular L with W = L L', L_ij = G_ij L_jj^-T."""
    part = _as_partition(part)
    W = _checked(W, part)
    if not sequential_positivity(W, part).verdict:
        raise NotPositiveDefiniteError("W is not positive definite")
    S = W.copy()
    L = np.zeros_like(W)
    for b in range(len(part.sizes)):
        here, rest = part.span(b), slice(part.offsets[b + 1], None)
        L_bb = cholesky(0.5 * (S[here, here] + S[here, here].T), lower=True)
        L[here, here] = L_bb
        L_rest = solve_triangular(L_bb, S[rest, here].T, lower=True).T
        L[rest, here] = L_rest
        S[rest, rest] -= L_rest @ L_rest.T
    return L


def interleaving_permutation(state_dims: Sequence[int], dist_dims: Sequence[int],
                             order: Optional[Sequence[int]] = None) -> np.ndarray:
    """E with E v = v' taking (x_1..x_N, w_1..w_N) to (x_a, w_a, x_b, w_b, ...) for a, b, ... in order."""
    if len(state_dims) != len(dist_dims):
        raise DimensionError("state and disturbance dimension lists differ in length")
    order = list(order) if order is not None else list(range(len(state_dims)))
    x_off = np.cumsum([0] + list(state_dims))
    w_off = x_off[-1] + np.cumsum([0] + list(dist_dims))
    columns = []
    for i in order:
        columns.extend(range(x_off[i], x_off[i + 1]))
        columns.extend(range(w_off[i], w_off[i + 1]))
    total = int(w_off[-1])
    E = np.zeros((total, total))
    E[np.arange(total), columns] = 1.0
    return E


def dissipation_matrix(A_hat, B2, C, D, P, supply: SupplyRate) -> np.ndarray:
    """[[-A'P - PA + C'QC, -PB2 + C'(S + QD)], [., R + D'QD + D'S + S'D]]."""
    Q, S, R = supply.Q, supply.S, supply.R
    top = -A_hat.T @ P - P @ A_hat + C.T @ Q @ C
    off = -P @ B2 + C.T @ (S + Q @ D)
    corner = R + D.T @ Q @ D + D.T @ S + S.T @ D
    G = np.block([[top, off], [off.T, corner]])
    return 0.5 * (G + G.T)


def stacked_supply(supplies: Sequence[SupplyRate]) -> SupplyRate:
    return SupplyRate(Q=block_diag([s.Q for s in supplies]), S=block_diag([s.S for s in supplies]),
                      R=block_diag([s.R for s in supplies]))


def centralized_gamma(net: NetworkModel, gains: ControllerSet, P_blocks: Sequence[np.ndarray],
                      combo: Optional[Sequence[int]] = None, supplies: Optional[Sequence[SupplyRate]] = None,
                      tol: Optional[float] = None) -> GammaCheck:
    """Network dissipation matrix with V = x' diag(P_i) x; dissipative iff min eig >= -tol."""
    supplies = list(supplies) if supplies is not None else list(net.supplies)
    if len(P_blocks) != net.size or len(supplies) != net.size:
        raise DimensionError("one energy matrix and one supply rate per subsystem are required")
    for i, P_i in enumerate(P_blocks):
        if P_i.shape != (net.dims(i).n,) * 2:
            raise DimensionError(f"P block {i} is {P_i.shape[0]}x{P_i.shape[1]}, expected {net.dims(i).n}x{net.dims(i).n}")
        if float(np.linalg.eigvalsh(symmetrize(P_i, f"P{i}"))[0]) <= 0:
            raise NotPositiveDefiniteError(f"P block {i} is not positive definite")
    if any(s.gain_variable for s in supplies):
        raise DimensionError("supply rates with an undecided L2 level must be resolved first")
    A_hat, B2, C, D = closed_loop_matrices(net, gains, combo)
    Gamma = dissipation_matrix(A_hat, B2, C, D, block_diag(list(P_blocks)), stacked_supply(supplies))
    min_eig = float(np.linalg.eigvalsh(Gamma)[0])
    tol = eps_pd(Gamma) if tol is None else tol
    return GammaCheck(gamma=Gamma, min_eig=min_eig, tolerance=tol, verdict=min_eig >= -tol)
