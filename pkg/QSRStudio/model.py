import hashlib
import json
import logging
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, validator

logger = logging.getLogger(__name__)

SYMMETRY_RTOL = 1e-9
PRESET_KINDS = ("passive", "strictly-passive", "L2", "l2-free", "conic", "sector")


# --- Errors ---
class QSRError(Exception):
    """Base class for every error raised by QSRStudio."""

class DimensionError(QSRError): pass
class SymmetryError(QSRError): pass
class PresetError(QSRError): pass
class SequenceError(QSRError): pass

class NetworkValidationError(QSRError):
    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("; ".join(issue.message for issue in self.issues) or "invalid network")


# --- Matrix helpers ---
def as_matrix(value: Any, name: str = "matrix") -> np.ndarray:
    """Coerces nested row lists (or a bare number) into a read-only float matrix."""
    arr = np.array(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ValueError(f"{name} must be a matrix, got {arr.ndim} dimensions")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


def asymmetry(X: np.ndarray) -> float:
    return float(np.max(np.abs(X - X.T))) if X.size else 0.0


def is_symmetric(X: np.ndarray) -> bool:
    if X.shape[0] != X.shape[1]:
        return False
    scale = 1.0 + (float(np.max(np.abs(X))) if X.size else 0.0)
    return asymmetry(X) <= SYMMETRY_RTOL * scale


def symmetrize(X: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Returns (X + X')/2, refusing inputs outside the symmetry tolerance."""
    X = np.asarray(X, dtype=float)
    if not is_symmetric(X):
        raise SymmetryError(f"{name} is not symmetric (max |X - X'| = {asymmetry(X):.3e})")
    return 0.5 * (X + X.T)


def _soft_symmetrize(value):
    # inside tolerance: symmetrize; outside: keep as given so validation can report it
    arr = as_matrix(value)
    if arr.shape[0] == arr.shape[1] and is_symmetric(arr):
        out = 0.5 * (arr + arr.T)
        out.setflags(write=False)
        return out
    return arr


def block_diag(blocks: Sequence[np.ndarray]) -> np.ndarray:
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    r = c = 0
    for b in blocks:
        out[r:r + b.shape[0], c:c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out


class FrozenModel(BaseModel):
    class Config:
        arbitrary_types_allowed = True
        allow_mutation = False
        json_encoders = {np.ndarray: lambda a: a.tolist()}


# --- Data Models ---
class Dims(NamedTuple):
    n: int
    z: int
    l: int
    p: int
    m: int


class SubsystemDynamics(FrozenModel):
    """One subsystem x' = Ax + B1 v + B2 w + B3 u, y = Cx (+ Dw)."""
    name: str = ""
    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    B3: np.ndarray
    C: np.ndarray
    D: Optional[np.ndarray] = None

    @validator("A", "B1", "B2", "B3", "C", "D", pre=True)
    def _matrix(cls, value, field):
        return None if value is None else as_matrix(value, field.name)

    @property
    def dims(self) -> Dims:
        return Dims(self.A.shape[0], self.B1.shape[1], self.B2.shape[1], self.B3.shape[1], self.C.shape[0])

    @property
    def feedthrough(self) -> np.ndarray:
        n, z, l, p, m = self.dims
        return self.D if self.D is not None else np.zeros((m, l))

    def dimension_issues(self) -> List[str]:
        n = self.A.shape[0]
        issues = []
        if self.A.shape[1] != n:
            issues.append(f"A is {self.A.shape[0]}x{self.A.shape[1]}, expected square")
        for key in ("B1", "B2", "B3"):
            rows = getattr(self, key).shape[0]
            if rows != n:
                issues.append(f"{key} has {rows} rows, expected {n}")
        if self.C.shape[1] != n:
            issues.append(f"C has {self.C.shape[1]} columns, expected {n}")
        if self.D is not None and self.D.shape != (self.C.shape[0], self.B2.shape[1]):
            issues.append(f"D is {self.D.shape[0]}x{self.D.shape[1]}, expected {self.C.shape[0]}x{self.B2.shape[1]}")
        return issues


class SwitchedSubsystem(FrozenModel):
    name: str = ""
    modes: List[SubsystemDynamics]

    @validator("modes")
    def _nonempty(cls, modes):
        if not modes:
            raise ValueError("a switched subsystem needs at least one mode")
        return modes

    @property
    def mode_count(self) -> int:
        return len(self.modes)

    @property
    def dims(self) -> Dims:
        return self.modes[0].dims

    def dimension_issues(self) -> List[str]:
        issues = []
        for k, mode in enumerate(self.modes):
            issues.extend(f"mode {k}: {msg}" for msg in mode.dimension_issues())
            if mode.dims != self.dims:
                issues.append(f"mode {k} dimensions {tuple(mode.dims)} differ from mode 0 {tuple(self.dims)}")
        return issues


Subsystem = Union[SwitchedSubsystem, SubsystemDynamics]


def modes_of(sub: Subsystem) -> List[SubsystemDynamics]:
    return list(sub.modes) if isinstance(sub, SwitchedSubsystem) else [sub]


class CouplingMap(FrozenModel):
    """Sparse H blocks keyed (i, j): coupling input of i driven by the state of j."""
    blocks: Dict[Tuple[int, int], np.ndarray] = {}

    @validator("blocks", pre=True)
    def _nonzero_blocks(cls, blocks):
        kept = {}
        for key, value in dict(blocks or {}).items():
            block = as_matrix(value, f"H{tuple(key)}")
            if np.any(block != 0):
                kept[(int(key[0]), int(key[1]))] = block
        return kept

    def get(self, i: int, j: int) -> Optional[np.ndarray]:
        return self.blocks.get((i, j))

    def block(self, i: int, j: int, rows: int, cols: int) -> np.ndarray:
        H = self.blocks.get((i, j))
        return H if H is not None else np.zeros((rows, cols))

    def neighbors(self, i: int) -> List[int]:
        return sorted(j for (r, j) in self.blocks if r == i and j != i)

    def interaction(self, i: int) -> List[int]:
        """Nodes coupled to i in either direction."""
        return sorted({j for (r, j) in self.blocks if r == i and j != i} | {r for (r, j) in self.blocks if j == i and r != i})

    def merged(self, extra: Dict[Tuple[int, int], Any]) -> "CouplingMap":
        blocks = dict(self.blocks)
        blocks.update(extra)
        return CouplingMap(blocks=blocks)


class SupplyRate(FrozenModel):
    Q: np.ndarray
    S: np.ndarray
    R: np.ndarray
    kind: str = "custom"
    gain_variable: bool = False

    _sym = validator("Q", "R", pre=True, allow_reuse=True)(_soft_symmetrize)

    @validator("S", pre=True)
    def _matrix(cls, value):
        return as_matrix(value, "S")

    def resolved(self, gamma: float) -> "SupplyRate":
        """Fixed triple for a decided L2 level (R = gamma^2 I)."""
        if not self.gain_variable:
            return self
        return SupplyRate(Q=self.Q, S=self.S, R=gamma ** 2 * self.R, kind="L2")

    def matrix(self) -> np.ndarray:
        return np.block([[self.Q, self.S], [self.S.T, self.R]])


def supply_preset(kind: str, params: Sequence[float] = (), m: int = 1, l: int = 1) -> SupplyRate:
    """Quadratic supply presets: passive, strictly-passive, L2, l2-free, conic, sector."""
    params = [float(v) for v in params]

    def need(count):
        if len(params) != count:
            raise PresetError(f"preset '{kind}' takes {count} parameter(s), got {len(params)}")

    def square():
        if m != l:
            raise DimensionError(f"preset '{kind}' pairs outputs with disturbances and needs m == l (got m={m}, l={l})")

    Im, Il = np.eye(m), np.eye(l)
    if kind == "passive":
        need(0); square()
        return SupplyRate(Q=np.zeros((m, m)), S=0.5 * np.eye(m, l), R=np.zeros((l, l)), kind=kind)
    if kind == "strictly-passive":
        need(2); square()
        rho, nu = params
        if rho <= 0 or nu <= 0:
            raise PresetError("strictly-passive needs rho > 0 and nu > 0")
        return SupplyRate(Q=-rho * Im, S=0.5 * np.eye(m, l), R=-nu * Il, kind=kind)
    if kind == "L2":
        need(1)
        gamma = params[0]
        if gamma <= 0:
            raise PresetError("L2 needs gamma > 0")
        return SupplyRate(Q=-Im / gamma, S=np.zeros((m, l)), R=gamma * Il, kind=kind)
    if kind == "l2-free":
        need(0)
        return SupplyRate(Q=-Im, S=np.zeros((m, l)), R=Il, kind=kind, gain_variable=True)
    if kind == "conic":
        need(2); square()
        c, r = params
        if r <= 0:
            raise PresetError("conic needs r > 0")
        return SupplyRate(Q=-Im, S=c * np.eye(m, l), R=(r ** 2 - c ** 2) * Il, kind=kind)
    if kind == "sector":
        need(2); square()
        a, b = params
        return SupplyRate(Q=-Im, S=0.5 * (a + b) * np.eye(m, l), R=-a * b * Il, kind=kind)
    raise PresetError(f"unknown supply preset '{kind}' (expected one of {', '.join(PRESET_KINDS)})")


class MessengerRecord(FrozenModel):
    """Certified (M, P) pair of one subsystem; the only data its neighbors see."""
    M: np.ndarray
    P: np.ndarray
    structured: bool = False
    margin: Optional[np.ndarray] = None
    gamma: Optional[float] = None

    @validator("M", "P", pre=True)
    def _symmetric(cls, value, field):
        return symmetrize(as_matrix(value, field.name), field.name)

    @validator("P")
    def _positive(cls, P):
        if P.size and float(np.linalg.eigvalsh(P)[0]) <= 0:
            raise ValueError("energy matrix P must be positive definite")
        return P

    @validator("margin", pre=True)
    def _margin(cls, value):
        return None if value is None else as_matrix(value, "margin")

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def state_block(self) -> np.ndarray:
        return self.M[:self.n, :self.n]


class ControllerSet(FrozenModel):
    gains: Dict[Tuple[int, int], np.ndarray] = {}

    @validator("gains", pre=True)
    def _matrices(cls, gains):
        return {(int(i), int(j)): as_matrix(K, f"K{(i, j)}") for (i, j), K in dict(gains or {}).items()}

    def get(self, i: int, j: int) -> Optional[np.ndarray]:
        return self.gains.get((i, j))


class ValidationIssue(BaseModel):
    kind: str
    message: str
    subsystem: Optional[int] = None


class NetworkModel(FrozenModel):
    subsystems: List[Union[SwitchedSubsystem, SubsystemDynamics]] = []
    coupling: CouplingMap = CouplingMap()
    supplies: List[SupplyRate] = []
    sequence: Optional[List[int]] = None

    @property
    def size(self) -> int:
        return len(self.subsystems)

    @property
    def order(self) -> List[int]:
        return list(self.sequence) if self.sequence is not None else list(range(self.size))

    @property
    def is_switched(self) -> bool:
        return any(len(modes_of(sub)) > 1 for sub in self.subsystems)

    def dims(self, i: int) -> Dims:
        return self.subsystems[i].dims

    def modes(self, i: int) -> List[SubsystemDynamics]:
        return modes_of(self.subsystems[i])

    def mode_counts(self) -> List[int]:
        return [len(modes_of(sub)) for sub in self.subsystems]

    def name(self, i: int) -> str:
        return self.subsystems[i].name or f"subsystem-{i}"

    def index_of(self, key: Union[int, str]) -> int:
        if isinstance(key, int) or str(key).lstrip("-").isdigit():
            return int(key)
        for i, sub in enumerate(self.subsystems):
            if sub.name == key:
                return i
        raise SequenceError(f"unknown subsystem '{key}'")

    def with_sequence(self, sequence: Optional[Iterable[Union[int, str]]]) -> "NetworkModel":
        if sequence is None:
            return self
        return self.copy(update={"sequence": [self.index_of(k) for k in sequence]})


# --- Validation and extension ---
def validate_network(net: NetworkModel) -> List[ValidationIssue]:
    """Lists every structural problem; an empty list means the network is proper."""
    issues: List[ValidationIssue] = []
    N = net.size
    for i, sub in enumerate(net.subsystems):
        for msg in sub.dimension_issues():
            issues.append(ValidationIssue(kind="dimension", message=f"{net.name(i)}: {msg}", subsystem=i))
    for (i, j), H in sorted(net.coupling.blocks.items()):
        if not (0 <= i < N and 0 <= j < N):
            issues.append(ValidationIssue(kind="dangling-coupling", message=f"coupling block H{(i, j)} references a missing subsystem"))
            continue
        expected = (net.dims(i).z, net.dims(j).n)
        if H.shape != expected:
            issues.append(ValidationIssue(kind="dimension", subsystem=i,
                                          message=f"coupling block H{(i, j)} is {H.shape[0]}x{H.shape[1]}, expected {expected[0]}x{expected[1]}"))
    if len(net.supplies) != N:
        issues.append(ValidationIssue(kind="supply-alignment", message=f"{len(net.supplies)} supply rates for {N} subsystems"))
    for i, supply in enumerate(net.supplies[:N]):
        _, _, l, _, m = net.dims(i)
        for key, shape in (("Q", (m, m)), ("S", (m, l)), ("R", (l, l))):
            X = getattr(supply, key)
            if X.shape != shape:
                issues.append(ValidationIssue(kind="dimension", subsystem=i,
                                              message=f"{net.name(i)}: supply {key} is {X.shape[0]}x{X.shape[1]}, expected {shape[0]}x{shape[1]}"))
            elif key != "S" and not is_symmetric(X):
                issues.append(ValidationIssue(kind="asymmetric", subsystem=i, message=f"{net.name(i)}: supply {key} is not symmetric"))
    if net.sequence is not None and sorted(net.sequence) != list(range(N)):
        issues.append(ValidationIssue(kind="invalid-sequence", message=f"sequence {list(net.sequence)} is not a permutation of 0..{N - 1}"))
    return issues


def require_valid(net: NetworkModel) -> NetworkModel:
    issues = validate_network(net)
    if issues:
        raise NetworkValidationError(issues)
    return net


def extend_network(net: NetworkModel, new_sub: Subsystem, new_coupling: Dict[Tuple[int, int], Any],
                   new_supply: SupplyRate) -> NetworkModel:
    """T_{N+1} = T_N | new_sub, appended last in the sequence."""
    N = net.size
    dims_new = new_sub.dims
    blocks = {}
    for (i, j), value in dict(new_coupling or {}).items():
        H = as_matrix(value, f"H{(i, j)}")
        if N not in (i, j):
            raise DimensionError(f"new coupling block H{(i, j)} must involve the new subsystem {N}")
        if not (0 <= i <= N and 0 <= j <= N):
            raise DimensionError(f"new coupling block H{(i, j)} references a missing subsystem")
        rows = dims_new.z if i == N else net.dims(i).z
        cols = dims_new.n if j == N else net.dims(j).n
        if H.shape != (rows, cols):
            raise DimensionError(f"new coupling block H{(i, j)} is {H.shape[0]}x{H.shape[1]}, expected {rows}x{cols}")
        blocks[(i, j)] = H
    for key, shape in (("Q", (dims_new.m, dims_new.m)), ("S", (dims_new.m, dims_new.l)), ("R", (dims_new.l, dims_new.l))):
        if getattr(new_supply, key).shape != shape:
            raise DimensionError(f"new supply {key} does not match the new subsystem")
    logger.info("Extending network of %d subsystem(s) with '%s' (%d coupling block(s))", N, new_sub.name, len(blocks))
    return NetworkModel(subsystems=list(net.subsystems) + [new_sub], coupling=net.coupling.merged(blocks),
                        supplies=list(net.supplies) + [new_supply], sequence=net.order + [N])


def closed_loop_matrices(net: NetworkModel, gains: ControllerSet, combo: Optional[Sequence[int]] = None):
    """Stacked (A_hat, B2, C, D) with A_hat = A + B1 H + B3 K for one mode combination."""
    combo = list(combo) if combo is not None else [0] * net.size
    dyn = [net.modes(i)[combo[i]] for i in range(net.size)]
    n_off = np.cumsum([0] + [d.dims.n for d in dyn])
    z_off = np.cumsum([0] + [d.dims.z for d in dyn])
    p_off = np.cumsum([0] + [d.dims.p for d in dyn])
    H = np.zeros((z_off[-1], n_off[-1]))
    K = np.zeros((p_off[-1], n_off[-1]))
    for (i, j), block in net.coupling.blocks.items():
        H[z_off[i]:z_off[i + 1], n_off[j]:n_off[j + 1]] = block
    for (i, j), block in gains.gains.items():
        if block.shape != (dyn[i].dims.p, dyn[j].dims.n):
            raise DimensionError(f"gain K{(i, j)} is {block.shape[0]}x{block.shape[1]}, expected {dyn[i].dims.p}x{dyn[j].dims.n}")
        K[p_off[i]:p_off[i + 1], n_off[j]:n_off[j + 1]] = block
    A = block_diag([d.A for d in dyn])
    A_hat = A + block_diag([d.B1 for d in dyn]) @ H + block_diag([d.B3 for d in dyn]) @ K
    return A_hat, block_diag([d.B2 for d in dyn]), block_diag([d.C for d in dyn]), block_diag([d.feedthrough for d in dyn])


# --- Network files ---
class CouplingEntry(BaseModel):
    source: int = Field(..., alias="from")
    target: int = Field(..., alias="to")
    H: Any

class SupplyEntry(BaseModel):
    subsystem: int
    preset: Optional[str] = None
    params: List[float] = []
    Q: Any = None
    S: Any = None
    R: Any = None
    gain_variable: bool = False

class NetworkFile(BaseModel):
    comment: Optional[str] = None
    subsystems: List[Dict[str, Any]]
    coupling: List[CouplingEntry] = []
    supplies: List[SupplyEntry] = []
    sequence: Optional[List[Union[int, str]]] = None


def subsystem_from_dict(entry: Dict[str, Any]) -> Subsystem:
    if "modes" in entry:
        return SwitchedSubsystem(name=entry.get("name", ""), modes=[SubsystemDynamics(**mode) for mode in entry["modes"]])
    return SubsystemDynamics(**entry)


def supply_from_entry(entry: SupplyEntry, dims: Dims) -> SupplyRate:
    if entry.preset is not None:
        return supply_preset(entry.preset, entry.params, m=dims.m, l=dims.l)
    if entry.Q is None or entry.S is None or entry.R is None:
        raise PresetError(f"supply for subsystem {entry.subsystem} needs a preset or all of Q, S, R")
    return SupplyRate(Q=entry.Q, S=entry.S, R=entry.R, gain_variable=entry.gain_variable)


def network_from_dict(data: Dict[str, Any]) -> NetworkModel:
    parsed = NetworkFile.parse_obj(data)
    subsystems = [subsystem_from_dict(entry) for entry in parsed.subsystems]
    blocks = {}
    for entry in parsed.coupling:
        key = (entry.target, entry.source)
        if key in blocks:
            raise DimensionError(f"coupling block H{key} listed twice")
        blocks[key] = entry.H
    supplies: Dict[int, SupplyRate] = {}
    for entry in parsed.supplies:
        if not 0 <= entry.subsystem < len(subsystems):
            raise NetworkValidationError([ValidationIssue(kind="supply-alignment", message=f"supply for missing subsystem {entry.subsystem}")])
        supplies[entry.subsystem] = supply_from_entry(entry, subsystems[entry.subsystem].dims)
    missing = [i for i in range(len(subsystems)) if i not in supplies]
    if missing:
        raise NetworkValidationError([ValidationIssue(kind="supply-alignment", message=f"no supply rate for subsystem(s) {missing}")])
    net = NetworkModel(subsystems=subsystems, coupling=CouplingMap(blocks=blocks),
                       supplies=[supplies[i] for i in range(len(subsystems))])
    return net.with_sequence(parsed.sequence)


def _dynamics_dict(dyn: SubsystemDynamics) -> Dict[str, Any]:
    out = {key: getattr(dyn, key).tolist() for key in ("A", "B1", "B2", "B3", "C")}
    if dyn.D is not None:
        out["D"] = dyn.D.tolist()
    return out


def network_to_dict(net: NetworkModel) -> Dict[str, Any]:
    subsystems = []
    for sub in net.subsystems:
        if isinstance(sub, SwitchedSubsystem):
            subsystems.append({"name": sub.name, "modes": [_dynamics_dict(mode) for mode in sub.modes]})
        else:
            subsystems.append({"name": sub.name, **_dynamics_dict(sub)})
    coupling = [{"from": j, "to": i, "H": H.tolist()} for (i, j), H in sorted(net.coupling.blocks.items())]
    supplies = [{"subsystem": i, "Q": s.Q.tolist(), "S": s.S.tolist(), "R": s.R.tolist(), "gain_variable": s.gain_variable}
                for i, s in enumerate(net.supplies)]
    return {"subsystems": subsystems, "coupling": coupling, "supplies": supplies, "sequence": net.order}


def content_hash(data: Union[bytes, str]) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return "sha256:" + hashlib.sha256(data).hexdigest()


def load_network(path: str) -> Tuple[NetworkModel, str]:
    """Reads a network file and returns the model with the content hash of its bytes."""
    with open(path, "rb") as f:
        raw = f.read()
    net = network_from_dict(json.loads(raw.decode("utf-8")))
    logger.info("Loaded network '%s' with %d subsystem(s)", path, net.size)
    return net, content_hash(raw)
