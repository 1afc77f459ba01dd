"""Parallel associative scan over closed classes of affine maps x -> A x + b.

The transition slot carries one of five representations. Composition promotes
upward through the lattice

    Zero / Identity / ScaledIdentity  <  Diagonal  <  Dense

so per-element cost stays O(D) for the structured classes and O(D^3) only for
Dense. The scan itself is a two-phase tree (up-sweep building power-of-two
partial products, down-sweep filling in the remaining inclusive prefixes)
padded to the next power of two with identity elements; it performs at most
2T element compositions in ceil(log2 T) synchronized levels.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import ContractError, Trajectory, as_state

ZERO = "zero"
IDENTITY = "identity"
SCALED = "scaled"
DIAGONAL = "diagonal"
DENSE = "dense"

_RANK = {IDENTITY: 0, SCALED: 1, DIAGONAL: 2, DENSE: 3}


@dataclass(frozen=True)
class Transition:
    """One linear-map representation: Dense | Diagonal | ScaledIdentity | Identity | Zero."""

    kind: str
    value: object = None

    @staticmethod
    def zero() -> "Transition":
        return Transition(ZERO)

    @staticmethod
    def identity() -> "Transition":
        return Transition(IDENTITY)

    @staticmethod
    def scaled(a: float) -> "Transition":
        return Transition(SCALED, float(a))

    @staticmethod
    def diagonal(d) -> "Transition":
        d = np.asarray(d, dtype=np.float64)
        if d.ndim != 1:
            raise ContractError("diagonal transition needs a 1-D vector")
        return Transition(DIAGONAL, d)

    @staticmethod
    def dense(m) -> "Transition":
        m = np.asarray(m, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ContractError("dense transition needs a square matrix")
        if not np.all(np.isfinite(m)):
            raise ContractError("dense transition entries must be finite")
        return Transition(DENSE, m)

    @property
    def dim(self) -> int | None:
        """Intrinsic dimension, or None for the dimension-free scalar kinds."""
        if self.kind == DIAGONAL:
            return self.value.shape[0]
        if self.kind == DENSE:
            return self.value.shape[0]
        return None

    def scalar(self) -> float:
        if self.kind == ZERO:
            return 0.0
        if self.kind == IDENTITY:
            return 1.0
        if self.kind == SCALED:
            return self.value
        raise ContractError(f"{self.kind} transition has no scalar form")

    def diag_vector(self, dim: int) -> np.ndarray:
        if self.kind == DIAGONAL:
            return self.value
        if self.kind == DENSE:
            raise ContractError("dense transition has no diagonal form")
        return np.full(dim, self.scalar())

    def matrix(self, dim: int) -> np.ndarray:
        """Materialize as a dense D x D matrix."""
        if self.kind == DENSE:
            return self.value
        return np.diag(self.diag_vector(dim))

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.kind == ZERO:
            return np.zeros_like(x)
        if self.kind == IDENTITY:
            return x
        if self.kind == SCALED:
            return self.value * x
        if self.kind == DIAGONAL:
            return self.value * x
        return self.value @ x


@dataclass(frozen=True)
class AffineOp:
    """One step of a linear dynamical system: x -> A x + b."""

    A: Transition
    b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "b", as_state(self.b))
        d = self.A.dim
        if d is not None and d != self.b.shape[0]:
            raise ContractError(f"transition dim {d} does not match offset dim {self.b.shape[0]}")

    @property
    def dim(self) -> int:
        return self.b.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.A.apply(x) + self.b


def compose_transitions(first: Transition, second: Transition) -> Transition:
    """Transition of second o first, i.e. A_second A_first, in the join class."""
    if first.kind == ZERO or second.kind == ZERO:
        return Transition.zero()
    rank = max(_RANK[first.kind], _RANK[second.kind])
    if rank == 0:
        return Transition.identity()
    if rank == 1:
        return Transition.scaled(second.scalar() * first.scalar())
    if rank == 2:
        dim = first.dim if first.dim is not None else second.dim
        return Transition.diagonal(second.diag_vector(dim) * first.diag_vector(dim))
    dim = first.dim if first.dim is not None else second.dim
    return Transition.dense(second.matrix(dim) @ first.matrix(dim))


def affine_compose(first: AffineOp, second: AffineOp) -> AffineOp:
    """Compose two affine maps, ``second`` applied after ``first``.

    Returns (A_second A_first, b_second + A_second b_first). The representation
    is the join of the two variants; a Zero transition in the second slot
    annihilates the product (result A = Zero, b = b_second).
    """
    if first.dim != second.dim:
        raise ContractError(f"dimension mismatch: {first.dim} vs {second.dim}")
    return AffineOp(
        compose_transitions(first.A, second.A),
        second.b + second.A.apply(first.b),
    )


class ComposeCounter:
    """Instrumentation: counts element compositions and synchronized levels."""

    def __init__(self):
        self.compositions = 0
        self.up_levels = 0
        self.down_levels = 0

    def add(self, n: int):
        self.compositions += int(n)


# ---------------------------------------------------------------------------
# stacked-array engine
#
# A lane is the promoted representation of a whole sequence:
#   "scalar"   -> A has shape (T,)        covers Zero/Identity/ScaledIdentity
#   "diagonal" -> A has shape (T, D)
#   "dense"    -> A has shape (T, D, D)
# b always has shape (T, D).
# ---------------------------------------------------------------------------


def _compose_into(lane: str, A, b, hi: np.ndarray, lo: np.ndarray):
    """Overwrite slots ``hi`` with op[hi] o op[lo] (op[lo] acting first)."""
    A_hi = A[hi].copy()
    if lane == "dense":
        A[hi] = np.einsum("nij,njk->nik", A_hi, A[lo])
        b[hi] += np.einsum("nij,nj->ni", A_hi, b[lo])
    elif lane == "diagonal":
        A[hi] = A_hi * A[lo]
        b[hi] += A_hi * b[lo]
    else:
        A[hi] = A_hi * A[lo]
        b[hi] += A_hi[:, None] * b[lo]


def _run_level(lane, A, b, hi, lo, workers, counter):
    if counter is not None:
        counter.add(len(hi))
    if workers <= 1 or len(hi) < 2 * workers:
        _compose_into(lane, A, b, hi, lo)
        return
    chunks = np.array_split(np.arange(len(hi)), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(lambda c: _compose_into(lane, A, b, hi[c], lo[c]), chunks))


def scan_stacked(lane: str, A: np.ndarray, b: np.ndarray, workers: int = 1,
                 counter: ComposeCounter | None = None) -> tuple[np.ndarray, np.ndarray]:
    """All inclusive prefix compositions of a stacked affine sequence.

    Two-phase tree scan, padded to the next power of two with identity
    elements. Tree nodes whose whole range lies in the padding are skipped, so
    the element-composition count stays below 2T. Within one invocation each
    node is computed exactly once; workers only split the batched composition
    at a level, synchronizing at level boundaries.
    """
    T, D = b.shape
    if T == 0:
        raise ContractError("parallel scan needs at least one element")
    levels = max(1, math.ceil(math.log2(T))) if T > 1 else 0
    P = 1 << levels
    if lane == "dense":
        pad = np.broadcast_to(np.eye(D), (P - T, D, D))
    elif lane == "diagonal":
        pad = np.ones((P - T, D))
    else:
        pad = np.ones(P - T)
    A = np.concatenate([np.asarray(A, dtype=np.float64), pad]) if P > T else np.array(A, dtype=np.float64)
    b = np.concatenate([b, np.zeros((P - T, D))]) if P > T else b.copy()

    # up-sweep: position i = m 2^(l+1) - 1 (0-based) accumulates its left sibling
    for level in range(levels):
        stride = 1 << (level + 1)
        hi = np.arange(stride - 1, P, stride)
        hi = hi[hi < T]
        if len(hi) == 0:
            continue
        if counter is not None:
            counter.up_levels += 1
        _run_level(lane, A, b, hi, hi - (1 << level), workers, counter)

    # down-sweep: fill the remaining inclusive prefixes, coarse to fine
    for level in range(levels - 2, -1, -1):
        stride = 1 << (level + 1)
        hi = np.arange(stride + (1 << level) - 1, P, stride)
        hi = hi[hi < T]
        if len(hi) == 0:
            continue
        if counter is not None:
            counter.down_levels += 1
        _run_level(lane, A, b, hi, hi - (1 << level), workers, counter)

    return A[:T], b[:T]


def evaluate_stacked(lane: str, A: np.ndarray, b: np.ndarray, s0: np.ndarray,
                     workers: int = 1) -> np.ndarray:
    """States of the LDS s_t = A_t s_{t-1} + b_t, from stacked arrays.

    Zero transitions bypass the scan (embarrassingly parallel map); identity
    transitions reduce to a prefix sum. Other lanes run the tree scan and
    apply the prefix operators to s0.
    """
    if lane == "zero":
        return b.copy()
    if lane == "identity":
        return s0[None, :] + np.cumsum(b, axis=0)
    pA, pb = scan_stacked(lane, A, b, workers=workers)
    if lane == "dense":
        return np.einsum("tij,j->ti", pA, s0) + pb
    if lane == "diagonal":
        return pA * s0[None, :] + pb
    return pA[:, None] * s0[None, :] + pb


# ---------------------------------------------------------------------------
# AffineOp-level API
# ---------------------------------------------------------------------------


def _lane_of(ops) -> str:
    kinds = {op.A.kind for op in ops}
    if DENSE in kinds:
        return "dense"
    if DIAGONAL in kinds:
        return "diagonal"
    return "scalar"


def _stack(ops, lane: str):
    T, D = len(ops), ops[0].dim
    b = np.stack([op.b for op in ops])
    if lane == "dense":
        A = np.stack([op.A.matrix(D) for op in ops])
    elif lane == "diagonal":
        A = np.stack([op.A.diag_vector(D) for op in ops])
    else:
        A = np.array([op.A.scalar() for op in ops])
    return A, b


def parallel_scan(ops, workers: int = 1, counter: ComposeCounter | None = None):
    """All inclusive prefixes: element t is ops_t o ... o ops_1.

    Mixed sequences are promoted to the least representation class containing
    every variant before scanning ({Dense} or {Diagonal u ScaledIdentity u
    Identity u Zero}); scalar-kind sequences keep their exact variant
    bookkeeping (all-identity prefixes stay Identity, a Zero annihilates).
    """
    ops = list(ops)
    if len(ops) == 0:
        raise ContractError("parallel scan needs at least one element")
    D = ops[0].dim
    for op in ops:
        if op.dim != D:
            raise ContractError("all scan elements must share one state size")
    lane = _lane_of(ops)
    A, b = _stack(ops, lane)
    pA, pb = scan_stacked(lane, A, b, workers=workers, counter=counter)
    out = []
    if lane == "dense":
        for t in range(len(ops)):
            out.append(AffineOp(Transition.dense(pA[t]), pb[t]))
    elif lane == "diagonal":
        for t in range(len(ops)):
            out.append(AffineOp(Transition.diagonal(pA[t]), pb[t]))
    else:
        saw_zero = False
        all_identity = True
        for t, op in enumerate(ops):
            saw_zero = saw_zero or op.A.kind == ZERO
            all_identity = all_identity and op.A.kind == IDENTITY
            if saw_zero:
                A_t = Transition.zero()
            elif all_identity:
                A_t = Transition.identity()
            else:
                A_t = Transition.scaled(pA[t])
            out.append(AffineOp(A_t, pb[t]))
    return out


def evaluate_lds(ops, s0, workers: int = 1) -> Trajectory:
    """Roll out the LDS defined by ``ops`` from s0, in O(log T) scan depth.

    Equals the sequential recurrence s_t = A_t s_{t-1} + b_t up to tree
    reassociation (relative infinity norm ~1e-10 at desk scale). Non-finite
    values propagate; callers detect them.
    """
    ops = list(ops)
    if len(ops) == 0:
        raise ContractError("evaluate_lds needs at least one element")
    s0 = as_state(s0, ops[0].dim)
    kinds = {op.A.kind for op in ops}
    if kinds == {ZERO}:
        states = np.stack([op.b for op in ops])
    elif kinds == {IDENTITY}:
        states = s0[None, :] + np.cumsum(np.stack([op.b for op in ops]), axis=0)
    else:
        lane = _lane_of(ops)
        A, b = _stack(ops, lane)
        with np.errstate(all="ignore"):
            states = evaluate_stacked(lane, A, b, s0, workers=workers)
    return Trajectory(s0, states)
