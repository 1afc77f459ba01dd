"""Theory-validation instruments.

Connects dynamical predictability (largest Lyapunov exponent of the Jacobian
chain) to the conditioning of the trajectory-fitting objective (the smallest
singular value of the block-bidiagonal residual Jacobian) and to the
asymptotic linear rate of each fixed-point method.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ContractError, DynamicsSystem, NumericalFailure, Trajectory
from .fixedpoint import NO_DAMPING, SolverMethod, _method_transitions

DENSE_GUARD = 4096  # largest T*D the cubic-cost oracle paths accept


def _check_dense_guard(T: int, D: int, what: str):
    if T * D > DENSE_GUARD:
        raise ContractError(f"{what} is a desk-scale oracle; needs T*D <= {DENSE_GUARD}, got {T * D}")


@dataclass
class LleEstimate:
    """Largest Lyapunov exponent estimate, in nats per step."""

    lam: float
    horizon: int
    probes: int

    def __post_init__(self):
        if not np.isfinite(self.lam):
            raise NumericalFailure("LLE estimate is not finite")
        if self.probes < 1:
            raise ContractError("LLE estimate needs probes >= 1")


def estimate_lle(sys: DynamicsSystem, traj: Trajectory, probes: int = 3,
                 seed: int = 0, block: int = 512) -> LleEstimate:
    """Average log stretch of the Jacobian chain along a trajectory.

    For each random unit vector u0: iterate u <- A_t u, accumulate log||u||
    and renormalize each step; the exponent is the accumulated log stretch
    divided by T, averaged over probes. Renormalizing every step keeps the
    computation stable for both contracting and expanding chains. Jacobians
    are evaluated at the trajectory's predecessor states in blocks to bound
    memory.
    """
    if probes < 1:
        raise ContractError("probes must be >= 1")
    sys._check_traj(traj)
    T, D = traj.horizon, traj.dim
    rng = np.random.default_rng(seed)
    U = rng.standard_normal((D, probes))
    U /= np.linalg.norm(U, axis=0, keepdims=True)
    acc = np.zeros(probes)
    prev = traj.prev_states()
    for start in range(0, T, block):
        stop = min(start + block, T)
        ts = np.arange(start + 1, stop + 1)
        jacs = sys.jacobian_batch(ts, prev[start:stop])
        for j in jacs:
            U = j @ U
            norms = np.linalg.norm(U, axis=0)
            if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
                raise NumericalFailure("degenerate Jacobian chain: evolved vector has zero norm")
            acc += np.log(norms)
            U /= norms
    return LleEstimate(float(np.mean(acc) / T), horizon=T, probes=probes)


def assemble_blocks(blocks: np.ndarray) -> np.ndarray:
    """Dense TD x TD matrix with identity diagonal blocks and -blocks[t] on
    the first block subdiagonal (blocks[0] is unused by convention: the first
    block row of the residual Jacobian is just I)."""
    T, D = blocks.shape[0], blocks.shape[1]
    out = np.eye(T * D)
    for t in range(1, T):
        out[t * D:(t + 1) * D, (t - 1) * D:t * D] = -blocks[t]
    return out


def assemble_big_j(sys: DynamicsSystem, traj: Trajectory) -> np.ndarray:
    """Dense residual Jacobian: unit block diagonal, -A_t(s_{t-1}) below.

    Unit lower triangular, hence always invertible with every eigenvalue one;
    its inverse collects the Jacobian chain products A_t ... A_{tau+1} in
    block (t, tau). Guarded to T*D <= 4096.
    """
    sys._check_traj(traj)
    T, D = traj.horizon, traj.dim
    _check_dense_guard(T, D, "assemble_big_j")
    ts = np.arange(1, T + 1)
    blocks = sys.jacobian_batch(ts, traj.prev_states())
    return assemble_blocks(blocks)


def assemble_approx_j(sys: DynamicsSystem, traj: Trajectory,
                      method: SolverMethod) -> np.ndarray:
    """Like ``assemble_big_j`` but with the method's transitions A~_t."""
    sys._check_traj(traj)
    T, D = traj.horizon, traj.dim
    _check_dense_guard(T, D, "assemble_approx_j")
    ts = np.arange(1, T + 1)
    lane, A = _method_transitions(sys, ts, traj.prev_states(), method, NO_DAMPING)
    if lane == "dense":
        blocks = A
    elif lane == "diagonal":
        blocks = np.stack([np.diag(a) for a in A])
    elif lane == "zero":
        blocks = np.zeros((T, D, D))
    elif lane == "identity":
        blocks = np.broadcast_to(np.eye(D), (T, D, D))
    else:
        blocks = A[:, None, None] * np.eye(D)[None, :, :]
    return assemble_blocks(np.asarray(blocks))


def min_singular_value(M: np.ndarray) -> float:
    """Smallest singular value via a dense SVD."""
    M = np.asarray(M, dtype=np.float64)
    if not np.all(np.isfinite(M)):
        raise ContractError("min_singular_value needs a finite matrix")
    return float(np.linalg.svd(M, compute_uv=False).min())


@dataclass
class PlBounds:
    """Two-sided bounds on sqrt(mu), the root of the gradient-dominance
    constant of the trajectory objective, from the chain's Lyapunov exponent."""

    lower: float
    upper: float
    lle: float
    a_burn: float
    b_burn: float
    T: int
    D: int

    def __post_init__(self):
        if not (0.0 < self.lower <= self.upper <= 1.0 + 1e-12):
            raise NumericalFailure(
                f"PL bounds out of order: lower={self.lower}, upper={self.upper} "
                "(extreme lle*T underflows float64)"
            )


def pl_bounds(lle: float, a_burn: float = 1.0, b_burn: float = 1.0,
              T: int = 1, D: int = 1) -> PlBounds:
    """Sandwich sqrt(mu) given the chain exponent and burn-in constants.

    For lam != 0: (1/a)(e^lam - 1)/(e^(lam T) - 1) <= sqrt(mu)
    <= min(1, (1/b) e^(-lam (T-1))). For lam = 0 the bounds sharpen to
    1/(a T) <= sqrt(mu) <= min(1, (1/b) sqrt(2 D / (T + 1))). A negative
    exponent makes the lower bound asymptotically independent of T; a
    positive one collapses conditioning exponentially.
    """
    if a_burn < 1.0:
        raise ContractError("burn-in constant a must be >= 1")
    if not (0.0 < b_burn <= 1.0):
        raise ContractError("burn-in constant b must lie in (0, 1]")
    if T < 1:
        raise ContractError("T must be >= 1")
    lam = float(lle)
    if lam == 0.0:
        lower = 1.0 / (a_burn * T)
        upper = min(1.0, np.sqrt(2.0 * D / (T + 1.0)) / b_burn)
    else:
        with np.errstate(over="ignore"):
            denom = np.expm1(lam * T)
            lower = float(np.expm1(lam) / denom) / a_burn if np.isfinite(denom) else float(
                np.exp(np.log(np.expm1(lam)) - lam * T)
            ) / a_burn
            upper = min(1.0, float(np.exp(-lam * (T - 1))) / b_burn)
    return PlBounds(lower=lower, upper=upper, lle=lam, a_burn=a_burn,
                    b_burn=b_burn, T=int(T), D=int(D))


def _transition_matrices(sys, traj, method):
    """Dense A~_t and A_t at the trajectory's predecessor states, t = 1..T."""
    T, D = traj.horizon, traj.dim
    ts = np.arange(1, T + 1)
    prev = traj.prev_states()
    A_true = sys.jacobian_batch(ts, prev)
    lane, A = _method_transitions(sys, ts, prev, method, NO_DAMPING)
    if lane == "dense":
        approx = A
    elif lane == "diagonal":
        approx = np.stack([np.diag(a) for a in A])
    elif lane == "zero":
        approx = np.zeros((T, D, D))
    elif lane == "identity":
        approx = np.broadcast_to(np.eye(D), (T, D, D)).copy()
    else:
        approx = A[:, None, None] * np.eye(D)[None, :, :]
    return np.asarray(approx), A_true


def jacobian_mismatch(sys: DynamicsSystem, traj: Trajectory,
                      method: SolverMethod) -> float:
    """max over t >= 2 of ||A~_t - A_t||_2 at the trajectory's states.

    Equals the spectral-norm distance between the assembled approximate and
    true residual Jacobians, because the block difference sits on a single
    subdiagonal.
    """
    if method.kind == "newton":
        return 0.0
    approx, true = _transition_matrices(sys, traj, method)
    diffs = approx[1:] - true[1:]  # block t = 1 never enters the residual Jacobian
    if diffs.shape[0] == 0:
        return 0.0
    return float(np.linalg.norm(diffs, ord=2, axis=(1, 2)).max())


def picard_inverse_norm(T: int) -> float:
    """||J~^{-1}||_2 for identity transitions: 1 / (2 sin(pi / (2 (2T + 1)))).

    Grows linearly in T (small-angle regime), which is why identity-transition
    iterations pay a sequence-length factor in their rate.
    """
    if T < 1:
        raise ContractError("T must be >= 1")
    return float(1.0 / (2.0 * np.sin(np.pi / (2.0 * (2.0 * T + 1.0)))))


def _bidiagonal_inverse_norm(subdiag: np.ndarray) -> float:
    """||B^{-1}||_2 for B = I_T - subdiag(c_2 .. c_T), dense SVD."""
    T = subdiag.shape[0]
    B = np.eye(T)
    idx = np.arange(1, T)
    B[idx, idx - 1] = -subdiag[1:]
    return 1.0 / min_singular_value(B)


def asymptotic_rate(sys: DynamicsSystem, traj_star: Trajectory,
                    method: SolverMethod) -> float:
    """gamma = ||J~(s*)^{-1}||_2 * max_t ||A~_t - A_t||_2 at the solution.

    The inverse-norm factor is 1 for zero transitions and the closed form
    above for identity transitions. Diagonal and scaled-identity transitions
    decouple coordinatewise into T x T bidiagonal blocks, so their inverse
    norm needs only T <= 4096; the fully dense path keeps the T*D guard.
    """
    mismatch = jacobian_mismatch(sys, traj_star, method)
    if method.kind == "newton":
        return 0.0
    T, D = traj_star.horizon, traj_star.dim
    if method.kind == "jacobi":
        inv_norm = 1.0
    elif method.kind == "picard":
        inv_norm = picard_inverse_norm(T)
    elif method.kind in ("quasi", "scaled"):
        _check_dense_guard(T, 1, "asymptotic_rate (per-coordinate path)")
        ts = np.arange(1, T + 1)
        lane, A = _method_transitions(sys, ts, traj_star.prev_states(), method, NO_DAMPING)
        diag = A if lane == "diagonal" else np.broadcast_to(A[:, None], (T, D))
        inv_norm = max(_bidiagonal_inverse_norm(diag[:, j]) for j in range(D))
    else:
        _check_dense_guard(T, D, "asymptotic_rate")
        approx_j = assemble_approx_j(sys, traj_star, method)
        inv_norm = 1.0 / min_singular_value(approx_j)
    return float(inv_norm * mismatch)


def basin_radius(mu: float, L: float) -> float:
    """Lower bound 2 mu / L on the radius of the fast-convergence basin.

    L = 0 (affine dynamics) makes the basin infinite.
    """
    if mu <= 0:
        raise ContractError("mu must be positive")
    if L < 0:
        raise ContractError("L must be nonnegative")
    if L == 0.0:
        return float("inf")
    return 2.0 * mu / L


def estimate_burn_in(sys: DynamicsSystem, traj: Trajectory, lle: float,
                     max_window: int | None = None, max_starts: int = 64):
    """Empirical burn-in constants (a, b) for the chain regularity condition.

    Scans windowed Jacobian products and compares their norms against
    e^(lle * k): a is the max of the ratios (clamped >= 1), b the min
    (clamped <= 1). Heuristic only; no accuracy claim is made.
    """
    sys._check_traj(traj)
    T, D = traj.horizon, traj.dim
    K = max_window if max_window is not None else min(T - 1, 16)
    K = max(1, min(K, T - 1)) if T > 1 else 0
    ts = np.arange(1, T + 1)
    jacs = sys.jacobian_batch(ts, traj.prev_states())
    starts = np.unique(np.linspace(1, T - K, num=min(max_starts, max(1, T - K)), dtype=int)) if K else []
    hi, lo = 1.0, 1.0
    for t0 in starts:
        prod = np.eye(D)
        for k in range(1, K + 1):
            prod = jacs[t0 + k - 1] @ prod
            ratio = float(np.linalg.norm(prod, 2) * np.exp(-lle * k))
            hi = max(hi, ratio)
            lo = min(lo, ratio)
    return hi, min(1.0, lo)
