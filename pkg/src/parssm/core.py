"""Core types for nonlinear state space models and the sequential oracle.

A system evolves as s_{t+1} = f_t(s_t) from a fixed, known initial state s_0.
Everything downstream (parallel solvers, diagnostics) is validated against
``rollout_sequential``, the plain left-to-right evaluation implemented here.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np


class ContractError(ValueError):
    """An interface contract was violated (shape, range, or mode)."""


class NumericalFailure(RuntimeError):
    """A numerical invariant broke down mid-computation.

    Carries the time index at which the failure was detected, when known.
    """

    def __init__(self, message: str, t: int | None = None):
        if t is not None:
            message = f"{message} (at time index t={t})"
        super().__init__(message)
        self.t = t


def as_state(x, dim: int | None = None) -> np.ndarray:
    """Coerce ``x`` to a float64 state vector, optionally checking its length."""
    s = np.asarray(x, dtype=np.float64)
    if s.ndim != 1:
        raise ContractError(f"state vector must be 1-D, got shape {s.shape}")
    if dim is not None and s.shape[0] != dim:
        raise ContractError(f"state vector has length {s.shape[0]}, expected {dim}")
    return s


@dataclass
class Trajectory:
    """A full state sequence s_{1:T} together with the fixed initial state s_0.

    ``states`` is a T x D matrix, row t-1 holding s_t. Finiteness of the rows
    is deliberately NOT an invariant: intermediate solver iterates may
    overflow, and the reset heuristic relies on detecting that.
    """

    initial: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        self.initial = as_state(self.initial)
        self.states = np.asarray(self.states, dtype=np.float64)
        if not np.all(np.isfinite(self.initial)):
            raise ContractError("initial state must be finite")
        if self.states.ndim != 2:
            raise ContractError(f"states must be a T x D matrix, got shape {self.states.shape}")
        if self.states.shape[0] < 1:
            raise ContractError("trajectory needs horizon T >= 1")
        if self.states.shape[1] != self.initial.shape[0]:
            raise ContractError(
                f"state size mismatch: rows have D={self.states.shape[1]}, "
                f"initial has D={self.initial.shape[0]}"
            )

    @property
    def horizon(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def prev_states(self) -> np.ndarray:
        """Predecessor matrix: row t-1 holds s_{t-1} (row 0 is s_0)."""
        return np.vstack([self.initial[None, :], self.states[:-1]])

    def copy(self) -> "Trajectory":
        return Trajectory(self.initial.copy(), self.states.copy())


class DynamicsSystem(ABC):
    """Interface for a discrete-time system s_{t+1} = f_t(s_t), t = 1..T.

    ``step`` and ``jacobian`` must be pure, deterministic functions of (t, s):
    any stochastic ingredient (noise, data, weights) is drawn once at
    construction from an explicit 64-bit seed and curried into the per-step
    maps. Time indices are 1-based; ``step(1, s0)`` produces s_1.

    Subclasses must set ``dim``, ``horizon``, ``initial_state`` and implement
    ``step``. ``jacobian`` defaults to a central finite-difference oracle,
    ``diag_jacobian`` to a single-probe Hutchinson estimate (seeded per t), and
    ``jvp`` to a central difference; override any of them with analytic forms.
    Batched variants default to loops and may be overridden with vectorized
    implementations (then define the scalar form through the batch so both
    paths stay bitwise consistent).
    """

    dim: int
    horizon: int
    initial_state: np.ndarray
    diag_samples: int = 1
    diag_seed: int = 0

    @abstractmethod
    def step(self, t: int, s: np.ndarray) -> np.ndarray:
        """Apply f_t to a state, for t in 1..T."""

    def jacobian(self, t: int, s: np.ndarray) -> np.ndarray:
        from . import jacutils

        return jacutils.fd_jacobian(self, t, s)

    def jvp(self, t: int, s: np.ndarray, v: np.ndarray) -> np.ndarray:
        from . import jacutils

        return jacutils.fd_jvp(self, t, s, v)

    def diag_jacobian(self, t: int, s: np.ndarray) -> np.ndarray:
        from . import jacutils

        return jacutils.hutchinson_diag_values(
            self, t, s, n=self.diag_samples, seed=(self.diag_seed, t)
        )

    # -- batched variants; ts is an array of 1-based time indices, S is (n, D)

    def step_batch(self, ts: np.ndarray, S: np.ndarray) -> np.ndarray:
        return np.stack([self.step(int(t), s) for t, s in zip(ts, S)])

    def jacobian_batch(self, ts: np.ndarray, S: np.ndarray) -> np.ndarray:
        if type(self).jacobian is DynamicsSystem.jacobian:
            from . import jacutils

            return jacutils.fd_jacobian_batch(self, np.asarray(ts), np.asarray(S), strict=False)
        return np.stack([self.jacobian(int(t), s) for t, s in zip(ts, S)])

    def diag_jacobian_batch(self, ts: np.ndarray, S: np.ndarray) -> np.ndarray:
        if (type(self).diag_jacobian is DynamicsSystem.diag_jacobian
                and type(self).jvp is DynamicsSystem.jvp):
            from . import jacutils

            return jacutils.hutchinson_diag_batch(
                self, np.asarray(ts), np.asarray(S), n=self.diag_samples,
                seed_base=self.diag_seed)
        return np.stack([self.diag_jacobian(int(t), s) for t, s in zip(ts, S)])

    def _check_traj(self, traj: Trajectory):
        if traj.dim != self.dim or traj.horizon != self.horizon:
            raise ContractError(
                f"trajectory shape (T={traj.horizon}, D={traj.dim}) does not match "
                f"system (T={self.horizon}, D={self.dim})"
            )


def rollout_sequential(sys: DynamicsSystem) -> Trajectory:
    """Evaluate s_{1:T} left to right. This is the ground-truth oracle s*.

    Non-finite states are propagated, not masked: a diverging system reports
    its divergence through the returned rows.
    """
    states = np.empty((sys.horizon, sys.dim))
    s = as_state(sys.initial_state, sys.dim)
    for t in range(1, sys.horizon + 1):
        s = np.asarray(sys.step(t, s), dtype=np.float64)
        states[t - 1] = s
    return Trajectory(sys.initial_state, states)


def residual(sys: DynamicsSystem, traj: Trajectory) -> np.ndarray:
    """One-step prediction error r_t = s_t - f_t(s_{t-1}) as a T x D matrix."""
    sys._check_traj(traj)
    ts = np.arange(1, sys.horizon + 1)
    prev = traj.prev_states()
    with np.errstate(all="ignore"):
        pred = sys.step_batch(ts, prev)
        return traj.states - pred


def merit(sys: DynamicsSystem, traj: Trajectory) -> float:
    """Half the squared Frobenius norm of the residual; +inf if non-finite.

    Zero exactly at the sequential rollout and nowhere else.
    """
    r = residual(sys, traj)
    if not np.all(np.isfinite(r)):
        return float("inf")
    return 0.5 * float(np.dot(r.ravel(), r.ravel()))


def max_abs_diff(a, b) -> float:
    """Infinity norm of the elementwise difference of two trajectories.

    The default convergence metric for successive solver iterates. Accepts
    Trajectory objects or raw T x D arrays of matching shape.
    """
    xa = a.states if isinstance(a, Trajectory) else np.asarray(a)
    xb = b.states if isinstance(b, Trajectory) else np.asarray(b)
    if xa.shape != xb.shape:
        raise ContractError(f"shape mismatch: {xa.shape} vs {xb.shape}")
    with np.errstate(invalid="ignore"):
        d = np.abs(xa - xb)
    if np.isnan(d).any():
        return float("inf")
    return float(d.max()) if d.size else 0.0
