"""The three estimators under comparison: PKO, linear Koopman observer, EKF."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .persidskii import SectorNonlinearity
from .systems import Plant

__all__ = [
    "ObserverDivergedError",
    "GainDesignError",
    "PkoObserver",
    "LinKoopObserver",
    "EkfObserver",
    "estimate_state",
    "pko_step",
    "ekf_step",
    "linkoop_gain",
    "ackermann_gain",
    "newton_kleinman_filter_gain",
    "spectral_abscissa",
    "check_detectability",
]


class ObserverDivergedError(RuntimeError):
    def __init__(self, time: float):
        super().__init__(f"observer state diverged at t={time:.6g}")
        self.time = time


class GainDesignError(RuntimeError):
    """Observer gain synthesis failed (undetectable pair or non-convergence)."""


def spectral_abscissa(M: np.ndarray) -> float:
    return float(np.max(np.real(np.linalg.eigvals(M))))


def check_detectability(A: np.ndarray, C: np.ndarray) -> None:
    """PBH test on the closed right half plane; raises naming the bad eigenvalue."""
    r = A.shape[0]
    eigs = np.linalg.eigvals(A)
    for lam in eigs:
        if lam.real < -1e-12:
            continue
        M = np.vstack([A - lam * np.eye(r), np.atleast_2d(C)])
        if np.linalg.matrix_rank(M, tol=1e-9 * max(1.0, float(np.abs(A).max()))) < r:
            raise GainDesignError(f"unobservable unstable mode at eigenvalue {lam:.6g}")


class PkoObserver:
    """Nonlinear-correction lifted observer: zdot = A z + B u + K sigma(y - C_o z)."""

    def __init__(self, model, K: np.ndarray, sigma: SectorNonlinearity,
                 z0: np.ndarray, t0: float = 0.0):
        self.A = np.asarray(model.A, dtype=float)
        self.B = np.asarray(model.B, dtype=float)
        self.C_o = np.asarray(model.C_o, dtype=float)
        self.state_dim = model.state_dim
        self.K = np.asarray(K, dtype=float).reshape(self.A.shape[0], self.C_o.shape[0])
        if sigma.channel_count != self.C_o.shape[0]:
            raise ValueError("sigma channel count must match output dimension")
        self.sigma = sigma
        self.z_hat = np.asarray(z0, dtype=float).copy()
        self.t = t0

    def _rhs(self, z: np.ndarray, u: np.ndarray, y: np.ndarray) -> np.ndarray:
        innov = y - self.C_o @ z
        return self.A @ z + self.B @ u + self.K @ self.sigma(innov)

    def step(self, u, y, dt: float) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        z = self.z_hat
        k1 = self._rhs(z, u, y)
        k2 = self._rhs(z + 0.5 * dt * k1, u, y)
        k3 = self._rhs(z + 0.5 * dt * k2, u, y)
        k4 = self._rhs(z + dt * k3, u, y)
        z_next = z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        self.t += dt
        if not np.all(np.isfinite(z_next)):
            raise ObserverDivergedError(self.t)
        self.z_hat = z_next
        return z_next

    def state_estimate(self) -> np.ndarray:
        return self.z_hat[:self.state_dim]


class LinKoopObserver:
    """Linear Luenberger observer on the lifted model."""

    def __init__(self, model, L: np.ndarray, z0: np.ndarray, t0: float = 0.0):
        self.A = np.asarray(model.A, dtype=float)
        self.B = np.asarray(model.B, dtype=float)
        self.C_o = np.asarray(model.C_o, dtype=float)
        self.state_dim = model.state_dim
        self.L = np.asarray(L, dtype=float).reshape(self.A.shape[0], self.C_o.shape[0])
        closed = self.A - self.L @ self.C_o
        if spectral_abscissa(closed) >= 0:
            raise GainDesignError("A - L C_o is not Hurwitz")
        self.z_hat = np.asarray(z0, dtype=float).copy()
        self.t = t0

    def _rhs(self, z: np.ndarray, u: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.A @ z + self.B @ u + self.L @ (y - self.C_o @ z)

    def step(self, u, y, dt: float) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        z = self.z_hat
        k1 = self._rhs(z, u, y)
        k2 = self._rhs(z + 0.5 * dt * k1, u, y)
        k3 = self._rhs(z + 0.5 * dt * k2, u, y)
        k4 = self._rhs(z + dt * k3, u, y)
        z_next = z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        self.t += dt
        if not np.all(np.isfinite(z_next)):
            raise ObserverDivergedError(self.t)
        self.z_hat = z_next
        return z_next

    def state_estimate(self) -> np.ndarray:
        return self.z_hat[:self.state_dim]


class EkfObserver:
    """Continuous-discrete EKF on the original plant with analytic Jacobians."""

    def __init__(self, plant: Plant, Q: np.ndarray, R: np.ndarray,
                 x0: np.ndarray, P0: np.ndarray, t0: float = 0.0):
        if plant.jacobian is None:
            raise ValueError("EKF needs a plant with an analytic Jacobian")
        self.plant = plant
        n = plant.state_dim
        self.Q = np.asarray(Q, dtype=float).reshape(n, n)
        p = len(plant.measured_indices)
        self.R = np.asarray(R, dtype=float).reshape(p, p)
        self.H = np.zeros((p, n))
        for row, idx in enumerate(plant.measured_indices):
            self.H[row, idx] = 1.0
        self.x_hat = np.asarray(x0, dtype=float).copy()
        self.Pcov = np.asarray(P0, dtype=float).reshape(n, n).copy()
        self.t = t0

    def _predict_rhs(self, x: np.ndarray, P: np.ndarray, u: np.ndarray):
        F = self.plant.jacobian(x, u)
        return self.plant.dynamics(x, u, self.t), F @ P + P @ F.T + self.Q

    def step(self, u, y, dt: float):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        x, P = self.x_hat, self.Pcov
        # joint RK4 on the estimate and covariance ODEs
        k1x, k1P = self._predict_rhs(x, P, u)
        k2x, k2P = self._predict_rhs(x + 0.5 * dt * k1x, P + 0.5 * dt * k1P, u)
        k3x, k3P = self._predict_rhs(x + 0.5 * dt * k2x, P + 0.5 * dt * k2P, u)
        k4x, k4P = self._predict_rhs(x + dt * k3x, P + dt * k3P, u)
        x = x + (dt / 6.0) * (k1x + 2 * k2x + 2 * k3x + k4x)
        P = P + (dt / 6.0) * (k1P + 2 * k2P + 2 * k3P + k4P)
        self.t += dt
        if not np.all(np.isfinite(x)):
            raise ObserverDivergedError(self.t)

        S = self.H @ P @ self.H.T + self.R
        try:
            Sinv = np.linalg.inv(S)
        except np.linalg.LinAlgError as exc:
            raise GainDesignError(f"singular innovation covariance at t={self.t:.4g}") from exc
        G = P @ self.H.T @ Sinv
        x = x + G @ (y - self.H @ x)
        IKH = np.eye(len(x)) - G @ self.H
        P = IKH @ P @ IKH.T + G @ self.R @ G.T   # Joseph form
        P = 0.5 * (P + P.T)
        w, V = np.linalg.eigh(P)
        if w[0] < 0:
            P = (V * np.maximum(w, 0.0)) @ V.T
            P = 0.5 * (P + P.T)
        self.x_hat, self.Pcov = x, P
        return x, P

    def state_estimate(self) -> np.ndarray:
        return self.x_hat


def estimate_state(observer) -> np.ndarray:
    """Recover the physical-state estimate from any of the three observers."""
    return observer.state_estimate()


def pko_step(observer: PkoObserver, u, y, dt: float) -> np.ndarray:
    return observer.step(u, y, dt)


def ekf_step(observer: EkfObserver, u, y, dt: float):
    return observer.step(u, y, dt)


def ackermann_gain(A: np.ndarray, C: np.ndarray, poles: Sequence[complex]) -> np.ndarray:
    """Observer pole placement by Ackermann's formula (r <= 4, single output)."""
    A = np.asarray(A, dtype=float)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    r = A.shape[0]
    if r > 4 or C.shape[0] != 1:
        raise GainDesignError("Ackermann placement restricted to r <= 4, p = 1")
    if len(poles) != r:
        raise GainDesignError("need exactly r poles")
    O = np.vstack([C @ np.linalg.matrix_power(A, k) for k in range(r)])
    if np.linalg.matrix_rank(O) < r:
        raise GainDesignError("pair (A, C) not observable")
    coeffs = np.real(np.poly(np.asarray(poles, dtype=complex)))
    qA = np.zeros_like(A)
    for c in coeffs:
        qA = qA @ A + c * np.eye(r)
    e_last = np.zeros(r)
    e_last[-1] = 1.0
    L = qA @ np.linalg.solve(O, e_last)
    return L.reshape(r, 1)


def _bass_stabilizing_gain(A: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Stabilizing output-injection seed via the shifted-Lyapunov (Bass) trick.

    Solves (beta I + A') W + W (beta I + A) = 2 C' C with beta > ||A||; for an
    observable pair, L = W^-1 C' stabilizes A - L C. Falls back to the Riccati
    solution when the Gramian is ill-conditioned (weakly observable modes).
    """
    r = A.shape[0]
    beta = 2.0 * float(np.linalg.norm(A, 2)) + 1.0
    W = scipy.linalg.solve_continuous_lyapunov(A.T + beta * np.eye(r), 2.0 * C.T @ C)
    W = 0.5 * (W + W.T)
    try:
        L = np.linalg.solve(W + 1e-12 * np.trace(np.abs(W)) * np.eye(r), C.T)
        if spectral_abscissa(A - L @ C) < 0:
            return L
    except np.linalg.LinAlgError:
        pass
    S = scipy.linalg.solve_continuous_are(A.T, C.T, np.eye(r), np.eye(C.shape[0]))
    L = S @ C.T
    if spectral_abscissa(A - L @ C) >= 0:
        raise GainDesignError("could not construct a stabilizing seed gain")
    return L


def newton_kleinman_filter_gain(A: np.ndarray, C: np.ndarray, Q: np.ndarray,
                                R: np.ndarray, tol: float = 1e-11,
                                max_iter: int = 60) -> np.ndarray:
    """Steady-state filter gain from the dual Riccati equation by Newton-Kleinman.

    Solves A S + S A' - S C' R^-1 C S + Q = 0 through the quadratically
    convergent Kleinman iteration (a Lyapunov solve per step), seeded with
    L0 = 0 when A is already Hurwitz and a Bass-type stabilizer otherwise.
    """
    A = np.asarray(A, dtype=float)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    check_detectability(A, C)
    r = A.shape[0]
    Rinv = np.linalg.inv(R)
    L = np.zeros((r, C.shape[0])) if spectral_abscissa(A) < 0 else _bass_stabilizing_gain(A, C)
    scale = float(np.linalg.norm(Q) + np.linalg.norm(A) ** 2) + 1.0
    for _ in range(max_iter):
        Acl = A - L @ C
        S = scipy.linalg.solve_continuous_lyapunov(Acl, -(Q + L @ R @ L.T))
        S = 0.5 * (S + S.T)
        L_next = S @ C.T @ Rinv
        if spectral_abscissa(A - L_next @ C) >= 0:
            L_next = 0.5 * (L + L_next)   # dampen when the update overshoots
        resid = A @ S + S @ A.T - S @ C.T @ Rinv @ C @ S + Q
        if float(np.linalg.norm(resid, "fro")) < tol * scale:
            return L_next
        L = L_next
    # fall back to the direct Riccati solution for pathological pairs
    S = scipy.linalg.solve_continuous_are(A.T, C.T, Q, R)
    L = S @ C.T @ Rinv
    if spectral_abscissa(A - L @ C) < 0:
        return L
    raise GainDesignError("Newton-Kleinman iteration did not converge")


def linkoop_gain(model, q_scale: float = 1.0, r_scale: float = 1e-2,
                 poles: Sequence[complex] | None = None) -> np.ndarray:
    """Gain for the linear Koopman observer.

    Default route: steady-state dual-Riccati gain with Q = q_scale*I and
    R = r_scale*I. Pole placement (Ackermann) is kept for small systems when
    explicit poles are given.
    """
    A = np.asarray(model.A, dtype=float)
    C = np.atleast_2d(np.asarray(model.C_o, dtype=float))
    if poles is not None:
        return ackermann_gain(A, C, poles)
    r = A.shape[0]
    p = C.shape[0]
    return newton_kleinman_filter_gain(A, C, q_scale * np.eye(r), r_scale * np.eye(p))
