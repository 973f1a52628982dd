"""Lifted linear model identification and residual characterization.

Continuous-time EDMD: the lifted derivative is approximated by centered
finite differences on interior samples and (A, B) solve a ridge-regularized
least-squares problem in the lifted coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .lifting import DictionarySpec, ObservableDictionary, build_dictionary, lift, lift_jacobian, output_matrix
from .systems import Plant, Trace

__all__ = [
    "SingularSystemError",
    "TrajectoryDataset",
    "KoopmanModel",
    "ResidualCharacterization",
    "fit_edmd",
    "true_residual",
    "fit_residual_envelope",
    "estimate_residual_bound",
    "split_dataset",
]


class SingularSystemError(RuntimeError):
    """Regression matrix is rank-deficient; suggest ridge_lambda > 0."""


@dataclass(frozen=True)
class TrajectoryDataset:
    traces: tuple[Trace, ...]
    dictionary: ObservableDictionary

    def __post_init__(self) -> None:
        if not self.traces:
            raise ValueError("dataset needs at least one trace")
        dt0 = self.traces[0].dt
        for tr in self.traces:
            if abs(tr.dt - dt0) > 1e-12:
                raise ValueError("all traces must share dt")
            if tr.states.shape[1] != self.dictionary.state_dim:
                raise ValueError("trace state dim does not match dictionary")

    @property
    def dt(self) -> float:
        return self.traces[0].dt


@dataclass
class KoopmanModel:
    """Identified lifted linear model plus residual characterization."""

    A: np.ndarray
    B: np.ndarray
    C_o: np.ndarray
    dictionary: ObservableDictionary
    dictionary_spec: DictionarySpec | None = None
    ridge_lambda: float = 0.0
    rho: float | None = None
    eta_bar: float | None = None
    epsilon: float | None = None
    omega_max: float | None = None

    def __post_init__(self) -> None:
        r = self.dictionary.total_dim
        if self.A.shape != (r, r):
            raise ValueError(f"A must be {r}x{r}")
        if self.B.shape[0] != r:
            raise ValueError("B row count must equal total_dim")
        if self.C_o.shape[1] != r:
            raise ValueError("C_o column count must equal total_dim")

    @property
    def r(self) -> int:
        return self.dictionary.total_dim

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C_o.shape[0]

    @property
    def state_dim(self) -> int:
        return self.dictionary.state_dim

    def to_json_dict(self) -> dict:
        d = {
            "state_dim": self.state_dim,
            "r": self.r,
            "m": self.m,
            "p": self.p,
            "A": self.A.flatten().tolist(),
            "B": self.B.flatten().tolist(),
            "C_o": self.C_o.flatten().tolist(),
            "dictionary": self.dictionary_spec.to_dict() if self.dictionary_spec else None,
            "ridge_lambda": self.ridge_lambda,
            "rho": self.rho,
            "eta_bar": self.eta_bar,
            "epsilon": self.epsilon,
        }
        if self.omega_max is not None:
            d["omega_max"] = self.omega_max
        return d

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=1)

    @staticmethod
    def from_json_dict(d: dict) -> "KoopmanModel":
        spec = DictionarySpec.from_dict(d["dictionary"]) if d.get("dictionary") else None
        if spec is None:
            raise ValueError("model file lacks a dictionary spec")
        dictionary = build_dictionary(spec)
        r, m, p = d["r"], d["m"], d["p"]
        return KoopmanModel(
            A=np.array(d["A"]).reshape(r, r),
            B=np.array(d["B"]).reshape(r, m),
            C_o=np.array(d["C_o"]).reshape(p, r),
            dictionary=dictionary,
            dictionary_spec=spec,
            ridge_lambda=d.get("ridge_lambda", 0.0),
            rho=d.get("rho"),
            eta_bar=d.get("eta_bar"),
            epsilon=d.get("epsilon"),
            omega_max=d.get("omega_max"),
        )

    @staticmethod
    def load(path) -> "KoopmanModel":
        with open(path) as fh:
            return KoopmanModel.from_json_dict(json.load(fh))


@dataclass(frozen=True)
class ResidualCharacterization:
    """Envelope |Delta| <= rho |z| + eta_bar fitted on held-out samples."""

    rho: float
    eta_bar: float
    epsilon: float
    residual_samples: np.ndarray  # (N, 2) columns |z|, |Delta|

    def __post_init__(self) -> None:
        if self.rho < 0 or self.eta_bar < 0:
            raise ValueError("rho and eta_bar must be non-negative")
        z, d = self.residual_samples[:, 0], self.residual_samples[:, 1]
        if np.any(d > self.rho * z + self.eta_bar + 1e-12 * (1.0 + d.max(initial=0.0))):
            raise ValueError("envelope does not dominate the stored samples")


def _regression_data(dataset: TrajectoryDataset):
    """Stack lifted states, inputs, and centered-difference lifted derivatives."""
    Zs, Us, Zdots = [], [], []
    dt = dataset.dt
    for tr in dataset.traces:
        Z = lift(dataset.dictionary, tr.states)
        Zdot = (Z[2:] - Z[:-2]) / (2.0 * dt)
        Zs.append(Z[1:-1])
        Us.append(tr.inputs[1:-1])
        Zdots.append(Zdot)
    return np.vstack(Zs), np.vstack(Us), np.vstack(Zdots)


def fit_edmd(dataset: TrajectoryDataset, ridge_lambda: float | None = None,
             measured_indices: Sequence[int] = (0,)) -> KoopmanModel:
    """Least-squares fit of zdot = A z + B u with ridge penalty on (A, B).

    ridge_lambda=None selects the scale-aware default 1e-6 * tr(Gram)/r;
    pass 0.0 for a plain least-squares fit (raises SingularSystemError if the
    regression is rank-deficient).
    """
    Z, U, Zdot = _regression_data(dataset)
    r = dataset.dictionary.total_dim
    m = U.shape[1]
    if Z.shape[0] < 10 * (r + m):
        raise ValueError(f"need at least {10 * (r + m)} samples, got {Z.shape[0]}")
    G = np.hstack([Z, U])
    gram = G.T @ G
    if ridge_lambda is None:
        ridge_lambda = 1e-6 * np.trace(gram) / r
    if ridge_lambda < 0:
        raise ValueError("ridge_lambda must be non-negative")
    if ridge_lambda == 0.0:
        rank = np.linalg.matrix_rank(G)
        if rank < r + m:
            raise SingularSystemError(
                f"regression rank {rank} < {r + m}; set ridge_lambda > 0")
        W, *_ = np.linalg.lstsq(G, Zdot, rcond=None)
    else:
        W = np.linalg.solve(gram + ridge_lambda * np.eye(r + m), G.T @ Zdot)
    A = W[:r].T
    B = W[r:].T
    return KoopmanModel(
        A=A, B=B,
        C_o=output_matrix(dataset.dictionary, measured_indices),
        dictionary=dataset.dictionary,
        ridge_lambda=float(ridge_lambda),
    )


def true_residual(model: KoopmanModel, plant: Plant, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Exact lifting residual Delta = DPhi(x) f(x,u) - A Phi(x) - B u."""
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    z = lift(model.dictionary, x)
    J = lift_jacobian(model.dictionary, x)
    f = plant.dynamics(x, u, 0.0)
    return J @ f - model.A @ z - model.B @ u


def fit_residual_envelope(z_norms: np.ndarray, delta_norms: np.ndarray,
                          grid_points: int = 100, weight: float = 1.0):
    """Pick rho on a grid minimizing eta_bar(rho) + weight * rho * median|z|.

    eta_bar(rho) = max_k (|Delta_k| - rho |z_k|)_+ keeps the envelope valid on
    the data by construction. Returns (rho, eta_bar, epsilon).
    """
    z = np.asarray(z_norms, dtype=float)
    d = np.asarray(delta_norms, dtype=float)
    if z.size == 0:
        raise ValueError("empty sample set")
    eps = float(d.max())
    nz = z > 1e-12
    rho_max = float((d[nz] / z[nz]).max()) if np.any(nz) else 0.0
    med = float(np.median(z))
    best = (0.0, eps)  # (rho, eta_bar) fallback: trivial envelope
    best_cost = eps
    for rho in np.linspace(0.0, rho_max, grid_points):
        eta = float(np.maximum(d - rho * z, 0.0).max())
        cost = eta + weight * rho * med
        if cost < best_cost - 1e-15:
            best, best_cost = (float(rho), eta), cost
    return best[0], best[1], eps


def estimate_residual_bound(model: KoopmanModel, validation_traces: Sequence[Trace],
                            plant: Plant | None = None) -> ResidualCharacterization:
    """Characterize the residual on held-out traces.

    With a plant, Delta is evaluated exactly through the lifted vector field;
    otherwise it is estimated from centered differences of the lifted data.
    """
    if not validation_traces:
        raise ValueError("empty validation set")
    zs, ds = [], []
    for tr in validation_traces:
        Z = lift(model.dictionary, tr.states)
        if plant is not None:
            J = lift_jacobian(model.dictionary, tr.states)  # (N, r, n)
            F = np.stack([plant.dynamics(x, u, t)
                          for x, u, t in zip(tr.states, tr.inputs, tr.times)])
            Zdot = np.einsum("krn,kn->kr", J, F)
            Delta = Zdot - Z @ model.A.T - tr.inputs @ model.B.T
            zs.append(np.linalg.norm(Z, axis=1))
            ds.append(np.linalg.norm(Delta, axis=1))
        else:
            Zdot = (Z[2:] - Z[:-2]) / (2.0 * tr.dt)
            Delta = Zdot - Z[1:-1] @ model.A.T - tr.inputs[1:-1] @ model.B.T
            zs.append(np.linalg.norm(Z[1:-1], axis=1))
            ds.append(np.linalg.norm(Delta, axis=1))
    z = np.concatenate(zs)
    d = np.concatenate(ds)
    rho, eta_bar, eps = fit_residual_envelope(z, d)
    return ResidualCharacterization(rho=rho, eta_bar=eta_bar, epsilon=eps,
                                    residual_samples=np.column_stack([z, d]))


def split_dataset(traces: Sequence[Trace], val_fraction: float, seed: int):
    """80/20-style split by whole trajectories with a seeded shuffle."""
    from .systems import make_rng

    idx = np.arange(len(traces))
    make_rng(seed, (2,)).shuffle(idx)
    n_val = max(1, int(round(val_fraction * len(traces))))
    val_idx = set(idx[:n_val].tolist())
    train = tuple(tr for i, tr in enumerate(traces) if i not in val_idx)
    val = tuple(tr for i, tr in enumerate(traces) if i in val_idx)
    return train, val
