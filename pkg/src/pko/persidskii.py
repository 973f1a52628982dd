"""Sector-bounded nonlinearities and the Persidskii embedding of observer error.

The error dynamics of the nonlinear-correction observer are assembled as a
linear part plus a sum of scalar sector-bounded channels,

    edot = A0 e - sum_i b_i phi_i(c_i^T e) + d(t),

with p channels contributed by the correction gain columns and up to r
channels by the sector-admissible part of the lifting residual. Every channel
must pass a numerical sector check before the embedding is accepted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "SectorNonlinearity",
    "SectorCheckReport",
    "ResidualSplit",
    "PersidskiiChannel",
    "PersidskiiErrorModel",
    "sector_eval",
    "sector_check",
    "split_residual",
    "embed_error_dynamics",
]


class SectorViolationError(ValueError):
    """A claimed sector bound fails on the verification grid."""


@dataclass(frozen=True)
class SectorNonlinearity:
    """Componentwise odd nonlinearity in the sector [0, kappa_j] per channel.

    kinds: ``tanh_scaled`` sigma_j(s) = kappa_j tanh(s);
    ``saturation`` sigma_j(s) = kappa_j clamp(s, -sat_limit, sat_limit);
    ``deadzone`` sigma_j(s) = kappa_j dz(s) with dz(s) = sign(s) max(|s|-width, 0).
    """

    kind: str
    kappa: tuple[float, ...]
    sat_limit: float = 1.0
    deadzone_width: float = 0.1

    def __post_init__(self) -> None:
        if self.kind not in ("tanh_scaled", "saturation", "deadzone"):
            raise ValueError(f"unknown sector nonlinearity kind {self.kind!r}")
        if not self.kappa or any(k <= 0 for k in self.kappa):
            raise ValueError("sector slopes kappa must be positive")
        if self.sat_limit <= 0 or self.deadzone_width < 0:
            raise ValueError("invalid saturation/deadzone parameters")

    @property
    def channel_count(self) -> int:
        return len(self.kappa)

    def _shape(self, s: np.ndarray) -> np.ndarray:
        if self.kind == "tanh_scaled":
            return np.tanh(s)
        if self.kind == "saturation":
            return np.clip(s, -self.sat_limit, self.sat_limit)
        return np.sign(s) * np.maximum(np.abs(s) - self.deadzone_width, 0.0)

    def __call__(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return np.asarray(self.kappa) * self._shape(s)

    def channel(self, j: int) -> Callable[[np.ndarray], np.ndarray]:
        kappa_j = self.kappa[j]
        return lambda s: kappa_j * self._shape(np.asarray(s, dtype=float))


def sector_eval(sigma: SectorNonlinearity, s: np.ndarray) -> np.ndarray:
    """Evaluate the componentwise nonlinearity on a p-vector."""
    s = np.asarray(s, dtype=float)
    if s.shape[-1] != sigma.channel_count:
        raise ValueError(f"expected {sigma.channel_count} channels, got {s.shape[-1]}")
    return sigma(s)


@dataclass(frozen=True)
class SectorCheckReport:
    passed: bool
    min_margin: float
    witness_s: float
    witness_channel: int
    channel_margins: tuple[float, ...]


def sector_check(sigma, kappa: Sequence[float] | float,
                 grid_span: float = 10.0, grid_points: int = 10001) -> SectorCheckReport:
    """Verify phi(s) (s - phi(s)/kappa) >= 0 pointwise on [-S, S] per channel.

    ``sigma`` is a SectorNonlinearity or a single scalar callable; ``kappa``
    the claimed sector slope(s). Reports the minimal margin and its witness.
    """
    if grid_span < 10.0 or grid_points < 10000:
        raise ValueError("grid must span at least [-10, 10] with >= 1e4 points")
    if isinstance(sigma, SectorNonlinearity):
        channels = [sigma.channel(j) for j in range(sigma.channel_count)]
    else:
        channels = [sigma]
    kappas = np.atleast_1d(np.asarray(kappa, dtype=float))
    if len(kappas) == 1 and len(channels) > 1:
        kappas = np.repeat(kappas, len(channels))
    if len(kappas) != len(channels):
        raise ValueError("kappa count must match channel count")
    s = np.linspace(-grid_span, grid_span, grid_points)
    margins = []
    witness_s, witness_ch = 0.0, 0
    min_margin = math.inf
    for j, (phi, kj) in enumerate(zip(channels, kappas)):
        vals = np.asarray(phi(s), dtype=float)
        margin = vals * (s - vals / kj)
        i = int(np.argmin(margin))
        margins.append(float(margin[i]))
        if margin[i] < min_margin:
            min_margin, witness_s, witness_ch = float(margin[i]), float(s[i]), j
    return SectorCheckReport(
        passed=min_margin >= -1e-12,
        min_margin=min_margin,
        witness_s=witness_s,
        witness_channel=witness_ch,
        channel_margins=tuple(margins),
    )


@dataclass(frozen=True)
class ResidualSplit:
    """Per-coordinate tanh slopes for the sector part and a bound on the rest."""

    slopes: np.ndarray        # (r,) slopes g_j in [0, kappa_budget_j]
    d_bound: float
    kappa_budget: np.ndarray  # (r,) claimed sector bounds for the Gamma channels

    def gamma(self, e: np.ndarray) -> np.ndarray:
        return self.slopes * np.tanh(e)


def _golden_min(f, lo: float, hi: float, tol: float = 1e-6) -> float:
    """Golden-section minimizer for a unimodal scalar function on [lo, hi]."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def split_residual(e_samples: np.ndarray, delta_samples: np.ndarray,
                   kappa_budget) -> ResidualSplit:
    """Fit per-coordinate slopes g_j minimizing max_k |Delta_jk - g_j tanh(e_jk)|.

    The remainder bound is the worst per-sample Euclidean norm after removing
    the fitted sector part; if the fit is worse than the trivial split
    (all-zero slopes), the trivial split is returned so the bound never
    exceeds max_k |Delta_k|.
    """
    E = np.atleast_2d(np.asarray(e_samples, dtype=float))
    D = np.atleast_2d(np.asarray(delta_samples, dtype=float))
    if E.size == 0 or D.size == 0:
        raise ValueError("empty residual sample set")
    if E.shape != D.shape:
        raise ValueError("e and Delta sample arrays must have matching shape")
    r = E.shape[1]
    budget = np.broadcast_to(np.asarray(kappa_budget, dtype=float), (r,)).copy()
    if np.any(budget < 0):
        raise ValueError("kappa budget must be non-negative")
    slopes = np.zeros(r)
    T = np.tanh(E)
    for j in range(r):
        if budget[j] == 0.0:
            continue
        f = lambda g: float(np.abs(D[:, j] - g * T[:, j]).max())
        g_star = _golden_min(f, 0.0, float(budget[j]))
        # candidate endpoints guard against flat/degenerate objectives
        cands = [0.0, g_star, float(budget[j])]
        slopes[j] = min(cands, key=f)
    fitted_bound = float(np.linalg.norm(D - slopes * T, axis=1).max())
    trivial_bound = float(np.linalg.norm(D, axis=1).max())
    if fitted_bound > trivial_bound:
        slopes = np.zeros(r)
        fitted_bound = trivial_bound
    return ResidualSplit(slopes=slopes, d_bound=fitted_bound,
                         kappa_budget=np.maximum(budget, 1e-12))


@dataclass(frozen=True)
class PersidskiiChannel:
    b: np.ndarray                      # (r,)
    c: np.ndarray                      # (r,)
    phi: Callable[[np.ndarray], np.ndarray]
    kappa: float
    label: str = ""


@dataclass(frozen=True)
class PersidskiiErrorModel:
    """Assembled channel-sum form of the observer error dynamics."""

    A0: np.ndarray
    channels: tuple[PersidskiiChannel, ...]
    disturbance_bound: float
    K: np.ndarray
    C_o: np.ndarray
    sigma: SectorNonlinearity
    split: ResidualSplit

    def rhs(self, e: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Evaluate A0 e - sum_i b_i phi_i(c_i . e) + d."""
        out = self.A0 @ e + d
        for ch in self.channels:
            out = out - ch.b * ch.phi(ch.c @ e)
        return out


def embed_error_dynamics(model, K: np.ndarray, sigma: SectorNonlinearity,
                         split: ResidualSplit, noise_bound: float = 0.0) -> PersidskiiErrorModel:
    """Assemble the channel list from the correction columns and the residual split.

    Channels i=1..p carry (b_i = K[:, i], c_i = C_o[i, :], phi_i = sigma_i);
    channels p+j carry the per-coordinate residual slopes. The composite
    disturbance bound adds the noise injection through the correction,
    ||K|| * max(kappa) * noise_bound, to the split remainder bound.
    """
    A = np.asarray(model.A, dtype=float)
    C_o = np.asarray(model.C_o, dtype=float)
    K = np.asarray(K, dtype=float)
    r = A.shape[0]
    p = C_o.shape[0]
    if K.shape != (r, p):
        raise ValueError(f"K must be {r}x{p}")
    if sigma.channel_count != p:
        raise ValueError("sigma channel count must equal output dimension")
    rep = sector_check(sigma, sigma.kappa)
    if not rep.passed:
        raise SectorViolationError(
            f"correction nonlinearity fails sector check at s={rep.witness_s:.4g}")
    channels = []
    for i in range(p):
        channels.append(PersidskiiChannel(
            b=K[:, i].copy(), c=C_o[i, :].copy(), phi=sigma.channel(i),
            kappa=sigma.kappa[i], label=f"correction[{i}]"))
    for j in range(r):
        g = float(split.slopes[j])
        if g == 0.0:
            continue
        kap = float(split.kappa_budget[j])
        phi_j = (lambda gg: (lambda s: gg * np.tanh(s)))(g)
        rep_j = sector_check(phi_j, kap)
        if not rep_j.passed:
            raise SectorViolationError(f"residual channel {j} fails its sector bound")
        b = np.zeros(r)
        b[j] = 1.0
        channels.append(PersidskiiChannel(b=b, c=b.copy(), phi=phi_j,
                                          kappa=kap, label=f"residual[{j}]"))
    kappa_max = max(sigma.kappa)
    bound = split.d_bound + float(np.linalg.norm(K, 2)) * kappa_max * noise_bound
    return PersidskiiErrorModel(A0=A, channels=tuple(channels),
                                disturbance_bound=bound, K=K, C_o=C_o,
                                sigma=sigma, split=split)
