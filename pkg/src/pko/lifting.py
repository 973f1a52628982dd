"""Observable dictionaries: lifting maps, analytic Jacobians, and output selectors.

A dictionary is an ordered list of scalar basis functions whose first n entries
are the raw state coordinates, so state recovery from a lifted vector is a row
selection and coordinate measurements are exact selector rows.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

__all__ = [
    "BasisEntry",
    "ObservableDictionary",
    "DictionarySpec",
    "build_dictionary",
    "lift",
    "lift_jacobian",
    "output_matrix",
    "identity_entry",
    "monomial_entry",
    "sine_entry",
    "cosine_entry",
    "tanh_entry",
    "trig_monomial_entry",
    "fourier_feature_entry",
]

#: Basis kinds understood by the evaluator. ``tanh`` and ``trig_monomial`` are
#: needed for the arm preset (smoothed friction and velocity-modulated trig).
KINDS = (
    "identity",
    "monomial",
    "sine",
    "cosine",
    "tanh",
    "trig_monomial",
    "fourier_feature",
)

DEFAULT_RFF_SEED = 7


class DictionaryError(ValueError):
    """Invalid dictionary specification or entry."""


@dataclass(frozen=True)
class BasisEntry:
    """One scalar observable with enough metadata to evaluate value and gradient.

    Fields are interpreted per ``kind``:

    - identity:        x[coord]
    - monomial:        prod_i x_i**powers[i], total degree >= 1
    - sine/cosine:     sin/cos(frequency * x[coord])
    - tanh:            tanh(scale * x[coord])
    - trig_monomial:   (prod_i x_i**powers[i]) * trig(frequency * x[coord])
    - fourier_feature: cos(weights . x + phase)
    """

    kind: str
    coord: int = 0
    frequency: float = 1.0
    powers: tuple[int, ...] = ()
    weights: tuple[float, ...] = ()
    phase: float = 0.0
    scale: float = 1.0
    trig: str = "sin"

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise DictionaryError(f"unknown basis kind {self.kind!r}")
        params = [self.frequency, self.phase, self.scale, *self.weights]
        if not all(math.isfinite(p) for p in params):
            raise DictionaryError(f"non-finite parameter in {self.kind} entry")
        if self.kind in ("monomial", "trig_monomial"):
            if any(p < 0 for p in self.powers):
                raise DictionaryError("monomial powers must be non-negative")
            if self.kind == "monomial" and sum(self.powers) < 1:
                raise DictionaryError("constant observables are excluded (degree >= 1)")
        if self.kind == "fourier_feature" and len(self.weights) == 0:
            raise DictionaryError("fourier_feature needs a weight vector")
        if self.trig not in ("sin", "cos"):
            raise DictionaryError(f"trig must be sin or cos, got {self.trig!r}")

    def value(self, x: np.ndarray) -> np.ndarray:
        """Evaluate on states of shape (..., n); returns shape (...)."""
        k = self.kind
        if k == "identity":
            return x[..., self.coord]
        if k == "monomial":
            return _monomial(x, self.powers)
        if k == "sine":
            return np.sin(self.frequency * x[..., self.coord])
        if k == "cosine":
            return np.cos(self.frequency * x[..., self.coord])
        if k == "tanh":
            return np.tanh(self.scale * x[..., self.coord])
        if k == "trig_monomial":
            tr = np.sin if self.trig == "sin" else np.cos
            return _monomial(x, self.powers) * tr(self.frequency * x[..., self.coord])
        # fourier_feature
        w = np.asarray(self.weights)
        return np.cos(x @ w + self.phase)

    def grad(self, x: np.ndarray) -> np.ndarray:
        """Analytic gradient on states of shape (..., n); returns (..., n)."""
        n = x.shape[-1]
        k = self.kind
        g = np.zeros_like(x)
        if k == "identity":
            g[..., self.coord] = 1.0
        elif k == "monomial":
            g = _monomial_grad(x, self.powers)
        elif k == "sine":
            g[..., self.coord] = self.frequency * np.cos(self.frequency * x[..., self.coord])
        elif k == "cosine":
            g[..., self.coord] = -self.frequency * np.sin(self.frequency * x[..., self.coord])
        elif k == "tanh":
            s = np.tanh(self.scale * x[..., self.coord])
            g[..., self.coord] = self.scale * (1.0 - s * s)
        elif k == "trig_monomial":
            tr = np.sin if self.trig == "sin" else np.cos
            dtr = np.cos if self.trig == "sin" else (lambda v: -np.sin(v))
            arg = self.frequency * x[..., self.coord]
            mono = _monomial(x, self.powers)
            g = _monomial_grad(x, self.powers) * tr(arg)[..., None]
            g[..., self.coord] += mono * self.frequency * dtr(arg)
        else:  # fourier_feature
            w = np.asarray(self.weights)
            g = -np.sin(x @ w + self.phase)[..., None] * w
        if g.shape[-1] != n:
            raise DictionaryError("entry dimensionality inconsistent with state")
        return g

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        for f in fields(self):
            if f.name == "kind":
                continue
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                if v:
                    d[f.name] = list(v)
            elif v != f.default:
                d[f.name] = v
        return d

    @staticmethod
    def from_dict(d: dict) -> "BasisEntry":
        kw = dict(d)
        for key in ("powers", "weights"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return BasisEntry(**kw)


def _monomial(x: np.ndarray, powers: tuple[int, ...]) -> np.ndarray:
    out = np.ones(x.shape[:-1])
    for i, p in enumerate(powers):
        if p:
            out = out * x[..., i] ** p
    return out


def _monomial_grad(x: np.ndarray, powers: tuple[int, ...]) -> np.ndarray:
    g = np.zeros_like(x)
    for j, pj in enumerate(powers):
        if pj == 0:
            continue
        term = np.full(x.shape[:-1], float(pj))
        for i, p in enumerate(powers):
            q = p - 1 if i == j else p
            if q:
                term = term * x[..., i] ** q
        g[..., j] = term
    return g


# Constructors used when spelling out explicit dictionaries.

def identity_entry(coord: int) -> BasisEntry:
    return BasisEntry("identity", coord=coord)


def monomial_entry(powers: Sequence[int]) -> BasisEntry:
    return BasisEntry("monomial", powers=tuple(int(p) for p in powers))


def sine_entry(coord: int, frequency: float = 1.0) -> BasisEntry:
    return BasisEntry("sine", coord=coord, frequency=frequency)


def cosine_entry(coord: int, frequency: float = 1.0) -> BasisEntry:
    return BasisEntry("cosine", coord=coord, frequency=frequency)


def tanh_entry(coord: int, scale: float = 1.0) -> BasisEntry:
    return BasisEntry("tanh", coord=coord, scale=scale)


def trig_monomial_entry(powers: Sequence[int], trig: str, coord: int, frequency: float = 1.0) -> BasisEntry:
    return BasisEntry("trig_monomial", powers=tuple(int(p) for p in powers), trig=trig,
                      coord=coord, frequency=frequency)


def fourier_feature_entry(weights: Sequence[float], phase: float) -> BasisEntry:
    return BasisEntry("fourier_feature", weights=tuple(float(w) for w in weights), phase=float(phase))


@dataclass(frozen=True)
class ObservableDictionary:
    """Ordered observable list with the raw coordinates as its first n entries."""

    state_dim: int
    entries: tuple[BasisEntry, ...]

    def __post_init__(self) -> None:
        n, r = self.state_dim, len(self.entries)
        if n < 1:
            raise DictionaryError("state_dim must be >= 1")
        if r < n:
            raise DictionaryError(f"dictionary has {r} entries for state_dim {n}")
        for i in range(n):
            e = self.entries[i]
            if e.kind != "identity" or e.coord != i:
                raise DictionaryError(f"entry {i} must be the identity coordinate x[{i}]")
        if len(set(self.entries)) != r:
            raise DictionaryError("duplicate dictionary entries")
        for e in self.entries:
            if e.kind in ("monomial", "trig_monomial") and len(e.powers) != n:
                raise DictionaryError("monomial multi-index length must equal state_dim")
            if e.kind == "fourier_feature" and len(e.weights) != n:
                raise DictionaryError("fourier weight vector length must equal state_dim")
            if e.kind in ("identity", "sine", "cosine", "tanh", "trig_monomial") and not (0 <= e.coord < n):
                raise DictionaryError("entry coordinate out of range")

    @property
    def total_dim(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class DictionarySpec:
    """Serializable recipe for a dictionary: a named preset or explicit entries."""

    preset: str | None = None
    state_dim: int | None = None
    entries: tuple[BasisEntry, ...] | None = None
    rff_seed: int = DEFAULT_RFF_SEED

    def to_dict(self) -> dict:
        d: dict = {}
        if self.preset is not None:
            d["preset"] = self.preset
            if self.rff_seed != DEFAULT_RFF_SEED:
                d["rff_seed"] = self.rff_seed
        else:
            d["state_dim"] = self.state_dim
            d["entries"] = [e.to_dict() for e in self.entries or ()]
        return d

    @staticmethod
    def from_dict(d: dict) -> "DictionarySpec":
        allowed = {"preset", "state_dim", "entries", "rff_seed"}
        unknown = set(d) - allowed
        if unknown:
            raise DictionaryError(f"unknown dictionary spec keys: {sorted(unknown)}")
        entries = d.get("entries")
        return DictionarySpec(
            preset=d.get("preset"),
            state_dim=d.get("state_dim"),
            entries=tuple(BasisEntry.from_dict(e) for e in entries) if entries else None,
            rff_seed=d.get("rff_seed", DEFAULT_RFF_SEED),
        )

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _vdp15_entries() -> tuple[BasisEntry, ...]:
    # x1, x2, six monomials of total degree 2..3, and seven trig terms. The
    # monomial x1^2 x2 is deliberately left out: with it, the oscillator's
    # anti-damping term is exactly representable and the identified A picks up
    # a positive diagonal entry in the unmeasured block, which no diagonal
    # Lyapunov certificate can tolerate.
    entries = [identity_entry(0), identity_entry(1)]
    for powers in ((2, 0), (1, 1), (0, 2), (3, 0), (1, 2), (0, 3)):
        entries.append(monomial_entry(powers))
    entries += [
        sine_entry(0), cosine_entry(0),
        sine_entry(1), cosine_entry(1),
        sine_entry(0, 2.0), cosine_entry(0, 2.0),
        sine_entry(1, 2.0),
    ]
    return tuple(entries)


def _arm20_entries(rff_seed: int) -> tuple[BasisEntry, ...]:
    entries = [
        identity_entry(0),                     # theta
        identity_entry(1),                     # theta_dot
        sine_entry(0), cosine_entry(0),
        sine_entry(0, 2.0), cosine_entry(0, 2.0),
        trig_monomial_entry((0, 1), "sin", 0),  # theta_dot * sin(theta)
        trig_monomial_entry((0, 1), "cos", 0),  # theta_dot * cos(theta)
        tanh_entry(1, 5.0),                    # smoothed Coulomb shape
        monomial_entry((0, 2)),
        monomial_entry((0, 3)),
    ]
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=rff_seed, spawn_key=(99,))))
    for _ in range(9):
        w = rng.normal(0.0, 1.0, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        entries.append(fourier_feature_entry(w, phase))
    return tuple(entries)


def build_dictionary(spec: DictionarySpec) -> ObservableDictionary:
    """Construct a dictionary from a preset name or an explicit entry list.

    Presets: ``vdp15`` (r=15 over a 2-state oscillator) and ``arm20`` (r=20
    over a 2-state arm, including seeded random Fourier features).
    """
    if spec.preset is not None:
        if spec.preset == "vdp15":
            d = ObservableDictionary(2, _vdp15_entries())
        elif spec.preset == "arm20":
            d = ObservableDictionary(2, _arm20_entries(spec.rff_seed))
        else:
            raise DictionaryError(f"unknown preset {spec.preset!r}")
    else:
        if spec.state_dim is None or not spec.entries:
            raise DictionaryError("explicit spec needs state_dim and entries")
        d = ObservableDictionary(spec.state_dim, tuple(spec.entries))
        if d.total_dim <= d.state_dim:
            raise DictionaryError("dictionary must lift: total_dim > state_dim")
    return d


def lift(dictionary: ObservableDictionary, x: np.ndarray) -> np.ndarray:
    """Evaluate z = Phi(x). Accepts a single state (n,) or a batch (..., n)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != dictionary.state_dim:
        raise DictionaryError(f"state has dim {x.shape[-1]}, expected {dictionary.state_dim}")
    if not np.all(np.isfinite(x)):
        raise DictionaryError("non-finite state passed to lift")
    cols = [e.value(x) for e in dictionary.entries]
    return np.stack(cols, axis=-1)


def lift_jacobian(dictionary: ObservableDictionary, x: np.ndarray) -> np.ndarray:
    """Evaluate DPhi(x): (r, n) for a single state, (..., r, n) for batches."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DictionaryError("non-finite state passed to lift_jacobian")
    rows = [e.grad(x) for e in dictionary.entries]
    return np.stack(rows, axis=-2)


def output_matrix(dictionary: ObservableDictionary, measured_state_indices: Sequence[int]) -> np.ndarray:
    """Selector C_o picking the identity entries of the measured coordinates."""
    r = dictionary.total_dim
    C = np.zeros((len(measured_state_indices), r))
    for row, idx in enumerate(measured_state_indices):
        if not (0 <= idx < dictionary.state_dim):
            raise DictionaryError(f"measured index {idx} out of range")
        C[row, idx] = 1.0
    return C
