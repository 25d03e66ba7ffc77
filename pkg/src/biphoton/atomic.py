"""Atomic constants, level schemes, Clebsch-Gordan coefficients and structure matrices.

Frequencies are stored in rad/s; the Zeeman simulator rescales them to units of
the D1 linewidth at its boundary.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import scipy.constants as sc

from .errors import ConfigurationError

__all__ = [
    "PhysicalConstants",
    "CONSTANTS",
    "Manifold",
    "ZeemanState",
    "DipoleTable",
    "LevelScheme",
    "clebsch_gordan",
    "cg_coefficient",
    "build_structure_matrices",
    "default_scheme",
]


@dataclass(frozen=True)
class PhysicalConstants:
    hbar: float
    epsilon0: float
    c: float

    def __post_init__(self):
        if min(self.hbar, self.epsilon0, self.c) <= 0:
            raise ConfigurationError("physical constants must be positive")


CONSTANTS = PhysicalConstants(hbar=sc.hbar, epsilon0=sc.epsilon_0, c=sc.c)


# ---------------------------------------------------------------------------
# angular momentum coupling
# ---------------------------------------------------------------------------

def _twice(x) -> int:
    t = round(2 * x)
    if abs(2 * x - t) > 1e-9:
        raise ValueError(f"{x} is not an integer or half-integer")
    return t


@lru_cache(maxsize=4096)
def _cg_doubled(j1: int, m1: int, j2: int, m2: int, J: int, M: int) -> float:
    # all arguments are twice the physical quantum numbers
    if m1 + m2 != M:
        return 0.0
    if abs(m1) > j1 or abs(m2) > j2 or abs(M) > J:
        return 0.0
    if J < abs(j1 - j2) or J > j1 + j2:
        return 0.0
    if (j1 + m1) % 2 or (j2 + m2) % 2 or (J + M) % 2 or (j1 + j2 + J) % 2:
        return 0.0

    f = math.factorial

    def h(x: int) -> int:
        return x // 2

    pre = (
        (J + 1)
        * f(h(J + j1 - j2))
        * f(h(J - j1 + j2))
        * f(h(j1 + j2 - J))
        / f(h(j1 + j2 + J) + 1)
    )
    pre *= (
        f(h(J + M)) * f(h(J - M))
        * f(h(j1 - m1)) * f(h(j1 + m1))
        * f(h(j2 - m2)) * f(h(j2 + m2))
    )
    total = 0.0
    for k in range(0, h(j1 + j2 - J) + 1):
        args = (
            h(j1 + j2 - J) - k,
            h(j1 - m1) - k,
            h(j2 + m2) - k,
            h(J - j2 + m1) + k,
            h(J - j1 - m2) + k,
        )
        if min(args) < 0:
            continue
        denom = f(k)
        for a in args:
            denom *= f(a)
        total += (-1) ** k / denom
    return math.sqrt(pre) * total


def cg_coefficient(j1, m1, j2, m2, J, M) -> float:
    """<j1 m1; j2 m2 | J M> in the Condon-Shortley convention (Racah's formula)."""
    return _cg_doubled(_twice(j1), _twice(m1), _twice(j2), _twice(m2), _twice(J), _twice(M))


def clebsch_gordan(F_e: int, M_e: int, F_g: int, M_g: int) -> float:
    """Coupling of ground |F_g, M_g> and a photon with q = M_e - M_g into |F_e, M_e>.

    Returns zero whenever the dipole selection rules (|dF| <= 1, |q| <= 1) fail.
    """
    q = M_e - M_g
    if abs(q) > 1 or abs(F_e - F_g) > 1:
        return 0.0
    return cg_coefficient(F_g, M_g, 1, q, F_e, M_e)


# ---------------------------------------------------------------------------
# level scheme
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Manifold:
    label: str
    kind: str  # "ground" or "excited"
    F: int
    energy: float = 0.0  # units of Gamma_D1, informational only
    line: str | None = None

    def __post_init__(self):
        if self.kind not in ("ground", "excited"):
            raise ConfigurationError(f"manifold {self.label!r}: kind must be ground or excited")
        if self.F < 0 or int(self.F) != self.F:
            raise ConfigurationError(f"manifold {self.label!r}: F must be a non-negative integer")
        if self.kind == "excited" and self.line is None:
            raise ConfigurationError(f"excited manifold {self.label!r} needs a line identifier")

    @property
    def size(self) -> int:
        return 2 * self.F + 1


@dataclass(frozen=True)
class ZeemanState:
    manifold: str
    F: int
    M: int

    def __post_init__(self):
        if abs(self.M) > self.F:
            raise ConfigurationError(f"|M|={abs(self.M)} exceeds F={self.F}")


@dataclass(frozen=True)
class DipoleTable:
    """Reduced dipole elements of the four double-Lambda transitions plus hyperfine branching.

    ``branching[(excited, ground)]`` is the fraction of spontaneous decay from the
    excited manifold into the ground manifold; the Zeeman coupling factor of a pair
    of sublevels is ``sqrt(branching) * clebsch_gordan``.
    """

    mu13: float
    mu32: float
    mu24: float
    mu41: float
    branching: Mapping[tuple[str, str], float] = field(default_factory=dict)

    def __post_init__(self):
        if min(self.mu13, self.mu32, self.mu24, self.mu41) < 0:
            raise ConfigurationError("dipole elements must be non-negative")
        for key, b in self.branching.items():
            if not 0.0 <= b <= 1.0:
                raise ConfigurationError(f"branching {key} = {b} outside [0, 1]")

    def reduced(self, ground: str, excited: str) -> float:
        key = "".join(sorted((ground, excited)))
        table = {"13": self.mu13, "23": self.mu32, "24": self.mu24, "14": self.mu41}
        try:
            return table[key]
        except KeyError:
            raise ConfigurationError(f"no dipole element for |{ground}> <-> |{excited}>") from None

    def coupling(self, excited: ZeemanState, ground: ZeemanState) -> float:
        b = self.branching.get((excited.manifold, ground.manifold), 1.0)
        return math.sqrt(b) * clebsch_gordan(excited.F, excited.M, ground.F, ground.M)


@dataclass(frozen=True)
class LevelScheme:
    ground: tuple[Manifold, ...]
    excited: tuple[Manifold, ...]
    gamma_d1: float
    gamma_d2: float
    gamma12: float
    detuning: float
    wavelengths: Mapping[str, float]
    dipoles: DipoleTable

    def __post_init__(self):
        if self.gamma_d1 <= 0 or self.gamma_d2 <= 0:
            raise ConfigurationError("decay rates must be positive")
        if self.gamma12 < 0:
            raise ConfigurationError("ground-state decoherence must be non-negative")
        if any(m.kind != "ground" for m in self.ground) or any(m.kind != "excited" for m in self.excited):
            raise ConfigurationError("manifold kinds do not match their position in the scheme")
        labels = [m.label for m in self.ground + self.excited]
        if len(set(labels)) != len(labels):
            raise ConfigurationError("manifold labels must be unique")

    # -- bookkeeping -------------------------------------------------------
    @staticmethod
    def _states(manifolds: Iterable[Manifold]) -> list[ZeemanState]:
        return [ZeemanState(m.label, m.F, M) for m in manifolds for M in range(-m.F, m.F + 1)]

    def ground_states(self) -> list[ZeemanState]:
        return self._states(self.ground)

    def excited_states(self) -> list[ZeemanState]:
        return self._states(self.excited)

    @property
    def n_ground(self) -> int:
        return sum(m.size for m in self.ground)

    @property
    def n_excited(self) -> int:
        return sum(m.size for m in self.excited)

    @property
    def n_states(self) -> int:
        return self.n_ground + self.n_excited

    def manifold(self, label: str) -> Manifold:
        for m in self.ground + self.excited:
            if m.label == label:
                return m
        raise ConfigurationError(f"unknown manifold {label!r}")

    def linewidth(self, excited_label: str) -> float:
        line = self.manifold(excited_label).line
        return self.gamma_d1 if line == "D1" else self.gamma_d2

    def wavelength(self, excited_label: str) -> float:
        return self.wavelengths[self.manifold(excited_label).line]

    # -- serialization -----------------------------------------------------
    @classmethod
    def from_dict(cls, doc: Mapping) -> "LevelScheme":
        try:
            manifolds = [
                Manifold(
                    label=str(m["label"]),
                    kind=m["kind"],
                    F=int(m["F"]),
                    energy=float(m.get("energy", 0.0)),
                    line=m.get("line"),
                )
                for m in doc["manifolds"]
            ]
            branching = {}
            for key, value in doc.get("branching", {}).items():
                exc, gnd = key.split("->")
                branching[(exc.strip(), gnd.strip())] = float(value)
            dip = doc["dipoles"]
            dipoles = DipoleTable(
                mu13=float(dip["13"]),
                mu32=float(dip["32"]),
                mu24=float(dip["24"]),
                mu41=float(dip["41"]),
                branching=branching,
            )
            return cls(
                ground=tuple(m for m in manifolds if m.kind == "ground"),
                excited=tuple(m for m in manifolds if m.kind == "excited"),
                gamma_d1=float(doc["decay_rates"]["D1"]),
                gamma_d2=float(doc["decay_rates"]["D2"]),
                gamma12=float(doc["gamma12"]),
                detuning=float(doc.get("detunings", {}).get("pump", 0.0)),
                wavelengths={k: float(v) for k, v in doc["wavelengths"].items()},
                dipoles=dipoles,
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise ConfigurationError(f"malformed level-scheme document: {exc}") from exc

    @classmethod
    def from_json(cls, path: str | Path) -> "LevelScheme":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        manifolds = []
        for m in self.ground + self.excited:
            entry = {"label": m.label, "kind": m.kind, "F": m.F, "energy": m.energy}
            if m.line is not None:
                entry["line"] = m.line
            manifolds.append(entry)
        d = self.dipoles
        return {
            "manifolds": manifolds,
            "decay_rates": {"D1": self.gamma_d1, "D2": self.gamma_d2},
            "gamma12": self.gamma12,
            "detunings": {"pump": self.detuning},
            "wavelengths": dict(self.wavelengths),
            "dipoles": {"13": d.mu13, "32": d.mu32, "24": d.mu24, "41": d.mu41},
            "branching": {f"{e}->{g}": b for (e, g), b in d.branching.items()},
        }

    def replace(self, **changes) -> "LevelScheme":
        from dataclasses import replace

        return replace(self, **changes)


def default_scheme() -> LevelScheme:
    """The shipped 16-state 87Rb scheme (|3> = D1 F'=1, |4> = D2 F'=2)."""
    text = resources.files("biphoton.data").joinpath("rb87_double_lambda.json").read_text("utf-8")
    return LevelScheme.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# structure matrices
# ---------------------------------------------------------------------------

def build_structure_matrices(scheme: LevelScheme, branching: bool = True):
    """Return ``(C_ge, R_g, gamma)`` for the Zeeman density-matrix equations.

    ``C_ge`` has shape (n_ground, n_excited) and ``C_eg = C_ge.T`` (real entries).
    With ``branching=False`` the entries are bare Clebsch-Gordan coefficients;
    the default weights them by the hyperfine branching ratio so that every
    excited sublevel decays at exactly Gamma.
    ``gamma`` is in the same units as ``scheme.gamma12``.
    """
    ground = scheme.ground_states()
    excited = scheme.excited_states()
    if len(ground) != scheme.n_ground or len(excited) != scheme.n_excited:
        raise ConfigurationError("Zeeman state count does not match the manifolds")

    C_eg = np.zeros((len(excited), len(ground)))
    for i, e in enumerate(excited):
        for j, g in enumerate(ground):
            if branching:
                key = (e.manifold, g.manifold)
                if key not in scheme.dipoles.branching and abs(e.F - g.F) <= 1:
                    raise ConfigurationError(f"missing branching ratio for {key[0]}->{key[1]}")
                C_eg[i, j] = scheme.dipoles.coupling(e, g)
            else:
                C_eg[i, j] = clebsch_gordan(e.F, e.M, g.F, g.M)

    keys = [(g.manifold, g.F) for g in ground]
    R_g = np.array([[1.0 if a == b else 0.0 for b in keys] for a in keys])

    ids = [(g.manifold, g.F, g.M) for g in ground]
    gamma = np.array([[0.0 if a == b else scheme.gamma12 for b in ids] for a in ids])
    return C_eg.T.copy(), R_g, gamma
