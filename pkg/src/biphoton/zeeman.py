"""Stochastic Maxwell-Bloch simulation of SFWM with Zeeman structure and polarization.

Units: time in ``1/Gamma``, frequencies and Rabi frequencies in ``Gamma``, and
position in units of the medium length (``zeta = z/L`` on ``[0, 1]``). Field
amplitudes are Rabi frequencies ``mu E / hbar`` of the transition they drive,
with ``mu`` the effective dipole of that transition. Polarizations are
expressed in the circular basis ``(sigma+, sigma-)`` for light travelling
along the quantization axis.

The density matrix is stored as blocks ``gg`` (ground), ``eg`` (optical
coherences) and ``ee`` (excited) on every z node. Fields follow the atoms
adiabatically: at each right-hand-side evaluation the generated fields are
rebuilt from the boundary values by cumulative Simpson integration of the
polarization source along z.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.integrate import cumulative_simpson

from .atomic import LevelScheme, build_structure_matrices, default_scheme
from .errors import ConfigurationError, StiffnessError

__all__ = [
    "MODES",
    "POLARIZATIONS",
    "DensityMatrixBlocks",
    "MaxwellBlochModel",
    "SimConfig",
    "KMStep",
    "Trajectory",
    "EnsembleResult",
    "polarization_vector",
    "to_linear",
    "vacuum_seed_step",
    "coupled_rhs",
    "density_rhs",
    "rabi_operator",
    "trajectory_rng",
    "propagate_fields",
    "kutta_merson_step",
    "integrate",
    "build_model",
    "initial_state",
    "run_trajectory",
    "polarization_extinction",
    "extinction_db",
    "run_ensemble",
]

MODES = ("P+", "P-", "C+", "C-", "S+", "S-", "AS+", "AS-")
# (ground manifold, excited manifold) of each field
TRANSITIONS = {"P": ("1", "4"), "C": ("2", "3"), "S": ("2", "4"), "AS": ("1", "3")}
SQ2 = math.sqrt(0.5)
# (sigma+, sigma-) components of the linear basis vectors
POLARIZATIONS = {
    "H": np.array([-SQ2, SQ2], dtype=complex),
    "V": np.array([1j * SQ2, 1j * SQ2], dtype=complex),
    "sigma+": np.array([1.0, 0.0], dtype=complex),
    "sigma-": np.array([0.0, 1.0], dtype=complex),
}


def polarization_vector(pol) -> np.ndarray:
    """Normalized ``(sigma+, sigma-)`` amplitudes from a name or a 2-vector."""
    if isinstance(pol, str):
        try:
            return POLARIZATIONS[pol].copy()
        except KeyError:
            raise ConfigurationError(f"unknown polarization {pol!r}") from None
    v = np.asarray(pol, dtype=complex)
    if v.shape != (2,) or np.linalg.norm(v) == 0:
        raise ConfigurationError("polarization must be a non-zero 2-vector")
    return v / np.linalg.norm(v)


def to_linear(circ: np.ndarray) -> np.ndarray:
    """Project ``(..., 2)`` circular amplitudes onto ``(H, V)``."""
    basis = np.stack([POLARIZATIONS["H"], POLARIZATIONS["V"]])
    return np.asarray(circ) @ basis.conj().T


# ---------------------------------------------------------------------------
# density matrix and model
# ---------------------------------------------------------------------------

@dataclass
class DensityMatrixBlocks:
    """Block density matrix on every z node, arrays of shape ``(nz, a, b)``."""

    gg: np.ndarray
    eg: np.ndarray
    ee: np.ndarray

    @property
    def ge(self) -> np.ndarray:
        return np.conj(np.swapaxes(self.eg, -1, -2))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.gg.shape[0], self.gg.shape[1], self.ee.shape[1]

    def trace(self) -> np.ndarray:
        return (np.trace(self.gg, axis1=1, axis2=2) + np.trace(self.ee, axis1=1, axis2=2)).real

    def full(self) -> np.ndarray:
        """Full ``(nz, n, n)`` matrices with ground states first."""
        top = np.concatenate([self.gg, self.ge], axis=2)
        bottom = np.concatenate([self.eg, self.ee], axis=2)
        return np.concatenate([top, bottom], axis=1)

    def hermiticity_error(self) -> float:
        def dev(a):
            return float(np.max(np.abs(a - np.conj(np.swapaxes(a, -1, -2))))) if a.size else 0.0

        return max(dev(self.gg), dev(self.ee))

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.full()).min())

    def pack(self) -> np.ndarray:
        return np.concatenate([self.gg.ravel(), self.eg.ravel(), self.ee.ravel()])

    @classmethod
    def unpack(cls, y: np.ndarray, nz: int, ng: int, ne: int) -> "DensityMatrixBlocks":
        a = nz * ng * ng
        b = a + nz * ne * ng
        return cls(y[:a].reshape(nz, ng, ng), y[a:b].reshape(nz, ne, ng), y[b:].reshape(nz, ne, ne))


@dataclass(frozen=True)
class MaxwellBlochModel:
    """Matrices defining the atom-field equations in ``Gamma`` units.

    Parameters
    ----------
    C_ge : (ng, ne) array
        Decay coupling matrix; ``C_eg = C_ge.T``.
    R_g : (ng, ng) array
        Repopulation mask (1 within a hyperfine manifold).
    gamma : (ng, ng) array
        Ground-state decoherence rates.
    delta_g, delta_e : arrays
        Diagonal detunings of the ground and excited states in the rotating frame.
    modes : (nm, ne, ng) array
        Coupling matrix of each field mode: ``Omega_eg = sum_m E_m modes[m]``.
    coupling : (nm,) array
        Propagation constant ``b_m``: a two-level probe with unit coupling
        decays as ``exp(-b_m zeta)`` on resonance, i.e. ``b_m = OD_m / 2``.
    propagate : (nm,) bool array
        Modes rebuilt from the atomic source; the others are held at their
        boundary value along z.
    names : tuple of str
        Mode labels.
    secular : (ne, ne) array or None
        Mask applied to excited-state products in the decay terms. Entries
        between excited levels of different optical lines are zero when those
        levels are far apart in frequency; ``None`` keeps every product.
    channels : (nq, ng, ne) array or None
        Decay couplings split by the polarization of the emitted photon, with
        ``sum(channels) == C_ge``. When given, the decay and repopulation
        terms are summed over channels (``sum_q C_q^T C_q`` and
        ``sum_q C_q rho_ee C_q^T``) so that photons of different polarization
        do not interfere; ``None`` uses ``C_ge`` as a single channel.
    """

    C_ge: np.ndarray
    R_g: np.ndarray
    gamma: np.ndarray
    delta_g: np.ndarray
    delta_e: np.ndarray
    modes: np.ndarray
    coupling: np.ndarray
    propagate: np.ndarray
    names: tuple = ()
    secular: np.ndarray | None = None
    channels: np.ndarray | None = None

    def __post_init__(self):
        ng, ne = self.C_ge.shape
        if self.R_g.shape != (ng, ng) or self.gamma.shape != (ng, ng):
            raise ConfigurationError("R_g and gamma must be square over the ground states")
        if self.delta_g.shape != (ng,) or self.delta_e.shape != (ne,):
            raise ConfigurationError("detuning vectors do not match the state counts")
        if self.modes.ndim != 3 or self.modes.shape[1:] != (ne, ng):
            raise ConfigurationError("mode matrices must have shape (n_modes, n_excited, n_ground)")
        nm = self.modes.shape[0]
        if self.coupling.shape != (nm,) or self.propagate.shape != (nm,):
            raise ConfigurationError("coupling and propagate flags need one entry per mode")
        mask = np.ones((ne, ne)) if self.secular is None else np.asarray(self.secular, dtype=float)
        if mask.shape != (ne, ne):
            raise ConfigurationError("secular mask must be n_excited x n_excited")
        chans = self.C_ge[None] if self.channels is None else np.asarray(self.channels, dtype=float)
        if chans.ndim != 3 or chans.shape[1:] != (ng, ne) or not np.allclose(chans.sum(axis=0), self.C_ge):
            raise ConfigurationError("decay channels must be (nq, ng, ne) and sum to C_ge")
        object.__setattr__(self, "_mask", mask)
        object.__setattr__(self, "_chans", chans)
        object.__setattr__(self, "_decay", np.einsum("qge,qgf->ef", chans, chans) * mask)

    @property
    def n_ground(self) -> int:
        return self.C_ge.shape[0]

    @property
    def n_excited(self) -> int:
        return self.C_ge.shape[1]

    @property
    def decay(self) -> np.ndarray:
        """``sum_q C_q^T C_q`` (masked): excited-state decay matrix in units of Gamma."""
        return self._decay

    def repopulation(self, ee: np.ndarray) -> np.ndarray:
        """Ground-state feeding ``R_g o sum_q C_q (rho_ee o mask) C_q^T`` for ``(..., ne, ne)``."""
        ee = ee * self._mask
        out = sum(c @ ee @ c.T for c in self._chans)
        return self.R_g * out

    def index(self, name: str) -> int:
        return self.names.index(name)


class _Engine:
    """Precomputed full-matrix form of the equations on a fixed z grid.

    With ``H = diag(delta_g, delta_e) + Omega/2`` and ``D = diag(0, C_eg C_ge)``
    the block equations are ``rho' = -(K rho + (K rho)^dagger) + J(rho)`` with
    ``K = iH + D/2`` and ``J`` the ground-state repopulation and decoherence.
    """

    def __init__(self, model: MaxwellBlochModel, nz: int):
        if nz < 3 or nz % 2 == 0:
            raise ConfigurationError("Simpson propagation needs an odd number (>= 3) of z nodes")
        self.model, self.nz = model, nz
        ng, ne = model.n_ground, model.n_excited
        self.ng, self.ne, self.n = ng, ne, ng + ne
        nm = model.modes.shape[0]
        self.flat = model.modes.reshape(nm, ne * ng)
        self.prop = np.flatnonzero(model.propagate)
        self.src = (-1j * model.coupling[self.prop, None] * self.flat[self.prop]).T  # (ne*ng, np)
        dx = 1.0 / (nz - 1)
        # cumulative Simpson is linear in the samples: build its matrix once
        self.cum = cumulative_simpson(np.eye(nz), dx=dx, axis=0, initial=0)
        self.k0 = np.zeros((self.n, self.n), complex)
        self.k0[np.arange(self.n), np.arange(self.n)] = 1j * np.concatenate([model.delta_g, model.delta_e])
        self.k0[ng:, ng:] += 0.5 * model.decay

    def fields(self, rho: np.ndarray, boundary: np.ndarray) -> np.ndarray:
        out = np.repeat(np.asarray(boundary, complex)[:, None], self.nz, axis=1)
        if self.prop.size:
            eg = rho[:, self.ng:, : self.ng].reshape(self.nz, -1)
            out[self.prop] += (self.cum @ (eg @ self.src)).T
        return out

    def rhs(self, rho: np.ndarray, fields: np.ndarray) -> np.ndarray:
        ng = self.ng
        omega_eg = (fields.T @ self.flat).reshape(self.nz, self.ne, ng)
        K = np.repeat(self.k0[None], self.nz, axis=0)
        K[:, ng:, :ng] += 0.5j * omega_eg
        K[:, :ng, ng:] += 0.5j * np.conj(np.swapaxes(omega_eg, 1, 2))
        X = K @ rho
        d = -(X + np.conj(np.swapaxes(X, 1, 2)))
        d[:, :ng, :ng] += self.model.repopulation(rho[:, ng:, ng:]) - self.model.gamma * rho[:, :ng, :ng]
        return d


def coupled_rhs(model: MaxwellBlochModel, boundary: np.ndarray, nz: int):
    """Right-hand side ``f(t, y)`` of the coupled atom-field system.

    ``y`` is the flattened ``(nz, n, n)`` full density matrix (ground states
    first). Fields are rebuilt from ``boundary`` at every call, so ``boundary``
    may be mutated between steps. Returns ``(f, fields)`` where
    ``fields(y)`` gives the ``(n_modes, nz)`` amplitudes for a state.
    """
    engine = _Engine(model, nz)
    boundary = np.asarray(boundary)
    n = engine.n

    def f(t, y):
        rho = y.reshape(nz, n, n)
        return engine.rhs(rho, engine.fields(rho, boundary)).ravel()

    def fields(y):
        return engine.fields(y.reshape(nz, n, n), boundary)

    return f, fields


def density_rhs(rho: DensityMatrixBlocks, omega_eg: np.ndarray, model: MaxwellBlochModel) -> DensityMatrixBlocks:
    """Time derivative of the block density matrix.

    ``omega_eg`` holds the Rabi operator block on every node, shape ``(nz, ne, ng)``.
    Implements::

        d rho_gg = i[rho_gg, Dg] + i/2 (rho_ge W_eg - W_ge rho_eg) + R_g o (C_ge rho_ee C_eg) - gamma o rho_gg
        d rho_eg = i(rho_eg Dg - De rho_eg) + i/2 (rho_ee W_eg - W_eg rho_gg) - 1/2 (C_eg C_ge) rho_eg
        d rho_ee = i[rho_ee, De] + i/2 (rho_eg W_ge - W_eg rho_ge) - 1/2 {C_eg C_ge, rho_ee}

    with ``W`` the Rabi operator and ``o`` the element-wise product. The
    products ``C_ge rho_ee C_eg`` and ``C_eg C_ge`` are evaluated per decay
    channel and masked as described in :class:`MaxwellBlochModel`.
    """
    nz, ng, ne = rho.shape
    if rho.eg.shape != (nz, ne, ng) or rho.ee.shape != (nz, ne, ne) or omega_eg.shape != (nz, ne, ng):
        raise ConfigurationError("density blocks and Rabi operator shapes disagree")
    if (ng, ne) != model.C_ge.shape:
        raise ConfigurationError("density blocks do not match the model's state counts")
    gg, eg, ee = rho.gg, rho.eg, rho.ee
    ge = rho.ge
    omega_ge = np.conj(np.swapaxes(omega_eg, -1, -2))
    dg, de = model.delta_g, model.delta_e
    decay = model.decay

    d_gg = 1j * (gg * dg[None, None, :] - dg[None, :, None] * gg)
    d_gg += 0.5j * (ge @ omega_eg - omega_ge @ eg)
    d_gg += model.repopulation(ee)
    d_gg -= model.gamma * gg

    d_eg = 1j * (eg * dg[None, None, :] - de[None, :, None] * eg)
    d_eg += 0.5j * (ee @ omega_eg - omega_eg @ gg)
    d_eg -= 0.5 * (decay @ eg)

    d_ee = 1j * (ee * de[None, None, :] - de[None, :, None] * ee)
    d_ee += 0.5j * (eg @ omega_ge - omega_eg @ ge)
    d_ee -= 0.5 * (decay @ ee + ee @ decay)
    return DensityMatrixBlocks(d_gg, d_eg, d_ee)


def propagate_fields(rho_eg: np.ndarray, boundary: np.ndarray, model: MaxwellBlochModel) -> np.ndarray:
    """Mode amplitudes on the z grid, shape ``(n_modes, nz)``.

    Propagated modes obey ``dE_m/dzeta = -i b_m tr[C^m_ge rho_eg]`` and are
    integrated from ``boundary`` with the cumulative Simpson rule; held modes
    keep their boundary value.
    """
    nz = rho_eg.shape[0]
    if nz < 3 or nz % 2 == 0:
        raise ConfigurationError("Simpson propagation needs an odd number (>= 3) of z nodes")
    boundary = np.asarray(boundary, dtype=complex)
    if boundary.shape != (model.modes.shape[0],):
        raise ConfigurationError("one boundary amplitude per mode is required")
    if rho_eg.shape[1:] != model.modes.shape[1:]:
        raise ConfigurationError("coherence block does not match the model")
    out = np.repeat(boundary[:, None], nz, axis=1)
    idx = np.flatnonzero(model.propagate)
    if idx.size:
        source = -1j * model.coupling[idx, None] * np.einsum("zeg,meg->mz", rho_eg, model.modes[idx])
        # cumulative_simpson works on real data only
        dx = 1.0 / (nz - 1)
        out[idx] += cumulative_simpson(source.real, dx=dx, axis=-1, initial=0)
        out[idx] += 1j * cumulative_simpson(source.imag, dx=dx, axis=-1, initial=0)
    return out


def rabi_operator(fields: np.ndarray, model: MaxwellBlochModel) -> np.ndarray:
    """``Omega_eg`` on every node from ``(n_modes, nz)`` amplitudes."""
    return np.einsum("mz,meg->zeg", fields, model.modes)


# ---------------------------------------------------------------------------
# integrators
# ---------------------------------------------------------------------------

@dataclass
class KMStep:
    y: np.ndarray
    t: float
    dt_next: float
    error: float
    accepted: bool


def _max_norm(v: np.ndarray) -> float:
    return float(np.max(np.abs(v))) if v.size else 0.0


def kutta_merson_step(rhs, t: float, y: np.ndarray, dt: float, tol: float, norm=None,
                      safety: float = 0.9, grow: float = 5.0, shrink: float = 0.2) -> KMStep:
    """One adaptive Kutta-Merson step.

    Stages are slopes (``h = dt``)::

        k1 = f(t, y)
        k2 = f(t + h/3, y + h k1/3)
        k3 = f(t + h/3, y + h (k1 + k2)/6)
        k4 = f(t + h/2, y + h (k1 + 3 k3)/8)
        k5 = f(t + h,   y + h (k1 - 3 k3 + 4 k4)/2)
        y_new = y + h (k1 + 4 k4 + k5)/6
        err   = norm((2 k1 - 9 k3 + 8 k4 - k5)/30)

    ``err`` is the estimated local error per unit step (the local error
    divided by ``h``), so the global error over a fixed interval is
    proportional to ``tol``. The step is accepted iff ``err <= tol`` (max-norm
    by default); the next step is ``dt * clip(safety (tol/err)^(1/4), shrink, grow)``.
    """
    if tol <= 0:
        raise ConfigurationError("tolerance must be positive")
    if dt <= 0:
        raise ConfigurationError("step must be positive")
    norm = norm or _max_norm
    h = dt
    k1 = rhs(t, y)
    k2 = rhs(t + h / 3, y + h * k1 / 3)
    k3 = rhs(t + h / 3, y + h * (k1 + k2) / 6)
    k4 = rhs(t + h / 2, y + h * (k1 + 3 * k3) / 8)
    k5 = rhs(t + h, y + h * (k1 - 3 * k3 + 4 * k4) / 2)
    err = norm((2 * k1 - 9 * k3 + 8 * k4 - k5) / 30)
    factor = grow if err == 0 else min(grow, max(shrink, safety * (tol / err) ** 0.25))
    if err <= tol:
        return KMStep(y + h * (k1 + 4 * k4 + k5) / 6, t + h, dt * factor, err, True)
    return KMStep(y, t, dt * factor, err, False)


def integrate(rhs, y0, t_span: tuple[float, float], tol: float = 1e-6, dt0: float = 1e-3,
              dt_min: float = 1e-12, dt_max: float = math.inf, norm=None, on_step=None):
    """Integrate ``y' = rhs(t, y)`` over ``t_span`` with adaptive Kutta-Merson steps.

    ``on_step(t, y, dt)`` is called after every accepted step and may return a
    replacement state. Returns ``(t, y, n_accepted, n_rejected)``.
    """
    t, t_end = float(t_span[0]), float(t_span[1])
    y = np.array(y0, copy=True)
    dt = min(dt0, dt_max)
    accepted = rejected = 0
    while t < t_end:
        h = min(dt, t_end - t)
        if h < dt_min and t_end - t > dt_min:
            raise StiffnessError(f"step size {h:.3e} fell below the minimum {dt_min:.3e} at t={t:.6g}")
        step = kutta_merson_step(rhs, t, y, h, tol, norm)
        dt = min(step.dt_next, dt_max)
        if not step.accepted:
            rejected += 1
            if dt < dt_min:
                raise StiffnessError(f"step size {dt:.3e} fell below the minimum {dt_min:.3e} at t={t:.6g}")
            continue
        accepted += 1
        t, y = (t_end if t_end - step.t < 1e-14 * max(1.0, abs(t_end)) else step.t), step.y
        if on_step is not None:
            new = on_step(t, y, h)
            if new is not None:
                y = new
    return t, y, accepted, rejected


def vacuum_seed_step(prev: np.ndarray, dt: float, rng: np.random.Generator, e_vacuum: float,
                     rate: float = 1.0) -> np.ndarray:
    """Ornstein-Uhlenbeck update of the two circular Stokes boundary amplitudes.

    ``E(t+dt) = E(t) exp(-rate dt/2) + nu E_vac sqrt(1 - exp(-rate dt))`` with
    ``nu`` standard complex Gaussian (``<|nu|^2> = 1``), independently per
    component. ``prev`` may carry leading batch axes.
    """
    if dt <= 0:
        raise ConfigurationError("time step must be positive")
    prev = np.asarray(prev)
    nu = (rng.standard_normal(prev.shape) + 1j * rng.standard_normal(prev.shape)) * SQ2
    return prev * math.exp(-0.5 * rate * dt) + nu * e_vacuum * math.sqrt(-math.expm1(-rate * dt))


# ---------------------------------------------------------------------------
# configuration and the 16-level model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    """Settings of one stochastic SFWM run (``Gamma`` units, see module docstring).

    ``od`` is the resonant optical depth of the anti-Stokes transition for unit
    coupling; the other transitions scale with ``k mu^2``.
    """

    z_nodes: int = 61
    dt_max: float = 0.05
    dt_min: float = 1e-9
    tol: float = 1e-6
    seed: int = 0
    e_vacuum: float = 1e-5
    duration: float = 50.0
    trajectories: int = 50
    od: float = 15.0
    omega_p: float = 5.0
    omega_c: float = 2.8
    pump_polarization: object = "H"
    control_polarization: object = "V"
    detuning: float | None = None  # pump detuning from |4>; scheme value if None
    two_photon_detuning: float = 0.0
    deplete: bool = False
    initial_populations: tuple | None = None
    extinction_cap_db: float = 60.0

    def __post_init__(self):
        if self.z_nodes < 3 or self.z_nodes % 2 == 0:
            raise ConfigurationError("z_nodes must be odd and at least 3")
        if not 0 < self.dt_max <= 0.2:
            raise ConfigurationError("dt_max must be positive and well below 1/Gamma")
        if self.tol <= 0 or self.dt_min <= 0:
            raise ConfigurationError("tol and dt_min must be positive")
        if self.duration <= 0 or self.trajectories < 1:
            raise ConfigurationError("duration and trajectory count must be positive")
        if self.e_vacuum <= 0 or self.od < 0:
            raise ConfigurationError("e_vacuum must be positive and od non-negative")
        polarization_vector(self.pump_polarization)
        polarization_vector(self.control_polarization)

    def replace(self, **changes) -> "SimConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("pump_polarization", "control_polarization"):
            v = d[key]
            if not isinstance(v, str):
                d[key] = [[complex(c).real, complex(c).imag] for c in v]
        if d["initial_populations"] is not None:
            d["initial_populations"] = list(d["initial_populations"])
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "SimConfig":
        doc = dict(doc)
        for key in ("pump_polarization", "control_polarization"):
            v = doc.get(key)
            if isinstance(v, list):
                doc[key] = tuple(complex(re, im) for re, im in v)
        if doc.get("initial_populations") is not None:
            doc["initial_populations"] = tuple(doc["initial_populations"])
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigurationError(f"bad simulation config: {exc}") from None


def build_model(scheme: LevelScheme, config: SimConfig) -> MaxwellBlochModel:
    """Sixteen-level model with the eight circular modes of pump, control, S and AS."""
    gamma_unit = scheme.gamma_d1
    C_ge, R_g, gamma = build_structure_matrices(scheme)
    ground, excited = scheme.ground_states(), scheme.excited_states()
    ng, ne = len(ground), len(excited)

    detuning = scheme.detuning / scheme.gamma_d2 if config.detuning is None else config.detuning
    # rotating frame: |1> at 0, |4> follows the pump, |2> the pump minus Stokes, |3> adds the control
    level_shift = {"1": 0.0, "2": -config.two_photon_detuning, "3": -config.two_photon_detuning, "4": -detuning}
    delta_g = np.array([level_shift[g.manifold] for g in ground])
    delta_e = np.array([level_shift[e.manifold] for e in excited])

    mats, coupling, names = [], [], []
    dip = scheme.dipoles
    k_as = 2 * math.pi / scheme.wavelength("3")
    ref = k_as * dip.reduced("1", "3") ** 2
    for field_name in ("P", "C", "S", "AS"):
        g_label, e_label = TRANSITIONS[field_name]
        k = 2 * math.pi / scheme.wavelength(e_label)
        b = 0.5 * config.od * k * dip.reduced(g_label, e_label) ** 2 / ref
        for q, sign in ((1, "+"), (-1, "-")):
            m = np.zeros((ne, ng))
            for i, e in enumerate(excited):
                for j, g in enumerate(ground):
                    if e.manifold == e_label and g.manifold == g_label and e.M - g.M == q:
                        m[i, j] = C_ge[j, i]
            mats.append(m)
            coupling.append(b)
            names.append(f"{field_name}{sign}")
    propagate = np.array([config.deplete] * 4 + [True] * 4)
    lines = np.array([scheme.manifold(e.manifold).line for e in excited])
    secular = (lines[:, None] == lines[None, :]).astype(float)
    # each excited level decays at the rate of its own optical line
    rates = np.array([scheme.linewidth(e.manifold) for e in excited]) / gamma_unit
    C_decay = C_ge * np.sqrt(rates)[None, :]
    dm = np.array([[e.M - g.M for e in excited] for g in ground])
    channels = np.array([np.where(dm == q, C_decay, 0.0) for q in (-1, 0, 1)])
    return MaxwellBlochModel(C_decay, R_g, gamma / gamma_unit, delta_g, delta_e, np.array(mats), np.array(coupling),
                             propagate, tuple(names), secular, channels)


def initial_state(scheme: LevelScheme, config: SimConfig) -> DensityMatrixBlocks:
    """Ground populations spread uniformly over ``|F=1>`` unless configured."""
    ground = scheme.ground_states()
    ng, ne = len(ground), scheme.n_excited
    if config.initial_populations is None:
        pops = np.array([1.0 if g.manifold == "1" else 0.0 for g in ground])
    else:
        pops = np.asarray(config.initial_populations, dtype=float)
        if pops.shape != (ng,) or np.any(pops < 0):
            raise ConfigurationError(f"initial populations need {ng} non-negative entries")
    if not math.isclose(pops.sum(), 1.0, rel_tol=1e-9) and config.initial_populations is not None:
        raise ConfigurationError("initial populations must sum to 1")
    pops = pops / pops.sum()
    nz = config.z_nodes
    gg = np.repeat(np.diag(pops).astype(complex)[None], nz, axis=0)
    return DensityMatrixBlocks(gg, np.zeros((nz, ne, ng), complex), np.zeros((nz, ne, ne), complex))


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    """Output of one run at ``z = L`` (circular amplitudes in Rabi units).

    ``output[:, m]`` is the amplitude of ``MODES[m]``; ``seed`` holds the Stokes
    boundary values. ``generated`` subtracts the seed from the Stokes output.
    """

    t: np.ndarray
    output: np.ndarray
    seed: np.ndarray
    trace_error: float
    hermiticity_error: float
    min_eigenvalue: float
    steps: int
    rejected: int
    final_state: DensityMatrixBlocks | None = None

    def field(self, name: str) -> np.ndarray:
        """``(nt, 2)`` circular amplitudes of ``"P"``, ``"C"``, ``"S"`` or ``"AS"``."""
        i = MODES.index(f"{name}+")
        return self.output[:, i: i + 2]

    def generated(self, name: str) -> np.ndarray:
        out = self.field(name)
        return out - self.seed if name == "S" else out

    def energy(self, amplitudes: np.ndarray) -> float:
        """Time-integrated power ``int |E|^2 dt`` summed over components."""
        p = np.sum(np.abs(amplitudes) ** 2, axis=-1)
        return float(np.trapezoid(p, self.t)) if self.t.size > 1 else 0.0


def run_trajectory(config: SimConfig, scheme: LevelScheme | None = None, rng: np.random.Generator | None = None,
                   keep_state: bool = False) -> Trajectory:
    """Integrate one stochastic trajectory and record the fields leaving the medium.

    The adaptive error norm is the larger of the max-norm over all density
    matrix entries and the output-field error in units of ``e_vacuum``.
    """
    scheme = scheme or default_scheme()
    rng = rng if rng is not None else np.random.Generator(np.random.Philox(config.seed))
    model = build_model(scheme, config)
    rho0 = initial_state(scheme, config)
    nz, ng, ne = rho0.shape
    n = ng + ne
    engine = _Engine(model, nz)
    seed_rate = scheme.gamma_d2 / scheme.gamma_d1

    boundary = np.zeros(len(MODES), complex)
    boundary[0:2] = config.omega_p * polarization_vector(config.pump_polarization)
    boundary[2:4] = config.omega_c * polarization_vector(config.control_polarization)
    s_idx = slice(4, 6)
    last_row = engine.cum[-1]

    def rhs(t, y):
        rho = y.reshape(nz, n, n)
        return engine.rhs(rho, engine.fields(rho, boundary)).ravel()

    def norm(v):
        err = v.reshape(nz, n, n)
        eg = err[:, ng:, :ng].reshape(nz, -1)
        field_err = float(np.max(np.abs(last_row @ (eg @ engine.src)))) if engine.prop.size else 0.0
        return max(float(np.max(np.abs(v))), field_err / config.e_vacuum)

    times, outputs, seeds = [0.0], [], []
    stats = {"trace": 0.0, "herm": 0.0}

    def record(y):
        rho = y.reshape(nz, n, n)
        outputs.append(engine.fields(rho, boundary)[:, -1])
        seeds.append(boundary[s_idx].copy())
        tr = np.abs(np.trace(rho, axis1=1, axis2=2).real - 1.0).max()
        stats["trace"] = max(stats["trace"], float(tr))
        stats["herm"] = max(stats["herm"], float(np.abs(rho - np.conj(np.swapaxes(rho, 1, 2))).max()))

    def on_step(t, y, dt):
        boundary[s_idx] = vacuum_seed_step(boundary[s_idx], dt, rng, config.e_vacuum, seed_rate)
        times.append(t)
        record(y)

    y0 = rho0.full().ravel()
    record(y0)
    _, y, n_ok, n_bad = integrate(rhs, y0, (0.0, config.duration), config.tol, dt0=min(1e-3, config.dt_max),
                                  dt_min=config.dt_min, dt_max=config.dt_max, norm=norm, on_step=on_step)
    rho = y.reshape(nz, n, n)
    final = DensityMatrixBlocks(rho[:, :ng, :ng].copy(), rho[:, ng:, :ng].copy(), rho[:, ng:, ng:].copy())
    return Trajectory(np.array(times), np.array(outputs), np.array(seeds), stats["trace"], stats["herm"],
                      final.min_eigenvalue(), n_ok, n_bad, final if keep_state else None)


def extinction_db(amplitudes: np.ndarray, t: np.ndarray, reference, cap_db: float = 60.0) -> float:
    """Orthogonal-to-parallel power ratio (dB) relative to a reference polarization.

    ``amplitudes`` is ``(nt, 2)`` circular; returns NaN when the field carries no power.
    """
    ref = polarization_vector(reference)
    orth = np.array([-np.conj(ref[1]), np.conj(ref[0])])
    a = np.atleast_2d(amplitudes)
    par = np.abs(a @ ref.conj()) ** 2
    perp = np.abs(a @ orth.conj()) ** 2
    if t is None or len(t) < 2:
        e_par, e_perp = float(par.sum()), float(perp.sum())
    else:
        e_par, e_perp = float(np.trapezoid(par, t)), float(np.trapezoid(perp, t))
    if e_par + e_perp == 0:
        return math.nan
    if e_par == 0:
        return cap_db
    return float(np.clip(10 * math.log10(e_perp / e_par) if e_perp > 0 else -cap_db, -cap_db, cap_db))


def polarization_extinction(traj: Trajectory, config: SimConfig) -> tuple[float, float]:
    """(S vs pump, AS vs control) extinction in dB of the generated fields."""
    s = extinction_db(traj.generated("S"), traj.t, config.pump_polarization, config.extinction_cap_db)
    a = extinction_db(traj.generated("AS"), traj.t, config.control_polarization, config.extinction_cap_db)
    return s, a


@dataclass
class EnsembleResult:
    extinction_s: np.ndarray
    extinction_as: np.ndarray
    gain_s: np.ndarray  # generated / seed energy
    gain_as: np.ndarray  # AS / seed energy
    trace_error: float
    min_eigenvalue: float
    trajectories: list = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "trajectories": int(self.extinction_s.size),
            "extinction_s_db_mean": float(np.nanmean(self.extinction_s)),
            "extinction_as_db_mean": float(np.nanmean(self.extinction_as)),
            "extinction_s_db_min": float(np.nanmin(self.extinction_s)),
            "extinction_as_db_min": float(np.nanmin(self.extinction_as)),
            "gain_s_mean": float(np.mean(self.gain_s)),
            "gain_as_mean": float(np.mean(self.gain_as)),
            "trace_error_max": self.trace_error,
            "min_eigenvalue": self.min_eigenvalue,
        }


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))


def _one(args):
    config, scheme, index, keep = args
    traj = run_trajectory(config, scheme, trajectory_rng(config.seed, index))
    s, a = polarization_extinction(traj, config)
    seed_energy = traj.energy(traj.seed)
    gains = (traj.energy(traj.generated("S")) / seed_energy, traj.energy(traj.generated("AS")) / seed_energy) \
        if seed_energy > 0 else (math.nan, math.nan)
    return s, a, gains, traj.trace_error, traj.min_eigenvalue, traj if keep else None


def run_ensemble(config: SimConfig, scheme: LevelScheme | None = None, executor=None,
                 keep_trajectories: bool = False) -> EnsembleResult:
    """Independent trajectories with per-index RNG substreams; order-independent results."""
    scheme = scheme or default_scheme()
    jobs = [(config, scheme, i, keep_trajectories) for i in range(config.trajectories)]
    results = list(executor.map(_one, jobs)) if executor is not None else [_one(j) for j in jobs]
    ext_s = np.array([r[0] for r in results])
    ext_as = np.array([r[1] for r in results])
    gains = np.array([r[2] for r in results])
    return EnsembleResult(ext_s, ext_as, gains[:, 0], gains[:, 1], max(r[3] for r in results),
                          min(r[4] for r in results), [r[5] for r in results if r[5] is not None])
