"""Dense propagation of driven lattice Hamiltonians on small lattices.

``H(t) = H0 + V(lambda nu t)`` is assembled once into global Fourier
coefficients; each step applies one or two exact exponentials of Hermitian
matrices (commutator-free midpoint or fourth order Gauss scheme).  The
propagators are never renormalized, so their unitarity defect measures the
accumulated round-off.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .algebra import (
    DEFAULT_GLOBAL_CAP, Interaction, LocalTerm, assemble_global, assemble_modes, embed_matrix,
)
from .integrators import cf_step, expm_hermitian
from .io import csv_text

__all__ = [
    "DriveSpec", "PropagatorConfig", "Propagation", "propagate", "ObservableDiag",
    "heating_diag", "local_obs_diag", "observable_time_cap", "to_rescaled_time",
    "from_rescaled_time", "local_operator",
]


def to_rescaled_time(t, lam: float):
    """Physical time to the angle-clock time ``lambda t`` used by the normal form."""
    return np.asarray(t) * lam


def from_rescaled_time(s, lam: float):
    return np.asarray(s) / lam


@dataclass
class DriveSpec:
    """``H(t) = H0 + V(lambda nu t)`` on the full lattice Hilbert space."""

    h0: Interaction
    v: Interaction
    lam: float
    nu: tuple
    cap: int = DEFAULT_GLOBAL_CAP
    static: np.ndarray = field(init=False, repr=False)
    freqs: np.ndarray = field(init=False, repr=False)
    mats: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.h0.lattice != self.v.lattice:
            raise ValueError("H0 and V live on different lattices")
        if not self.h0.is_constant:
            raise ValueError("H0 must be time independent")
        nu = np.asarray(self.nu, dtype=float)
        if nu.shape != (self.v.n,):
            raise ValueError("nu does not match the angle count of V")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        self.nu = tuple(float(x) for x in nu)
        self.static = assemble_global(self.h0, cap=self.cap)
        modes, mats = assemble_modes(self.v, cap=self.cap)
        zero = ~modes.any(axis=1)
        if zero.any():
            self.static = self.static + mats[zero].sum(0)
        self.freqs = self.lam * (modes[~zero] @ nu)
        self.mats = mats[~zero]

    @property
    def lattice(self):
        return self.h0.lattice

    @property
    def dim(self) -> int:
        return self.static.shape[0]

    @property
    def n_sites(self) -> int:
        return self.lattice.size

    @property
    def max_frequency(self) -> float:
        return float(np.max(np.abs(self.freqs))) if len(self.freqs) else 0.0

    @property
    def norm_bound(self) -> float:
        nb = np.linalg.norm(self.static, 2)
        return float(nb + sum(np.linalg.norm(m, 2) for m in self.mats))

    def hamiltonian(self, t: float) -> np.ndarray:
        if not len(self.freqs):
            return self.static
        return self.static + np.tensordot(np.exp(1j * self.freqs * t), self.mats, axes=(0, 0))


@dataclass(frozen=True)
class PropagatorConfig:
    """Step rule ``dt <= c / max(lambda max|nu.l|, ||H||)``; order 2 (midpoint) or 4."""

    order: int = 2
    c: float = 0.1
    max_steps: int = 10 ** 7

    def __post_init__(self):
        if self.order not in (2, 4):
            raise ValueError("order must be 2 or 4")
        if not self.c > 0:
            raise ValueError("c must be positive")

    def dt_max(self, drive: DriveSpec) -> float:
        rate = max(drive.max_frequency, drive.norm_bound, 1e-300)
        return self.c / rate


@dataclass
class Propagation:
    times: np.ndarray
    data: np.ndarray
    mode: str
    steps: int
    dt_max: float
    unitarity_defect: np.ndarray

    @property
    def max_defect(self) -> float:
        return float(np.max(self.unitarity_defect)) if len(self.unitarity_defect) else 0.0


def propagate(drive: DriveSpec, t_grid, cfg: PropagatorConfig = PropagatorConfig(),
              psi0: np.ndarray | None = None) -> Propagation:
    """``U(t)`` at every grid time (or ``U(t) psi0`` when ``psi0`` is given)."""
    ts = np.asarray(t_grid, dtype=float)
    if len(ts) == 0 or ts[0] != 0 or np.any(np.diff(ts) < 0):
        raise ValueError("time grid must start at 0 and be non-decreasing")
    dtm = cfg.dt_max(drive)
    counts = np.ceil(np.diff(ts) / dtm).astype(np.int64)
    total = int(counts.sum())
    if total > cfg.max_steps:
        raise ValueError(f"step rule needs {total} steps, budget is {cfg.max_steps}")
    dim = drive.dim
    vec = psi0 is not None
    cur = np.asarray(psi0, dtype=complex).copy() if vec else np.eye(dim, dtype=complex)
    out = np.empty((len(ts),) + cur.shape, dtype=complex)
    defect = np.empty(len(ts))
    eye = np.eye(dim)

    def meter(x):
        if vec:
            return abs(np.linalg.norm(x) - np.linalg.norm(psi0))
        return float(np.max(np.abs(x.conj().T @ x - eye)))

    out[0], defect[0] = cur, meter(cur)
    h = drive.hamiltonian
    for i, n in enumerate(counts):
        t = ts[i]
        if n:
            dt = (ts[i + 1] - ts[i]) / n
            for j in range(n):
                cur = cf_step(h, t + j * dt, dt, cfg.order) @ cur
        out[i + 1], defect[i + 1] = cur, meter(cur)
    return Propagation(ts, out, "state" if vec else "unitary", total, dtm, defect)


def local_operator(drive: DriveSpec, o: LocalTerm | np.ndarray, support=None) -> np.ndarray:
    """Embed a local observable into the global space."""
    if isinstance(o, LocalTerm):
        support = o.support
        if not o.payload.is_constant:
            raise ValueError("observable must be time independent")
        mat = o.payload.mean()
    else:
        mat = np.asarray(o)
    full = tuple(range(drive.n_sites))
    return embed_matrix(mat[None], tuple(support), full, drive.lattice.q)[0]


def _herm_norm(m: np.ndarray) -> float:
    w = np.linalg.eigvalsh(0.5 * (m + m.conj().T))
    return float(np.max(np.abs(w))) if len(w) else 0.0


def _op_norm(m: np.ndarray) -> float:
    return float(np.linalg.svd(m, compute_uv=False)[0])


def observable_time_cap(lam: float, b: float, p: float, tau: float, eps: float, d: int) -> float:
    """``lambda^{(-b + (p/tau)(1-b) - eps)/(d+1)}``, reported for context only."""
    return float(lam ** ((-b + p / tau * (1 - b) - eps) / (d + 1)))


@dataclass
class ObservableDiag:
    times: np.ndarray
    heating: np.ndarray | None = None
    obs_error: np.ndarray | None = None
    O_support: tuple | None = None
    time_cap: float | None = None
    unitarity_defect: float = 0.0
    steps: int = 0

    def csv(self) -> str:
        n = len(self.times)
        h = self.heating if self.heating is not None else np.full(n, np.nan)
        o = self.obs_error if self.obs_error is not None else np.full(n, np.nan)
        return csv_text(["t", "heating", "obs_error"], zip(self.times, h, o))

    @property
    def plateau(self) -> float:
        return float(np.max(self.heating)) if self.heating is not None else float("nan")


def heating_diag(drive: DriveSpec, t_grid, cfg: PropagatorConfig = PropagatorConfig(),
                 prop: Propagation | None = None) -> ObservableDiag:
    """``||U(t)^* H0 U(t) - H0||_op / |Lambda|`` per grid time."""
    prop = prop or propagate(drive, t_grid, cfg)
    h0 = assemble_global(drive.h0, cap=drive.cap)
    vals = np.array([_herm_norm(u.conj().T @ h0 @ u - h0) for u in prop.data]) / drive.n_sites
    return ObservableDiag(prop.times, heating=vals, unitarity_defect=prop.max_defect,
                          steps=prop.steps)


def local_obs_diag(drive: DriveSpec, o: LocalTerm, h_eff: Interaction, t_grid,
                   cfg: PropagatorConfig = PropagatorConfig(), *, prop: Propagation | None = None,
                   cap_params: dict | None = None) -> ObservableDiag:
    """``||U^* O U - e^{i H_eff t} O e^{-i H_eff t}||_op`` per grid time.

    ``cap_params`` (keys ``b, p, tau, eps``) enables the reported time cap.
    """
    if not h_eff.is_constant:
        raise ValueError("H_eff must be time independent")
    prop = prop or propagate(drive, t_grid, cfg)
    O = local_operator(drive, o)
    he = assemble_global(h_eff, cap=drive.cap)
    he = 0.5 * (he + he.conj().T)
    w, vecs = np.linalg.eigh(he)
    errs = []
    for t, u in zip(prop.times, prop.data):
        if t == 0:
            errs.append(_op_norm(u.conj().T @ O @ u - O))
            continue
        ue = (vecs * np.exp(-1j * t * w)) @ vecs.conj().T
        errs.append(_op_norm(u.conj().T @ O @ u - ue.conj().T @ O @ ue))
    cap = None
    if cap_params is not None:
        cap = observable_time_cap(drive.lam, cap_params["b"], cap_params["p"], cap_params["tau"],
                                  cap_params["eps"], drive.lattice.d)
    return ObservableDiag(prop.times, obs_error=np.array(errs), O_support=tuple(o.support),
                          time_cap=cap, unitarity_defect=prop.max_defect, steps=prop.steps)


def exact_static(drive: DriveSpec, t: float) -> np.ndarray:
    """``exp(-i t H0)`` (helper for undriven checks)."""
    return expm_hermitian(drive.static, t)
