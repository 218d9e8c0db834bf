"""Resonant two-level counterexample: slow drive that heats at times ~ lambda^p.

A single spin with ``H0 = sigma3`` is driven by

    V(phi) = 2 |k|^{-p} cos(k1 phi1) cos(k2 phi2) sigma1,    phi = lambda nu t,

with ``nu = (alpha, 1)`` and ``k = (q, -p_)`` built from a continued-fraction
convergent ``p_/q`` of ``alpha``.  Choosing ``lambda = 2 / |nu . k|`` puts one
drive component exactly at the spin precession frequency 2, so in the rotating
frame ``phi(t) = exp(i sigma3 t) psi(t)`` a static term ``sigma1 / (2 |k|^p)``
survives and flips the magnetization on the time scale ``|k|^p``.

Integration uses :func:`prethermal.integrators.integrate_magnus` on the exact
exponential-sum form of the Hamiltonian.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .integrators import ExpSum, expm_hermitian, integrate_magnus
from .io import csv_text

__all__ = [
    "GOLDEN", "SQRT2", "ConvergentSeq", "convergents", "HeatingScenario", "build_scenario",
    "gauge_hamiltonian", "lab_hamiltonian", "IntegratorConfig", "TrajectoryRecord",
    "evolve", "sample_grid", "estimate_steps", "NoHeating", "detect_heating_time",
    "scaling_fit", "effective_magnetization", "full_rate_rotation_magnetization",
]

GOLDEN = (1.0 + math.sqrt(5.0)) / 2.0
SQRT2 = math.sqrt(2.0)

S1 = np.array([[0, 1], [1, 0]], dtype=complex)
S3 = np.diag([1.0 + 0j, -1.0])
E12 = np.array([[0, 1], [0, 0]], dtype=complex)
E21 = np.array([[0, 0], [1, 0]], dtype=complex)
PSI0 = np.array([0.0, 1.0], dtype=complex)


# ----------------------------------------------------------------------------
# continued fractions


@dataclass(frozen=True)
class ConvergentSeq:
    alpha: float
    pairs: tuple[tuple[int, int], ...]
    errors: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, m: int) -> tuple[int, int]:
        """Convergent number ``m``, counted from 1."""
        if not 1 <= m <= len(self.pairs):
            raise IndexError(f"convergent index {m} outside 1..{len(self.pairs)}")
        return self.pairs[m - 1]


def convergents(alpha: float, M: int = 20) -> ConvergentSeq:
    """First ``M`` continued-fraction convergents ``p/q`` of ``alpha > 0``.

    Denominators are strictly increasing: when the first two convergents share
    ``q = 1`` (partial quotient ``a_1 = 1``) the earlier one is dropped.  A
    continued fraction that terminates within the requested depth means
    ``alpha`` is rational to working precision and is rejected.
    """
    alpha = float(alpha)
    if not alpha > 0 or not math.isfinite(alpha):
        raise ValueError("alpha must be a positive finite number")
    if not 1 <= M <= 25:
        raise ValueError("M must lie in 1..25 for double precision")
    x = alpha
    h2, h1, k2, k1 = 0, 1, 1, 0
    pairs: list[tuple[int, int]] = []
    while len(pairs) < M:
        a = math.floor(x)
        h2, h1 = h1, a * h1 + h2
        k2, k1 = k1, a * k1 + k2
        if pairs and pairs[-1][1] == k1:
            pairs[-1] = (h1, k1)
        else:
            pairs.append((h1, k1))
        if len(pairs) == M:
            break
        frac = x - a
        if frac <= 1e-9 * max(1.0, x):
            raise ValueError(f"alpha = {alpha!r} looks rational: continued fraction terminates "
                             f"at {h1}/{k1}")
        x = 1.0 / frac
    errors = tuple(abs(alpha * q - p) for p, q in pairs)
    for (p, q), e in zip(pairs, errors):
        if e > 1.0 / q * (1 + 1e-12):
            raise ValueError(f"convergent {p}/{q} violates |alpha q - p| <= 1/q; "
                             "precision exhausted")
    return ConvergentSeq(alpha, tuple(pairs), errors)


# ----------------------------------------------------------------------------
# scenario


@dataclass(frozen=True)
class HeatingScenario:
    """All derived constants of convergent ``m`` (see :func:`build_scenario`)."""

    alpha: float
    p: int
    tau: float
    gamma: float
    m: int
    pq: tuple[int, int]
    k: tuple[int, int]
    k_norm: int
    nu_dot_k: float
    lambda_m: float
    omega_plus: float
    omega_minus: float
    t_star: float
    C1: float
    C2: float
    window: tuple[float, float]
    C_lemma: float
    floors: dict = field(hash=False)
    above_floor: bool = False
    checks: dict = field(default_factory=dict, hash=False)

    @property
    def eps(self) -> float:
        return self.tau - 1.0

    @property
    def nu(self) -> tuple[float, float]:
        return (self.alpha, 1.0)

    @property
    def K(self) -> float:
        """Inverse drive amplitude ``|k|^p``."""
        return float(self.k_norm) ** self.p

    def remainder_bound(self, t) -> np.ndarray:
        t = np.abs(np.asarray(t, dtype=float))
        return 1.0 / self.K + 2.0 * t / self.K ** 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eps"] = self.eps
        d["nu"] = list(self.nu)
        d["K"] = self.K
        return d


def build_scenario(cs: ConvergentSeq, m: int, p: int = 3, tau: float = 1.2,
                   gamma: float = 1.0) -> HeatingScenario:
    """Drive parameters for convergent ``m`` (1-based) with ``k = (q_m, -p_m)``."""
    if int(p) != p or p < 3:
        raise ValueError("p must be an integer >= 3")
    if not tau > 1:
        raise ValueError("tau must exceed 1")
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    pm, qm = cs[m]
    alpha = cs.alpha
    k = (int(qm), -int(pm))
    dot = alpha * qm - pm
    if dot == 0:
        raise ValueError(f"nu . k vanishes for k = {k}")
    lam = 2.0 / abs(dot)
    k_norm = abs(k[0]) + abs(k[1])
    nu_norm = alpha + 1.0
    # alpha lambda k1 - lambda k2 = lambda (alpha q + p)
    e = lam * (alpha * k[0] - k[1])
    eps = tau - 1.0
    C1 = math.pi / 4 * (gamma / 2) ** (p / tau)
    C2 = math.pi / 4 * nu_norm ** (2 * p / tau)
    window = (C1 * lam ** (p / tau), C2 * lam ** (p / tau + eps))
    C = min(alpha / 4, 1 / (4 * alpha)) * (gamma / 2) ** (1 / tau)
    floors = {
        "two_components": (8 / min(alpha, 1.0)) ** tau * (2 / gamma),
        "omega": (4 / (C * nu_norm)) ** tau,
        "remainder": (300 / (C * nu_norm)) ** tau,
    }
    above = all(lam > f for f in floors.values()) and k_norm >= (gamma / 2) ** (1 / tau) * lam ** (1 / tau)
    om_p, om_m = e + 2.0, e - 2.0
    lb = C * lam ** (1 / tau)
    checks = {
        "lambda_lower": lam >= k_norm ** (tau - eps) / nu_norm,
        "lambda_upper": lam <= (2 / gamma) * k_norm ** tau,
        "opposite_signs": k[0] * k[1] < 0,
        "k_components": min(abs(k[0]), abs(k[1])) >= lb,
        "omega_lower": min(abs(om_p), abs(om_m)) >= C * nu_norm / 2 * lam ** (1 / tau),
    }
    return HeatingScenario(
        alpha=alpha, p=int(p), tau=float(tau), gamma=float(gamma), m=int(m), pq=(int(pm), int(qm)),
        k=k, k_norm=int(k_norm), nu_dot_k=float(dot), lambda_m=lam, omega_plus=om_p,
        omega_minus=om_m, t_star=math.pi / 4 * float(k_norm) ** p, C1=C1, C2=C2, window=window,
        C_lemma=C, floors=floors, above_floor=bool(above), checks=checks)


def _collect(terms: Sequence[tuple[float, np.ndarray]]) -> ExpSum:
    acc: dict[float, np.ndarray] = {}
    for w, a in terms:
        w = float(w) + 0.0
        acc[w] = acc.get(w, 0) + a
    ws = sorted(acc)
    return ExpSum(np.array(ws), np.array([acc[w] for w in ws]))


def _drive_freqs(sc: HeatingScenario) -> tuple[float, float]:
    # lambda (nu . k) is +-2 by construction; use the exact value
    d = 2.0 * math.copysign(1.0, sc.nu_dot_k)
    e = sc.omega_plus - 2.0
    return d, e


def lab_hamiltonian(sc: HeatingScenario, amplitude: float = 1.0) -> ExpSum:
    """``sigma3 + (amplitude / K)(cos(d t) + cos(e t)) sigma1`` as an exponential sum."""
    d, e = _drive_freqs(sc)
    c = amplitude / (2.0 * sc.K)
    terms = [(0.0, S3)] + [(w, c * S1) for w in (d, -d, e, -e)]
    return _collect(terms)


def gauge_hamiltonian(sc: HeatingScenario, amplitude: float = 1.0) -> ExpSum:
    """Generator of ``phi = exp(i sigma3 t) psi``.

    ``exp(i sigma3 t) sigma1 exp(-i sigma3 t) = e^{2it} E12 + e^{-2it} E21``, so
    each drive component at frequency ``w`` splits into ``E12`` at ``w + 2``
    and ``E21`` at ``w - 2``; the two resonant pieces merge into a static
    ``sigma1 / (2K)``.
    """
    d, e = _drive_freqs(sc)
    c = amplitude / (2.0 * sc.K)
    terms = []
    for w in (d, -d, e, -e):
        terms.append((w + 2.0, c * E12))
        terms.append((w - 2.0, c * E21))
    return _collect(terms)


def effective_magnetization(sc: HeatingScenario, t) -> np.ndarray:
    """``M`` under the static rotating-frame term alone: ``-cos(t / K)``."""
    return -np.cos(np.asarray(t, dtype=float) / sc.K)


# ----------------------------------------------------------------------------
# integration


@dataclass(frozen=True)
class IntegratorConfig:
    """``magnus4``: exact-quadrature fourth order Magnus with step doubling.
    ``dop853``: scipy's embedded 8(5,3) Runge-Kutta on the real form (short horizons)."""

    method: str = "magnus4"
    rel_tol: float = 1e-10
    abs_tol: float = 1e-12
    max_steps: int = 10 ** 7

    ORDERS = {"magnus4": 4, "dop853": 8}

    def __post_init__(self):
        if self.method not in self.ORDERS:
            raise ValueError(f"unknown method {self.method!r}")
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")

    @property
    def order(self) -> int:
        return self.ORDERS[self.method]


def estimate_steps(sc: HeatingScenario, t_end: float, cfg: IntegratorConfig = IntegratorConfig(),
                   frame: str = "gauge") -> int:
    """Rough accepted-step count, used to gate runs before they start."""
    hs = gauge_hamiltonian(sc) if frame == "gauge" else lab_hamiltonian(sc)
    angle = hs.norm_bound * t_end
    if cfg.method == "magnus4":
        return int(math.ceil(angle / min(0.5, 4 * cfg.rel_tol ** 0.25))) + 1
    fmax = float(np.max(np.abs(hs.freqs))) + hs.norm_bound
    return int(math.ceil(fmax * t_end / (2 * math.pi) * 20 + angle / cfg.rel_tol ** 0.125)) + 1


def sample_grid(t_star: float, t_end: float | None = None, n_log: int = 512, n_lin: int = 256,
                t_min_frac: float = 1e-3) -> np.ndarray:
    """``0``, ``n_log`` log-spaced points up to ``t_star``, ``n_lin`` linear points after."""
    t_end = 2 * t_star if t_end is None else t_end
    parts = [np.zeros(1), np.geomspace(t_star * t_min_frac, t_star, n_log)]
    if t_end > t_star and n_lin > 0:
        parts.append(np.linspace(t_star, t_end, n_lin + 1)[1:])
    return np.concatenate(parts)


def _to_frame(states: np.ndarray, times: np.ndarray, src: str, dst: str, K: float) -> np.ndarray:
    if src == dst:
        return states.copy()
    # everything goes through the gauge frame
    if src == "lab":
        ph = np.exp(1j * np.outer(times, [1.0, -1.0]))
        g = ph * states
    elif src == "xi":
        g = _rot1(states, times, -1.0 / (2 * K))
    else:
        g = states
    if dst == "gauge":
        return g
    if dst == "lab":
        return np.exp(-1j * np.outer(times, [1.0, -1.0])) * g
    if dst == "xi":
        return _rot1(g, times, 1.0 / (2 * K))
    raise ValueError(f"unknown frame {dst!r}")


def _rot1(states: np.ndarray, times: np.ndarray, w: float) -> np.ndarray:
    # exp(i w t sigma1) applied row by row
    c, s = np.cos(w * times)[:, None], np.sin(w * times)[:, None]
    return c * states + 1j * s * states[:, ::-1]


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    states: np.ndarray
    frame: str
    magnetization: np.ndarray
    norm_drift: float
    remainder_lhs: np.ndarray
    remainder_rhs: np.ndarray
    complete: bool = True
    steps: int = 0
    rejected: int = 0
    scenario: HeatingScenario | None = None
    config: IntegratorConfig | None = None
    m_eval: Callable[[float, int], float] | None = field(default=None, repr=False)

    @property
    def remainder_check(self) -> np.ndarray:
        return self.remainder_lhs <= self.remainder_rhs

    def states_in(self, frame: str) -> np.ndarray:
        K = self.scenario.K if self.scenario is not None else 1.0
        return _to_frame(self.states, self.times, self.frame, frame, K)

    def magnetization_at(self, t: float) -> float:
        """``M(t)`` recomputed from the nearest earlier sample."""
        if self.m_eval is None:
            raise ValueError("record has no evaluator; only sampled values are available")
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return float(self.m_eval(float(t), max(i, 0)))

    def csv(self) -> str:
        s = self.states
        rows = zip(self.times, s[:, 0].real, s[:, 0].imag, s[:, 1].real, s[:, 1].imag,
                   self.magnetization, self.remainder_lhs, self.remainder_rhs)
        return csv_text(["t", "re0", "im0", "re1", "im1", "M", "remainder_lhs", "remainder_rhs"], rows)

    @classmethod
    def from_magnetization(cls, times, fn: Callable) -> "TrajectoryRecord":
        """Record of a known magnetization curve, for reference crossings."""
        t = np.asarray(times, dtype=float)
        mag = np.asarray(fn(t), dtype=float)
        nan = np.full(len(t), np.nan)
        return cls(t, np.full((len(t), 2), np.nan + 0j), "reference", mag, 0.0, nan, nan,
                   m_eval=lambda tt, i: float(fn(tt)))


def _magnetization(states: np.ndarray) -> np.ndarray:
    a = np.abs(states) ** 2
    return a[:, 0] - a[:, 1]


def _run(hs: ExpSum, psi0: np.ndarray, ts: np.ndarray, t0: float, cfg: IntegratorConfig):
    if cfg.method == "magnus4":
        res = integrate_magnus(hs, psi0, ts, t0=t0, rel_tol=cfg.rel_tol, abs_tol=cfg.abs_tol,
                               max_steps=cfg.max_steps)
        return res.states, res.complete, res.steps, res.rejected
    return _run_dop853(hs, psi0, ts, t0, cfg)


def _run_dop853(hs: ExpSum, psi0, ts, t0, cfg):
    n = hs.dim

    def rhs(t, y):
        psi = y[:n] + 1j * y[n:]
        d = -1j * (hs(t) @ psi)
        return np.concatenate([d.real, d.imag])

    y0 = np.concatenate([psi0.real, psi0.imag])
    if len(ts) == 0 or ts[-1] <= t0:
        out = np.tile(psi0, (len(ts), 1))
        return out, True, 0, 0
    sol = solve_ivp(rhs, (t0, ts[-1]), y0, method="DOP853", t_eval=ts, rtol=cfg.rel_tol,
                    atol=cfg.abs_tol)
    y = sol.y.T
    states = y[:, :n] + 1j * y[:, n:]
    return states, bool(sol.success), int(sol.nfev // 12), 0


def evolve(sc: HeatingScenario, t_end: float | None = None, cfg: IntegratorConfig = IntegratorConfig(),
           frame: str = "gauge", *, amplitude: float = 1.0, times=None,
           max_estimated_steps: int = 10 ** 8) -> TrajectoryRecord:
    """Integrate from ``psi0 = (0, 1)`` in the gauge (default) or lab frame.

    ``times`` overrides the default :func:`sample_grid`.  The remainder
    ``|| phi(t) - exp(-i t sigma1 / (2K)) psi0 ||`` and its bound
    ``1/K + 2|t|/K^2`` are recorded at every sample.
    """
    if frame not in ("gauge", "lab"):
        raise ValueError("frame must be 'gauge' or 'lab'")
    if t_end is None:
        t_end = 2 * sc.t_star if times is None else float(np.max(times))
    if t_end > 4 * sc.t_star:
        raise ValueError("t_end must not exceed 4 t_star")
    ts = sample_grid(sc.t_star, t_end) if times is None else np.asarray(times, dtype=float)
    ts = ts[ts <= t_end]
    est = estimate_steps(sc, t_end, cfg, frame)
    if est > max_estimated_steps:
        raise ValueError(f"estimated {est} steps exceeds the budget {max_estimated_steps}")
    hs = gauge_hamiltonian(sc, amplitude) if frame == "gauge" else lab_hamiltonian(sc, amplitude)
    states, complete, steps, rejected = _run(hs, PSI0, ts, 0.0, cfg)
    ts = ts[:len(states)]
    gauge = _to_frame(states, ts, frame, "gauge", sc.K)
    ref = _rot1(np.tile(PSI0, (len(ts), 1)), ts, -1.0 / (2 * sc.K))
    lhs = np.linalg.norm(gauge - ref, axis=1)
    mag = _magnetization(states)
    drift = float(np.max(np.abs(np.linalg.norm(states, axis=1) - 1.0))) if len(ts) else 0.0

    def m_eval(t: float, i: int) -> float:
        st, ok, _, _ = _run(hs, states[i], np.array([t]), float(ts[i]), cfg)
        return float(_magnetization(st)[0])

    return TrajectoryRecord(ts, states, frame, mag, drift, lhs, sc.remainder_bound(ts), complete,
                            steps, rejected, sc, cfg, m_eval)


# ----------------------------------------------------------------------------
# analysis


class NoHeating(Exception):
    """``M(t) - M(0)`` never reached 1/2; ``max_excursion`` holds the largest value seen."""

    def __init__(self, max_excursion: float):
        super().__init__(f"no heating: max M(t) - M(0) = {max_excursion:.6g} < 1/2")
        self.max_excursion = max_excursion


def detect_heating_time(tr: TrajectoryRecord, rtol: float = 1e-3, threshold: float = 0.5) -> float:
    """First time with ``M(t) - M(0) >= threshold``, bisected to relative ``rtol``."""
    exc = tr.magnetization - tr.magnetization[0]
    hit = np.nonzero(exc >= threshold)[0]
    if len(hit) == 0:
        raise NoHeating(float(np.max(exc)) if len(exc) else float("nan"))
    i = int(hit[0])
    if i == 0:
        return float(tr.times[0])
    lo, hi = float(tr.times[i - 1]), float(tr.times[i])
    if tr.m_eval is None:
        # linear interpolation between samples
        f = (threshold - exc[i - 1]) / (exc[i] - exc[i - 1])
        return lo + f * (hi - lo)
    m0 = tr.magnetization[0]
    base = i - 1
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if tr.m_eval(mid, base) - m0 >= threshold:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def scaling_fit(lams: Sequence[float], times: Sequence[float], *,
                min_points: int = 4, min_decades: float = 1.5) -> tuple[float, float, float]:
    """Least-squares line through ``(ln lambda, ln t)``: ``(slope, intercept, rms residual)``."""
    x = np.log(np.asarray(lams, dtype=float))
    y = np.log(np.asarray(times, dtype=float))
    if len(x) != len(y):
        raise ValueError("lams and times differ in length")
    if len(x) < min_points:
        raise ValueError(f"need at least {min_points} points, got {len(x)}")
    spread = (x.max() - x.min()) / math.log(10)
    if spread < min_decades:
        raise ValueError(f"lambda spans {spread:.3g} decades, need {min_decades}")
    A = np.stack([x, np.ones_like(x)], 1)
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = float(np.sqrt(np.mean((A @ [slope, icpt] - y) ** 2)))
    return float(slope), float(icpt), resid


def full_rate_rotation_magnetization(t, K: float) -> np.ndarray:
    """``<sigma3 e^{-i t sigma1 / K} psi0, e^{-i t sigma1 / K} psi0> = -cos(2t/K)``, evaluated directly."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.empty(len(t))
    for j, tj in enumerate(t):
        v = expm_hermitian(S1 / K, tj) @ PSI0
        out[j] = float(np.real(np.vdot(v, S3 @ v)))
    return out
