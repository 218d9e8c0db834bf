"""Finite normal-form iteration for quasi-periodically driven lattice systems.

The engine works in the rescaled time frame where the generator of the
dynamics is ``lambda^{-1} (H0 + Z + V(nu t) + R(nu t))``.  One step solves the
homological equation for ``lambda^{-1} V``, conjugates with ``Y = exp(-iG)``
and re-collects the result as

* ``Z' = Z + <V>``,
* ``V' = sum_{r>=1} Ad^r_{-iG}(H0 + Z + V) / r! - sum_{r>=1} Ad^r_{-iG}(W) / (r+1)!``
  with ``W = V^ir - <V>`` (the derivative term integrated in closed form),
* ``R' = exp(-iG) R exp(iG) + V^uv``.

Defects are accumulated directly from the ``r >= 1`` terms, never by
subtracting large nearly-equal operators.  All truncations (support cap, mode
cap, coefficient pruning, series tails) are measured and reported as
``truncation_mass``.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .algebra import (
    Interaction, TrigMatrix, average, commutator, norm_kappa,
    norm_kappa_cp, norm_kappa_sigma, scale, to_json, uv_ir_split,
)
from .smoothing import smooth

__all__ = [
    "ResonanceError", "SeriesDivergence", "NormalFormError",
    "estimate_gamma", "DiophantineVector", "NFSchedule", "NFConfig", "NFState",
    "NFStepRecord", "NFResult", "solve_homological", "homological_residual",
    "ad_exp", "ad_series", "nf_step", "run_normal_form", "conjugate_chain",
]


class ResonanceError(ValueError):
    """Raised when ``nu . l = 0`` for an integer vector in range."""

    def __init__(self, msg: str, witness: tuple[int, ...]):
        super().__init__(msg)
        self.witness = witness


class SeriesDivergence(RuntimeError):
    pass


class NormalFormError(RuntimeError):
    """A normal-form step failed; ``transcript`` holds the completed records."""

    def __init__(self, msg: str, transcript: list):
        super().__init__(msg)
        self.transcript = transcript


# ----------------------------------------------------------------------------
# Diophantine certification


def _l1_ball_halfspace(n: int, L: int):
    """Yield chunks of integer vectors with ``0 < |l|_1 <= L``, one per +-l pair."""
    if n == 1:
        yield np.arange(1, L + 1, dtype=np.int64)[:, None]
        return
    for a in range(0, L + 1):
        r = L - a
        rng = np.arange(-r, r + 1, dtype=np.int64)
        rest = np.stack(np.meshgrid(*([rng] * (n - 1)), indexing="ij"), -1).reshape(-1, n - 1)
        rest = rest[np.abs(rest).sum(1) <= r]
        if a == 0:
            # first nonzero entry of the tail must be positive
            nz = rest != 0
            first = np.where(nz.any(1), rest[np.arange(len(rest)), nz.argmax(1)], 0)
            rest = rest[first > 0]
        if len(rest):
            yield np.concatenate([np.full((len(rest), 1), a, dtype=np.int64), rest], axis=1)


def estimate_gamma(nu, tau: float, L_max: int, *, return_witness: bool = False):
    """Brute-force ``min_{0 < |l| <= L_max} |nu . l| |l|^tau``.

    Raises :class:`ResonanceError` with the offending ``l`` if ``nu . l``
    vanishes to working precision.
    """
    nu = np.asarray(nu, dtype=float)
    if np.any(nu == 0):
        raise ValueError("components of nu must be nonzero")
    if L_max < 1:
        raise ValueError("L_max must be positive")
    best, wit = np.inf, None
    for ls in _l1_ball_halfspace(len(nu), int(L_max)):
        dot = ls @ nu
        scale_ = np.abs(ls) @ np.abs(nu)
        res = np.abs(dot) <= 64 * np.finfo(float).eps * scale_
        if res.any():
            w = tuple(int(v) for v in ls[np.argmax(res)])
            raise ResonanceError(f"nu is resonant: nu . l = 0 for l = {w}", w)
        val = np.abs(dot) * np.abs(ls).sum(1).astype(float) ** tau
        i = int(np.argmin(val))
        if val[i] < best:
            best, wit = float(val[i]), tuple(int(v) for v in ls[i])
    return (best, wit) if return_witness else best


@dataclass(frozen=True)
class DiophantineVector:
    """Frequency vector with a brute-force certified Diophantine constant."""

    nu: tuple[float, ...]
    tau: float
    gamma_certified: float
    L_max: int

    @classmethod
    def certify(cls, nu, tau: float, L_max: int = 64) -> "DiophantineVector":
        nu = tuple(float(v) for v in nu)
        if not all(0.5 <= abs(v) <= 2.0 for v in nu):
            raise ValueError("components of nu must lie in [1/2, 2]")
        if tau <= len(nu) - 1:
            raise ValueError("tau must exceed n - 1")
        return cls(nu, float(tau), estimate_gamma(nu, tau, L_max), int(L_max))

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.nu)

    @property
    def n(self) -> int:
        return len(self.nu)


def _nu_array(nu) -> np.ndarray:
    return nu.array if isinstance(nu, DiophantineVector) else np.asarray(nu, dtype=float)


# ----------------------------------------------------------------------------
# schedule and configuration


@dataclass(frozen=True)
class NFSchedule:
    """Step count, cut-offs and locality loss for a given ``lambda``.

    ``sigma = lambda^{-(1-b-eps)/tau}``, ``K = ln(2e/sigma^p)/sigma``,
    ``n_star = ceil(ln(lambda^{-b} sigma^{-p}))``, ``delta = kappa0/(2 n_star)``.
    """

    lam: float
    b: float
    eps: float
    p: int
    tau: float
    kappa0: float

    def __post_init__(self):
        if not self.lam > 1:
            raise ValueError("lambda must exceed 1")
        if not 0 < self.b < self.p / (self.p + self.tau):
            raise ValueError("b must lie in (0, p/(p+tau))")
        if not 0 < self.eps < 1 - self.b * (self.p + self.tau) / self.p:
            raise ValueError("eps must lie in (0, 1 - b(p+tau)/p)")
        if not self.kappa0 > 0:
            raise ValueError("kappa0 must be positive")
        if self.n_star_raw <= 0:
            raise ValueError("lambda too small: the schedule has no steps")

    @property
    def exponent(self) -> float:
        """Smoothing exponent ``(1 - b - eps)/tau``."""
        return (1.0 - self.b - self.eps) / self.tau

    @cached_property
    def sigma(self) -> float:
        return self.lam ** (-self.exponent)

    @cached_property
    def K(self) -> float:
        return math.log(2 * math.e / self.sigma ** self.p) / self.sigma

    @cached_property
    def n_star_raw(self) -> float:
        return math.log(self.lam ** (-self.b) * self.sigma ** (-self.p))

    @cached_property
    def n_star(self) -> int:
        return max(1, math.ceil(self.n_star_raw - 1e-12))

    @cached_property
    def delta(self) -> float:
        return self.kappa0 / (2 * self.n_star)

    def kappa(self, n: int) -> float:
        return self.kappa0 - n * self.delta

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "b": self.b, "eps": self.eps, "p": self.p, "tau": self.tau,
                "kappa0": self.kappa0, "sigma": self.sigma, "K": self.K,
                "n_star_raw": self.n_star_raw, "n_star": self.n_star, "delta": self.delta,
                "kappa_final": self.kappa(self.n_star)}


@dataclass
class NFConfig:
    """Numerical policy of the normal-form engine."""

    series_tol: float = 1e-14
    residual_tol: float = 1e-12
    max_terms: int = 40
    mode_cap: float | None = None  # default 4 K
    max_support: int = 6
    prune_rtol: float = 1e-15
    C_hat: float = 1.0
    lambda_floor: float = 1.0
    eta: float = 0.5
    cp_grid: int = 32
    fft: bool | None = None


# ----------------------------------------------------------------------------
# homological equation


def solve_homological(a: Interaction, nu, K: float) -> Interaction:
    """Solve ``(nu . d_phi) G + A = A^uv + <A>``.

    ``G(l) = -A(l) / (i nu . l)`` for ``0 < |l| <= K`` and zero otherwise.
    """
    nu = _nu_array(nu)
    if len(nu) != a.n:
        raise ValueError("frequency vector length does not match the angle count")
    out = {}
    for s, tm in a.terms.items():
        sel = (tm.l1 > 0) & (tm.l1 <= K)
        if not sel.any():
            continue
        modes = tm.modes[sel]
        dot = modes @ nu
        tiny = np.abs(dot) <= 64 * np.finfo(float).eps * (np.abs(modes) @ np.abs(nu))
        if tiny.any():
            w = tuple(int(v) for v in modes[np.argmax(tiny)])
            raise ResonanceError(f"resonant frequency vector: nu . l = 0 for l = {w}", w)
        out[s] = TrigMatrix(modes, tm.coeffs[sel] * (1j / dot)[:, None, None], canonical=True)
    return Interaction(a.lattice, a.n, out, validate=False)


def nu_derivative(g: Interaction, nu) -> Interaction:
    """``(nu . d_phi) G`` by multiplying each mode with ``i nu . l``."""
    nu = _nu_array(nu)
    return g.map_payloads(lambda tm: tm.multiply_modes(1j * (tm.modes @ nu)))


def homological_residual(g: Interaction, a: Interaction, nu, K: float) -> float:
    """``||(nu . d)G + A - A^uv - <A>||_{0,0}``."""
    _, uv = uv_ir_split(a, K)
    res = nu_derivative(g, nu) + a - uv - average(a)
    return norm_kappa_sigma(res, 0.0, 0.0).value


# ----------------------------------------------------------------------------
# commutator series


def _mass(a: Interaction, kappa: float, sigma: float) -> float:
    """Cheap upper bound of ``||A||_{kappa,sigma}`` (Frobenius norms, sum over supports)."""
    tot = 0.0
    for s, tm in a.terms.items():
        if len(tm):
            fro = np.linalg.norm(tm.coeffs, axis=(1, 2))
            tot += math.exp(kappa * len(s)) * float(np.sum(fro * np.exp(sigma * tm.l1)))
    return tot


@dataclass
class SeriesInfo:
    terms: int = 0
    tail: float = 0.0
    shed: float = 0.0
    smallness: float = float("nan")


@dataclass
class _Trunc:
    max_support: int | None = None
    mode_cap: float | None = None
    drop_below: float = 0.0
    fft: bool | None = None
    kappa: float = 0.0


def _cap_modes(a: Interaction, cap: float | None, shed: dict) -> Interaction:
    if cap is None:
        return a
    out = {}
    for s, tm in a.terms.items():
        keep = tm.l1 <= cap
        if not keep.all():
            shed[s] = shed.get(s, 0.0) + float(tm.op_norms[~keep].sum())
            tm = tm.select(keep)
        if len(tm):
            out[s] = tm
    return Interaction(a.lattice, a.n, out, validate=False)


def _shed_weight(shed: dict, kappa: float) -> float:
    return float(sum(w * math.exp(kappa * len(s)) for s, w in shed.items()))


def ad_series(g: Interaction, x: Interaction, coeff: Callable[[int], complex], *,
              r_min: int = 0, tol: float = 1e-14, max_terms: int = 40,
              sigma: float = 0.0, trunc: _Trunc | None = None) -> tuple[Interaction, SeriesInfo]:
    """``sum_{r >= r_min} coeff(r) Ad^r_G X`` summed until the terms are negligible.

    Summation stops once the latest term's weighted mass falls below ``tol``
    times the mass of the partial sum; the geometric tail estimate and any
    truncation losses are returned in :class:`SeriesInfo`.
    """
    trunc = trunc or _Trunc()
    info = SeriesInfo()
    shed: dict = {}
    total = scale(x, coeff(0)) if r_min == 0 else Interaction.zero(x.lattice, x.n)
    term = x
    prev = _mass(x, trunc.kappa, sigma)
    if g.is_zero or x.is_zero:
        return total, info
    for r in range(1, max_terms + 1):
        term = commutator(g, term, max_support=trunc.max_support, fft=trunc.fft,
                          drop_below=trunc.drop_below, shed=shed)
        term = _cap_modes(term, trunc.mode_cap, shed)
        info.terms = r
        cur = _mass(term, trunc.kappa, sigma)
        if r >= r_min:
            c = coeff(r)
            total = total + scale(term, c)
            m = abs(c) * cur
            ref = _mass(total, trunc.kappa, sigma)
            if m <= tol * ref or cur == 0.0:
                rho = cur / prev if prev > 0 else 0.0
                ratio = rho * abs(coeff(r + 1)) / abs(c) if c != 0 else 0.0
                info.tail = m * ratio / (1 - ratio) if ratio < 1 else m
                break
        prev = cur
    else:
        raise SeriesDivergence(f"commutator series did not decay within {max_terms} terms")
    info.shed = _shed_weight(shed, trunc.kappa)
    return total, info


def ad_exp(g: Interaction, a: Interaction, kappa: float, delta: float, tol: float = 1e-14,
           *, sigma: float = 0.0, eta: float = 1.0, max_terms: int = 40,
           info: SeriesInfo | None = None) -> Interaction:
    """``e^{G} A e^{-G} = sum_r Ad^r_G A / r!``.

    The smallness quantity ``4 e^{-kappa} ||G||_{kappa+delta,sigma} / delta`` is
    recorded in ``info`` (when given) and a warning is issued when it exceeds
    ``eta``.
    """
    small = 4 * math.exp(-kappa) * norm_kappa_sigma(g, kappa + delta, sigma).value / delta
    if small > eta:
        warnings.warn(f"commutator series smallness {small:.3g} exceeds {eta}", RuntimeWarning,
                      stacklevel=2)
    res, inf = ad_series(g, a, lambda r: 1.0 / math.factorial(r), tol=tol, max_terms=max_terms,
                         sigma=sigma, trunc=_Trunc(kappa=kappa))
    inf.smallness = small
    if info is not None:
        info.__dict__.update(inf.__dict__)
    return res


# ----------------------------------------------------------------------------
# iteration


@dataclass(frozen=True)
class NFState:
    h0: Interaction
    z: Interaction
    v: Interaction
    r: Interaction

    def total(self) -> Interaction:
        return self.h0 + self.z + self.v + self.r


@dataclass
class NFStepRecord:
    """Diagnostics of one step: norms of the incoming state and the lemma checks."""

    n: int
    kappa: float
    norms: dict
    checks: dict = field(default_factory=dict)
    truncation_mass: float = 0.0
    residual: float = 0.0
    margins: dict = field(default_factory=dict)
    series_terms: int = 0
    generator: Interaction | None = field(default=None, repr=False)

    def row(self) -> dict:
        out = {"n": self.n, "kappa": self.kappa, "normZ": self.norms["Z"], "normV": self.norms["V"],
               "normR": self.norms["R"], "normG": self.norms.get("G", 0.0),
               "residual": self.residual}
        for k, v in self.checks.items():
            out[f"check_{k}"] = int(bool(v))
        out["truncation_mass"] = self.truncation_mass
        return out


def _state_norms(st: NFState, kappa: float, sigma: float, shed_total: float) -> dict:
    return {"Z": norm_kappa(st.z, kappa).value,
            "V": norm_kappa_sigma(st.v, kappa, sigma).value,
            # certified upper bound of the C^0 norm plus everything shed so far
            "R": norm_kappa_sigma(st.r, kappa, 0.0).value + shed_total}


def nf_step(state: NFState, schedule: NFSchedule, n: int, nu: DiophantineVector,
            config: NFConfig | None = None, *, v_cp: float = 1.0,
            shed_total: float = 0.0) -> tuple[NFState, NFStepRecord]:
    """One conjugation step ``n -> n + 1``.

    ``v_cp`` is the certified ``||V||_{kappa,C^p}`` of the original perturbation
    used in the displayed bounds and ``shed_total`` the truncation mass carried
    so far.  The generator is attached to the returned record.
    """
    cfg = config or NFConfig()
    if not 0 <= n < schedule.n_star:
        raise ValueError("step index outside schedule")
    lam, sig, K = schedule.lam, schedule.sigma, schedule.K
    kn, kn1, delta = schedule.kappa(n), schedule.kappa(n + 1), schedule.delta
    C, b = cfg.C_hat, schedule.b
    norms = _state_norms(state, kn, sig, shed_total)

    v = state.v
    vmean = average(v)
    ir, uv = uv_ir_split(v, K)
    w = (ir - vmean).hermitized()
    g = solve_homological(scale(v, 1.0 / lam), nu, K).hermitized()
    residual = homological_residual(g, scale(v, 1.0 / lam), nu, K)
    ref = norm_kappa_sigma(scale(v, 1.0 / lam), 0.0, 0.0).value
    g_norm = norm_kappa_sigma(g, kn, sig).value
    norms["G"] = g_norm
    smallness = 4 * math.exp(-kn1) * g_norm / delta

    scale_ref = max(_mass(state.h0, 0, 0), _mass(v, 0, 0), 1e-300)
    trunc = _Trunc(max_support=cfg.max_support,
                   mode_cap=cfg.mode_cap if cfg.mode_cap is not None else 4 * K,
                   drop_below=cfg.prune_rtol * scale_ref, fft=cfg.fft, kappa=kn)
    gm = scale(g, -1j)
    fact = math.factorial
    a_total = state.h0 + state.z + v
    s1, i1 = ad_series(gm, a_total, lambda r: 1.0 / fact(r), r_min=1, tol=cfg.series_tol,
                       max_terms=cfg.max_terms, sigma=sig, trunc=trunc)
    s2, i2 = ad_series(gm, w, lambda r: 1.0 / fact(r + 1), r_min=1, tol=cfg.series_tol,
                       max_terms=cfg.max_terms, sigma=sig, trunc=trunc)
    s3, i3 = ad_series(gm, state.r, lambda r: 1.0 / fact(r), r_min=1, tol=cfg.series_tol,
                       max_terms=cfg.max_terms, sigma=0.0, trunc=trunc)
    v_new = (s1 - s2).hermitized()
    z_new = (state.z + vmean).hermitized()
    r_new = (state.r + s3 + uv).hermitized()
    new = NFState(state.h0, z_new, v_new, r_new)
    step_mass = i1.shed + i2.shed + i3.shed + i1.tail + i2.tail + i3.tail

    nxt = _state_norms(new, kn1, sig, shed_total + step_mass)
    geo = lambda m: sum(math.exp(-j) for j in range(m + 1))  # noqa: E731
    bounds = {
        "G_bound": (g_norm, schedule.K ** nu.tau / (nu.gamma_certified * lam) * norms["V"]),
        "small": (smallness, 0.5),
        "Z_bound": (nxt["Z"], C * lam ** (-b) * geo(n) * v_cp),
        "V_bound": (nxt["V"], C * lam ** (-b) * math.exp(-(n + 1)) * v_cp),
        "R_bound": (nxt["R"], C * geo(n + 1) * sig ** schedule.p * v_cp),
    }
    if n == 0:
        bounds["V0_bound"] = (norms["V"], C * v_cp)
    checks = {k: bool(val <= lim * (1 + 1e-12)) if k != "small" else bool(val < lim)
              for k, (val, lim) in bounds.items()}
    checks["residual"] = bool(residual <= cfg.residual_tol * max(ref, 1e-300))
    if n == 0:
        checks["mean_zero"] = vmean.is_zero
    rec = NFStepRecord(n=n, kappa=kn, norms=norms, checks=checks, truncation_mass=step_mass,
                       residual=residual / ref if ref > 0 else 0.0,
                       margins={k: val / lim if lim > 0 else math.inf for k, (val, lim) in bounds.items()},
                       series_terms=i1.terms + i2.terms + i3.terms, generator=g)
    return new, rec


@dataclass
class NFResult:
    h_eff: Interaction
    v_fin: Interaction
    r_fin: Interaction
    generators: list
    transcript: list
    schedule: NFSchedule
    nu: DiophantineVector
    v_cp: float
    truncation_mass: float
    final: dict = field(default_factory=dict)

    def remainder_norm(self) -> float:
        """Certified C^0 bound of ``V_fin + R_fin`` at the final locality."""
        k = self.schedule.kappa(self.schedule.n_star)
        return norm_kappa_sigma(self.v_fin + self.r_fin, k, 0.0).value + self.truncation_mass

    def norm_table(self) -> list[dict]:
        return [rec.row() for rec in self.transcript]

    def norm_csv(self) -> str:
        from .io import csv_text
        rows = self.norm_table()
        keys: list[str] = []
        for r in rows:
            keys += [k for k in r if k not in keys]
        return csv_text(keys, [[r.get(k, "") for k in keys] for r in rows])

    def manifest(self, sidecars: dict | None = None) -> dict:
        return {"schedule": self.schedule.to_dict(),
                "nu": list(self.nu.nu), "tau": self.nu.tau, "gamma": self.nu.gamma_certified,
                "gamma_L_max": self.nu.L_max, "V_cp_upper": self.v_cp,
                "truncation_mass": self.truncation_mass, "final": self.final,
                "interactions": sidecars or {}}

    def save(self, out_dir, prefix: str = "nf") -> dict:
        """Write the norm table, the interactions and a JSON manifest."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {}
        for name, obj in (("h_eff", self.h_eff), ("v_fin", self.v_fin), ("r_fin", self.r_fin)):
            fn = f"{prefix}_{name}.json"
            (out / fn).write_text(json.dumps(to_json(obj), sort_keys=True))
            files[name] = fn
        gfn = f"{prefix}_generators.json"
        (out / gfn).write_text(json.dumps([to_json(g) for g in self.generators], sort_keys=True))
        files["generators"] = gfn
        tfn = f"{prefix}_norms.csv"
        (out / tfn).write_bytes(self.norm_csv().encode())
        files["norm_table"] = tfn
        man = self.manifest(files)
        (out / f"{prefix}_manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True))
        return man


def run_normal_form(h0: Interaction, v: Interaction, schedule: NFSchedule, nu: DiophantineVector,
                    config: NFConfig | None = None) -> NFResult:
    """Smooth ``V`` and run ``n_star`` normal-form steps.

    The angle average of ``V`` is moved into ``H0`` first.
    """
    cfg = config or NFConfig()
    if not h0.is_constant:
        raise ValueError("H0 must be time independent")
    if not h0.hermitian or not v.hermitian:
        raise ValueError("H0 and V must be Hermitian")
    if v.n != nu.n:
        raise ValueError("angle count of V does not match nu")
    if schedule.p < v.n + 1:
        raise ValueError("p must be at least n + 1")
    if schedule.lam < cfg.lambda_floor:
        raise ValueError(f"lambda {schedule.lam} below the configured floor {cfg.lambda_floor}")
    vmean = average(v)
    h0 = (h0 + vmean).hermitized()
    v = v - vmean
    k0 = schedule.kappa0
    v_cp = norm_kappa_cp(v, k0, schedule.p, grid=cfg.cp_grid)[1].value if not v.is_zero else 0.0

    sm = smooth(v, schedule.sigma)
    zero = Interaction.zero(v.lattice, v.n)
    state = NFState(h0, zero, sm.smoothed, sm.remainder)
    transcript: list[NFStepRecord] = []
    gens = []
    shed_total = 0.0
    # an undriven system is already in normal form: no steps, empty chain
    for n in range(schedule.n_star if not v.is_zero else 0):
        try:
            state, rec = nf_step(state, schedule, n, nu, cfg, v_cp=v_cp, shed_total=shed_total)
        except (SeriesDivergence, ResonanceError, ValueError) as exc:
            raise NormalFormError(f"step {n} failed: {exc}", transcript) from exc
        shed_total += rec.truncation_mass
        transcript.append(rec)
        gens.append(rec.generator)
    kf = schedule.kappa(schedule.n_star)
    fin = NFStepRecord(n=schedule.n_star, kappa=kf,
                       norms=_state_norms(state, kf, schedule.sigma, shed_total))
    transcript.append(fin)
    res = NFResult(h_eff=(state.h0 + state.z).hermitized(), v_fin=state.v, r_fin=state.r,
                   generators=gens, transcript=transcript, schedule=schedule, nu=nu,
                   v_cp=v_cp, truncation_mass=shed_total)
    lam, b = schedule.lam, schedule.b
    decay = schedule.p * schedule.exponent
    zf = norm_kappa(state.z, kf).value
    vr = res.remainder_norm()
    res.final = {
        "normZ": zf, "normVR": vr,
        "Z_scaled": zf * lam ** b / v_cp if v_cp else 0.0,
        "VR_scaled": vr * lam ** decay / v_cp if v_cp else 0.0,
        "Z_bound": bool(zf <= cfg.C_hat * lam ** (-b) * math.e / (math.e - 1) * v_cp * (1 + 1e-12)),
        "all_step_checks": all(all(r.checks.values()) for r in transcript),
    }
    return res


def conjugate_chain(generators: Sequence[Interaction], a: Interaction, direction: str = "forward",
                    *, tol: float = 1e-14, max_terms: int = 40) -> Interaction:
    """Apply ``Y^(n) = exp(-i G^(n))`` conjugations in order (or their inverses).

    ``forward`` gives ``Y A Y^*`` with ``Y = Y^(N-1) ... Y^(0)``; ``inverse``
    gives ``Y^* A Y``.
    """
    if direction not in ("forward", "inverse"):
        raise ValueError("direction must be 'forward' or 'inverse'")
    seq = list(generators) if direction == "forward" else list(generators)[::-1]
    sgn = -1j if direction == "forward" else 1j
    fact = math.factorial
    for g in seq:
        a, _ = ad_series(scale(g, sgn), a, lambda r: 1.0 / fact(r), tol=tol, max_terms=max_terms)
    return a

