"""Unitary propagators for Hamiltonians that are finite exponential sums.

``H(t) = sum_j exp(i w_j t) A_j`` with constant matrices ``A_j``.  The fourth
order Magnus integrator below evaluates the first two Magnus terms with the
exact oscillatory integrals of the exponentials, so its accuracy does not
degrade with the size of the frequencies ``w_j``; step sizes are controlled by
step doubling.  Commutator-free exponential steppers (orders 2 and 4) are
provided for dense lattice propagation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["ExpSum", "phi1", "double_integral", "magnus_step", "MagnusResult",
           "integrate_magnus", "expm_hermitian", "cf_step"]


def phi1(x):
    """``int_0^1 exp(i x s) ds`` evaluated without cancellation."""
    x = np.asarray(x, dtype=float)
    return np.sinc(x / np.pi) + 1j * np.sin(x / 2) * np.sinc(x / (2 * np.pi))


_TAYLOR_ORDER = 24
_m, _k = np.meshgrid(np.arange(_TAYLOR_ORDER), np.arange(_TAYLOR_ORDER), indexing="ij")
_fact = np.cumprod(np.concatenate([[1.0], np.arange(1, _TAYLOR_ORDER, dtype=float)]))
_TAYLOR_C = np.where(_m + _k < _TAYLOR_ORDER,
                     1.0 / (_fact[_m] * _fact[_k] * (_k + 1) * (_m + _k + 2)), 0.0)


def _taylor_F(x, y):
    # sum_{m,k} (ix)^m (iy)^k / (m! k! (k+1)(m+k+2))
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    p = np.arange(_TAYLOR_ORDER)
    px = (1j * x[:, None]) ** p
    py = (1j * y[:, None]) ** p
    return np.einsum("nm,mk,nk->n", px, _TAYLOR_C, py)


def double_integral(x, y):
    """``F(x, y) = int_0^1 ds int_0^s du exp(i x s + i y u)``.

    Uses whichever of the two closed forms divides by the larger argument and
    a double Taylor series when both arguments are small.
    """
    x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    out = np.empty(x.shape, dtype=complex)
    ax, ay = np.abs(x), np.abs(y)
    small = np.maximum(ax, ay) < 0.5
    use_y = ~small & (ay >= ax)
    use_x = ~small & (ax > ay)
    if use_y.any():
        xv, yv = x[use_y], y[use_y]
        out[use_y] = (phi1(xv + yv) - phi1(xv)) / (1j * yv)
    if use_x.any():
        xv, yv = x[use_x], y[use_x]
        out[use_x] = (np.exp(1j * xv) * phi1(yv) - phi1(xv + yv)) / (1j * xv)
    if small.any():
        out[small] = _taylor_F(x[small], y[small])
    return out


@dataclass
class ExpSum:
    """``H(t) = sum_j exp(i w_j t) A_j``; the sum must be Hermitian for real t."""

    freqs: np.ndarray
    mats: np.ndarray

    def __post_init__(self):
        self.freqs = np.asarray(self.freqs, dtype=float)
        self.mats = np.asarray(self.mats, dtype=complex)
        j = len(self.freqs)
        iu, ju = np.triu_indices(j, 1)
        self._pi, self._pj = iu, ju
        a, b = self.mats[iu], self.mats[ju]
        self._comm = a @ b - b @ a
        keep = np.linalg.norm(self._comm, axis=(1, 2)) > 0
        self._pi, self._pj, self._comm = iu[keep], ju[keep], self._comm[keep]

    @property
    def dim(self) -> int:
        return self.mats.shape[1]

    @property
    def norm_bound(self) -> float:
        """``sum_j ||A_j||`` bounds ``||H(t)||`` for all t."""
        return float(sum(np.linalg.norm(m, 2) for m in self.mats))

    def __call__(self, t: float) -> np.ndarray:
        return np.tensordot(np.exp(1j * self.freqs * t), self.mats, axes=(0, 0))

    def scaled(self, c: float) -> "ExpSum":
        return ExpSum(self.freqs, self.mats * c)


def expm_hermitian(h: np.ndarray, t: float = 1.0) -> np.ndarray:
    """``exp(-i t h)`` for Hermitian ``h`` via an eigendecomposition."""
    h = 0.5 * (h + h.conj().T)
    if h.shape[0] == 2:
        a0 = 0.5 * (h[0, 0] + h[1, 1]).real
        hz = 0.5 * (h[0, 0] - h[1, 1]).real
        hx, hy = h[0, 1].real, -h[0, 1].imag
        r = np.sqrt(hx * hx + hy * hy + hz * hz)
        c, s = np.cos(r * t), (np.sin(r * t) / r if r > 0 else t)
        u = np.array([[c - 1j * s * hz, -1j * s * (hx - 1j * hy)],
                      [-1j * s * (hx + 1j * hy), c + 1j * s * hz]])
        return np.exp(-1j * a0 * t) * u
    w, v = np.linalg.eigh(h)
    return (v * np.exp(-1j * t * w)) @ v.conj().T


def magnus_step(hs: ExpSum, t0: float, h: float) -> np.ndarray:
    """One step of the exact-quadrature fourth order Magnus method."""
    x = hs.freqs * h
    ph = np.exp(1j * hs.freqs * t0)
    # Hermitian "effective Hamiltonian" Omega = -i M with M = M1 + M2
    m1 = h * np.tensordot(ph * phi1(x), hs.mats, axes=(0, 0))
    if len(hs._pi):
        xi, xj = x[hs._pi], x[hs._pj]
        w2 = ph[hs._pi] * ph[hs._pj] * (double_integral(xi, xj) - double_integral(xj, xi))
        # Omega2 = -1/2 h^2 sum w2 [A_i, A_j] = -i M2
        m2 = -0.5j * h * h * np.tensordot(w2, hs._comm, axes=(0, 0))
        m = m1 + m2
    else:
        m = m1
    return expm_hermitian(m)


_ROUNDOFF = 64 * np.finfo(float).eps


@dataclass
class MagnusResult:
    times: np.ndarray
    states: np.ndarray
    steps: int
    rejected: int
    complete: bool
    max_err: float


def integrate_magnus(hs: ExpSum, psi0: np.ndarray, t_samples: np.ndarray, *, t0: float = 0.0,
                     rel_tol: float = 1e-10, abs_tol: float = 1e-12, max_steps: int = 10 ** 7,
                     h0: float | None = None) -> MagnusResult:
    """Adaptive step-doubling Magnus integration with output at ``t_samples``.

    A step of size ``h`` is accepted when the difference between one full step
    and two half steps is at most ``rel_tol * g * h + abs_tol * h / T`` with
    ``g`` a bound on ``||H||`` and ``T`` the horizon, so the accumulated error
    stays near ``rel_tol`` times the total rotation angle plus ``abs_tol``.
    The two-half-step result is propagated.  Differences at the round-off
    level are always accepted.
    """
    ts = np.asarray(t_samples, dtype=float)
    if np.any(np.diff(ts) < 0) or (len(ts) and ts[0] < t0):
        raise ValueError("sample times must be increasing and start at or after t0")
    g = max(hs.norm_bound, 1e-300)
    horizon = max(ts[-1] - t0, 1e-300) if len(ts) else 1.0
    h_max = 0.5 / g
    h = min(h0 or 0.05 / g, h_max)
    psi = np.asarray(psi0, dtype=complex).copy()
    out = np.empty((len(ts), len(psi)), dtype=complex)
    t = t0
    k = 0
    while k < len(ts) and ts[k] <= t:
        out[k] = psi
        k += 1
    steps = rejected = 0
    max_err = 0.0
    while k < len(ts):
        if steps + rejected >= max_steps:
            return MagnusResult(ts[:k], out[:k], steps, rejected, False, max_err)
        h_try = min(h, ts[k] - t)
        full = magnus_step(hs, t, h_try) @ psi
        half = magnus_step(hs, t, h_try / 2) @ psi
        half = magnus_step(hs, t + h_try / 2, h_try / 2) @ half
        err = float(np.linalg.norm(full - half))
        # never ask for less than round-off can deliver
        tol = max(rel_tol * g * h_try + abs_tol * h_try / horizon, _ROUNDOFF)
        if err <= tol:
            hit = h_try >= ts[k] - t
            t = ts[k] if hit else t + h_try
            psi = half
            steps += 1
            max_err = max(max_err, err)
            while k < len(ts) and ts[k] <= t:
                out[k] = psi
                k += 1
            fac = 5.0 if err == 0 else min(5.0, max(0.2, 0.9 * (tol / err) ** 0.25))
            if not hit or h_try >= h:
                h = min(h_max, h_try * fac)
        else:
            rejected += 1
            h = h_try * max(0.2, 0.9 * (tol / err) ** 0.25)
    return MagnusResult(ts, out, steps, rejected, True, max_err)


# ----------------------------------------------------------------------------
# commutator-free exponential steppers

_S3 = np.sqrt(3.0)
CF4_NODES = (0.5 - _S3 / 6, 0.5 + _S3 / 6)
CF4_A1, CF4_A2 = (3 - 2 * _S3) / 12, (3 + 2 * _S3) / 12


def cf_step(hfun, t: float, dt: float, order: int = 2) -> np.ndarray:
    """Commutator-free exponential step ``U(t + dt, t)``.

    ``order=2`` is the exponential midpoint rule; ``order=4`` the two-exponential
    scheme with Gauss nodes, ``exp(-i dt (a1 H1 + a2 H2)) exp(-i dt (a2 H1 + a1 H2))``.
    """
    if order == 2:
        return expm_hermitian(hfun(t + dt / 2), dt)
    if order == 4:
        h1, h2 = hfun(t + CF4_NODES[0] * dt), hfun(t + CF4_NODES[1] * dt)
        first = expm_hermitian(CF4_A2 * h1 + CF4_A1 * h2, dt)
        second = expm_hermitian(CF4_A1 * h1 + CF4_A2 * h2, dt)
        return second @ first
    raise ValueError("order must be 2 or 4")
