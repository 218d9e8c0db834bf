"""Shared helpers: independent dense oracles and the acceptance report hook."""
from __future__ import annotations

import numpy as np
import pytest
import scipy.linalg as sla

from prethermal.algebra import Interaction, LatticeSpec
from prethermal.models import random_interaction

# lines printed at the end of the session by the acceptance suite
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def chain(n_sites: int) -> LatticeSpec:
    return LatticeSpec.chain(n_sites)


def rand_int(seed: int, n_sites: int = 3, n: int = 2, **kw) -> Interaction:
    kw.setdefault("max_mode", 3)
    return random_interaction(chain(n_sites), n, np.random.default_rng(seed), **kw)


# ---------------------------------------------------------------------------
# oracles written independently of the library code paths


def dense_at(a: Interaction, phi) -> np.ndarray:
    """Assemble ``sum_S A_S(phi)`` with explicit Kronecker products."""
    lat = a.lattice
    N = lat.size
    q = lat.q
    phi = np.asarray(phi, dtype=float)
    out = np.zeros((q ** N, q ** N), dtype=complex)
    for term in a:
        s = term.support
        tm = term.payload
        loc = sum(c * np.exp(1j * float(m @ phi)) for m, c in zip(tm.modes, tm.coeffs))
        # the support is a contiguous run of sites in a chain
        assert list(s) == list(range(s[0], s[-1] + 1))
        left = np.eye(q ** s[0])
        right = np.eye(q ** (N - s[-1] - 1))
        out += np.kron(np.kron(left, loc), right)
    return out


def svd_norm(m) -> float:
    return float(np.linalg.svd(np.asarray(m), compute_uv=False)[0]) if np.size(m) else 0.0


def kappa_sigma_oracle(a: Interaction, kappa: float, sigma: float) -> float:
    """``sup_x sum_{S ni x} e^{kappa|S|} sum_l ||A_S(l)|| e^{sigma|l|}`` by explicit loops."""
    best = 0.0
    for x in range(a.lattice.size):
        acc = 0.0
        for term in a:
            if x not in term.support:
                continue
            w = 0.0
            for m, c in zip(term.payload.modes, term.payload.coeffs):
                w += svd_norm(c) * np.exp(sigma * np.abs(m).sum())
            acc += np.exp(kappa * len(term.support)) * w
        best = max(best, acc)
    return best


def power_iteration_norm(m: np.ndarray, iters: int = 5000, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``M^* M``."""
    g = np.asarray(m).conj().T @ np.asarray(m)
    v = np.random.default_rng(seed).normal(size=g.shape[0]) + 0j
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = g @ v
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 0.0
        v = w / nrm
        new = float(np.real(np.vdot(v, g @ v)))
        if abs(new - lam) <= 1e-15 * max(new, 1e-300):
            lam = new
            break
        lam = new
    return float(np.sqrt(max(lam, 0.0)))


def expm_dense(m: np.ndarray) -> np.ndarray:
    return sla.expm(m)
