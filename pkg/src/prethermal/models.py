"""Model families: random trig-polynomial interactions and benchmark chains."""
from __future__ import annotations

import numpy as np

from .algebra import (
    SIGMA1, SIGMA3, Interaction, LatticeSpec, TrigMatrix, site_sum,
)

GOLDEN = (1.0 + 5.0 ** 0.5) / 2.0


def mode_box(n: int, max_mode: int) -> np.ndarray:
    """All integer vectors with ``|l|_1 <= max_mode``."""
    r = np.arange(-max_mode, max_mode + 1)
    g = np.stack(np.meshgrid(*([r] * n), indexing="ij"), -1).reshape(-1, n)
    return g[np.abs(g).sum(1) <= max_mode]


def random_trig(rng: np.random.Generator, n: int, dim: int, max_mode: int, decay: float = 0.0,
                n_modes: int | None = None, hermitian: bool = True,
                amplitude: float = 1.0) -> TrigMatrix:
    """Random trig polynomial with coefficients of size ``(1 + |l|)^{-decay}``.

    With ``n_modes`` set, only that many random modes (and their mirrors when
    Hermitian) are populated; otherwise every mode with ``|l|_1 <= max_mode``.
    """
    modes = mode_box(n, max_mode)
    if n_modes is not None and n_modes < len(modes):
        modes = modes[rng.choice(len(modes), n_modes, replace=False)]
    c = rng.normal(size=(len(modes), dim, dim)) + 1j * rng.normal(size=(len(modes), dim, dim))
    c /= np.linalg.norm(c, axis=(1, 2), keepdims=True)
    c *= amplitude * (1.0 + np.abs(modes).sum(1))[:, None, None] ** (-decay)
    tm = TrigMatrix(modes, c, n=n)
    return tm.hermitized() if hermitian else tm


def random_interaction(lattice: LatticeSpec, n: int, rng: np.random.Generator, *,
                       max_mode: int = 3, decay: float = 0.0, n_modes: int | None = None,
                       max_range: int = 2, hermitian: bool = True, n_terms: int | None = None,
                       amplitude: float = 1.0) -> Interaction:
    """Random interaction on single sites and nearest-neighbour bonds of a chain.

    ``max_range`` is the largest support size (1 or 2 along the first axis; for
    ``d > 1`` only supports along the first axis are generated).
    """
    sups = []
    for i, c in enumerate(lattice.coords):
        sups.append((i,))
        if max_range >= 2:
            c2 = (c[0] + 1,) + c[1:]
            if c2[0] <= lattice.upper:
                sups.append(tuple(sorted((i, lattice.site(c2)))))
    if n_terms is not None and n_terms < len(sups):
        idx = rng.choice(len(sups), n_terms, replace=False)
        sups = [sups[i] for i in sorted(idx)]
    terms = {s: random_trig(rng, n, lattice.q ** len(s), max_mode, decay, n_modes, hermitian,
                            amplitude) for s in sups}
    return Interaction(lattice, n, terms)


def ising_h0(lattice: LatticeSpec, h: float = 1.0, J: float = 0.5, n: int = 2) -> Interaction:
    """``h sum_x sigma3_x + J sum_<xy> sigma1_x sigma1_y`` on a chain (constant in the angles)."""
    h0 = site_sum(lattice, TrigMatrix.constant(h * SIGMA3, n))
    if J and lattice.size > 1:
        bond = TrigMatrix.constant(J * np.kron(SIGMA1, SIGMA1), n)
        terms = {}
        for i, c in enumerate(lattice.coords):
            c2 = (c[0] + 1,) + c[1:]
            if c2[0] <= lattice.upper:
                terms[(i, lattice.site(c2))] = bond
        h0 = h0 + Interaction(lattice, n, terms)
    return h0


def chain_benchmark(L: int = 1, *, amplitude: float = 0.02, max_mode: int = 48,
                    decay: float = 6.0, seed: int = 7, h: float = 1.0,
                    J: float = 0.5, lattice: LatticeSpec | None = None,
                    couplings: tuple[str, ...] = ("xx", "zz")) -> tuple[Interaction, Interaction]:
    """Driven Ising chain with a finitely smooth two-angle nearest-neighbour drive.

    ``V = sum_<xy> f(phi) sigma1_x sigma1_y + g(phi) sigma3_x sigma3_y`` where
    ``f, g`` are real trig polynomials with random phases and coefficient
    envelope ``(1 + |l|)^{-decay}`` up to ``|l|_1 <= max_mode``; ``decay = p +
    n + 1`` makes the family uniformly bounded in ``C^p``.  ``lattice``
    overrides the chain ``[-L, L]``; ``couplings`` selects which of the two
    bond operators are driven.
    """
    lat = LatticeSpec(1, L) if lattice is None else lattice
    rng = np.random.default_rng(seed)
    n = 2
    h0 = ising_h0(lat, h, J, n)
    modes = mode_box(n, max_mode)
    env = (1.0 + np.abs(modes).sum(1)) ** (-decay)

    def scalar_poly():
        c = env * np.exp(2j * np.pi * rng.random(len(modes))) * amplitude
        c = 0.5 * (c + np.conj(c[_mirror(modes)]))
        c[~modes.any(1)] = 0.0
        return c

    ops = {"xx": np.kron(SIGMA1, SIGMA1), "zz": np.kron(SIGMA3, SIGMA3)}
    if not couplings or any(c not in ops for c in couplings):
        raise ValueError(f"couplings must be a non-empty subset of {sorted(ops)}")
    terms = {}
    for i in range(lat.size - 1):
        polys = {c: scalar_poly() for c in ("xx", "zz")}
        coeffs = sum(polys[c][:, None, None] * ops[c] for c in couplings)
        terms[(i, i + 1)] = TrigMatrix(modes, coeffs, n=n)
    return h0, Interaction(lat, n, terms)


def _mirror(modes: np.ndarray) -> np.ndarray:
    """Index of ``-l`` for every ``l`` in a symmetric mode set."""
    lookup = {tuple(m): i for i, m in enumerate(modes)}
    return np.array([lookup[tuple(-m)] for m in modes])
