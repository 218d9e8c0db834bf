"""Analytic smoothing of interactions by a compactly supported Fourier multiplier.

``A_sigma`` keeps the Fourier coefficients ``chi(sigma l) A(l)`` where ``chi`` is
an even bump equal to one on the l1 ball of radius 1/2 and vanishing outside
the unit l1 ball.  The remainder carries ``(1 - chi(sigma l)) A(l)``, so the
split is exact coefficient by coefficient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .algebra import Interaction, TrigMatrix, mode_l1

__all__ = ["BumpProfile", "SmoothingResult", "chi", "smooth", "smooth_step"]


def _g(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = np.exp(-1.0 / x[pos])
    return out


def smooth_step(s):
    """C-infinity step: 0 for s <= 0, 1 for s >= 1, built from exp(-1/x)."""
    s = np.asarray(s, dtype=float)
    a, b = _g(s), _g(1.0 - s)
    return a / (a + b)


@dataclass(frozen=True)
class BumpProfile:
    """Radial profile in the l1 norm: one inside ``r_inner``, zero beyond ``r_outer``."""

    r_inner: float = 0.5
    r_outer: float = 1.0

    def __post_init__(self):
        if not 0 < self.r_inner < self.r_outer:
            raise ValueError("need 0 < r_inner < r_outer")

    def radial(self, r):
        s = (np.asarray(r, dtype=float) - self.r_inner) / (self.r_outer - self.r_inner)
        return 1.0 - smooth_step(s)


DEFAULT_PROFILE = BumpProfile()


def chi(xi, profile: BumpProfile = DEFAULT_PROFILE):
    """Bump value at ``xi`` (shape ``(n,)`` or ``(..., n)``)."""
    xi = np.asarray(xi, dtype=float)
    r = np.abs(xi).sum(axis=-1)
    out = profile.radial(r)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class SmoothingResult:
    smoothed: Interaction
    remainder: Interaction
    sigma: float


def smooth(a: Interaction, sigma: float, profile: BumpProfile = DEFAULT_PROFILE) -> SmoothingResult:
    """Split ``A = A_sigma + R`` with ``A_sigma`` analytic of width ``sigma``."""
    if not 0.0 < sigma < 1.0:
        raise ValueError(f"sigma must lie in (0, 1), got {sigma}")
    sm, rem = {}, {}
    for s, tm in a.terms.items():
        w = profile.radial(sigma * mode_l1(tm.modes))
        keep = w > 0
        drop = w < 1
        if keep.any():
            sm[s] = TrigMatrix(tm.modes[keep], tm.coeffs[keep] * w[keep, None, None], canonical=True)
        if drop.any():
            r = tm.coeffs[drop] * (1.0 - w[drop])[:, None, None]
            rem[s] = TrigMatrix(tm.modes[drop], r, canonical=True)
    return SmoothingResult(Interaction(a.lattice, a.n, sm, validate=False),
                           Interaction(a.lattice, a.n, rem, validate=False), float(sigma))
