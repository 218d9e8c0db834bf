"""Quasi-local, angle-dependent interactions on a finite cubic lattice.

An :class:`Interaction` is a finite family of local terms ``A_S(phi)``, one per
connected support ``S`` of the lattice, whose angle dependence is a matrix-valued
trigonometric polynomial (:class:`TrigMatrix`).  All arithmetic is exact in
Fourier space; the three weighted norm families are

* ``||A||_kappa       = sup_x sum_{S ni x} ||A_S|| e^{kappa |S|}``  (constant A),
* ``||A||_{kappa,sig} = sup_x sum_{S ni x} e^{kappa |S|} sum_l ||A_S(l)|| e^{sig |l|}``,
* ``||A||_{kappa,C^p}``, the sup over derivatives of order ``<= p`` of the
  operator norm, reported as a (grid lower bound, certified upper bound) pair.

Conventions
-----------
Sites are indexed in lexicographic order of their coordinates.  Local tensor
spaces list the support sites in increasing index order with the first site
as the slowest index.  Supports are connected in the nearest-neighbour graph
(l1 distance one).  ``|l|`` always denotes the l1 norm of a mode vector.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "SIGMA0", "SIGMA1", "SIGMA2", "SIGMA3", "PAULI",
    "LatticeSpec", "SupportSet", "TrigMatrix", "LocalTerm", "Interaction", "NormReport",
    "norm_kappa", "norm_kappa_sigma", "norm_kappa_cp", "average", "commutator",
    "add", "scale", "dagger", "uv_ir_split", "assemble_global", "op_norm",
    "embed_matrix", "to_json", "from_json", "dumps", "loads",
    "site_sum", "mode_l1",
]

SIGMA0 = np.eye(2, dtype=complex)
SIGMA1 = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA2 = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA3 = np.array([[1, 0], [0, -1]], dtype=complex)
PAULI = {"I": SIGMA0, "X": SIGMA1, "Y": SIGMA2, "Z": SIGMA3}

MAX_LOCAL_DIM = 256
DEFAULT_GLOBAL_CAP = 4096
HERMITIAN_RTOL = 1e-12

SupportSet = tuple  # sorted tuple of site indices


def mode_l1(modes: np.ndarray) -> np.ndarray:
    """l1 norms of an ``(M, n)`` array of integer modes."""
    return np.abs(modes).sum(axis=-1)


def op_norm(m: np.ndarray) -> float:
    """Largest singular value of a square matrix."""
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("op_norm expects a square matrix")
    if m.size == 0:
        return 0.0
    return float(np.linalg.svd(m, compute_uv=False)[0])


def _batch_op_norms(c: np.ndarray) -> np.ndarray:
    if c.shape[0] == 0:
        return np.zeros(0)
    if c.shape[-1] == 1:
        return np.abs(c[:, 0, 0])
    return np.linalg.svd(c, compute_uv=False)[:, 0]


# ----------------------------------------------------------------------------
# lattice


@dataclass(frozen=True)
class LatticeSpec:
    """Finite cubic lattice ``Z^d ∩ [-L, L]^d`` with on-site dimension ``q``.

    ``width`` optionally overrides the ``2L + 1`` sites per axis, giving the box
    ``[-L, -L + width - 1]^d`` (used for chains with an even number of sites).
    """

    d: int
    L: int
    q: int = 2
    width: int | None = None

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ValueError("d must be a positive integer")
        if int(self.L) != self.L or self.L < 0:
            raise ValueError("L must be a non-negative integer")
        if int(self.q) != self.q or self.q < 1:
            raise ValueError("q must be a positive integer")
        if self.width is not None and (int(self.width) != self.width or self.width < 1):
            raise ValueError("width must be a positive integer")

    @classmethod
    def chain(cls, n_sites: int, q: int = 2) -> "LatticeSpec":
        """One-dimensional chain with ``n_sites`` sites, centred as far as possible."""
        L = n_sites // 2
        return cls(1, L, q, None if n_sites == 2 * L + 1 else n_sites)

    @property
    def side(self) -> int:
        return 2 * self.L + 1 if self.width is None else int(self.width)

    @property
    def upper(self) -> int:
        """Largest coordinate along each axis."""
        return -self.L + self.side - 1

    @property
    def size(self) -> int:
        return self.side ** self.d

    @cached_property
    def coords(self) -> tuple[tuple[int, ...], ...]:
        r = range(-self.L, self.upper + 1)
        return tuple(itertools.product(r, repeat=self.d))

    @cached_property
    def _index(self) -> dict[tuple[int, ...], int]:
        return {c: i for i, c in enumerate(self.coords)}

    @cached_property
    def neighbors(self) -> tuple[frozenset[int], ...]:
        out = []
        for c in self.coords:
            nb = set()
            for ax in range(self.d):
                for step in (-1, 1):
                    c2 = list(c)
                    c2[ax] += step
                    j = self._index.get(tuple(c2))
                    if j is not None:
                        nb.add(j)
            out.append(frozenset(nb))
        return tuple(out)

    def site(self, x) -> int:
        """Index of the site with coordinate ``x`` (an int is accepted when d = 1)."""
        key = (int(x),) if np.isscalar(x) else tuple(int(v) for v in x)
        try:
            return self._index[key]
        except KeyError:
            raise ValueError(f"site {key} outside lattice") from None

    def is_connected(self, sites: Iterable[int]) -> bool:
        s = set(sites)
        if not s:
            return False
        start = next(iter(s))
        seen, stack = {start}, [start]
        while stack:
            for j in self.neighbors[stack.pop()]:
                if j in s and j not in seen:
                    seen.add(j)
                    stack.append(j)
        return len(seen) == len(s)

    def support(self, sites: Iterable) -> SupportSet:
        """Validated support from site coordinates."""
        idx = sorted({self.site(x) for x in sites})
        return self.support_from_indices(idx)

    def support_from_indices(self, idx: Iterable[int]) -> SupportSet:
        s = tuple(sorted(set(int(i) for i in idx)))
        if not s:
            raise ValueError("support must be non-empty")
        if s[0] < 0 or s[-1] >= self.size:
            raise ValueError("site index out of range")
        if not self.is_connected(s):
            raise ValueError(f"support {s} is not connected")
        return s

    def local_dim(self, support: SupportSet) -> int:
        return self.q ** len(support)

    def to_dict(self) -> dict:
        out = {"d": self.d, "L": self.L, "q": self.q}
        if self.width is not None:
            out["width"] = int(self.width)
        return out


# ----------------------------------------------------------------------------
# trigonometric polynomials


_KEY_BITS = 20
_KEY_OFF = 1 << (_KEY_BITS - 1)


def _mode_keys(modes: np.ndarray) -> np.ndarray | None:
    n = modes.shape[1]
    if n * _KEY_BITS > 62 or (modes.size and np.abs(modes).max() >= _KEY_OFF):
        return None
    keys = np.zeros(modes.shape[0], dtype=np.int64)
    for j in range(n):
        keys = (keys << _KEY_BITS) + (modes[:, j] + _KEY_OFF)
    return keys


def _combine(modes: np.ndarray, coeffs: np.ndarray, drop_zero: bool = True):
    """Sort modes lexicographically and sum coefficients of duplicate modes."""
    if modes.shape[0] == 0:
        return modes, coeffs
    keys = _mode_keys(modes)
    if keys is not None:
        order = np.argsort(keys, kind="stable")
        ks = keys[order]
        starts = np.flatnonzero(np.r_[True, ks[1:] != ks[:-1]])
    else:
        order = np.lexsort(modes.T[::-1])
        ms = modes[order]
        starts = np.flatnonzero(np.r_[True, np.any(ms[1:] != ms[:-1], axis=1)])
    m = modes[order][starts]
    if starts.size == order.size:
        c = coeffs[order]
    else:
        c = np.add.reduceat(coeffs[order], starts, axis=0)
    if drop_zero:
        keep = np.any(c != 0, axis=(1, 2))
        if not keep.all():
            m, c = m[keep], c[keep]
    return m, c


class TrigMatrix:
    """Matrix-valued trigonometric polynomial ``sum_l C_l e^{i l.phi}``.

    Stored canonically: modes sorted lexicographically, no duplicates and no
    exactly-zero coefficients.  Instances are treated as immutable.
    """

    __slots__ = ("modes", "coeffs", "__dict__")

    def __init__(self, modes, coeffs, *, n: int | None = None, canonical: bool = False):
        coeffs = np.asarray(coeffs, dtype=complex)
        modes = np.asarray(modes, dtype=np.int64)
        if coeffs.ndim != 3 or coeffs.shape[1] != coeffs.shape[2]:
            raise ValueError("coeffs must have shape (M, D, D)")
        if modes.ndim == 1 and coeffs.shape[0] == 0:
            modes = modes.reshape(0, 0 if n is None else n)
        if modes.ndim != 2 or modes.shape[0] != coeffs.shape[0]:
            raise ValueError("modes must have shape (M, n) matching coeffs")
        if n is not None and modes.shape[1] != n:
            raise ValueError("mode dimension mismatch")
        if not canonical:
            modes, coeffs = _combine(modes, coeffs)
        self.modes = modes
        self.coeffs = coeffs
        self.modes.flags.writeable = False
        self.coeffs.flags.writeable = False

    # constructors ---------------------------------------------------------
    @classmethod
    def zero(cls, n: int, dim: int) -> "TrigMatrix":
        return cls(np.zeros((0, n), dtype=np.int64), np.zeros((0, dim, dim)), canonical=True)

    @classmethod
    def constant(cls, mat, n: int) -> "TrigMatrix":
        mat = np.asarray(mat, dtype=complex)
        return cls(np.zeros((1, n), dtype=np.int64), mat[None])

    @classmethod
    def from_dict(cls, d: Mapping[Sequence[int], np.ndarray], n: int | None = None) -> "TrigMatrix":
        items = list(d.items())
        if not items:
            raise ValueError("use TrigMatrix.zero for empty polynomials")
        modes = np.array([tuple(k) for k, _ in items], dtype=np.int64)
        coeffs = np.array([np.asarray(v, dtype=complex) for _, v in items])
        return cls(modes, coeffs, n=n)

    @classmethod
    def cosine(cls, l0: Sequence[int], mat, scale: complex = 1.0) -> "TrigMatrix":
        """``scale * cos(l0 . phi) * mat``."""
        l0 = tuple(int(v) for v in l0)
        mat = np.asarray(mat, dtype=complex) * scale
        if not any(l0):
            return cls.constant(mat, len(l0))
        neg = tuple(-v for v in l0)
        return cls.from_dict({l0: mat / 2, neg: mat / 2})

    @classmethod
    def sine(cls, l0: Sequence[int], mat, scale: complex = 1.0) -> "TrigMatrix":
        """``scale * sin(l0 . phi) * mat``."""
        l0 = tuple(int(v) for v in l0)
        mat = np.asarray(mat, dtype=complex) * scale
        if not any(l0):
            return cls.zero(len(l0), mat.shape[0])
        neg = tuple(-v for v in l0)
        return cls.from_dict({l0: mat / 2j, neg: -mat / 2j})

    # basic properties -----------------------------------------------------
    @property
    def n(self) -> int:
        return self.modes.shape[1]

    @property
    def dim(self) -> int:
        return self.coeffs.shape[1]

    def __len__(self) -> int:
        return self.modes.shape[0]

    @property
    def is_zero(self) -> bool:
        return len(self) == 0

    @property
    def is_constant(self) -> bool:
        return len(self) == 0 or (len(self) == 1 and not self.modes[0].any())

    @cached_property
    def op_norms(self) -> np.ndarray:
        return _batch_op_norms(self.coeffs)

    @cached_property
    def l1(self) -> np.ndarray:
        return mode_l1(self.modes)

    def max_mode(self) -> int:
        return int(self.l1.max()) if len(self) else 0

    def mean(self) -> np.ndarray:
        """Zero-mode coefficient (angle average)."""
        idx = np.flatnonzero(~self.modes.any(axis=1))
        if idx.size:
            return self.coeffs[idx[0]].copy()
        return np.zeros((self.dim, self.dim), dtype=complex)

    def coeff(self, l: Sequence[int]) -> np.ndarray:
        hit = np.flatnonzero((self.modes == np.asarray(l)).all(axis=1))
        if hit.size:
            return self.coeffs[hit[0]].copy()
        return np.zeros((self.dim, self.dim), dtype=complex)

    def to_dict(self) -> dict[tuple[int, ...], np.ndarray]:
        return {tuple(int(v) for v in m): c for m, c in zip(self.modes, self.coeffs)}

    # evaluation -----------------------------------------------------------
    def evaluate(self, phi) -> np.ndarray:
        """Value at angle(s) ``phi`` of shape ``(n,)`` or ``(..., n)``."""
        phi = np.asarray(phi, dtype=float)
        if len(self) == 0:
            return np.zeros(phi.shape[:-1] + (self.dim, self.dim), dtype=complex)
        ph = np.exp(1j * (phi @ self.modes.T))
        return np.tensordot(ph, self.coeffs, axes=(-1, 0))

    def derivative(self, multi_index: Sequence[int]) -> "TrigMatrix":
        """Exact partial derivative ``d^{p'}`` of the polynomial."""
        mi = np.asarray(multi_index, dtype=np.int64)
        fac = np.prod((1j * self.modes) ** mi, axis=1)
        return TrigMatrix(self.modes, self.coeffs * fac[:, None, None])

    # algebra --------------------------------------------------------------
    def __add__(self, other: "TrigMatrix") -> "TrigMatrix":
        if other.dim != self.dim or other.n != self.n:
            raise ValueError("incompatible trig matrices")
        return TrigMatrix(np.concatenate([self.modes, other.modes]),
                          np.concatenate([self.coeffs, other.coeffs]))

    def __neg__(self) -> "TrigMatrix":
        return TrigMatrix(self.modes, -self.coeffs, canonical=True)

    def __sub__(self, other: "TrigMatrix") -> "TrigMatrix":
        return self + (-other)

    def scaled(self, c: complex) -> "TrigMatrix":
        if c == 0:
            return TrigMatrix.zero(self.n, self.dim)
        return TrigMatrix(self.modes, self.coeffs * c, canonical=True)

    def multiply_modes(self, fac: np.ndarray) -> "TrigMatrix":
        """Multiply each coefficient by a per-mode scalar."""
        return TrigMatrix(self.modes, self.coeffs * np.asarray(fac)[:, None, None])

    def select(self, mask: np.ndarray) -> "TrigMatrix":
        return TrigMatrix(self.modes[mask], self.coeffs[mask], canonical=True)

    def dagger(self) -> "TrigMatrix":
        """Pointwise adjoint: coefficient of -l becomes C_l^dagger."""
        return TrigMatrix(-self.modes, np.conj(np.swapaxes(self.coeffs, 1, 2)))

    def hermitian_defect(self) -> float:
        if len(self) == 0:
            return 0.0
        diff = self - self.dagger()
        return float(diff.op_norms.max()) if len(diff) else 0.0

    @cached_property
    def hermitian(self) -> bool:
        scale = float(self.op_norms.max()) if len(self) else 0.0
        return self.hermitian_defect() <= HERMITIAN_RTOL * max(scale, 1e-300)

    def hermitized(self) -> "TrigMatrix":
        """Hermitian part ``(A + A^dagger) / 2``."""
        h = self + self.dagger()
        return h.scaled(0.5) if len(h) else h

    def __repr__(self) -> str:
        return f"TrigMatrix(n={self.n}, dim={self.dim}, modes={len(self)})"


# ----------------------------------------------------------------------------
# embedding of local matrices


@lru_cache(maxsize=4096)
def _embed_plan(sub: SupportSet, sup: SupportSet, q: int):
    pos = [sup.index(s) for s in sub]
    rest = [i for i in range(len(sup)) if i not in pos]
    cur = pos + rest  # current leg order: sub sites then the others
    k = len(sup)
    perm_rows = [cur.index(i) for i in range(k)]
    perm = [0] + [1 + r for r in perm_rows] + [1 + k + r for r in perm_rows]
    return q ** len(rest), tuple(perm)


def embed_matrix(coeffs: np.ndarray, sub: SupportSet, sup: SupportSet, q: int) -> np.ndarray:
    """Embed ``(M, Ds, Ds)`` operators on ``sub`` into the tensor space of ``sup``."""
    if sub == sup:
        return coeffs
    single = coeffs.ndim == 2
    if single:
        coeffs = coeffs[None]
    m, ds = coeffs.shape[0], coeffs.shape[1]
    dr, perm = _embed_plan(tuple(sub), tuple(sup), q)
    eye = np.eye(dr, dtype=complex)
    big = coeffs[:, :, None, :, None] * eye[None, None, :, None, :]
    k = len(sup)
    big = big.reshape((m,) + (q,) * (2 * k))
    out = big.transpose(perm).reshape(m, ds * dr, ds * dr)
    return out[0] if single else out


# ----------------------------------------------------------------------------
# interactions


@dataclass(frozen=True)
class LocalTerm:
    """One local term: a connected support and its angle-dependent payload."""

    support: SupportSet
    payload: TrigMatrix


class Interaction:
    """Finite family of local terms on a lattice, one payload per support."""

    __slots__ = ("lattice", "n", "_terms", "__dict__")

    def __init__(self, lattice: LatticeSpec, n: int,
                 terms: Mapping[SupportSet, TrigMatrix] | Iterable[LocalTerm] = (),
                 *, validate: bool = True):
        self.lattice = lattice
        self.n = int(n)
        if isinstance(terms, Mapping):
            items = terms.items()
        else:
            items = ((t.support, t.payload) for t in terms)
        out: dict[SupportSet, TrigMatrix] = {}
        for s, tm in items:
            if validate:
                s = lattice.support_from_indices(s)
                if tm.n != self.n:
                    raise ValueError("angle count mismatch")
                if tm.dim != lattice.local_dim(s):
                    raise ValueError(f"payload dimension {tm.dim} does not match support {s}")
                if tm.dim > MAX_LOCAL_DIM:
                    raise ValueError(f"local dimension {tm.dim} exceeds cap {MAX_LOCAL_DIM}")
                if s in out:
                    tm = out[s] + tm
            if len(tm):
                out[s] = tm
        self._terms = MappingProxyType(dict(sorted(out.items(), key=lambda kv: (len(kv[0]), kv[0]))))

    @classmethod
    def zero(cls, lattice: LatticeSpec, n: int) -> "Interaction":
        return cls(lattice, n, {}, validate=False)

    @classmethod
    def single(cls, lattice: LatticeSpec, sites: Iterable, payload: TrigMatrix) -> "Interaction":
        """One term on the support given by site coordinates."""
        return cls(lattice, payload.n, {lattice.support(sites): payload})

    @property
    def terms(self) -> Mapping[SupportSet, TrigMatrix]:
        return self._terms

    def __iter__(self) -> Iterator[LocalTerm]:
        return (LocalTerm(s, tm) for s, tm in self._terms.items())

    def __len__(self) -> int:
        return len(self._terms)

    @property
    def supports(self) -> list[SupportSet]:
        return list(self._terms)

    @property
    def is_zero(self) -> bool:
        return not self._terms

    @property
    def is_constant(self) -> bool:
        return all(tm.is_constant for tm in self._terms.values())

    @cached_property
    def hermitian(self) -> bool:
        return all(tm.hermitian for tm in self._terms.values())

    def hermitized(self) -> "Interaction":
        return Interaction(self.lattice, self.n,
                           {s: tm.hermitized() for s, tm in self._terms.items()}, validate=False)

    def max_mode(self) -> int:
        return max((tm.max_mode() for tm in self._terms.values()), default=0)

    def mode_count(self) -> int:
        return sum(len(tm) for tm in self._terms.values())

    def map_payloads(self, fn) -> "Interaction":
        return Interaction(self.lattice, self.n, {s: fn(tm) for s, tm in self._terms.items()},
                           validate=False)

    def _check(self, other: "Interaction"):
        if other.lattice != self.lattice or other.n != self.n:
            raise ValueError("incompatible interactions (lattice or angle count differ)")

    def __add__(self, other: "Interaction") -> "Interaction":
        return add(self, other)

    def __sub__(self, other: "Interaction") -> "Interaction":
        return add(self, scale(other, -1.0))

    def __neg__(self) -> "Interaction":
        return scale(self, -1.0)

    def __mul__(self, c: complex) -> "Interaction":
        return scale(self, c)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return (f"Interaction(d={self.lattice.d}, L={self.lattice.L}, n={self.n}, "
                f"terms={len(self)}, modes={self.mode_count()})")


def site_sum(lattice: LatticeSpec, payload: TrigMatrix) -> Interaction:
    """Translation-invariant sum of one single-site payload over all sites."""
    return Interaction(lattice, payload.n, {(i,): payload for i in range(lattice.size)},
                       validate=False)


def add(a: Interaction, b: Interaction) -> Interaction:
    a._check(b)
    terms = dict(a.terms)
    for s, tm in b.terms.items():
        terms[s] = terms[s] + tm if s in terms else tm
    return Interaction(a.lattice, a.n, {s: t for s, t in terms.items() if len(t)}, validate=False)


def scale(a: Interaction, c: complex) -> Interaction:
    if c == 0:
        return Interaction.zero(a.lattice, a.n)
    return a.map_payloads(lambda tm: tm.scaled(c))


def dagger(a: Interaction) -> Interaction:
    return a.map_payloads(TrigMatrix.dagger)


def average(a: Interaction) -> Interaction:
    """Angle average: keeps only the zero-mode coefficients."""
    out = {}
    for s, tm in a.terms.items():
        m = tm.mean()
        if np.any(m != 0):
            out[s] = TrigMatrix.constant(m, a.n)
    return Interaction(a.lattice, a.n, out, validate=False)


def uv_ir_split(a: Interaction, K: float) -> tuple[Interaction, Interaction]:
    """Split into modes with ``|l| <= K`` (infrared) and the rest (ultraviolet)."""
    ir, uv = {}, {}
    for s, tm in a.terms.items():
        low = tm.l1 <= K
        if low.any():
            ir[s] = tm.select(low)
        if (~low).any():
            uv[s] = tm.select(~low)
    return (Interaction(a.lattice, a.n, ir, validate=False),
            Interaction(a.lattice, a.n, uv, validate=False))


# ----------------------------------------------------------------------------
# commutators


def _direct_commutator(ma, ca, mb, cb, chunk_elems: int = 1 << 22):
    """Pairwise convolution of [A, B]; returns uncombined modes and coeffs."""
    d = ca.shape[1]
    nb = mb.shape[0]
    per = max(1, chunk_elems // max(1, nb * d * d))
    mods, cofs = [], []
    for i0 in range(0, ma.shape[0], per):
        a = ca[i0:i0 + per]
        ab = np.matmul(a[:, None], cb[None])
        ab -= np.matmul(cb[None], a[:, None])
        mods.append((ma[i0:i0 + per, None, :] + mb[None]).reshape(-1, ma.shape[1]))
        cofs.append(ab.reshape(-1, d, d))
    return np.concatenate(mods), np.concatenate(cofs)


def _fft_commutator(ma, ca, mb, cb):
    """Cyclic-FFT convolution of [A, B] on a box large enough to avoid aliasing."""
    n = ma.shape[1]
    d = ca.shape[1]
    lo_a, hi_a = ma.min(axis=0), ma.max(axis=0)
    lo_b, hi_b = mb.min(axis=0), mb.max(axis=0)
    shape = tuple(int(v) for v in (hi_a - lo_a) + (hi_b - lo_b) + 1)
    fa = np.zeros(shape + (d, d), dtype=complex)
    fb = np.zeros(shape + (d, d), dtype=complex)
    fa[tuple((ma - lo_a).T)] = ca
    fb[tuple((mb - lo_b).T)] = cb
    axes = tuple(range(n))
    fa = np.fft.fftn(fa, axes=axes)
    fb = np.fft.fftn(fb, axes=axes)
    prod = fa @ fb
    prod -= fb @ fa
    del fa, fb
    res = np.fft.ifftn(prod, axes=axes)
    grid = np.indices(shape).reshape(n, -1).T
    return grid + (lo_a + lo_b), res.reshape(-1, d, d)


def trig_commutator(a: TrigMatrix, b: TrigMatrix, *, fft: bool | None = False,
                    drop_below: float = 0.0) -> tuple[TrigMatrix, float]:
    """Commutator of two trig matrices of equal dimension by Fourier convolution.

    With ``fft=None`` the cheaper of direct and FFT convolution is chosen.  The
    FFT route leaves round-off sized coefficients on every box mode; entries
    with Frobenius norm ``<= drop_below`` are removed.  Returns the commutator
    and the summed Frobenius norm of the removed entries.
    """
    if len(a) == 0 or len(b) == 0:
        return TrigMatrix.zero(a.n, a.dim), 0.0
    if fft is None:
        box = np.prod((a.modes.max(0) - a.modes.min(0)) + (b.modes.max(0) - b.modes.min(0)) + 1)
        fft = 4 * box * max(1.0, np.log2(box)) < len(a) * len(b) * a.dim
    if fft:
        # C-ordered box indices are already lexicographically sorted
        m, c = _fft_commutator(a.modes, a.coeffs, b.modes, b.coeffs)
    else:
        m, c = _combine(*_direct_commutator(a.modes, a.coeffs, b.modes, b.coeffs))
    if drop_below > 0 and len(m):
        fro = np.linalg.norm(c, axis=(1, 2))
        keep = fro > drop_below
        return TrigMatrix(m[keep], c[keep], canonical=True), float(fro[~keep].sum())
    keep = np.any(c != 0, axis=(1, 2))
    return TrigMatrix(m[keep], c[keep], canonical=True), 0.0


def commutator(a: Interaction, b: Interaction, *, max_support: int | None = None,
               fft: bool | None = False, drop_below: float = 0.0,
               shed: dict | None = None) -> Interaction:
    """``[A, B]`` term by term on support unions.

    Pairs of terms with disjoint supports commute.  When ``max_support`` is set,
    products on larger unions are discarded.  Discarded operator mass (an upper
    bound ``2 sum|a| sum|b|`` for dropped supports, the Frobenius mass of pruned
    coefficients otherwise) is accumulated per support in ``shed``.
    """
    a._check(b)
    lat = a.lattice
    q = lat.q
    acc: dict[SupportSet, list[TrigMatrix]] = {}
    for sa, ta in a.terms.items():
        seta = set(sa)
        for sb, tb in b.terms.items():
            if seta.isdisjoint(sb):
                continue
            u = tuple(sorted(seta.union(sb)))
            if max_support is not None and len(u) > max_support:
                if shed is not None:
                    shed[u] = shed.get(u, 0.0) + 2.0 * ta.op_norms.sum() * tb.op_norms.sum()
                continue
            if q ** len(u) > MAX_LOCAL_DIM:
                raise ValueError(f"support union of size {len(u)} exceeds the local dimension cap")
            ea = TrigMatrix(ta.modes, embed_matrix(ta.coeffs, sa, u, q), canonical=True)
            eb = TrigMatrix(tb.modes, embed_matrix(tb.coeffs, sb, u, q), canonical=True)
            c, lost = trig_commutator(ea, eb, fft=fft, drop_below=drop_below)
            if lost and shed is not None:
                shed[u] = shed.get(u, 0.0) + lost
            if len(c):
                acc.setdefault(u, []).append(c)
    out = {}
    for u, parts in acc.items():
        if len(parts) == 1:
            tm = parts[0]
        else:
            tm = TrigMatrix(np.concatenate([p.modes for p in parts]),
                            np.concatenate([p.coeffs for p in parts]))
            if drop_below > 0 and len(tm):
                fro = np.linalg.norm(tm.coeffs, axis=(1, 2))
                keep = fro > drop_below
                if shed is not None and not keep.all():
                    shed[u] = shed.get(u, 0.0) + float(fro[~keep].sum())
                tm = tm.select(keep)
        if len(tm):
            out[u] = tm
    return Interaction(lat, a.n, out, validate=False)


# ----------------------------------------------------------------------------
# norms


@dataclass(frozen=True)
class NormReport:
    """A norm value with its provenance (exact, certified upper or grid lower)."""

    value: float
    kind: str
    params: dict = field(default_factory=dict)
    grid_size: int | None = None

    def __post_init__(self):
        if self.kind not in ("exact", "certified_upper", "grid_lower"):
            raise ValueError(f"unknown norm kind {self.kind!r}")
        if not self.value >= 0:
            raise ValueError("norm value must be non-negative")

    def __float__(self) -> float:
        return float(self.value)


def weighted_sup(lattice: LatticeSpec, per_support: Mapping[SupportSet, float], kappa: float) -> float:
    """``sup_x sum_{S ni x} w_S e^{kappa |S|}``."""
    if not per_support:
        return 0.0
    acc = np.zeros(lattice.size)
    for s, w in per_support.items():
        acc[list(s)] += w * np.exp(kappa * len(s))
    return float(acc.max())


def norm_kappa(a: Interaction, kappa: float) -> NormReport:
    """Exact ``||A||_kappa`` of a time-independent interaction."""
    if not a.is_constant:
        raise ValueError("norm_kappa requires a constant interaction; use norm_kappa_sigma")
    w = {s: float(tm.op_norms.sum()) for s, tm in a.terms.items()}
    return NormReport(weighted_sup(a.lattice, w, kappa), "exact", {"kappa": kappa})


def norm_kappa_sigma(a: Interaction, kappa: float, sigma: float) -> NormReport:
    """Exact analytic-class norm ``||A||_{kappa,sigma}``."""
    w = {s: float(np.sum(tm.op_norms * np.exp(sigma * tm.l1))) for s, tm in a.terms.items()}
    return NormReport(weighted_sup(a.lattice, w, kappa), "exact", {"kappa": kappa, "sigma": sigma})


def _multi_indices(n: int, p: int, mixed: bool) -> list[tuple[int, ...]]:
    if mixed:
        return [mi for mi in itertools.product(range(p + 1), repeat=n) if sum(mi) <= p]
    out = [(0,) * n]
    for j in range(n):
        for k in range(1, p + 1):
            mi = [0] * n
            mi[j] = k
            out.append(tuple(mi))
    return out


def _grid_points(n: int, grid: int) -> np.ndarray:
    g = 2 * np.pi * np.arange(grid) / grid
    return np.stack(np.meshgrid(*([g] * n), indexing="ij"), axis=-1).reshape(-1, n)


def _grid_values(tm: TrigMatrix, grid: int) -> np.ndarray:
    """Values on the uniform grid ``2 pi j / grid`` via an inverse FFT.

    On the grid ``e^{i l phi}`` only depends on ``l mod grid``, so wrapping the
    modes is exact.  Row order matches :func:`_grid_points`.
    """
    n, d = tm.n, tm.dim
    box = np.zeros((grid,) * n + (d, d), dtype=complex)
    np.add.at(box, tuple((tm.modes % grid).T), tm.coeffs)
    vals = np.fft.ifftn(box, axes=tuple(range(n))) * grid ** n
    return vals.reshape(-1, d, d)


def grid_sup_norm(tm: TrigMatrix, grid: int, chunk: int = 4096) -> float:
    """Max over a uniform angle grid of the operator norm of ``tm``."""
    if len(tm) == 0:
        return 0.0
    if tm.is_constant:
        return float(tm.op_norms[0])
    npts = grid ** tm.n
    use_fft = npts * tm.dim ** 2 <= 1 << 24 and len(tm) * min(npts, chunk) > 4 * npts * np.log2(npts)
    if use_fft:
        allv = _grid_values(tm, grid)
    else:
        pts = _grid_points(tm.n, grid)
    best = 0.0
    for i in range(0, npts, chunk):
        vals = allv[i:i + chunk] if use_fft else tm.evaluate(pts[i:i + chunk])
        if tm.dim == 1:
            best = max(best, float(np.abs(vals).max()))
        elif tm.hermitian:
            ev = np.linalg.eigvalsh(vals)
            best = max(best, float(np.abs(ev).max()))
        else:
            best = max(best, float(np.linalg.svd(vals, compute_uv=False)[:, 0].max()))
    return best


def norm_kappa_cp(a: Interaction, kappa: float, p: int, grid: int = 64,
                  mixed: bool = True) -> tuple[NormReport, NormReport]:
    """Grid lower bound and certified upper bound of ``||A||_{kappa,C^p}``.

    ``mixed=True`` uses all multi-indices ``|p'| <= p``; ``mixed=False`` only the
    pure directional derivatives.
    """
    if grid < 8:
        raise ValueError("grid must be at least 8 points per angle")
    mis = _multi_indices(a.n, int(p), mixed)
    lo, hi = {}, {}
    for s, tm in a.terms.items():
        absm = np.abs(tm.modes).astype(float)
        up = 0.0
        low = 0.0
        for mi in mis:
            w = np.prod(absm ** np.asarray(mi), axis=1) if len(tm) else np.zeros(0)
            up = max(up, float(np.sum(tm.op_norms * w)))
            low = max(low, grid_sup_norm(tm.derivative(mi), grid))
        lo[s], hi[s] = low, up
    params = {"kappa": kappa, "p": int(p)}
    return (NormReport(weighted_sup(a.lattice, lo, kappa), "grid_lower", params, grid),
            NormReport(weighted_sup(a.lattice, hi, kappa), "certified_upper", params))


# ----------------------------------------------------------------------------
# global assembly


def assemble_global(a: Interaction, phi=None, cap: int = DEFAULT_GLOBAL_CAP) -> np.ndarray:
    """Dense matrix of ``sum_S A_S(phi)`` on the full lattice Hilbert space."""
    lat = a.lattice
    dim = lat.q ** lat.size
    if dim > cap:
        raise ValueError(f"global dimension {dim} exceeds cap {cap}; raise cap to at least {dim}")
    if phi is None:
        phi = np.zeros(a.n)
    full = tuple(range(lat.size))
    out = np.zeros((dim, dim), dtype=complex)
    for s, tm in a.terms.items():
        out += embed_matrix(tm.evaluate(phi), s, full, lat.q)
    return out


def assemble_modes(a: Interaction, cap: int = DEFAULT_GLOBAL_CAP) -> tuple[np.ndarray, np.ndarray]:
    """Global Fourier coefficients: distinct modes ``(M, n)`` and ``(M, dim, dim)`` matrices."""
    lat = a.lattice
    dim = lat.q ** lat.size
    if dim > cap:
        raise ValueError(f"global dimension {dim} exceeds cap {cap}; raise cap to at least {dim}")
    full = tuple(range(lat.size))
    if a.is_zero:
        return np.zeros((0, a.n), dtype=np.int64), np.zeros((0, dim, dim), dtype=complex)
    modes = np.concatenate([tm.modes for tm in a.terms.values()])
    uniq, inv = np.unique(modes, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    out = np.zeros((len(uniq), dim, dim), dtype=complex)
    k = 0
    for s, tm in a.terms.items():
        emb = embed_matrix(tm.coeffs, s, full, lat.q)
        np.add.at(out, inv[k:k + len(tm)], emb)
        k += len(tm)
    return uniq, out


# ----------------------------------------------------------------------------
# serialization


def to_json(a: Interaction) -> dict:
    lat = a.lattice
    terms = []
    for s, tm in a.terms.items():
        terms.append({
            "sites": [list(lat.coords[i]) for i in s],
            "coeffs": [{"l": [int(v) for v in m], "re": c.real.tolist(), "im": c.imag.tolist()}
                       for m, c in zip(tm.modes, tm.coeffs)],
        })
    return {"lattice": lat.to_dict(), "n": a.n, "terms": terms}


def from_json(doc: Mapping) -> Interaction:
    lat = LatticeSpec(**doc["lattice"])
    n = int(doc["n"])
    terms = {}
    for t in doc["terms"]:
        s = lat.support(t["sites"])
        dim = lat.local_dim(s)
        if not t["coeffs"]:
            continue
        modes = np.array([c["l"] for c in t["coeffs"]], dtype=np.int64).reshape(-1, n)
        coeffs = np.array([np.asarray(c["re"], float) + 1j * np.asarray(c["im"], float)
                           for c in t["coeffs"]]).reshape(-1, dim, dim)
        terms[s] = TrigMatrix(modes, coeffs, n=n)
    return Interaction(lat, n, terms)


def dumps(a: Interaction) -> str:
    return json.dumps(to_json(a))


def loads(s: str) -> Interaction:
    return from_json(json.loads(s))
