"""Matrix-product-state and matrix-product-operator attacks.

Qubits are laid on a chain after reverse Cuthill-McKee relabeling.
Two-qubit gates on non-neighbouring sites are routed with SWAP chains
(there and back), so the site of each logical qubit never changes.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from . import statevector as sv
from .circuit import Circuit, CircuitError, Gate, QubitPermutation, build_adjacency, rcm_order

SWAP4 = np.eye(4, dtype=np.complex128)[[0, 2, 1, 3]]
DISCARD_ATOL = 1e-14
RANK_RTOL = 1e-13  # singular values below this fraction of the largest are numerical zeros


class MpsError(RuntimeError):
    pass


@dataclass(frozen=True)
class TruncationPolicy:
    chi_max: int
    cutoff: float = 0.0

    def __post_init__(self) -> None:
        if self.chi_max < 1:
            raise ValueError("chi_max must be >= 1")
        if self.cutoff < 0:
            raise ValueError("cutoff must be >= 0")


def _svd(m: np.ndarray):
    if not np.all(np.isfinite(m)):
        raise MpsError("non-finite values before SVD")
    try:
        return np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError:
        return scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesvd")


class _Chain:
    """Open chain of tensors ``(left, d, right)`` with a moving orthogonality centre."""

    def __init__(self, tensors: list[np.ndarray], policy: TruncationPolicy):
        self.t = tensors
        self.policy = policy
        self.center = 0
        self.discarded = 0.0
        self.n_truncations = 0
        self.n_swaps = 0

    @property
    def bonds(self) -> list[int]:
        return [a.shape[2] for a in self.t[:-1]]

    def move_center(self, target: int) -> None:
        t = self.t
        while self.center < target:
            k = self.center
            l, d, r = t[k].shape
            q, rr = np.linalg.qr(t[k].reshape(l * d, r))
            t[k] = q.reshape(l, d, -1)
            t[k + 1] = np.tensordot(rr, t[k + 1], axes=(1, 0))
            self.center += 1
        while self.center > target:
            k = self.center
            l, d, r = t[k].shape
            q, rr = np.linalg.qr(t[k].reshape(l, d * r).conj().T)
            t[k] = q.conj().T.reshape(-1, d, r)
            t[k - 1] = np.tensordot(t[k - 1], rr.conj().T, axes=(2, 0))
            self.center -= 1

    def apply1(self, site: int, fn: Callable[[np.ndarray], np.ndarray]) -> None:
        self.t[site] = fn(self.t[site])

    def apply2(self, i: int, fn: Callable[[np.ndarray], np.ndarray]) -> None:
        """Apply ``fn`` to the merged tensor of sites ``i, i+1`` and split it again."""
        self.move_center(i)
        a, b = self.t[i], self.t[i + 1]
        l, d, _ = a.shape
        r = b.shape[2]
        theta = fn(np.tensordot(a, b, axes=(2, 0)))
        u, s, vh = _svd(theta.reshape(l * d, d * r))
        total = float(np.sum(s ** 2))
        thresh = max(self.policy.cutoff, RANK_RTOL * (s[0] if s.size else 0.0))
        keep = min(self.policy.chi_max, int(np.count_nonzero(s > thresh)) or 1, s.size)
        if keep < s.size:
            lost = float(np.sum(s[keep:] ** 2))
            if total > 0 and lost > DISCARD_ATOL * total:
                self.discarded += lost / total
                self.n_truncations += 1
            u, s, vh = u[:, :keep], s[:keep], vh[:keep]
            kept = float(np.sqrt(np.sum(s ** 2)))
            if kept > 0:
                s = s * (math.sqrt(total) / kept)
        self.t[i] = u.reshape(l, d, keep)
        self.t[i + 1] = (s[:, None] * vh).reshape(keep, d, r)
        self.center = i + 1

    def route(self, a: int, b: int, op: Callable[[int, bool], None], swap: Callable[[int], None]) -> None:
        """Bring site ``a`` next to ``b``, call ``op(i, flipped)`` on ``(i, i+1)``, undo."""
        lo, hi = min(a, b), max(a, b)
        for k in range(lo, hi - 1):
            swap(k)
        op(hi - 1, a > b)
        for k in range(hi - 2, lo - 1, -1):
            swap(k)


# --------------------------------------------------------------------------
# MPS
# --------------------------------------------------------------------------


@dataclass
class MpsState:
    tensors: list[np.ndarray]
    sites: QubitPermutation  # logical qubit -> chain site
    discarded: float = 0.0
    n_swaps: int = 0
    center: int = 0
    peak_bond: int = 1

    @property
    def n_qubits(self) -> int:
        return len(self.tensors)

    @property
    def bonds(self) -> list[int]:
        return [a.shape[2] for a in self.tensors[:-1]]

    def amplitude(self, bits: str) -> complex:
        env = np.ones((1,), dtype=np.complex128)
        for site, a in enumerate(self.tensors):
            q = self.sites.inverse()(site)
            env = env @ a[:, int(bits[q]), :]
        return complex(env[0])

    def to_statevector(self) -> np.ndarray:
        psi = np.ones((1, 1), dtype=np.complex128)
        for a in self.tensors:
            psi = np.tensordot(psi, a, axes=(-1, 0))
        psi = psi.reshape((2,) * self.n_qubits)
        # axis k currently holds chain site k; move it to logical qubit position
        inv = self.sites.inverse()
        psi = np.moveaxis(psi, list(range(self.n_qubits)), [inv(s) for s in range(self.n_qubits)])
        return psi.reshape(-1)


def _mps_gate_fn(m2: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    g = m2.reshape(2, 2, 2, 2)
    return lambda th: np.einsum("ABab,labr->lABr", g, th, optimize=False)


def _mps_site_fn(m1: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    return lambda a: np.einsum("Aa,lar->lAr", m1, a)


def chain_order(c: Circuit, reorder: bool = True) -> QubitPermutation:
    return rcm_order(build_adjacency(c)) if reorder else QubitPermutation.identity(c.n_qubits)


def _product_chain(n: int, d: int, tensors: list[np.ndarray] | None, policy: TruncationPolicy) -> _Chain:
    if tensors is None:
        tensors = []
        for _ in range(n):
            a = np.zeros((1, d, 1), dtype=np.complex128)
            a[0, 0, 0] = 1.0
            tensors.append(a)
    return _Chain(tensors, policy)


def _apply_gate_chain(ch: _Chain, g: Gate, sites: QubitPermutation, side_fns) -> None:
    site1, site2, swap_fn = side_fns
    sup = g.support
    m = sv.gate_matrix(g)
    if len(sup) == 1:
        ch.apply1(sites(sup[0]), site1(m))
        return
    if len(sup) != 2:
        raise CircuitError(f"{g.kind} on {len(sup)} qubits is not supported on a chain")
    a, b = sites(sup[0]), sites(sup[1])

    def op(i: int, flipped: bool) -> None:
        # flipped: support[0] sits on the right-hand site
        ch.apply2(i, site2(SWAP4 @ m @ SWAP4 if flipped else m))

    def swap(k: int) -> None:
        ch.n_swaps += 1
        ch.apply2(k, swap_fn)

    if abs(a - b) == 1:
        op(min(a, b), a > b)
    else:
        ch.route(a, b, op, swap)


def mps_simulate(
    c: Circuit, policy: TruncationPolicy, *, reorder: bool = True, sites: QubitPermutation | None = None,
) -> MpsState:
    """Bond-truncated simulation of ``c`` on ``|0^N>``."""
    n = c.n_qubits
    sites = sites if sites is not None else chain_order(c, reorder)
    ch = _product_chain(n, 2, None, policy)
    fns = (_mps_site_fn, _mps_gate_fn, _mps_gate_fn(SWAP4))
    peak = 1
    for g in c.gates:
        _apply_gate_chain(ch, g, sites, fns)
        if g.is_two_qubit:
            peak = max(peak, max(ch.bonds, default=1))
    for a in ch.t:
        if not np.all(np.isfinite(a)):
            raise MpsError("non-finite tensor after simulation")
    return MpsState(ch.t, sites, ch.discarded, ch.n_swaps, ch.center, peak)


def mps_marginals(m: MpsState) -> np.ndarray:
    """``<Z_q>`` for every logical qubit via canonical-form contraction."""
    ch = _Chain([a.copy() for a in m.tensors], TruncationPolicy(max(1, max(m.bonds, default=1))))
    ch.center = m.center
    n = m.n_qubits
    z_site = np.empty(n)
    ch.move_center(0)
    for site in range(n):
        ch.move_center(site)
        a = ch.t[site]
        p0 = float(np.sum(np.abs(a[:, 0, :]) ** 2))
        p1 = float(np.sum(np.abs(a[:, 1, :]) ** 2))
        tot = p0 + p1
        z_site[site] = (p0 - p1) / tot if tot > 0 else 0.0
    z = np.array([z_site[m.sites(q)] for q in range(n)])
    return np.clip(z, -1.0, 1.0)


# --------------------------------------------------------------------------
# chi_break search
# --------------------------------------------------------------------------


def overlap_fraction(guess: str, s: str) -> float:
    if len(guess) != len(s):
        raise ValueError("length mismatch")
    return sum(a == b for a, b in zip(guess, s)) / len(s) if s else 1.0


def sign_guess(z: Sequence[float]) -> str:
    return "".join("0" if v >= 0 else "1" for v in z)


@dataclass
class ChiPoint:
    chi: int
    R: float
    discarded: float
    guess: str
    seconds: float
    seconds_per_rzz: float


@dataclass
class ChiBreakResult:
    points: list[ChiPoint]
    chi_break: int | None
    binary_steps: int = 0
    fit: dict | None = None
    extrapolated: float | None = None

    @property
    def chis(self) -> list[int]:
        return [p.chi for p in self.points]

    def R_at(self, chi: int) -> float:
        for p in self.points:
            if p.chi == chi:
                return p.R
        raise KeyError(chi)

    def fit_points(self) -> list[tuple[int, float]]:
        return [(p.chi, p.R) for p in sorted(self.points, key=lambda p: p.chi)]


def chi_point(c: Circuit, s: str, chi: int, sites: QubitPermutation | None = None) -> ChiPoint:
    t0 = time.perf_counter()
    m = mps_simulate(c, TruncationPolicy(chi), sites=sites)
    z = mps_marginals(m)
    dt = time.perf_counter() - t0
    guess = sign_guess(z)
    rzz = max(1, c.num_two_qubit)
    return ChiPoint(chi, overlap_fraction(guess, s), m.discarded, guess, dt, dt / rzz)


def power_grid(cap: int, start: int = 1) -> list[int]:
    out = []
    chi = start
    while chi <= cap:
        out.append(chi)
        chi *= 2
    return out


def chi_break_search(
    c: Circuit, s: str, chi_grid: Sequence[int] | None = None, *, max_binary_steps: int = 12,
) -> ChiBreakResult:
    """Scan the grid until R=1, then binary-search the gap below that point."""
    grid = list(chi_grid) if chi_grid is not None else power_grid(2 ** ((c.n_qubits + 1) // 2))
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("chi grid must be strictly increasing")
    sites = chain_order(c)
    points: list[ChiPoint] = []
    hit = None
    for k, chi in enumerate(grid):
        p = chi_point(c, s, chi, sites)
        points.append(p)
        if p.R == 1.0:
            hit = k
            break
    if hit is None:
        return ChiBreakResult(points, None)
    lo = grid[hit - 1] if hit > 0 else 0
    hi = grid[hit]
    steps = 0
    while hi - lo > 1 and steps < max_binary_steps:
        mid = (lo + hi) // 2
        p = chi_point(c, s, mid, sites)
        points.append(p)
        steps += 1
        if p.R == 1.0:
            hi = mid
        else:
            lo = mid
    return ChiBreakResult(sorted(points, key=lambda p: p.chi), hi, steps)


# --------------------------------------------------------------------------
# Middle MPO attack
# --------------------------------------------------------------------------


def _mpo_out_site(m1):
    return lambda a: np.einsum("Oo,loir->lOir", m1, a.reshape(a.shape[0], 2, 2, -1)).reshape(a.shape)


def _mpo_in_site(m1):
    # right multiplication: M_{o,i} <- sum_j M_{o,j} g_{j,i}
    return lambda a: np.einsum("loir,iI->loIr", a.reshape(a.shape[0], 2, 2, -1), m1).reshape(a.shape)


def _mpo_out_pair(m2):
    g = m2.reshape(2, 2, 2, 2)

    def fn(th):
        l, r = th.shape[0], th.shape[-1]
        t6 = th.reshape(l, 2, 2, 2, 2, r)
        return np.einsum("ABab,laibjr->lAiBjr", g, t6).reshape(th.shape)

    return fn


def _mpo_in_pair(m2):
    g = m2.reshape(2, 2, 2, 2)

    def fn(th):
        l, r = th.shape[0], th.shape[-1]
        t6 = th.reshape(l, 2, 2, 2, 2, r)
        return np.einsum("laibjr,ijIJ->laIbJr", t6, g).reshape(th.shape)

    return fn


def _identity_mpo(n: int) -> list[np.ndarray]:
    return [np.eye(2, dtype=np.complex128).reshape(1, 4, 1) for _ in range(n)]


@dataclass
class MpoReport:
    cut: int
    chi_max: int
    bond_profile: list[int]
    steps: int
    complete: bool
    lossy: bool
    discarded: float
    z: list[float] | None = None
    guess: str | None = None
    R: float | None = None
    cracked: bool | None = None
    extra: dict = field(default_factory=dict)


def middle_mpo_attack(
    c: Circuit, cut: int, chi_max: int, *, s: str | None = None, max_steps: int | None = None,
    reorder: bool = True, bond_limit_for_attack: int | None = None,
) -> MpoReport:
    """Grow the circuit operator outward from ``cut``, starting at the identity.

    Step ``j`` multiplies gate ``cut + j - 1`` on the output side and gate
    ``cut - j`` on the input side, so after both halves are used up the MPO
    equals the full circuit unitary. A plain identity block stays
    bond-1 throughout.
    """
    n = c.n_qubits
    L = len(c)
    if not 0 <= cut <= L:
        raise ValueError(f"cut {cut} outside [0, {L}]")
    sites = chain_order(c, reorder)
    ch = _Chain(_identity_mpo(n), TruncationPolicy(chi_max))
    out_fns = (_mpo_out_site, _mpo_out_pair, _mpo_out_pair(SWAP4))
    in_fns = (_mpo_in_site, _mpo_in_pair, _mpo_in_pair(SWAP4))
    profile: list[int] = []
    j = 0
    total = max(L - cut, cut)
    limit = total if max_steps is None else min(total, max_steps)
    while j < limit:
        j += 1
        if cut + j - 1 < L:
            _apply_gate_chain(ch, c.gates[cut + j - 1], sites, out_fns)
        if cut - j >= 0:
            _apply_gate_chain(ch, c.gates[cut - j], sites, in_fns)
        profile.append(max(ch.bonds, default=1))
    complete = j == total
    rep = MpoReport(cut, chi_max, profile, j, complete, ch.n_truncations > 0, ch.discarded)
    small = bond_limit_for_attack if bond_limit_for_attack is not None else chi_max
    if complete and max(profile, default=1) <= small:
        # contract the input legs with |0> to obtain the output state
        tensors = [a.reshape(a.shape[0], 2, 2, a.shape[2])[:, :, 0, :].copy() for a in ch.t]
        state = _Chain(tensors, TruncationPolicy(max(1, max(ch.bonds, default=1))))
        state.center = ch.center
        state.move_center(n - 1)
        state.move_center(0)
        nrm = float(np.linalg.norm(state.t[0]))
        if nrm == 0:
            raise MpsError("MPO annihilates |0...0>")
        state.t[0] = state.t[0] / nrm
        m = MpsState(state.t, sites, ch.discarded, ch.n_swaps, 0, max(profile, default=1))
        z = mps_marginals(m)
        rep.z = [float(v) for v in z]
        rep.guess = sign_guess(z)
        if s is not None:
            rep.R = overlap_fraction(rep.guess, s)
            rep.cracked = rep.R == 1.0
    return rep
