"""Pauli-path simulation of ``<Z_i>`` in the Heisenberg picture.

A Pauli string is a pair of bitmasks ``(x, z)`` standing for the Hermitian
operator ``i^{|x & z|} X^x Z^z``; bit ``q`` of each mask refers to qubit ``q``.
Sums are stored as sorted unique keys ``x << 32 | z`` with real coefficients,
so at most 32 qubits are supported.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import statevector as sv
from .circuit import Circuit, CircuitError, Gate

MAX_QUBITS = 32
DEFAULT_CAP = 1 << 24
LOW = np.uint64(0xFFFFFFFF)
SHIFT = np.uint64(32)


class PauliCapExceeded(RuntimeError):
    def __init__(self, step: int, terms: int, cap: int):
        super().__init__(f"term count {terms} exceeds cap {cap} at gate step {step}")
        self.step = step
        self.terms = terms
        self.cap = cap


def _popcount(a: np.ndarray) -> np.ndarray:
    return np.bitwise_count(a).astype(np.int64)


def make_key(x: int, z: int) -> int:
    return (int(x) << 32) | int(z)


def split_keys(keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return keys >> SHIFT, keys & LOW


@dataclass
class PauliSum:
    n_qubits: int
    keys: np.ndarray  # sorted unique uint64
    coef: np.ndarray  # float64

    def __post_init__(self) -> None:
        if self.n_qubits > MAX_QUBITS:
            raise CircuitError(f"Pauli masks support at most {MAX_QUBITS} qubits")

    @classmethod
    def single(cls, n: int, x: int, z: int, c: float = 1.0) -> PauliSum:
        return cls(n, np.array([make_key(x, z)], dtype=np.uint64), np.array([float(c)]))

    @classmethod
    def z(cls, n: int, q: int) -> PauliSum:
        return cls.single(n, 0, 1 << q)

    @classmethod
    def from_terms(cls, n: int, terms: Sequence[tuple[int, int, float]]) -> PauliSum:
        if not terms:
            return cls(n, np.zeros(0, dtype=np.uint64), np.zeros(0))
        keys = np.array([make_key(x, z) for x, z, _ in terms], dtype=np.uint64)
        vals = np.array([c for _, _, c in terms], dtype=float)
        u, inv = np.unique(keys, return_inverse=True)
        coef = np.bincount(inv, weights=vals, minlength=u.size)
        keep = coef != 0
        return cls(n, u[keep], coef[keep])

    def __len__(self) -> int:
        return int(self.keys.size)

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.coef ** 2)))

    def terms(self) -> list[tuple[int, int, float]]:
        x, z = split_keys(self.keys)
        return [(int(a), int(b), float(c)) for a, b, c in zip(x, z, self.coef)]

    def expectation_zero(self) -> float:
        """``<0^N| O |0^N>``: the coefficient sum over strings with no X part."""
        x, _ = split_keys(self.keys)
        return float(np.sum(self.coef[x == 0]))

    def to_dense(self) -> np.ndarray:
        n = self.n_qubits
        out = np.zeros((1 << n, 1 << n), dtype=np.complex128)
        for x, z, c in self.terms():
            out += c * pauli_matrix(n, x, z)
        return out


def pauli_matrix(n: int, x: int, z: int) -> np.ndarray:
    """Dense Hermitian Pauli; qubit 0 is the most significant tensor factor."""
    mats = {(0, 0): np.eye(2), (1, 0): np.array([[0, 1], [1, 0]]),
            (0, 1): np.diag([1, -1]), (1, 1): np.array([[0, -1j], [1j, 0]])}
    out = np.ones((1, 1), dtype=np.complex128)
    for q in range(n):
        out = np.kron(out, mats[((x >> q) & 1, (z >> q) & 1)])
    return out


# --------------------------------------------------------------------------
# Conjugation rules
# --------------------------------------------------------------------------


def _generator(g: Gate) -> tuple[int, int] | None:
    if g.kind == "RX":
        return 1 << g.qubits[0], 0
    if g.kind == "RZ":
        return 0, 1 << g.qubits[0]
    if g.kind == "RZZ":
        return 0, (1 << g.qubits[0]) | (1 << g.qubits[1])
    return None


def _rotate(ps: PauliSum, gx: int, gz: int, theta: float) -> PauliSum:
    """``g^dag O g`` for ``g = exp(-i theta P / 2)`` with ``P = (gx, gz)``."""
    keys, coef = ps.keys, ps.coef.copy()
    x, z = split_keys(keys)
    ux, uz = np.uint64(gx), np.uint64(gz)
    anti = (_popcount((x & uz) ^ (z & ux)) & 1).astype(bool)
    if not anti.any():
        return PauliSum(ps.n_qubits, keys, coef)
    xa, za = x[anti], z[anti]
    xr, zr = xa ^ ux, za ^ uz
    e = bin(gx & gz).count("1") + _popcount(xa & za) - _popcount(xr & zr) + 2 * _popcount(uz & xa)
    # i * P * Q = i^(1+e) R and 1+e is even for anticommuting pairs
    sign = np.where(((1 + e) % 4) == 0, 1.0, -1.0)
    c_old = coef[anti]
    coef[anti] = c_old * np.cos(theta)
    new_keys = (xr << SHIFT) | zr
    new_coef = c_old * np.sin(theta) * sign
    return _merge(ps.n_qubits, keys, coef, new_keys, new_coef)


def _merge(n: int, keys: np.ndarray, coef: np.ndarray, nk: np.ndarray, nc: np.ndarray) -> PauliSum:
    order = np.argsort(nk, kind="stable")
    nk, nc = nk[order], nc[order]
    pos = np.searchsorted(keys, nk)
    inb = pos < keys.size
    hit = np.zeros(nk.size, dtype=bool)
    hit[inb] = keys[pos[inb]] == nk[inb]
    np.add.at(coef, pos[hit], nc[hit])
    rest = ~hit
    if rest.any():
        keys = np.insert(keys, pos[rest], nk[rest])
        coef = np.insert(coef, pos[rest], nc[rest])
    return PauliSum(n, keys, coef)


def _flip_sign(ps: PauliSum, q: int) -> PauliSum:
    _, z = split_keys(ps.keys)
    sign = np.where((z >> np.uint64(q)) & np.uint64(1), -1.0, 1.0)
    return PauliSum(ps.n_qubits, ps.keys, ps.coef * sign)


def _swap_bits(ps: PauliSum, a: int, b: int) -> PauliSum:
    k = ps.keys
    ua, ub = np.uint64(a), np.uint64(b)
    one = np.uint64(1)
    out = k.copy()
    for off in (np.uint64(0), SHIFT):
        ba = (k >> (ua + off)) & one
        bb = (k >> (ub + off)) & one
        diff = ba ^ bb
        out ^= (diff << (ua + off)) | (diff << (ub + off))
    order = np.argsort(out, kind="stable")
    return PauliSum(ps.n_qubits, out[order], ps.coef[order])


def _local_table(g: Gate) -> tuple[np.ndarray, tuple[int, ...]]:
    """Real matrix ``T[l, m]`` with ``g^dag P_l g = sum_m T[l, m] P_m`` on the support."""
    sup = g.support
    k = len(sup)
    u = sv.gate_matrix(g)
    d = 1 << k
    paulis = [pauli_matrix(k, x, z) for x in range(d) for z in range(d)]
    t = np.zeros((d * d, d * d))
    for li, p in enumerate(paulis):
        conj = u.conj().T @ p @ u
        for mi, pm in enumerate(paulis):
            t[li, mi] = np.real(np.trace(pm.conj().T @ conj)) / d
    return t, sup


def _dense_local(ps: PauliSum, g: Gate) -> PauliSum:
    # local support bits are read in pauli_matrix order: support[j] is local qubit j
    t, sup = _local_table(g)
    k = len(sup)
    d = 1 << k
    x, z = split_keys(ps.keys)
    lx = np.zeros_like(x)
    lz = np.zeros_like(z)
    clear = np.uint64(0)
    for j, q in enumerate(sup):
        uq = np.uint64(q)
        lx |= ((x >> uq) & np.uint64(1)) << np.uint64(j)
        lz |= ((z >> uq) & np.uint64(1)) << np.uint64(j)
        clear |= np.uint64(1) << uq
    li = (lx * np.uint64(d) + lz).astype(np.int64)
    base_x, base_z = x & ~clear, z & ~clear
    out_keys, out_coef = [], []
    for mi in range(d * d):
        w = t[li, mi]
        nz = np.abs(w) > 1e-15
        if not nz.any():
            continue
        mx, mz = divmod(mi, d)
        ax, az = np.uint64(0), np.uint64(0)
        for j, q in enumerate(sup):
            if (mx >> j) & 1:
                ax |= np.uint64(1) << np.uint64(q)
            if (mz >> j) & 1:
                az |= np.uint64(1) << np.uint64(q)
        out_keys.append(((base_x[nz] | ax) << SHIFT) | (base_z[nz] | az))
        out_coef.append(ps.coef[nz] * w[nz])
    if not out_keys:
        return PauliSum(ps.n_qubits, np.zeros(0, dtype=np.uint64), np.zeros(0))
    keys = np.concatenate(out_keys)
    vals = np.concatenate(out_coef)
    u, inv = np.unique(keys, return_inverse=True)
    return PauliSum(ps.n_qubits, u, np.bincount(inv, weights=vals, minlength=u.size))


def conjugate(ps: PauliSum, g: Gate) -> PauliSum:
    """``g^dag O g`` without truncation."""
    gen = _generator(g)
    if gen is not None:
        return _rotate(ps, gen[0], gen[1], g.theta)
    if g.kind == "X":
        return _flip_sign(ps, g.qubits[0])
    if g.kind == "SWAP":
        return _swap_bits(ps, *g.qubits)
    return _dense_local(ps, g)


# --------------------------------------------------------------------------
# Propagation
# --------------------------------------------------------------------------


@dataclass
class PpsStats:
    delta: float
    scheme: str
    terms: list[int]
    norms: list[float]
    peak_terms: int
    work: int
    seconds: float


def truncate(ps: PauliSum, delta: float, scheme: str) -> PauliSum:
    if scheme == "standard":
        thr = delta
    elif scheme == "relative":
        thr = ps.norm() * delta
    else:
        raise ValueError(f"unknown truncation scheme {scheme!r}")
    keep = np.abs(ps.coef) > thr
    return PauliSum(ps.n_qubits, ps.keys[keep], ps.coef[keep])


def pps_expectation(
    c: Circuit, i: int, delta: float, scheme: str = "standard", cap: int = DEFAULT_CAP,
    *, observable: PauliSum | None = None,
) -> tuple[float, PpsStats]:
    """Estimate ``<0^N| C^dag Z_i C |0^N>`` by truncated backward propagation."""
    if delta <= 0:
        raise ValueError("delta must be > 0")
    if cap < 1:
        raise ValueError("cap must be >= 1")
    n = c.n_qubits
    if not 0 <= i < n:
        raise ValueError(f"qubit {i} out of range")
    ps = observable if observable is not None else PauliSum.z(n, i)
    t0 = time.perf_counter()
    terms: list[int] = []
    norms: list[float] = []
    work = 0
    for step, g in enumerate(reversed(c.gates)):
        ps = truncate(conjugate(ps, g), delta, scheme)
        m = len(ps)
        work += m
        if m > cap:
            raise PauliCapExceeded(step, m, cap)
        terms.append(m)
        norms.append(ps.norm())
    est = ps.expectation_zero()
    stats = PpsStats(delta, scheme, terms, norms, max(terms, default=1), work, time.perf_counter() - t0)
    return est, stats


def default_schedule(start: float = 3.2e-3, stop: float = 2.5e-5) -> list[float]:
    out = []
    d = start
    while d >= stop * (1 - 1e-9):
        out.append(d)
        d /= 2
    return out


@dataclass
class ConvergenceReport:
    qubit: int
    schedule: list[float]
    estimates: list[float | None]
    ratios: list[float | None]
    converged: bool
    step: int | None
    work: int
    seconds: float
    peak_terms: list[int] = field(default_factory=list)
    incomplete: list[int] = field(default_factory=list)


def crack_step(estimates: Sequence[float | None], ratios: Sequence[float | None], true_bit: int | None,
               f_min: float) -> int | None:
    """First ``j`` where three successive estimates share a sign and pass the weight test."""
    for j in range(2, len(estimates)):
        window = estimates[j - 2:j + 1]
        if any(e is None or e == 0 for e in window):
            continue
        signs = {e > 0 for e in window}
        if len(signs) != 1:
            continue
        positive = signs.pop()
        if true_bit is not None and positive != (true_bit == 0):
            continue
        if ratios[j] is not None and ratios[j] >= f_min:
            return j
    return None


def pps_convergence_scan(
    c: Circuit, i: int, schedule: Sequence[float] | None = None, true_bit: int | None = None, *,
    scheme: str = "relative", cap: int = DEFAULT_CAP, f_min: float = 0.1, stop_on_crack: bool = True,
) -> ConvergenceReport:
    sched = list(schedule) if schedule is not None else default_schedule()
    if any(b >= a for a, b in zip(sched, sched[1:])):
        raise ValueError("schedule must be strictly decreasing")
    ests: list[float | None] = []
    ratios: list[float | None] = []
    peaks: list[int] = []
    bad: list[int] = []
    work = 0
    t0 = time.perf_counter()
    step = None
    for j, delta in enumerate(sched):
        try:
            est, st = pps_expectation(c, i, delta, scheme, cap)
        except PauliCapExceeded:
            ests.append(None)
            ratios.append(None)
            peaks.append(cap)
            bad.append(j)
            work += cap
            continue
        norm = st.norms[-1] if st.norms else 1.0
        ests.append(est)
        ratios.append(abs(est) / norm if norm > 0 else 0.0)
        peaks.append(st.peak_terms)
        work += st.work
        step = crack_step(ests, ratios, true_bit, f_min)
        if step is not None and stop_on_crack:
            break
    return ConvergenceReport(i, sched, ests, ratios, step is not None, step, work,
                             time.perf_counter() - t0, peaks, bad)


@dataclass
class CrackProfile:
    reports: list[ConvergenceReport]
    order: list[int]
    uncracked: list[int]

    @property
    def fully_solved(self) -> bool:
        return not self.uncracked


def pps_crack(
    c: Circuit, s: str, schedule: Sequence[float] | None = None, cap: int = DEFAULT_CAP, *,
    scheme: str = "relative", f_min: float = 0.1,
) -> CrackProfile:
    """Scan every qubit; order qubits by deterministic work-to-crack (terms processed)."""
    reports = [
        pps_convergence_scan(c, q, schedule, int(s[q]), scheme=scheme, cap=cap, f_min=f_min)
        for q in range(c.n_qubits)
    ]
    cracked = [r for r in reports if r.converged]
    order = [r.qubit for r in sorted(cracked, key=lambda r: (r.work, r.qubit))]
    return CrackProfile(reports, order, [r.qubit for r in reports if not r.converged])
