"""Dense statevector simulation: the ground truth for every attack.

Amplitude arrays have shape ``(2**n,)`` or ``(2**n, batch)``; qubit 0 is the
most significant bit of the basis index, matching the leftmost character of
bitstrings. Kernels work in place on C-contiguous arrays.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .circuit import Circuit, CircuitError, Gate

DENSE_LIMIT = 28
FD_STEP = 1e-5


class QubitLimitError(CircuitError):
    pass


def bits_to_index(bits: str) -> int:
    return int(bits, 2) if bits else 0


def index_to_bits(idx: int, n: int) -> str:
    return format(idx, f"0{n}b") if n else ""


def _check_limit(n: int, limit: int | None) -> None:
    limit = DENSE_LIMIT if limit is None else limit
    if n > limit:
        raise QubitLimitError(f"{n} qubits exceeds dense limit {limit}")


def _view(psi: np.ndarray, n: int) -> np.ndarray:
    return psi.reshape((2,) * n + (-1,))


def _pair_view(psi: np.ndarray, n: int, a: int, b: int):
    """Reshape so qubits ``a < b`` are axes 1 and 3."""
    return psi.reshape(1 << a, 2, 1 << (b - a - 1), 2, -1)


def _ctrl_index(n: int, gate: Gate, target_val: int | None = None) -> tuple:
    idx: list = [slice(None)] * (n + 1)
    for q, pol in gate.controls:
        idx[q] = pol
    if target_val is not None:
        idx[gate.qubits[0]] = target_val
    return tuple(idx)


def apply_gate(psi: np.ndarray, gate: Gate, n: int) -> np.ndarray:
    """Apply ``gate`` to ``psi`` in place and return it."""
    k = gate.kind
    if k == "RX":
        q = gate.qubits[0]
        v = psi.reshape(1 << q, 2, -1)
        c, s = math.cos(gate.theta / 2), math.sin(gate.theta / 2)
        a0 = v[:, 0].copy()
        a1 = v[:, 1]
        v[:, 0] = c * a0 - 1j * s * a1
        v[:, 1] = c * a1 - 1j * s * a0
    elif k == "RZ":
        q = gate.qubits[0]
        v = psi.reshape(1 << q, 2, -1)
        ph = complex(math.cos(gate.theta / 2), -math.sin(gate.theta / 2))
        v[:, 0] *= ph
        v[:, 1] *= ph.conjugate()
    elif k == "RZZ":
        a, b = sorted(gate.qubits)
        v = _pair_view(psi, n, a, b)
        ph = complex(math.cos(gate.theta / 2), -math.sin(gate.theta / 2))
        v[:, 0, :, 0] *= ph
        v[:, 1, :, 1] *= ph
        v[:, 0, :, 1] *= ph.conjugate()
        v[:, 1, :, 0] *= ph.conjugate()
    elif k == "SWAP":
        a, b = sorted(gate.qubits)
        v = _pair_view(psi, n, a, b)
        tmp = v[:, 0, :, 1].copy()
        v[:, 0, :, 1] = v[:, 1, :, 0]
        v[:, 1, :, 0] = tmp
    elif k == "X":
        q = gate.qubits[0]
        v = psi.reshape(1 << q, 2, -1)
        tmp = v[:, 0].copy()
        v[:, 0] = v[:, 1]
        v[:, 1] = tmp
    elif k == "MCX":
        v = _view(psi, n)
        i0, i1 = _ctrl_index(n, gate, 0), _ctrl_index(n, gate, 1)
        tmp = v[i0].copy()
        v[i0] = v[i1]
        v[i1] = tmp
    elif k == "MCRY":
        v = _view(psi, n)
        i0, i1 = _ctrl_index(n, gate, 0), _ctrl_index(n, gate, 1)
        c, s = math.cos(gate.theta / 2), math.sin(gate.theta / 2)
        a0 = v[i0].copy()
        a1 = v[i1].copy()
        v[i0] = c * a0 - s * a1
        v[i1] = s * a0 + c * a1
    else:  # pragma: no cover - Gate validates kinds
        raise CircuitError(k)
    return psi


def apply_generator(psi: np.ndarray, gate: Gate, n: int) -> np.ndarray:
    """Return ``G psi`` (new array) where the gate is ``exp(-i theta G / 2)``."""
    out = psi.copy()
    k = gate.kind
    if k == "RX":
        q = gate.qubits[0]
        v = out.reshape(1 << q, 2, -1)
        tmp = v[:, 0].copy()
        v[:, 0] = v[:, 1]
        v[:, 1] = tmp
    elif k == "RZ":
        q = gate.qubits[0]
        out.reshape(1 << q, 2, -1)[:, 1] *= -1
    elif k == "RZZ":
        a, b = sorted(gate.qubits)
        v = _pair_view(out, n, a, b)
        v[:, 0, :, 1] *= -1
        v[:, 1, :, 0] *= -1
    elif k == "MCRY":
        w = _view(psi, n)
        v = _view(out, n)
        mask = np.zeros_like(v)
        i0, i1 = _ctrl_index(n, gate, 0), _ctrl_index(n, gate, 1)
        mask[i0] = -1j * w[i1]
        mask[i1] = 1j * w[i0]
        out = mask.reshape(psi.shape)
    else:
        raise CircuitError(f"{k} has no generator")
    return out


def apply_circuit(psi: np.ndarray, c: Circuit) -> np.ndarray:
    for g in c.gates:
        apply_gate(psi, g, c.n_qubits)
    return psi


def basis_state(n: int, bits: str | int = 0, dtype=np.complex128) -> np.ndarray:
    idx = bits_to_index(bits) if isinstance(bits, str) else int(bits)
    psi = np.zeros(1 << n, dtype=dtype)
    psi[idx] = 1.0
    return psi


def simulate(c: Circuit, input: str | None = None, *, max_qubits: int | None = None) -> np.ndarray:
    """Return ``C|input>``; the default input is ``|0^N>``."""
    n = c.n_qubits
    _check_limit(n, max_qubits)
    if input is None:
        input = "0" * n
    if len(input) != n:
        raise CircuitError(f"input has {len(input)} bits, circuit has {n} qubits")
    return apply_circuit(basis_state(n, input), c)


def probabilities(psi: np.ndarray) -> np.ndarray:
    p = np.abs(psi) ** 2
    return p.reshape(p.shape[0], -1).sum(axis=1) if p.ndim > 1 else p


def peak_weight(c: Circuit, s: str, *, max_qubits: int | None = None) -> float:
    psi = simulate(c, max_qubits=max_qubits)
    return float(abs(psi[bits_to_index(s)]) ** 2)


def find_peak(c: Circuit, *, max_qubits: int | None = None) -> tuple[str, float]:
    p = probabilities(simulate(c, max_qubits=max_qubits))
    i = int(np.argmax(p))  # first maximum = lexicographically smallest
    return index_to_bits(i, c.n_qubits), float(p[i])


def z_expectations(psi: np.ndarray) -> np.ndarray:
    p = probabilities(psi)
    n = int(round(math.log2(p.size)))
    out = np.empty(n)
    for q in range(n):
        v = p.reshape(1 << q, 2, -1)
        out[q] = v[:, 0].sum() - v[:, 1].sum()
    return np.clip(out, -1.0, 1.0)


def sample(psi: np.ndarray, shots: int, seed: int | np.random.Generator | None = None) -> list[str]:
    if shots < 1:
        raise ValueError("shots must be >= 1")
    p = probabilities(psi)
    p = p / p.sum()
    n = int(round(math.log2(p.size)))
    rng = np.random.default_rng(seed)
    draws = rng.choice(p.size, size=shots, p=p)
    return [index_to_bits(int(i), n) for i in draws]


def patch_unitary(c: Circuit, window: tuple[int, int], qubits: Sequence[int], *, max_k: int = 10) -> np.ndarray:
    """Unitary of ``c.gates[start:stop]`` restricted to ``qubits``.

    Row/column order uses ``qubits[0]`` as the most significant bit.
    """
    qubits = list(qubits)
    k = len(qubits)
    if k > max_k:
        raise CircuitError(f"patch on {k} qubits exceeds limit {max_k}")
    local = {q: i for i, q in enumerate(qubits)}
    start, stop = window
    gates = []
    for g in c.gates[start:stop]:
        if any(q not in local for q in g.support):
            raise CircuitError(f"gate {g.kind}{g.support} leaves the patch subset {qubits}")
        gates.append(g.relabel(_dense_map(local, c.n_qubits)))
    return circuit_unitary(Circuit(k, gates))


def _dense_map(local: dict[int, int], n: int) -> list[int]:
    m = [0] * n
    for q, i in local.items():
        m[q] = i
    return m


def circuit_unitary(c: Circuit) -> np.ndarray:
    d = 1 << c.n_qubits
    u = np.eye(d, dtype=np.complex128)
    return apply_circuit(u, c)


def trace_fidelity_loss(t: np.ndarray, t_new: np.ndarray) -> float:
    """``1 - |Tr(T^dag T_new)| / d``; zero iff equal up to a global phase."""
    if t.shape != t_new.shape:
        raise ValueError(f"dimension mismatch {t.shape} vs {t_new.shape}")
    d = t.shape[0]
    return float(max(0.0, 1.0 - abs(np.vdot(t, t_new)) / d))


def gradient(objective: Callable[[np.ndarray], float], params: Sequence[float], h: float = FD_STEP) -> np.ndarray:
    """Central finite-difference gradient."""
    x = np.array(params, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fp, fm = objective(xp), objective(xm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"objective not finite at parameter {i}")
        g[i] = (fp - fm) / (2 * h)
    return g


def overlap_and_gradient(c: Circuit, psi_in: np.ndarray, bra: np.ndarray) -> tuple[complex, np.ndarray]:
    """``a = <bra|C|psi_in>`` (summed over batch columns) and ``da/dtheta``.

    Adjoint method: one forward pass, one backward pass. Gradient entries
    follow the order of :meth:`Circuit.angles`.
    """
    n = c.n_qubits
    psi = apply_circuit(np.array(psi_in, dtype=np.complex128, order="C"), c)
    lam = np.array(bra, dtype=np.complex128, order="C")
    amp = complex(np.vdot(lam, psi))
    n_par = sum(g.theta is not None for g in c.gates)
    grad = np.zeros(n_par, dtype=np.complex128)
    k = n_par
    for g in reversed(c.gates):
        if g.theta is not None:
            k -= 1
            grad[k] = -0.5j * np.vdot(lam, apply_generator(psi, g, n))
        inv = g.adjoint()
        apply_gate(psi, inv, n)
        apply_gate(lam, inv, n)
    return amp, grad


def gate_matrix(gate: Gate) -> np.ndarray:
    """Dense matrix of ``gate`` on its support, ``support[0]`` most significant."""
    k = gate.kind
    if k in ("RX", "RZ", "RZZ"):
        c, s = math.cos(gate.theta / 2), math.sin(gate.theta / 2)
        if k == "RX":
            return np.array([[c, -1j * s], [-1j * s, c]])
        ph = complex(c, -s)
        if k == "RZ":
            return np.diag([ph, ph.conjugate()])
        return np.diag([ph, ph.conjugate(), ph.conjugate(), ph])
    if k == "X":
        return np.array([[0, 1], [1, 0]], dtype=np.complex128)
    if k == "SWAP":
        return np.eye(4, dtype=np.complex128)[[0, 2, 1, 3]]
    sup = gate.support
    m = [0] * (max(sup) + 1)
    for i, q in enumerate(sup):
        m[q] = i
    return circuit_unitary(Circuit(len(sup), [gate.relabel(m)]))
