"""Peakedness-check-on-basis-states gadget built from a verifier circuit.

The gadget appends a marker qubit ``C`` and a guard qubit ``D`` to the
verifier's registers. Applied in list order it runs ``G``, ``R1``, ``U``,
``R2``, ``U†``, so a canonical input ``|y, 0^a, 0>|0>_C|0>_D`` has diagonal
element ``p(y) + (1 - p(y)) cos(phi)`` while any input with ancilla or
output register off zero has diagonal element zero.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from . import statevector as sv
from .circuit import MCRY, MCX, X, Circuit, CircuitError, compose, invert

YES, NO, UNKNOWN = "YES", "NO", "UNKNOWN"


@dataclass(frozen=True)
class VerifierSpec:
    circuit: Circuit
    witness: tuple[int, ...]
    ancilla: tuple[int, ...]
    output: int

    def __post_init__(self) -> None:
        regs = list(self.witness) + list(self.ancilla) + [self.output]
        if len(set(regs)) != len(regs):
            raise CircuitError("registers overlap")
        if sorted(regs) != list(range(self.circuit.n_qubits)):
            raise CircuitError("registers must cover the verifier's qubits exactly")

    def sidecar(self) -> dict[str, Any]:
        return {"witness": list(self.witness), "ancilla": list(self.ancilla), "output": self.output}

    @classmethod
    def from_sidecar(cls, circuit: Circuit, doc: dict[str, Any]) -> VerifierSpec:
        try:
            return cls(circuit, tuple(doc["witness"]), tuple(doc["ancilla"]), int(doc["output"]))
        except KeyError as exc:
            raise CircuitError(f"sidecar missing field {exc.args[0]!r}") from None


@dataclass(frozen=True)
class PcbsInstance:
    circuit: Circuit
    phi: float
    witness: tuple[int, ...]
    ancilla: tuple[int, ...]
    output: int
    marker: int
    guard: int

    def canonical_input(self, y: str) -> str:
        if len(y) != len(self.witness):
            raise ValueError(f"witness needs {len(self.witness)} bits")
        bits = ["0"] * self.circuit.n_qubits
        for q, b in zip(self.witness, y):
            bits[q] = b
        return "".join(bits)

    def is_canonical(self, z: str) -> bool:
        return all(z[q] == "0" for q in self.ancilla) and z[self.output] == "0"


def build_pcbs_gadget(v: VerifierSpec, phi: float) -> PcbsInstance:
    if not 0 < phi < math.pi / 2:
        raise ValueError("phi must lie in (0, pi/2)")
    n = v.circuit.n_qubits
    c_q, d_q = n, n + 1
    zero_ab = [(a, 0) for a in v.ancilla] + [(v.output, 0)]
    gates = [X(d_q), MCX(d_q, zero_ab)]
    gates.append(MCRY(c_q, 2 * phi, [(a, 0) for a in v.ancilla]))
    u = Circuit(n + 2, v.circuit.gates)
    head = Circuit(n + 2, gates)
    r2 = Circuit(n + 2, [MCRY(c_q, -2 * phi, [(v.output, 1)])])
    z = compose(compose(compose(head, u), r2), invert(u))
    meta = {"pcbs": {**v.sidecar(), "marker": c_q, "guard": d_q, "phi": phi}}
    return PcbsInstance(Circuit(n + 2, z.gates, meta), phi, v.witness, v.ancilla, v.output, c_q, d_q)


def diagonal_overlap(z_circ: Circuit, z: str, *, max_qubits: int | None = None) -> float:
    """``|<z|Z|z>|``."""
    psi = sv.simulate(z_circ, z, max_qubits=max_qubits)
    return float(abs(psi[sv.bits_to_index(z)]))


def acceptance_probability(v: VerifierSpec, y: str) -> float:
    """``p(y)``: probability of reading 1 on the output after ``U|y, 0, 0>``."""
    bits = ["0"] * v.circuit.n_qubits
    for q, b in zip(v.witness, y):
        bits[q] = b
    p = sv.probabilities(sv.simulate(v.circuit, "".join(bits)))
    view = p.reshape(1 << v.output, 2, -1)
    return float(view[:, 1].sum())


def interval_value(p: float, phi: float) -> float:
    return p + (1 - p) * math.cos(phi)


def pcbs_thresholds(c: float, s: float, phi: float) -> tuple[float, float, float]:
    """``(f(c), f(s), (1 - cos phi)(c - s))`` with ``f(p) = p + (1 - p) cos phi``."""
    if not (0 <= s < c <= 1):
        raise ValueError("thresholds need 1 >= c > s >= 0")
    if not 0 < phi < math.pi / 2:
        raise ValueError("phi must lie in (0, pi/2)")
    return interval_value(c, phi), interval_value(s, phi), (1 - math.cos(phi)) * (c - s)


def pcbs_decide(inst: PcbsInstance, delta_yes: float, delta_no: float, limit: int) -> str:
    if limit < 1:
        raise ValueError("enumeration limit must be >= 1")
    k = len(inst.witness)
    space = 1 << k
    best = []
    for idx, bits in enumerate(itertools.product("01", repeat=k)):
        if idx >= limit:
            break
        val = diagonal_overlap(inst.circuit, inst.canonical_input("".join(bits)))
        if val >= delta_yes:
            return YES
        best.append(val)
    if len(best) == space and all(v < delta_no for v in best):
        return NO
    return UNKNOWN


def random_verifier(n_witness: int, n_ancilla: int, rng: np.random.Generator | int | None = None,
                    n_layers: int = 2) -> VerifierSpec:
    """Random brickwork verifier with registers laid out as witness, ancilla, output."""
    from .circuit import random_brickwork

    rng = np.random.default_rng(rng)
    n = n_witness + n_ancilla + 1
    c = random_brickwork(n, n_layers, rng)
    return VerifierSpec(c, tuple(range(n_witness)), tuple(range(n_witness, n - 1)), n - 1)


def load_sidecar(path: str) -> dict[str, Any]:
    with open(path) as fh:
        return json.load(fh)
