"""Circuit intermediate representation shared by every other module.

A circuit is an ordered gate list over ``n_qubits`` wires. The first gate in
the list is applied first. Bitstrings put qubit 0 in the leftmost position.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

GATE_KINDS = ("RX", "RZ", "RZZ", "SWAP", "X", "MCRY", "MCX")
PARAMETRIC = frozenset({"RX", "RZ", "RZZ", "MCRY"})
DIAGONAL = frozenset({"RZ", "RZZ"})
FORMAT_VERSION = 1

_ARITY = {"RX": 1, "RZ": 1, "RZZ": 2, "SWAP": 2, "X": 1, "MCRY": 1, "MCX": 1}


class CircuitError(ValueError):
    """Raised for invalid gates, circuits or permutations."""


class CircuitFormatError(CircuitError):
    """Raised when a circuit file violates the schema.

    ``offset`` is the byte offset of a syntax error, ``path`` the JSON path of
    a schema violation; at least one of the two is set.
    """

    def __init__(self, message: str, *, offset: int | None = None, path: str | None = None):
        where = []
        if offset is not None:
            where.append(f"byte offset {offset}")
        if path is not None:
            where.append(f"at {path}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.offset = offset
        self.path = path


@dataclass(frozen=True)
class Gate:
    kind: str
    qubits: tuple[int, ...]
    theta: float | None = None
    controls: tuple[tuple[int, int], ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in GATE_KINDS:
            raise CircuitError(f"unknown gate kind {self.kind!r}")
        object.__setattr__(self, "qubits", tuple(int(q) for q in self.qubits))
        object.__setattr__(
            self, "controls", tuple((int(q), int(p)) for q, p in self.controls)
        )
        if len(self.qubits) != _ARITY[self.kind]:
            raise CircuitError(f"{self.kind} acts on {_ARITY[self.kind]} target qubit(s), got {self.qubits}")
        if self.kind in PARAMETRIC:
            if self.theta is None:
                raise CircuitError(f"{self.kind} needs an angle")
            object.__setattr__(self, "theta", float(self.theta))
        elif self.theta is not None:
            raise CircuitError(f"{self.kind} takes no angle")
        if self.controls and self.kind not in ("MCRY", "MCX"):
            raise CircuitError(f"{self.kind} takes no controls")
        if any(p not in (0, 1) for _, p in self.controls):
            raise CircuitError("control polarity must be 0 or 1")
        sup = self.support
        if len(set(sup)) != len(sup):
            raise CircuitError(f"repeated qubit in {self}")
        if min(sup) < 0:
            raise CircuitError("negative qubit index")

    @property
    def support(self) -> tuple[int, ...]:
        """Targets followed by control qubits."""
        return self.qubits + tuple(q for q, _ in self.controls)

    @property
    def is_two_qubit(self) -> bool:
        return len(self.support) >= 2

    def adjoint(self) -> Gate:
        if self.theta is None:
            return self
        return Gate(self.kind, self.qubits, -self.theta, self.controls)

    def relabel(self, mapping: Sequence[int]) -> Gate:
        return Gate(
            self.kind,
            tuple(mapping[q] for q in self.qubits),
            self.theta,
            tuple((mapping[q], p) for q, p in self.controls),
        )

    def with_theta(self, theta: float) -> Gate:
        return Gate(self.kind, self.qubits, theta, self.controls)


def RX(q: int, theta: float) -> Gate:
    return Gate("RX", (q,), theta)


def RZ(q: int, theta: float) -> Gate:
    return Gate("RZ", (q,), theta)


def RZZ(a: int, b: int, theta: float) -> Gate:
    return Gate("RZZ", (a, b), theta)


def SWAP(a: int, b: int) -> Gate:
    return Gate("SWAP", (a, b))


def X(q: int) -> Gate:
    return Gate("X", (q,))


def MCRY(target: int, theta: float, controls: Iterable[tuple[int, int]] = ()) -> Gate:
    return Gate("MCRY", (target,), theta, tuple(controls))


def MCX(target: int, controls: Iterable[tuple[int, int]] = ()) -> Gate:
    return Gate("MCX", (target,), None, tuple(controls))


@dataclass(frozen=True, eq=True)
class Circuit:
    n_qubits: int
    gates: tuple[Gate, ...] = ()
    meta: dict[str, Any] = field(default_factory=dict, hash=False)

    def __post_init__(self) -> None:
        if self.n_qubits < 0:
            raise CircuitError("n_qubits must be nonnegative")
        object.__setattr__(self, "gates", tuple(self.gates))
        for i, g in enumerate(self.gates):
            if max(g.support) >= self.n_qubits:
                raise CircuitError(f"gate {i} ({g.kind}) touches qubit {max(g.support)} >= {self.n_qubits}")

    def __len__(self) -> int:
        return len(self.gates)

    def __iter__(self):
        return iter(self.gates)

    def count(self, kind: str) -> int:
        return sum(g.kind == kind for g in self.gates)

    @property
    def num_two_qubit(self) -> int:
        return sum(g.is_two_qubit for g in self.gates)

    def angles(self) -> np.ndarray:
        """Angles of the parametric gates, in gate order."""
        return np.array([g.theta for g in self.gates if g.theta is not None], dtype=float)

    def with_angles(self, angles: Sequence[float]) -> Circuit:
        it = iter(angles)
        gates = [g.with_theta(float(next(it))) if g.theta is not None else g for g in self.gates]
        rest = list(it)
        if rest:
            raise CircuitError(f"{len(rest)} surplus angles")
        return Circuit(self.n_qubits, gates, dict(self.meta))

    def slice(self, start: int, stop: int | None = None) -> Circuit:
        return Circuit(self.n_qubits, self.gates[start:stop])

    def replace_window(self, start: int, stop: int, gates: Iterable[Gate]) -> Circuit:
        new = self.gates[:start] + tuple(gates) + self.gates[stop:]
        return Circuit(self.n_qubits, new, dict(self.meta))


def compose(a: Circuit, b: Circuit) -> Circuit:
    """``a`` followed by ``b``. Metadata of ``a`` is kept."""
    if a.n_qubits != b.n_qubits:
        raise CircuitError(f"qubit count mismatch: {a.n_qubits} vs {b.n_qubits}")
    return Circuit(a.n_qubits, a.gates + b.gates, dict(a.meta))


def invert(c: Circuit) -> Circuit:
    return Circuit(c.n_qubits, [g.adjoint() for g in reversed(c.gates)], dict(c.meta))


# --------------------------------------------------------------------------
# Qubit graphs and permutations
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AdjacencyGraph:
    n_nodes: int
    edges: dict[tuple[int, int], int]

    def neighbors(self, v: int) -> list[int]:
        out = []
        for (a, b) in self.edges:
            if a == v:
                out.append(b)
            elif b == v:
                out.append(a)
        return sorted(out)

    def adjacency_lists(self) -> list[list[int]]:
        adj: list[set[int]] = [set() for _ in range(self.n_nodes)]
        for a, b in self.edges:
            adj[a].add(b)
            adj[b].add(a)
        return [sorted(s) for s in adj]

    def matrix(self) -> np.ndarray:
        m = np.zeros((self.n_nodes, self.n_nodes), dtype=int)
        for (a, b), k in self.edges.items():
            m[a, b] = m[b, a] = k
        return m


def build_adjacency(c: Circuit) -> AdjacencyGraph:
    """Undirected multigraph of qubit couplings, one count per coupling gate.

    A multi-controlled gate couples every pair of its support.
    """
    edges: dict[tuple[int, int], int] = {}
    for g in c.gates:
        sup = sorted(g.support)
        for i in range(len(sup)):
            for j in range(i + 1, len(sup)):
                key = (sup[i], sup[j])
                edges[key] = edges.get(key, 0) + 1
    return AdjacencyGraph(c.n_qubits, edges)


@dataclass(frozen=True)
class QubitPermutation:
    """Bijection old label -> new label, stored as ``mapping[old] = new``."""

    mapping: tuple[int, ...]

    def __post_init__(self) -> None:
        m = tuple(int(v) for v in self.mapping)
        if sorted(m) != list(range(len(m))):
            raise CircuitError(f"not a permutation: {m}")
        object.__setattr__(self, "mapping", m)

    @classmethod
    def identity(cls, n: int) -> QubitPermutation:
        return cls(tuple(range(n)))

    @classmethod
    def transposition(cls, n: int, i: int, j: int) -> QubitPermutation:
        m = list(range(n))
        m[i], m[j] = j, i
        return cls(tuple(m))

    def __len__(self) -> int:
        return len(self.mapping)

    def __call__(self, q: int) -> int:
        return self.mapping[q]

    def inverse(self) -> QubitPermutation:
        inv = [0] * len(self.mapping)
        for old, new in enumerate(self.mapping):
            inv[new] = old
        return QubitPermutation(tuple(inv))

    def then(self, other: QubitPermutation) -> QubitPermutation:
        """Apply ``self`` first, then ``other``."""
        if len(other) != len(self):
            raise CircuitError("permutation size mismatch")
        return QubitPermutation(tuple(other.mapping[v] for v in self.mapping))


def bandwidth(g: AdjacencyGraph, perm: QubitPermutation | None = None) -> int:
    m = perm.mapping if perm is not None else range(g.n_nodes)
    return max((abs(m[a] - m[b]) for a, b in g.edges), default=0)


def _cuthill_mckee(g: AdjacencyGraph) -> list[int]:
    adj = g.adjacency_lists()
    degree = [len(a) for a in adj]
    visited = [False] * g.n_nodes
    order: list[int] = []
    # components are seeded by the lowest-index node of minimum degree
    seeds = sorted(range(g.n_nodes), key=lambda v: (degree[v], v))
    for seed in seeds:
        if visited[seed]:
            continue
        visited[seed] = True
        queue = deque([seed])
        while queue:
            v = queue.popleft()
            order.append(v)
            for w in sorted(adj[v], key=lambda u: (degree[u], u)):
                if not visited[w]:
                    visited[w] = True
                    queue.append(w)
    return order


def rcm_order(g: AdjacencyGraph) -> QubitPermutation:
    """Reverse Cuthill-McKee relabeling.

    Falls back to the input labeling when that already has strictly smaller
    bandwidth, so the result never widens the band.
    """
    order = _cuthill_mckee(g)[::-1]
    mapping = [0] * g.n_nodes
    for new, old in enumerate(order):
        mapping[old] = new
    perm = QubitPermutation(tuple(mapping))
    ident = QubitPermutation.identity(g.n_nodes)
    if bandwidth(g, ident) < bandwidth(g, perm):
        return ident
    return perm


def apply_permutation(c: Circuit, perm: QubitPermutation | Sequence[int]) -> Circuit:
    if not isinstance(perm, QubitPermutation):
        perm = QubitPermutation(tuple(perm))
    if len(perm) != c.n_qubits:
        raise CircuitError(f"permutation over {len(perm)} qubits applied to {c.n_qubits}-qubit circuit")
    return Circuit(c.n_qubits, [g.relabel(perm.mapping) for g in c.gates], dict(c.meta))


# --------------------------------------------------------------------------
# Peephole simplifier
# --------------------------------------------------------------------------


def _is_inverse_pair(a: Gate, b: Gate, atol: float) -> bool:
    if a.kind != b.kind or a.controls != b.controls:
        return False
    if a.kind in ("RZZ", "SWAP"):
        if set(a.qubits) != set(b.qubits):
            return False
    elif a.qubits != b.qubits:
        return False
    if a.theta is None:
        return True
    return abs(a.theta + b.theta) <= atol


def _cancel_pass(gates: list[Gate], n: int, atol: float) -> tuple[list[Gate], bool]:
    alive = [True] * len(gates)
    wires: list[list[int]] = [[] for _ in range(n)]
    changed = False
    for idx, g in enumerate(gates):
        partner = None
        sup = g.support
        if g.kind in DIAGONAL:
            # diagonal gates commute with each other, so look past them
            cands: set[int] | None = None
            for q in sup:
                reach = set()
                for j in reversed(wires[q]):
                    reach.add(j)
                    if gates[j].kind not in DIAGONAL:
                        break
                cands = reach if cands is None else cands & reach
            for j in sorted(cands or (), reverse=True):
                if gates[j].kind in DIAGONAL and _is_inverse_pair(gates[j], g, atol):
                    # every gate in between on these wires must be diagonal
                    ok = all(
                        all(gates[k].kind in DIAGONAL for k in wires[q][wires[q].index(j) + 1:])
                        for q in sup
                    )
                    if ok:
                        partner = j
                        break
        else:
            tops = {wires[q][-1] if wires[q] else None for q in sup}
            if len(tops) == 1:
                j = tops.pop()
                if j is not None and set(gates[j].support) == set(sup) and _is_inverse_pair(gates[j], g, atol):
                    partner = j
        if partner is not None:
            alive[partner] = False
            alive[idx] = False
            for q in gates[partner].support:
                wires[q].remove(partner)
            changed = True
            continue
        for q in sup:
            wires[q].append(idx)
    return [g for g, a in zip(gates, alive) if a], changed


def cancel_inverse_pairs(c: Circuit, atol: float = 1e-12) -> tuple[Circuit, float]:
    """Remove adjacent gate/adjoint pairs until nothing changes.

    Returns the simplified circuit and the fraction of the original
    multi-qubit gates that survive (1.0 when there were none).
    """
    gates = list(c.gates)
    changed = True
    while changed:
        gates, changed = _cancel_pass(gates, c.n_qubits, atol)
    out = Circuit(c.n_qubits, gates, dict(c.meta))
    before = c.num_two_qubit
    frac = out.num_two_qubit / before if before else 1.0
    return out, frac


# --------------------------------------------------------------------------
# Random circuits
# --------------------------------------------------------------------------


def pair_block(a: int, b: int, angles: Sequence[float]) -> list[Gate]:
    """RX layer, RZ layer, RZZ, RZ layer on the pair ``(a, b)``; seven angles."""
    t = angles
    return [
        RX(a, t[0]), RX(b, t[1]), RZ(a, t[2]), RZ(b, t[3]),
        RZZ(a, b, t[4]), RZ(a, t[5]), RZ(b, t[6]),
    ]


def brickwork_layer(n: int, rng: np.random.Generator, n_pairs: int | None = None) -> list[Gate]:
    """One layer over a random perfect matching of the qubits.

    ``n_pairs`` truncates the layer; unpaired qubits still get RX and RZ.
    """
    perm = rng.permutation(n)
    full = n // 2
    n_pairs = full if n_pairs is None else min(n_pairs, full)
    gates: list[Gate] = []
    for k in range(n_pairs):
        a, b = int(perm[2 * k]), int(perm[2 * k + 1])
        gates += pair_block(a, b, rng.uniform(-math.pi, math.pi, 7))
    for q in perm[2 * n_pairs:]:
        gates += [RX(int(q), rng.uniform(-math.pi, math.pi)), RZ(int(q), rng.uniform(-math.pi, math.pi))]
    return gates


def random_brickwork(
    n: int,
    n_layers: int,
    rng: np.random.Generator | int | None = None,
    n_rzz: int | None = None,
) -> Circuit:
    """All-to-all brickwork; ``n_rzz`` fixes the RZZ count exactly instead."""
    rng = np.random.default_rng(rng)
    gates: list[Gate] = []
    if n < 2:
        for _ in range(n_layers):
            gates += [RX(0, rng.uniform(-math.pi, math.pi)), RZ(0, rng.uniform(-math.pi, math.pi))]
        return Circuit(n, gates)
    if n_rzz is None:
        for _ in range(n_layers):
            gates += brickwork_layer(n, rng)
    else:
        left = n_rzz
        while left > 0:
            k = min(left, n // 2)
            gates += brickwork_layer(n, rng, k)
            left -= k
    return Circuit(n, gates)


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------


def gate_to_dict(g: Gate) -> dict[str, Any]:
    d: dict[str, Any] = {"g": g.kind, "q": list(g.qubits)}
    if g.controls:
        d["ctrl"] = [[q, p] for q, p in g.controls]
    if g.theta is not None:
        d["theta"] = g.theta
    return d


def circuit_to_dict(c: Circuit) -> dict[str, Any]:
    return {
        "version": FORMAT_VERSION,
        "n_qubits": c.n_qubits,
        "gates": [gate_to_dict(g) for g in c.gates],
        "meta": c.meta,
    }


def serialize(c: Circuit) -> bytes:
    return json.dumps(circuit_to_dict(c), separators=(",", ":")).encode()


def _need(obj: dict, key: str, typ, path: str):
    if key not in obj:
        raise CircuitFormatError(f"missing field {key!r}", path=path)
    val = obj[key]
    if typ is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise CircuitFormatError(f"field {key!r} must be a number", path=f"{path}.{key}")
        return float(val)
    if not isinstance(val, typ) or (typ is int and isinstance(val, bool)):
        raise CircuitFormatError(f"field {key!r} has wrong type", path=f"{path}.{key}")
    return val


def circuit_from_dict(doc: Any) -> Circuit:
    if not isinstance(doc, dict):
        raise CircuitFormatError("top level must be an object", path="$")
    version = _need(doc, "version", int, "$")
    if version != FORMAT_VERSION:
        raise CircuitFormatError(f"unsupported version {version}", path="$.version")
    n = _need(doc, "n_qubits", int, "$")
    raw = _need(doc, "gates", list, "$")
    meta = doc.get("meta", {})
    if not isinstance(meta, dict):
        raise CircuitFormatError("meta must be an object", path="$.meta")
    gates = []
    for i, gd in enumerate(raw):
        path = f"$.gates[{i}]"
        if not isinstance(gd, dict):
            raise CircuitFormatError("gate must be an object", path=path)
        kind = _need(gd, "g", str, path)
        qubits = _need(gd, "q", list, path)
        theta = _need(gd, "theta", float, path) if "theta" in gd else None
        ctrl = gd.get("ctrl", [])
        try:
            if not all(isinstance(q, int) for q in qubits):
                raise CircuitError("qubit indices must be integers")
            ctrl_t = tuple((int(a), int(b)) for a, b in ctrl)
            gates.append(Gate(kind, tuple(qubits), theta, ctrl_t))
        except (CircuitError, TypeError, ValueError) as exc:
            raise CircuitFormatError(str(exc), path=path) from None
    try:
        return Circuit(n, gates, meta)
    except CircuitError as exc:
        raise CircuitFormatError(str(exc), path="$") from None


def parse(data: bytes | str) -> Circuit:
    if isinstance(data, bytes):
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CircuitFormatError("not UTF-8", offset=exc.start) from None
    else:
        text = data
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CircuitFormatError(exc.msg, offset=len(text[: exc.pos].encode())) from None
    return circuit_from_dict(doc)
