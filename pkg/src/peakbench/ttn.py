"""Tree tensor-network attack with belief-propagation marginals.

The tree is a root joined to three balanced binary subtrees. Gates are
routed onto tree edges with SWAP chains, evolved by simple update in Vidal
form (node tensors ``Gamma`` plus edge weights ``lambda``) using the
reduced-tensor QR trick, and marginals come from belief propagation, which
is exact on a tree.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import statevector as sv
from .circuit import SWAP, Circuit, CircuitError, Gate
from .mps import RANK_RTOL, DISCARD_ATOL, MpsError, _svd, overlap_fraction, sign_guess


class TtnError(RuntimeError):
    pass


@dataclass(frozen=True)
class TreeTopology:
    n: int
    parent: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.parent) != self.n:
            raise ValueError("parent array length mismatch")
        roots = [v for v, p in enumerate(self.parent) if p < 0]
        if len(roots) != 1:
            raise ValueError("a tree needs exactly one root")
        for v in range(self.n):
            seen = set()
            u = v
            while self.parent[u] >= 0:
                if u in seen:
                    raise ValueError("parent array has a cycle")
                seen.add(u)
                u = self.parent[u]

    @property
    def root(self) -> int:
        return self.parent.index(-1)

    @property
    def edges(self) -> list[tuple[int, int]]:
        return sorted((min(v, p), max(v, p)) for v, p in enumerate(self.parent) if p >= 0)

    def children(self, v: int) -> list[int]:
        return [u for u, p in enumerate(self.parent) if p == v]

    def neighbors(self, v: int) -> list[int]:
        nb = self.children(v)
        if self.parent[v] >= 0:
            nb.append(self.parent[v])
        return sorted(nb)

    def degree(self, v: int) -> int:
        return len(self.neighbors(v))

    def adjacent(self, a: int, b: int) -> bool:
        return self.parent[a] == b or self.parent[b] == a

    def _ancestors(self, v: int) -> list[int]:
        out = [v]
        while self.parent[out[-1]] >= 0:
            out.append(self.parent[out[-1]])
        return out

    def path(self, a: int, b: int) -> list[int]:
        up_a, up_b = self._ancestors(a), self._ancestors(b)
        common = set(up_a) & set(up_b)
        lca = next(v for v in up_a if v in common)
        left = up_a[: up_a.index(lca) + 1]
        right = up_b[: up_b.index(lca)]
        return left + right[::-1]

    def postorder(self) -> list[int]:
        out: list[int] = []

        def visit(v: int) -> None:
            for c in self.children(v):
                visit(c)
            out.append(v)

        visit(self.root)
        return out

    def preorder(self) -> list[int]:
        out: list[int] = []
        stack = [self.root]
        while stack:
            v = stack.pop()
            out.append(v)
            stack.extend(reversed(self.children(v)))
        return out


def build_tree_topology(n: int) -> TreeTopology:
    """Root 0 plus three heap-ordered subtrees; larger subtrees come first."""
    if n < 4:
        raise ValueError("tree topology needs n >= 4")
    m = n - 1
    sizes = [m // 3 + (1 if i < m % 3 else 0) for i in range(3)]
    parent = [-1] * n
    offset = 1
    for size in sizes:
        for k in range(size):
            parent[offset + k] = 0 if k == 0 else offset + (k - 1) // 2
        offset += size
    return TreeTopology(n, tuple(parent))


def route_to_topology(c: Circuit, t: TreeTopology) -> Circuit:
    """Route two-qubit gates onto tree edges, moving the lower-index logical qubit.

    The result acts on physical nodes; ``meta["final_layout"][q]`` is the node
    holding logical qubit ``q`` at the end, ``meta["routing_swaps"]`` the
    number of inserted SWAPs.
    """
    n = c.n_qubits
    if n != t.n:
        raise CircuitError(f"circuit has {n} qubits, topology {t.n} nodes")
    l2p = list(range(n))
    p2l = list(range(n))
    out: list[Gate] = []
    swaps = 0
    for g in c.gates:
        sup = g.support
        if len(sup) == 1:
            out.append(g.relabel(l2p))
            continue
        if len(sup) != 2:
            raise CircuitError(f"{g.kind} on {len(sup)} qubits cannot be routed onto a tree")
        a, b = sup
        mover, other = (a, b) if a < b else (b, a)
        path = t.path(l2p[mover], l2p[other])
        for k in range(len(path) - 2):
            x, y = path[k], path[k + 1]
            out.append(SWAP(x, y))
            swaps += 1
            lx, ly = p2l[x], p2l[y]
            p2l[x], p2l[y] = ly, lx
            l2p[lx], l2p[ly] = y, x
        out.append(g.relabel(l2p))
    meta = dict(c.meta)
    meta["final_layout"] = l2p
    meta["routing_swaps"] = swaps
    return Circuit(n, out, meta)


# --------------------------------------------------------------------------
# Vidal-form state and simple update
# --------------------------------------------------------------------------


def _edge(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


@dataclass
class TtnState:
    topology: TreeTopology
    gammas: list[np.ndarray]  # axes: phys, then neighbours in sorted order
    lambdas: dict[tuple[int, int], np.ndarray]
    chi: int
    layout: list[int]  # logical qubit -> node
    discarded: float = 0.0
    n_truncations: int = 0

    @classmethod
    def product(cls, t: TreeTopology, chi: int, layout: Sequence[int] | None = None) -> TtnState:
        gammas = []
        for v in range(t.n):
            shape = (2,) + (1,) * t.degree(v)
            g = np.zeros(shape, dtype=np.complex128)
            g[(0,) + (0,) * t.degree(v)] = 1.0
            gammas.append(g)
        lam = {e: np.ones(1) for e in t.edges}
        return cls(t, gammas, lam, chi, list(layout) if layout is not None else list(range(t.n)))

    def leg(self, v: int, w: int) -> int:
        return 1 + self.topology.neighbors(v).index(w)

    @property
    def bonds(self) -> dict[tuple[int, int], int]:
        return {e: int(lam.size) for e, lam in self.lambdas.items()}

    def copy(self) -> TtnState:
        return TtnState(self.topology, [g.copy() for g in self.gammas],
                        {e: l.copy() for e, l in self.lambdas.items()}, self.chi, list(self.layout),
                        self.discarded, self.n_truncations)

    def _scale(self, g: np.ndarray, v: int, skip: int | None, power: float) -> np.ndarray:
        for w in self.topology.neighbors(v):
            if w == skip:
                continue
            lam = self.lambdas[_edge(v, w)] ** power
            ax = self.leg(v, w)
            shape = [1] * g.ndim
            shape[ax] = lam.size
            g = g * lam.reshape(shape)
        return g

    def apply_one(self, v: int, m: np.ndarray) -> None:
        self.gammas[v] = np.tensordot(m, self.gammas[v], axes=(1, 0))

    def apply_two(self, u: int, v: int, m: np.ndarray) -> None:
        """Simple update of ``m`` (order ``u, v``) on tree edge ``(u, v)``."""
        if not self.topology.adjacent(u, v):
            raise TtnError(f"nodes {u}, {v} are not adjacent")
        e = _edge(u, v)
        lam = self.lambdas[e]
        qu, ru, info_u = self._reduce(u, v)
        qv, rv, info_v = self._reduce(v, u)
        theta = np.einsum("apx,x,bqx->apqb", ru, lam, rv)
        theta = np.einsum("PQpq,apqb->aPQb", m.reshape(2, 2, 2, 2), theta)
        a, _, _, b = theta.shape
        uu, s, vh = _svd(theta.reshape(a * 2, 2 * b))
        thresh = RANK_RTOL * (s[0] if s.size else 0.0)
        keep = min(self.chi, int(np.count_nonzero(s > thresh)) or 1)
        total = float(np.sum(s ** 2))
        if keep < s.size:
            lost = float(np.sum(s[keep:] ** 2))
            if total > 0 and lost > DISCARD_ATOL * total:
                self.discarded += lost / total
                self.n_truncations += 1
        uu, s, vh = uu[:, :keep], s[:keep], vh[:keep]
        s = s / np.linalg.norm(s)
        self.lambdas[e] = s
        new_ru = uu.reshape(a, 2, keep)
        new_rv = vh.reshape(keep, 2, b).transpose(2, 1, 0)
        self.gammas[u] = self._restore(u, v, qu, new_ru, info_u)
        self.gammas[v] = self._restore(v, u, qv, new_rv, info_v)

    def _reduce(self, v: int, w: int):
        # absorb environment weights, isolate (phys, bond-to-w) by QR
        g = self._scale(self.gammas[v], v, w, 1.0)
        ax = self.leg(v, w)
        env_axes = [i for i in range(1, g.ndim) if i != ax]
        perm = env_axes + [0, ax]
        gt = g.transpose(perm)
        env_shape = gt.shape[: len(env_axes)]
        env = int(np.prod(env_shape)) if env_axes else 1
        q, r = np.linalg.qr(gt.reshape(env, 2 * gt.shape[-1]))
        return q, r.reshape(-1, 2, gt.shape[-1]), (perm, env_shape)

    def _restore(self, v: int, w: int, q: np.ndarray, r: np.ndarray, info) -> np.ndarray:
        perm, env_shape = info
        a = np.tensordot(q, r, axes=(1, 0))  # env, phys, new bond
        a = a.reshape(tuple(env_shape) + (2, r.shape[-1]))
        inv = np.argsort(perm)
        g = a.transpose(inv)
        return self._scale(g, v, w, -1.0)

    def node_tensors(self) -> list[np.ndarray]:
        """Node tensors with ``sqrt(lambda)`` absorbed on every leg."""
        return [self._scale(self.gammas[v], v, None, 0.5) for v in range(self.topology.n)]

    def to_statevector(self) -> np.ndarray:
        t = self.topology
        tens = self.node_tensors()
        letters = iter(string.ascii_letters)
        phys = [next(letters) for _ in range(t.n)]
        bond = {e: next(letters) for e in t.edges}
        ops, subs = [], []
        for v in range(t.n):
            subs.append(phys[v] + "".join(bond[_edge(v, w)] for w in t.neighbors(v)))
            ops.append(tens[v])
        expr = ",".join(subs) + "->" + "".join(phys)
        psi = np.einsum(expr, *ops, optimize="greedy")
        # axis v holds node v; logical qubit q sits on node layout[q]
        psi = psi.transpose(self.layout)
        return psi.reshape(-1)


def ttn_simulate(c_routed: Circuit, chi: int, t: TreeTopology | None = None) -> TtnState:
    """Simple-update evolution of ``|0^N>`` through a tree-local circuit."""
    if chi < 1:
        raise ValueError("chi must be >= 1")
    t = t or build_tree_topology(c_routed.n_qubits)
    layout = c_routed.meta.get("final_layout", list(range(t.n)))
    st = TtnState.product(t, chi, layout)
    for g in c_routed.gates:
        m = sv.gate_matrix(g)
        sup = g.support
        if len(sup) == 1:
            st.apply_one(sup[0], m)
        elif len(sup) == 2:
            st.apply_two(sup[0], sup[1], m)
        else:
            raise CircuitError(f"{g.kind} on {len(sup)} qubits is not tree-local")
        for arr in (st.gammas[sup[0]],):
            if not np.all(np.isfinite(arr)):
                raise MpsError("non-finite tensor in simple update")
    return st


# --------------------------------------------------------------------------
# Belief propagation
# --------------------------------------------------------------------------


@dataclass
class BpMessages:
    messages: dict[tuple[int, int], np.ndarray]
    iterations: int
    residual: float


def _contract_env(t: TreeTopology, v: int, tensor: np.ndarray, msgs: dict, exclude: int | None,
                  open_phys: bool) -> np.ndarray:
    letters = iter(string.ascii_letters)
    p = next(letters)
    pb = next(letters) if open_phys else p
    nb = t.neighbors(v)
    ket = [next(letters) for _ in nb]
    bra = [next(letters) for _ in nb]
    subs = [p + "".join(ket), pb + "".join(bra)]
    ops = [tensor, tensor.conj()]
    out = p + pb if open_phys else ""
    for i, w in enumerate(nb):
        if w == exclude:
            out += ket[i] + bra[i]
            continue
        subs.append(ket[i] + bra[i])
        ops.append(msgs[(w, v)])
    return np.einsum(",".join(subs) + "->" + out, *ops, optimize="greedy")


def _normalize(m: np.ndarray) -> np.ndarray:
    tr = np.trace(m)
    if abs(tr) == 0:
        raise TtnError("zero-norm message")
    return m / tr


def belief_propagation(st: TtnState, max_iter: int = 10, tol: float = 1e-12) -> BpMessages:
    """Leaves-to-root then root-to-leaves sweeps, repeated until messages settle."""
    t = st.topology
    tens = st.node_tensors()
    msgs: dict[tuple[int, int], np.ndarray] = {}
    for a, b in t.edges:
        for u, v in ((a, b), (b, a)):
            d = st.lambdas[(a, b)].size
            msgs[(u, v)] = np.eye(d, dtype=np.complex128) / d
    residual = float("inf")
    it = 0
    while it < max_iter:
        it += 1
        old = {k: m.copy() for k, m in msgs.items()}
        for v in t.postorder():
            p = t.parent[v]
            if p >= 0:
                msgs[(v, p)] = _normalize(_contract_env(t, v, tens[v], msgs, p, False))
        for v in t.preorder():
            for c in t.children(v):
                msgs[(v, c)] = _normalize(_contract_env(t, v, tens[v], msgs, c, False))
        residual = max((float(np.max(np.abs(msgs[k] - old[k]))) for k in msgs), default=0.0)
        if residual <= tol and it >= 2:
            break
    if residual > tol and t.n > 1 and it >= max_iter:
        raise TtnError(f"BP did not converge: residual {residual:.3g}")
    return BpMessages(msgs, it, residual)


def _node_marginals(st: TtnState, bp: BpMessages) -> np.ndarray:
    t = st.topology
    tens = st.node_tensors()
    z = np.empty(t.n)
    for v in range(t.n):
        rho = _contract_env(t, v, tens[v], bp.messages, None, True)
        p0, p1 = float(np.real(rho[0, 0])), float(np.real(rho[1, 1]))
        tot = p0 + p1
        if tot <= 0:
            raise TtnError(f"zero-norm marginal at node {v}")
        z[v] = (p0 - p1) / tot
    return np.clip(z, -1.0, 1.0)


def bp_marginals(st: TtnState, bp: BpMessages | None = None) -> np.ndarray:
    """``<Z_q>`` per logical qubit."""
    bp = bp or belief_propagation(st)
    zn = _node_marginals(st, bp)
    return np.array([zn[st.layout[q]] for q in range(len(st.layout))])


@dataclass
class GreedyResult:
    guess: str
    R: float | None
    method: str
    conditional: str
    plain: str
    R_conditional: float | None = None
    R_plain: float | None = None
    order: list[int] = field(default_factory=list)


def greedy_conditional_attack(st: TtnState, true_s: str | None = None) -> GreedyResult:
    """Fix the most biased qubit to its likelier bit, re-run BP, repeat."""
    n = len(st.layout)
    plain = sign_guess(bp_marginals(st))
    work = st.copy()
    fixed: dict[int, int] = {}
    order = []
    while len(fixed) < n:
        z = bp_marginals(work)
        best = max((q for q in range(n) if q not in fixed), key=lambda q: (abs(z[q]), -q))
        bit = 0 if z[best] >= 0 else 1
        node = work.layout[best]
        proj = np.zeros((2, 2))
        proj[bit, bit] = 1.0
        g = np.tensordot(proj, work.gammas[node], axes=(1, 0))
        nrm = np.linalg.norm(g)
        if nrm == 0:
            raise TtnError(f"projection of qubit {best} onto {bit} has zero weight")
        work.gammas[node] = g / nrm
        fixed[best] = bit
        order.append(best)
    cond = "".join(str(fixed[q]) for q in range(n))
    res = GreedyResult(cond, None, "conditional", cond, plain, order=order)
    if true_s is not None:
        rc, rp = overlap_fraction(cond, true_s), overlap_fraction(plain, true_s)
        res.R_conditional, res.R_plain = rc, rp
        if rp > rc:
            res.guess, res.method, res.R = plain, "plain", rp
        else:
            res.R = rc
    return res
