from __future__ import annotations

import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from peakbench import statevector as sv
from peakbench.circuit import (
    MCRY, MCX, RX, RZ, RZZ, SWAP, X, AdjacencyGraph, Circuit, CircuitError, CircuitFormatError, Gate,
    QubitPermutation, apply_permutation, bandwidth, build_adjacency, cancel_inverse_pairs, compose,
    invert, parse, random_brickwork, rcm_order, serialize,
)

from strategies import circuits


# ---------------------------------------------------------------- gates


def test_gate_validation():
    with pytest.raises(CircuitError):
        RZZ(0, 0, 0.1)
    with pytest.raises(CircuitError):
        Gate("RX", (0,))
    with pytest.raises(CircuitError):
        Gate("X", (0,), 0.2)
    with pytest.raises(CircuitError):
        Gate("RZZ", (0,), 0.2)
    with pytest.raises(CircuitError):
        Gate("CZ", (0, 1))
    with pytest.raises(CircuitError):
        MCX(0, [(0, 1)])
    with pytest.raises(CircuitError):
        MCRY(0, 0.1, [(1, 2)])
    with pytest.raises(CircuitError):
        Circuit(2, [RX(2, 0.1)])


def test_compose_examples():
    c = random_brickwork(3, 2, 0)
    assert compose(Circuit(3), c).gates == c.gates
    psi = sv.simulate(compose(c, invert(c)))
    assert abs(psi[0]) == pytest.approx(1.0, abs=1e-12)
    xx = compose(Circuit(1, [X(0)]), Circuit(1, [X(0)]))
    assert sv.simulate(xx)[0] == pytest.approx(1.0)
    with pytest.raises(CircuitError):
        compose(Circuit(1), Circuit(2))


def test_invert_examples():
    assert invert(Circuit(1, [RX(0, 0.3)])).gates == (RX(0, -0.3),)
    c = random_brickwork(8, 3, 1)
    assert abs(sv.simulate(compose(c, invert(c)))[0]) ** 2 == pytest.approx(1.0, abs=1e-12)


@given(circuits())
def test_invert_involution(c):
    assert invert(invert(c)).gates == c.gates


@given(circuits(), circuits(), circuits())
def test_compose_associative(a, b, c):
    if not a.n_qubits == b.n_qubits == c.n_qubits:
        return
    assert compose(compose(a, b), c).gates == compose(a, compose(b, c)).gates


# ---------------------------------------------------------------- graphs


def test_adjacency_examples():
    g = build_adjacency(Circuit(2, [RZZ(0, 1, 0.2)]))
    assert set(g.edges) == {(0, 1)}
    assert build_adjacency(Circuit(3, [RX(0, 1.0), RZ(2, 0.1)])).edges == {}
    chain = Circuit(6, [RZZ(i, i + 1, 0.1) for i in range(5)])
    assert set(build_adjacency(chain).edges) == {(i, i + 1) for i in range(5)}
    g2 = build_adjacency(Circuit(3, [RZZ(0, 1, 0.1), RZZ(1, 0, 0.3), SWAP(1, 2)]))
    assert g2.edges[(0, 1)] == 2 and g2.edges[(1, 2)] == 1


def _path(n, labels):
    return AdjacencyGraph(n, {tuple(sorted((labels[i], labels[i + 1]))): 1 for i in range(n - 1)})


def test_rcm_path_graphs():
    g = _path(6, list(range(6)))
    assert bandwidth(g, rcm_order(g)) == 1
    rng = np.random.default_rng(3)
    for _ in range(10):
        g = _path(7, list(rng.permutation(7)))
        assert bandwidth(g, rcm_order(g)) == 1


def test_rcm_star():
    g = AdjacencyGraph(5, {(0, k): 1 for k in range(1, 5)})
    assert bandwidth(g, rcm_order(g)) <= min(4, bandwidth(g))
    best = min(bandwidth(g, QubitPermutation(p)) for p in itertools.permutations(range(5)))
    assert best <= bandwidth(g, rcm_order(g))


@given(st.integers(2, 9), st.integers(0, 10_000))
def test_rcm_never_widens(n, seed):
    c = random_brickwork(n, 2, seed)
    g = build_adjacency(c)
    assert bandwidth(g, rcm_order(g)) <= bandwidth(g)


def test_rcm_deterministic():
    g = build_adjacency(random_brickwork(9, 3, 5))
    assert rcm_order(g) == rcm_order(g)


def test_permutation_algebra():
    p = QubitPermutation((2, 0, 1))
    assert p.then(p.inverse()) == QubitPermutation.identity(3)
    t = QubitPermutation.transposition(3, 0, 2)
    assert t.mapping == (2, 1, 0)
    assert p.then(t).then(p) == p.then(t.then(p))
    with pytest.raises(CircuitError):
        QubitPermutation((0, 0, 1))


def test_apply_permutation_examples():
    c = random_brickwork(4, 2, 2)
    assert apply_permutation(c, QubitPermutation.identity(4)).gates == c.gates
    assert apply_permutation(Circuit(2, [X(0)]), (1, 0)).gates == (X(1),)
    with pytest.raises(CircuitError):
        apply_permutation(c, (0, 1))


def _permute_state(psi, n, mapping):
    # output qubit mapping[q] carries the value of input qubit q
    t = psi.reshape([2] * n)
    axes = [0] * n
    for old, new in enumerate(mapping):
        axes[new] = old
    return np.transpose(t, axes).reshape(-1)


@given(st.integers(2, 6), st.integers(0, 10_000))
def test_apply_permutation_matches_relabeled_state(n, seed):
    rng = np.random.default_rng(seed)
    c = random_brickwork(n, 2, rng)
    perm = tuple(int(v) for v in rng.permutation(n))
    inv = QubitPermutation(perm).inverse().mapping
    for idx in range(1 << n):
        bits = sv.index_to_bits(idx, n)
        moved = "".join(bits[inv[q]] for q in range(n))
        lhs = sv.simulate(apply_permutation(c, perm), moved)
        rhs = _permute_state(sv.simulate(c, bits), n, perm)
        assert np.allclose(lhs, rhs, atol=1e-12)


@given(circuits(), st.data())
def test_permutation_roundtrip(c, data):
    perm = QubitPermutation(tuple(data.draw(st.permutations(range(c.n_qubits)))))
    back = apply_permutation(apply_permutation(c, perm), perm.inverse())
    assert back.gates == c.gates


# ---------------------------------------------------------------- simplifier


def test_cancel_identity_block():
    u = random_brickwork(6, 4, 7)
    out, frac = cancel_inverse_pairs(compose(u, invert(u)))
    assert frac == 0.0 and len(out) == 0


def test_cancel_no_inverses():
    c = Circuit(2, [RZZ(0, 1, 0.3), RX(0, 0.2), RZZ(0, 1, 0.4)])
    out, frac = cancel_inverse_pairs(c)
    assert frac == 1.0 and out.gates == c.gates


def test_cancel_commutes_rz_past_rzz():
    c = Circuit(2, [RZ(0, 0.4), RZZ(0, 1, 0.3), RZ(0, -0.4), RZZ(1, 0, -0.3)])
    out, frac = cancel_inverse_pairs(c)
    assert len(out) == 0 and frac == 0.0


@given(circuits(max_gates=30))
def test_cancel_preserves_unitary(c):
    out, frac = cancel_inverse_pairs(c)
    assert 0.0 <= frac <= 1.0
    u0, u1 = sv.circuit_unitary(c), sv.circuit_unitary(out)
    assert np.allclose(u0, u1, atol=1e-12)


# ---------------------------------------------------------------- serialization


def test_roundtrip_examples():
    empty = Circuit(3)
    assert parse(serialize(empty)) == empty
    big = random_brickwork(10, 30, 11)
    assert len(big) >= 1000
    back = parse(serialize(big))
    assert back.gates == big.gates
    assert all(a.theta == b.theta for a, b in zip(big.gates, back.gates) if a.theta is not None)


def test_roundtrip_controls_and_meta():
    c = Circuit(3, [MCRY(2, 0.7, [(0, 0), (1, 1)]), MCX(0, [(2, 0)]), SWAP(0, 1)], {"seed": 4})
    back = parse(serialize(c))
    assert back == c and back.meta == {"seed": 4}


@given(circuits(max_n=6, max_gates=60))
def test_roundtrip_property(c):
    assert parse(serialize(c)) == c


def test_truncated_file_reports_offset():
    data = serialize(random_brickwork(3, 1, 0))
    with pytest.raises(CircuitFormatError) as exc:
        parse(data[:40])
    assert exc.value.offset is not None and exc.value.offset <= 40
    assert "offset" in str(exc.value)


def test_schema_violations_report_path():
    doc = json.loads(serialize(Circuit(2, [RX(0, 0.1), RZZ(0, 1, 0.2)])))
    doc["gates"][1]["q"] = [0, 5]
    with pytest.raises(CircuitFormatError) as exc:
        parse(json.dumps(doc))
    assert exc.value.path is not None
    doc["gates"][1] = {"g": "RX", "q": [0]}
    with pytest.raises(CircuitFormatError) as exc:
        parse(json.dumps(doc))
    assert exc.value.path == "$.gates[1]"
    with pytest.raises(CircuitFormatError):
        parse(json.dumps({"version": 2, "n_qubits": 1, "gates": []}))
    with pytest.raises(CircuitFormatError):
        parse(b"\xff\xfe")


def test_file_format_shape():
    doc = json.loads(serialize(Circuit(2, [RZZ(0, 1, math.pi), MCRY(1, 0.5, [(0, 0)])])))
    assert doc["version"] == 1 and doc["n_qubits"] == 2
    assert doc["gates"][0] == {"g": "RZZ", "q": [0, 1], "theta": math.pi}
    assert doc["gates"][1]["ctrl"] == [[0, 0]]
