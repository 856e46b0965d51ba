from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from peakbench import statevector as sv
from peakbench.circuit import MCRY, MCX, RX, RZ, RZZ, SWAP, X, Circuit, CircuitError, random_brickwork
from peakbench.pauli import (
    PauliCapExceeded, PauliSum, conjugate, crack_step, default_schedule, pauli_matrix, pps_convergence_scan,
    pps_crack, pps_expectation, truncate,
)

GATES_2Q = [
    RX(0, 0.37), RX(1, -1.2), RZ(0, 2.1), RZ(1, 0.05), RZZ(0, 1, 0.83), RZZ(1, 0, -2.4),
    SWAP(0, 1), X(0), X(1), MCRY(1, 0.9, [(0, 1)]), MCRY(0, -0.4, [(1, 0)]), MCRY(0, 1.3),
    MCX(1, [(0, 1)]), MCX(0, [(1, 0)]), MCX(1),
]


@pytest.mark.parametrize("g", GATES_2Q, ids=lambda g: f"{g.kind}{g.qubits}")
def test_conjugation_rules_exhaustive(g):
    u = sv.circuit_unitary(Circuit(2, [g]))
    for x in range(4):
        for z in range(4):
            p = PauliSum.single(2, x, z)
            want = u.conj().T @ pauli_matrix(2, x, z) @ u
            got = conjugate(p, g).to_dense()
            assert np.allclose(got, want, atol=1e-12), (x, z)


def test_pauli_matrix_matches_statevector_order():
    # Z on qubit 0 must act on the leftmost bit of the string
    psi = sv.basis_state(3, "100")
    assert np.vdot(psi, pauli_matrix(3, 0, 1) @ psi).real == -1
    assert np.vdot(psi, pauli_matrix(3, 0, 2) @ psi).real == 1


def test_rzz_commutes_with_z():
    c = Circuit(3, [RZZ(0, 1, 0.7), RZZ(1, 2, -1.1)])
    for i in range(3):
        assert pps_expectation(c, i, 1e-9)[0] == 1.0


@given(st.floats(-math.pi, math.pi, allow_nan=False))
def test_rx_closed_form(theta):
    est, _ = pps_expectation(Circuit(1, [RX(0, theta)]), 0, 1e-12)
    assert abs(est - math.cos(theta)) < 1e-12


@pytest.mark.parametrize("seed", range(4))
def test_matches_oracle_at_tiny_delta(seed):
    c = random_brickwork(8, 4, seed)
    z = sv.z_expectations(sv.simulate(c))
    for i in range(8):
        est, _ = pps_expectation(c, i, 1e-9)
        assert abs(est - z[i]) < 1e-6


def test_exact_without_truncation():
    c = random_brickwork(6, 5, 9)
    z = sv.z_expectations(sv.simulate(c))
    for i in range(6):
        est, _ = pps_expectation(c, i, 1e-300)
        assert abs(est - z[i]) < 1e-10


def test_relative_keeps_at_least_standard_terms():
    c = random_brickwork(10, 6, 4)
    for delta in (1e-2, 1e-3):
        _, s_std = pps_expectation(c, 3, delta, "standard")
        _, s_rel = pps_expectation(c, 3, delta, "relative")
        assert all(r >= s for r, s in zip(s_rel.terms, s_std.terms))


def test_norm_nonincreasing():
    c = random_brickwork(8, 6, 2)
    _, st_ = pps_expectation(c, 0, 1e-3, "relative")
    assert all(b <= a + 1e-12 for a, b in zip([1.0] + st_.norms, st_.norms))


def test_truncate_rules():
    ps = PauliSum.from_terms(2, [(0, 1, 0.5), (1, 0, 0.01), (0, 2, -0.2)])
    assert len(truncate(ps, 0.1, "standard")) == 2
    assert len(truncate(ps, 0.5, "relative")) == 1
    with pytest.raises(ValueError):
        truncate(ps, 0.1, "other")


def test_from_terms_merges_and_drops_zeros():
    ps = PauliSum.from_terms(2, [(0, 1, 0.5), (0, 1, -0.5), (1, 1, 0.25), (1, 1, 0.25)])
    assert ps.terms() == [(1, 1, 0.5)]
    assert len(PauliSum.from_terms(2, [])) == 0


def test_qubit_limit():
    with pytest.raises(CircuitError):
        PauliSum.z(33, 0)


def test_cap_exceeded_carries_step():
    c = random_brickwork(8, 6, 1)
    with pytest.raises(PauliCapExceeded) as exc:
        pps_expectation(c, 0, 1e-9, cap=4)
    assert exc.value.step >= 0 and exc.value.terms > 4


def test_argument_checks():
    c = Circuit(2)
    with pytest.raises(ValueError):
        pps_expectation(c, 0, 0.0)
    with pytest.raises(ValueError):
        pps_expectation(c, 0, 1e-3, cap=0)
    with pytest.raises(ValueError):
        pps_expectation(c, 2, 1e-3)


def test_default_schedule():
    s = default_schedule()
    assert s[0] == 3.2e-3 and len(s) == 8
    assert abs(s[-1] - 2.5e-5) < 1e-15
    assert all(b == a / 2 for a, b in zip(s, s[1:]))


def test_crack_step_rule():
    assert crack_step([0.4, 0.4, 0.4, 0.4], [0.5] * 4, 0, 0.1) == 2
    assert crack_step([0.4, -0.4, 0.4, -0.4], [0.5] * 4, None, 0.1) is None
    assert crack_step([0.4, 0.4, 0.4], [0.5] * 3, 1, 0.1) is None
    assert crack_step([0.4, 0.4, 0.4, 0.4], [0.5, 0.5, 0.05, 0.5], 0, 0.1) == 3
    assert crack_step([None, 0.4, 0.4, 0.4], [None, 0.5, 0.5, 0.5], 0, 0.1) == 3


def test_scan_schedule_must_decrease():
    with pytest.raises(ValueError):
        pps_convergence_scan(Circuit(2), 0, [1e-3, 1e-3])


def test_scan_records_cap_exhaustion():
    c = random_brickwork(8, 6, 1)
    rep = pps_convergence_scan(c, 0, [1e-2, 1e-5, 1e-8], cap=64, stop_on_crack=False)
    assert rep.incomplete
    assert all(rep.estimates[j] is None for j in rep.incomplete)


def test_crack_shallow_at_largest_delta():
    c = Circuit(4, [RX(q, 0.3 if q % 2 == 0 else math.pi - 0.3) for q in range(4)])
    prof = pps_crack(c, "0101")
    assert prof.fully_solved
    assert all(r.step == 2 for r in prof.reports)


def test_crack_forged_and_reproducible(forged8):
    c, cert = forged8
    a = pps_crack(c, cert.secret)
    b = pps_crack(c, cert.secret)
    assert a.fully_solved
    assert a.order == b.order
    assert [r.work for r in a.reports] == [r.work for r in b.reports]


def test_crack_small_cap_lists_uncracked():
    c = random_brickwork(8, 10, 3)
    s = "".join("0" if v >= 0 else "1" for v in sv.z_expectations(sv.simulate(c)))
    prof = pps_crack(c, s, [1e-3, 5e-4, 2.5e-4], cap=8)
    assert not prof.fully_solved and prof.uncracked
