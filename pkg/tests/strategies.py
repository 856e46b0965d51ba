from __future__ import annotations

import math

from hypothesis import strategies as st

from peakbench.circuit import RX, RZ, RZZ, SWAP, X, Circuit

angles = st.floats(-2 * math.pi, 2 * math.pi, allow_nan=False)


@st.composite
def gates(draw, n: int):
    kind = draw(st.sampled_from(["RX", "RZ", "X"] + (["RZZ", "SWAP"] if n > 1 else [])))
    q = draw(st.integers(0, n - 1))
    if kind in ("RZZ", "SWAP"):
        r = draw(st.integers(0, n - 2))
        r = r + 1 if r >= q else r
        return RZZ(q, r, draw(angles)) if kind == "RZZ" else SWAP(q, r)
    if kind == "X":
        return X(q)
    return (RX if kind == "RX" else RZ)(q, draw(angles))


@st.composite
def circuits(draw, min_n: int = 1, max_n: int = 5, max_gates: int = 25):
    n = draw(st.integers(min_n, max_n))
    gs = draw(st.lists(gates(n), max_size=max_gates))
    return Circuit(n, gs)
