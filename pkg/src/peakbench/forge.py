"""Forging obfuscated peaked circuits.

Pipeline: train a shallow peaked circuit ``R ▷ P``, insert ``U ▷ U†`` between
the two halves, then scramble the ``R ▷ U`` prefix with angle sweeps, patch
masks and swap transformations. The secret peak and its measured weight are
returned as a :class:`PeakCertificate` kept apart from the circuit.
"""

from __future__ import annotations

import bisect
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from . import statevector as sv
from .circuit import (
    RX,
    RZ,
    RZZ,
    SWAP,
    Circuit,
    Gate,
    QubitPermutation,
    brickwork_layer,
    compose,
    invert,
    random_brickwork,
)

log = logging.getLogger(__name__)

RECIPE_VERSION = 1


class ForgeError(RuntimeError):
    pass


class TrainingError(ForgeError):
    def __init__(self, message: str, best_delta: float):
        super().__init__(f"{message} (best delta {best_delta:.4g})")
        self.best_delta = best_delta


class PatchOptimizationError(ForgeError):
    def __init__(self, message: str, final_loss: float):
        super().__init__(f"{message} (final loss {final_loss:.3g})")
        self.final_loss = final_loss


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    max_iter: int = 2000
    restarts: int = 3
    delta_min: float = 0.0


@dataclass(frozen=True)
class PatchConfig:
    eps_patch: float = 1e-4
    lr: float = 0.5
    max_iter: int = 2000
    restarts: int = 3
    kick_attempts: int = 4
    mask_layers: int = 3


@dataclass(frozen=True)
class HqapRecipe:
    n_qubits: int
    target: str = "random"
    r_layers: int = 2
    p_layers: int = 2
    u_layers: int = 2
    u_rzz: int | None = None
    patch_qubits: int = 4
    patch_width: int = 14
    sweep_rounds: int = 5
    kick: float = 0.3
    mask_count: int = 0
    swap_count: int = 0
    eps_patch: float = 1e-4
    lr: float = 0.1
    max_iter: int = 2000
    restarts: int = 3
    delta_target: float = 0.1
    mirror_peaking: bool = False
    scramble_tail: bool = False
    require_aligned: bool = True
    max_attempts: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.r_layers, self.p_layers, self.u_layers) < 0:
            raise ValueError("depths must be >= 0")
        if not 2 <= self.patch_qubits <= 6:
            raise ValueError("patch size k must lie in [2, 6]")
        if not 0 < self.eps_patch <= 0.1:
            raise ValueError("eps_patch must lie in (0, 0.1]")
        if self.kick <= 0:
            raise ValueError("kick must be > 0")
        if self.target != "random" and (
            len(self.target) != self.n_qubits or set(self.target) - {"0", "1"}
        ):
            raise ValueError("target must be 'random' or an n-bit string")
        if min(self.mask_count, self.swap_count, self.sweep_rounds) < 0:
            raise ValueError("counts must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["version"] = RECIPE_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> HqapRecipe:
        d = dict(d)
        version = d.pop("version", RECIPE_VERSION)
        if version != RECIPE_VERSION:
            raise ValueError(f"unsupported recipe version {version}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown recipe fields {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, max_iter=self.max_iter, restarts=self.restarts,
                           delta_min=self.delta_target)

    def patch_config(self) -> PatchConfig:
        return PatchConfig(eps_patch=self.eps_patch)


@dataclass
class PeakCertificate:
    secret: str
    delta: float
    recipe_hash: str
    history: dict[str, float] = field(default_factory=dict)
    aligned: bool = True
    attempt: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.delta <= 1 + 1e-12:
            raise ValueError(f"delta {self.delta} outside (0, 1]")

    def to_dict(self) -> dict[str, Any]:
        return {"version": RECIPE_VERSION, **dataclasses.asdict(self)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> PeakCertificate:
        d = {k: v for k, v in d.items() if k != "version"}
        return cls(**d)


@dataclass(frozen=True)
class PatchWindow:
    """Gate range ``[start, stop)`` plus a qubit subset.

    The patch is made of the in-range gates supported on ``qubits``. No
    in-range gate may straddle the subset, so the other in-range gates
    commute past the patch.
    """

    start: int
    stop: int
    qubits: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.stop < self.start:
            raise ValueError("window stop precedes start")


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------


def descend(
    fun_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: np.ndarray,
    *,
    lr: float,
    max_iter: int,
    stop: Callable[[float], bool],
) -> tuple[np.ndarray, float]:
    """Gradient descent; the step grows on improvement and halves otherwise."""
    x = np.array(x0, dtype=float)
    f, g = fun_grad(x)
    for _ in range(max_iter):
        if stop(f):
            break
        x_new = x - lr * g
        f_new, g_new = fun_grad(x_new)
        if f_new < f:
            x, f, g = x_new, f_new, g_new
            lr *= 1.2
        else:
            lr *= 0.5
            if lr < 1e-12:
                break
    return x, f


# --------------------------------------------------------------------------
# Training the shallow peaked circuit
# --------------------------------------------------------------------------


def peaking_structure(n: int, p_layers: int, rng: np.random.Generator) -> Circuit:
    """Brickwork followed by a closing RX layer that can flip output bits."""
    gates: list[Gate] = []
    for _ in range(p_layers):
        gates += brickwork_layer(n, rng) if n >= 2 else [RX(0, 0.0), RZ(0, 0.0)]
    gates += [RX(q, 0.0) for q in range(n)]
    c = Circuit(n, gates)
    return c.with_angles(rng.uniform(-math.pi, math.pi, c.angles().size))


def mirror_structure(r: Circuit, rng: np.random.Generator) -> Circuit:
    """Gate structure of ``R†`` plus a closing RX layer."""
    base = invert(r)
    gates = list(base.gates) + [RX(q, 0.0) for q in range(r.n_qubits)]
    c = Circuit(r.n_qubits, gates)
    return c.with_angles(rng.uniform(-math.pi, math.pi, c.angles().size))


def train_shallow_peaked(
    n: int,
    r_layers: int,
    p_layers: int,
    s: str,
    config: TrainConfig = TrainConfig(),
    rng: np.random.Generator | int | None = None,
    *,
    mirror: bool = False,
    r_circuit: Circuit | None = None,
) -> tuple[Circuit, Circuit, float]:
    """Train the peaking layer ``P`` so that ``R ▷ P`` peaks on ``s``.

    Training stops once the peak weight reaches ``config.delta_min`` (when
    positive) and otherwise runs to ``max_iter``. Raises
    :class:`TrainingError` if every restart ends below ``delta_min``.
    """
    rng = np.random.default_rng(rng)
    if p_layers < 1 and not mirror:
        raise ValueError("p_layers must be >= 1")
    if len(s) != n:
        raise ValueError("target length mismatch")
    sv._check_limit(n, None)
    r = r_circuit if r_circuit is not None else random_brickwork(n, r_layers, rng)
    phi = sv.simulate(r)
    bra = sv.basis_state(n, s)
    target = config.delta_min if config.delta_min > 0 else 1.0 - 1e-9
    best_p, best_delta = None, -1.0

    for _ in range(max(1, config.restarts)):
        p = mirror_structure(r, rng) if mirror else peaking_structure(n, p_layers, rng)

        def fun_grad(theta: np.ndarray, p=p) -> tuple[float, np.ndarray]:
            amp, damp = sv.overlap_and_gradient(p.with_angles(theta), phi, bra)
            w = abs(amp) ** 2
            dw = 2.0 * np.real(np.conj(amp) * damp)
            w = max(w, 1e-300)
            return -math.log(w), -dw / w

        theta, f = descend(fun_grad, p.angles(), lr=config.lr, max_iter=config.max_iter,
                           stop=lambda f: math.exp(-f) >= target)
        delta = math.exp(-f)
        if delta > best_delta:
            best_p, best_delta = p.with_angles(theta), delta
        if delta >= target:
            break
    if config.delta_min > 0 and best_delta < config.delta_min:
        raise TrainingError("training stagnated below delta_min", best_delta)
    return r, best_p, best_delta


def insert_identity(
    r: Circuit, p: Circuit, u_layers: int, rng: np.random.Generator | int | None = None,
    *, u_rzz: int | None = None,
) -> Circuit:
    """Return ``R ▷ U ▷ U† ▷ P`` with segment boundaries recorded in ``meta``."""
    rng = np.random.default_rng(rng)
    n = r.n_qubits
    if u_rzz is not None:
        u = random_brickwork(n, 0, rng, n_rzz=u_rzz)
    else:
        u = random_brickwork(n, u_layers, rng)
    a = len(r)
    b = a + len(u)
    c = b + len(u)
    out = compose(compose(compose(r, u), invert(u)), p)
    meta = dict(r.meta)
    meta["segments"] = {"R": [0, a], "U": [a, b], "Udag": [b, c], "P": [c, len(out)]}
    return Circuit(n, out.gates, meta)


# --------------------------------------------------------------------------
# Tensor patch optimization
# --------------------------------------------------------------------------


def window_indices(c: Circuit, w: PatchWindow) -> list[int]:
    """Indices of the in-range gates supported on the window's qubits."""
    qs = set(w.qubits)
    out = []
    for i in range(w.start, w.stop):
        sup = set(c.gates[i].support)
        if sup <= qs:
            out.append(i)
        elif sup & qs:
            raise ValueError(f"gate {i} straddles window qubits {w.qubits}")
    return out


def _collect(c: Circuit, pos: int, stop: int, qs: set[int], width: int) -> tuple[int, int]:
    # longest range from pos with no straddling gate and at most width gates inside qs
    inside = 0
    i = pos
    while i < stop:
        sup = set(c.gates[i].support)
        if sup <= qs:
            if inside == width:
                break
            inside += 1
        elif sup & qs:
            break
        i += 1
    return i, inside


def patch_windows(
    c: Circuit, start: int, stop: int, width: int, k: int, stride: int | None = None,
) -> list[PatchWindow]:
    """Windows of up to ``width`` gates on at most ``k`` qubits, one per stride step.

    Each window is seeded by the first coupling gate at or after its start
    and grows its qubit subset through straddling gates while the subset
    stays within ``k`` qubits. Gates on other qubits inside the range
    commute past the patch, so windows span several brickwork layers.
    """
    stride = max(1, stride if stride is not None else width // 2)
    out: list[PatchWindow] = []
    for pos in range(start, stop, stride):
        seed = next((i for i in range(pos, stop) if c.gates[i].is_two_qubit), pos)
        qs = set(c.gates[seed].support)
        if len(qs) > k:
            continue
        end, inside = _collect(c, pos, stop, qs, width)
        while end < stop and inside < width:
            grown = qs | set(c.gates[end].support)
            if len(grown) > k:
                break
            e2, i2 = _collect(c, pos, stop, grown, width)
            if i2 <= inside:
                break
            qs, end, inside = grown, e2, i2
        w = PatchWindow(pos, end, tuple(sorted(qs)))
        if any(c.gates[i].theta is not None for i in window_indices(c, w)):
            out.append(w)
    return out


def _local_map(qubits: Sequence[int]) -> dict[int, int]:
    return {q: i for i, q in enumerate(qubits)}


def _local_circuit(gates: Sequence[Gate], qubits: Sequence[int]) -> Circuit:
    local = _local_map(qubits)
    m = [0] * (max(qubits, default=0) + 1)
    for q, i in local.items():
        m[q] = i
    return Circuit(len(qubits), [g.relabel(m) for g in gates])


def _replace_patch(c: Circuit, idx: Sequence[int], new_gates: Sequence[Gate], at: int) -> Circuit:
    drop = set(idx)
    out: list[Gate] = []
    for i, g in enumerate(c.gates):
        if i == at:
            out.extend(new_gates)
        if i not in drop:
            out.append(g)
    if at >= len(c.gates):
        out.extend(new_gates)
    return Circuit(c.n_qubits, out, dict(c.meta))


def _trace_loss_grad(local: Circuit, target: np.ndarray) -> Callable[[np.ndarray], tuple[float, np.ndarray]]:
    d = target.shape[0]
    eye = np.eye(d, dtype=np.complex128)

    def fun_grad(theta: np.ndarray) -> tuple[float, np.ndarray]:
        t, dt = sv.overlap_and_gradient(local.with_angles(theta), eye, target)
        mag = abs(t)
        if mag < 1e-300:
            return 1.0, np.zeros_like(theta)
        loss = 1.0 - mag / d
        grad = -np.real(np.conj(t) / mag * dt) / d
        return loss, grad

    return fun_grad


def _train_patch(local: Circuit, target: np.ndarray, x0: np.ndarray, cfg: PatchConfig) -> tuple[np.ndarray, float]:
    fg = _trace_loss_grad(local, target)
    return descend(fg, x0, lr=cfg.lr, max_iter=cfg.max_iter, stop=lambda f: f <= cfg.eps_patch)


def sweep_patch(
    c: Circuit, w: PatchWindow, kick: float, config: PatchConfig = PatchConfig(),
    rng: np.random.Generator | int | None = None,
) -> Circuit:
    """Kick the window's angles by uniform ``±kick`` and retrain them.

    The gate structure is unchanged. Kicks are redrawn until some angle ends
    more than ``kick/10`` from where it started; after ``kick_attempts``
    draws the most displaced solution within tolerance is kept.
    """
    rng = np.random.default_rng(rng)
    idx = window_indices(c, w)
    local = _local_circuit([c.gates[i] for i in idx], w.qubits)
    theta0 = local.angles()
    if kick == 0 or theta0.size == 0:
        return c
    target = sv.circuit_unitary(local)
    best: tuple[float, np.ndarray] | None = None
    last_loss = 1.0
    for _ in range(config.kick_attempts * max(1, config.restarts)):
        x0 = theta0 + rng.uniform(-kick, kick, theta0.size)
        theta, loss = _train_patch(local, target, x0, config)
        last_loss = loss
        if loss > config.eps_patch:
            continue
        moved = float(np.max(np.abs(theta - theta0)))
        if best is None or moved > best[0]:
            best = (moved, theta)
        if moved > kick / 10:
            break
    if best is None:
        raise PatchOptimizationError(f"sweep of window {w.start}:{w.stop} did not converge", last_loss)
    if best[0] <= kick / 10:
        log.debug("window %d:%d drifted only %.3g", w.start, w.stop, best[0])
    gates = list(c.gates)
    it = iter(best[1])
    for i in idx:
        if gates[i].theta is not None:
            gates[i] = gates[i].with_theta(float(next(it)))
    return Circuit(c.n_qubits, gates, dict(c.meta))


def mask_structure(qubits: Sequence[int], layers: int, rng: np.random.Generator) -> list[Gate]:
    """Euler rotations on every qubit interleaved with RZZ on random pairs."""
    qubits = list(qubits)
    gates: list[Gate] = []

    def euler(q: int) -> list[Gate]:
        if rng.random() < 0.5:
            return [RZ(q, 0.0), RX(q, 0.0), RZ(q, 0.0)]
        return [RX(q, 0.0), RZ(q, 0.0), RX(q, 0.0)]

    for _ in range(layers):
        for q in rng.permutation(qubits):
            gates += euler(int(q))
        if len(qubits) >= 2:
            a, b = rng.choice(qubits, size=2, replace=False)
            gates.append(RZZ(int(a), int(b), 0.0))
    for q in rng.permutation(qubits):
        gates += euler(int(q))
    return gates


def _signature(gates: Sequence[Gate]) -> tuple:
    return tuple((g.kind, g.support) for g in gates)


def mask_patch(
    c: Circuit, w: PatchWindow, rng: np.random.Generator | int | None = None,
    config: PatchConfig = PatchConfig(),
) -> Circuit:
    """Replace the window's patch by a freshly sampled structure trained to match it.

    The replacement sits where the first patch gate was.
    """
    rng = np.random.default_rng(rng)
    idx = window_indices(c, w)
    local = _local_circuit([c.gates[i] for i in idx], w.qubits)
    target = sv.circuit_unitary(local)
    n_par = local.angles().size
    k = len(w.qubits)
    last_loss = 1.0
    for _ in range(max(1, config.restarts)):
        layers = config.mask_layers
        while True:
            struct = mask_structure(range(k), layers, rng)
            cand = Circuit(k, struct)
            if cand.angles().size >= n_par and _signature(struct) != _signature(local.gates):
                break
            layers += 1
        x0 = rng.uniform(-math.pi, math.pi, cand.angles().size)
        theta, loss = _train_patch(cand, target, x0, config)
        last_loss = loss
        if loss <= config.eps_patch:
            new_gates = [g.relabel(w.qubits) for g in cand.with_angles(theta).gates]
            return _replace_patch(c, idx, new_gates, idx[0] if idx else w.start)
    raise PatchOptimizationError(f"mask of window {w.start}:{w.stop} did not converge", last_loss)


def mask_windows(
    c: Circuit, windows: Sequence[PatchWindow], rng: np.random.Generator | int | None = None,
    config: PatchConfig = PatchConfig(),
) -> Circuit:
    """Mask several windows with disjoint patches, tracking index shifts."""
    rng = np.random.default_rng(rng)
    pending = [(window_indices(c, w), w.qubits) for w in windows]
    for k in range(len(pending)):
        idx, qubits = pending[k]
        if not idx:
            continue
        before = len(c)
        c = mask_patch(c, PatchWindow(idx[0], idx[-1] + 1, qubits), rng, config)
        m = len(c) - before + len(idx)
        drop = sorted(idx)
        at = drop[0]
        for j in range(k + 1, len(pending)):
            other, q = pending[j]
            pending[j] = ([v - bisect.bisect_left(drop, v) + (m if v > at else 0) for v in other], q)
    return c


def pair_windows(c: Circuit, start: int, stop: int) -> list[PatchWindow]:
    """Two-qubit windows around each RZZ, with pairwise disjoint patches.

    The range around an RZZ on ``(a, b)`` extends both ways up to the
    nearest gates straddling ``{a, b}``.
    """
    out: list[PatchWindow] = []
    used: set[int] = set()
    for i in range(start, stop):
        if c.gates[i].kind != "RZZ" or i in used:
            continue
        pair = set(c.gates[i].support)
        lo = i
        while lo > start:
            sup = set(c.gates[lo - 1].support)
            if sup & pair and not sup <= pair:
                break
            lo -= 1
        hi, _ = _collect(c, i, stop, pair, stop)
        w = PatchWindow(lo, hi, tuple(sorted(pair)))
        idx = set(window_indices(c, w))
        if idx & used:
            continue
        used |= idx
        out.append(w)
    return out


def apply_swap_transformations(
    c: Circuit, count: int, rng: np.random.Generator | int | None = None,
    region: tuple[int, int] | None = None,
) -> Circuit:
    """Conjugate random segments by transpositions, then drop leading SWAPs.

    A segment ``[a, b)`` becomes ``SWAP(i,j) ▷ segment relabeled ▷ SWAP(i,j)``,
    which leaves the unitary unchanged. SWAPs preceded by nothing that
    touches their wires act on ``|0...0>`` and are removed.
    """
    rng = np.random.default_rng(rng)
    n = c.n_qubits
    if count <= 0 or n < 2:
        return c
    lo, hi = region if region is not None else (0, len(c))
    gates = list(c.gates)
    for _ in range(count):
        i, j = (int(v) for v in rng.choice(n, size=2, replace=False))
        a, b = sorted(int(v) for v in rng.integers(lo, hi + 1, size=2))
        tau = QubitPermutation.transposition(n, i, j).mapping
        seg = [g.relabel(tau) for g in gates[a:b]]
        gates = gates[:a] + [SWAP(i, j)] + seg + [SWAP(i, j)] + gates[b:]
        hi += 2
    touched: set[int] = set()
    kept: list[Gate] = []
    for g in gates:
        if g.kind == "SWAP" and not (set(g.qubits) & touched):
            continue
        touched.update(g.support)
        kept.append(g)
    return Circuit(n, kept, dict(c.meta))


# --------------------------------------------------------------------------
# Diagnostics
# --------------------------------------------------------------------------


def _wrap(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x) + math.pi) % (2 * math.pi) - math.pi


@dataclass
class DriftStats:
    drifts: np.ndarray
    mean: float
    max: float
    histogram: tuple[np.ndarray, np.ndarray]
    mirror_correlation: float


def mirror_correlation(c: Circuit, segment: tuple[int, int] | None = None) -> float:
    """Pearson correlation of first-half angles with the negated, reversed second half."""
    gates = c.gates if segment is None else c.gates[segment[0]:segment[1]]
    ang = np.array([g.theta for g in gates if g.theta is not None])
    m = ang.size // 2
    if m < 2:
        return float("nan")
    first = _wrap(ang[:m])
    second = _wrap(-ang[ang.size - m:][::-1])
    if first.std() == 0 or second.std() == 0:
        return float("nan")
    return float(np.corrcoef(first, second)[0, 1])


def angle_drift_stats(original: Circuit, transformed: Circuit, segment: tuple[int, int] | None = None,
                      bins: int = 12) -> DriftStats:
    if _signature(original.gates) != _signature(transformed.gates):
        raise ValueError("gate structures differ; drift is only defined after sweeps")
    drifts = np.abs(_wrap(transformed.angles() - original.angles()))
    hist = np.histogram(drifts, bins=bins, range=(0.0, math.pi))
    return DriftStats(
        drifts=drifts,
        mean=float(drifts.mean()) if drifts.size else 0.0,
        max=float(drifts.max()) if drifts.size else 0.0,
        histogram=hist,
        mirror_correlation=mirror_correlation(transformed, segment),
    )


def sweep_region(
    c: Circuit, start: int, stop: int, rounds: int, kick: float, *, k: int = 4, width: int = 14,
    config: PatchConfig = PatchConfig(), rng: np.random.Generator | int | None = None,
) -> Circuit:
    """Sweep every window of ``[start, stop)`` for ``rounds`` rounds, in index order."""
    rng = np.random.default_rng(rng)
    for _ in range(rounds):
        for w in patch_windows(c, start, stop, width, k):
            c = sweep_patch(c, w, kick, config, rng)
    return c


# --------------------------------------------------------------------------
# Full pipeline
# --------------------------------------------------------------------------


def marginals_aligned(psi: np.ndarray, s: str) -> bool:
    z = sv.z_expectations(psi)
    guess = "".join("0" if v >= 0 else "1" for v in z)
    return guess == s


def _forge_once(
    recipe: HqapRecipe, seeds: list[np.random.SeedSequence], s: str,
) -> tuple[Circuit, dict[str, float], dict[str, Any]]:
    n = recipe.n_qubits
    rng_train, rng_u, rng_sweep, rng_mask, rng_swap = (np.random.default_rng(q) for q in seeds)
    history: dict[str, float] = {}
    r, p, delta = train_shallow_peaked(
        n, recipe.r_layers, recipe.p_layers, s, recipe.train_config(), rng_train,
        mirror=recipe.mirror_peaking,
    )
    history["trained"] = delta
    c = insert_identity(r, p, recipe.u_layers, rng_u, u_rzz=recipe.u_rzz)
    seg = c.meta["segments"]
    hi = seg["P"][1] if recipe.scramble_tail else seg["U"][1]
    tail_len = len(c) - hi
    pcfg = recipe.patch_config()
    stages: dict[str, Any] = {"inserted": c, "patches": 0}

    if recipe.sweep_rounds > 0:
        # sweeps keep the gate structure, so every round sees the same windows
        stages["patches"] += recipe.sweep_rounds * len(
            patch_windows(c, 0, hi, recipe.patch_width, recipe.patch_qubits))
        c = sweep_region(c, 0, hi, recipe.sweep_rounds, recipe.kick, k=recipe.patch_qubits,
                         width=recipe.patch_width, config=pcfg, rng=rng_sweep)
        history["swept"] = sv.peak_weight(c, s)

    if recipe.mask_count > 0:
        cands = pair_windows(c, 0, hi)
        take = min(recipe.mask_count, len(cands))
        chosen = sorted(rng_mask.choice(len(cands), size=take, replace=False)) if take else []
        c = mask_windows(c, [cands[int(i)] for i in chosen], rng_mask, pcfg)
        stages["patches"] += take
        hi = len(c) - tail_len
        history["masked"] = sv.peak_weight(c, s)

    stages["unswapped"] = Circuit(n, c.gates)
    if recipe.swap_count > 0:
        c = Circuit(n, apply_swap_transformations(Circuit(n, c.gates), recipe.swap_count, rng_swap,
                                                  region=(0, hi)).gates, c.meta)
        hi = len(c) - tail_len
        history["swapped"] = sv.peak_weight(c, s)

    segments = dict(seg)
    if recipe.scramble_tail:
        segments = {"scrambled": [0, hi]}
    else:
        segments = {"scrambled": [0, hi], "Udag": [hi, hi + seg["Udag"][1] - seg["Udag"][0]],
                    "P": [len(c) - (seg["P"][1] - seg["P"][0]), len(c)]}
    meta = {"recipe_hash": recipe.digest(), "seed": recipe.seed, "segments": segments}
    return Circuit(n, c.gates, meta), history, stages


def forge_hqap(recipe: HqapRecipe) -> tuple[Circuit, PeakCertificate]:
    """Run the full pipeline; retries with fresh coins when checks fail.

    A forge attempt is rejected when the oracle peak weight falls below
    ``delta_target - 0.05`` or, with ``require_aligned``, when the single-qubit
    marginals do not point at the secret.
    """
    c, cert, _ = forge_hqap_stages(recipe)
    return c, cert


def forge_hqap_stages(recipe: HqapRecipe) -> tuple[Circuit, PeakCertificate, dict[str, Any]]:
    """:func:`forge_hqap` plus the accepted attempt's intermediate circuits.

    ``stages`` holds ``inserted`` (R ▷ U ▷ U† ▷ P before any patch work),
    ``unswapped`` (after sweeps and masks) and ``patches`` (number of patch
    optimizations).
    """
    n = recipe.n_qubits
    sv._check_limit(n, None)
    root = np.random.SeedSequence(recipe.seed)
    target_rng = np.random.default_rng(root.spawn(1)[0])
    if recipe.target == "random":
        s = "".join(str(int(b)) for b in target_rng.integers(0, 2, n))
    else:
        s = recipe.target
    attempts = root.spawn(recipe.max_attempts + 1)[1:]
    last: Exception | None = None
    best = None
    for k, seq in enumerate(attempts):
        try:
            c, history, stages = _forge_once(recipe, seq.spawn(5), s)
        except ForgeError as exc:
            last = exc
            continue
        psi = sv.simulate(c)
        delta = float(abs(psi[sv.bits_to_index(s)]) ** 2)
        aligned = marginals_aligned(psi, s)
        history["final"] = delta
        cert = PeakCertificate(s, delta, recipe.digest(), history, aligned, k)
        ok = delta >= recipe.delta_target - 0.05 and (aligned or not recipe.require_aligned)
        if ok:
            return c, cert, stages
        if best is None or delta > best[1].delta:
            best = (c, cert, stages)
    if best is not None and not recipe.require_aligned:
        return best
    raise ForgeError(f"no acceptable forge in {recipe.max_attempts} attempts: {last or 'checks failed'}")
