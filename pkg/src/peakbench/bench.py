"""Attack orchestration, overlap metrics, fits and extrapolation."""

from __future__ import annotations

import hashlib
import json
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from scipy.optimize import nnls

from . import __version__
from . import statevector as sv
from .circuit import Circuit, serialize
from .forge import PeakCertificate
from .mps import (
    TruncationPolicy, chi_break_search, chain_order, middle_mpo_attack, mps_marginals,
    mps_simulate, power_grid,
)
from .pauli import DEFAULT_CAP, default_schedule, pps_convergence_scan
from .ttn import build_tree_topology, greedy_conditional_attack, route_to_topology, ttn_simulate

ATTACKS = ("sv", "mps", "pps", "tnsbp", "mpo")
R2_MIN = 0.8


class FitError(ValueError):
    pass


@dataclass
class MarginalAttackResult:
    s_hat: str
    estimates: list[float]
    overlap: int | None
    R: float | None
    source: str


def _score(s_hat: str, true_s: str | None) -> tuple[int | None, float | None]:
    if true_s is None:
        return None, None
    if len(true_s) != len(s_hat):
        raise ValueError("true_s length mismatch")
    o = len(s_hat) - sum(a != b for a, b in zip(s_hat, true_s))
    return o, o / len(s_hat) if s_hat else 1.0


def marginal_attack(estimates: Sequence[float], true_s: str | None = None, source: str = "sv") -> MarginalAttackResult:
    """Bit i is 0 when ``<Z_i> >= 0`` (a zero estimate maps to 0)."""
    est = [float(e) for e in estimates]
    s_hat = "".join("0" if e >= 0 else "1" for e in est)
    o, r = _score(s_hat, true_s)
    return MarginalAttackResult(s_hat, est, o, r, source)


def majority_vote_attack(samples: Sequence[str], true_s: str | None = None) -> MarginalAttackResult:
    """Per-bit majority; ties go to 0. Estimates are the empirical ``<Z_i>``."""
    if not samples:
        raise ValueError("need at least one sample")
    n = len(samples[0])
    arr = np.array([[c == "1" for c in s] for s in samples], dtype=float)
    if arr.shape[1] != n:
        raise ValueError("samples have unequal length")
    z = 1.0 - 2.0 * arr.mean(axis=0)
    res = marginal_attack(z, true_s, "shots")
    return res


def read_shots(path: str) -> list[str]:
    """One bitstring per line; blank lines and ``#`` comments are skipped."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            if set(s) - {"0", "1"}:
                raise ValueError(f"{path}:{lineno}: not a bitstring")
            if out and len(s) != len(out[0]):
                raise ValueError(f"{path}:{lineno}: length {len(s)} != {len(out[0])}")
            out.append(s)
    if not out:
        raise ValueError(f"{path}: no samples")
    return out


@dataclass
class FitResult:
    model: str
    coef: dict[str, float]
    r2: float
    accepted: bool
    reason: str | None = None
    n_points: int = 0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class ExtrapolationReport:
    chi_break: float
    chi_sat: float
    exceeds_chi_sat: bool
    inputs: dict[str, Any]
    notes: list[str] = field(default_factory=list)
    t_break: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _r2(y: np.ndarray, yhat: np.ndarray, w: np.ndarray | None = None) -> float:
    w = np.ones_like(y) if w is None else w
    ybar = float(np.sum(w * y) / np.sum(w))
    ss_tot = float(np.sum(w * (y - ybar) ** 2))
    ss_res = float(np.sum(w * (y - yhat) ** 2))
    if ss_tot == 0:
        return 1.0 if ss_res == 0 else 0.0
    return 1.0 - ss_res / ss_tot


def fit_r_vs_logchi(points: Sequence[tuple[float, float]]) -> FitResult:
    """Weighted least squares of R on log2(chi) with weights log2(chi)."""
    if len(points) < 3:
        raise FitError("need at least 3 points")
    chi = np.array([p[0] for p in points], dtype=float)
    r = np.array([p[1] for p in points], dtype=float)
    if np.any(chi < 1):
        raise FitError("chi must be >= 1")
    if np.all(chi == chi[0]):
        raise FitError("degenerate input: all chi equal")
    x = np.log2(chi)
    w = x.copy()
    if np.count_nonzero(w) < 2:
        raise FitError("degenerate input: fewer than two points with nonzero weight")
    sw = np.sqrt(w)
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A * sw[:, None], r * sw, rcond=None)
    slope, intercept = float(coef[0]), float(coef[1])
    r2 = _r2(r, A @ coef, w)
    reason = None
    if slope < 0:
        reason = "negative slope"
    elif r2 < R2_MIN:
        reason = "r2 below 0.8"
    elif slope == 0:
        reason = "zero slope"
    return FitResult("linear-logchi", {"slope": slope, "intercept": intercept}, r2, reason is None, reason, len(points))


def extrapolate_chi_break(fit: FitResult, n_qubits: int, max_observed_chi: float | None = None,
                          uncracked: bool = False) -> ExtrapolationReport:
    """Where the fitted line reaches R=1, compared with ``chi_sat = 2^(N/2)``."""
    if fit.model != "linear-logchi":
        raise FitError("extrapolation needs a linear-logchi fit")
    if not fit.accepted:
        raise FitError(f"fit rejected: {fit.reason}")
    a, b = fit.coef["slope"], fit.coef["intercept"]
    chi_sat = 2.0 ** (n_qubits / 2)
    expo = (1.0 - b) / a
    chi = 2.0 ** expo if expo < 1024 else math.inf
    notes = []
    if uncracked and max_observed_chi is not None and chi < max_observed_chi:
        chi = float(max_observed_chi)
        notes.append("clamped to largest observed chi (uncracked)")
    exceeds = chi > chi_sat
    if exceeds:
        notes.append("exceeds chi_sat")
    inputs = {"slope": a, "intercept": b, "n_qubits": n_qubits, "max_observed_chi": max_observed_chi,
              "uncracked": uncracked}
    return ExtrapolationReport(chi, chi_sat, exceeds, inputs, notes)


def fit_time_cubic(points: Sequence[tuple[float, float]]) -> FitResult:
    """Nonnegative least squares for ``t = a chi^2 + b chi^3``."""
    if len(points) < 3:
        raise FitError("need at least 3 points")
    chi = np.array([p[0] for p in points], dtype=float)
    t = np.array([p[1] for p in points], dtype=float)
    if np.any(t < 0):
        raise FitError("times must be nonnegative")
    if not np.any(t > 0):
        raise FitError("all-zero times")
    A = np.stack([chi**2, chi**3], axis=1)
    scale = A.max(axis=0)
    coef, _ = nnls(A / scale, t)
    coef = coef / scale
    r2 = _r2(t, A @ coef)
    return FitResult("cubic-time", {"a": float(coef[0]), "b": float(coef[1])}, r2, r2 >= R2_MIN,
                     None if r2 >= R2_MIN else "r2 below 0.8", len(points))


def predict_time(fit: FitResult, chi: float, gate_count: int) -> float:
    a, b = fit.coef["a"], fit.coef["b"]
    return gate_count * (a * chi**2 + b * chi**3)


def timing_sweep(c: Circuit, chis: Sequence[int], reps: int = 3,
                 clock: Callable[[], float] = time.perf_counter) -> list[tuple[int, float]]:
    """Median wall time per two-qubit gate of ``mps_simulate`` at each chi."""
    sites = chain_order(c)
    rzz = max(1, c.num_two_qubit)
    out = []
    for chi in chis:
        ts = []
        for _ in range(reps):
            t0 = clock()
            mps_simulate(c, TruncationPolicy(chi), sites=sites)
            ts.append(clock() - t0)
        out.append((int(chi), statistics.median(ts) / rzz))
    return out


# ---------------------------------------------------------------- suite


@dataclass
class SuiteConfig:
    attacks: tuple[str, ...] = ATTACKS
    chi_grid: tuple[int, ...] | None = None
    max_binary_steps: int = 12
    pps_schedule: tuple[float, ...] | None = None
    pps_cap: int = DEFAULT_CAP
    pps_f_min: float = 0.1
    ttn_chis: tuple[int, ...] = (1, 2, 4, 8, 16)
    mpo_chi: int = 64
    mpo_cut: int | None = None
    dense_limit: int = sv.DENSE_LIMIT
    threads: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        bad = [a for a in self.attacks if a not in ATTACKS]
        if bad:
            raise ValueError(f"unknown attack tag {bad[0]!r}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d.pop("threads")  # cannot affect any result
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _record(tag: str, s_hat: str | None, z: Sequence[float] | None, true_s: str | None,
            details: dict[str, Any], seconds: float, exhausted: bool = False) -> dict[str, Any]:
    o, r = _score(s_hat, true_s) if s_hat is not None else (None, None)
    rec: dict[str, Any] = {"attack": tag, "s_hat": s_hat,
                           "z": None if z is None else [float(v) for v in z],
                           "budget_exhausted": exhausted, "details": details,
                           "timing": {"seconds": seconds}}
    if true_s is not None:
        rec["overlap"], rec["R"] = o, r
    return rec


def _attack_sv(c: Circuit, s: str | None, cfg: SuiteConfig) -> dict[str, Any]:
    t0 = time.perf_counter()
    if c.n_qubits > cfg.dense_limit:
        return _record("sv", None, None, s, {"reason": "dense limit"}, 0.0, True)
    z = sv.z_expectations(sv.simulate(c, max_qubits=cfg.dense_limit))
    res = marginal_attack(z, s, "sv")
    return _record("sv", res.s_hat, z, s, {}, time.perf_counter() - t0)


def _attack_mps(c: Circuit, s: str | None, cfg: SuiteConfig) -> dict[str, Any]:
    t0 = time.perf_counter()
    grid = list(cfg.chi_grid) if cfg.chi_grid else power_grid(2 ** ((c.n_qubits + 1) // 2))
    if s is None:
        m = mps_simulate(c, TruncationPolicy(grid[-1]))
        z = mps_marginals(m)
        res = marginal_attack(z, None, "mps")
        return _record("mps", res.s_hat, z, None, {"chi": grid[-1], "discarded": m.discarded},
                       time.perf_counter() - t0)
    r = chi_break_search(c, s, grid, max_binary_steps=cfg.max_binary_steps)
    pts = sorted(r.points, key=lambda p: p.chi)
    best = next((p for p in pts if p.chi == r.chi_break), pts[-1])
    details = {"chi_break": r.chi_break, "binary_steps": r.binary_steps,
               "points": [{"chi": p.chi, "R": p.R, "discarded": p.discarded} for p in pts]}
    rec = _record("mps", best.guess, None, s, details, time.perf_counter() - t0, r.chi_break is None)
    rec["timing"]["points"] = [{"chi": p.chi, "seconds": p.seconds, "seconds_per_rzz": p.seconds_per_rzz}
                               for p in pts]
    return rec


def _attack_pps(c: Circuit, s: str | None, cfg: SuiteConfig) -> dict[str, Any]:
    t0 = time.perf_counter()
    sched = list(cfg.pps_schedule) if cfg.pps_schedule else default_schedule()
    z, steps, work, incomplete = [], [], [], []
    for q in range(c.n_qubits):
        rep = pps_convergence_scan(c, q, sched, None if s is None else int(s[q]), cap=cfg.pps_cap,
                                   f_min=cfg.pps_f_min)
        ests = [e for e in rep.estimates if e is not None]
        est = rep.estimates[rep.step] if rep.step is not None else (ests[-1] if ests else 0.0)
        z.append(float(est))
        steps.append(rep.step)
        work.append(rep.work)
        incomplete.append(rep.incomplete)
    res = marginal_attack(z, s, "pps")
    cracked = [q for q in range(c.n_qubits) if steps[q] is not None]
    details = {"crack_step": steps, "work": work, "cap_hits": incomplete,
               "order": sorted(cracked, key=lambda q: (work[q], q))}
    return _record("pps", res.s_hat, z, s, details, time.perf_counter() - t0, len(cracked) < c.n_qubits)


def _attack_tnsbp(c: Circuit, s: str | None, cfg: SuiteConfig) -> dict[str, Any]:
    t0 = time.perf_counter()
    if c.n_qubits < 4:
        return _record("tnsbp", None, None, s, {"reason": "tree needs n >= 4"}, 0.0, True)
    t = build_tree_topology(c.n_qubits)
    routed = route_to_topology(c, t)
    tried = []
    res = None
    for chi in cfg.ttn_chis:
        st = ttn_simulate(routed, chi, t)
        res = greedy_conditional_attack(st, s)
        tried.append({"chi": chi, "R": res.R, "guess": res.guess})
        if s is not None and res.R == 1.0:
            break
    details = {"routing_swaps": routed.meta.get("routing_swaps", 0), "tried": tried,
               "method": res.method, "order": res.order}
    exhausted = s is not None and res.R != 1.0
    return _record("tnsbp", res.guess, None, s, details, time.perf_counter() - t0, exhausted)


def _attack_mpo(c: Circuit, s: str | None, cfg: SuiteConfig) -> dict[str, Any]:
    t0 = time.perf_counter()
    cut = cfg.mpo_cut if cfg.mpo_cut is not None else len(c) // 2
    rep = middle_mpo_attack(c, cut, cfg.mpo_chi, s=s)
    details = {"cut": cut, "peak_bond": max(rep.bond_profile, default=1), "lossy": rep.lossy,
               "discarded": rep.discarded, "complete": rep.complete}
    return _record("mpo", rep.guess, rep.z, s, details, time.perf_counter() - t0, rep.guess is None)


_RUNNERS = {"sv": _attack_sv, "mps": _attack_mps, "pps": _attack_pps, "tnsbp": _attack_tnsbp, "mpo": _attack_mpo}


def circuit_digest(c: Circuit) -> str:
    return hashlib.sha256(serialize(c)).hexdigest()


def run_attack_suite(c: Circuit, cert: PeakCertificate | None = None,
                     config: SuiteConfig | None = None) -> list[dict[str, Any]]:
    """One record per attack (sorted by tag order) plus a closing summary record."""
    cfg = config or SuiteConfig()
    s = cert.secret if cert is not None else None
    tags = [a for a in ATTACKS if a in cfg.attacks]

    def job(tag: str) -> dict[str, Any]:
        try:
            return _RUNNERS[tag](c, s, cfg)
        except MemoryError as exc:
            return _record(tag, None, None, s, {"error": type(exc).__name__}, 0.0, True)

    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        records = list(pool.map(job, tags))
    header = {"version": __version__, "circuit": circuit_digest(c), "config": cfg.digest(), "seed": cfg.seed}
    for r in records:
        r.update(header)
        r["kind"] = "attack"
    summary = {"kind": "summary", **header, "attacks": tags,
               "candidates": {r["attack"]: r["s_hat"] for r in records}}
    if s is not None:
        summary["R"] = {r["attack"]: r.get("R") for r in records}
        summary["solved_by"] = [r["attack"] for r in records if r.get("R") == 1.0]
    records.append(summary)
    return records


def strip_timing(rec: dict[str, Any]) -> dict[str, Any]:
    return {k: v for k, v in rec.items() if k != "timing"}


def dump_jsonl(records: Iterable[dict[str, Any]]) -> str:
    return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in records)


def solved(records: Sequence[dict[str, Any]]) -> bool:
    return any(r.get("R") == 1.0 for r in records if r.get("kind") == "attack")
