"""Symmetric block encryption with peaked circuits as ciphertexts.

Each n-bit plaintext block is masked with ``G_k(ctr)`` and becomes the peak
of a forged circuit whose designated input is ``F_k(ctr)``. Decryption runs
the circuit on that input (statevector stand-in for hardware), takes the
empirical mode and unmasks it. A demonstrator, not a security claim.
"""

from __future__ import annotations

import dataclasses
import hashlib
import hmac
import json
import math
import os
from collections import Counter
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from . import statevector as sv
from .circuit import RX, RZ, RZZ, SWAP, X, Circuit, Gate, circuit_from_dict, circuit_to_dict
from .forge import HqapRecipe, forge_hqap

MIN_KEY_BYTES = 16
NONCE_BYTES = 12


class CryptoError(ValueError):
    pass


class DecryptionError(CryptoError):
    def __init__(self, block: int, freq: float, delta_min: float, report: list[BlockReport]):
        super().__init__(f"block {block} rejected: mode frequency {freq:.4f} < delta_min {delta_min:.4f}")
        self.block = block
        self.report = report


@dataclass(frozen=True)
class Key:
    secret: bytes

    def __post_init__(self) -> None:
        if len(self.secret) < MIN_KEY_BYTES:
            raise CryptoError(f"key must be at least {8 * MIN_KEY_BYTES} bits")

    @classmethod
    def from_hex(cls, text: str) -> Key:
        try:
            return cls(bytes.fromhex(text.strip()))
        except ValueError:
            raise CryptoError("key file must hold a hex string") from None

    @classmethod
    def generate(cls) -> Key:
        return cls(os.urandom(32))


@dataclass(frozen=True)
class CiphertextBlock:
    desc: dict[str, Any]
    ctr: bytes

    def circuit(self) -> Circuit:
        return circuit_from_dict(self.desc)

    def to_dict(self) -> dict[str, Any]:
        return {"desc": self.desc, "ctr": self.ctr.hex()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> CiphertextBlock:
        return cls(d["desc"], bytes.fromhex(d["ctr"]))


@dataclass(frozen=True)
class DecryptionConfig:
    shots: int
    delta_min: float
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.shots < 1:
            raise CryptoError("shots must be >= 1")
        if not 0 < self.delta_min < 1:
            raise CryptoError("delta_min must lie in (0, 1)")

    @classmethod
    def for_delta(cls, delta: float, seed: int | None = None) -> DecryptionConfig:
        return cls(math.ceil(25 / delta**2), delta / 2, seed)


@dataclass(frozen=True)
class BlockReport:
    index: int
    mode: str
    freq: float
    accepted: bool
    plaintext: str


def prf(key: Key, ctr: bytes, out_bits: int, tag: str = "F") -> str:
    """HMAC-SHA256 in counter mode, domain-separated by ``tag``; MSB-first bits."""
    out = bytearray()
    i = 0
    while 8 * len(out) < out_bits:
        out += hmac.new(key.secret, tag.encode() + b"|" + ctr + i.to_bytes(4, "big"), hashlib.sha256).digest()
        i += 1
    return "".join(f"{b:08b}" for b in out)[:out_bits]


def _xor(a: str, b: str) -> str:
    return "".join("1" if x != y else "0" for x, y in zip(a, b))


def pad_bits(message: bytes, n: int) -> list[str]:
    """``1 0*`` padding to a multiple of n bits; the empty message has no blocks."""
    if not message:
        return []
    bits = "".join(f"{b:08b}" for b in message) + "1"
    bits += "0" * (-len(bits) % n)
    return [bits[i:i + n] for i in range(0, len(bits), n)]


def unpad_bits(blocks: Sequence[str]) -> bytes:
    if not blocks:
        return b""
    bits = "".join(blocks).rstrip("0")
    if not bits.endswith("1") or (len(bits) - 1) % 8:
        raise CryptoError("bad padding")
    bits = bits[:-1]
    return bytes(int(bits[i:i + 8], 2) for i in range(0, len(bits), 8))


def fold_input_layer(c: Circuit, x: str) -> Circuit:
    """Circuit E with ``E|x> = C|0>`` up to global phase and no leading X layer.

    X gates are pushed forward: RZ and RZZ flip their angle sign, SWAP moves
    the flip, a repeated X cancels and an RX absorbs it as ``theta + pi``.
    Flips that survive to the end are appended.
    """
    pending = {q for q, b in enumerate(x) if b == "1"}
    out: list[Gate] = []
    for g in c.gates:
        hit = pending.intersection(g.support)
        if not hit:
            out.append(g)
            continue
        q = g.qubits[0]
        if g.kind == "RX":
            pending.discard(q)
            out.append(RX(q, g.theta + math.pi))
        elif g.kind == "RZ":
            out.append(RZ(q, -g.theta))
        elif g.kind == "RZZ":
            out.append(g if len(hit) == 2 else RZZ(*g.qubits, -g.theta))
        elif g.kind == "SWAP":
            a, b = g.qubits
            pending = {b if p == a else a if p == b else p for p in pending}
            out.append(g)
        elif g.kind == "X":
            pending.discard(q)
        else:
            out.extend(X(p) for p in sorted(hit))
            pending -= hit
            out.append(g)
    out.extend(X(p) for p in sorted(pending))
    return Circuit(c.n_qubits, out)


def block_recipe(recipe: HqapRecipe, target: str, ctr: bytes) -> HqapRecipe:
    seed = int.from_bytes(hashlib.sha256(ctr + recipe.seed.to_bytes(8, "big", signed=True)).digest()[:8], "big")
    return dataclasses.replace(recipe, target=target, seed=seed)


def message_nonce(seed: int | None) -> bytes:
    if seed is None:
        return os.urandom(NONCE_BYTES)
    return hashlib.sha256(b"nonce|" + str(seed).encode()).digest()[:NONCE_BYTES]


def encrypt(key: Key, message: bytes, recipe: HqapRecipe, *, seed: int | None = None) -> list[CiphertextBlock]:
    """One forged circuit per n-bit block; nonces are a message nonce plus block index."""
    n = recipe.n_qubits
    base = message_nonce(seed)
    out = []
    for i, s in enumerate(pad_bits(message, n)):
        ctr = base + i.to_bytes(4, "big")
        x = prf(key, ctr, n, "F")
        y = _xor(s, prf(key, ctr, n, "G"))
        c, _ = forge_hqap(block_recipe(recipe, y, ctr))
        out.append(CiphertextBlock(circuit_to_dict(fold_input_layer(c, x)), ctr))
    if len({b.ctr for b in out}) != len(out):
        raise CryptoError("nonce repeated within message")
    return out


def decrypt_report(key: Key, blocks: Sequence[CiphertextBlock], cfg: DecryptionConfig) -> list[BlockReport]:
    if len({b.ctr for b in blocks}) != len(blocks):
        raise CryptoError("nonce repeated within message")
    rng = np.random.default_rng(cfg.seed)
    report = []
    for i, blk in enumerate(blocks):
        c = blk.circuit()
        n = c.n_qubits
        x = prf(key, blk.ctr, n, "F")
        shots = sv.sample(sv.simulate(c, x), cfg.shots, rng)
        counts = Counter(shots)
        mode = min(counts, key=lambda b: (-counts[b], b))
        freq = counts[mode] / cfg.shots
        report.append(BlockReport(i, mode, freq, freq >= cfg.delta_min, _xor(mode, prf(key, blk.ctr, n, "G"))))
    return report


def decrypt(key: Key, blocks: Sequence[CiphertextBlock], cfg: DecryptionConfig) -> tuple[bytes, list[BlockReport]]:
    report = decrypt_report(key, blocks, cfg)
    for r in report:
        if not r.accepted:
            raise DecryptionError(r.index, r.freq, cfg.delta_min, report)
    return unpad_bits([r.plaintext for r in report]), report


def dump_blocks(blocks: Sequence[CiphertextBlock]) -> str:
    return json.dumps([b.to_dict() for b in blocks], separators=(",", ":"))


def load_blocks(text: str) -> list[CiphertextBlock]:
    try:
        return [CiphertextBlock.from_dict(d) for d in json.loads(text)]
    except (KeyError, TypeError, ValueError) as exc:
        raise CryptoError(f"malformed ciphertext container: {exc}") from None
