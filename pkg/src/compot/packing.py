"""Packed sparse-code storage and exact compression-ratio accounting.

Layout of a packed k x n code matrix:

* ``mask``: column-major, ``ceil(k/8)`` bytes per column, row i of a column
  at bit ``i % 8`` (LSB first) of byte ``i // 8``; padding bits are zero.
* ``values``: float16 nonzeros, column by column, increasing row index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .factorizer import SparseCodes

F16_MAX = float(np.finfo(np.float16).max)


class CorruptPackedCodes(ValueError):
    pass


@dataclass
class PackedCodes:
    k: int
    n: int
    s: int
    values: np.ndarray  # float16, flat
    mask: np.ndarray  # uint8, flat

    @property
    def bytes_per_column(self) -> int:
        return -(-self.k // 8)

    @property
    def nbytes(self) -> int:
        return self.values.nbytes + self.mask.nbytes


def pack(codes: SparseCodes) -> PackedCodes:
    support = codes.mask & (codes.values != 0)
    if np.any(support.sum(axis=0) > codes.s):
        raise ValueError("a column has more than s nonzeros")
    vals = codes.values.T[support.T]  # column-major, increasing row within a column
    if vals.size and np.max(np.abs(vals)) > F16_MAX:
        raise OverflowError("code value exceeds float16 range")
    mask = np.packbits(support.T, axis=1, bitorder="little").reshape(-1)
    return PackedCodes(codes.k, codes.n, codes.s, vals.astype(np.float16), mask)


def unpack(p: PackedCodes) -> SparseCodes:
    bpc = p.bytes_per_column
    mask = np.asarray(p.mask, dtype=np.uint8)
    if mask.size != bpc * p.n:
        raise CorruptPackedCodes("corrupt packed codes: mask length")
    bits = np.unpackbits(mask.reshape(p.n, bpc), axis=1, bitorder="little")
    if bits[:, p.k:].any():
        raise CorruptPackedCodes("corrupt packed codes: padding bits set")
    support = bits[:, : p.k].astype(bool)
    per_col = support.sum(axis=1)
    if per_col.sum() != p.values.size:
        raise CorruptPackedCodes("corrupt packed codes: popcount/value-count mismatch")
    if np.any(per_col > p.s):
        raise CorruptPackedCodes("corrupt packed codes: column exceeds sparsity")
    valsT = np.zeros((p.n, p.k), dtype=np.float32)
    valsT[support] = np.asarray(p.values, dtype=np.float16).astype(np.float32)
    return SparseCodes(np.ascontiguousarray(valsT.T), np.ascontiguousarray(support.T), p.s)


@dataclass(frozen=True)
class StorageReport:
    m: int
    n: int
    k: int
    s: int

    @property
    def bits_dictionary(self) -> int:
        return 16 * self.m * self.k

    @property
    def bits_values(self) -> int:
        return 16 * self.s * self.n

    @property
    def bits_mask(self) -> int:
        return self.k * self.n

    @property
    def bits_mask_padded(self) -> int:
        return 8 * (-(-self.k // 8)) * self.n

    @property
    def bits_dense(self) -> int:
        return 16 * self.m * self.n

    @property
    def achieved_cr(self) -> Fraction:
        used = self.bits_dictionary + self.bits_values + self.bits_mask
        return 1 - Fraction(used, self.bits_dense)

    @property
    def achieved_cr_padded(self) -> Fraction:
        used = self.bits_dictionary + self.bits_values + self.bits_mask_padded
        return 1 - Fraction(used, self.bits_dense)

    @property
    def padded_bytes(self) -> int:
        return (self.bits_dictionary + self.bits_values + self.bits_mask_padded) // 8


def storage_report(m: int, n: int, k: int, s: int) -> StorageReport:
    if min(m, n, k, s) < 1 or not s <= k <= m:
        raise ValueError("need positive dims with s <= k <= m")
    return StorageReport(m, n, k, s)


def _balance_atoms(A: np.ndarray, S: np.ndarray, mask: np.ndarray):
    """Rescale atom j of A by 2**e and code row j by 2**-e so both sit near unit range.

    Power-of-two scales keep A @ S unchanged in exact arithmetic and bound
    float16 overflow of codes when whitened magnitudes are large.
    """
    a = np.max(np.abs(A), axis=0)
    c = np.max(np.abs(np.where(mask, S, 0.0)), axis=1)
    ok = (a > 0) & (c > 0)
    e = np.zeros(A.shape[1])
    e[ok] = np.round(0.5 * np.log2(c[ok] / a[ok]))
    scale = np.exp2(e)
    return A * scale, S / scale[:, None]


@dataclass
class FactorizedLayer:
    """Deployable factors: dewhitened dictionary A (m x k) and packed codes."""

    name: str
    A: np.ndarray  # float16 values held in float32
    codes: PackedCodes

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.codes.n

    @classmethod
    def build(cls, name: str, A: np.ndarray, codes: SparseCodes) -> "FactorizedLayer":
        A, S = _balance_atoms(np.asarray(A, dtype=np.float64), codes.values, codes.mask)
        if np.max(np.abs(A), initial=0.0) > F16_MAX:
            raise OverflowError("dictionary value exceeds float16 range")
        packed = pack(SparseCodes(S, codes.mask, codes.s))
        return cls(name, A.astype(np.float16).astype(np.float32), packed)

    def reconstruct(self) -> np.ndarray:
        S = unpack(self.codes).dense().astype(np.float32)
        return self.A @ S

    def report(self) -> StorageReport:
        return storage_report(self.m, self.n, self.codes.k, self.codes.s)

    def sidecar(self) -> dict:
        return {
            "kind": "compot",
            "m": self.m,
            "n": self.n,
            "k": self.codes.k,
            "s": self.codes.s,
            "padding": "per-column-byte",
        }

    def to_tensors(self) -> dict[str, np.ndarray]:
        return {
            f"{self.name}/A": self.A.astype(np.float16),
            f"{self.name}/S_values": self.codes.values.astype(np.float16),
            f"{self.name}/S_mask": self.codes.mask.astype(np.uint8),
        }

    @classmethod
    def from_tensors(cls, name: str, sidecar: dict | str, get) -> "FactorizedLayer":
        meta = json.loads(sidecar) if isinstance(sidecar, str) else sidecar
        A = np.asarray(get(f"{name}/A"), dtype=np.float32)
        if A.shape != (meta["m"], meta["k"]):
            raise CorruptPackedCodes(f"dictionary shape {A.shape} disagrees with sidecar")
        packed = PackedCodes(
            meta["k"],
            meta["n"],
            meta["s"],
            np.asarray(get(f"{name}/S_values"), dtype=np.float16).reshape(-1),
            np.asarray(get(f"{name}/S_mask"), dtype=np.uint8).reshape(-1),
        )
        return cls(name, A, packed)
