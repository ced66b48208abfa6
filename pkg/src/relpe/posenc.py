"""Positional encodings: fixed sinusoidal relative, learned relative, learned absolute.

Three schemes are supported. FRPE vectors are a pure function of the signed
offset j - i, so lookups beyond the built range recompute transparently and
the table never registers parameters. PRPE keeps two learned banks (key and
value roles) indexed by the clipped offset. PAPE is a learned per-position
table added to the input embeddings and hard-fails past its last row.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .tensor import Tensor


class Scheme(str, Enum):
    FRPE = "frpe"
    PRPE = "prpe"
    PAPE = "pape"
    NONE = "none"

    @property
    def relative(self) -> bool:
        return self in (Scheme.FRPE, Scheme.PRPE)


def frpe_vector(delta: int, d_z: int) -> np.ndarray:
    """Sinusoidal encoding of a signed offset.

    Component 2k is sin(delta / 10000^(2k/d_z)), component 2k+1 the matching
    cosine; wavelengths form a geometric progression from 2*pi to 10000*2*pi.
    """
    if d_z % 2 != 0 or d_z <= 0:
        raise ValueError(f"d_z must be a positive even integer, got {d_z}")
    k = np.arange(d_z // 2)
    angle = delta / (10000.0 ** (2.0 * k / d_z))
    out = np.empty(d_z)
    out[0::2] = np.sin(angle)
    out[1::2] = np.cos(angle)
    return out


def _frpe_block(deltas: np.ndarray, d_z: int) -> np.ndarray:
    """Vectorized frpe_vector over an array of offsets; output shape deltas.shape + (d_z,)."""
    if d_z % 2 != 0 or d_z <= 0:
        raise ValueError(f"d_z must be a positive even integer, got {d_z}")
    deltas = np.asarray(deltas, dtype=np.float64)
    k = np.arange(d_z // 2)
    angle = deltas[..., None] / (10000.0 ** (2.0 * k / d_z))
    out = np.empty(deltas.shape + (d_z,))
    out[..., 0::2] = np.sin(angle)
    out[..., 1::2] = np.cos(angle)
    return out


@dataclass
class RelPositionTable:
    """Per-offset encoding vectors for offsets in [-(max_len-1), max_len-1].

    ``fixed`` tables hold one sinusoidal bank shared by the key and value
    roles; learned tables hold separate banks clipped at ``clip`` offsets.
    """
    d_z: int
    max_len: int
    fixed: bool
    clip: int = 0
    rows: np.ndarray | None = None          # fixed bank, offset-indexed
    bank_k: Tensor | None = None            # learned key bank
    bank_v: Tensor | None = None            # learned value bank

    def parameters(self) -> dict[str, Tensor]:
        if self.fixed:
            return {}
        return {"relpos.bank_k": self.bank_k, "relpos.bank_v": self.bank_v}

    def _ensure_range(self, max_abs_offset: int):
        if max_abs_offset < self.max_len:
            return
        # Function-defined, so growing the cache is transparent.
        self.max_len = max_abs_offset + 1
        offsets = np.arange(-(self.max_len - 1), self.max_len)
        self.rows = _frpe_block(offsets, self.d_z)

    def row(self, delta: int, role: str = "K"):
        if self.fixed:
            self._ensure_range(abs(int(delta)))
            return self.rows[int(delta) + self.max_len - 1]
        idx = int(np.clip(delta, -self.clip, self.clip)) + self.clip
        bank = self.bank_k if role == "K" else self.bank_v
        return bank.data[idx]

    def block(self, n: int, role: str = "K") -> Tensor:
        """Encoding tensor A with A[i, j] = a_{j-i}, shape (n, n, d_z)."""
        pos = np.arange(n)
        deltas = pos[None, :] - pos[:, None]
        if self.fixed:
            self._ensure_range(n - 1)
            return Tensor(self.rows[deltas + self.max_len - 1])
        idx = np.clip(deltas, -self.clip, self.clip) + self.clip
        bank = self.bank_k if role == "K" else self.bank_v
        return bank.take_rows(idx)


def build_rel_table(max_len: int, d_z: int, scheme: Scheme,
                    rng_seed: int = 0, clip: int = 16) -> RelPositionTable:
    """Construct the relative-offset table for FRPE or PRPE."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    scheme = Scheme(scheme)
    if scheme not in (Scheme.FRPE, Scheme.PRPE):
        raise ValueError(f"build_rel_table only handles relative schemes, got {scheme.value}")
    if scheme is Scheme.FRPE:
        offsets = np.arange(-(max_len - 1), max_len)
        return RelPositionTable(d_z=d_z, max_len=max_len, fixed=True,
                                rows=_frpe_block(offsets, d_z))
    if clip < 1:
        raise ValueError("clip distance must be >= 1")
    rng = np.random.default_rng(rng_seed)
    shape = (2 * clip + 1, d_z)
    return RelPositionTable(
        d_z=d_z, max_len=max_len, fixed=False, clip=clip,
        bank_k=Tensor(rng.normal(0.0, 0.02, shape), requires_grad=True, name="relpos.bank_k"),
        bank_v=Tensor(rng.normal(0.0, 0.02, shape), requires_grad=True, name="relpos.bank_v"),
    )


def rel_lookup(table: RelPositionTable, i: int, j: int, role: str = "K") -> np.ndarray:
    """Encoding vector for the pair (i, j); FRPE recomputes out-of-range offsets."""
    if role not in ("K", "V"):
        raise ValueError(f"role must be 'K' or 'V', got {role!r}")
    return np.asarray(table.row(j - i, role))


@dataclass
class AbsPositionTable:
    """Learned absolute position embeddings, rows 0 .. max_position - 1."""
    table: Tensor

    @property
    def max_position(self) -> int:
        return self.table.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {"abspos.table": self.table}


def build_abs_table(max_position: int, d_model: int, rng_seed: int = 0) -> AbsPositionTable:
    if max_position < 1:
        raise ValueError("max_position must be >= 1")
    rng = np.random.default_rng(rng_seed)
    t = Tensor(rng.normal(0.0, 0.02, (max_position, d_model)),
               requires_grad=True, name="abspos.table")
    return AbsPositionTable(table=t)


def pape_lookup(table: AbsPositionTable, pos: int) -> Tensor:
    """Learned row for an absolute position; out-of-range positions are an error."""
    if not 0 <= pos < table.max_position:
        raise IndexError(
            f"position {pos} is outside the learned table (max_position={table.max_position})")
    return table.table.take_rows([pos]).reshape(table.table.shape[1])
