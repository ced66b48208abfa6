"""Multi-head self-attention with optional relative-position terms.

Scores are q_i . (k_j + a^K_{j-i}) / sqrt(d_z) and outputs are
sum_j alpha_ij (v_j + a^V_{j-i}); with no table both relative terms vanish
and the block degrades to vanilla scaled dot-product attention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .posenc import RelPositionTable, Scheme
from .tensor import Tensor, concat, dropout, softmax

MASK_FILL = -1e9  # additive surrogate for -inf on padded columns


@dataclass
class AttentionConfig:
    num_heads: int
    d_model: int
    scheme: Scheme = Scheme.NONE
    attn_dropout: float = 0.0

    def __post_init__(self):
        self.scheme = Scheme(self.scheme)
        if self.d_model % self.num_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        if self.scheme is Scheme.FRPE and self.d_z % 2 != 0:
            raise ValueError(f"FRPE requires an even per-head size, got d_z={self.d_z}")

    @property
    def d_z(self) -> int:
        return self.d_model // self.num_heads


@dataclass
class HeadWeights:
    """Projections for one attention block: packed per-head Q/K/V plus output."""
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bo: Tensor

    def parameters(self) -> dict[str, Tensor]:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv,
                "wo": self.wo, "bo": self.bo}


def init_head_weights(cfg: AttentionConfig, rng: np.random.Generator) -> HeadWeights:
    d = cfg.d_model
    def w(name):
        return Tensor(rng.normal(0.0, 0.02, (d, d)), requires_grad=True, name=name)
    return HeadWeights(wq=w("wq"), wk=w("wk"), wv=w("wv"), wo=w("wo"),
                       bo=Tensor(np.zeros(d), requires_grad=True, name="bo"))


def _mask_bias(mask: np.ndarray | None, n: int) -> np.ndarray | None:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n,):
        raise ValueError(f"mask shape {mask.shape} does not match sequence length {n}")
    bias = np.where(mask, 0.0, MASK_FILL)
    return bias[None, :]


def attention_scores(q: Tensor, k: Tensor, table: RelPositionTable | None = None,
                     mask: np.ndarray | None = None) -> Tensor:
    """Pre-softmax score matrix for projected q and k of shape (n, d_z)."""
    if q.shape != k.shape:
        raise ValueError(f"q shape {q.shape} != k shape {k.shape}")
    n, d_z = q.shape
    if table is not None and table.d_z != d_z:
        raise ValueError(f"table d_z={table.d_z} does not match q/k d_z={d_z}")
    scale = 1.0 / np.sqrt(d_z)
    scores = (q @ k.T) * scale
    if table is not None:
        a_k = table.block(n, role="K")           # (n, n, d_z)
        rel = (q.reshape(n, 1, d_z) * a_k).sum(axis=2)
        scores = scores + rel * scale
    bias = _mask_bias(mask, n)
    if bias is not None:
        scores = scores + Tensor(bias)
    return scores


def attention_output(alpha: Tensor, v: Tensor,
                     table: RelPositionTable | None = None) -> Tensor:
    """Weighted value sum z_i = sum_j alpha_ij (v_j + a^V_{j-i})."""
    n, d_z = v.shape
    if alpha.shape != (n, n):
        raise ValueError(f"alpha shape {alpha.shape} incompatible with v shape {v.shape}")
    out = alpha @ v
    if table is not None:
        if table.d_z != d_z:
            raise ValueError(f"table d_z={table.d_z} does not match v d_z={d_z}")
        a_v = table.block(n, role="V")           # (n, n, d_z)
        out = out + (alpha.reshape(n, n, 1) * a_v).sum(axis=1)
    return out


def multi_head_attention(x: Tensor, weights: HeadWeights, cfg: AttentionConfig,
                         table: RelPositionTable | None = None,
                         mask: np.ndarray | None = None,
                         rng: np.random.Generator | None = None) -> Tensor:
    """Full attention block: per-head project/score/softmax/combine, concat, W^O.

    The same relative table serves every head. ``mask`` marks valid positions.
    """
    n, d_model = x.shape
    if d_model != cfg.d_model:
        raise ValueError(f"input width {d_model} != configured d_model {cfg.d_model}")
    d_z = cfg.d_z
    heads = []
    for h in range(cfg.num_heads):
        cols = slice(h * d_z, (h + 1) * d_z)
        q = x @ weights.wq[:, cols]
        k = x @ weights.wk[:, cols]
        v = x @ weights.wv[:, cols]
        scores = attention_scores(q, k, table, mask)
        alpha = softmax(scores, axis=-1)
        if cfg.attn_dropout > 0.0 and rng is not None:
            alpha = dropout(alpha, cfg.attn_dropout, rng)
        heads.append(attention_output(alpha, v, table))
    stacked = heads[0] if len(heads) == 1 else concat(heads, axis=1)
    return stacked @ weights.wo + weights.bo
