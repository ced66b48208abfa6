"""Transformer encoder with MLM and NSP pretraining heads.

Post-layer-norm residual blocks, GeLU feed-forward, tied MLM decoder, and a
tanh pooler feeding the NSP classifier. Position information enters either
through the attention-level relative table (FRPE / PRPE) or through learned
absolute embeddings added to the inputs (PAPE).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionConfig, HeadWeights, init_head_weights, multi_head_attention
from .posenc import (AbsPositionTable, RelPositionTable, Scheme, build_abs_table,
                     build_rel_table)
from .tensor import Tensor, dropout, gelu, layer_norm, log_softmax


@dataclass
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    num_layers: int = 2
    num_heads: int = 2
    ffn_size: int | None = None
    max_seq_len: int = 128
    scheme: Scheme = Scheme.FRPE
    prpe_clip: int = 16
    type_vocab_size: int = 2
    hidden_dropout: float = 0.0
    attn_dropout: float = 0.0
    ln_eps: float = 1e-12
    # FRPE/PRPE runs carry no absolute input embeddings unless forced on.
    add_absolute_input_embeddings: bool = False

    def __post_init__(self):
        self.scheme = Scheme(self.scheme)
        if self.ffn_size is None:
            self.ffn_size = 4 * self.d_model
        if self.d_model % self.num_heads != 0:
            raise ValueError("d_model must be divisible by num_heads")
        if self.scheme is Scheme.FRPE and (self.d_model // self.num_heads) % 2 != 0:
            raise ValueError("FRPE requires an even per-head hidden size")
        if self.prpe_clip < 1:
            raise ValueError("prpe_clip must be >= 1")

    @property
    def d_z(self) -> int:
        return self.d_model // self.num_heads

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(num_heads=self.num_heads, d_model=self.d_model,
                               scheme=self.scheme, attn_dropout=self.attn_dropout)


@dataclass
class LayerParameters:
    attn: HeadWeights
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor


@dataclass
class ForwardOutput:
    states: Tensor            # (n, d_model)
    pooled: Tensor            # (1, d_model)
    mlm_logits: Tensor        # (num_predictions, vocab)
    nsp_logits: Tensor        # (1, 2)
    predict_positions: np.ndarray


class EncoderModel:
    """Parameter container plus forward passes for the pretraining model.

    Every learnable tensor is registered exactly once under a unique name;
    fixed FRPE tables are deliberately absent from :meth:`parameters`.
    """

    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, ffn = cfg.d_model, cfg.ffn_size

        def normal(name, shape):
            return Tensor(rng.normal(0.0, 0.02, shape), requires_grad=True, name=name)

        def zeros(name, shape):
            return Tensor(np.zeros(shape), requires_grad=True, name=name)

        def ones(name, shape):
            return Tensor(np.ones(shape), requires_grad=True, name=name)

        self.token_embedding = normal("embed.token", (cfg.vocab_size, d))
        self.segment_embedding = normal("embed.segment", (cfg.type_vocab_size, d))
        self.embed_ln_gamma = ones("embed.ln.gamma", d)
        self.embed_ln_beta = zeros("embed.ln.beta", d)

        self.abs_table: AbsPositionTable | None = None
        if cfg.scheme is Scheme.PAPE or cfg.add_absolute_input_embeddings:
            self.abs_table = build_abs_table(cfg.max_seq_len, d,
                                             rng_seed=int(rng.integers(2**31)))

        self.rel_table: RelPositionTable | None = None
        if cfg.scheme is Scheme.FRPE:
            self.rel_table = build_rel_table(cfg.max_seq_len, cfg.d_z, Scheme.FRPE)
        elif cfg.scheme is Scheme.PRPE:
            self.rel_table = build_rel_table(cfg.max_seq_len, cfg.d_z, Scheme.PRPE,
                                             rng_seed=int(rng.integers(2**31)),
                                             clip=cfg.prpe_clip)

        attn_cfg = self.cfg.attention_config()
        self.layers: list[LayerParameters] = []
        for i in range(cfg.num_layers):
            self.layers.append(LayerParameters(
                attn=init_head_weights(attn_cfg, rng),
                ln1_gamma=ones(f"layer{i}.ln1.gamma", d),
                ln1_beta=zeros(f"layer{i}.ln1.beta", d),
                ffn_w1=normal(f"layer{i}.ffn.w1", (d, ffn)),
                ffn_b1=zeros(f"layer{i}.ffn.b1", ffn),
                ffn_w2=normal(f"layer{i}.ffn.w2", (ffn, d)),
                ffn_b2=zeros(f"layer{i}.ffn.b2", d),
                ln2_gamma=ones(f"layer{i}.ln2.gamma", d),
                ln2_beta=zeros(f"layer{i}.ln2.beta", d),
            ))

        # MLM head; the decoder reuses the token embedding (weight tying).
        self.mlm_dense_w = normal("mlm.dense.w", (d, d))
        self.mlm_dense_b = zeros("mlm.dense.b", d)
        self.mlm_ln_gamma = ones("mlm.ln.gamma", d)
        self.mlm_ln_beta = zeros("mlm.ln.beta", d)
        self.mlm_output_bias = zeros("mlm.output_bias", cfg.vocab_size)

        self.pooler_w = normal("pooler.w", (d, d))
        self.pooler_b = zeros("pooler.b", d)
        self.nsp_w = normal("nsp.w", (d, 2))
        self.nsp_b = zeros("nsp.b", 2)

    # -- parameter registry ----------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {
            "embed.token": self.token_embedding,
            "embed.segment": self.segment_embedding,
            "embed.ln.gamma": self.embed_ln_gamma,
            "embed.ln.beta": self.embed_ln_beta,
        }
        if self.abs_table is not None:
            params.update(self.abs_table.parameters())
        if self.rel_table is not None:
            params.update(self.rel_table.parameters())
        for i, layer in enumerate(self.layers):
            for key, t in layer.attn.parameters().items():
                params[f"layer{i}.attn.{key}"] = t
            params[f"layer{i}.ln1.gamma"] = layer.ln1_gamma
            params[f"layer{i}.ln1.beta"] = layer.ln1_beta
            params[f"layer{i}.ffn.w1"] = layer.ffn_w1
            params[f"layer{i}.ffn.b1"] = layer.ffn_b1
            params[f"layer{i}.ffn.w2"] = layer.ffn_w2
            params[f"layer{i}.ffn.b2"] = layer.ffn_b2
            params[f"layer{i}.ln2.gamma"] = layer.ln2_gamma
            params[f"layer{i}.ln2.beta"] = layer.ln2_beta
        params.update({
            "mlm.dense.w": self.mlm_dense_w,
            "mlm.dense.b": self.mlm_dense_b,
            "mlm.ln.gamma": self.mlm_ln_gamma,
            "mlm.ln.beta": self.mlm_ln_beta,
            "mlm.output_bias": self.mlm_output_bias,
            "pooler.w": self.pooler_w,
            "pooler.b": self.pooler_b,
            "nsp.w": self.nsp_w,
            "nsp.b": self.nsp_b,
        })
        return params

    # -- forward passes ---------------------------------------------------

    def embed_inputs(self, token_ids, segment_ids,
                     rng: np.random.Generator | None = None) -> Tensor:
        token_ids = np.asarray(token_ids, dtype=np.intp)
        segment_ids = np.asarray(segment_ids, dtype=np.intp)
        if token_ids.shape != segment_ids.shape:
            raise ValueError("token_ids and segment_ids must have equal length")
        bad = np.nonzero((token_ids < 0) | (token_ids >= self.cfg.vocab_size))[0]
        if bad.size:
            raise IndexError(f"token id out of range at position {bad[0]}: "
                             f"{token_ids[bad[0]]} (vocab {self.cfg.vocab_size})")
        bad = np.nonzero((segment_ids < 0) | (segment_ids >= self.cfg.type_vocab_size))[0]
        if bad.size:
            raise IndexError(f"segment id out of range at position {bad[0]}")
        n = token_ids.shape[0]
        x = self.token_embedding.take_rows(token_ids) \
            + self.segment_embedding.take_rows(segment_ids)
        if self.cfg.scheme is Scheme.PAPE or self.cfg.add_absolute_input_embeddings:
            if n > self.abs_table.max_position:
                raise IndexError(
                    f"sequence length {n} exceeds learned absolute position table "
                    f"(max_position={self.abs_table.max_position})")
            x = x + self.abs_table.table.take_rows(np.arange(n))
        x = layer_norm(x, self.embed_ln_gamma, self.embed_ln_beta, self.cfg.ln_eps)
        if rng is not None:
            x = dropout(x, self.cfg.hidden_dropout, rng)
        return x

    def layer_forward(self, x: Tensor, layer: LayerParameters,
                      mask: np.ndarray | None = None,
                      rng: np.random.Generator | None = None) -> Tensor:
        cfg = self.cfg
        attn = multi_head_attention(x, layer.attn, cfg.attention_config(),
                                    table=self.rel_table, mask=mask, rng=rng)
        if rng is not None:
            attn = dropout(attn, cfg.hidden_dropout, rng)
        y = layer_norm(x + attn, layer.ln1_gamma, layer.ln1_beta, cfg.ln_eps)
        h = gelu(y @ layer.ffn_w1 + layer.ffn_b1) @ layer.ffn_w2 + layer.ffn_b2
        if rng is not None:
            h = dropout(h, cfg.hidden_dropout, rng)
        return layer_norm(y + h, layer.ln2_gamma, layer.ln2_beta, cfg.ln_eps)

    def encode(self, token_ids, segment_ids, mask=None,
               rng: np.random.Generator | None = None) -> Tensor:
        x = self.embed_inputs(token_ids, segment_ids, rng=rng)
        for layer in self.layers:
            x = self.layer_forward(x, layer, mask=mask, rng=rng)
        return x

    def pretrain_forward(self, example, mask=None,
                         rng: np.random.Generator | None = None) -> ForwardOutput:
        positions = np.asarray(example.predict_positions, dtype=np.intp)
        n = len(example.tokens)
        if positions.size and (positions.min() < 0 or positions.max() >= n):
            raise IndexError(f"prediction position out of range for length-{n} sequence")
        states = self.encode(example.tokens, example.segments, mask=mask, rng=rng)

        pooled = ((states.take_rows([0]) @ self.pooler_w) + self.pooler_b).tanh()
        nsp_logits = pooled @ self.nsp_w + self.nsp_b

        if positions.size:
            h = states.take_rows(positions)
            h = gelu(h @ self.mlm_dense_w + self.mlm_dense_b)
            h = layer_norm(h, self.mlm_ln_gamma, self.mlm_ln_beta, self.cfg.ln_eps)
            mlm_logits = h @ self.token_embedding.T + self.mlm_output_bias
        else:
            mlm_logits = Tensor(np.zeros((0, self.cfg.vocab_size)))
        return ForwardOutput(states=states, pooled=pooled, mlm_logits=mlm_logits,
                             nsp_logits=nsp_logits, predict_positions=positions)


def pretrain_loss(output: ForwardOutput, example) -> tuple[Tensor, dict]:
    """Joint loss: mean MLM cross-entropy plus NSP cross-entropy.

    Returns the scalar loss tensor and a metrics bundle with the parts and
    MLM top-1 accuracy.
    """
    labels = np.asarray(example.predict_labels, dtype=np.intp)
    if labels.shape[0] != output.predict_positions.shape[0]:
        raise ValueError("label count does not match prediction position count")
    num_pred = labels.shape[0]
    if num_pred:
        lp = log_softmax(output.mlm_logits, axis=-1)
        picked = lp[np.arange(num_pred), labels]
        mlm_loss = -(picked.sum() / float(num_pred))
        mlm_acc = float(np.mean(output.mlm_logits.data.argmax(axis=-1) == labels))
    else:
        mlm_loss = Tensor(0.0)
        mlm_acc = float("nan")
    nsp_lp = log_softmax(output.nsp_logits, axis=-1)
    nsp_loss = -nsp_lp[0, int(example.nsp_label)]
    total = mlm_loss + nsp_loss
    metrics = {
        "loss": float(total.data),
        "mlm_loss": float(mlm_loss.data),
        "nsp_loss": float(nsp_loss.data),
        "mlm_accuracy": mlm_acc,
        "num_predictions": num_pred,
        "nsp_correct": float(output.nsp_logits.data.argmax() == int(example.nsp_label)),
    }
    return total, metrics
