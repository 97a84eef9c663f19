"""Multi-head self-attention with background masking, and transformer blocks.

The masking rule: a token whose tissue fraction is exactly 0.0 may not be
attended *to* by anyone. Its key column is replaced with -inf in the
attention logits before the softmax, which turns into an exact 0.0 weight
afterwards. The class token (sequence position 0) is never masked, and
masked tokens still emit queries; their outputs are simply never read.

Replacement, not addition: because `masked_fill` substitutes the logit,
the values that were there never influence the result, which is what
makes class-token outputs bit-exactly invariant to background features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import (
    Parameter,
    ShapeError,
    Tensor,
    broadcast_to,
    concat,
    gelu,
    layer_norm,
    masked_fill,
    matmul,
    softmax_lastdim,
)

LN_EPS = 1e-6
INIT_STD = 0.02  # class/positional tokens


def linear_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Fan-in-scaled normal init; keeps activation variance level across layers."""
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out))


class AllBackgroundError(ValueError):
    """Every patch of some region has zero tissue; there is nothing to attend to."""


class LayerIndexError(IndexError):
    """Requested block index is outside the stack."""


def validate_tissue(pct: np.ndarray) -> np.ndarray:
    """Check a (regions, tokens) tissue-fraction array and return it as float64.

    Entries must lie in [0, 1] and every row needs at least one positive
    entry; a row of pure background raises AllBackgroundError.
    """
    pct = np.asarray(pct, dtype=np.float64)
    if pct.ndim != 2:
        raise ShapeError(f"tissue fractions must be 2-d (regions, tokens), got {pct.shape}")
    if pct.size and (pct.min() < 0.0 or pct.max() > 1.0):
        raise ValueError("tissue fractions must lie in [0, 1]")
    rows_all_zero = ~(pct > 0.0).any(axis=1)
    if rows_all_zero.any():
        idx = int(np.nonzero(rows_all_zero)[0][0])
        raise AllBackgroundError(f"region {idx} has no tissue in any patch")
    return pct


@dataclass
class MhsaParams:
    """Projection weights for one multi-head self-attention layer.

    qkv maps dim -> 3*dim (queries, keys, values stacked on the last
    axis); out maps dim -> dim. `scale` is 1/sqrt(head dim) by
    construction.
    """

    qkv_weight: Parameter  # (dim, 3*dim)
    qkv_bias: Parameter  # (3*dim,)
    out_weight: Parameter  # (dim, dim)
    out_bias: Parameter  # (dim,)
    num_heads: int

    def __post_init__(self):
        dim = self.qkv_weight.shape[0]
        if self.qkv_weight.shape != (dim, 3 * dim):
            raise ShapeError(f"qkv_weight must be (dim, 3*dim), got {self.qkv_weight.shape}")
        if self.qkv_bias.shape != (3 * dim,):
            raise ShapeError(f"qkv_bias must be (3*dim,), got {self.qkv_bias.shape}")
        if self.out_weight.shape != (dim, dim):
            raise ShapeError(f"out_weight must be (dim, dim), got {self.out_weight.shape}")
        if self.out_bias.shape != (dim,):
            raise ShapeError(f"out_bias must be (dim,), got {self.out_bias.shape}")
        if self.num_heads < 1 or dim % self.num_heads != 0:
            raise ShapeError(f"num_heads={self.num_heads} must divide dim={dim}")

    @property
    def dim(self) -> int:
        return self.qkv_weight.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim)

    @classmethod
    def create(
        cls, dim: int, num_heads: int, rng: np.random.Generator, prefix: str
    ) -> "MhsaParams":
        return cls(
            qkv_weight=Parameter(f"{prefix}.qkv_weight", linear_init(rng, dim, 3 * dim)),
            qkv_bias=Parameter(f"{prefix}.qkv_bias", np.zeros(3 * dim)),
            out_weight=Parameter(f"{prefix}.out_weight", linear_init(rng, dim, dim)),
            out_bias=Parameter(f"{prefix}.out_bias", np.zeros(dim)),
            num_heads=num_heads,
        )

    def parameters(self) -> list[Parameter]:
        return [self.qkv_weight, self.qkv_bias, self.out_weight, self.out_bias]


def _key_mask(pct: np.ndarray, seq_len: int) -> np.ndarray:
    """Boolean (regions, 1, 1, seq_len): True where a key column is forbidden.

    Column 0 is the class token and is never masked. Column j+1 is masked
    iff pct[:, j] == 0.0 exactly; any positive fraction keeps the patch.
    """
    mask = np.zeros((pct.shape[0], 1, 1, seq_len), dtype=bool)
    mask[:, 0, 0, 1:] = pct == 0.0
    return mask


def _attention_core(
    x: Tensor, pct: np.ndarray | None, params: MhsaParams
) -> tuple[Tensor, Tensor]:
    """Shared forward: returns (attended output, attention weights).

    x: (regions, seq, dim) where seq counts the class token at index 0.
    pct: (regions, seq - 1) tissue fractions, or None for no masking.
    """
    if x.ndim != 3:
        raise ShapeError(f"attention input must be (regions, seq, dim), got {x.shape}")
    m, seq, dim = x.shape
    if dim != params.dim:
        raise ShapeError(f"input dim {dim} does not match params dim {params.dim}")
    if pct is not None:
        pct = validate_tissue(pct)
        if pct.shape != (m, seq - 1):
            raise ShapeError(
                f"tissue fractions {pct.shape} do not match sequence {(m, seq - 1)}"
            )

    h, hd = params.num_heads, params.head_dim
    qkv = matmul(x, params.qkv_weight) + params.qkv_bias  # (m, seq, 3*dim)
    qkv = qkv.reshape((m, seq, 3, h, hd)).transpose((2, 0, 3, 1, 4))  # (3, m, h, seq, hd)
    q, k, v = qkv[0], qkv[1], qkv[2]

    logits = matmul(q, k.transpose((0, 1, 3, 2))) * params.scale  # (m, h, seq, seq)
    if pct is not None:
        logits = masked_fill(logits, _key_mask(pct, seq), -math.inf)
    attn = softmax_lastdim(logits)

    ctx = matmul(attn, v).transpose((0, 2, 1, 3)).reshape((m, seq, dim))
    out = matmul(ctx, params.out_weight) + params.out_bias
    return out, attn


def masked_mhsa(x: Tensor, pct: np.ndarray, params: MhsaParams) -> Tensor:
    """Self-attention where zero-tissue key columns receive exactly zero weight."""
    out, _ = _attention_core(x, pct, params)
    return out


def plain_mhsa(x: Tensor, params: MhsaParams) -> Tensor:
    """Unmasked self-attention; identical to the masked path when no fraction is 0."""
    out, _ = _attention_core(x, None, params)
    return out


@dataclass
class TransformerBlockParams:
    """Pre-norm transformer block: x + attn(LN(x)), then x + mlp(LN(x))."""

    norm1_gamma: Parameter
    norm1_beta: Parameter
    attn: MhsaParams
    norm2_gamma: Parameter
    norm2_beta: Parameter
    mlp_w1: Parameter  # (dim, hidden)
    mlp_b1: Parameter  # (hidden,)
    mlp_w2: Parameter  # (hidden, dim)
    mlp_b2: Parameter  # (dim,)

    @classmethod
    def create(
        cls,
        dim: int,
        num_heads: int,
        mlp_ratio: float,
        rng: np.random.Generator,
        prefix: str,
    ) -> "TransformerBlockParams":
        hidden = int(round(dim * mlp_ratio))
        if hidden < 1:
            raise ShapeError(f"mlp_ratio {mlp_ratio} gives an empty hidden layer")
        return cls(
            norm1_gamma=Parameter(f"{prefix}.norm1.gamma", np.ones(dim)),
            norm1_beta=Parameter(f"{prefix}.norm1.beta", np.zeros(dim)),
            attn=MhsaParams.create(dim, num_heads, rng, f"{prefix}.attn"),
            norm2_gamma=Parameter(f"{prefix}.norm2.gamma", np.ones(dim)),
            norm2_beta=Parameter(f"{prefix}.norm2.beta", np.zeros(dim)),
            mlp_w1=Parameter(f"{prefix}.mlp.w1", linear_init(rng, dim, hidden)),
            mlp_b1=Parameter(f"{prefix}.mlp.b1", np.zeros(hidden)),
            mlp_w2=Parameter(f"{prefix}.mlp.w2", linear_init(rng, hidden, dim)),
            mlp_b2=Parameter(f"{prefix}.mlp.b2", np.zeros(dim)),
        )

    def parameters(self) -> list[Parameter]:
        return [
            self.norm1_gamma,
            self.norm1_beta,
            *self.attn.parameters(),
            self.norm2_gamma,
            self.norm2_beta,
            self.mlp_w1,
            self.mlp_b1,
            self.mlp_w2,
            self.mlp_b2,
        ]


def transformer_block(
    x: Tensor, pct: np.ndarray | None, params: TransformerBlockParams
) -> Tensor:
    """One pre-norm block; `pct=None` disables masking."""
    normed = layer_norm(x, params.norm1_gamma, params.norm1_beta, LN_EPS)
    attended, _ = _attention_core(normed, pct, params.attn)
    x = x + attended
    normed = layer_norm(x, params.norm2_gamma, params.norm2_beta, LN_EPS)
    hidden = gelu(matmul(normed, params.mlp_w1) + params.mlp_b1)
    return x + (matmul(hidden, params.mlp_w2) + params.mlp_b2)


def attention_weights(
    x: Tensor,
    pct: np.ndarray | None,
    blocks: Sequence[TransformerBlockParams],
    layer_index: int = -1,
) -> Tensor:
    """Post-softmax attention of one block, (regions, heads, seq, seq).

    Runs the stack up to `layer_index` (negative indices count from the
    end) and returns that block's attention map computed on its actual
    input. Rows sum to 1; masked key columns are exactly 0.
    """
    n = len(blocks)
    if n == 0:
        raise LayerIndexError("empty block stack")
    if not -n <= layer_index < n:
        raise LayerIndexError(f"layer_index {layer_index} out of range for {n} blocks")
    layer_index %= n
    for block in blocks[:layer_index]:
        x = transformer_block(x, pct, block)
    target = blocks[layer_index]
    normed = layer_norm(x, target.norm1_gamma, target.norm1_beta, LN_EPS)
    _, attn = _attention_core(normed, pct, target.attn)
    return attn


def prepend_class_token(x: Tensor, cls: Parameter) -> Tensor:
    """Concatenate a learned class token at sequence position 0.

    x: (batch, seq, dim); cls: (1, 1, dim), broadcast across the batch.
    """
    m = x.shape[0]
    cls_row = broadcast_to(cls, (m, 1, cls.shape[-1]))
    return concat([cls_row, x], axis=1)
