"""The two-branch decoder block.

Each block sees a token matrix X of shape N x D (N = grid_h * grid_w) and
returns the same shape.  The global branch chains two multi-head attention
modules whose query and key/value roles can be detached from the input via
learnable token banks; the local branch runs parallel 3x3 and 5x5
depthwise-separable convolutions on the spatial re-arrangement of X.  Both
results meet in a shared MLP with a final residual onto X.

Because the first attention stage attends from a fixed bank of T tokens (and
the second against a bank of T keys/values), every score matrix is N x T or
T x N: the dot-product work is Theta(N*T*D) rather than the Theta(N^2*D) of
ordinary self-attention.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import add, concat_last, linear, matmul, reshape
from .errors import ConfigError, DimensionError
from .ops import (
    MhaWeights,
    bilinear_resize,
    depthwise_conv2d,
    gelu,
    layer_norm,
    multi_head_attention,
    pointwise_conv,
)
from .params import trunc_normal

DECOUPLE_ORDERS = ("Q+KV", "Q+Q", "KV+KV", "KV+Q")


@dataclass(frozen=True)
class BlockConfig:
    dim: int
    n_heads: int
    n_tokens: int
    grid_h: int
    grid_w: int
    decouple_order: str = "Q+KV"
    global_enabled: bool = True
    local_enabled: bool = True

    def __post_init__(self):
        side = math.isqrt(self.n_tokens)
        if self.n_tokens < 1 or side * side != self.n_tokens:
            raise ConfigError(f"token count must be a positive perfect square, got {self.n_tokens}")
        if self.dim % self.n_heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by {self.n_heads} heads")
        if self.decouple_order not in DECOUPLE_ORDERS:
            raise ConfigError(
                f"unknown decouple order {self.decouple_order!r}; expected one of {DECOUPLE_ORDERS}")
        if not (self.global_enabled or self.local_enabled):
            raise ConfigError("at least one of the global/local branches must be enabled")

    @property
    def n_positions(self):
        return self.grid_h * self.grid_w

    @property
    def token_side(self):
        return math.isqrt(self.n_tokens)

    def with_grid(self, grid_h, grid_w):
        return replace(self, grid_h=grid_h, grid_w=grid_w)


def attention_flop_count(n_positions, n_tokens, dim, n_heads):
    """Multiply-add counts of the score + weighted-sum stages of one MHA.

    Returns ``(learnable_token_flops, standard_flops)``: attending between N
    input tokens and a T-token learnable bank costs 2*N*T*D; plain
    self-attention over the N inputs costs 2*N*N*D.  Head count does not
    change the totals (each head works on D/H columns).
    """
    del n_heads
    return (2 * n_positions * n_tokens * dim, 2 * n_positions * n_positions * dim)


def block_param_count(dim, n_tokens, global_enabled=True, local_enabled=True):
    """Closed-form learnable-scalar count of one block."""
    count = 8 * dim * dim + 5 * dim + 2 * dim          # MLP + its norm
    if global_enabled:
        count += 2 * n_tokens * dim + 10 * dim * dim + 4 * dim
    if local_enabled:
        count += 4 * dim * dim + 37 * dim
    return count


def _mha_weights(store, rng, prefix, dim):
    return MhaWeights(
        store.add(f"{prefix}.wq", trunc_normal(rng, (dim, dim))),
        store.add(f"{prefix}.wk", trunc_normal(rng, (dim, dim))),
        store.add(f"{prefix}.wv", trunc_normal(rng, (dim, dim))),
        store.add(f"{prefix}.wo", trunc_normal(rng, (dim, dim))),
    )


class OmniBlock:
    """One decoder block; parameters are registered under ``prefix``."""

    def __init__(self, cfg: BlockConfig, store, rng, prefix):
        self.cfg = cfg
        d, t = cfg.dim, cfg.n_tokens
        if cfg.global_enabled:
            self.query_tokens = store.add(f"{prefix}.query_tokens", trunc_normal(rng, (t, d)))
            self.source_tokens = store.add(f"{prefix}.source_tokens", trunc_normal(rng, (t, d)))
            self.mha1 = _mha_weights(store, rng, f"{prefix}.mha1", d)
            self.mha2 = _mha_weights(store, rng, f"{prefix}.mha2", d)
            self.source_key_proj = store.add(f"{prefix}.source_key_proj", trunc_normal(rng, (d, d)))
            self.source_value_proj = store.add(f"{prefix}.source_value_proj", trunc_normal(rng, (d, d)))
            self.norm1_gain = store.add(f"{prefix}.norm1.gain", np.ones(d))
            self.norm1_bias = store.add(f"{prefix}.norm1.bias", np.zeros(d))
            self.norm2_gain = store.add(f"{prefix}.norm2.gain", np.ones(d))
            self.norm2_bias = store.add(f"{prefix}.norm2.bias", np.zeros(d))
        if cfg.local_enabled:
            self.dw3 = store.add(f"{prefix}.dw3", trunc_normal(rng, (3, 3, d)))
            self.dw5 = store.add(f"{prefix}.dw5", trunc_normal(rng, (5, 5, d)))
            self.pw3_w = store.add(f"{prefix}.pw3.w", trunc_normal(rng, (d, d)))
            self.pw3_b = store.add(f"{prefix}.pw3.b", np.zeros(d))
            self.pw5_w = store.add(f"{prefix}.pw5.w", trunc_normal(rng, (d, d)))
            self.pw5_b = store.add(f"{prefix}.pw5.b", np.zeros(d))
            self.merge_w = store.add(f"{prefix}.merge.w", trunc_normal(rng, (2 * d, d)))
            self.merge_b = store.add(f"{prefix}.merge.b", np.zeros(d))
        self.norm3_gain = store.add(f"{prefix}.norm3.gain", np.ones(d))
        self.norm3_bias = store.add(f"{prefix}.norm3.bias", np.zeros(d))
        self.mlp_w1 = store.add(f"{prefix}.mlp.w1", trunc_normal(rng, (d, 4 * d)))
        self.mlp_b1 = store.add(f"{prefix}.mlp.b1", np.zeros(4 * d))
        self.mlp_w2 = store.add(f"{prefix}.mlp.w2", trunc_normal(rng, (4 * d, d)))
        self.mlp_b2 = store.add(f"{prefix}.mlp.b2", np.zeros(d))

    # -- global branch -------------------------------------------------

    def _upsample_tokens(self, f):
        """Lay T token outputs on a sqrt(T) grid and resize onto the block grid."""
        cfg = self.cfg
        s = cfg.token_side
        if f.data.ndim == 3:
            b = f.data.shape[0]
            grid = reshape(f, (b, s, s, cfg.dim))
            resized = bilinear_resize(grid, (cfg.grid_h, cfg.grid_w))
            return reshape(resized, (b, cfg.n_positions, cfg.dim))
        grid = reshape(f, (s, s, cfg.dim))
        resized = bilinear_resize(grid, (cfg.grid_h, cfg.grid_w))
        return reshape(resized, (cfg.n_positions, cfg.dim))

    def _source_kv(self):
        k = matmul(self.source_tokens, self.source_key_proj)
        v = matmul(self.source_tokens, self.source_value_proj)
        return k, v

    def global_branch(self, x):
        """Two chained attention stages with detached query and/or key-value roles."""
        cfg = self.cfg
        if not cfg.global_enabled:
            raise ConfigError("global branch is disabled in this block")
        self._check_tokens(x)
        h = cfg.n_heads
        xn = layer_norm(x, self.norm1_gain, self.norm1_bias)
        order = cfg.decouple_order
        if order == "Q+KV":
            f1 = multi_head_attention(self.query_tokens, xn, xn, self.mha1, h)
            y1 = add(self._upsample_tokens(f1), x)
            y1n = layer_norm(y1, self.norm2_gain, self.norm2_bias)
            k, v = self._source_kv()
            f2 = multi_head_attention(y1n, k, v, self.mha2, h)
            return add(f2, y1)
        if order == "Q+Q":
            f1 = multi_head_attention(self.query_tokens, xn, xn, self.mha1, h)
            y1 = add(self._upsample_tokens(f1), x)
            y1n = layer_norm(y1, self.norm2_gain, self.norm2_bias)
            f2 = multi_head_attention(self.source_tokens, y1n, y1n, self.mha2, h)
            return add(self._upsample_tokens(f2), y1)
        if order == "KV+KV":
            k, v = self._source_kv()
            f1 = multi_head_attention(xn, k, v, self.mha1, h)
            y1 = add(f1, x)
            y1n = layer_norm(y1, self.norm2_gain, self.norm2_bias)
            f2 = multi_head_attention(y1n, k, v, self.mha2, h)
            return add(f2, y1)
        # KV+Q: detached keys/values first, then detached queries with upsample.
        k, v = self._source_kv()
        f1 = multi_head_attention(xn, k, v, self.mha1, h)
        y1 = add(f1, x)
        y1n = layer_norm(y1, self.norm2_gain, self.norm2_bias)
        f2 = multi_head_attention(self.query_tokens, y1n, y1n, self.mha2, h)
        return add(self._upsample_tokens(f2), y1)

    # -- local branch --------------------------------------------------

    def local_branch(self, x):
        """Parallel 3x3/5x5 depthwise-separable paths merged by a 1x1 reduction."""
        cfg = self.cfg
        if not cfg.local_enabled:
            raise ConfigError("local branch is disabled in this block")
        self._check_tokens(x)
        grid_shape = (cfg.grid_h, cfg.grid_w, cfg.dim)
        token_shape = (cfg.n_positions, cfg.dim)
        if x.data.ndim == 3:
            grid_shape = (x.data.shape[0],) + grid_shape
            token_shape = (x.data.shape[0],) + token_shape
        grid = reshape(x, grid_shape)
        fine = pointwise_conv(depthwise_conv2d(grid, self.dw3), self.pw3_w, self.pw3_b)
        coarse = pointwise_conv(depthwise_conv2d(grid, self.dw5), self.pw5_w, self.pw5_b)
        merged = pointwise_conv(concat_last([fine, coarse]), self.merge_w, self.merge_b)
        return reshape(merged, token_shape)

    # -- combination ---------------------------------------------------

    def forward(self, x):
        cfg = self.cfg
        mixed = None
        if cfg.global_enabled:
            mixed = self.global_branch(x)
        if cfg.local_enabled:
            local = self.local_branch(x)
            mixed = local if mixed is None else add(mixed, local)
        z = layer_norm(mixed, self.norm3_gain, self.norm3_bias)
        hidden = gelu(linear(z, self.mlp_w1, self.mlp_b1))
        out = linear(hidden, self.mlp_w2, self.mlp_b2)
        return add(out, x)

    __call__ = forward

    def _check_tokens(self, x):
        expected = (self.cfg.n_positions, self.cfg.dim)
        if x.data.shape[-2:] != expected or x.data.ndim not in (2, 3):
            raise DimensionError(f"block input shape {x.data.shape}, expected {expected}")
