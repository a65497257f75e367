"""Contextual augmentation of local descriptors with a transformer stack.

The descriptor map is resized to a fixed grid, cut into non-overlapping
patches, linearly projected, tagged with learned positional embeddings
and passed through pre-norm transformer blocks. The normalised token
context is projected back to descriptor width and added to the
ReLU-gated grid, so every local descriptor carries global context.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embedder import DescriptorMap
from .errors import ConfigurationError, DimensionError
from .nn import (
    AttentionParams,
    adaptive_avg_pool2d,
    gelu,
    layer_norm,
    multihead_self_attention,
    relu,
)
from .tensor import Tensor, matmul, reshape, transpose


@dataclass
class AugmentConfig:
    """Geometry of the augmentation module.

    grid: side of the pooled descriptor grid; patch: side of one token's
    tile; width: token width; depth: number of transformer blocks.
    """

    grid: int = 64
    patch: int = 16
    width: int = 128
    depth: int = 8
    heads: int = 4
    mlp_hidden: int = 0  # 0 means 2 * width
    channels: int = 64

    def __post_init__(self):
        if self.mlp_hidden == 0:
            self.mlp_hidden = 2 * self.width
        if self.grid % self.patch:
            raise ConfigurationError(
                f"grid {self.grid} is not divisible by patch {self.patch}"
            )
        if self.width % self.heads:
            raise ConfigurationError(
                f"width {self.width} is not divisible by {self.heads} heads"
            )

    @property
    def tiles_per_side(self) -> int:
        return self.grid // self.patch

    @property
    def num_patches(self) -> int:
        return self.tiles_per_side**2

    @property
    def patch_len(self) -> int:
        return self.patch * self.patch * self.channels


def full_config() -> AugmentConfig:
    """Full-scale profile: 64-grid, 16-patches, width 128, 8 blocks."""
    return AugmentConfig(grid=64, patch=16, width=128, depth=8)


def desk_config() -> AugmentConfig:
    """Small profile for fast runs: 8-grid, 4-patches, width 32, 2 blocks."""
    return AugmentConfig(grid=8, patch=4, width=32, depth=2)


@dataclass
class BlockParams:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    attn: AttentionParams
    ln2_gamma: Tensor
    ln2_beta: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    def tensors(self) -> list[Tensor]:
        return [
            self.ln1_gamma,
            self.ln1_beta,
            *self.attn.tensors(),
            self.ln2_gamma,
            self.ln2_beta,
            self.mlp_w1,
            self.mlp_b1,
            self.mlp_w2,
            self.mlp_b2,
        ]


@dataclass
class AugmentParams:
    patch_proj: Tensor  # (patch_len, width)
    pos_table: Tensor  # (num_patches, width)
    blocks: list[BlockParams]
    readout_gamma: Tensor
    readout_beta: Tensor
    ctx_proj: Tensor  # (width, channels)

    def tensors(self) -> list[Tensor]:
        out = [self.patch_proj, self.pos_table]
        for b in self.blocks:
            out.extend(b.tensors())
        out.extend([self.readout_gamma, self.readout_beta, self.ctx_proj])
        return out


def init_augment_params(cfg: AugmentConfig, seed: int) -> AugmentParams:
    """Normal(0, 0.02) projections, identity layer norms, zero biases."""
    rng = np.random.default_rng(seed)
    d = cfg.width

    def proj(*shape) -> Tensor:
        return Tensor(rng.normal(0.0, 0.02, shape), requires_grad=True)

    def ones(n) -> Tensor:
        return Tensor(np.ones(n), requires_grad=True)

    def zeros(n) -> Tensor:
        return Tensor(np.zeros(n), requires_grad=True)

    blocks = []
    for _ in range(cfg.depth):
        blocks.append(
            BlockParams(
                ln1_gamma=ones(d),
                ln1_beta=zeros(d),
                attn=AttentionParams(
                    wq=proj(d, d), wk=proj(d, d), wv=proj(d, d), wo=proj(d, d),
                    bq=zeros(d), bk=zeros(d), bv=zeros(d), bo=zeros(d),
                ),
                ln2_gamma=ones(d),
                ln2_beta=zeros(d),
                mlp_w1=proj(d, cfg.mlp_hidden),
                mlp_b1=zeros(cfg.mlp_hidden),
                mlp_w2=proj(cfg.mlp_hidden, d),
                mlp_b2=zeros(d),
            )
        )
    return AugmentParams(
        patch_proj=proj(cfg.patch_len, d),
        pos_table=proj(cfg.num_patches, d),
        blocks=blocks,
        readout_gamma=ones(d),
        readout_beta=zeros(d),
        ctx_proj=proj(d, cfg.channels),
    )


@dataclass
class AugmentedDescriptorMap(DescriptorMap):
    """Descriptor map after (optional) contextual augmentation."""

    bypassed: bool = False


# -- pipeline stages ------------------------------------------------------


def pool_to_grid(desc: DescriptorMap, grid: int) -> DescriptorMap:
    """Adaptive-average the spatial extents to grid x grid."""
    return DescriptorMap(adaptive_avg_pool2d(desc.data, grid, grid))


def patchify(x, patch: int) -> Tensor:
    """Cut a (D, G, G) map (or (B, D, G, G) batch) into flat patches.

    Tiles are taken in row-major order; inside a tile the flattening
    order is (row, col, channel), so patch vectors have length P*P*D.
    """
    x = x.data if isinstance(x, DescriptorMap) else x
    x = x if isinstance(x, Tensor) else Tensor(x)
    g = x.shape[-1]
    if g % patch:
        raise ConfigurationError(f"grid {g} is not divisible by patch {patch}")
    t = g // patch
    if x.ndim == 3:
        d = x.shape[0]
        z = reshape(x, (d, t, patch, t, patch))
        z = transpose(z, (1, 3, 2, 4, 0))  # (t, t, P, P, D)
        return reshape(z, (t * t, patch * patch * d))
    if x.ndim == 4:
        b, d = x.shape[0], x.shape[1]
        z = reshape(x, (b, d, t, patch, t, patch))
        z = transpose(z, (0, 2, 4, 3, 5, 1))
        return reshape(z, (b, t * t, patch * patch * d))
    raise DimensionError(f"patchify expects 3-d or 4-d input, got {x.shape}")


def inverse_patchify(seq: Tensor, patch: int, channels: int) -> Tensor:
    """Exact inverse of ``patchify`` for a single map."""
    n, plen = seq.shape
    if plen != patch * patch * channels:
        raise DimensionError(
            f"patch length {plen} does not match {patch}x{patch}x{channels}"
        )
    t = int(round(np.sqrt(n)))
    z = reshape(seq, (t, t, patch, patch, channels))
    z = transpose(z, (4, 0, 2, 1, 3))  # (D, t, P, t, P)
    return reshape(z, (channels, t * patch, t * patch))


def embed_sequence(patches, patch_proj: Tensor, pos_table: Tensor) -> Tensor:
    """Linear patch projection plus learned positional embedding."""
    patches = patches if isinstance(patches, Tensor) else Tensor(patches)
    if patches.shape[-1] != patch_proj.shape[0]:
        raise DimensionError(
            f"patch length {patches.shape[-1]} does not match projection "
            f"rows {patch_proj.shape[0]}"
        )
    if patches.shape[-2] != pos_table.shape[0]:
        raise DimensionError(
            f"{patches.shape[-2]} patches but positional table has "
            f"{pos_table.shape[0]} rows"
        )
    return matmul(patches, patch_proj) + pos_table


def transformer_block(z: Tensor, block: BlockParams, heads: int) -> Tensor:
    """Pre-norm residual block: MSA then GELU MLP, each with a skip."""
    attended = multihead_self_attention(
        layer_norm(z, block.ln1_gamma, block.ln1_beta), block.attn, heads
    )
    z = attended + z
    hidden = gelu(matmul(layer_norm(z, block.ln2_gamma, block.ln2_beta),
                         block.mlp_w1) + block.mlp_b1)
    return matmul(hidden, block.mlp_w2) + block.mlp_b2 + z


def contextualize(z0: Tensor, params: AugmentParams, cfg: AugmentConfig) -> Tensor:
    """Run the block stack, then layer-normalise every token."""
    z = z0
    for block in params.blocks:
        z = transformer_block(z, block, cfg.heads)
    return layer_norm(z, params.readout_gamma, params.readout_beta)


def _tile_upsample(ctx: Tensor, patch: int) -> Tensor:
    """Replicate each (..., D, t, t) cell into its patch x patch tile."""
    *lead, d, t, _ = ctx.shape
    expanded = reshape(ctx, tuple(lead) + (d, t, 1, t, 1))
    grown = expanded * np.ones((1, patch, 1, patch))
    return reshape(grown, tuple(lead) + (d, t * patch, t * patch))


def gate_and_fuse(pooled, tokens: Tensor, ctx_proj: Tensor, patch: int) -> Tensor:
    """relu(pooled) + tile-replicated back-projection of the tokens."""
    x = pooled.data if isinstance(pooled, DescriptorMap) else pooled
    ctx = matmul(tokens, ctx_proj)  # (..., N, D)
    *lead, n, d = ctx.shape
    t = int(round(np.sqrt(n)))
    grid_ctx = reshape(ctx, tuple(lead) + (t, t, d))
    if ctx.ndim == 2:
        grid_ctx = transpose(grid_ctx, (2, 0, 1))
    else:
        grid_ctx = transpose(grid_ctx, (0, 3, 1, 2))
    return relu(x) + _tile_upsample(grid_ctx, patch)


def augment(
    desc: DescriptorMap,
    params: AugmentParams,
    cfg: AugmentConfig,
    bypass: bool = False,
) -> AugmentedDescriptorMap:
    """Full augmentation of one descriptor map.

    With ``bypass`` the raw map is passed through untouched (the plain
    descriptor baseline), recorded on the returned map's flag.
    """
    if bypass:
        return AugmentedDescriptorMap(desc.data, bypassed=True)
    pooled = pool_to_grid(desc, cfg.grid)
    tokens = embed_sequence(
        patchify(pooled.data, cfg.patch), params.patch_proj, params.pos_table
    )
    context = contextualize(tokens, params, cfg)
    fused = gate_and_fuse(pooled.data, context, params.ctx_proj, cfg.patch)
    return AugmentedDescriptorMap(fused, bypassed=False)


def augment_batch(
    maps: Tensor,
    params: AugmentParams,
    cfg: AugmentConfig,
    bypass: bool = False,
) -> Tensor:
    """Augment a (B, D, H, W) batch of descriptor maps in one graph."""
    if bypass:
        return maps
    pooled = adaptive_avg_pool2d(maps, cfg.grid, cfg.grid)
    tokens = embed_sequence(
        patchify(pooled, cfg.patch), params.patch_proj, params.pos_table
    )
    context = contextualize(tokens, params, cfg)
    return gate_and_fuse(pooled, context, params.ctx_proj, cfg.patch)
