"""Four-block convolutional embedder producing maps of local descriptors.

Each block is conv3x3 (pad 1, 64 filters) -> batch norm -> leaky ReLU;
a 2x2 max pool follows blocks 1 and 2 only, so an S x S input yields a
64 x S/4 x S/4 descriptor map. Descriptor i of a map is the channel
vector at spatial cell (i // W, i % W).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .nn import BatchNormState, batch_norm, conv2d, leaky_relu, max_pool2d
from .tensor import Tensor, reshape, transpose

FILTERS = 64


@dataclass
class DescriptorMap:
    """A (D, H, W) feature map viewed as M = H*W descriptors of width D."""

    data: Tensor

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def num_descriptors(self) -> int:
        return self.height * self.width

    def descriptors(self) -> Tensor:
        """(M, D) matrix, row i = channels at cell (i // W, i % W)."""
        d, h, w = self.data.shape
        return reshape(transpose(self.data, (1, 2, 0)), (h * w, d))


@dataclass
class ConvBlockParams:
    conv_w: Tensor
    conv_b: Tensor
    bn_gamma: Tensor
    bn_beta: Tensor
    bn_state: BatchNormState = field(default_factory=BatchNormState)

    def tensors(self) -> list[Tensor]:
        return [self.conv_w, self.conv_b, self.bn_gamma, self.bn_beta]


@dataclass
class EmbedderParams:
    blocks: list[ConvBlockParams]

    def tensors(self) -> list[Tensor]:
        return [t for b in self.blocks for t in b.tensors()]


def init_embedder(seed: int, in_channels: int = 3) -> EmbedderParams:
    """He-normal conv weights, zero biases, identity batch-norm affine."""
    rng = np.random.default_rng(seed)
    blocks = []
    c_in = in_channels
    for _ in range(4):
        fan_in = c_in * 9
        std = np.sqrt(2.0 / fan_in)
        blocks.append(
            ConvBlockParams(
                conv_w=Tensor(rng.normal(0.0, std, (FILTERS, c_in, 3, 3)),
                              requires_grad=True),
                conv_b=Tensor(np.zeros(FILTERS), requires_grad=True),
                bn_gamma=Tensor(np.ones(FILTERS), requires_grad=True),
                bn_beta=Tensor(np.zeros(FILTERS), requires_grad=True),
                bn_state=BatchNormState.fresh(FILTERS),
            )
        )
        c_in = FILTERS
    return EmbedderParams(blocks)


def _validate_images(shape: tuple[int, ...], in_channels: int) -> None:
    c, h, w = shape[-3], shape[-2], shape[-1]
    if c != in_channels:
        raise InputError(f"expected {in_channels} channels, got {c}")
    if h != w or h % 4 != 0:
        raise InputError(
            f"expected a square side divisible by 4, got {h}x{w}"
        )


def embed_batch(images, params: EmbedderParams, mode: str = "train") -> Tensor:
    """Embed an (N, C, S, S) batch into (N, 64, S/4, S/4) descriptor maps.

    Train mode computes batch-norm statistics over the whole batch (one
    episode is embedded as a single batch) and updates the running stats.
    """
    x = images if isinstance(images, Tensor) else Tensor(images)
    _validate_images(x.shape, params.blocks[0].conv_w.shape[1])
    for i, block in enumerate(params.blocks):
        x = conv2d(x, block.conv_w, block.conv_b)
        x = batch_norm(x, block.bn_gamma, block.bn_beta, block.bn_state, mode)
        x = leaky_relu(x)
        if i < 2:
            x = max_pool2d(x)
    return x


def embed_image(image, params: EmbedderParams, mode: str = "eval") -> DescriptorMap:
    """Embed a single (C, S, S) image into a DescriptorMap."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim != 3:
        raise InputError(f"expected a (C,S,S) image, got shape {x.shape}")
    out = embed_batch(reshape(x, (1,) + x.shape), params, mode)
    return DescriptorMap(reshape(out, out.shape[1:]))
