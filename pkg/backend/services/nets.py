"""Segmentation encoder-decoder and the surrogate network that mimics DP.

Both are the same padded U-Net-style stack: per level two 3x3 convs, 2x2 max-pool
down, nearest 2x upsample + 3x3 conv up, skip concatenation, a 1x1 head.
"""

import math
from typing import Dict

import numpy as np

from backend.services import autodiff as ad
from backend.services.autodiff import Tensor

APPROX_DEPTH = 3


def _conv_count(c_in: int, c_out: int, k: int) -> int:
    return c_out * (c_in * k * k + 1)


def encoder_decoder_param_count(depth: int, base_channels: int, in_channels: int = 1) -> int:
    """Closed-form parameter count of the stack."""
    c = [base_channels * 2 ** d for d in range(depth + 1)]
    total = 0
    for d in range(depth):
        c_in = in_channels if d == 0 else c[d - 1]
        total += _conv_count(c_in, c[d], 3) + _conv_count(c[d], c[d], 3)
    total += _conv_count(c[depth - 1], c[depth], 3) + _conv_count(c[depth], c[depth], 3)
    for d in range(depth):
        total += _conv_count(c[d + 1], c[d], 3) + _conv_count(2 * c[d], c[d], 3) + _conv_count(c[d], c[d], 3)
    total += _conv_count(c[0], 1, 1)
    return total


def _conv_param(rng: np.random.Generator, name: str, c_in: int, c_out: int, k: int) -> Dict[str, Tensor]:
    bound = math.sqrt(6.0 / (c_in * k * k))
    return {
        f"{name}.w": ad.parameter(rng.uniform(-bound, bound, size=(c_out, c_in, k, k)), name=f"{name}.w"),
        f"{name}.b": ad.parameter(np.zeros(c_out), name=f"{name}.b"),
    }


def init_encoder_decoder(
    rng: np.random.Generator, depth: int, base_channels: int, in_channels: int = 1
) -> Dict[str, Tensor]:
    c = [base_channels * 2 ** d for d in range(depth + 1)]
    params: Dict[str, Tensor] = {}
    for d in range(depth):
        c_in = in_channels if d == 0 else c[d - 1]
        params.update(_conv_param(rng, f"enc{d}.conv1", c_in, c[d], 3))
        params.update(_conv_param(rng, f"enc{d}.conv2", c[d], c[d], 3))
    params.update(_conv_param(rng, "mid.conv1", c[depth - 1], c[depth], 3))
    params.update(_conv_param(rng, "mid.conv2", c[depth], c[depth], 3))
    for d in reversed(range(depth)):
        params.update(_conv_param(rng, f"dec{d}.up", c[d + 1], c[d], 3))
        params.update(_conv_param(rng, f"dec{d}.conv1", 2 * c[d], c[d], 3))
        params.update(_conv_param(rng, f"dec{d}.conv2", c[d], c[d], 3))
    params.update(_conv_param(rng, "head", c[0], 1, 1))
    return params


def encoder_decoder_forward(params: Dict[str, Tensor], x: Tensor, depth: int) -> Tensor:
    def conv(name, t, pad=1):
        return ad.conv2d(t, params[f"{name}.w"], params[f"{name}.b"], pad=pad)

    skips = []
    h = x
    for d in range(depth):
        h = ad.relu(conv(f"enc{d}.conv1", h))
        h = ad.relu(conv(f"enc{d}.conv2", h))
        skips.append(h)
        h = ad.maxpool2x2(h)
    h = ad.relu(conv("mid.conv1", h))
    h = ad.relu(conv("mid.conv2", h))
    for d in reversed(range(depth)):
        h = ad.relu(conv(f"dec{d}.up", ad.upsample2x_nearest(h)))
        h = ad.concat_channels(skips[d], h)
        h = ad.relu(conv(f"dec{d}.conv1", h))
        h = ad.relu(conv(f"dec{d}.conv2", h))
    return conv("head", h, pad=0)


class SegNetParams:
    """Segmentation network parameters (depth D, base channels C0)"""

    def __init__(self, tensors: Dict[str, Tensor], depth: int, base_channels: int):
        self.tensors = tensors
        self.depth = depth
        self.base_channels = base_channels

    @classmethod
    def init(cls, rng: np.random.Generator, depth: int = 2, base_channels: int = 8) -> "SegNetParams":
        return cls(init_encoder_decoder(rng, depth, base_channels), depth, base_channels)

    def count(self) -> int:
        return sum(t.values.size for t in self.tensors.values())


class ApproxNetParams:
    """Surrogate network parameters: a 3-level stack over the N x M warped grid"""

    def __init__(self, tensors: Dict[str, Tensor], base_channels: int):
        self.tensors = tensors
        self.base_channels = base_channels
        self.depth = APPROX_DEPTH

    @classmethod
    def init(cls, rng: np.random.Generator, base_channels: int = 8) -> "ApproxNetParams":
        return cls(init_encoder_decoder(rng, APPROX_DEPTH, base_channels), base_channels)

    def count(self) -> int:
        return sum(t.values.size for t in self.tensors.values())


def seg_forward(params: SegNetParams, image: Tensor) -> Tensor:
    """Output map [B,1,H,W] with no final nonlinearity."""
    factor = 2 ** params.depth
    if image.values.ndim != 4 or image.shape[1] != 1:
        raise ValueError(f"seg_forward expects [B,1,H,W], got {image.shape}")
    if image.shape[2] % factor or image.shape[3] % factor:
        raise ValueError(f"image size {image.shape[2:]} is not divisible by {factor}")
    return encoder_decoder_forward(params.tensors, image, params.depth)


def approx_logits(params: ApproxNetParams, g: Tensor) -> Tensor:
    """Per-line logits [B,N,M]; the grid is zero-padded to a multiple of 8 and cropped back."""
    batch, _, num_lines, num_points = g.shape
    factor = 2 ** params.depth
    pad_n = -num_lines % factor
    pad_m = -num_points % factor
    h = ad.pad2d(g, pad_n, pad_m) if pad_n or pad_m else g
    h = encoder_decoder_forward(params.tensors, h, params.depth)
    if pad_n or pad_m:
        h = ad.crop2d(h, num_lines, num_points)
    return ad.reshape(h, (batch, num_lines, num_points))


def approx_forward(params: ApproxNetParams, g: Tensor) -> Tensor:
    """Row-softmax over the M points of each radial line."""
    return ad.softmax_rows(approx_logits(params, g))


def baseline_seg_loss(output_map: Tensor, mask: np.ndarray) -> Tensor:
    """Per-pixel BCE on sigmoid(output map)."""
    return ad.sigmoid_bce(output_map, np.asarray(mask, dtype=np.float64).reshape(output_map.shape))


def snapshot(tensors: Dict[str, Tensor], prefix: str = "") -> Dict[str, np.ndarray]:
    return {f"{prefix}{k}": t.values.copy() for k, t in tensors.items()}


def restore(tensors: Dict[str, Tensor], arrays: Dict[str, np.ndarray], prefix: str = "") -> None:
    for key, t in tensors.items():
        name = f"{prefix}{key}"
        if name not in arrays:
            raise KeyError(f"checkpoint is missing parameter {name}")
        if arrays[name].shape != t.values.shape:
            raise ValueError(f"parameter {name} has shape {arrays[name].shape}, expected {t.values.shape}")
        t.values = arrays[name].copy()
