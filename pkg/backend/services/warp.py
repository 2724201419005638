"""Nearest-neighbour interpolation of an output map onto a star pattern, and its adjoint."""

from typing import Sequence, Tuple

import numpy as np

from backend.services import autodiff as ad
from backend.services.autodiff import Tensor
from backend.services.star_geometry import round_half_up
from shared.models import StarPattern, WarpedMap


def warp_forward(output_map: np.ndarray, star: StarPattern) -> WarpedMap:
    """g[n, m] = map at the nearest pixel of star.coords[n, m], clamped to the image."""
    output_map = np.asarray(output_map, dtype=np.float64)
    if output_map.ndim != 2 or output_map.size == 0:
        raise ValueError(f"output map must be a nonempty 2-D array, got shape {output_map.shape}")
    if not np.all(np.isfinite(star.coords)):
        raise ValueError("star coordinates must be finite")

    height, width = output_map.shape
    source = np.empty(star.coords.shape, dtype=np.int64)
    source[..., 0] = np.clip(round_half_up(star.coords[..., 0]), 0, width - 1)
    source[..., 1] = np.clip(round_half_up(star.coords[..., 1]), 0, height - 1)
    g = output_map[source[..., 1], source[..., 0]]
    return WarpedMap(g=g, source=source)


def warp_backward(grad_g: np.ndarray, source: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Scatter-add grad_g back onto the pixels each star point was read from."""
    grad_g = np.asarray(grad_g, dtype=np.float64)
    if grad_g.shape != source.shape[:-1]:
        raise ValueError(f"gradient shape {grad_g.shape} does not match source grid {source.shape[:-1]}")
    height, width = shape
    if source.size and (
        source[..., 0].max() >= width or source[..., 1].max() >= height or source.min() < 0
    ):
        raise ValueError(f"source pixels fall outside an image of shape {shape}")

    grad_map = np.zeros((height, width), dtype=np.float64)
    np.add.at(grad_map, (source[..., 1], source[..., 0]), grad_g)
    return grad_map


def warp_tensor(output_map: Tensor, stars: Sequence[StarPattern]) -> Tensor:
    """Differentiable warp of a batch [B,1,H,W] onto one star per image, giving [B,1,N,M]."""
    batch, channels, height, width = output_map.shape
    if channels != 1 or len(stars) != batch:
        raise ValueError(f"expected one star per [B,1,H,W] map, got {len(stars)} for {output_map.shape}")
    warped = [warp_forward(output_map.values[b, 0], star) for b, star in enumerate(stars)]
    g = np.stack([w.g for w in warped])[:, None]

    def _backward(grad):
        grad_map = np.zeros((batch, 1, height, width))
        for b, w in enumerate(warped):
            grad_map[b, 0] = warp_backward(grad[b, 0], w.source, (height, width))
        return (grad_map,)

    return ad.apply_op("warp", g, (output_map,), _backward)
