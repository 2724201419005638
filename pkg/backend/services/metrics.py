"""Segmentation scores in pixel units: Dice, ASSD, Hausdorff and connected-component selection."""

import logging
from typing import Tuple

import numpy as np
from scipy import ndimage

from backend.services.star_geometry import round_half_up
from shared.models import Point, SampleMetrics

logger = logging.getLogger(__name__)

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def _check_pair(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a) > 0
    b = np.asarray(b) > 0
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|a∩b| / (|a|+|b|), and 1 when both masks are empty."""
    a, b = _check_pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour in the background; outside the image counts as background."""
    mask = np.asarray(mask) > 0
    return mask & ~ndimage.binary_erosion(mask, structure=FOUR_CONNECTED, border_value=0)


def surface_distances(a: np.ndarray, b: np.ndarray) -> Tuple[float, float]:
    """(ASSD, HD) between the boundaries of two nonempty masks."""
    a, b = _check_pair(a, b)
    if not a.any() or not b.any():
        raise ValueError("surface distances are undefined for an empty mask")

    edge_a = boundary(a)
    edge_b = boundary(b)
    # distance from every pixel to the nearest boundary pixel of the other mask
    to_b = ndimage.distance_transform_edt(~edge_b)
    to_a = ndimage.distance_transform_edt(~edge_a)
    d_ab = to_b[edge_a]
    d_ba = to_a[edge_b]

    assd = (d_ab.sum() + d_ba.sum()) / (d_ab.size + d_ba.size)
    hd = max(d_ab.max(), d_ba.max())
    return float(assd), float(hd)


def select_component(mask: np.ndarray, centroid: Point) -> np.ndarray:
    """4-connected component under the rounded centroid, else the largest (ties: lowest label)."""
    mask = np.asarray(mask) > 0
    labels, count = ndimage.label(mask, structure=FOUR_CONNECTED)
    if count == 0:
        return np.zeros(mask.shape, dtype=np.uint8)

    height, width = mask.shape
    x, y = (int(c) for c in round_half_up(np.asarray(centroid, dtype=np.float64)))
    if 0 <= x < width and 0 <= y < height and labels[y, x] > 0:
        chosen = labels[y, x]
    else:
        sizes = np.bincount(labels.ravel())[1:]
        chosen = int(sizes.argmax()) + 1
    return (labels == chosen).astype(np.uint8)


def score_sample(name: str, prediction: np.ndarray, truth: np.ndarray) -> SampleMetrics:
    """Per-sample metrics; surface distances of an empty prediction are left unset as a failure."""
    score = dice(prediction, truth)
    try:
        assd, hd = surface_distances(prediction, truth)
    except ValueError as e:
        logger.debug(f"Surface distances failed for {name}: {str(e)}")
        return SampleMetrics(name=name, dice=score)
    return SampleMetrics(name=name, dice=score, assd=assd, hd=hd)
