"""Seeded generator of star-convex blob images with masks, centers and object radii."""

import math
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from backend.services.star_geometry import foreground_at, build_star, mask_to_indices
from shared.exceptions import DataError
from shared.models import GenConfig, Point, Sample

logger = logging.getLogger(__name__)

NUM_HARMONICS = 4
SCAN_RAYS = 360
SCAN_STEP = 0.25


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for sample `index` of a dataset seeded with `seed`."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def ray_scan(mask: np.ndarray, center: Point, num_rays: int = SCAN_RAYS, step: float = SCAN_STEP) -> Tuple[np.ndarray, np.ndarray]:
    """Boundary crossings and distance to the last foreground sample along evenly spaced rays from center.

    Each ray is sampled every `step` pixels (rounded half up) until it leaves the image;
    a crossing is a foreground-to-background transition.
    """
    height, width = mask.shape
    reach = math.hypot(height, width)
    t = np.arange(0.0, reach + step, step)
    theta = 2.0 * math.pi * np.arange(num_rays) / num_rays
    points = np.empty((num_rays, t.size, 2))
    points[..., 0] = center[0] + t[None, :] * np.cos(theta)[:, None]
    points[..., 1] = center[1] + t[None, :] * np.sin(theta)[:, None]
    hits = foreground_at(mask, points)

    # the scan always ends outside the image, so every ray that starts inside exits
    exits = hits[:, :-1] & ~hits[:, 1:]
    crossings = exits.sum(axis=1)
    last_inside = np.where(exits.any(axis=1), exits.argmax(axis=1), 0)
    return crossings, t[last_inside]


def is_star_convex(mask: np.ndarray, center: Point, num_rays: int = SCAN_RAYS) -> bool:
    if not foreground_at(mask, np.asarray([center], dtype=np.float64))[0]:
        return False
    crossings, _ = ray_scan(mask, center, num_rays)
    return bool(np.all(crossings == 1))


def _blob_mask(rng: np.random.Generator, height: int, width: int, cfg: GenConfig) -> np.ndarray:
    r0 = rng.uniform(cfg.radius_min, cfg.radius_max) * min(height, width)
    k = np.arange(1, NUM_HARMONICS + 1)
    # higher harmonics are damped as 1/k so neighbouring rays stay within the smoothness bound
    amplitudes = rng.uniform(-cfg.harmonic_amplitude, cfg.harmonic_amplitude, NUM_HARMONICS) / k
    phases = rng.uniform(0.0, 2.0 * math.pi, NUM_HARMONICS)

    reach = r0 * (1.0 + np.abs(amplitudes).sum())
    margin_x = max(0.0, width / 2.0 - reach - 2.0)
    margin_y = max(0.0, height / 2.0 - reach - 2.0)
    cx = width / 2.0 + rng.uniform(-margin_x, margin_x)
    cy = height / 2.0 + rng.uniform(-margin_y, margin_y)

    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    angle = np.arctan2(ys - cy, xs - cx)
    boundary = r0 * (1.0 + (amplitudes[:, None, None] * np.cos(k[:, None, None] * angle + phases[:, None, None])).sum(axis=0))
    boundary = np.maximum(boundary, 0.05 * r0)
    return (np.hypot(xs - cx, ys - cy) <= boundary).astype(np.uint8)


def _render(rng: np.random.Generator, mask: np.ndarray, cfg: GenConfig) -> np.ndarray:
    height, width = mask.shape
    background = rng.uniform(0.2, 0.4)
    contrast = rng.uniform(cfg.contrast_min, cfg.contrast_max)
    if cfg.random_sign and rng.random() < 0.5:
        contrast = -contrast
    image = background + contrast * mask.astype(np.float64)
    image = ndimage.uniform_filter(image, size=3, mode="nearest")

    slope = rng.uniform(0.0, cfg.ramp)
    direction = rng.uniform(0.0, 2.0 * math.pi)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    image += slope * ((xs / width - 0.5) * math.cos(direction) + (ys / height - 0.5) * math.sin(direction))
    if cfg.noise > 0:
        image += rng.normal(0.0, cfg.noise, size=image.shape)
    return np.clip(image, 0.0, 1.0)


def gen_sample(rng: np.random.Generator, height: int, width: int, cfg: GenConfig, name: str = "") -> Sample:
    """Draw blobs until one is star-convex about its centroid with a delta-feasible ground-truth contour."""
    if height < 32 or width < 32:
        raise ValueError(f"images must be at least 32x32, got {height}x{width}")

    for attempt in range(cfg.max_attempts):
        mask = _blob_mask(rng, height, width, cfg)
        row, col = ndimage.center_of_mass(mask)
        center = (float(col), float(row))
        if not is_star_convex(mask, center):
            continue
        star = build_star(center, cfg.radius, cfg.num_lines, cfg.points_per_line)
        if mask_to_indices(star, mask).max_gap() > cfg.delta:
            continue

        _, inside = ray_scan(mask, center)
        if inside.min() < 1.0:
            continue
        image = _render(rng, mask, cfg)
        if attempt:
            logger.debug(f"Sample {name or '<anon>'} accepted after {attempt + 1} draws")
        return Sample(name=name, image=image, mask=mask, center=center, object_radius=float(inside.min()))

    raise DataError(f"no valid blob after {cfg.max_attempts} draws; relax the generator settings")


def gen_samples(
    seed: int,
    start: int,
    count: int,
    height: int,
    width: int,
    cfg: GenConfig,
    prefix: str,
    workers: int = 1,
) -> List[Sample]:
    """Samples start..start+count-1, each from its own (seed, index) stream, returned in index order."""
    def _one(index: int) -> Sample:
        return gen_sample(sample_rng(seed, index), height, width, cfg, name=f"{prefix}_{index:05d}")

    indices = range(start, start + count)
    if workers <= 1:
        return [_one(i) for i in indices]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_one, indices))
