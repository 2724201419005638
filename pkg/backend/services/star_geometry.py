"""Star pattern construction and the maps between image space and the N x M warped domain."""

import math
import logging
from typing import List, Sequence

import numpy as np

from shared.exceptions import DataError
from shared.models import ContourIndices, ContourRecord, Point, StarPattern

logger = logging.getLogger(__name__)

# rejection-sampling guard for jitter_center
MAX_JITTER_DRAWS = 10_000


def round_half_up(values: np.ndarray) -> np.ndarray:
    """Nearest integer with .5 rounded up, shared by warping and ray scans."""
    return np.floor(np.asarray(values, dtype=np.float64) + 0.5).astype(np.int64)


def build_star(
    center: Point,
    radius: float,
    num_lines: int,
    points_per_line: int,
    rotation: float = 0.0,
) -> StarPattern:
    """Place points m = 1..M at radii m*R/M on N equally spaced rays."""
    if num_lines < 3:
        raise ValueError(f"star pattern needs at least 3 lines, got {num_lines}")
    if points_per_line < 1:
        raise ValueError(f"star pattern needs at least 1 point per line, got {points_per_line}")
    if not radius > 0:
        raise ValueError(f"star radius must be positive, got {radius}")

    theta = rotation + 2.0 * math.pi * np.arange(num_lines) / num_lines
    radii = np.arange(1, points_per_line + 1) * (radius / points_per_line)
    coords = np.empty((num_lines, points_per_line, 2), dtype=np.float64)
    coords[..., 0] = center[0] + radii[None, :] * np.cos(theta)[:, None]
    coords[..., 1] = center[1] + radii[None, :] * np.sin(theta)[:, None]

    return StarPattern(
        center=(float(center[0]), float(center[1])),
        radius=float(radius),
        num_lines=num_lines,
        points_per_line=points_per_line,
        rotation=float(rotation),
        coords=coords,
    )


def jitter_center(
    center: Point,
    object_radius: float,
    fraction: float,
    rng: np.random.Generator,
) -> Point:
    """Offset the center by an isotropic normal (std fraction*radius) truncated to the object radius."""
    if not object_radius > 0:
        raise ValueError(f"object radius must be positive, got {object_radius}")
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"jitter fraction must lie in [0, 1], got {fraction}")
    if fraction == 0.0:
        return (float(center[0]), float(center[1]))

    std = fraction * object_radius
    for _ in range(MAX_JITTER_DRAWS):
        d = rng.normal(0.0, std, size=2)
        if math.hypot(d[0], d[1]) < object_radius:
            return (float(center[0] + d[0]), float(center[1] + d[1]))
    raise RuntimeError("jitter rejection sampling did not terminate")


def indices_to_polygon(star: StarPattern, v: ContourIndices) -> List[Point]:
    """Vertex n of the contour is star.coords[n][v[n]]."""
    idx = np.asarray(v.v)
    if idx.shape != (star.num_lines,):
        raise ValueError(f"expected {star.num_lines} indices, got shape {idx.shape}")
    if idx.min() < 1 or idx.max() > star.points_per_line:
        raise ValueError(f"contour index out of range 1..{star.points_per_line}")
    vertices = star.coords[np.arange(star.num_lines), idx - 1]
    return [(float(x), float(y)) for x, y in vertices]


def _polygon_area(vertices: np.ndarray) -> float:
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_to_mask(polygon: Sequence[Point], shape) -> np.ndarray:
    """Rasterize a closed polygon; pixel (x, y) is set when its center is inside or on the boundary."""
    vertices = np.asarray(polygon, dtype=np.float64)
    if vertices.ndim != 2 or vertices.shape[0] < 3:
        raise ValueError("polygon needs at least 3 vertices")
    if abs(_polygon_area(vertices)) < 1e-12:
        raise ValueError("polygon has zero area")

    height, width = shape
    ys, xs = np.mgrid[0:height, 0:width]
    px = xs.astype(np.float64)
    py = ys.astype(np.float64)

    inside = np.zeros((height, width), dtype=bool)
    on_edge = np.zeros((height, width), dtype=bool)
    x0, y0 = vertices[:, 0], vertices[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    tol = 1e-9

    for ax, ay, bx, by in zip(x0, y0, x1, y1):
        # even-odd crossing of the horizontal ray towards +x
        crosses = (ay > py) != (by > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = ax + (py - ay) * (bx - ax) / (by - ay)
        inside ^= crosses & (px < x_cross)

        cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        within = (
            (px >= min(ax, bx) - tol) & (px <= max(ax, bx) + tol)
            & (py >= min(ay, by) - tol) & (py <= max(ay, by) + tol)
        )
        on_edge |= within & (np.abs(cross) <= tol * max(1.0, math.hypot(bx - ax, by - ay)))

    return (inside | on_edge).astype(np.uint8)


def foreground_at(mask: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Foreground test for rounded points; anything outside the image is background."""
    height, width = mask.shape
    px = round_half_up(points[..., 0])
    py = round_half_up(points[..., 1])
    valid = (px >= 0) & (px < width) & (py >= 0) & (py < height)
    hit = np.zeros(px.shape, dtype=bool)
    hit[valid] = mask[py[valid], px[valid]] > 0
    return hit


def mask_to_indices(star: StarPattern, mask: np.ndarray) -> ContourIndices:
    """Outermost point of the run of foreground samples that starts at the center, per ray."""
    mask = np.asarray(mask)
    center = np.asarray(star.center, dtype=np.float64)
    if not foreground_at(mask, center[None, :])[0]:
        raise DataError(f"star center {star.center} lies outside the mask foreground")

    hits = foreground_at(mask, star.coords)
    # first background sample per ray bounds the contiguous run
    run = np.cumprod(hits, axis=1).sum(axis=1)
    v = np.maximum(run, 1)
    return ContourIndices(v=v, num_points=star.points_per_line)


def contour_to_record(star: StarPattern, v: ContourIndices) -> ContourRecord:
    """JSON-ready contour"""
    return ContourRecord(
        center=star.center,
        radius=star.radius,
        v=[int(i) for i in v.v],
        polygon=indices_to_polygon(star, v),
    )
