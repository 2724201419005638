import logging
from typing import List, Optional, Sequence

import numpy as np

from backend.services.autodiff import Tensor
from backend.services.dp_contour import dp_solve_batch, orient_map, smooth_batch
from backend.services.metrics import score_sample, select_component
from backend.services.nets import SegNetParams, seg_forward
from backend.services.star_geometry import build_star, indices_to_polygon, polygon_to_mask
from backend.services.warp import warp_forward
from shared.models import Arm, ContourIndices, EdgePolarity, MetricReport, Point, Sample, StarPattern, TrainConfig


class EvaluationService:
    """Arm-appropriate decoding of output maps into masks, and scoring against ground truth"""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.logger = logging.getLogger(__name__)

    def star_for(self, center: Point) -> StarPattern:
        cfg = self.cfg
        return build_star(center, cfg.radius, cfg.num_lines, cfg.points_per_line)

    def predict_maps(self, seg: SegNetParams, images: Sequence[np.ndarray]) -> np.ndarray:
        """Output maps [B,H,W], computed without recording in chunks of the training batch size."""
        maps = []
        step = self.cfg.batch
        for start in range(0, len(images), step):
            chunk = np.stack(images[start:start + step])[:, None].astype(np.float64)
            maps.append(seg_forward(seg, Tensor(chunk)).values[:, 0])
        return np.concatenate(maps)

    def decode_contours(self, maps: np.ndarray, stars: Sequence[StarPattern]) -> List[ContourIndices]:
        """DP on each warped map followed by circular smoothing."""
        cfg = self.cfg
        g = np.stack([warp_forward(m, star).g for m, star in zip(maps, stars)])
        v, _ = dp_solve_batch(orient_map(g, EdgePolarity(cfg.edge_polarity)), cfg.delta)
        v = smooth_batch(v, cfg.window, cfg.points_per_line)
        return [ContourIndices(v=row, num_points=cfg.points_per_line) for row in v]

    def decode_masks(
        self,
        arm: Arm,
        maps: np.ndarray,
        samples: Sequence[Sample],
        centers: Optional[Sequence[Point]] = None,
    ) -> List[np.ndarray]:
        centers = centers or [s.center for s in samples]
        if Arm(arm) is Arm.UNET:
            # sigmoid(map) > 0.5, restricted to the component at the centroid
            return [select_component(m > 0, s.center) for m, s in zip(maps, samples)]

        stars = [self.star_for(c) for c in centers]
        contours = self.decode_contours(maps, stars)
        return [
            polygon_to_mask(indices_to_polygon(star, v), m.shape)
            for star, v, m in zip(stars, contours, maps)
        ]

    def evaluate(
        self,
        seg: SegNetParams,
        samples: Sequence[Sample],
        arm: Arm,
        centers: Optional[Sequence[Point]] = None,
    ) -> MetricReport:
        maps = self.predict_maps(seg, [s.image for s in samples])
        return self.score_maps(maps, samples, arm, centers)

    def score_maps(
        self,
        maps: np.ndarray,
        samples: Sequence[Sample],
        arm: Arm,
        centers: Optional[Sequence[Point]] = None,
    ) -> MetricReport:
        masks = self.decode_masks(arm, maps, samples, centers)
        scores = [score_sample(s.name, pred, s.mask) for pred, s in zip(masks, samples)]
        report = MetricReport.from_samples(scores)
        if report.failures:
            self.logger.warning(f"{report.failures}/{len(scores)} predictions had no foreground")
        return report
