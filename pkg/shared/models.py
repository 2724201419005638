import math
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from shared.config import (
    DATA_DIR,
    DEFAULT_DELTA,
    DEFAULT_NUM_LINES,
    DEFAULT_POINTS_PER_LINE,
    DEFAULT_SMOOTH_WINDOW,
    DEFAULT_STAR_RADIUS,
    OUTPUT_DIR,
)

Point = Tuple[float, float]


class EdgePolarity(str, Enum):
    AS_PRINTED = "as-printed"
    NEGATED = "negated"


class Arm(str, Enum):
    EDPCNN = "edpcnn"
    UNET = "unet"
    UNET_DP = "unet+dp"


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"


# Geometry Models
class StarPattern(BaseModel):
    """N radial lines of M sample points; coords[n, m-1] is the (x, y) of point m on line n."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    center: Point
    radius: float
    num_lines: int
    points_per_line: int
    rotation: float
    coords: np.ndarray

    @property
    def angles(self) -> np.ndarray:
        return self.rotation + 2.0 * math.pi * np.arange(self.num_lines) / self.num_lines


class ContourIndices(BaseModel):
    """One 1-based index per radial line."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    v: np.ndarray
    num_points: int

    @field_validator("v", mode="before")
    @classmethod
    def _as_int_array(cls, v):
        return np.asarray(v, dtype=np.int64).copy()

    @model_validator(mode="after")
    def _check_range(self):
        if self.v.ndim != 1:
            raise ValueError("contour indices must be one-dimensional")
        if self.v.size and (self.v.min() < 1 or self.v.max() > self.num_points):
            raise ValueError(f"contour index out of range 1..{self.num_points}")
        return self

    def max_gap(self) -> int:
        return int(np.abs(self.v - np.roll(self.v, -1)).max()) if self.v.size else 0


class WarpedMap(BaseModel):
    """Output map sampled on a star pattern; source[n, m] is the (x, y) pixel read."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    g: np.ndarray
    source: np.ndarray


class EnergyTable(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    E: np.ndarray
    delta: int


class DPTables(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    U: np.ndarray
    I: np.ndarray


class ContourRecord(BaseModel):
    """JSON form of a contour"""
    center: Point
    radius: float
    v: List[int]
    polygon: List[Point]


# Dataset Models
class Sample(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    name: str = ""
    image: np.ndarray
    mask: np.ndarray
    center: Point
    object_radius: float


class GenConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    height: int = Field(default=64, ge=32)
    width: int = Field(default=64, ge=32)
    noise: float = Field(default=0.05, ge=0.0)
    contrast_min: float = 0.2
    contrast_max: float = 0.5
    random_sign: bool = False
    ramp: float = Field(default=0.1, ge=0.0)
    harmonic_amplitude: float = Field(default=0.15, ge=0.0, le=0.15)
    radius_min: float = 0.15
    radius_max: float = 0.35
    # star used for the p_gt feasibility check
    num_lines: int = Field(default=DEFAULT_NUM_LINES, ge=3)
    points_per_line: int = Field(default=DEFAULT_POINTS_PER_LINE, ge=2)
    radius: float = Field(default=DEFAULT_STAR_RADIUS, gt=0)
    delta: int = Field(default=DEFAULT_DELTA, ge=1)
    max_attempts: int = Field(default=100, ge=1)


class ManifestEntry(BaseModel):
    name: str
    split: Split
    image: str
    mask: str
    center: Point
    object_radius: float


class DatasetManifest(BaseModel):
    seed: int
    height: int
    width: int
    n_train: int
    n_val: int
    entries: List[ManifestEntry]


# Training Models
class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr: float = Field(default=1e-4, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    batch: int = Field(default=10, ge=1)
    iters: int = Field(default=2000, ge=0)
    sigma: float = Field(default=1.0, ge=0)
    noise_samples: int = Field(default=10, ge=1)
    inner_steps: int = Field(default=10, ge=1)
    num_lines: int = Field(default=DEFAULT_NUM_LINES, ge=3)
    points_per_line: int = Field(default=DEFAULT_POINTS_PER_LINE, ge=2)
    radius: float = Field(default=DEFAULT_STAR_RADIUS, gt=0)
    delta: int = Field(default=DEFAULT_DELTA, ge=1)
    window: int = Field(default=DEFAULT_SMOOTH_WINDOW, ge=1)
    eval_every: int = Field(default=50, ge=1)
    seed: int = 0
    edge_polarity: EdgePolarity = EdgePolarity.AS_PRINTED
    depth: int = Field(default=2, ge=1)
    base_channels: int = Field(default=8, ge=1)
    approx_base_channels: int = Field(default=8, ge=1)
    center_jitter: float = Field(default=0.2, ge=0, le=1)
    rotate: bool = True

    @model_validator(mode="after")
    def _check_star(self):
        if self.delta >= self.points_per_line:
            raise ValueError("delta must be smaller than points_per_line")
        if self.window % 2 == 0:
            raise ValueError("window must be odd")
        return self


class RunConfig(TrainConfig):
    data_dir: str = DATA_DIR
    output_dir: str = OUTPUT_DIR
    arm: Arm = Arm.EDPCNN
    train_size: Optional[int] = Field(default=None, ge=1)


class GenDataConfig(GenConfig):
    seed: int = 0
    n_train: int = Field(default=200, ge=1)
    n_val: int = Field(default=60, ge=1)
    data_dir: str = DATA_DIR
    workers: int = Field(default=1, ge=1)


class AblateConfig(RunConfig):
    sizes: List[int] = [10, 50, 200]
    arms: List[Arm] = [Arm.EDPCNN, Arm.UNET, Arm.UNET_DP]

    @field_validator("sizes")
    @classmethod
    def _ascending(cls, sizes):
        if not sizes or any(b <= a for a, b in zip(sizes, sizes[1:])) or sizes[0] < 1:
            raise ValueError("sizes must be positive and strictly ascending")
        return sizes


class EvalConfig(RunConfig):
    checkpoint: Optional[str] = None
    split: Split = Split.VAL


class SegmentConfig(RunConfig):
    checkpoint: Optional[str] = None
    image: Optional[str] = None
    center: Optional[List[float]] = None

    @field_validator("center")
    @classmethod
    def _xy(cls, center):
        if center is not None and len(center) != 2:
            raise ValueError("center must be given as x,y")
        return center


class JitterConfig(RunConfig):
    checkpoint: Optional[str] = None
    fractions: List[float] = [0.0, 0.1, 0.2, 0.3, 0.5]
    seeds: int = Field(default=5, ge=1)


class IterationRecord(BaseModel):
    iteration: int
    inner_loss: Optional[float] = None
    outer_loss: float


class EvalRecord(BaseModel):
    iteration: int
    dice: float
    assd: Optional[float] = None
    hd: Optional[float] = None
    failures: int = 0


class TrainLog(BaseModel):
    iterations: List[IterationRecord] = []
    evals: List[EvalRecord] = []
    best_iteration: Optional[int] = None
    best_dice: Optional[float] = None


# Metric Models
class SampleMetrics(BaseModel):
    name: str
    dice: float = Field(ge=0.0, le=1.0)
    assd: Optional[float] = None
    hd: Optional[float] = None


class MetricReport(BaseModel):
    samples: List[SampleMetrics] = []
    dice_mean: float = 0.0
    dice_std: float = 0.0
    assd_mean: Optional[float] = None
    assd_std: Optional[float] = None
    hd_mean: Optional[float] = None
    hd_std: Optional[float] = None
    failures: int = 0

    @classmethod
    def from_samples(cls, samples: List[SampleMetrics]) -> "MetricReport":
        dice = np.array([s.dice for s in samples], dtype=np.float64)
        ok = [s for s in samples if s.assd is not None and s.hd is not None]
        assd = np.array([s.assd for s in ok], dtype=np.float64)
        hd = np.array([s.hd for s in ok], dtype=np.float64)
        return cls(
            samples=samples,
            dice_mean=float(dice.mean()) if dice.size else 0.0,
            dice_std=float(dice.std()) if dice.size else 0.0,
            assd_mean=float(assd.mean()) if assd.size else None,
            assd_std=float(assd.std()) if assd.size else None,
            hd_mean=float(hd.mean()) if hd.size else None,
            hd_std=float(hd.std()) if hd.size else None,
            failures=len(samples) - len(ok),
        )

    def summary(self) -> Dict[str, Optional[float]]:
        return {
            "dice": self.dice_mean,
            "assd": self.assd_mean,
            "hd": self.hd_mean,
        }


class CheckResult(BaseModel):
    """One benchmark threshold: the measured value and whether it cleared the bound"""
    name: str
    value: float
    bound: float
    passed: bool
