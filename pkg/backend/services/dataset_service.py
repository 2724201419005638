import json
import logging
import re
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from backend.services.star_geometry import round_half_up
from backend.services.synth_data import gen_samples
from shared.config import DATA_DIR, GEN_WORKERS, MANIFEST_FILE
from shared.exceptions import DataError
from shared.models import DatasetManifest, GenConfig, ManifestEntry, Point, Sample, Split

_PGM_HEADER = re.compile(rb"^P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def write_pgm(path: Path, pixels: np.ndarray) -> None:
    """Binary 8-bit PGM (P5, maxval 255)."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {pixels.shape}")
    height, width = pixels.shape
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.clip(pixels, 0, 255).astype(np.uint8).tobytes())


def read_pgm(path: Path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"Cannot read image {path}: {e}") from e
    match = _PGM_HEADER.match(data)
    if not match:
        raise DataError(f"{path} is not a binary PGM (P5) file")
    width, height, maxval = (int(g) for g in match.groups())
    if maxval > 255:
        raise DataError(f"{path}: only 8-bit PGM is supported, maxval={maxval}")
    body = data[match.end():match.end() + width * height]
    if len(body) != width * height:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width).copy()


def image_to_pgm(image: np.ndarray) -> np.ndarray:
    return np.clip(round_half_up(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def mask_to_pgm(mask: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8)


def draw_polygon(pixels: np.ndarray, polygon: Sequence[Point], value: int = 255) -> np.ndarray:
    """Copy of an 8-bit image with the closed polygon outline burnt in at `value`."""
    out = np.array(pixels, dtype=np.uint8)
    height, width = out.shape
    vertices = np.asarray(polygon, dtype=np.float64)
    for start, end in zip(vertices, np.roll(vertices, -1, axis=0)):
        steps = max(1, int(np.ceil(2.0 * np.abs(end - start).max())))
        t = np.linspace(0.0, 1.0, steps + 1)[:, None]
        points = round_half_up(start + t * (end - start))
        inside = (points[:, 0] >= 0) & (points[:, 0] < width) & (points[:, 1] >= 0) & (points[:, 1] < height)
        out[points[inside, 1], points[inside, 0]] = value
    return out


class DatasetService:
    """On-disk synthetic datasets: PGM image/mask pairs per split plus a JSON manifest"""

    def __init__(self, data_dir: Optional[str] = None):
        self.data_dir = Path(data_dir or DATA_DIR)
        self.manifest_file = self.data_dir / MANIFEST_FILE
        self.logger = logging.getLogger(__name__)

    def _load_json(self, file_path: Path) -> Dict[str, Any]:
        """Load JSON data from file"""
        try:
            with open(file_path, "r", encoding="utf-8") as f:
                return json.load(f)
        except FileNotFoundError as e:
            self.logger.error(f"Missing file {file_path}")
            raise DataError(f"Missing file {file_path}") from e
        except (OSError, json.JSONDecodeError) as e:
            self.logger.error(f"Error loading {file_path}: {str(e)}")
            raise DataError(f"Cannot load {file_path}: {e}") from e

    def _save_json(self, file_path: Path, data: Dict[str, Any]):
        """Save JSON data to file"""
        try:
            with open(file_path, "w", encoding="utf-8") as f:
                json.dump(data, f, indent=2, ensure_ascii=False, default=str)
                f.write("\n")
        except Exception as e:
            self.logger.error(f"Error saving {file_path}: {str(e)}")
            raise

    # Dataset generation
    def generate(
        self,
        seed: int,
        n_train: int,
        n_val: int,
        cfg: GenConfig,
        workers: Optional[int] = None,
    ) -> DatasetManifest:
        """Generate and write both splits; the train entries are listed in a seed-fixed shuffled order."""
        if n_train < 1 or n_val < 1:
            raise ValueError("both splits need at least one sample")
        workers = workers or GEN_WORKERS
        self.logger.info(f"Generating {n_train}+{n_val} samples of {cfg.height}x{cfg.width} into {self.data_dir}")

        train = gen_samples(seed, 0, n_train, cfg.height, cfg.width, cfg, "train", workers)
        val = gen_samples(seed, n_train, n_val, cfg.height, cfg.width, cfg, "val", workers)
        order = np.random.default_rng(seed).permutation(n_train)

        manifest = DatasetManifest(
            seed=seed, height=cfg.height, width=cfg.width, n_train=n_train, n_val=n_val, entries=[]
        )
        for split, samples in ((Split.TRAIN, [train[i] for i in order]), (Split.VAL, val)):
            for sample in samples:
                manifest.entries.append(self.save_sample(sample, split))
        self._save_json(self.manifest_file, manifest.model_dump(mode="json"))
        self.logger.info(f"Dataset written: {len(manifest.entries)} samples")
        return manifest

    def save_sample(self, sample: Sample, split: Split) -> ManifestEntry:
        split_dir = self.data_dir / split.value
        split_dir.mkdir(parents=True, exist_ok=True)
        image_name = f"{split.value}/{sample.name}_image.pgm"
        mask_name = f"{split.value}/{sample.name}_mask.pgm"
        try:
            write_pgm(self.data_dir / image_name, image_to_pgm(sample.image))
            write_pgm(self.data_dir / mask_name, mask_to_pgm(sample.mask))
        except OSError as e:
            self.logger.error(f"Error writing sample {sample.name}: {str(e)}")
            raise DataError(f"Cannot write sample {sample.name}: {e}") from e
        return ManifestEntry(
            name=sample.name,
            split=split,
            image=image_name,
            mask=mask_name,
            center=sample.center,
            object_radius=sample.object_radius,
        )

    # Dataset loading
    def load_manifest(self) -> DatasetManifest:
        if not self.manifest_file.exists():
            raise DataError(f"No dataset at {self.data_dir}: {MANIFEST_FILE} not found (run gen-data first)")
        return DatasetManifest(**self._load_json(self.manifest_file))

    def load_entry(self, entry: ManifestEntry) -> Sample:
        image = read_pgm(self.data_dir / entry.image).astype(np.float64) / 255.0
        mask = (read_pgm(self.data_dir / entry.mask) > 127).astype(np.uint8)
        if image.shape != mask.shape:
            raise DataError(f"{entry.name}: image {image.shape} and mask {mask.shape} differ in shape")
        return Sample(
            name=entry.name,
            image=image,
            mask=mask,
            center=entry.center,
            object_radius=entry.object_radius,
        )

    def load_split(self, split: Split, manifest: Optional[DatasetManifest] = None) -> List[Sample]:
        manifest = manifest or self.load_manifest()
        samples = [self.load_entry(e) for e in manifest.entries if e.split == split]
        if not samples:
            raise DataError(f"split '{split.value}' is empty in {self.manifest_file}")
        return samples

    def load_splits(self) -> Tuple[List[Sample], List[Sample]]:
        manifest = self.load_manifest()
        train = self.load_split(Split.TRAIN, manifest)
        val = self.load_split(Split.VAL, manifest)
        overlap = {s.name for s in train} & {s.name for s in val}
        if overlap:
            raise DataError(f"train and val splits share samples: {sorted(overlap)[:5]}")
        self.logger.info(f"Loaded {len(train)} train and {len(val)} val samples from {self.data_dir}")
        return train, val


def telescopic_subset(samples: List[Sample], size: Optional[int], seed: int) -> List[Sample]:
    """Prefix of one seed-fixed shuffle, so smaller sizes nest inside larger ones."""
    if size is None:
        size = len(samples)
    if size > len(samples):
        raise ValueError(f"requested {size} training samples but the dataset has {len(samples)}")
    order = np.random.default_rng(seed).permutation(len(samples))
    return [samples[i] for i in order[:size]]
