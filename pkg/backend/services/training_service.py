"""Training loops: the surrogate-gradient EDPCNN step and the two pixel-loss baselines."""

import math
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from backend.services import autodiff as ad
from backend.services.autodiff import Adam, ComputationRecord, Tensor
from backend.services.dataset_service import telescopic_subset
from backend.services.dp_contour import dp_solve_batch, orient_map, smooth_batch
from backend.services.evaluation_service import EvaluationService
from backend.services.nets import (
    ApproxNetParams,
    SegNetParams,
    approx_forward,
    baseline_seg_loss,
    restore,
    seg_forward,
    snapshot,
)
from backend.services.star_geometry import foreground_at, build_star, jitter_center, mask_to_indices
from backend.services.warp import warp_tensor
from shared.exceptions import DataError, NumericalError
from shared.models import (
    AblateConfig,
    Arm,
    EdgePolarity,
    EvalRecord,
    IterationRecord,
    Sample,
    StarPattern,
    TrainConfig,
    TrainLog,
)

ARM_CODES = {Arm.EDPCNN: 0.0, Arm.UNET: 1.0, Arm.UNET_DP: 2.0}
ABLATION_COLUMNS = ["size", "arm", "sigma", "dice", "dice_std", "assd", "assd_std", "hd", "hd_std", "failures"]
JITTER_COLUMNS = ["fraction", "dice_mean", "dice_std", "seeds"]


class TrainedModel:
    """Networks, optimizer states and the log of one training run"""

    def __init__(self, arm: Arm, seg: SegNetParams, approx: ApproxNetParams,
                 seg_opt: Adam, approx_opt: Adam, log: TrainLog):
        self.arm = arm
        self.seg = seg
        self.approx = approx
        self.seg_opt = seg_opt
        self.approx_opt = approx_opt
        self.log = log

    def checkpoint_arrays(self) -> Dict[str, np.ndarray]:
        arrays = snapshot(self.seg.tensors, "seg.")
        arrays.update(self.seg_opt.state_arrays("seg."))
        arrays.update(snapshot(self.approx.tensors, "approx."))
        arrays.update(self.approx_opt.state_arrays("approx."))
        arrays["meta.arm"] = np.array(ARM_CODES[self.arm])
        arrays["meta.depth"] = np.array(float(self.seg.depth))
        arrays["meta.base_channels"] = np.array(float(self.seg.base_channels))
        arrays["meta.approx_base_channels"] = np.array(float(self.approx.base_channels))
        return arrays

    @classmethod
    def from_checkpoint(cls, arrays: Dict[str, np.ndarray]) -> "TrainedModel":
        try:
            arm = {code: a for a, code in ARM_CODES.items()}[float(arrays["meta.arm"])]
            depth = int(arrays["meta.depth"])
            base = int(arrays["meta.base_channels"])
            approx_base = int(arrays["meta.approx_base_channels"])
        except KeyError as e:
            raise DataError(f"checkpoint is missing metadata {e}") from e
        seg = SegNetParams.init(np.random.default_rng(0), depth, base)
        approx = ApproxNetParams.init(np.random.default_rng(0), approx_base)
        try:
            restore(seg.tensors, arrays, "seg.")
            restore(approx.tensors, arrays, "approx.")
        except (KeyError, ValueError) as e:
            raise DataError(f"checkpoint does not match its metadata: {e}") from e
        seg_opt, approx_opt = Adam(), Adam()
        seg_opt.load_state_arrays(arrays, "seg.")
        approx_opt.load_state_arrays(arrays, "approx.")
        return cls(arm, seg, approx, seg_opt, approx_opt, TrainLog())


class TrainingService:
    def __init__(self, cfg: TrainConfig, progress: bool = True):
        self.cfg = cfg
        self.progress = progress
        self.evaluator = EvaluationService(cfg)
        self.logger = logging.getLogger(__name__)

    def _optimizer(self) -> Adam:
        cfg = self.cfg
        return Adam(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)

    def init_model(self, arm: Arm) -> TrainedModel:
        cfg = self.cfg
        seg = SegNetParams.init(np.random.default_rng([cfg.seed, 1]), cfg.depth, cfg.base_channels)
        approx = ApproxNetParams.init(np.random.default_rng([cfg.seed, 2]), cfg.approx_base_channels)
        return TrainedModel(Arm(arm), seg, approx, self._optimizer(), self._optimizer(), TrainLog())

    # Geometry sampled per outer step
    def training_star(self, sample: Sample, rng: np.random.Generator) -> StarPattern:
        """Star at a jittered center with a random rotation; falls back to the true center off the object."""
        cfg = self.cfg
        center = sample.center
        if cfg.center_jitter > 0:
            jittered = jitter_center(sample.center, sample.object_radius, cfg.center_jitter, rng)
            if foreground_at(sample.mask, np.asarray([jittered]))[0]:
                center = jittered
        rotation = rng.uniform(0.0, 2.0 * math.pi / cfg.num_lines) if cfg.rotate else 0.0
        return build_star(center, cfg.radius, cfg.num_lines, cfg.points_per_line, rotation)

    def dp_targets(self, g: np.ndarray) -> np.ndarray:
        """Smoothed DP indices (1-based) for a batch of warped maps [B,N,M]."""
        cfg = self.cfg
        v, _ = dp_solve_batch(orient_map(g, EdgePolarity(cfg.edge_polarity)), cfg.delta)
        return smooth_batch(v, cfg.window, cfg.points_per_line)

    def fit_surrogate(
        self,
        approx: ApproxNetParams,
        approx_opt: Adam,
        g: np.ndarray,
        targets: np.ndarray,
        steps: int,
    ) -> List[float]:
        """`steps` Adam updates of the surrogate on a fixed input g [B,1,N,M]; g is a constant here."""
        losses = []
        x = Tensor(g)
        for _ in range(steps):
            with ComputationRecord():
                loss = ad.cross_entropy_rows(approx_forward(approx, x), targets)
            ad.backward(loss)
            approx_opt.step(approx.tensors)
            ad.zero_grads(approx.tensors)
            losses.append(loss.item())
        return losses

    def edpcnn_step(
        self,
        batch: Sequence[Sample],
        seg: SegNetParams,
        approx: ApproxNetParams,
        seg_opt: Adam,
        approx_opt: Adam,
        rng: np.random.Generator,
    ) -> Tuple[List[float], float]:
        """Fit the surrogate around the current warped maps, then update the segmentation net through it."""
        cfg = self.cfg
        stars = [self.training_star(s, rng) for s in batch]
        p_gt = np.stack([mask_to_indices(star, s.mask).v for star, s in zip(stars, batch)])
        images = Tensor(np.stack([s.image for s in batch])[:, None])

        outer = ComputationRecord()
        with outer:
            g = warp_tensor(seg_forward(seg, images), stars)

        inner_losses: List[float] = []
        for _ in range(cfg.noise_samples):
            noisy = g.values + cfg.sigma * rng.standard_normal(g.shape)
            targets = self.dp_targets(noisy[:, 0])
            inner_losses.extend(self.fit_surrogate(approx, approx_opt, noisy, targets, cfg.inner_steps))

        # the surrogate is read but not updated here; its gradients are discarded
        with outer:
            outer_loss = ad.cross_entropy_rows(approx_forward(approx, g), p_gt)
        ad.backward(outer_loss)
        seg_opt.step(seg.tensors)
        ad.zero_grads(seg.tensors)
        ad.zero_grads(approx.tensors)
        return inner_losses, outer_loss.item()

    def baseline_step(self, batch: Sequence[Sample], seg: SegNetParams, seg_opt: Adam) -> float:
        images = Tensor(np.stack([s.image for s in batch])[:, None])
        masks = np.stack([s.mask for s in batch])[:, None]
        with ComputationRecord():
            loss = baseline_seg_loss(seg_forward(seg, images), masks)
        ad.backward(loss)
        seg_opt.step(seg.tensors)
        ad.zero_grads(seg.tensors)
        return loss.item()

    def train(self, train_samples: Sequence[Sample], val_samples: Sequence[Sample], arm: Arm) -> TrainedModel:
        """Train one arm, keeping the networks with the best validation Dice."""
        cfg = self.cfg
        arm = Arm(arm)
        if not train_samples or not val_samples:
            raise DataError("training needs nonempty train and val splits")

        model = self.init_model(arm)
        log = model.log
        if cfg.iters == 0:
            return model

        rng = np.random.default_rng([cfg.seed, 0])
        best: Optional[Dict[str, np.ndarray]] = None
        batch_size = min(cfg.batch, len(train_samples))
        bar = tqdm(range(1, cfg.iters + 1), desc=f"train {arm.value}", disable=not self.progress, leave=False)
        for iteration in bar:
            picks = rng.choice(len(train_samples), size=batch_size, replace=False)
            batch = [train_samples[i] for i in picks]
            try:
                if arm is Arm.EDPCNN:
                    inner, outer = self.edpcnn_step(batch, model.seg, model.approx, model.seg_opt, model.approx_opt, rng)
                    record = IterationRecord(iteration=iteration, inner_loss=float(np.mean(inner)), outer_loss=outer)
                else:
                    outer = self.baseline_step(batch, model.seg, model.seg_opt)
                    record = IterationRecord(iteration=iteration, outer_loss=outer)
            except NumericalError as e:
                last = log.iterations[-1] if log.iterations else None
                self.logger.error(
                    f"Numerical abort at iteration {iteration} ({arm.value}): {str(e)}; "
                    f"last losses: {last.model_dump() if last else 'none'}"
                )
                raise
            log.iterations.append(record)
            bar.set_postfix(loss=f"{outer:.4f}")

            if iteration % cfg.eval_every == 0 or iteration == cfg.iters:
                report = self.evaluator.evaluate(model.seg, val_samples, arm)
                log.evals.append(EvalRecord(
                    iteration=iteration,
                    dice=report.dice_mean,
                    assd=report.assd_mean,
                    hd=report.hd_mean,
                    failures=report.failures,
                ))
                self.logger.info(
                    f"[{arm.value}] iter {iteration}: val dice={report.dice_mean:.4f} "
                    f"assd={report.assd_mean} hd={report.hd_mean} failures={report.failures}"
                )
                if log.best_dice is None or report.dice_mean > log.best_dice:
                    log.best_dice = report.dice_mean
                    log.best_iteration = iteration
                    best = model.checkpoint_arrays()

        if best is not None:
            best_model = TrainedModel.from_checkpoint(best)
            model.seg, model.approx = best_model.seg, best_model.approx
            model.seg_opt, model.approx_opt = best_model.seg_opt, best_model.approx_opt
            for opt in (model.seg_opt, model.approx_opt):
                opt.lr, opt.beta1, opt.beta2, opt.eps = cfg.lr, cfg.beta1, cfg.beta2, cfg.eps
        return model

    def ablate(self, train_samples: Sequence[Sample], val_samples: Sequence[Sample], cfg: AblateConfig) -> pd.DataFrame:
        """Every arm at every telescopic training-set size; one row per (size, arm)."""
        rows = []
        for size in cfg.sizes:
            subset = telescopic_subset(list(train_samples), size, cfg.seed)
            for arm in cfg.arms:
                self.logger.info(f"Ablation: size={size} arm={Arm(arm).value}")
                model = self.train(subset, val_samples, arm)
                report = self.evaluator.evaluate(model.seg, val_samples, arm)
                rows.append({
                    "size": size,
                    "arm": Arm(arm).value,
                    "sigma": self.cfg.sigma,
                    "dice": report.dice_mean,
                    "dice_std": report.dice_std,
                    "assd": report.assd_mean,
                    "assd_std": report.assd_std,
                    "hd": report.hd_mean,
                    "hd_std": report.hd_std,
                    "failures": report.failures,
                })
        return pd.DataFrame(rows, columns=ABLATION_COLUMNS)

    def jitter_eval(
        self,
        seg: SegNetParams,
        val_samples: Sequence[Sample],
        fractions: Sequence[float],
        seeds: int,
        arm: Arm = Arm.EDPCNN,
    ) -> pd.DataFrame:
        """Mean and std across seeds of validation Dice with centers jittered by each fraction."""
        samples = list(val_samples)
        maps = self.evaluator.predict_maps(seg, [s.image for s in samples])
        rows = []
        for fraction in fractions:
            per_seed = []
            for s in range(seeds):
                rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, s]))
                centers = [jitter_center(x.center, x.object_radius, fraction, rng) for x in samples]
                per_seed.append(self.evaluator.score_maps(maps, samples, arm, centers).dice_mean)
            scores = np.array(per_seed)
            rows.append({
                "fraction": float(fraction),
                "dice_mean": float(scores.mean()),
                "dice_std": float(scores.std()),
                "seeds": seeds,
            })
            self.logger.info(f"Jitter {fraction:.2f}: dice={scores.mean():.4f} ± {scores.std():.4f}")
        return pd.DataFrame(rows, columns=JITTER_COLUMNS)
