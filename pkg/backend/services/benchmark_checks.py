"""Threshold checks over the benchmark tables (ablation, noise study, jitter study)."""

from typing import List

import pandas as pd

from shared.models import Arm, CheckResult

MIN_GAP_OVER_UNET = 0.05
MIN_DICE_SMALLEST = 0.85
GAP_SLACK = 0.02
MIN_NOISE_GAIN = 0.02
MAX_JITTER_DROP = 0.03
MAX_JITTER_STD = 0.02


def _at_least(name: str, value: float, bound: float) -> CheckResult:
    return CheckResult(name=name, value=float(value), bound=bound, passed=bool(value >= bound))


def _at_most(name: str, value: float, bound: float) -> CheckResult:
    return CheckResult(name=name, value=float(value), bound=bound, passed=bool(value <= bound))


def mean_dice(table: pd.DataFrame) -> pd.DataFrame:
    """Seed-averaged Dice as a size x arm grid."""
    return table.groupby(["size", "arm"])["dice"].mean().unstack("arm").sort_index()


def ordering_checks(table: pd.DataFrame) -> List[CheckResult]:
    """EDPCNN leads both baselines at the smallest size, and its lead narrows as data grows."""
    grid = mean_dice(table)
    missing = {a.value for a in Arm} - set(grid.columns)
    if missing:
        raise ValueError(f"ablation table lacks arms {sorted(missing)}")

    smallest = grid.index[0]
    edpcnn = grid[Arm.EDPCNN.value]
    results = [
        _at_least(f"edpcnn - unet at size {smallest}",
                  edpcnn[smallest] - grid[Arm.UNET.value][smallest], MIN_GAP_OVER_UNET),
        _at_least(f"edpcnn - unet+dp at size {smallest}",
                  edpcnn[smallest] - grid[Arm.UNET_DP.value][smallest], 0.0),
        _at_least(f"edpcnn dice at size {smallest}", edpcnn[smallest], MIN_DICE_SMALLEST),
    ]
    for baseline in (Arm.UNET, Arm.UNET_DP):
        gap = edpcnn - grid[baseline.value]
        for small, large in zip(grid.index[:-1], grid.index[1:]):
            # growth of the gap from one size to the next, allowed up to the slack
            results.append(_at_most(f"edpcnn - {baseline.value} growth {small}->{large}",
                                    gap[large] - gap[small], GAP_SLACK))
    return results


def noise_check(with_noise: pd.DataFrame, without_noise: pd.DataFrame) -> CheckResult:
    """Exploration noise pays off for EDPCNN at the smallest training size."""
    noisy = mean_dice(with_noise)
    quiet = mean_dice(without_noise)
    size = noisy.index[0]
    gain = noisy[Arm.EDPCNN.value][size] - quiet[Arm.EDPCNN.value][size]
    return _at_least(f"noise gain at size {size}", gain, MIN_NOISE_GAIN)


def jitter_checks(table: pd.DataFrame, worst_fraction: float = 0.2) -> List[CheckResult]:
    """Small center jitter barely moves Dice, and the spread across seeds stays tight."""
    by_fraction = table.set_index("fraction")
    if 0.0 not in by_fraction.index or worst_fraction not in by_fraction.index:
        raise ValueError(f"jitter table needs fractions 0 and {worst_fraction}")
    drop = by_fraction["dice_mean"][0.0] - by_fraction["dice_mean"][worst_fraction]
    results = [_at_most(f"dice drop at jitter {worst_fraction}", drop, MAX_JITTER_DROP)]
    for fraction, std in by_fraction["dice_std"].items():
        if fraction <= worst_fraction:
            results.append(_at_most(f"dice std at jitter {fraction}", std, MAX_JITTER_STD))
    return results

