"""Small, equal-budget ablations of the training objective and of stitching.

Three objective variants share one architecture and one optimiser budget:

``multi_dp``
    the full two-step recipe, view MSE plus the sum and difference terms;
``multi_plain``
    the same two steps with the sum and difference terms switched off;
``single``
    deblurring only: the whole budget is spent on the sharp-image MSE, so
    the view decoders receive no supervision of their own.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from statistics import median
from typing import Sequence

from .losses import LossWeights
from .model import STITCH_MODES, MdpConfig, build, param_count
from .scenes import DatasetRecord
from .train import TrainConfig, evaluate, train_step1, train_step2

log = logging.getLogger(__name__)

VARIANTS = ("multi_dp", "multi_plain", "single")


@dataclass(frozen=True)
class Budget:
    """Everything that must match between runs being compared."""

    depth: int = 3
    base_channels: int = 16
    patch: int = 64
    batch: int = 8
    epochs1: int = 12
    epochs2: int = 16
    patches_per_epoch: int | None = None
    patch_stride: int = 32
    halve_every: int = 4

    def model_config(self, seed: int, stitch: str = "middle") -> MdpConfig:
        return MdpConfig(depth=self.depth, base_channels=self.base_channels, stitch=stitch,
                         patch=self.patch, seed=seed)

    def train_config(self, step: int, seed: int, epochs: int | None = None, **kw) -> TrainConfig:
        return TrainConfig(step=step, seed=seed, batch=self.batch, patch=self.patch,
                           patch_stride=self.patch_stride, patches_per_epoch=self.patches_per_epoch,
                           halve_every_epochs=self.halve_every,
                           epochs=epochs or (self.epochs1 if step == 1 else self.epochs2), **kw)


@dataclass
class RunResult:
    variant: str
    seed: int
    stitch: str
    params: int
    psnr: float
    seconds: float


def train_variant(variant: str, train: Sequence[DatasetRecord], test: Sequence[DatasetRecord],
                  seed: int, budget: Budget = Budget(), stitch: str = "middle") -> RunResult:
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    t0 = time.perf_counter()
    model = build(budget.model_config(seed, stitch))
    if variant == "single":
        cfg = budget.train_config(2, seed, epochs=budget.epochs1 + budget.epochs2, weights=LossWeights(0, 0, 0))
        train_step2(model, train, cfg)
    else:
        plain = variant == "multi_plain"
        train_step1(model, train, budget.train_config(1, seed, dp_losses=not plain))
        weights = LossWeights(lambda2=0.0, lambda3=0.0) if plain else LossWeights()
        train_step2(model, train, budget.train_config(2, seed, weights=weights))
    score = evaluate(model, test, full=False)["deblur"].psnr
    seconds = time.perf_counter() - t0
    log.info("%s seed %d stitch %s: %.3f dB in %.0f s", variant, seed, stitch, score, seconds)
    return RunResult(variant, seed, stitch, param_count(model), score, seconds)


@dataclass
class LossAblation:
    runs: list[RunResult] = field(default_factory=list)

    def scores(self, variant: str) -> list[float]:
        return [r.psnr for r in self.runs if r.variant == variant]

    def median(self, variant: str) -> float:
        return median(self.scores(variant))

    def margins(self) -> dict[str, float]:
        """Median of ``multi_dp`` minus the median of each other variant."""
        best = self.median("multi_dp")
        return {v: best - self.median(v) for v in VARIANTS if v != "multi_dp"}

    def table(self) -> str:
        lines = ["variant,seed,psnr,seconds"]
        lines += [f"{r.variant},{r.seed},{r.psnr:.4f},{r.seconds:.1f}" for r in self.runs]
        return "\n".join(lines)


def run_loss_ablation(train, test, seeds=(0, 1, 2), budget: Budget = Budget(),
                      variants=VARIANTS) -> LossAblation:
    result = LossAblation()
    for seed in seeds:
        for variant in variants:
            result.runs.append(train_variant(variant, train, test, seed, budget))
    return result


def run_stitch_ablation(train, test, seed: int = 0, budget: Budget = Budget(),
                        known: Sequence[RunResult] = ()) -> dict[str, RunResult]:
    """Train the full recipe once per stitching mode.

    ``known`` may hold finished ``multi_dp`` runs so they are not repeated.
    """
    out = {}
    for stitch in STITCH_MODES:
        done = [r for r in known if r.variant == "multi_dp" and r.seed == seed and r.stitch == stitch]
        out[stitch] = done[0] if done else train_variant("multi_dp", train, test, seed, budget, stitch)
    return out

