"""DP-aware training objectives.

All terms are means over every scalar element (pixels x channels).
"""

from __future__ import annotations

from dataclasses import dataclass

from .tensor import Tensor, add, mse, scale, sub, weighted_sum


@dataclass(frozen=True)
class LossWeights:
    """Weights of the view-MSE, sum-consistency and difference terms in step 2."""

    lambda1: float = 0.8
    lambda2: float = 0.5
    lambda3: float = 0.5

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")


def loss_c(combined: Tensor, left_pred: Tensor, right_pred: Tensor) -> Tensor:
    """Penalise predicted views that do not add up to the combined input."""
    return mse(combined, add(left_pred, right_pred))


def loss_d(left: Tensor, right: Tensor, left_pred: Tensor, right_pred: Tensor) -> Tensor:
    """Penalise a wrong left-minus-right difference (carries front/back sign)."""
    return mse(sub(left, right), sub(left_pred, right_pred))


def loss_mse_views(left: Tensor, right: Tensor, left_pred: Tensor, right_pred: Tensor) -> Tensor:
    """Average of the two per-view MSEs."""
    return scale(add(mse(left, left_pred), mse(right, right_pred)), 0.5)


def loss_st1(left, right, left_pred, right_pred, combined,
             with_dp: bool = True) -> tuple[Tensor, dict[str, float]]:
    """First-step objective: view MSE + L_C + L_D (unit weights).

    ``with_dp=False`` keeps only the view MSE; the other two terms are
    still reported.
    """
    terms = {
        "l_mse_lr": loss_mse_views(left, right, left_pred, right_pred),
        "l_c": loss_c(combined, left_pred, right_pred),
        "l_d": loss_d(left, right, left_pred, right_pred),
    }
    dp = 1.0 if with_dp else 0.0
    total = weighted_sum(list(terms.values()), [1.0, dp, dp])
    return total, {k: t.item() for k, t in terms.items()}


def loss_st2(sharp, sharp_pred, left, right, left_pred, right_pred, combined,
             w: LossWeights = LossWeights()) -> tuple[Tensor, dict[str, float]]:
    """Second-step objective: deblurring MSE plus weighted DP terms."""
    terms = {
        "l_mse_s": mse(sharp, sharp_pred),
        "l_mse_lr": loss_mse_views(left, right, left_pred, right_pred),
        "l_c": loss_c(combined, left_pred, right_pred),
        "l_d": loss_d(left, right, left_pred, right_pred),
    }
    total = weighted_sum(list(terms.values()), [1.0, w.lambda1, w.lambda2, w.lambda3])
    return total, {k: t.item() for k, t in terms.items()}
