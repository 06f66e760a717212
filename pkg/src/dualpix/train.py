"""Adam, the two-step training protocol, and evaluation.

Step 1 trains the view decoders (and the shared encoder) with the sharp
decoder frozen; step 2 unfreezes everything and optimises the deblurring
MSE jointly with the weighted DP terms. Learning rates halve every
``halve_every_epochs`` epochs. Every run is deterministic given its seed:
the epoch's patch order comes from ``default_rng([seed, epoch])``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .losses import LossWeights, loss_st1, loss_st2
from .metrics import MetricsReport, mae, psnr, ssim
from .model import MdpModel, load_checkpoint, save_checkpoint
from .scenes import DatasetRecord, extract_patches
from .tensor import Tape, Tensor, mse

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "lr", "l_mse_s", "l_mse_lr", "l_c", "l_d", "total", "psnr_s", "psnr_lr")
DEFAULT_LR = {1: 3e-4, 2: 6e-4}
DEFAULT_EPOCHS = {1: 12, 2: 16}
# keeps the two desk steps inside a quarter hour on one core
DESK_PATCHES_PER_EPOCH = 200


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    step: int = 1
    lr_init: float | None = None
    halve_every_epochs: int = 4
    epochs: int | None = None
    batch: int = 8
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    patch: int = 64
    patch_stride: int = 32
    patches_per_epoch: int | None = None
    # step 1 only: False drops L_C and L_D (ablation)
    dp_losses: bool = True

    def __post_init__(self):
        if self.step not in (1, 2):
            raise ValueError(f"step must be 1 or 2, got {self.step}")
        if self.lr_init is None:
            self.lr_init = DEFAULT_LR[self.step]
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS[self.step]
        if self.lr_init <= 0:
            raise ValueError("lr_init must be positive")
        if self.epochs < 1 or self.batch < 1 or self.halve_every_epochs < 1:
            raise ValueError("epochs, batch and halve_every_epochs must be >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.lr_init * 0.5 ** (epoch // self.halve_every_epochs)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m/{k}": a for k, a in self.m.items()}
        out.update({f"adam.v/{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], t: int) -> "AdamState":
        st = cls(t=t)
        for key, a in arrays.items():
            kind, _, name = key.partition("/")
            if kind == "adam.m":
                st.m[name] = a
            elif kind == "adam.v":
                st.v[name] = a
        return st


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update of ``params`` (new arrays are assigned)."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name}; step aborted")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name] = m.astype(np.float32)
        state.v[name] = v.astype(np.float32)
        step = lr * (state.m[name] / c1) / (np.sqrt(state.v[name] / c2) + state.eps)
        p.data = (p.data - step).astype(np.float32)


# ---------------------------------------------------------------------------
# history


@dataclass
class TrainHistory:
    rows: list[dict[str, float]] = field(default_factory=list)

    def append(self, **row) -> None:
        self.rows.append(row)

    def column(self, key: str) -> list[float]:
        return [r[key] for r in self.rows]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_COLUMNS)
            for r in self.rows:
                w.writerow(["" if r.get(k) is None else repr(r[k]) for k in HISTORY_COLUMNS])

    @classmethod
    def from_csv(cls, path) -> "TrainHistory":
        h = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                h.rows.append({k: (int(v) if k == "epoch" else (float(v) if v else None)) for k, v in rec.items()})
        return h


# ---------------------------------------------------------------------------
# data


@dataclass
class _PatchPool:
    combined: np.ndarray
    left: np.ndarray
    right: np.ndarray
    sharp: np.ndarray | None

    def __len__(self) -> int:
        return len(self.combined)

    def batch(self, idx) -> tuple[Tensor, Tensor, Tensor, Tensor | None]:
        s = None if self.sharp is None else Tensor(self.sharp[idx])
        return Tensor(self.combined[idx]), Tensor(self.left[idx]), Tensor(self.right[idx]), s


def _chw(a: np.ndarray) -> np.ndarray:
    return a.transpose(2, 0, 1)


def build_pool(records: Sequence[DatasetRecord], patch: int, stride: int, need_sharp: bool) -> _PatchPool:
    if not records:
        raise ValueError("training dataset is empty")
    patches = [p for rec in records for p in extract_patches(rec, patch, stride)]
    has_sharp = all(p.sharp is not None for p in patches)
    if need_sharp and not has_sharp:
        raise ValueError("step 2 needs records with sharp ground truth")

    def stack(key):
        return np.stack([_chw(getattr(p, key)) for p in patches]).astype(np.float32)

    return _PatchPool(stack("combined"), stack("left"), stack("right"), stack("sharp") if has_sharp else None)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model, dataset: Sequence[DatasetRecord], full: bool = True) -> dict[str, MetricsReport]:
    """Average metrics over ``dataset`` for deblurring and view synthesis.

    The synthesis score of a record is the mean over its two views.
    ``full=False`` skips SSIM/MAE (cheap per-epoch validation).
    """
    if not dataset:
        raise ValueError("evaluation split is empty")
    deblur, dp = [], []
    for rec in dataset:
        lp, rp, sp = model.predict(rec.combined)
        if full:
            deblur.append((psnr(sp, rec.sharp), ssim(sp, rec.sharp), mae(sp, rec.sharp)))
            dp.append([(psnr(lp, rec.left) + psnr(rp, rec.right)) / 2,
                       (ssim(lp, rec.left) + ssim(rp, rec.right)) / 2,
                       (mae(lp, rec.left) + mae(rp, rec.right)) / 2])
        else:
            deblur.append((psnr(sp, rec.sharp), math.nan, math.nan))
            dp.append(((psnr(lp, rec.left) + psnr(rp, rec.right)) / 2, math.nan, math.nan))
    n = len(dataset)
    return {task: MetricsReport(*map(float, np.mean(np.array(v), axis=0)), n=n)
            for task, v in (("deblur", deblur), ("dp", dp))}


def identity_baseline(dataset: Sequence[DatasetRecord]) -> MetricsReport:
    """Metrics of the blurry input itself against the sharp target."""
    vals = [(psnr(r.combined, r.sharp), ssim(r.combined, r.sharp), mae(r.combined, r.sharp)) for r in dataset]
    return MetricsReport(*map(float, np.mean(np.array(vals), axis=0)), n=len(vals))


# ---------------------------------------------------------------------------
# training


def _checkpoint_name(step: int, epoch: int) -> str:
    return f"step{step}_epoch{epoch:03d}.mdp"


def _train(model: MdpModel, dataset, cfg: TrainConfig, eval_dataset=None, out_dir=None,
           resume: bool = False) -> TrainHistory:
    step = cfg.step
    pool = build_pool(dataset, cfg.patch, cfg.patch_stride, need_sharp=(step == 2))
    per_epoch = len(pool) if cfg.patches_per_epoch is None else min(cfg.patches_per_epoch, len(pool))
    history = TrainHistory()
    state = AdamState()
    start = 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        last = out / f"step{step}_last.mdp"
        if resume and last.exists():
            loaded, extra, meta = load_checkpoint(last)
            for name, p in model.params.items():
                p.data = loaded.params[name].data
            state = AdamState.from_arrays(extra, int(meta["adam_t"]))
            start = int(meta["epoch"]) + 1
            hist_path = out / f"history_step{step}.csv"
            if hist_path.exists():
                history.rows = [r for r in TrainHistory.from_csv(hist_path).rows if r["epoch"] < start]
            log.info("resuming step %d at epoch %d", step, start)

    for epoch in range(start, cfg.epochs):
        lr = cfg.lr_at(epoch)
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(pool))[:per_epoch]
        sums = {k: 0.0 for k in ("l_mse_s", "l_mse_lr", "l_c", "l_d", "total")}
        for b in range(0, len(order), cfg.batch):
            idx = np.sort(order[b : b + cfg.batch])
            c, l, r, s = pool.batch(idx)
            with Tape() as tape:
                lp, rp, sp = model.forward(c)
                if step == 1:
                    total, terms = loss_st1(l, r, lp, rp, c, with_dp=cfg.dp_losses)
                    if s is not None:
                        terms["l_mse_s"] = mse(s, sp).item()
                else:
                    total, terms = loss_st2(s, sp, l, r, lp, rp, c, cfg.weights)
            model.zero_grad()
            tape.backward(total)
            trainable = model.trainable()
            grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in trainable.items()}
            adam_step(trainable, grads, state, lr)
            k = len(idx)
            sums["total"] += total.item() * k
            for key, val in terms.items():
                sums[key] += val * k
        row = {"epoch": epoch, "lr": lr}
        for key, val in sums.items():
            row[key] = val / len(order)
        if step == 1 and pool.sharp is None:
            row["l_mse_s"] = None
        if eval_dataset:
            ev = evaluate(model, eval_dataset, full=False)
            row["psnr_s"], row["psnr_lr"] = ev["deblur"].psnr, ev["dp"].psnr
        else:
            row["psnr_s"] = row["psnr_lr"] = None
        for key in ("l_mse_s", "l_mse_lr", "l_c", "l_d", "total"):
            if row[key] is not None and not math.isfinite(row[key]):
                raise NonFiniteGradientError(f"epoch {epoch}: loss term {key} is not finite")
        history.rows.append(row)
        log.info("step %d epoch %d lr %.2e total %.5f psnr_s %s", step, epoch, lr, row["total"], row["psnr_s"])
        if out is not None:
            meta = {"step": step, "epoch": epoch, "adam_t": state.t}
            save_checkpoint(out / _checkpoint_name(step, epoch), model, state.arrays(), meta)
            save_checkpoint(out / f"step{step}_last.mdp", model, state.arrays(), meta)
            history.to_csv(out / f"history_step{step}.csv")
    return history


def train_step1(model: MdpModel, dataset, cfg: TrainConfig | None = None, eval_dataset=None,
                out_dir=None, resume: bool = False) -> TrainHistory:
    """View-synthesis training with the sharp decoder frozen."""
    cfg = cfg or TrainConfig(step=1)
    if cfg.step != 1:
        raise ValueError("train_step1 needs a step-1 config")
    model.set_frozen("dec_s", True)
    try:
        return _train(model, dataset, cfg, eval_dataset, out_dir, resume)
    finally:
        model.set_frozen("dec_s", False)


def train_step2(model: MdpModel, dataset, cfg: TrainConfig | None = None, eval_dataset=None,
                out_dir=None, resume: bool = False) -> TrainHistory:
    """Joint deblurring + view synthesis fine-tuning, all branches trainable."""
    cfg = cfg or TrainConfig(step=2)
    if cfg.step != 2:
        raise ValueError("train_step2 needs a step-2 config")
    for branch in model.frozen:
        model.set_frozen(branch, False)
    return _train(model, dataset, cfg, eval_dataset, out_dir, resume)
