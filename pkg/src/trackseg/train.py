"""SGD training loop for the exemplar/search multi-task network.

Schedule: the learning rate rises linearly from `lr_start` to `lr_peak`
over the warmup epochs, then decays logarithmically (linear in log space)
to exactly `lr_end` on the final step.

Each step processes one training pair drawn from a fixed pool (pairs are
sampled once up front, then cycled), computes the variant's weighted total
loss, and appends every loss component to a CSV.  The mask component is
the 63x63 head loss at the labeled positive cells plus a refinement term
at the single positive cell nearest the target center, whose 127x127
ground truth is the corresponding search-window crop.

A non-finite total loss aborts immediately with the step number and the
individual component values in the message.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import anchors as anch
from . import autodiff as ad
from . import config as cfgmod
from . import losses, model, synth

REFINE_SIDE = 127


class TrainDivergence(RuntimeError):
    """Raised when the loss stops being finite; carries diagnostics."""

    def __init__(self, step: int, components: dict):
        self.step = step
        self.components = dict(components)
        parts = ", ".join(f"{k}={v!r}" for k, v in self.components.items())
        super().__init__(
            f"non-finite loss at step {step}: {parts}")


# ---------------------------------------------------------------------------
# learning-rate schedule

def lr_at(step: int, total_steps: int, warmup_steps: int,
          lr_start: float, lr_peak: float, lr_end: float) -> float:
    """Piecewise schedule: linear warmup, then logarithmic decay.

    step 0 -> lr_start; step warmup_steps -> lr_peak; the final step
    (total_steps - 1) -> exactly lr_end.
    """
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if warmup_steps > 0 and step < warmup_steps:
        return lr_start + (lr_peak - lr_start) * step / warmup_steps
    last = total_steps - 1
    if last <= warmup_steps:
        return lr_end
    u = (step - warmup_steps) / (last - warmup_steps)
    return math.exp((1.0 - u) * math.log(lr_peak) + u * math.log(lr_end))


# ---------------------------------------------------------------------------
# optimizer

class SGD:
    """Classic momentum: v <- mu*v + g; p <- p - lr*v.

    `clip` bounds the global gradient norm (across all parameters) before
    the velocity update.  The live normalization in the model divides
    gradients by per-channel feature spread, so a transiently flat channel
    can amplify one step by orders of magnitude; the clip turns such spikes
    into a bounded, direction-preserving step.  0 disables."""

    def __init__(self, params: dict, momentum: float, clip: float = 0.0):
        self.params = dict(params)
        self.momentum = float(momentum)
        self.clip = float(clip)
        self.velocity = {name: np.zeros_like(t.data)
                         for name, t in self.params.items()}

    def grad_norm(self) -> float:
        total = 0.0
        for t in self.params.values():
            if t.grad is not None:
                total += float(np.sum(np.square(t.grad, dtype=np.float64)))
        return math.sqrt(total)

    def step(self, lr: float) -> None:
        scale = 1.0
        if self.clip > 0.0:
            norm = self.grad_norm()
            if norm > self.clip:
                scale = self.clip / norm
        for name, t in self.params.items():
            if t.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            if scale != 1.0:
                v += np.float32(scale) * t.grad
            else:
                v += t.grad
            t.data -= np.float32(lr) * v

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


# ---------------------------------------------------------------------------
# per-pair labels (precomputed once; the pair pool is fixed)

@dataclass
class PairExample:
    pair: synth.TrainingPair
    labels: losses.RowLabels
    refine_cell: tuple
    refine_target: np.ndarray     # (127*127,) float32 in {-1, +1}
    z: ad.Tensor = field(default=None)
    x: ad.Tensor = field(default=None)

    def __post_init__(self):
        self.z = ad.tensor(self.pair.z)
        self.x = ad.tensor(self.pair.x)


def _center_cell(box) -> tuple:
    cx, cy = box.center
    return ((cy - anch.CENTER_OFFSET) / anch.STRIDE,
            (cx - anch.CENTER_OFFSET) / anch.STRIDE)


def label_pair(pair: synth.TrainingPair, variant: str,
               anchor_grid: np.ndarray | None, cfg: dict) -> losses.RowLabels:
    if variant == "3b":
        return losses.label_rows_3b(anchor_grid, pair.box, gt_mask=pair.mask,
                                    pos_thresh=cfg["pos_iou_thresh"])
    return losses.label_rows_2b(_center_cell(pair.box),
                                radius=cfg["label_radius"],
                                gt_mask=pair.mask)


def _nearest_positive_cell(labels: losses.RowLabels, center: tuple) -> tuple:
    cells = labels.positive_cells()
    ci, cj = center
    dists = [(i - ci) ** 2 + (j - cj) ** 2 for i, j in cells]
    return cells[int(np.argmin(dists))]


def make_example(pair: synth.TrainingPair, variant: str,
                 anchor_grid, cfg: dict) -> PairExample | None:
    """Labels + refinement target for one pair; None if no positive cells."""
    labels = label_pair(pair, variant, anchor_grid, cfg)
    cells = labels.positive_cells()
    if not cells:
        return None
    cell = _nearest_positive_cell(labels, _center_cell(pair.box))
    target = losses.build_mask_targets(pair.mask, [cell],
                                       side=REFINE_SIDE)[cell]
    return PairExample(pair=pair, labels=labels, refine_cell=cell,
                       refine_target=target.astype(np.float32).ravel())


def prepare_examples(sequences, cfg: dict, rng: np.random.Generator,
                     anchor_grid) -> list:
    """Fixed training pool: `train_pairs` examples cycled over sequences.

    Pairs whose crop yields an empty mask or no positive cells are
    resampled (bounded retries keep determinism — the rng state advances
    the same way on every run).
    """
    n = cfg["train_pairs"]
    out = []
    for i in range(n):
        seq = sequences[i % len(sequences)]
        ex = None
        for _ in range(64):
            try:
                pair = synth.sample_pair(seq, cfg["jitter"], rng)
            except ValueError:
                continue
            ex = make_example(pair, cfg["variant"], anchor_grid, cfg)
            if ex is not None:
                break
        if ex is None:
            raise ValueError(
                f"could not sample a usable training pair from sequence "
                f"{i % len(sequences)} after 64 tries")
        out.append(ex)
    return out


# ---------------------------------------------------------------------------
# loss for one example

def example_loss(mcfg: model.ModelConfig, params: dict, ex: PairExample,
                 weights: losses.LossWeights, mode: str):
    """(total loss tensor, {component name: float}) for one pair."""
    feats = model.forward_features(mcfg, params, ex.z, ex.x)
    cells = ex.labels.positive_cells()

    m63 = losses.mask_loss(model.mask_logits_at(mcfg, params, feats, cells),
                           ex.labels, mode=mode)
    r = model.refine_logits_at(mcfg, params, feats, ex.refine_cell)
    refine = ad.tmean(ad.softplus(ad.mul(
        ad.reshape(r, (REFINE_SIDE * REFINE_SIDE,)),
        ad.const(-ex.refine_target))))
    comps = {"mask": ad.add(m63, refine)}

    if mcfg.variant == "3b":
        comps["score"] = losses.score_loss(
            model.score_logits(mcfg, params, feats), ex.labels)
        comps["box"] = losses.box_loss(
            model.box_deltas(mcfg, params, feats), ex.labels)
    else:
        comps["sim"] = losses.sim_loss(
            model.score_logits(mcfg, params, feats), ex.labels)

    total = losses.total_loss(mcfg.variant, comps, weights)
    values = {"mask63": float(m63.data), "refine": float(refine.data)}
    for name in comps:
        if name != "mask":
            values[name] = float(comps[name].data)
    values["total"] = float(total.data)
    return total, values


# ---------------------------------------------------------------------------
# evaluation on the training pool (overfit measurement)

def _select_cell(mcfg: model.ModelConfig, score_data: np.ndarray) -> tuple:
    """Argmax response cell from raw score-head output (row-major ties ->
    lowest index).  3b: best positive-vs-negative margin over anchors."""
    if mcfg.variant == "3b":
        k = mcfg.k
        margin = (score_data[k:] - score_data[:k]).max(axis=0)
    else:
        margin = score_data[0]
    flat = int(np.argmax(margin))
    return flat // margin.shape[1], flat % margin.shape[1]


def evaluate_examples(mcfg: model.ModelConfig, params: dict,
                      examples: list, mode: str = "normalized") -> dict:
    """Mean mask loss (63x63 head, Eq.-style logistic) and mean mask IoU.

    IoU is end-to-end: the refined 127x127 mask at the argmax-score cell,
    binarized at probability 0.5, against the ground-truth window at that
    cell.
    """
    mask_losses, ious = [], []
    for ex in examples:
        feats = model.forward_features(mcfg, params, ex.z, ex.x)
        cells = ex.labels.positive_cells()
        m63 = losses.mask_loss(
            model.mask_logits_at(mcfg, params, feats, cells),
            ex.labels, mode=mode)
        mask_losses.append(float(m63.data))

        i, j = _select_cell(mcfg, model.score_logits(mcfg, params,
                                                     feats).data)
        r = model.refine_logits_at(mcfg, params, feats, (i, j))
        pred = r.data > 0.0
        gt = ex.pair.mask[anch.STRIDE * i:anch.STRIDE * i + REFINE_SIDE,
                          anch.STRIDE * j:anch.STRIDE * j + REFINE_SIDE]
        union = np.logical_or(pred, gt).sum()
        inter = np.logical_and(pred, gt).sum()
        ious.append(1.0 if union == 0 else inter / union)
    return {"final_mask_loss": float(np.mean(mask_losses)),
            "mean_mask_iou": float(np.mean(ious))}


def batch_gradients(mcfg, params: dict, batch, weights, mode: str,
                    step: int) -> dict:
    """Accumulate the mean gradient of `batch` into the parameters.

    One backward pass per example, gradients summed in place, then scaled
    by 1/len(batch); returns the mean loss components.  A non-finite total
    on any example raises TrainDivergence with that example's components.
    """
    sums = None
    for ex in batch:
        with ad.record():
            total, values = example_loss(mcfg, params, ex, weights, mode)
            if not math.isfinite(values["total"]):
                raise TrainDivergence(step, values)
            ad.backward(total)
        sums = values if sums is None else \
            {k: sums[k] + v for k, v in values.items()}
    if len(batch) > 1:
        inv = np.float32(1.0 / len(batch))
        for t in params.values():
            if t.grad is not None:
                t.grad *= inv
        sums = {k: v / len(batch) for k, v in sums.items()}
    return sums


def prior_mask_bias(params: dict, examples) -> None:
    """Start the mask output at the per-pixel target prior.

    With a zero bias the head's first few hundred steps are spent learning
    the dataset-average mask (every pixel's base rate) before any
    per-target structure can emerge.  Setting the output bias to the prior
    log-odds, computed over every labeled positive cell in the training
    pool, hands that average over for free and leaves the whole step
    budget for structure.  Mutates params in place."""
    acc, n = None, 0
    for ex in examples:
        for cell in ex.labels.positive_cells():
            t = ex.labels.mask_targets[cell].reshape(-1).astype(np.float64)
            acc = t if acc is None else acc + t
            n += 1
    if n == 0:
        return
    p = np.clip((acc / n + 1.0) / 2.0, 1e-3, 1.0 - 1e-3)
    params["mask.c6.b"].data[:] = np.log(p / (1.0 - p)).astype(np.float32)


# ---------------------------------------------------------------------------
# the loop

def _csv_columns(variant: str) -> list:
    extra = ["score", "box"] if variant == "3b" else ["sim"]
    return ["step", "lr", "total", "mask63", "refine"] + extra


def train(cfg: dict, sequences, out_dir: str, progress=None) -> dict:
    """Run the configured training; returns the final metrics dict.

    Writes into out_dir: loss.csv (per-step components), checkpoint.ckpt,
    metrics.txt (machine-readable `name value` lines).
    """
    os.makedirs(out_dir, exist_ok=True)
    mcfg = cfgmod.model_config(cfg)
    weights = cfgmod.loss_weights(cfg)
    anchor_grid = None
    if cfg["variant"] == "3b":
        anchor_grid = anch.generate_anchors(cfgmod.anchor_config(cfg),
                                            anch.RESPONSE, anch.STRIDE)

    ss = np.random.SeedSequence(cfg["seed"])
    r_init, r_pairs = (np.random.default_rng(s) for s in ss.spawn(2))

    examples = prepare_examples(sequences, cfg, r_pairs, anchor_grid)
    params = model.init_model(mcfg, r_init)
    prior_mask_bias(params, examples)

    opt = SGD(model.trainable(params), cfg["momentum"], cfg["clip_norm"])
    total_steps = cfg["epochs"] * cfg["steps_per_epoch"]
    warmup_steps = cfg["warmup_epochs"] * cfg["steps_per_epoch"]
    columns = _csv_columns(cfg["variant"])

    csv_path = os.path.join(out_dir, "loss.csv")
    with open(csv_path, "w", encoding="utf-8") as csv:
        csv.write(",".join(columns) + "\n")
        bsz = cfg["batch_size"]
        for step in range(total_steps):
            batch = [examples[(step * bsz + b) % len(examples)]
                     for b in range(bsz)]
            lr = lr_at(step, total_steps, warmup_steps,
                       cfg["lr_start"], cfg["lr_peak"], cfg["lr_end"])
            values = batch_gradients(mcfg, params, batch, weights,
                                     cfg["mask_loss_mode"], step)
            opt.step(lr)
            opt.zero_grad()
            row = {"step": step, "lr": lr, **values}
            csv.write(",".join(repr(row[c]) if isinstance(row[c], float)
                               else str(row[c]) for c in columns) + "\n")
            if progress is not None and (step + 1) % 100 == 0:
                progress(step + 1, total_steps, values)

    ckpt_path = os.path.join(out_dir, "checkpoint.ckpt")
    model.save_params(ckpt_path, params)

    metrics = evaluate_examples(mcfg, params, examples)
    metrics["steps"] = total_steps
    with open(os.path.join(out_dir, "metrics.txt"), "w",
              encoding="utf-8") as f:
        for name in sorted(metrics):
            f.write(f"{name} {metrics[name]!r}\n")
    return metrics
