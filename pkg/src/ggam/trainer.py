"""Training loop with cosine-annealed momentum SGD and the guidance pass.

Each batch runs one retained forward per sample; when guidance is active the
predicted-class scores are backpropagated first to extract per-sample channel
importances (then all gradients are cleared), after which the combined
cross-entropy + weighted guidance loss drives the parameter update.  Head
parameters (attention FCs + classifier) use the base rate, backbone kernels a
scaled-down rate.  Everything is seeded; equal seeds give identical runs.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from . import guidance as G
from .data import batches
from .model import Model, build, ModelConfig

__all__ = [
    "Hyperparams",
    "EpochMetrics",
    "RunMetrics",
    "GridRow",
    "SweepRow",
    "TrainingDiverged",
    "cosine_lr",
    "sgd_step",
    "train",
    "evaluate",
    "localization_score",
    "ablation_grid",
    "lambda_sweep",
    "derive_seed",
]


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the message names the batch and the term."""


@dataclass(frozen=True)
class Hyperparams:
    epochs: int = 60
    batch_size: int = 16
    lr: float = 0.1
    backbone_lr_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lam: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("hyperparams: epochs and batch size must be >= 1")
        if min(self.lr, self.backbone_lr_factor, self.weight_decay, self.lam) < 0:
            raise ValueError("hyperparams: rates, decay, and lambda must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"hyperparams: momentum must be in [0, 1), got {self.momentum}")


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    ce: float
    ggam: float
    total: float
    train_acc: float
    test_acc: float
    localization: float


@dataclass
class RunMetrics:
    epochs: list = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint: str | None = None


def derive_seed(master, *key) -> int:
    """Stable fan-out of one master seed into independent substream seeds."""
    seq = np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in key))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def cosine_lr(t, total, base) -> float:
    """Half-cosine decay from base at t=0 to 0 at t=total."""
    if not 0 <= t <= total:
        raise ValueError(f"cosine_lr: epoch {t} outside [0, {total}]")
    return 0.5 * base * (1.0 + math.cos(math.pi * t / total))


def sgd_step(params, grads, state, lr, momentum, weight_decay) -> None:
    """Momentum step: v <- m*v + g + wd*theta; theta <- theta - lr*v.

    ``state`` is a mutable list of velocity arrays, updated in place.
    """
    if not len(params) == len(grads) == len(state):
        raise ValueError("sgd_step: params, grads, and state lengths differ")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape or state[i].shape != p.data.shape:
            raise ValueError(f"sgd_step: shape mismatch at parameter {i}")
        v = momentum * state[i] + g + weight_decay * p.data
        state[i] = v
        p.data = p.data - lr * v


def _finite_or_raise(value, term, epoch, batch_index):
    if not math.isfinite(value):
        raise TrainingDiverged(
            f"non-finite {term} ({value}) in epoch {epoch}, batch {batch_index}"
        )


def _split_metrics(model, split):
    """Accuracy and mean localization of one split in a single sweep."""
    correct = 0
    loc_sum = 0.0
    for sample in split:
        trace = model.forward(sample.image, retain_graph=False)
        correct += trace.predicted == sample.label
        loc_sum += _mask_overlap(trace.spatial_map.data, sample.part_mask)
    return correct / len(split), loc_sum / len(split)


def _mask_overlap(spatial, mask) -> float:
    wf, hf = spatial.shape
    w, h = mask.shape
    if w % wf or h % hf:
        raise ValueError(f"mask {w}x{h} not divisible by spatial grid {wf}x{hf}")
    small = mask.astype(np.float64).reshape(wf, w // wf, hf, h // hf).mean(axis=(1, 3))
    return float(np.sum(spatial * small))


def evaluate(model: Model, split) -> float:
    """Fraction of samples whose predicted class matches the label."""
    if not split:
        raise ValueError("evaluate: empty split")
    return sum(model.predict(s.image) == s.label for s in split) / len(split)


def localization_score(model: Model, split) -> float:
    """Mean spatial-attention mass inside the ground-truth part mask."""
    if not split:
        raise ValueError("localization_score: empty split")
    for s in split:
        if s.part_mask is None:
            raise ValueError("localization_score: split samples carry no masks")
    total = 0.0
    for sample in split:
        trace = model.forward(sample.image, retain_graph=False)
        total += _mask_overlap(trace.spatial_map.data, sample.part_mask)
    return total / len(split)


def train(model: Model, dataset, h: Hyperparams) -> RunMetrics:
    """Optimize the model on the dataset's train split; metrics per epoch."""
    started = time.perf_counter()
    params = model.parameters()
    backbone_names = model.backbone_param_names()
    head = [(n, p) for n, p in params if n not in backbone_names]
    backbone = [(n, p) for n, p in params if n in backbone_names]
    velocity = {n: np.zeros_like(p.data) for n, p in params}
    ggam_active = model.config.ggam and h.lam > 0

    metrics = RunMetrics()
    for epoch in range(h.epochs):
        lr = cosine_lr(epoch, h.epochs, h.lr)
        ce_sum = ggam_sum = total_sum = 0.0
        seen = 0
        epoch_seed = derive_seed(h.seed, epoch)
        for batch_index, batch in enumerate(batches(dataset.train, h.batch_size, epoch_seed)):
            traces = [model.forward(s.image, retain_graph=True) for s in batch]

            if ggam_active:
                targets = G.gradcam_weights_batch(traces)

            n = len(batch)
            ce_terms = [G.cross_entropy(tr.logits, s.label) for tr, s in zip(traces, batch)]
            ce_mean = ce_terms[0]
            for term in ce_terms[1:]:
                ce_mean = T.add(ce_mean, term)
            ce_mean = T.div(ce_mean, float(n))

            if ggam_active:
                ggam_terms = [
                    G.ggam_loss(tr.channel_weights, tgt) for tr, tgt in zip(traces, targets)
                ]
                ggam_mean = ggam_terms[0]
                for term in ggam_terms[1:]:
                    ggam_mean = T.add(ggam_mean, term)
                ggam_mean = T.div(ggam_mean, float(n))
                batch_loss = G.total_loss(ce_mean.item(), ggam_mean.item(), h.lam)
                objective = T.add(ce_mean, T.hadamard(h.lam, ggam_mean))
            else:
                batch_loss = G.total_loss(ce_mean.item(), 0.0, h.lam)
                objective = ce_mean

            _finite_or_raise(batch_loss.ce, "cross-entropy", epoch, batch_index)
            _finite_or_raise(batch_loss.ggam, "guidance loss", epoch, batch_index)
            _finite_or_raise(batch_loss.total, "total loss", epoch, batch_index)

            T.backward(objective)
            for group, group_lr in ((head, lr), (backbone, h.backbone_lr_factor * lr)):
                names = [name for name, _ in group]
                tensors = [p for _, p in group]
                grads = [
                    p.grad if p.grad is not None else np.zeros_like(p.data) for p in tensors
                ]
                state = [velocity[name] for name in names]
                sgd_step(tensors, grads, state, group_lr, h.momentum, h.weight_decay)
                for name, v in zip(names, state):
                    velocity[name] = v
            model.zero_grad()

            ce_sum += batch_loss.ce * n
            ggam_sum += batch_loss.ggam * n
            total_sum += batch_loss.total * n
            seen += n

        train_acc, _ = _split_metrics(model, dataset.train)
        test_acc, test_loc = _split_metrics(model, dataset.test)
        metrics.epochs.append(
            EpochMetrics(
                epoch=epoch,
                lr=lr,
                ce=ce_sum / seen,
                ggam=ggam_sum / seen,
                total=total_sum / seen,
                train_acc=train_acc,
                test_acc=test_acc,
                localization=test_loc,
            )
        )
    metrics.wall_clock = time.perf_counter() - started
    return metrics


# ---------------------------------------------------------------------------
# experiment harnesses


@dataclass
class GridRow:
    spatial: bool
    channel: bool
    ggam: bool
    accuracy: float
    localization: float


@dataclass
class SweepRow:
    lam: float
    accuracy: float
    localization: float


GRID_ROWS = (
    (False, False, False),
    (True, False, False),
    (False, True, False),
    (True, True, False),
    (False, False, True),
    (True, False, True),
    (False, True, True),
    (True, True, True),
)


def _run_once(dataset, config: ModelConfig, h: Hyperparams, run_seed):
    cfg = replace(config, seed=derive_seed(run_seed, 0))
    hp = replace(h, seed=derive_seed(run_seed, 1))
    model = build(cfg)
    train(model, dataset, hp)
    acc, loc = _split_metrics(model, dataset.test)
    return acc, loc, model


def ablation_grid(dataset, config: ModelConfig, h: Hyperparams, seeds=(0, 1, 2)):
    """All 2^3 attention/guidance toggles; per-cell medians over the seeds."""
    rows = []
    for spatial, channel, ggam in GRID_ROWS:
        accs, locs = [], []
        for seed in seeds:
            cfg = replace(
                config,
                spatial_attention=spatial,
                channel_attention=channel,
                ggam=ggam,
            )
            acc, loc, _ = _run_once(dataset, cfg, h, seed)
            accs.append(acc)
            locs.append(loc)
        rows.append(
            GridRow(
                spatial=spatial,
                channel=channel,
                ggam=ggam,
                accuracy=float(np.median(accs)),
                localization=float(np.median(locs)),
            )
        )
    return rows


def lambda_sweep(dataset, config: ModelConfig, h: Hyperparams, lams=tuple(range(1, 10))):
    """Train once per multiplier value under fixed seeds; report test metrics."""
    if any(lam < 0 for lam in lams):
        raise ValueError("lambda_sweep: multipliers must be >= 0")
    rows = []
    for lam in lams:
        cfg = replace(config, ggam=True)
        acc, loc, _ = _run_once(dataset, cfg, replace(h, lam=float(lam)), h.seed)
        rows.append(SweepRow(lam=float(lam), accuracy=acc, localization=loc))
    return rows
