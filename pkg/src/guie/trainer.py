"""Two-group Adam training, the two-phase epoch schedule and gradient checks."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .datastore import DatasetManifest, FeatureBank, Split, class_stats
from .model import (ADAPTER_PARAMS, HEAD_PARAMS, MetricModel, compute_dynamic_margins,
                    init_model, model_backward, model_forward)
from .numkit import RngStream

log = logging.getLogger(__name__)

GRAD_FLOOR = 1e-5


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs_head_only: int = 5
    epochs_joint: int = 4
    lr_head: float = 1e-4
    lr_backbone_group: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True
    emb_dim: int = 256
    subcenters: int = 3
    scale: float = 30.0
    dropout_rate: float = 0.2
    m_min: float = 0.005
    m_max: float = 0.45
    margin_lambda: float = 0.25

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.lr_head <= 0 or self.lr_backbone_group <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs_head_only < 0 or self.epochs_joint < 0:
            raise ValueError("epoch counts must be >= 0")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    mean_loss: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    checkpoint: str | None = None

    @property
    def losses(self) -> list[float]:
        return [e.mean_loss for e in self.epochs]

    def log_lines(self) -> list[str]:
        return [f"{e.epoch},{e.phase},{e.mean_loss!r},{e.seconds:.3f}" for e in self.epochs]


PARAM_GROUPS = {**{n: "backbone" for n in ADAPTER_PARAMS}, **{n: "head" for n in HEAD_PARAMS}}


def audit_groups(params: dict, groups: dict[str, str] = PARAM_GROUPS) -> None:
    """Every trainable tensor must sit in exactly one learning-rate group."""
    missing = sorted(set(params) - set(groups))
    extra = sorted(set(groups) - set(params))
    if missing or extra:
        raise ValueError(f"parameter groups do not cover the model: missing={missing}, unknown={extra}")


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              group_lrs: dict[str, float], groups: dict[str, str] = PARAM_GROUPS,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place, with a learning rate per group."""
    audit_groups(params, groups)
    for name, g in grads.items():
        if name not in params:
            raise ValueError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name} {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        lr = group_lrs[groups[name]]
        if lr == 0.0:
            continue
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def _batches(n: int, batch_size: int, rng: RngStream, shuffle: bool):
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) < 2:
            break
        yield idx


def prepare_training(bank: FeatureBank, manifest: DatasetManifest, split: Split | None,
                     config: TrainConfig):
    """Resolve training rows, class indices and a freshly initialised model."""
    train_ids = list(manifest.ids) if split is None else list(split.train_ids)
    if not train_ids:
        raise ValueError("empty training set")
    man = manifest.subset(train_ids)
    x = bank.subset(man.ids).vectors
    stats = class_stats(man)
    small = sorted(c for c, n in stats.counts.items() if n < 2)
    if small:
        raise ValueError(f"training class {small[0]!r} has fewer than 2 samples")
    classes = sorted(stats.counts)
    index = {c: i for i, c in enumerate(classes)}
    y = np.array([index[c] for c in man.classes])
    margins = compute_dynamic_margins(stats, config.m_min, config.m_max, config.margin_lambda, classes)
    model = init_model(bank.dim, config.emb_dim, margins, config.seed, config.subcenters,
                       config.scale, config.dropout_rate, classes)
    return x, y, model


def train(bank: FeatureBank, manifest: DatasetManifest, split: Split | None = None,
          config: TrainConfig | None = None, model: MetricModel | None = None):
    """Run the head-only phase then the joint phase.

    Phase one keeps the adapter group at learning rate 0; phase two trains
    both groups with their own rates. Returns ``(model, report)``.
    """
    config = config or TrainConfig()
    x, y, fresh = prepare_training(bank, manifest, split, config)
    if model is None:
        model = fresh
    elif model.arc.n_classes != fresh.arc.n_classes:
        raise ValueError(f"model has {model.arc.n_classes} classes, training split has "
                         f"{fresh.arc.n_classes}")
    params = model.params()
    audit_groups(params)
    state = AdamState()
    # offset keeps the batch/dropout stream apart from the init stream
    rng = RngStream(config.seed + 0x9E3779B97F4A7C15)
    report = TrainReport()
    schedule = ([("head", {"backbone": 0.0, "head": config.lr_head})] * config.epochs_head_only
                + [("joint", {"backbone": config.lr_backbone_group, "head": config.lr_head})]
                * config.epochs_joint)
    for epoch, (phase, lrs) in enumerate(schedule, start=1):
        start = time.perf_counter()
        losses = []
        for idx in _batches(len(y), config.batch_size, rng, config.shuffle):
            loss, _, cache = model_forward(model, x[idx], y[idx], rng=rng)
            grads = model_backward(cache, y[idx], model)
            adam_step(params, grads, state, lrs, beta1=config.beta1, beta2=config.beta2,
                      eps=config.adam_eps)
            losses.append(loss)
        if not losses:
            raise ValueError("no batch of at least 2 samples could be formed")
        mean_loss = float(np.mean(losses))
        if not np.isfinite(mean_loss):
            raise ValueError(f"loss became non-finite in epoch {epoch}")
        rec = EpochRecord(epoch, phase, mean_loss, time.perf_counter() - start)
        report.epochs.append(rec)
        log.info("epoch %d (%s) loss %.6f %.2fs", epoch, phase, mean_loss, rec.seconds)
    return model, report


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    epsilon: float
    kinks_skipped: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values())


def relative_error(analytic: float, numeric: float, floor: float = GRAD_FLOOR) -> float:
    """``|a - n| / max(|a|, |n|, floor)``.

    Below ``floor`` the comparison is effectively absolute; central
    differences of an O(1) loss carry ~1e-10 of roundoff, which a purely
    relative measure would inflate on near-zero gradients.
    """
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(model: MetricModel, x, labels, epsilon: float = 1e-5, n_coords: int = 20,
               seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central differences on sampled coordinates.

    The dropout mask and batch statistics path are frozen from one train-mode
    forward pass; running statistics are left untouched. Coordinates whose
    perturbation flips a sub-centre argmax or the margin branch sit on a
    kink of the loss; they are skipped, counted in ``kinks_skipped``, and
    replaced by the next sampled coordinate.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if x.shape[0] < 2:
        raise ValueError("grad_check needs a batch of at least 2")
    model = model.copy()
    rng = RngStream(seed)
    _, _, cache = model_forward(model, x, labels, rng=rng, update_stats=False)
    mask = cache.head.mask
    grads = model_backward(cache, labels, model)

    def probe() -> tuple[float, bytes]:
        loss, _, c = model_forward(model, x, labels, mask=mask, update_stats=False)
        return loss, c.arc.best_k.tobytes() + c.arc.hard.tobytes()

    _, base_pattern = probe()
    report, kinks = {}, {}
    for name, p in model.params().items():
        flat = p.reshape(-1)
        coords = rng.permutation(flat.size)
        g = grads[name].reshape(-1)
        worst, checked, skipped = 0.0, 0, 0
        for i in coords:
            if checked == n_coords:
                break
            old = flat[i]
            flat[i] = old + epsilon
            up, up_pattern = probe()
            flat[i] = old - epsilon
            down, down_pattern = probe()
            flat[i] = old
            # a sub-centre switch or margin-branch change inside [-eps, eps]
            # makes the central difference meaningless there
            if up_pattern != base_pattern or down_pattern != base_pattern:
                skipped += 1
                continue
            worst = max(worst, relative_error(g[i], (up - down) / (2 * epsilon)))
            checked += 1
        report[name] = worst
        kinks[name] = skipped
    return GradCheckReport(report, epsilon, kinks)
