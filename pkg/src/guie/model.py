"""BN-Dropout-FC embedding head with a SubCenter ArcFace classifier.

Forward and backward passes are written out by hand in float64. Weight
matrices are stored ``out x in`` and applied as ``x @ W.T + b``.

Pipeline: adapter (identity-initialised linear map standing in for the
unfrozen backbone blocks) -> BatchNorm -> inverted dropout -> FC -> ArcFace.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .datastore import ClassStats, load_tensors, save_tensors
from .numkit import RngStream, check_finite, l2_normalize_rows

COS_CLAMP = 1.0 - 1e-7

ADAPTER_PARAMS = ("adapter_W", "adapter_b")
HEAD_PARAMS = ("bn_gamma", "bn_beta", "fc_W", "fc_b", "arc_W")


@dataclass
class MarginSchedule:
    margins: np.ndarray  # aligned with class index
    m_min: float = 0.005
    m_max: float = 0.45
    lam: float = 0.25


def compute_dynamic_margins(stats: ClassStats, m_min: float = 0.005, m_max: float = 0.45,
                            lam: float = 0.25, classes=None) -> MarginSchedule:
    """Per-class margins ``a * n**-lam + b`` anchored at the count extremes.

    The rarest class gets ``m_max`` and the most frequent gets ``m_min``.
    ``classes`` fixes the output order (defaults to sorted labels).
    """
    if not stats.counts:
        raise ValueError("empty class statistics")
    if not m_min < m_max:
        raise ValueError(f"need m_min < m_max, got {m_min} >= {m_max}")
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    classes = sorted(stats.counts) if classes is None else list(classes)
    counts = np.array([stats.counts[c] for c in classes], dtype=np.float64)
    if counts.min() < 1:
        raise ValueError("every class count must be >= 1")
    n_lo, n_hi = counts.min(), counts.max()
    if n_lo == n_hi:
        return MarginSchedule(np.full(len(classes), 0.5 * (m_min + m_max)), m_min, m_max, lam)
    u = counts ** -lam
    u_lo, u_hi = n_lo ** -lam, n_hi ** -lam
    # weight 1 at the rarest class, 0 at the most frequent; exact at both ends
    t = (u - u_hi) / (u_lo - u_hi)
    t[counts == n_lo] = 1.0
    t[counts == n_hi] = 0.0
    return MarginSchedule(m_max * t + m_min * (1.0 - t), m_min, m_max, lam)


@dataclass
class HeadParams:
    adapter_W: np.ndarray
    adapter_b: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    fc_W: np.ndarray
    fc_b: np.ndarray
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    dropout_rate: float = 0.2

    @property
    def in_dim(self) -> int:
        return self.adapter_W.shape[1]

    @property
    def emb_dim(self) -> int:
        return self.fc_W.shape[0]


@dataclass
class ArcFaceParams:
    W: np.ndarray  # (C*K) x emb_dim, rows c*K .. c*K+K-1 belong to class c
    margins: MarginSchedule
    scale: float = 30.0
    subcenters: int = 3

    @property
    def n_classes(self) -> int:
        return self.W.shape[0] // self.subcenters


@dataclass
class MetricModel:
    head: HeadParams
    arc: ArcFaceParams
    classes: list[str] = field(default_factory=list)

    def params(self) -> dict[str, np.ndarray]:
        """Trainable tensors by name; arrays are shared, not copied."""
        h = self.head
        return {
            "adapter_W": h.adapter_W, "adapter_b": h.adapter_b,
            "bn_gamma": h.bn_gamma, "bn_beta": h.bn_beta,
            "fc_W": h.fc_W, "fc_b": h.fc_b, "arc_W": self.arc.W,
        }

    def copy(self) -> "MetricModel":
        h = self.head
        head = HeadParams(**{k: (v.copy() if isinstance(v, np.ndarray) else v)
                             for k, v in h.__dict__.items()})
        m = self.arc.margins
        arc = ArcFaceParams(self.arc.W.copy(),
                            MarginSchedule(m.margins.copy(), m.m_min, m.m_max, m.lam),
                            self.arc.scale, self.arc.subcenters)
        return MetricModel(head, arc, list(self.classes))


def init_model(in_dim: int, emb_dim: int, margins: MarginSchedule, seed: int,
               subcenters: int = 3, scale: float = 30.0, dropout_rate: float = 0.2,
               classes=None, init_std: float = 0.01) -> MetricModel:
    n_classes = len(margins.margins)
    rng = RngStream(seed)
    head = HeadParams(
        adapter_W=np.eye(in_dim),
        adapter_b=np.zeros(in_dim),
        bn_gamma=np.ones(in_dim),
        bn_beta=np.zeros(in_dim),
        bn_running_mean=np.zeros(in_dim),
        bn_running_var=np.ones(in_dim),
        fc_W=rng.gaussian((emb_dim, in_dim)) * init_std,
        fc_b=np.zeros(emb_dim),
        dropout_rate=dropout_rate,
    )
    arc = ArcFaceParams(rng.gaussian((n_classes * subcenters, emb_dim)) * init_std,
                        margins, scale, subcenters)
    classes = [str(i) for i in range(n_classes)] if classes is None else list(classes)
    return MetricModel(head, arc, classes)


# ----------------------------------------------------------------- head


def dropout_mask(shape, p: float, rng: RngStream) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability p, else 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    return rng.bernoulli(shape, 1.0 - p) / (1.0 - p)


@dataclass
class HeadCache:
    x: np.ndarray
    xhat: np.ndarray
    inv_std: np.ndarray
    mask: np.ndarray | None
    dropped: np.ndarray
    train: bool


def head_forward(x, params: HeadParams, mode: str = "train", rng: RngStream | None = None,
                 mask: np.ndarray | None = None, update_stats: bool = True):
    """Adapter -> BatchNorm -> dropout -> FC.

    In train mode the batch statistics normalise the activations and the
    running statistics are updated in place (unless ``update_stats`` is
    False). ``mask`` overrides the random dropout mask; it must already
    include the ``1/(1-p)`` factor.
    """
    x = np.asarray(x, dtype=np.float64)
    check_finite(x, "head input")
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ValueError(f"head expects B x {params.in_dim} input, got {x.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    b = x.shape[0]
    if train and b < 2:
        raise ValueError(f"train mode needs a batch of at least 2, got {b}")
    if b < 1:
        raise ValueError("empty batch")

    a = x @ params.adapter_W.T + params.adapter_b
    if train:
        mu = a.mean(axis=0)
        var = a.var(axis=0)
        if update_stats:
            mom = params.bn_momentum
            params.bn_running_mean[:] = (1 - mom) * params.bn_running_mean + mom * mu
            params.bn_running_var[:] = (1 - mom) * params.bn_running_var + mom * var * b / (b - 1)
    else:
        mu, var = params.bn_running_mean, params.bn_running_var
    inv_std = 1.0 / np.sqrt(var + params.bn_eps)
    xhat = (a - mu) * inv_std
    h = params.bn_gamma * xhat + params.bn_beta

    if train:
        p = params.dropout_rate
        if mask is None:
            if rng is None:
                raise ValueError("train mode needs an rng for the dropout mask")
            mask = dropout_mask(h.shape, p, rng)
        elif mask.shape != h.shape:
            raise ValueError(f"dropout mask shape {mask.shape} != activations {h.shape}")
        h = h * mask
    else:
        mask = None
    emb = h @ params.fc_W.T + params.fc_b
    return emb, HeadCache(x, xhat, inv_std, mask, h, train)


def head_backward(d_emb: np.ndarray, cache: HeadCache, params: HeadParams) -> dict[str, np.ndarray]:
    grads = {
        "fc_W": d_emb.T @ cache.dropped,
        "fc_b": d_emb.sum(axis=0),
    }
    dh = d_emb @ params.fc_W
    if cache.mask is not None:
        dh = dh * cache.mask
    grads["bn_gamma"] = np.sum(dh * cache.xhat, axis=0)
    grads["bn_beta"] = dh.sum(axis=0)
    dxhat = dh * params.bn_gamma
    if cache.train:
        b = dxhat.shape[0]
        da = (cache.inv_std / b) * (b * dxhat - dxhat.sum(axis=0)
                                    - cache.xhat * np.sum(dxhat * cache.xhat, axis=0))
    else:
        da = dxhat * cache.inv_std
    grads["adapter_W"] = da.T @ cache.x
    grads["adapter_b"] = da.sum(axis=0)
    return grads


# -------------------------------------------------------------- arcface


@dataclass
class ArcCache:
    emb: np.ndarray
    emb_unit: np.ndarray
    emb_norm: np.ndarray
    w_unit: np.ndarray
    w_norm: np.ndarray
    best_k: np.ndarray  # B x C index of the winning sub-centre
    cos: np.ndarray  # B x C pooled cosines
    target_cos: np.ndarray
    hard: np.ndarray  # target takes the fallback branch
    probs: np.ndarray
    labels: np.ndarray


def pooled_cosines(emb_unit: np.ndarray, w_unit: np.ndarray, subcenters: int):
    """Max over each class's sub-centres of the cosine similarity."""
    b = emb_unit.shape[0]
    cos_all = (emb_unit @ w_unit.T).reshape(b, -1, subcenters)
    best = np.argmax(cos_all, axis=2)
    return np.take_along_axis(cos_all, best[:, :, None], axis=2)[:, :, 0], best


def margin_logit(cos_t: np.ndarray, m: np.ndarray):
    """Target logit before scaling: ``cos(theta + m)`` or the hard-case fallback.

    ``cos(theta + m)`` is evaluated as ``cos*cos(m) - sin(theta)*sin(m)`` with
    ``sin(theta)`` taken from the clamped cosine, so a zero margin returns the
    cosine itself. Returns ``(phi, dphi_dcos, hard)``.
    """
    clamped = np.clip(cos_t, -COS_CLAMP, COS_CLAMP)
    sin_t = np.sqrt(1.0 - clamped * clamped)
    hard = cos_t <= np.cos(np.pi - m)
    primary = cos_t * np.cos(m) - sin_t * np.sin(m)
    inside = np.abs(cos_t) < COS_CLAMP
    d_primary = np.cos(m) + np.where(inside, clamped / sin_t, 0.0) * np.sin(m)
    phi = np.where(hard, cos_t - m * np.sin(m), primary)
    dphi = np.where(hard, 1.0, d_primary)
    return phi, dphi, hard


def arcface_logits(emb, labels, af: ArcFaceParams):
    emb = np.asarray(emb, dtype=np.float64)
    check_finite(emb, "embedding")
    labels = np.asarray(labels)
    c = af.n_classes
    if labels.shape != (emb.shape[0],):
        raise ValueError(f"{labels.shape[0] if labels.ndim else 0} labels for {emb.shape[0]} embeddings")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise ValueError(f"label {bad} out of range for {c} classes")
    if af.W.shape[0] != c * af.subcenters:
        raise ValueError(f"ArcFace weight has {af.W.shape[0]} rows, not a multiple of K={af.subcenters}")
    if len(af.margins.margins) != c:
        raise ValueError(f"{len(af.margins.margins)} margins for {c} classes")

    emb_norm = np.linalg.norm(emb, axis=1)
    emb_unit = l2_normalize_rows(emb)
    w_norm = np.linalg.norm(af.W, axis=1)
    w_unit = l2_normalize_rows(af.W)
    cos, best = pooled_cosines(emb_unit, w_unit, af.subcenters)
    rows = np.arange(emb.shape[0])
    target_cos = cos[rows, labels]
    phi, _, hard = margin_logit(target_cos, af.margins.margins[labels])
    logits = cos.copy()
    logits[rows, labels] = phi
    logits *= af.scale
    cache = ArcCache(emb, emb_unit, emb_norm, w_unit, w_norm, best, cos, target_cos, hard,
                     None, labels)
    return logits, cache


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - log_z[:, None]
    loss = -log_p[np.arange(len(labels)), labels].mean()
    return float(loss), np.exp(log_p)


def arcface_forward(emb, labels, af: ArcFaceParams):
    """Return ``(loss, logits, cache)``; loss is the batch-mean cross-entropy."""
    logits, cache = arcface_logits(emb, labels, af)
    loss, probs = softmax_cross_entropy(logits, cache.labels)
    cache.probs = probs
    return loss, logits, cache


def _normalize_backward(d_unit: np.ndarray, unit: np.ndarray, norm: np.ndarray) -> np.ndarray:
    dot = np.sum(d_unit * unit, axis=1, keepdims=True)
    return (d_unit - unit * dot) / norm[:, None]


def arcface_backward(cache: ArcCache, af: ArcFaceParams, upstream: float = 1.0):
    """Gradients of ``upstream * loss`` w.r.t. the embedding and ``arc_W``."""
    b, c = cache.cos.shape
    rows = np.arange(b)
    labels = cache.labels
    d_logits = cache.probs.copy()
    d_logits[rows, labels] -= 1.0
    d_logits *= upstream / b
    d_cos = af.scale * d_logits
    _, dphi, _ = margin_logit(cache.target_cos, af.margins.margins[labels])
    d_cos[rows, labels] *= dphi

    k = af.subcenters
    d_cos_all = np.zeros((b, c, k))
    np.put_along_axis(d_cos_all, cache.best_k[:, :, None], d_cos[:, :, None], axis=2)
    d_cos_all = d_cos_all.reshape(b, c * k)
    d_emb_unit = d_cos_all @ cache.w_unit
    d_w_unit = d_cos_all.T @ cache.emb_unit
    return (_normalize_backward(d_emb_unit, cache.emb_unit, cache.emb_norm),
            _normalize_backward(d_w_unit, cache.w_unit, cache.w_norm))


# ---------------------------------------------------------- full model


@dataclass
class ForwardCache:
    head: HeadCache
    arc: ArcCache


def model_forward(model: MetricModel, x, labels, rng: RngStream | None = None,
                  mask: np.ndarray | None = None, update_stats: bool = True, mode: str = "train"):
    emb, hcache = head_forward(x, model.head, mode, rng, mask=mask, update_stats=update_stats)
    loss, logits, acache = arcface_forward(emb, labels, model.arc)
    return loss, logits, ForwardCache(hcache, acache)


def model_backward(cache: ForwardCache, labels, model: MetricModel,
                   upstream: float = 1.0) -> dict[str, np.ndarray]:
    labels = np.asarray(labels)
    if labels.shape != cache.arc.labels.shape or np.any(labels != cache.arc.labels):
        raise ValueError("labels do not match the cached forward pass")
    d_emb, d_arc = arcface_backward(cache.arc, model.arc, upstream)
    grads = head_backward(d_emb, cache.head, model.head)
    grads["arc_W"] = d_arc
    return grads


def embed(x, model: MetricModel) -> np.ndarray:
    """Eval-mode head output, L2-normalised per row."""
    emb, _ = head_forward(x, model.head, "eval")
    return l2_normalize_rows(emb)


# ----------------------------------------------------------- checkpoint


_STATE_ARRAYS = ("adapter_W", "adapter_b", "bn_gamma", "bn_beta", "bn_running_mean",
                 "bn_running_var", "fc_W", "fc_b")


def save_checkpoint(model: MetricModel, path) -> None:
    h, af = model.head, model.arc
    tensors = {name: getattr(h, name) for name in _STATE_ARRAYS}
    tensors["arc_W"] = af.W
    tensors["margins"] = af.margins.margins
    tensors["meta"] = json.dumps({
        "format": "guie-checkpoint", "version": 1,
        "bn_eps": h.bn_eps, "bn_momentum": h.bn_momentum, "dropout_rate": h.dropout_rate,
        "scale": af.scale, "subcenters": af.subcenters,
        "m_min": af.margins.m_min, "m_max": af.margins.m_max, "lambda": af.margins.lam,
        "classes": model.classes,
    }, sort_keys=True)
    save_tensors(tensors, path)


def load_checkpoint(path) -> MetricModel:
    t = load_tensors(path)
    try:
        meta = json.loads(t["meta"])
        if meta.get("format") != "guie-checkpoint":
            raise ValueError(f"{path}: not a model checkpoint")
        head = HeadParams(**{name: t[name] for name in _STATE_ARRAYS},
                          bn_eps=meta["bn_eps"], bn_momentum=meta["bn_momentum"],
                          dropout_rate=meta["dropout_rate"])
        margins = MarginSchedule(t["margins"], meta["m_min"], meta["m_max"], meta["lambda"])
        arc = ArcFaceParams(t["arc_W"], margins, meta["scale"], meta["subcenters"])
    except KeyError as exc:
        raise ValueError(f"{path}: checkpoint is missing section {exc}") from None
    return MetricModel(head, arc, list(meta["classes"]))
