"""Trainable feature adapter with a classifier head and the transfer schedule.

The adapter is a small affine map (optionally one hidden ReLU layer) whose
output feeds both the contrast losses and a linear multi-class head. Base
training minimizes cross-entropy on annotated source features; the
transfer phases fine-tune with a single active loss each (no loss mixing
or balancing factors), and pseudo-label fine-tuning closes the loop on the
target side. All training is plain SGD with momentum, fully determined by
the config seed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DivergenceError
from .losses import (
    FeatureBatch,
    LossConfig,
    dc_loss,
    dc_loss_grad,
    median_heuristic_bandwidth,
    mmd_rbf,
    mmd_rbf_grad,
    triplet_loss,
    triplet_loss_grad,
)

__all__ = [
    "AdapterModel",
    "TrainConfig",
    "TrainHistory",
    "EvalContext",
    "PseudoLabelSet",
    "train_base",
    "transfer_s_to_t",
    "transfer_t_to_s",
    "run_transfer",
    "pseudo_label",
    "finetune_pseudo",
    "save_checkpoint",
    "load_checkpoint",
]

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

TRANSFER_LOSSES = ("dc", "triplet", "mmd")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    momentum: float = 0.9
    epochs: int = 5
    batch_size: int = 32
    tau: float = 0.5
    seed: int = 0
    pseudo_label_threshold: float = 0.95

    def __post_init__(self):
        if not (self.learning_rate > 0):
            raise ValueError("learning_rate must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must be in [0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (self.tau > 0):
            raise ValueError("tau must be positive")
        if not (0.0 < self.pseudo_label_threshold <= 1.0):
            raise ValueError("pseudo_label_threshold must be in (0, 1]")


class AdapterModel:
    """Feature transform plus linear head over K classes.

    Layers are affine with ReLU between them; the adapter output layer is
    linear so embeddings keep full sign range for cosine similarities.
    """

    def __init__(self, weights, biases, head_w, head_b):
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.head_w = np.asarray(head_w, dtype=np.float64)
        self.head_b = np.asarray(head_b, dtype=np.float64)
        if len(self.weights) != len(self.biases) or not (1 <= len(self.weights) <= 2):
            raise ValueError("adapter needs 1 or 2 affine layers")

    @classmethod
    def create(
        cls,
        in_dim: int,
        num_classes: int,
        hidden_dim: int = 0,
        out_dim: int | None = None,
        seed: int = 0,
    ) -> "AdapterModel":
        """Seeded scaled-uniform init; head bias starts at zero."""
        out_dim = in_dim if out_dim is None else out_dim
        rng = np.random.default_rng(seed)
        dims = [in_dim, out_dim] if hidden_dim == 0 else [in_dim, hidden_dim, out_dim]
        weights, biases = [], []
        for a, b in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(a)
            weights.append(rng.uniform(-bound, bound, size=(a, b)))
            biases.append(np.zeros(b))
        bound = 1.0 / np.sqrt(out_dim)
        head_w = rng.uniform(-bound, bound, size=(out_dim, num_classes))
        return cls(weights, biases, head_w, np.zeros(num_classes))

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def num_classes(self) -> int:
        return self.head_w.shape[1]

    def parameters(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases, self.head_w, self.head_b]

    def copy(self) -> "AdapterModel":
        return AdapterModel(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.head_w.copy(),
            self.head_b.copy(),
        )

    def _forward_adapt(self, x: np.ndarray):
        """Adapter forward pass keeping the caches needed for backprop."""
        h = np.asarray(x, dtype=np.float64)
        caches = []
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            pre = h @ w + b
            caches.append((h, pre))
            h = pre if k == last else np.maximum(pre, 0.0)
        return h, caches

    def _backward_adapt(self, caches, grad_out: np.ndarray):
        """Gradients of all adapter parameters given d(loss)/d(output)."""
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        g = grad_out
        last = len(self.weights) - 1
        for k in range(last, -1, -1):
            inp, pre = caches[k]
            if k != last:
                g = g * (pre > 0.0)
            grads_w[k] = inp.T @ g
            grads_b[k] = g.sum(axis=0)
            if k > 0:
                g = g @ self.weights[k].T
        return grads_w, grads_b

    def adapt(self, x) -> np.ndarray:
        return self._forward_adapt(x)[0]

    def adapt_regions(self, x) -> np.ndarray:
        """Adapt a region concatenation by transforming each half."""
        x = np.asarray(x, dtype=np.float64)
        half = self.in_dim
        if x.shape[1] != 2 * half:
            raise ValueError(
                f"region vectors must have dimension {2 * half}, got {x.shape[1]}"
            )
        return np.hstack([self.adapt(x[:, :half]), self.adapt(x[:, half:])])

    def logits(self, x) -> np.ndarray:
        return self.adapt(x) @ self.head_w + self.head_b

    def predict_proba(self, x) -> np.ndarray:
        z = self.logits(x)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def accuracy(self, features, labels) -> float:
        return float(np.mean(self.predict(features) == np.asarray(labels)))


@dataclass
class TrainHistory:
    """Per-epoch statistics of one training phase."""

    loss: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    target_acc: list[float] = field(default_factory=list)
    mmd: list[float] = field(default_factory=list)
    status: str = "ok"

    def append(self, loss: float, grad_norm: float, target_acc: float, mmd: float):
        self.loss.append(loss)
        self.grad_norm.append(grad_norm)
        self.target_acc.append(target_acc)
        self.mmd.append(mmd)

    def extend(self, other: "TrainHistory") -> None:
        self.loss += other.loss
        self.grad_norm += other.grad_norm
        self.target_acc += other.target_acc
        self.mmd += other.mmd

    def __len__(self) -> int:
        return len(self.loss)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,loss,grad_norm,target_acc,mmd\n")
            for e in range(len(self.loss)):
                fh.write(
                    f"{e},{self.loss[e]!r},{self.grad_norm[e]!r},"
                    f"{self.target_acc[e]!r},{self.mmd[e]!r}\n"
                )


@dataclass
class EvalContext:
    """Optional held-out data for per-epoch history columns."""

    source_features: np.ndarray
    target_features: np.ndarray
    target_labels: np.ndarray

    def measure(self, model: AdapterModel) -> tuple[float, float]:
        acc = model.accuracy(self.target_features, self.target_labels)
        zs = model.adapt(self.source_features)
        zt = model.adapt(self.target_features)
        return acc, mmd_rbf(zs, zt, median_heuristic_bandwidth(zs, zt))


@dataclass
class PseudoLabelSet:
    """Confident predictions usable as fine-tuning labels."""

    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


class _Sgd:
    """Plain SGD with momentum over a parameter list (velocity state)."""

    def __init__(self, params: list[np.ndarray], lr: float, momentum: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= self.momentum
            v += g
            p -= self.lr * v


def _global_norm(grads) -> float:
    with np.errstate(over="ignore"):
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def _epoch_stats(history, losses, norms, eval_ctx, model):
    acc, mmd = eval_ctx.measure(model) if eval_ctx is not None else (float("nan"), float("nan"))
    history.append(float(np.mean(losses)), float(np.mean(norms)), acc, mmd)


def _check_finite(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise DivergenceError(
            f"{what} produced a non-finite loss ({value}); lower the learning rate"
        )


def _ce_step(model: AdapterModel, x: np.ndarray, y: np.ndarray):
    """Cross-entropy loss and gradients for one minibatch."""
    # divergence surfaces as a non-finite loss; the overflow itself is fine
    with np.errstate(over="ignore", invalid="ignore"):
        z, caches = model._forward_adapt(x)
        logits = z @ model.head_w + model.head_b
        shifted = logits - logits.max(axis=1, keepdims=True)
        expz = np.exp(shifted)
        probs = expz / expz.sum(axis=1, keepdims=True)
        n = x.shape[0]
        loss = float(-np.mean(np.log(np.maximum(probs[np.arange(n), y], 1e-300))))

    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    grad_head_w = z.T @ dlogits
    grad_head_b = dlogits.sum(axis=0)
    dz = dlogits @ model.head_w.T
    gw, gb = model._backward_adapt(caches, dz)
    return loss, [*gw, *gb, grad_head_w, grad_head_b]


def _train_classifier(model, features, labels, cfg, eval_ctx, what) -> TrainHistory:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    history = TrainHistory()
    if cfg.epochs == 0:
        return history
    rng = np.random.default_rng(cfg.seed)
    opt = _Sgd(model.parameters(), cfg.learning_rate, cfg.momentum)
    n = len(features)
    bs = min(cfg.batch_size, n)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        losses, norms = [], []
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            loss, grads = _ce_step(model, features[idx], labels[idx])
            _check_finite(loss, what)
            opt.step(grads)
            losses.append(loss)
            norms.append(_global_norm(grads))
        _epoch_stats(history, losses, norms, eval_ctx, model)
    return history


def train_base(
    model: AdapterModel,
    source_features,
    source_labels,
    cfg: TrainConfig,
    eval_ctx: EvalContext | None = None,
) -> TrainHistory:
    """Supervised base phase: multi-class cross-entropy on annotated source data."""
    return _train_classifier(model, source_features, source_labels, cfg, eval_ctx, "base training")


def _contrastive_step(model, batch: FeatureBatch, cfg: TrainConfig, loss_kind: str, region: bool):
    """One forward/backward of the selected transfer loss on adapter outputs."""
    with np.errstate(over="ignore", invalid="ignore"):
        return _contrastive_step_impl(model, batch, cfg, loss_kind, region)


def _contrastive_step_impl(model, batch, cfg, loss_kind, region):
    half = model.in_dim
    if region:
        za, ca1 = model._forward_adapt(batch.side_a[:, :half])
        za2, ca2 = model._forward_adapt(batch.side_a[:, half:])
        zb, cb1 = model._forward_adapt(batch.side_b[:, :half])
        zb2, cb2 = model._forward_adapt(batch.side_b[:, half:])
        out_a = np.hstack([za, za2])
        out_b = np.hstack([zb, zb2])
    else:
        out_a, ca1 = model._forward_adapt(batch.side_a)
        out_b, cb1 = model._forward_adapt(batch.side_b)

    if not (np.all(np.isfinite(out_a)) and np.all(np.isfinite(out_b))):
        raise DivergenceError(
            "adapter outputs are non-finite; lower the learning rate"
        )
    adapted = FeatureBatch(out_a, out_b, batch.labels)
    if loss_kind == "dc":
        loss = dc_loss(adapted, LossConfig(tau=cfg.tau)).value
        ga, gb = dc_loss_grad(adapted, LossConfig(tau=cfg.tau))
    elif loss_kind == "triplet":
        loss = triplet_loss(adapted).value
        ga, gb = triplet_loss_grad(adapted)
    elif loss_kind == "mmd":
        bw = median_heuristic_bandwidth(out_a, out_b)
        loss = mmd_rbf(out_a, out_b, bw)
        ga, gb = mmd_rbf_grad(out_a, out_b, bw)
    else:
        raise ValueError(f"loss_kind must be one of {TRANSFER_LOSSES}, got {loss_kind!r}")

    k = model.out_dim
    if region:
        parts = [
            model._backward_adapt(ca1, ga[:, :k]),
            model._backward_adapt(ca2, ga[:, k:]),
            model._backward_adapt(cb1, gb[:, :k]),
            model._backward_adapt(cb2, gb[:, k:]),
        ]
    else:
        parts = [model._backward_adapt(ca1, ga), model._backward_adapt(cb1, gb)]
    gw = [sum(p[0][i] for p in parts) for i in range(len(model.weights))]
    gbias = [sum(p[1][i] for p in parts) for i in range(len(model.biases))]
    # the head never sees the transfer losses
    grads = [*gw, *gbias, np.zeros_like(model.head_w), np.zeros_like(model.head_b)]
    return loss, grads


def run_transfer(
    model: AdapterModel,
    batches: list[FeatureBatch],
    cfg: TrainConfig,
    loss_kind: str = "dc",
    region: bool = False,
    eval_ctx: EvalContext | None = None,
) -> TrainHistory:
    """Fine-tune the adapter on paired batches with one transfer loss."""
    if loss_kind not in TRANSFER_LOSSES:
        raise ValueError(f"loss_kind must be one of {TRANSFER_LOSSES}, got {loss_kind!r}")
    if not batches:
        raise ValueError("run_transfer needs at least one batch")
    history = TrainHistory()
    if cfg.epochs == 0:
        return history
    rng = np.random.default_rng(cfg.seed)
    opt = _Sgd(model.parameters(), cfg.learning_rate, cfg.momentum)
    for _ in range(cfg.epochs):
        losses, norms = [], []
        for bi in rng.permutation(len(batches)):
            loss, grads = _contrastive_step(model, batches[bi], cfg, loss_kind, region)
            _check_finite(loss, f"{loss_kind} transfer")
            opt.step(grads)
            losses.append(loss)
            norms.append(_global_norm(grads))
        _epoch_stats(history, losses, norms, eval_ctx, model)
    return history


def transfer_s_to_t(
    model: AdapterModel,
    cfg: TrainConfig,
    image_batches: list[FeatureBatch] | None = None,
    region_batches: list[FeatureBatch] | None = None,
    level: str = "image",
    eval_ctx: EvalContext | None = None,
) -> TrainHistory:
    """Source-to-target transfer: contrast loss between source features and
    their translated counterparts, at image level, region level, or both
    sequentially (each sub-phase runs cfg.epochs with a single active loss)."""
    if level not in ("image", "region", "both"):
        raise ValueError(f"level must be image, region or both, got {level!r}")
    history = TrainHistory()
    if level in ("image", "both"):
        if image_batches is None:
            raise ValueError("image-level transfer needs image_batches")
        history.extend(
            run_transfer(model, image_batches, cfg, "dc", region=False, eval_ctx=eval_ctx)
        )
    if level in ("region", "both"):
        if region_batches is None:
            raise ValueError("region-level transfer needs region_batches")
        history.extend(
            run_transfer(model, region_batches, cfg, "dc", region=True, eval_ctx=eval_ctx)
        )
    return history


def transfer_t_to_s(
    model: AdapterModel,
    batches: list[FeatureBatch],
    cfg: TrainConfig,
    eval_ctx: EvalContext | None = None,
) -> TrainHistory:
    """Target-to-source transfer: the image-level contrast loss with target
    samples paired against their back-translated counterparts. The loss is
    symmetric in the two sides, so this mirrors transfer_s_to_t exactly."""
    return run_transfer(model, batches, cfg, "dc", region=False, eval_ctx=eval_ctx)


def pseudo_label(model: AdapterModel, features, threshold: float) -> PseudoLabelSet:
    """Confidence-filtered self-labels: keep samples whose softmax max
    probability reaches the threshold, labeled with the argmax class."""
    if not (0.0 < threshold <= 1.0):
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    features = np.asarray(features, dtype=np.float64)
    probs = model.predict_proba(features)
    conf = probs.max(axis=1)
    keep = np.flatnonzero(conf >= threshold)
    return PseudoLabelSet(keep, features[keep], probs[keep].argmax(axis=1))


def finetune_pseudo(
    model: AdapterModel,
    pseudo_set: PseudoLabelSet,
    cfg: TrainConfig,
    eval_ctx: EvalContext | None = None,
) -> TrainHistory:
    """Cross-entropy fine-tuning on pseudo labels; empty sets are a warning
    no-op, not an error."""
    if len(pseudo_set) == 0:
        logger.warning("empty pseudo-label set: fine-tuning skipped")
        return TrainHistory(status="skipped_empty")
    return _train_classifier(
        model, pseudo_set.features, pseudo_set.labels, cfg, eval_ctx, "pseudo fine-tuning"
    )


def save_checkpoint(model: AdapterModel, path, config_echo: dict | None = None) -> None:
    """Versioned JSON checkpoint with row-major parameter arrays."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "layer_shapes": [list(w.shape) for w in model.weights],
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "head_w": model.head_w.tolist(),
        "head_b": model.head_b.tolist(),
        "config_echo": config_echo or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> tuple[AdapterModel, dict]:
    """Load a checkpoint, rejecting unknown format versions."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: corrupt checkpoint ({exc})") from None
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise DataError(
            f"{path}: checkpoint format_version {version} != supported {CHECKPOINT_VERSION}"
        )
    try:
        model = AdapterModel(doc["weights"], doc["biases"], doc["head_w"], doc["head_b"])
    except KeyError as exc:
        raise DataError(f"{path}: checkpoint missing field {exc}") from None
    return model, doc.get("config_echo", {})
