"""Transferability and discriminability measurement.

Quantified surrogates for the qualitative alignment evidence: MMD between
adapted domains, cosine statistics of positive pairs versus in-batch
negatives, per-class cross-domain center alignment, and the loss-vs-loss
imbalance comparison harness. mAP is deliberately not computed — there are
no detections at feature scale; accuracy and recall are the declared
surrogates.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass

import numpy as np

from .adapter import AdapterModel, TrainConfig, run_transfer, train_base
from .datasets import FeatureSet, SyntheticDomainSpec, generate, make_batches
from .linalg import pairwise_cosine
from .losses import median_heuristic_bandwidth, mmd_rbf

__all__ = [
    "EvalReport",
    "evaluate",
    "imbalance_comparison",
    "write_comparison_csv",
]


@dataclass
class EvalReport:
    """Alignment and discriminability statistics for one model/dataset pair.

    Recalls and centers are None for classes absent from the relevant set
    (marked undefined, never zero-filled). Positive-pair statistics are
    None when no pairing is available.
    """

    target_accuracy: float
    per_class_recall: list[float | None]
    minority_recall: float | None
    mmd_source_target: float
    mean_positive_pair_cosine: float | None
    mean_offdiag_cosine: float | None
    class_center_cross_domain_cosine: list[float | None]

    def to_json_dict(self) -> dict:
        return dataclasses.asdict(self)


def _recalls(preds: np.ndarray, labels: np.ndarray, num_classes: int) -> list[float | None]:
    out: list[float | None] = []
    for k in range(num_classes):
        mask = labels == k
        out.append(float(np.mean(preds[mask] == k)) if mask.any() else None)
    return out


def _minority_recall(recalls, labels) -> float | None:
    counts = np.bincount(labels, minlength=len(recalls)).astype(float)
    counts[counts == 0] = np.inf
    minority = int(np.argmin(counts))
    return recalls[minority] if np.isfinite(counts[minority]) else None


def evaluate(
    model: AdapterModel,
    target_set: FeatureSet,
    source_set: FeatureSet,
    pairing: np.ndarray | None = None,
) -> EvalReport:
    """Score a model on the target set and measure cross-domain alignment.

    pairing rows are (target_index, source_index) counterpart pairs; when
    None the positive-pair statistics are reported as undefined.
    """
    if len(target_set) == 0 or len(source_set) == 0:
        raise ValueError("evaluate needs nonempty sets")
    preds = model.predict(target_set.features)
    recalls = _recalls(preds, target_set.labels, model.num_classes)

    z_src = model.adapt(source_set.features)
    z_tgt = model.adapt(target_set.features)
    mmd = mmd_rbf(z_src, z_tgt, median_heuristic_bandwidth(z_src, z_tgt))

    pos_cos = offdiag_cos = None
    if pairing is not None and len(pairing):
        pairing = np.asarray(pairing)
        sims = pairwise_cosine(z_tgt[pairing[:, 0]], z_src[pairing[:, 1]])
        p = sims.shape[0]
        pos_cos = float(np.trace(sims) / p)
        offdiag_cos = float((sims.sum() - np.trace(sims)) / (p * p - p)) if p > 1 else None

    centers: list[float | None] = []
    for k in range(model.num_classes):
        src_mask = source_set.labels == k
        tgt_mask = target_set.labels == k
        if src_mask.any() and tgt_mask.any():
            centers.append(
                float(
                    pairwise_cosine(
                        z_src[src_mask].mean(axis=0), z_tgt[tgt_mask].mean(axis=0)
                    )[0, 0]
                )
            )
        else:
            centers.append(None)

    return EvalReport(
        target_accuracy=float(np.mean(preds == target_set.labels)),
        per_class_recall=recalls,
        minority_recall=_minority_recall(recalls, target_set.labels),
        mmd_source_target=mmd,
        mean_positive_pair_cosine=pos_cos,
        mean_offdiag_cosine=offdiag_cos,
        class_center_cross_domain_cosine=centers,
    )


def imbalance_comparison(
    spec: SyntheticDomainSpec,
    base_cfg: TrainConfig,
    transfer_cfg: TrainConfig,
    losses: tuple[str, ...] = ("dc", "triplet", "mmd"),
    seeds: tuple[int, ...] = (0,),
) -> list[dict]:
    """Train one adapter per transfer loss under identical seeds and config.

    For every seed the same generated instance and the same base model feed
    each loss; rows report minority-class recall, overall target accuracy,
    and residual MMD. No ranking is asserted here — the harness only
    measures.
    """
    rows = []
    for seed in seeds:
        means = spec.resolve_means(np.random.default_rng(seed))
        concrete = dataclasses.replace(spec, class_means=means)
        source, target, pairing = generate(concrete, seed)
        base = AdapterModel.create(
            concrete.dim, concrete.num_classes, seed=seed + 1000
        )
        train_base(
            base,
            source.features,
            source.labels,
            dataclasses.replace(base_cfg, seed=seed),
        )
        batches = make_batches(target, source, pairing, transfer_cfg.batch_size, seed=seed + 1)
        for loss_kind in losses:
            model = base.copy()
            run_transfer(
                model, batches, dataclasses.replace(transfer_cfg, seed=seed + 2), loss_kind
            )
            report = evaluate(model, target, source, pairing)
            rows.append(
                {
                    "seed": int(seed),
                    "loss": loss_kind,
                    "minority_recall": report.minority_recall,
                    "target_accuracy": report.target_accuracy,
                    "mmd_source_target": report.mmd_source_target,
                }
            )
    return rows


def write_comparison_csv(rows: list[dict], path) -> None:
    """Plot-ready CSV, one row per seed x loss."""
    fields = ["seed", "loss", "minority_recall", "target_accuracy", "mmd_source_target"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
