"""Experiment configuration and the staged transfer pipeline.

One experiment = dataset (synthetic spec or a pair of feature CSVs), an
ordered phase list, and per-phase training settings. Phases run strictly
in order with a single active loss each:

    base       supervised cross-entropy on annotated source features
    st_image   contrast transfer, source samples vs their translated
               counterparts (image-level vectors)
    st_region  contrast transfer on region concatenations (synthetic only)
    ts_image   contrast transfer, target samples vs their back-translated
               counterparts
    ts_pseudo  confidence-thresholded pseudo labels scored on the
               back-translated features, cross-entropy fine-tuning on the
               corresponding target features

For file datasets, rows with translated_of set are derived translations:
they pair with their counterparts but are excluded from base training.
All randomness flows from the config seed, so identical configs produce
byte-identical artifacts.
"""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .adapter import (
    AdapterModel,
    EvalContext,
    PseudoLabelSet,
    TrainConfig,
    TrainHistory,
    finetune_pseudo,
    pseudo_label,
    save_checkpoint,
    train_base,
    transfer_s_to_t,
    transfer_t_to_s,
)
from .bounds import LabeledSet, RiskReport, bound_chain_report, nn_classifier
from .datasets import (
    FeatureSet,
    SyntheticDomainSpec,
    generate,
    generate_region_groups,
    invert_shift,
    load_domain_pair,
    make_batches,
    make_region_vectors,
    save_features,
)
from .errors import DataError
from .losses import FeatureBatch, LossConfig
from .metrics import EvalReport, evaluate

__all__ = [
    "PHASES",
    "ExperimentConfig",
    "RunResult",
    "standard_benchmark_config",
    "imbalanced_benchmark_config",
    "config_from_json",
    "config_to_json_dict",
    "run_experiment",
    "run_ablation",
    "generate_dataset_files",
    "build_risk_report",
]

PHASES = ("base", "st_image", "st_region", "ts_image", "ts_pseudo")

ABLATION_AXES = ("tau", "lr", "batch")

DEFAULT_TAU_GRID = (0.1, 0.5, 1.0, 5.0)

# Calibrated feature-scale defaults (one committed calibration run; the
# transfer phases use gentler rates the closer they run to the optimum).
DEFAULT_TRAIN = dict(
    learning_rate=0.01, momentum=0.9, epochs=5, batch_size=64, pseudo_label_threshold=0.95
)
DEFAULT_PHASE_OVERRIDES = {
    "base": {"learning_rate": 0.05, "epochs": 30},
    "ts_image": {"learning_rate": 3e-4},
    "ts_pseudo": {"learning_rate": 0.03},
}


@dataclass
class ExperimentConfig:
    dataset: SyntheticDomainSpec | dict
    phases: list[str] = field(default_factory=lambda: list(PHASES))
    loss: LossConfig = field(default_factory=LossConfig)
    train: dict = field(default_factory=dict)
    phase_overrides: dict = field(default_factory=dict)
    seed: int = 0
    output_dir: str = "runs/experiment"
    hidden_dim: int = 0
    region_groups: int = 1000
    positive_class: int = 0

    def __post_init__(self):
        if not self.phases:
            raise ValueError("phase list must be nonempty")
        for p in self.phases:
            if p not in PHASES:
                raise ValueError(f"unknown phase {p!r}, valid phases: {PHASES}")
        if isinstance(self.dataset, dict):
            if set(self.dataset) != {"source", "target"}:
                raise ValueError("file dataset must map exactly 'source' and 'target' paths")
        elif not isinstance(self.dataset, SyntheticDomainSpec):
            raise ValueError("dataset must be a SyntheticDomainSpec or a file-path mapping")
        unknown = set(self.phase_overrides) - set(PHASES)
        if unknown:
            raise ValueError(f"phase_overrides for unknown phases: {sorted(unknown)}")

    def train_for(self, phase: str) -> TrainConfig:
        """Per-phase training settings; tau always mirrors the loss config."""
        merged = dict(DEFAULT_TRAIN)
        merged.update(self.train)
        merged.update(self.phase_overrides.get(phase, {}))
        merged["tau"] = self.loss.tau
        merged["seed"] = _subseed(self.seed, f"train_{phase}")
        return TrainConfig(**merged)


def _subseed(seed: int, tag: str) -> int:
    return int(seed) + (zlib.crc32(tag.encode()) & 0xFFFF)


def standard_benchmark_config(seed: int = 0, output_dir: str = "runs/benchmark") -> ExperimentConfig:
    """The rotated-Gaussian benchmark: 3 classes in 8 dims, three quarter-turn
    planes plus a translation, 2000 samples per domain."""
    spec = SyntheticDomainSpec(
        num_classes=3,
        dim=8,
        noise_sigma=0.5,
        class_mixture=[1 / 3, 1 / 3, 1 / 3],
        samples_per_domain=2000,
        radius=3.0,
        rotation_angles=[np.pi / 2] * 3,
        translation=[2.0] * 8,
    )
    return ExperimentConfig(
        dataset=spec,
        phases=list(PHASES),
        loss=LossConfig(tau=0.5),
        phase_overrides={k: dict(v) for k, v in DEFAULT_PHASE_OVERRIDES.items()},
        seed=seed,
        output_dir=output_dir,
    )


def imbalanced_benchmark_config(seed: int = 0, output_dir: str = "runs/imbalance") -> ExperimentConfig:
    """Two classes mixed 1:9 under the same shift as the standard benchmark."""
    cfg = standard_benchmark_config(seed, output_dir)
    cfg.dataset = dataclasses.replace(
        cfg.dataset, num_classes=2, class_mixture=[0.1, 0.9]
    )
    cfg.phases = ["base", "st_image"]
    return cfg


def config_to_json_dict(cfg: ExperimentConfig) -> dict:
    if isinstance(cfg.dataset, SyntheticDomainSpec):
        spec = dataclasses.asdict(cfg.dataset)
        if spec["class_means"] is not None:
            spec["class_means"] = np.asarray(spec["class_means"]).tolist()
        dataset = {"synthetic": spec}
    else:
        dataset = {"files": dict(cfg.dataset)}
    return {
        "dataset": dataset,
        "phases": list(cfg.phases),
        "loss": {"tau": cfg.loss.tau, "variant": cfg.loss.variant},
        "train": dict(cfg.train),
        "phase_overrides": {k: dict(v) for k, v in cfg.phase_overrides.items()},
        "seed": cfg.seed,
        "output_dir": str(cfg.output_dir),
        "hidden_dim": cfg.hidden_dim,
        "region_groups": cfg.region_groups,
        "positive_class": cfg.positive_class,
    }


def config_from_json(doc: dict) -> ExperimentConfig:
    """Build a config from its JSON form, rejecting unknown keys loudly."""
    if not isinstance(doc, dict):
        raise ValueError("config must be a JSON object")
    known = {
        "dataset", "phases", "loss", "train", "phase_overrides",
        "seed", "output_dir", "hidden_dim", "region_groups", "positive_class",
    }
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if "dataset" not in doc:
        raise ValueError("config needs a 'dataset' section")
    ds = doc["dataset"]
    if "synthetic" in ds:
        dataset = SyntheticDomainSpec(**ds["synthetic"])
    elif "files" in ds:
        dataset = dict(ds["files"])
    else:
        raise ValueError("dataset must contain 'synthetic' or 'files'")
    loss = LossConfig(**doc.get("loss", {}))
    kwargs = {k: doc[k] for k in known & set(doc) if k not in ("dataset", "loss")}
    return ExperimentConfig(dataset=dataset, loss=loss, **kwargs)


@dataclass
class _PreparedData:
    source: FeatureSet          # genuine source rows only
    target: FeatureSet          # evaluation target pool
    st_pairing: np.ndarray      # (target_index, source_index) counterpart pairs
    ts_counterparts: FeatureSet | None  # back-translated features, aligned with ts_train_rows
    ts_train_rows: np.ndarray | None    # target-row indices matching ts_counterparts
    spec: SyntheticDomainSpec | None    # concrete spec (synthetic only)
    num_classes: int


def _prepare_synthetic(cfg: ExperimentConfig) -> _PreparedData:
    spec = cfg.dataset
    means = spec.resolve_means(np.random.default_rng(_subseed(cfg.seed, "means")))
    concrete = dataclasses.replace(spec, class_means=means)
    source, target, pairing = generate(concrete, _subseed(cfg.seed, "data"))
    ts_feats = FeatureSet(invert_shift(concrete, target.features), target.labels)
    return _PreparedData(
        source=source,
        target=target,
        st_pairing=pairing,
        ts_counterparts=ts_feats,
        ts_train_rows=np.arange(len(target)),
        spec=concrete,
        num_classes=concrete.num_classes,
    )


def _prepare_files(cfg: ExperimentConfig) -> _PreparedData:
    source_all, target, st_pairing, ts_pairing = load_domain_pair(
        cfg.dataset["source"], cfg.dataset["target"]
    )
    # rows with translated_of set are derived translations, not annotated
    # source data: keep them out of base training and the genuine pool
    derived = np.zeros(len(source_all), dtype=bool)
    if len(ts_pairing):
        derived[ts_pairing[:, 0]] = True
    genuine = np.flatnonzero(~derived)
    genuine_lookup = {int(old): new for new, old in enumerate(genuine)}
    source = FeatureSet(source_all.features[genuine], source_all.labels[genuine])
    remapped = [
        (int(tgt_i), genuine_lookup[int(src_i)])
        for tgt_i, src_i in st_pairing
        if int(src_i) in genuine_lookup
    ]
    st_pairs = np.array(remapped, dtype=np.int64).reshape(-1, 2)
    if len(ts_pairing):
        ts_counterparts = FeatureSet(
            source_all.features[ts_pairing[:, 0]], target.labels[ts_pairing[:, 1]]
        )
        ts_rows = ts_pairing[:, 1]
    else:
        ts_counterparts, ts_rows = None, None
    num_classes = int(max(source.labels.max(), target.labels.max())) + 1
    return _PreparedData(source, target, st_pairs, ts_counterparts, ts_rows, None, num_classes)


def _prepare_data(cfg: ExperimentConfig) -> _PreparedData:
    if isinstance(cfg.dataset, SyntheticDomainSpec):
        return _prepare_synthetic(cfg)
    return _prepare_files(cfg)


@dataclass
class RunResult:
    output_dir: str
    evals: dict[str, EvalReport]
    histories: dict[str, TrainHistory]
    risk_report: RiskReport | None
    model: AdapterModel

    @property
    def final_eval(self) -> EvalReport:
        return list(self.evals.values())[-1]


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _nn_labels(query: np.ndarray, ref: np.ndarray, ref_labels: np.ndarray) -> np.ndarray:
    """Hard 1-nearest-neighbor labels under Euclidean distance."""
    d2 = np.sum((query[:, None, :] - ref[None, :, :]) ** 2, axis=2)
    return ref_labels[np.argmin(d2, axis=1)]


def build_risk_report(
    model: AdapterModel,
    data: _PreparedData,
    tau: float,
    positive_class: int,
) -> RiskReport | None:
    """Bound-chain report for the current model on the paired subsets.

    The hypothesis is the similarity-softmax nearest-neighbor classifier
    over adapted source features. The domain labeling functions extend
    across domains by hard 1-NN in raw feature space: f_S of a target
    point is the label of its nearest source sample and vice versa.
    """
    if len(data.st_pairing) == 0:
        return None
    tgt_idx, src_idx = data.st_pairing[:, 0], data.st_pairing[:, 1]
    src_feats = data.source.features[src_idx]
    tgt_feats = data.target.features[tgt_idx]
    bin_src = (data.source.labels == positive_class).astype(np.int64)
    bin_tgt = (data.target.labels == positive_class).astype(np.int64)

    f_s_on_target = _nn_labels(tgt_feats, data.source.features, bin_src)
    f_t_on_source = _nn_labels(src_feats, data.target.features, bin_tgt)

    source_ls = LabeledSet(src_feats, bin_src[src_idx], f_t_on_source)
    target_ls = LabeledSet(tgt_feats, f_s_on_target, bin_tgt[tgt_idx])

    adapted_source = LabeledSet(model.adapt(src_feats), bin_src[src_idx], bin_src[src_idx])
    h = lambda feats: np.atleast_1d(nn_classifier(model.adapt(feats), adapted_source, tau))
    batch = FeatureBatch(
        model.adapt(tgt_feats), model.adapt(src_feats), labels=bin_src[src_idx]
    )
    return bound_chain_report(h, source_ls, target_ls, batch, LossConfig(tau=tau))


def _region_batches(cfg: ExperimentConfig, data: _PreparedData, batch_size: int):
    if data.spec is None:
        raise DataError(
            "region-level transfer needs a synthetic dataset spec; feature "
            "files carry no region grouping"
        )
    src_groups, cpt_groups = generate_region_groups(
        data.spec, cfg.region_groups, _subseed(cfg.seed, "regions")
    )
    sel_seed = _subseed(cfg.seed, "region_select")
    src_vecs = make_region_vectors(src_groups, sel_seed)
    cpt_vecs = make_region_vectors(cpt_groups, sel_seed)
    rpair = np.column_stack([np.arange(len(src_vecs))] * 2)
    return make_batches(cpt_vecs, src_vecs, rpair, batch_size, _subseed(cfg.seed, "rbatch"))


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    """Execute the configured phase schedule, evaluating after every phase.

    Writes manifest, per-phase histories/checkpoints/eval reports, the
    final checkpoint, and the bound-chain risk report to cfg.output_dir.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = _prepare_data(cfg)

    _write_json(
        out / "manifest.json",
        {
            "toolkit_version": __version__,
            "seed": cfg.seed,
            "config": config_to_json_dict(cfg),
        },
    )

    model = AdapterModel.create(
        data.source.dim,
        data.num_classes,
        hidden_dim=cfg.hidden_dim,
        seed=_subseed(cfg.seed, "model"),
    )
    eval_ctx = EvalContext(data.source.features, data.target.features, data.target.labels)

    evals: dict[str, EvalReport] = {}
    histories: dict[str, TrainHistory] = {}
    for phase in cfg.phases:
        t_cfg = cfg.train_for(phase)
        if phase == "base":
            history = train_base(
                model, data.source.features, data.source.labels, t_cfg, eval_ctx
            )
        elif phase == "st_image":
            if len(data.st_pairing) == 0:
                raise DataError("st_image needs counterpart pairs (translated_of column)")
            batches = make_batches(
                data.target, data.source, data.st_pairing,
                t_cfg.batch_size, _subseed(cfg.seed, "st_batch"),
            )
            history = transfer_s_to_t(
                model, t_cfg, image_batches=batches, level="image", eval_ctx=eval_ctx
            )
        elif phase == "st_region":
            batches = _region_batches(cfg, data, t_cfg.batch_size)
            history = transfer_s_to_t(
                model, t_cfg, region_batches=batches, level="region", eval_ctx=eval_ctx
            )
        elif phase == "ts_image":
            if data.ts_counterparts is None:
                raise DataError(
                    "ts_image needs back-translated counterparts (synthetic shift "
                    "or source rows with translated_of)"
                )
            tpair = np.column_stack(
                [np.arange(len(data.ts_counterparts)), data.ts_train_rows]
            )
            batches = make_batches(
                data.ts_counterparts, data.target, tpair,
                t_cfg.batch_size, _subseed(cfg.seed, "ts_batch"),
            )
            history = transfer_t_to_s(model, batches, t_cfg, eval_ctx=eval_ctx)
        elif phase == "ts_pseudo":
            if data.ts_counterparts is None:
                raise DataError("ts_pseudo needs back-translated counterparts")
            selected = pseudo_label(
                model, data.ts_counterparts.features, t_cfg.pseudo_label_threshold
            )
            train_rows = data.ts_train_rows[selected.indices]
            pseudo = PseudoLabelSet(
                selected.indices, data.target.features[train_rows], selected.labels
            )
            history = finetune_pseudo(model, pseudo, t_cfg, eval_ctx=eval_ctx)
        else:  # unreachable, phases validated in the config
            raise AssertionError(phase)

        histories[phase] = history
        evals[phase] = evaluate(
            model, data.target, data.source,
            data.st_pairing if len(data.st_pairing) else None,
        )
        history.to_csv(out / f"history_{phase}.csv")
        save_checkpoint(model, out / f"checkpoint_{phase}.json", config_echo={"phase": phase})
        _write_json(out / f"eval_{phase}.json", evals[phase].to_json_dict())

    save_checkpoint(
        model, out / "checkpoint_final.json", config_echo={"phase": cfg.phases[-1]}
    )
    risk = build_risk_report(model, data, cfg.loss.tau, cfg.positive_class)
    if risk is not None:
        _write_json(out / "risk_report.json", risk.to_json_dict())
    return RunResult(str(out), evals, histories, risk, model)


def generate_dataset_files(cfg: ExperimentConfig, out_dir) -> dict:
    """Write source.csv / target.csv for a synthetic spec plus a summary.

    The target file declares the counterpart pairing via translated_of.
    Returns the summary dict (paths, class histograms, mixture).
    """
    if not isinstance(cfg.dataset, SyntheticDomainSpec):
        raise ValueError("gen needs a synthetic dataset spec")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = _prepare_synthetic(cfg)
    n = len(data.source)
    src_path = out / "source.csv"
    tgt_path = out / "target.csv"
    save_features(src_path, data.source, "source")
    trans = np.full(len(data.target), -1)
    trans[data.st_pairing[:, 0]] = data.st_pairing[:, 1]
    save_features(
        tgt_path, data.target, "target",
        ids=np.arange(n, n + len(data.target)), translated_of=trans,
    )
    summary = {
        "source_file": src_path.name,
        "target_file": tgt_path.name,
        "samples": {"source": n, "target": len(data.target)},
        "class_mixture": list(np.asarray(cfg.dataset.class_mixture, dtype=float)),
        "source_class_counts": np.bincount(
            data.source.labels, minlength=data.num_classes
        ).tolist(),
        "target_class_counts": np.bincount(
            data.target.labels, minlength=data.num_classes
        ).tolist(),
        "seed": cfg.seed,
    }
    _write_json(out / "summary.json", summary)
    return summary


def run_ablation(
    cfg: ExperimentConfig, axis: str, values: list[float], out_dir
) -> list[dict]:
    """One full run per value of the swept axis, everything else fixed.

    tau sweeps the loss temperature, lr the contrast-transfer learning
    rate, batch the batch size of every phase. Emits ablation_<axis>.csv
    and returns its rows.
    """
    if axis not in ABLATION_AXES:
        raise ValueError(f"axis must be one of {ABLATION_AXES}, got {axis!r}")
    if len(values) < 2:
        raise ValueError("ablation needs at least two values")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        sub = dataclasses.replace(
            cfg, output_dir=str(out / f"ablate_{axis}_{value:g}")
        )
        if axis == "tau":
            sub.loss = LossConfig(tau=float(value), variant=cfg.loss.variant)
        elif axis == "lr":
            overrides = {k: dict(v) for k, v in sub.phase_overrides.items()}
            for phase in ("st_image", "st_region"):
                overrides.setdefault(phase, {})["learning_rate"] = float(value)
            sub.phase_overrides = overrides
        elif axis == "batch":
            sub.train = dict(sub.train)
            sub.train["batch_size"] = int(value)
            overrides = {k: dict(v) for k, v in sub.phase_overrides.items()}
            for patch in overrides.values():
                patch.pop("batch_size", None)
            sub.phase_overrides = overrides
        result = run_experiment(sub)
        final = result.final_eval
        rows.append(
            {
                "axis": axis,
                "value": float(value),
                "target_accuracy": final.target_accuracy,
                "mmd_source_target": final.mmd_source_target,
            }
        )
    csv_path = out / f"ablation_{axis}.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("axis,value,target_accuracy,mmd_source_target\n")
        for r in rows:
            fh.write(
                f"{r['axis']},{r['value']!r},{r['target_accuracy']!r},"
                f"{r['mmd_source_target']!r}\n"
            )
    return rows
