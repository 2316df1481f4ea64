"""Synthetic paired-domain generation, region pairing, CSV ingestion, batching.

The target domain is produced from the source generative model by a known
invertible shift map (rotation in coordinate planes, then scale, then
translation). The shift plays the role of a perfect cross-domain
translator: every source draw has an exact counterpart, and target draws
can be mapped back exactly. Real feature files use the CSV schema below
and declare counterparts via the translated_of column.

CSV schema (one file per domain):
    id,domain,class,translated_of,f0,...,f{d-1}
domain is 'source' or 'target'; translated_of is the id of the row's
cross-domain counterpart, or empty; features are decimal floats.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .losses import FeatureBatch

__all__ = [
    "DataError",
    "FeatureSet",
    "SyntheticDomainSpec",
    "RegionGroup",
    "generate",
    "apply_shift",
    "invert_shift",
    "generate_region_groups",
    "make_region_vectors",
    "save_features",
    "load_features",
    "load_domain_pair",
    "make_batches",
]

DOMAINS = ("source", "target")


@dataclass
class FeatureSet:
    """Feature vectors with integer class labels."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be an (N, d) array")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError(
                f"labels shape {self.labels.shape} does not match feature count "
                f"{self.features.shape[0]}"
            )

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class SyntheticDomainSpec:
    """Generative description of the source domain and the domain shift.

    Class means are drawn on the unit sphere (scaled by radius) from the
    generation seed unless given explicitly. The shift rotates in the
    coordinate planes (0,1), (2,3), ... — one angle per plane — then
    scales and translates, so it is orthogonal-by-construction and exactly
    invertible.
    """

    num_classes: int
    dim: int
    noise_sigma: float
    class_mixture: list[float]
    samples_per_domain: int
    radius: float = 3.0
    rotation_angles: list[float] = field(default_factory=list)
    translation: list[float] | None = None
    scale: float = 1.0
    unpaired_target: int = 0
    class_means: np.ndarray | None = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.samples_per_domain < 1:
            raise ValueError("samples_per_domain must be >= 1")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.unpaired_target < 0:
            raise ValueError("unpaired_target must be nonnegative")
        mix = np.asarray(self.class_mixture, dtype=np.float64)
        if mix.shape != (self.num_classes,) or np.any(mix < 0):
            raise ValueError("class_mixture must be a nonnegative vector of length num_classes")
        if abs(mix.sum() - 1.0) > 1e-9:
            raise ValueError(f"class_mixture must sum to 1, got {mix.sum()}")
        if 2 * len(self.rotation_angles) > self.dim:
            raise ValueError(
                f"{len(self.rotation_angles)} rotation planes need dim >= "
                f"{2 * len(self.rotation_angles)}, got {self.dim}"
            )
        if self.translation is not None and len(self.translation) != self.dim:
            raise ValueError("translation length must equal dim")
        if self.class_means is not None:
            self.class_means = np.asarray(self.class_means, dtype=np.float64)
            if self.class_means.shape != (self.num_classes, self.dim):
                raise ValueError("class_means must have shape (num_classes, dim)")

    def rotation_matrix(self) -> np.ndarray:
        r = np.eye(self.dim)
        for k, angle in enumerate(self.rotation_angles):
            i, j = 2 * k, 2 * k + 1
            c, s = np.cos(angle), np.sin(angle)
            block = np.eye(self.dim)
            block[i, i] = c
            block[i, j] = -s
            block[j, i] = s
            block[j, j] = c
            r = block @ r
        return r

    def resolve_means(self, rng: np.random.Generator) -> np.ndarray:
        if self.class_means is not None:
            means = self.class_means
        else:
            raw = rng.normal(size=(self.num_classes, self.dim))
            means = self.radius * raw / np.linalg.norm(raw, axis=1, keepdims=True)
        if self.noise_sigma == 0.0:
            d2 = np.sum((means[:, None, :] - means[None, :, :]) ** 2, axis=2)
            np.fill_diagonal(d2, np.inf)
            if np.any(d2 <= 0):
                raise ValueError("degenerate spec: zero noise with duplicate class means")
        return means

    def translation_vector(self) -> np.ndarray:
        if self.translation is None:
            return np.zeros(self.dim)
        return np.asarray(self.translation, dtype=np.float64)


def apply_shift(spec: SyntheticDomainSpec, x) -> np.ndarray:
    """Map source-style points to target style: scale * R x + t."""
    x = np.asarray(x, dtype=np.float64)
    return spec.scale * (x @ spec.rotation_matrix().T) + spec.translation_vector()


def invert_shift(spec: SyntheticDomainSpec, y) -> np.ndarray:
    """Exact inverse of apply_shift (target style back to source style)."""
    y = np.asarray(y, dtype=np.float64)
    return ((y - spec.translation_vector()) / spec.scale) @ spec.rotation_matrix()


def generate(
    spec: SyntheticDomainSpec, seed: int
) -> tuple[FeatureSet, FeatureSet, np.ndarray]:
    """Draw a paired source/target instance of the spec.

    Every source draw emits its shifted counterpart into the target set at
    the same index (exact pairing from the shared latent draw); the target
    set then appends spec.unpaired_target fresh shifted draws standing in
    for the unlabeled target pool. Returns (source, target, pairing) with
    pairing rows (target_index, source_index).
    """
    rng = np.random.default_rng(seed)
    means = spec.resolve_means(rng)
    n = spec.samples_per_domain

    labels = rng.choice(spec.num_classes, size=n, p=spec.class_mixture)
    noise = rng.normal(scale=spec.noise_sigma, size=(n, spec.dim))
    src = means[labels] + noise
    tgt = apply_shift(spec, src)

    extra = spec.unpaired_target
    if extra:
        extra_labels = rng.choice(spec.num_classes, size=extra, p=spec.class_mixture)
        extra_noise = rng.normal(scale=spec.noise_sigma, size=(extra, spec.dim))
        tgt = np.vstack([tgt, apply_shift(spec, means[extra_labels] + extra_noise)])
        tgt_labels = np.concatenate([labels, extra_labels])
    else:
        tgt_labels = labels.copy()

    pairing = np.column_stack([np.arange(n), np.arange(n)])
    return FeatureSet(src, labels), FeatureSet(tgt, tgt_labels), pairing


@dataclass
class RegionGroup:
    """Per-image group of region feature vectors with per-region labels."""

    image_id: int
    region_features: np.ndarray
    region_labels: np.ndarray

    def __post_init__(self):
        self.region_features = np.asarray(self.region_features, dtype=np.float64)
        self.region_labels = np.asarray(self.region_labels, dtype=np.int64)
        if self.region_features.ndim != 2 or self.region_features.shape[0] < 1:
            raise ValueError("a region group needs at least one (m, d) region row")
        if self.region_labels.shape != (self.region_features.shape[0],):
            raise ValueError("region_labels must match the number of regions")

    def __len__(self) -> int:
        return self.region_features.shape[0]


def generate_region_groups(
    spec: SyntheticDomainSpec, n_groups: int, seed: int
) -> tuple[list[RegionGroup], list[RegionGroup]]:
    """Synthesize paired region groups (source side, shifted counterpart side).

    Each group holds one or two regions drawn from the class mixture; the
    counterpart group shares the structure with every region shifted.
    """
    rng = np.random.default_rng(seed)
    means = spec.resolve_means(rng)
    source_groups = []
    counterpart_groups = []
    for g in range(n_groups):
        m = int(rng.integers(1, 3))
        labs = rng.choice(spec.num_classes, size=m, p=spec.class_mixture)
        feats = means[labs] + rng.normal(scale=spec.noise_sigma, size=(m, spec.dim))
        source_groups.append(RegionGroup(g, feats, labs))
        counterpart_groups.append(RegionGroup(g, apply_shift(spec, feats), labs))
    return source_groups, counterpart_groups


def make_region_vectors(groups: list[RegionGroup], seed: int) -> FeatureSet:
    """Concatenate up to two (seeded-random) regions per group into long vectors.

    Groups with a single region duplicate it so every output has dimension
    2 * d_region; zero-padding would halve the cosine signal and risk
    zero-norm rows. Concatenation order follows region index. The selection
    depends only on the group sizes and the seed, so calling with a paired
    group list (identical structure) reproduces the same choice. The output
    label is the first selected region's label.
    """
    if not groups:
        raise ValueError("make_region_vectors needs at least one group")
    rng = np.random.default_rng(seed)
    vectors = []
    labels = []
    for group in groups:
        if len(group) == 0:
            raise ValueError(f"empty region group {group.image_id}")
        if len(group) <= 2:
            chosen = np.arange(len(group))
        else:
            chosen = np.sort(rng.choice(len(group), size=2, replace=False))
        feats = group.region_features[chosen]
        if feats.shape[0] == 1:
            feats = np.vstack([feats, feats])
        vectors.append(feats.reshape(-1))
        labels.append(group.region_labels[chosen[0]])
    return FeatureSet(np.array(vectors), np.array(labels))


def save_features(
    path,
    featset: FeatureSet,
    domain: str,
    ids: np.ndarray | None = None,
    translated_of: np.ndarray | None = None,
) -> None:
    """Write one domain to CSV. translated_of holds counterpart ids (-1 = none)."""
    if domain not in DOMAINS:
        raise ValueError(f"domain must be one of {DOMAINS}")
    n, d = featset.features.shape
    ids = np.arange(n) if ids is None else np.asarray(ids)
    trans = np.full(n, -1) if translated_of is None else np.asarray(translated_of)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "domain", "class", "translated_of"] + [f"f{k}" for k in range(d)])
        for i in range(n):
            row = [int(ids[i]), domain, int(featset.labels[i])]
            row.append("" if trans[i] < 0 else int(trans[i]))
            row.extend(repr(float(v)) for v in featset.features[i])
            writer.writerow(row)


def load_features(path) -> tuple[FeatureSet, np.ndarray, np.ndarray]:
    """Parse one domain CSV. Returns (set, ids, translated_of) with -1 for empty.

    Raises DataError naming the offending line on any malformed row.
    """
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header row") from None
        if header[:4] != ["id", "domain", "class", "translated_of"]:
            raise DataError(f"{path}: bad header {header[:4]}")
        d = len(header) - 4
        if d < 1 or header[4:] != [f"f{k}" for k in range(d)]:
            raise DataError(f"{path}: bad feature columns in header")

        ids, labels, trans, feats = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4 + d:
                raise DataError(
                    f"{path} line {lineno}: expected {4 + d} fields, got {len(row)}"
                )
            try:
                ids.append(int(row[0]))
                if row[1] not in DOMAINS:
                    raise ValueError(f"bad domain {row[1]!r}")
                labels.append(int(row[2]))
                trans.append(int(row[3]) if row[3] != "" else -1)
                feats.append([float(v) for v in row[4:]])
            except ValueError as exc:
                raise DataError(f"{path} line {lineno}: {exc}") from None

    features = np.array(feats, dtype=np.float64).reshape(len(ids), d)
    return (
        FeatureSet(features, np.array(labels, dtype=np.int64)),
        np.array(ids, dtype=np.int64),
        np.array(trans, dtype=np.int64),
    )


def _resolve(trans: np.ndarray, own_index: dict, other_index: dict, path) -> np.ndarray:
    pairs = []
    for i, ref in enumerate(trans):
        if ref < 0:
            continue
        if ref not in other_index:
            raise DataError(f"{path}: dangling translated_of reference {ref}")
        pairs.append((i, other_index[ref]))
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def load_domain_pair(source_path, target_path):
    """Load both domain files and resolve counterpart references.

    Returns (source, target, st_pairing, ts_pairing):
    st_pairing rows are (target_index, source_index) — the target row is a
    source sample translated into the target domain; ts_pairing rows are
    (source_index, target_index) for the reverse direction.
    """
    source, src_ids, src_trans = load_features(source_path)
    target, tgt_ids, tgt_trans = load_features(target_path)
    src_index = {int(v): i for i, v in enumerate(src_ids)}
    tgt_index = {int(v): i for i, v in enumerate(tgt_ids)}
    if len(src_index) != len(src_ids):
        raise DataError(f"{source_path}: duplicate ids")
    if len(tgt_index) != len(tgt_ids):
        raise DataError(f"{target_path}: duplicate ids")
    st_pairing = _resolve(tgt_trans, tgt_index, src_index, target_path)
    ts_pairing = _resolve(src_trans, src_index, tgt_index, source_path)
    return source, target, st_pairing, ts_pairing


def make_batches(
    set_a: FeatureSet,
    set_b: FeatureSet,
    pairing: np.ndarray,
    batch_size: int,
    seed: int,
) -> list[FeatureBatch]:
    """Shuffle pairs (seeded) and partition into batches of exactly batch_size.

    pairing rows are (index into set_a, index into set_b); side_a[i] is the
    translated counterpart of side_b[i]. The final partial batch is dropped:
    the contrast loss semantics depend on N and padding would distort the
    softmax denominator. Labels come from set_b rows.
    """
    pairing = np.asarray(pairing)
    if pairing.ndim != 2 or pairing.shape[1] != 2:
        raise ValueError("pairing must be a (P, 2) index array")
    n_pairs = pairing.shape[0]
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if batch_size > n_pairs:
        raise ValueError(f"batch_size {batch_size} exceeds available pairs {n_pairs}")
    if n_pairs and (pairing[:, 0].max() >= len(set_a) or pairing[:, 1].max() >= len(set_b)):
        raise ValueError("pairing index out of range")

    order = np.random.default_rng(seed).permutation(n_pairs)
    batches = []
    for start in range(0, n_pairs - batch_size + 1, batch_size):
        rows = pairing[order[start : start + batch_size]]
        batches.append(
            FeatureBatch(
                set_a.features[rows[:, 0]],
                set_b.features[rows[:, 1]],
                labels=set_b.labels[rows[:, 1]],
            )
        )
    return batches
