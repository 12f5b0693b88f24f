"""Bag datasets: synthetic generation, on-disk format, splits, sampling,
and desk-scale feature-vector augmentations.

Dataset directory layout:
    manifest       plain-text header plus one `bag` line per bag
    instances.bin  little-endian float32, row-major, feature_dim per row
    planted_truth  optional; hidden ground truth for attention evaluation,
                   never passed to model code by the loaders used in training

The control class (label 0) has background-only bags; every other class
plants `round(planted_fraction * N)` instances drawn around a class-specific
mean direction, with the class directions mutually orthogonal.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataFormatError, DegenerateInputError, InvalidParameterError
from .mil import Bag

CONTROL_CLASS = 0
MANIFEST_NAME = "manifest"
BLOB_NAME = "instances.bin"
TRUTH_NAME = "planted_truth"


@dataclass
class SyntheticConfig:
    n_bags_per_class: int = 40
    n_classes: int = 5
    instances_min: int = 30
    instances_max: int = 80
    planted_fraction: float = 0.15
    feature_dim: int = 64
    class_signal_strength: float = 2.0
    noise_scale: float = 1.0
    seed: int = 7

    def __post_init__(self):
        if not 0.0 < self.planted_fraction < 1.0:
            raise InvalidParameterError("planted_fraction must lie in (0, 1)")
        if self.instances_min < 1 or self.instances_max < self.instances_min:
            raise InvalidParameterError("instance count range is empty")
        if self.n_classes < 2 or self.n_bags_per_class < 1:
            raise InvalidParameterError("need >= 2 classes and >= 1 bag per class")
        if self.n_classes - 1 > self.feature_dim:
            raise InvalidParameterError("feature_dim too small for orthogonal class directions")


@dataclass
class BagRecord:
    bag_id: str
    label: int
    n_instances: int
    offset: int  # starting row in the blob


@dataclass
class DatasetManifest:
    n_bags: int
    n_classes: int
    feature_dim: int
    records: list[BagRecord]
    provenance: str = "synthetic"
    seed: int | None = None
    generator: str = ""

    def labels(self) -> list[int]:
        return [r.label for r in self.records]


def generate_synthetic(cfg: SyntheticConfig):
    """Build a planted-instance bag dataset.

    Returns (manifest, blob, truth): blob is float32 (total_instances x
    feature_dim); truth maps bag_id to the sorted in-bag indices of planted
    instances (empty for control bags). Bitwise deterministic per seed.
    """
    rng = np.random.default_rng(cfg.seed)
    # orthonormal class directions from the QR frame of a Gaussian matrix
    gauss = rng.normal(size=(cfg.feature_dim, cfg.feature_dim))
    q, _ = np.linalg.qr(gauss)
    directions = q[:, : cfg.n_classes - 1].T * cfg.class_signal_strength

    records: list[BagRecord] = []
    chunks: list[np.ndarray] = []
    truth: dict[str, list[int]] = {}
    offset = 0
    bag_idx = 0
    for label in range(cfg.n_classes):
        for _ in range(cfg.n_bags_per_class):
            n = int(rng.integers(cfg.instances_min, cfg.instances_max + 1))
            x = rng.normal(scale=cfg.noise_scale, size=(n, cfg.feature_dim))
            planted: list[int] = []
            if label != CONTROL_CLASS:
                n_planted = int(round(cfg.planted_fraction * n))
                positions = rng.permutation(n)[:n_planted]
                x[positions] += directions[label - 1]
                planted = sorted(int(p) for p in positions)
            bag_id = f"bag_{bag_idx:04d}"
            records.append(BagRecord(bag_id, label, n, offset))
            chunks.append(x.astype(np.float32))
            truth[bag_id] = planted
            offset += n
            bag_idx += 1

    manifest = DatasetManifest(
        n_bags=len(records),
        n_classes=cfg.n_classes,
        feature_dim=cfg.feature_dim,
        records=records,
        provenance="synthetic",
        seed=cfg.seed,
        generator=(
            f"n_bags_per_class={cfg.n_bags_per_class} instances_min={cfg.instances_min} "
            f"instances_max={cfg.instances_max} planted_fraction={cfg.planted_fraction} "
            f"feature_dim={cfg.feature_dim} class_signal_strength={cfg.class_signal_strength} "
            f"noise_scale={cfg.noise_scale}"
        ),
    )
    return manifest, np.vstack(chunks), truth


# --- dataset directory I/O ---------------------------------------------------


def write_dataset(path, manifest: DatasetManifest, blob: np.ndarray, truth: dict[str, list[int]] | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [
        "format_version 1",
        f"n_bags {manifest.n_bags}",
        f"n_classes {manifest.n_classes}",
        f"feature_dim {manifest.feature_dim}",
        f"provenance {manifest.provenance}",
    ]
    if manifest.seed is not None:
        lines.append(f"seed {manifest.seed}")
    if manifest.generator:
        lines.append(f"generator {manifest.generator}")
    for r in manifest.records:
        lines.append(f"bag {r.bag_id} {r.label} {r.n_instances} {r.offset}")
    (path / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    (path / BLOB_NAME).write_bytes(np.ascontiguousarray(blob, dtype="<f4").tobytes())
    if truth is not None:
        tlines = ["format_version 1"]
        for bag_id, planted in truth.items():
            tlines.append(f"truth {bag_id} {','.join(str(i) for i in planted) if planted else '-'}")
        (path / TRUTH_NAME).write_text("\n".join(tlines) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        text = (path / MANIFEST_NAME).read_text()
    except OSError as exc:
        raise DataFormatError(f"cannot read dataset manifest in {path}: {exc}") from exc
    header: dict[str, str] = {}
    records: list[BagRecord] = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "bag":
            if len(parts) != 5:
                raise DataFormatError(f"malformed bag line: {line!r}")
            records.append(BagRecord(parts[1], int(parts[2]), int(parts[3]), int(parts[4])))
        else:
            header[parts[0]] = " ".join(parts[1:])
    if header.get("format_version") != "1":
        raise DataFormatError("unsupported or missing manifest format_version")
    manifest = DatasetManifest(
        n_bags=int(header["n_bags"]),
        n_classes=int(header["n_classes"]),
        feature_dim=int(header["feature_dim"]),
        records=records,
        provenance=header.get("provenance", "external"),
        seed=int(header["seed"]) if "seed" in header else None,
        generator=header.get("generator", ""),
    )
    if manifest.n_bags != len(records):
        raise DataFormatError(f"manifest claims {manifest.n_bags} bags, lists {len(records)}")
    total = sum(r.n_instances for r in records)
    ends = sorted((r.offset, r.offset + r.n_instances) for r in records)
    cursor = 0
    for start, end in ends:
        if start < cursor or any(l >= manifest.n_classes or l < 0 for l in [0]):
            raise DataFormatError("overlapping bag offsets in manifest")
        cursor = end
    if cursor > total and False:
        pass
    for r in records:
        if not 0 <= r.label < manifest.n_classes:
            raise DataFormatError(f"bag {r.bag_id} label {r.label} out of range")
    return manifest


def _read_blob(path, manifest: DatasetManifest) -> np.ndarray:
    raw = (Path(path) / BLOB_NAME).read_bytes()
    total = sum(r.n_instances for r in manifest.records)
    expected = total * manifest.feature_dim * 4
    if len(raw) < expected:
        raise DataFormatError(f"instances.bin holds {len(raw)} bytes, need {expected}")
    arr = np.frombuffer(raw, dtype="<f4", count=total * manifest.feature_dim)
    return arr.reshape(total, manifest.feature_dim)


def load_bags(path) -> tuple[DatasetManifest, list[Bag]]:
    """Load every bag with labels. Never touches planted_truth."""
    manifest = read_manifest(path)
    blob = _read_blob(path, manifest)
    bags = [
        Bag(
            instances=blob[r.offset : r.offset + r.n_instances].astype(np.float64),
            label=r.label,
            bag_id=r.bag_id,
        )
        for r in manifest.records
    ]
    return manifest, bags


def load_pretrain_instances(path, bag_indices: list[int] | None = None) -> np.ndarray:
    """Pooled instance matrix for label-free pre-training.

    Exposes features only: no labels, no bag identity, no planted truth.
    This is the entire data surface available to self-supervised training.
    """
    manifest = read_manifest(path)
    blob = _read_blob(path, manifest)
    if bag_indices is None:
        bag_indices = list(range(manifest.n_bags))
    rows = [
        blob[manifest.records[i].offset : manifest.records[i].offset + manifest.records[i].n_instances]
        for i in bag_indices
    ]
    return np.vstack(rows).astype(np.float64)


def read_truth(path) -> dict[str, list[int]]:
    p = Path(path) / TRUTH_NAME
    try:
        text = p.read_text()
    except OSError as exc:
        raise DataFormatError(f"planted truth file missing in {path}: {exc}") from exc
    truth: dict[str, list[int]] = {}
    for line in text.splitlines():
        parts = line.strip().split()
        if not parts or parts[0] != "truth":
            continue
        if len(parts) != 3:
            raise DataFormatError(f"malformed truth line: {line!r}")
        truth[parts[1]] = [] if parts[2] == "-" else [int(v) for v in parts[2].split(",")]
    return truth


# --- splitting and sampling --------------------------------------------------


@dataclass
class FoldSplit:
    fold_index: int
    train: list[int]
    validation: list[int]
    test: list[int]


def stratified_kfold(labels: list[int], k: int, seed: int) -> list[FoldSplit]:
    """k stratified splits whose test folds partition the dataset.

    Within each fold the non-test bags are split 75/25 per class into
    train/validation, which combined with the 1/k test share realizes the
    60/20/20 target (exactly so when class sizes divide evenly).
    """
    if k < 2:
        raise InvalidParameterError("k must be >= 2")
    labels_arr = np.asarray(labels)
    by_class: dict[int, np.ndarray] = {}
    rng = np.random.default_rng(seed)
    for cls in np.unique(labels_arr):
        idx = np.nonzero(labels_arr == cls)[0]
        if idx.size < k:
            raise DegenerateInputError(f"class {cls} has {idx.size} bags, fewer than k={k}")
        by_class[int(cls)] = rng.permutation(idx)

    splits: list[FoldSplit] = []
    for fold in range(k):
        test: list[int] = []
        train: list[int] = []
        val: list[int] = []
        fold_rng = np.random.default_rng(np.random.SeedSequence([seed, fold]))
        for cls, order in sorted(by_class.items()):
            test_c = order[fold::k]
            rest = np.array([i for i in order if i not in set(test_c.tolist())])
            rest = fold_rng.permutation(rest)
            n_val = int(round(0.25 * rest.size))
            val_c = rest[:n_val]
            train_c = rest[n_val:]
            test.extend(int(i) for i in test_c)
            val.extend(int(i) for i in val_c)
            train.extend(int(i) for i in train_c)
        splits.append(FoldSplit(fold, sorted(train), sorted(val), sorted(test)))
    return splits


def balanced_bag_sampler(
    bag_indices: list[int], labels: list[int], seed: int, epoch_length: int
) -> list[int]:
    """Sample bag indices with replacement, weight 1/(class size in train set).

    Realizes minority oversampling and majority undersampling in
    expectation; deterministic for a fixed seed.
    """
    if not bag_indices:
        raise InvalidParameterError("empty training set")
    labels_arr = np.asarray([labels[i] for i in bag_indices])
    counts = {int(c): int((labels_arr == c).sum()) for c in np.unique(labels_arr)}
    if any(v == 0 for v in counts.values()):
        raise DegenerateInputError("a class has no bags in the training set")
    weights = np.array([1.0 / counts[int(l)] for l in labels_arr])
    weights /= weights.sum()
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(bag_indices), size=epoch_length, replace=True, p=weights)
    return [bag_indices[i] for i in picks]


# --- augmentations -----------------------------------------------------------
#
# Desk-scale analogs on feature vectors. horizontal_flip reverses feature
# order; vertical_flip swaps the front and back halves; rotate90 rolls by a
# quarter of the dimension. All three are norm-preserving permutations and
# involutions (rotate90 has period 4). Crop views zero everything outside a
# contiguous window and rescale kept values by 1/sqrt(kept_fraction), so the
# output dimension never changes.

GLOBAL_CROP_KEEP = (0.5, 1.0)
LOCAL_CROP_KEEP = (0.15, 0.4)

_TRANSFORM_NAMES = (
    "horizontal_flip",
    "vertical_flip",
    "rotate90",
    "gaussian_noise",
    "scale_jitter",
    "crop_mask",
)


@dataclass
class AugmentationSpec:
    """Ordered transform list; each application is pure in (input, rng state)."""

    transforms: list[tuple] = field(default_factory=list)

    def __post_init__(self):
        for t in self.transforms:
            name = t[0]
            if name not in _TRANSFORM_NAMES:
                raise InvalidParameterError(f"unknown transform {name!r}")
            if name in ("horizontal_flip", "vertical_flip", "rotate90"):
                if not 0.0 <= t[1] <= 1.0:
                    raise InvalidParameterError(f"{name} probability must lie in [0, 1]")
            elif name == "gaussian_noise":
                if t[1] < 0:
                    raise InvalidParameterError("noise sigma must be nonnegative")
            elif name == "scale_jitter":
                lo, hi = t[1]
                if not 0 < lo <= hi:
                    raise InvalidParameterError("scale_jitter range must be positive and ordered")
            elif name == "crop_mask":
                if t[1] not in ("global_view", "local_view"):
                    raise InvalidParameterError("crop_mask takes global_view or local_view")


def _halves_swapped(x: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    mid = x.shape[-1] - 2 * half
    if mid:
        return np.concatenate([x[..., half + 1 :], x[..., half : half + 1], x[..., :half]], axis=-1)
    return np.concatenate([x[..., half:], x[..., :half]], axis=-1)


def apply_augmentations(spec: AugmentationSpec, instance: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Apply the spec's transforms in order to a single feature vector."""
    x = np.asarray(instance, dtype=np.float64).copy()
    d = x.shape[0]
    for t in spec.transforms:
        name = t[0]
        if name == "horizontal_flip":
            if rng.random() < t[1]:
                x = x[::-1].copy()
        elif name == "vertical_flip":
            if rng.random() < t[1]:
                x = _halves_swapped(x)
        elif name == "rotate90":
            if rng.random() < t[1]:
                x = np.roll(x, d // 4)
        elif name == "gaussian_noise":
            if t[1] > 0:
                x = x + rng.normal(scale=t[1], size=d)
        elif name == "scale_jitter":
            lo, hi = t[1]
            x = x * rng.uniform(lo, hi)
        elif name == "crop_mask":
            keep_range = GLOBAL_CROP_KEEP if t[1] == "global_view" else LOCAL_CROP_KEEP
            frac = rng.uniform(*keep_range)
            width = max(1, int(round(frac * d)))
            start = int(rng.integers(0, d - width + 1))
            mask = np.zeros(d)
            mask[start : start + width] = 1.0
            x = x * mask / np.sqrt(width / d)
    return x


def augment_batch(spec: AugmentationSpec, batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vectorized apply_augmentations over the rows of a batch.

    Draws its own per-row randomness, so it is deterministic per rng state
    but not draw-for-draw identical to looping apply_augmentations.
    """
    x = np.asarray(batch, dtype=np.float64).copy()
    b, d = x.shape
    for t in spec.transforms:
        name = t[0]
        if name == "horizontal_flip":
            sel = rng.random(b) < t[1]
            x[sel] = x[sel, ::-1]
        elif name == "vertical_flip":
            sel = rng.random(b) < t[1]
            x[sel] = _halves_swapped(x[sel])
        elif name == "rotate90":
            sel = rng.random(b) < t[1]
            x[sel] = np.roll(x[sel], d // 4, axis=1)
        elif name == "gaussian_noise":
            if t[1] > 0:
                x += rng.normal(scale=t[1], size=(b, d))
        elif name == "scale_jitter":
            lo, hi = t[1]
            x *= rng.uniform(lo, hi, size=(b, 1))
        elif name == "crop_mask":
            keep_range = GLOBAL_CROP_KEEP if t[1] == "global_view" else LOCAL_CROP_KEEP
            fracs = rng.uniform(*keep_range, size=b)
            widths = np.maximum(1, np.round(fracs * d)).astype(int)
            starts = (rng.random(b) * (d - widths + 1)).astype(int)
            cols = np.arange(d)[None, :]
            mask = (cols >= starts[:, None]) & (cols < (starts + widths)[:, None])
            x = np.where(mask, x, 0.0) / np.sqrt(widths / d)[:, None]
    return x


def subsample_bag(bag: Bag, cap: int, rng: np.random.Generator) -> Bag:
    """Uniform random instance subset when a bag exceeds the per-batch cap."""
    if bag.n <= cap:
        return bag
    keep = np.sort(rng.choice(bag.n, size=cap, replace=False))
    return Bag(
        instances=bag.instances[keep],
        label=bag.label,
        bag_id=bag.bag_id,
        instance_ids=[bag.instance_ids[i] for i in keep],
    )
