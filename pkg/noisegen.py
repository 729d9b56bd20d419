"""
Noisy Task Generation
Builds LOND / LCND / LRND splits by injecting closed-set and open-set label noise
into a clean labeled source, and synthesizes desk-scale Gaussian sources.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple, Union

import numpy as np

from errors import ConfigurationError, ContractError, InvalidSpecError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
SPLIT_TRAIN = 0
SPLIT_TEST = 1
SPLIT_NAMES = {SPLIT_TRAIN: "train", SPLIT_TEST: "test"}

# given label of open-set test samples, which have no valid known label
NO_LABEL = -1

# open-label hook: (features of the open samples, rng, C) -> given labels in 0..C-1
OpenLabelHook = Callable[[np.ndarray, np.random.Generator, int], np.ndarray]


class NoiseTag(int, Enum):
    CLEAN = 0
    CLOSED = 1
    OPEN = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> "NoiseTag":
        return cls[label.upper()]


class TaskMode(str, Enum):
    LOND = "lond"  # open-set noise in train and test
    LCND = "lcnd"  # closed-set noise only
    LRND = "lrnd"  # open-set noise in train only


@dataclass
class CleanSource:
    """A clean labeled pool: features, true labels and a train/test split per sample"""
    features: np.ndarray
    true_label: np.ndarray
    split: np.ndarray
    c_total: int

    def __post_init__(self):
        self.true_label = np.asarray(self.true_label, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=np.int8)
        n = len(self.true_label)
        if len(self.features) != n or len(self.split) != n:
            raise InvalidSpecError(
                f"Source arrays disagree in length: features={len(self.features)}, "
                f"labels={n}, split={len(self.split)}"
            )
        if n and (self.true_label.min() < 0 or self.true_label.max() >= self.c_total):
            raise InvalidSpecError(f"Source labels must lie in 0..{self.c_total - 1}")
        if n and not np.isin(self.split, (SPLIT_TRAIN, SPLIT_TEST)).all():
            raise InvalidSpecError("Source split codes must be train (0) or test (1)")

    def __len__(self) -> int:
        return len(self.true_label)

    def subset(self, mask: np.ndarray) -> "CleanSource":
        return CleanSource(self.features[mask], self.true_label[mask], self.split[mask], self.c_total)

    def count(self, split: int) -> int:
        return int((self.split == split).sum())


@dataclass(frozen=True)
class NoiseSpec:
    """How closed-set noise is injected into the known-class pool"""
    known_classes: int
    noise_type: str = "symmetric"
    noise_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_type not in ("symmetric", "asymmetric"):
            raise InvalidSpecError(f"noise_type must be symmetric or asymmetric, got {self.noise_type!r}")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise InvalidSpecError(f"noise_rate must lie in [0, 1], got {self.noise_rate}")
        if self.known_classes < 1:
            raise InvalidSpecError(f"known_classes must be positive, got {self.known_classes}")
        if self.noise_rate > 0 and self.known_classes < 2:
            raise InvalidSpecError("Label flips need at least two known classes")

    def flip_target(self, label: np.ndarray) -> np.ndarray:
        """Fixed circular asymmetric map c -> (c + 1) mod C"""
        return (label + 1) % self.known_classes


@dataclass
class LabeledDataset:
    """Noisy task: features with given labels, hidden true labels and noise tags"""
    features: np.ndarray
    given_label: np.ndarray
    true_label: np.ndarray
    noise_tag: np.ndarray
    split: np.ndarray
    num_classes: int
    c_total: int
    spec: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.given_label)

    @property
    def feature_shape(self) -> Tuple[int, ...]:
        return tuple(self.features.shape[1:])

    @property
    def dim(self) -> int:
        return int(np.prod(self.feature_shape)) if self.feature_shape else 1

    @property
    def train_indices(self) -> np.ndarray:
        return np.flatnonzero(self.split == SPLIT_TRAIN)

    @property
    def test_indices(self) -> np.ndarray:
        return np.flatnonzero(self.split == SPLIT_TEST)

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(
            features=self.features[indices],
            given_label=self.given_label[indices],
            true_label=self.true_label[indices],
            noise_tag=self.noise_tag[indices],
            split=self.split[indices],
            num_classes=self.num_classes,
            c_total=self.c_total,
            spec=dict(self.spec),
        )

    def train(self) -> "LabeledDataset":
        return self.subset(self.train_indices)

    def test(self) -> "LabeledDataset":
        return self.subset(self.test_indices)

    @property
    def is_open(self) -> np.ndarray:
        return self.true_label >= self.num_classes

    def counts(self) -> Dict[str, int]:
        return {
            "total": len(self),
            "train": int((self.split == SPLIT_TRAIN).sum()),
            "test": int((self.split == SPLIT_TEST).sum()),
            **{tag.label: int((self.noise_tag == tag).sum()) for tag in NoiseTag},
            "open_test": int((self.is_open & (self.split == SPLIT_TEST)).sum()),
        }

    def check_consistency(self):
        """
        Verify the tag invariants: clean <=> given == true, open <=> true >= C,
        and open train samples carry a known given label.

        Raises:
            ContractError: on the first violated invariant
        """
        clean = self.noise_tag == NoiseTag.CLEAN
        if not np.array_equal(clean, self.given_label == self.true_label):
            raise ContractError("noise_tag=clean must coincide with given_label == true_label")
        if not np.array_equal(self.noise_tag == NoiseTag.OPEN, self.is_open):
            raise ContractError("noise_tag=open must coincide with true_label >= C")
        train_open = self.is_open & (self.split == SPLIT_TRAIN)
        given = self.given_label[train_open]
        if given.size and (given.min() < 0 or given.max() >= self.num_classes):
            raise ContractError("Open-set training samples must carry a given label in 0..C-1")


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def source_from_arrays(features: np.ndarray, labels: np.ndarray, split: np.ndarray,
                       c_total: Optional[int] = None) -> CleanSource:
    """Loader hook: wrap externally supplied arrays (e.g. a CIFAR100 dump) as a CleanSource"""
    labels = np.asarray(labels, dtype=np.int64)
    if c_total is None:
        c_total = int(labels.max()) + 1
    return CleanSource(np.asarray(features, dtype=np.float32), labels, split, c_total)


def load_source_npz(path: Union[str, Path]) -> CleanSource:
    """
    Load a CleanSource from an .npz with keys features, labels, split (and optional c_total).

    Raises:
        ConfigurationError: missing file or missing array
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Source file not found: {path}")
    with np.load(path) as data:
        missing = [key for key in ("features", "labels", "split") if key not in data]
        if missing:
            raise ConfigurationError(f"Source file {path} lacks arrays: {', '.join(missing)}")
        c_total = int(data["c_total"]) if "c_total" in data else None
        return source_from_arrays(data["features"], data["labels"], data["split"], c_total)


def synth_gaussian_source(c_total: int, dim: int, per_class: int, separation: float, seed: int,
                          test_fraction: float = 0.2) -> CleanSource:
    """
    Generate C_total isotropic unit-variance Gaussian clusters.

    Class means are `separation` apart (orthonormal directions when dim >= C_total,
    random unit directions otherwise). A `test_fraction` of every class goes to the
    test split, so the source holds exactly C_total * per_class samples.

    Raises:
        InvalidSpecError: per_class < 2, separation <= 0 or bad sizes
    """
    if per_class < 2:
        raise InvalidSpecError(f"per_class must be at least 2, got {per_class}")
    if separation <= 0:
        raise InvalidSpecError(f"separation must be positive, got {separation}")
    if c_total < 1 or dim < 1:
        raise InvalidSpecError(f"c_total and dim must be positive, got {c_total}, {dim}")
    if not 0.0 < test_fraction < 1.0:
        raise InvalidSpecError(f"test_fraction must lie in (0, 1), got {test_fraction}")

    rng = _rng(seed, 0)
    if dim >= c_total:
        q, _ = np.linalg.qr(rng.standard_normal((dim, c_total)))
        directions = q.T
    else:
        directions = rng.standard_normal((c_total, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    # orthonormal rows sit sqrt(2) apart
    means = directions * (separation / np.sqrt(2.0))

    n_test = min(per_class - 1, max(1, int(round(test_fraction * per_class))))
    features = np.empty((c_total * per_class, dim), dtype=np.float32)
    labels = np.repeat(np.arange(c_total, dtype=np.int64), per_class)
    split = np.full(c_total * per_class, SPLIT_TRAIN, dtype=np.int8)
    for c in range(c_total):
        block = slice(c * per_class, (c + 1) * per_class)
        features[block] = means[c] + rng.standard_normal((per_class, dim))
        test_rows = rng.permutation(per_class)[:n_test] + c * per_class
        split[test_rows] = SPLIT_TEST
    return CleanSource(features, labels, split, c_total)


def carve_open_world(source: CleanSource, known_classes: int, seed: int) -> Tuple[CleanSource, CleanSource]:
    """
    Split a source into the known pool (classes 0..C-1) and the open pool (C..C_total-1).

    C == C_total yields an empty open pool (closed world). Within each pool the
    sample order is a seed-determined permutation.

    Raises:
        InvalidSpecError: C > C_total or C < 1
    """
    if known_classes < 1 or known_classes > source.c_total:
        raise InvalidSpecError(f"known classes must lie in 1..{source.c_total}, got {known_classes}")
    rng = _rng(seed, 1)
    known_rows = np.flatnonzero(source.true_label < known_classes)
    open_rows = np.flatnonzero(source.true_label >= known_classes)
    known_pool = source.subset(known_rows[rng.permutation(len(known_rows))])
    open_pool = source.subset(open_rows[rng.permutation(len(open_rows))])
    return known_pool, open_pool


def inject_closed_noise(pool: CleanSource, spec: NoiseSpec) -> LabeledDataset:
    """
    Flip exactly round(noise_rate * N_train) training labels of the known pool.

    Symmetric flips draw uniformly from the other C-1 classes; asymmetric flips
    follow c -> (c + 1) mod C. Test samples keep their true label.

    Raises:
        InvalidSpecError: pool labels outside 0..C-1
    """
    C = spec.known_classes
    if len(pool) and pool.true_label.max() >= C:
        raise InvalidSpecError(f"Known pool holds labels >= C ({C}); carve the source first")

    rng = _rng(spec.seed, 2)
    true_label = pool.true_label.copy()
    given = true_label.copy()
    tags = np.full(len(pool), NoiseTag.CLEAN, dtype=np.int8)

    train_rows = np.flatnonzero(pool.split == SPLIT_TRAIN)
    n_flip = int(np.floor(spec.noise_rate * len(train_rows) + 0.5))
    flipped = train_rows[rng.permutation(len(train_rows))[:n_flip]]
    if spec.noise_type == "symmetric":
        offsets = rng.integers(1, C, size=n_flip) if n_flip else np.zeros(0, dtype=np.int64)
        given[flipped] = (true_label[flipped] + offsets) % C
    else:
        given[flipped] = spec.flip_target(true_label[flipped])
    tags[flipped] = NoiseTag.CLOSED

    return LabeledDataset(
        features=pool.features.copy(),
        given_label=given,
        true_label=true_label,
        noise_tag=tags,
        split=pool.split.copy(),
        num_classes=C,
        c_total=pool.c_total,
        spec={**asdict(spec), "mode": TaskMode.LCND.value},
    )


def uniform_open_labels(features: np.ndarray, rng: np.random.Generator, num_classes: int) -> np.ndarray:
    """Default open-label hook: uniformly random known-class labels"""
    return rng.integers(0, num_classes, size=len(features))


def inject_open_noise(known_ds: LabeledDataset, open_pool: Optional[CleanSource], target_train_size: int,
                      seed: int, mode: Union[TaskMode, str] = TaskMode.LOND,
                      label_hook: Optional[OpenLabelHook] = None) -> LabeledDataset:
    """
    Mix open-pool training samples into the train split with known given labels.

    The number mixed in is target_train_size minus the known training count. In LOND
    mode the open pool's test samples are appended to the test split (given label -1);
    LRND leaves the test split closed. LCND, or an empty pool outside LOND, returns
    the known dataset unchanged.

    Raises:
        ConfigurationError: empty open pool in LOND mode, or an unreachable target size
    """
    mode = TaskMode(mode)
    pool_empty = open_pool is None or len(open_pool) == 0
    if mode is TaskMode.LOND and pool_empty:
        raise ConfigurationError("LOND mode needs a nonempty open pool (known classes < C_total)")
    if mode is TaskMode.LCND or pool_empty:
        return known_ds.subset(np.arange(len(known_ds)))

    C = known_ds.num_classes
    n_known_train = int((known_ds.split == SPLIT_TRAIN).sum())
    open_train_rows = np.flatnonzero(open_pool.split == SPLIT_TRAIN)
    n_open = target_train_size - n_known_train
    if n_open < 0 or n_open > len(open_train_rows):
        raise ConfigurationError(
            f"target_train_size {target_train_size} needs {n_open} open samples; "
            f"0..{len(open_train_rows)} are available"
        )

    rng = _rng(seed, 3)
    chosen = open_train_rows[rng.permutation(len(open_train_rows))[:n_open]]
    hook = label_hook or uniform_open_labels
    open_given = np.asarray(hook(open_pool.features[chosen], rng, C), dtype=np.int64)
    if open_given.size and (open_given.min() < 0 or open_given.max() >= C):
        raise ContractError("Open-label hook returned labels outside 0..C-1")

    parts = [(known_ds.features, known_ds.given_label, known_ds.true_label, known_ds.noise_tag, known_ds.split)]
    parts.append((
        open_pool.features[chosen],
        open_given,
        open_pool.true_label[chosen],
        np.full(n_open, NoiseTag.OPEN, dtype=np.int8),
        np.full(n_open, SPLIT_TRAIN, dtype=np.int8),
    ))
    if mode is TaskMode.LOND:
        test_rows = np.flatnonzero(open_pool.split == SPLIT_TEST)
        parts.append((
            open_pool.features[test_rows],
            np.full(len(test_rows), NO_LABEL, dtype=np.int64),
            open_pool.true_label[test_rows],
            np.full(len(test_rows), NoiseTag.OPEN, dtype=np.int8),
            np.full(len(test_rows), SPLIT_TEST, dtype=np.int8),
        ))

    features, given, true, tags, split = (np.concatenate(column) for column in zip(*parts))
    return LabeledDataset(
        features=features.astype(known_ds.features.dtype, copy=False),
        given_label=given,
        true_label=true,
        noise_tag=tags,
        split=split,
        num_classes=C,
        c_total=known_ds.c_total,
        spec={**known_ds.spec, "mode": mode.value, "open_train": n_open},
    )


def build_task(source: CleanSource, spec: NoiseSpec, mode: Union[TaskMode, str] = TaskMode.LOND,
               open_train_count: Optional[int] = None,
               label_hook: Optional[OpenLabelHook] = None) -> LabeledDataset:
    """Carve, inject closed-set noise, then mix in open-set noise according to the task mode"""
    mode = TaskMode(mode)
    if spec.known_classes > source.c_total:
        raise InvalidSpecError(f"known_classes ({spec.known_classes}) exceeds C_total ({source.c_total})")
    known_pool, open_pool = carve_open_world(source, spec.known_classes, spec.seed)
    dataset = inject_closed_noise(known_pool, spec)
    if mode is TaskMode.LCND:
        return dataset

    available = open_pool.count(SPLIT_TRAIN)
    n_open = available if open_train_count is None else open_train_count
    target = int((dataset.split == SPLIT_TRAIN).sum()) + n_open
    return inject_open_noise(dataset, open_pool, target, spec.seed, mode=mode, label_hook=label_hook)


# ============================================================================
# DATASET PERSISTENCE
# ============================================================================

HEADER_FILE = "header.json"
FEATURES_FILE = "features.f32"
SAMPLES_FILE = "samples.jsonl"


def save_dataset(dataset: LabeledDataset, directory: Union[str, Path]) -> Path:
    """
    Persist a dataset as header.json + little-endian float32 feature block + samples.jsonl.

    Returns:
        The dataset directory
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": FORMAT_VERSION,
        "C": dataset.num_classes,
        "C_total": dataset.c_total,
        "dim": dataset.dim,
        "feature_shape": list(dataset.feature_shape),
        "counts": dataset.counts(),
        "spec": dataset.spec,
    }
    (directory / HEADER_FILE).write_text(json.dumps(header, indent=2, sort_keys=True), encoding="utf-8")
    (directory / FEATURES_FILE).write_bytes(np.ascontiguousarray(dataset.features, dtype="<f4").tobytes())
    with open(directory / SAMPLES_FILE, "w", encoding="utf-8") as f:
        for i in range(len(dataset)):
            record = {
                "index": i,
                "given_label": int(dataset.given_label[i]),
                "true_label": int(dataset.true_label[i]),
                "noise_tag": NoiseTag(int(dataset.noise_tag[i])).label,
                "split": SPLIT_NAMES[int(dataset.split[i])],
            }
            f.write(json.dumps(record) + "\n")
    return directory


def load_dataset(directory: Union[str, Path]) -> LabeledDataset:
    """
    Read a dataset written by save_dataset.

    Raises:
        ConfigurationError: missing files or a header that disagrees with the records
    """
    directory = Path(directory)
    for name in (HEADER_FILE, FEATURES_FILE, SAMPLES_FILE):
        if not (directory / name).exists():
            raise ConfigurationError(f"Dataset file not found: {directory / name}")

    header = json.loads((directory / HEADER_FILE).read_text(encoding="utf-8"))
    records = [json.loads(line) for line in (directory / SAMPLES_FILE).read_text(encoding="utf-8").splitlines() if line]
    n = len(records)
    if n != header["counts"]["total"]:
        raise ConfigurationError(f"Header counts {header['counts']['total']} samples, records hold {n}")

    shape = tuple(header["feature_shape"])
    features = np.frombuffer((directory / FEATURES_FILE).read_bytes(), dtype="<f4")
    features = features.astype(np.float32).reshape((n, *shape))
    split_codes = {name: code for code, name in SPLIT_NAMES.items()}
    records.sort(key=lambda r: r["index"])
    return LabeledDataset(
        features=features,
        given_label=np.array([r["given_label"] for r in records], dtype=np.int64),
        true_label=np.array([r["true_label"] for r in records], dtype=np.int64),
        noise_tag=np.array([NoiseTag.from_label(r["noise_tag"]) for r in records], dtype=np.int8),
        split=np.array([split_codes[r["split"]] for r in records], dtype=np.int8),
        num_classes=int(header["C"]),
        c_total=int(header["C_total"]),
        spec=header.get("spec", {}),
    )
