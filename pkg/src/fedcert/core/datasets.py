"""
Dataset loading and client partitioning.

Supports:
1. MNIST in the IDX container (optionally gzipped)
2. The UCI HAR archive (30 users, 561 features, 6 activities)
3. Synthetic Gaussian blobs for fast deterministic experiments

and the label-skewed non-IID split across n simulated clients.
"""

import gzip
import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np

from .errors import ConfigError, FormatError

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
MNIST_NUM_LABELS = 10

HAR_NUM_USERS = 30
HAR_NUM_FEATURES = 561
HAR_NUM_LABELS = 6
HAR_TRAIN_FRACTION = 0.75

PARTITION_RETRIES = 16


@dataclass(frozen=True)
class Example:
    """A single labelled feature vector"""

    features: np.ndarray
    label: int


@dataclass
class Dataset:
    """
    A set of examples stored column-wise.

    features has shape (count, F) and dtype float64, labels shape (count,).
    train_mask optionally flags training examples (HAR per-user split).
    """

    features: np.ndarray
    labels: np.ndarray
    num_labels: int
    train_mask: Optional[np.ndarray] = None
    subject: Optional[int] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise FormatError(f"features must be a 2-D array, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise FormatError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_labels):
            raise FormatError(f"labels must lie in [0, {self.num_labels})")
        if self.train_mask is not None:
            self.train_mask = np.asarray(self.train_mask, dtype=bool)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def examples(self) -> Iterator[Example]:
        for row, label in zip(self.features, self.labels):
            yield Example(row, int(label))

    def subset(self, indices: np.ndarray) -> "Dataset":
        """Dataset restricted to the given row indices (train_mask is dropped)"""
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.num_labels, subject=self.subject)

    def head(self, limit: Optional[int]) -> "Dataset":
        if limit is None or limit >= len(self):
            return self
        return self.subset(np.arange(limit))

    def train_part(self) -> "Dataset":
        if self.train_mask is None:
            return self
        return self.subset(np.flatnonzero(self.train_mask))

    def test_part(self) -> "Dataset":
        if self.train_mask is None:
            return self.subset(np.arange(0))
        return self.subset(np.flatnonzero(~self.train_mask))

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(self.features).tobytes())
        digest.update(np.ascontiguousarray(self.labels).tobytes())
        digest.update(str(self.num_labels).encode())
        return digest.hexdigest()


def concat_datasets(parts: List[Dataset], num_labels: int, feature_dim: int) -> Dataset:
    """Stack datasets in order; an empty list yields an empty dataset"""
    if not parts:
        return Dataset(np.zeros((0, feature_dim)), np.zeros(0, dtype=np.int64), num_labels)
    return Dataset(
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.labels for p in parts]),
        num_labels,
    )


@dataclass(frozen=True)
class PartitionConfig:
    """Non-IID split settings. groups=None means one group per label."""

    n: int
    q: float
    seed: int = 0
    groups: Optional[int] = None

    def resolved_groups(self, num_labels: int) -> int:
        return self.groups if self.groups is not None else num_labels

    def validate(self, num_labels: int):
        groups = self.resolved_groups(num_labels)
        if groups < 1 or self.n < groups:
            raise ConfigError(f"need n >= G >= 1, got n={self.n}, G={groups}")
        if self.n % groups != 0:
            raise ConfigError(f"n={self.n} is not divisible by G={groups}")
        if not (1.0 / groups - 1e-12 <= self.q <= 1.0):
            raise ConfigError(f"degree of non-IID q={self.q} outside [1/{groups}, 1]")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    def header(self, num_labels: int) -> str:
        return f"n={self.n} G={self.resolved_groups(num_labels)} q={self.q!r} seed={self.seed}"


@dataclass
class ClientPartition:
    """Per-client local datasets plus the source row indices each was built from"""

    client_data: List[Dataset]
    client_indices: List[np.ndarray]
    source_fingerprint: str
    config: Optional[PartitionConfig] = None
    num_labels: int = 0
    feature_dim: int = 0
    groups: Optional[int] = field(default=None)

    @property
    def n(self) -> int:
        return len(self.client_data)

    def datasets_for(self, client_ids: Tuple[int, ...]) -> List[Dataset]:
        return [self.client_data[c] for c in client_ids]

    def with_clients(self, replacements: dict) -> "ClientPartition":
        """Copy of the partition with some client datasets swapped out"""
        data = [replacements.get(c, d) for c, d in enumerate(self.client_data)]
        return ClientPartition(
            data,
            self.client_indices,
            self.source_fingerprint,
            self.config,
            self.num_labels,
            self.feature_dim,
            self.groups,
        )


def _open_maybe_gzip(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_mnist_idx(images_path: Union[str, Path], labels_path: Union[str, Path]) -> Dataset:
    """
    Read an MNIST image/label pair in IDX format.

    Pixels are scaled by 1/255 into [0, 1]; F = rows * cols; L = 10.

    Raises:
        FormatError on a bad magic number or mismatched counts
    """
    images_path = Path(images_path).expanduser()
    labels_path = Path(labels_path).expanduser()
    for path in (images_path, labels_path):
        if not path.exists():
            raise FormatError(f"IDX file not found: {path}")

    with _open_maybe_gzip(images_path) as f:
        raw_images = f.read()
    with _open_maybe_gzip(labels_path) as f:
        raw_labels = f.read()

    if len(raw_images) < 16 or len(raw_labels) < 8:
        raise FormatError("IDX header truncated")

    magic, count, rows, cols = struct.unpack(">IIII", raw_images[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"bad image magic {magic} in {images_path} (expected {IDX_IMAGES_MAGIC})")
    label_magic, label_count = struct.unpack(">II", raw_labels[:8])
    if label_magic != IDX_LABELS_MAGIC:
        raise FormatError(f"bad label magic {label_magic} in {labels_path} (expected {IDX_LABELS_MAGIC})")
    if label_count != count:
        raise FormatError(f"{count} images but {label_count} labels")

    pixel_bytes = count * rows * cols
    if len(raw_images) - 16 != pixel_bytes:
        raise FormatError(f"expected {pixel_bytes} pixel bytes, found {len(raw_images) - 16}")
    if len(raw_labels) - 8 != count:
        raise FormatError(f"expected {count} label bytes, found {len(raw_labels) - 8}")

    pixels = np.frombuffer(raw_images, dtype=np.uint8, offset=16).reshape(count, rows * cols)
    labels = np.frombuffer(raw_labels, dtype=np.uint8, offset=8).astype(np.int64)
    if labels.size and labels.max() >= MNIST_NUM_LABELS:
        raise FormatError(f"label {labels.max()} outside [0, {MNIST_NUM_LABELS})")

    logger.debug("Loaded %d IDX images of %dx%d from %s", count, rows, cols, images_path)
    return Dataset(pixels.astype(np.float64) / 255.0, labels, MNIST_NUM_LABELS)


def _har_triples(root: Path) -> List[Tuple[Path, Path, Path]]:
    """Locate (X, y, subject) files, either flat or in the UCI train/test layout"""
    flat = (root / "X.txt", root / "y.txt", root / "subject.txt")
    if all(p.exists() for p in flat):
        return [flat]
    triples = []
    for split in ("train", "test"):
        triple = (
            root / split / f"X_{split}.txt",
            root / split / f"y_{split}.txt",
            root / split / f"subject_{split}.txt",
        )
        if all(p.exists() for p in triple):
            triples.append(triple)
    if not triples:
        raise FormatError(f"no HAR feature/label/subject files found under {root}")
    return triples


def _read_har_arrays(triples: List[Tuple[Path, Path, Path]]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    features, labels, subjects = [], [], []
    for x_path, y_path, s_path in triples:
        x = np.loadtxt(x_path, dtype=np.float64, ndmin=2)
        y = np.loadtxt(y_path, dtype=np.int64, ndmin=1)
        s = np.loadtxt(s_path, dtype=np.int64, ndmin=1)
        if x.shape[1] != HAR_NUM_FEATURES:
            raise FormatError(f"{x_path} has {x.shape[1]} columns, expected {HAR_NUM_FEATURES}")
        if not (x.shape[0] == y.shape[0] == s.shape[0]):
            raise FormatError(f"row counts differ between {x_path}, {y_path}, {s_path}")
        features.append(x)
        labels.append(y)
        subjects.append(s)
    return np.concatenate(features), np.concatenate(labels), np.concatenate(subjects)


def _har_cache_path(triples: List[Tuple[Path, Path, Path]], cache_dir: Path) -> Path:
    """Cache file keyed by the content of every HAR text file"""
    digest = hashlib.sha256()
    for path in (p for triple in triples for p in triple):
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                digest.update(chunk)
    return cache_dir / f"har-{digest.hexdigest()[:16]}.npz"


def load_har(directory: Union[str, Path], cache_dir: Optional[Union[str, Path]] = None) -> List[Dataset]:
    """
    Load the HAR archive as 30 per-user datasets ordered by subject id.

    Labels 1-6 are remapped to 0-5. The first 75% of each user's examples
    (file order) are flagged as training examples. With cache_dir, the parsed
    arrays are kept there as .npz and reused while the text files are unchanged.
    """
    root = Path(directory).expanduser()
    triples = _har_triples(root)
    cache = _har_cache_path(triples, Path(cache_dir).expanduser()) if cache_dir is not None else None
    if cache is not None and cache.exists():
        with np.load(cache) as arrays:
            x, y, s = arrays["x"], arrays["y"], arrays["s"]
        logger.debug("Loaded parsed HAR arrays from %s", cache)
    else:
        x, y, s = _read_har_arrays(triples)
        if cache is not None:
            cache.parent.mkdir(parents=True, exist_ok=True)
            np.savez(cache, x=x, y=y, s=s)
            logger.debug("Cached parsed HAR arrays in %s", cache)

    if y.min() < 1 or y.max() > HAR_NUM_LABELS:
        raise FormatError(f"HAR labels must lie in 1..{HAR_NUM_LABELS}")

    users = []
    for subject in range(1, HAR_NUM_USERS + 1):
        rows = np.flatnonzero(s == subject)
        if rows.size == 0:
            raise FormatError(f"subject {subject} has no examples")
        train_count = math.ceil(HAR_TRAIN_FRACTION * rows.size)
        mask = np.arange(rows.size) < train_count
        users.append(Dataset(x[rows], y[rows] - 1, HAR_NUM_LABELS, train_mask=mask, subject=subject))

    logger.debug("Loaded %d HAR examples for %d users", x.shape[0], len(users))
    return users


def har_partition(users: List[Dataset]) -> Tuple[ClientPartition, Dataset]:
    """Each user is one client (its training part); test parts are pooled server-side"""
    train_parts = [u.train_part() for u in users]
    indices = []
    offset = 0
    for user in users:
        indices.append(offset + np.flatnonzero(user.train_mask))
        offset += len(user)
    digest = hashlib.sha256()
    for user in users:
        digest.update(user.fingerprint().encode())
    partition = ClientPartition(
        train_parts,
        indices,
        digest.hexdigest(),
        num_labels=HAR_NUM_LABELS,
        feature_dim=HAR_NUM_FEATURES,
    )
    test_set = concat_datasets([u.test_part() for u in users], HAR_NUM_LABELS, HAR_NUM_FEATURES)
    return partition, test_set


def partition_noniid(dataset: Dataset, config: PartitionConfig) -> ClientPartition:
    """
    Split a dataset across n clients with degree of non-IID q.

    An example with label l goes to group (l mod G) with probability q and to
    each other group with probability (1-q)/(G-1); it then lands on a uniformly
    random client of that group. If any client ends up empty the split is
    redrawn with seed+1, up to PARTITION_RETRIES times.
    """
    config.validate(dataset.num_labels)
    groups = config.resolved_groups(dataset.num_labels)
    per_group = config.n // groups
    count = len(dataset)
    home = dataset.labels % groups

    for attempt in range(PARTITION_RETRIES + 1):
        rng = np.random.default_rng(config.seed + attempt)
        if groups > 1:
            stay = rng.random(count) < config.q
            offset = rng.integers(1, groups, size=count)
            group = np.where(stay, home, (home + offset) % groups)
        else:
            group = home
        client = group * per_group + rng.integers(0, per_group, size=count)
        sizes = np.bincount(client, minlength=config.n)
        if sizes.min() > 0:
            break
        logger.debug("Partition attempt %d left %d empty clients", attempt, int((sizes == 0).sum()))
    else:
        raise ConfigError(
            f"could not give every one of {config.n} clients an example after "
            f"{PARTITION_RETRIES + 1} attempts ({count} examples)"
        )

    order = np.argsort(client, kind="stable")
    boundaries = np.cumsum(sizes)[:-1]
    client_indices = np.split(order, boundaries)

    digest = hashlib.sha256()
    digest.update(dataset.fingerprint().encode())
    digest.update(config.header(dataset.num_labels).encode())

    return ClientPartition(
        [dataset.subset(idx) for idx in client_indices],
        client_indices,
        digest.hexdigest(),
        config,
        dataset.num_labels,
        dataset.feature_dim,
        groups,
    )


def write_partition(partition: ClientPartition, path: Union[str, Path]) -> Path:
    """Export as a header line then `client_id,label,example_index` rows"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if partition.config is not None:
        header = partition.config.header(partition.num_labels)
    else:
        header = f"n={partition.n} G={partition.n} q=1.0 seed=0"
    lines = [header]
    for client_id, (data, indices) in enumerate(zip(partition.client_data, partition.client_indices)):
        for label, index in zip(data.labels, indices):
            lines.append(f"{client_id},{int(label)},{int(index)}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_partition(path: Union[str, Path], dataset: Dataset) -> ClientPartition:
    """Rebuild a partition of `dataset` from an exported file"""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise FormatError(f"empty partition file: {path}")
    try:
        fields = dict(item.split("=", 1) for item in lines[0].split())
        config = PartitionConfig(
            n=int(fields["n"]), q=float(fields["q"]), seed=int(fields["seed"]), groups=int(fields["G"])
        )
    except (KeyError, ValueError) as e:
        raise FormatError(f"bad partition header in {path}: {e}")

    members: List[List[int]] = [[] for _ in range(config.n)]
    for number, line in enumerate(lines[1:], start=2):
        try:
            client_id, label, index = (int(v) for v in line.split(","))
        except ValueError:
            raise FormatError(f"{path}:{number}: expected client,label,source_index, got {line!r}")
        if not 0 <= client_id < config.n:
            raise FormatError(f"{path}:{number}: client {client_id} outside [0, {config.n})")
        if not 0 <= index < len(dataset):
            raise FormatError(f"{path}:{number}: example {index} outside [0, {len(dataset)})")
        if dataset.labels[index] != label:
            raise FormatError(f"label mismatch for example {index} in {path}")
        members[client_id].append(index)

    client_indices = [np.asarray(m, dtype=np.int64) for m in members]
    digest = hashlib.sha256()
    digest.update(dataset.fingerprint().encode())
    digest.update(config.header(dataset.num_labels).encode())
    return ClientPartition(
        [dataset.subset(idx) for idx in client_indices],
        client_indices,
        digest.hexdigest(),
        config,
        dataset.num_labels,
        dataset.feature_dim,
        config.groups,
    )


@dataclass(frozen=True)
class BlobSpec:
    """Parameters of the synthetic Gaussian-cluster dataset"""

    num_labels: int
    feature_dim: int
    per_label_count: int
    centroid_scale: float = 1.0
    noise_sigma: float = 0.1
    seed: int = 0


def blob_centroids(spec: BlobSpec) -> np.ndarray:
    """
    Centroid l sits on axis (l mod F) at distance centroid_scale, with the sign
    alternating every F labels and the radius growing every 2F labels.
    """
    centroids = np.zeros((spec.num_labels, spec.feature_dim))
    for label in range(spec.num_labels):
        axis = label % spec.feature_dim
        sign = 1.0 if (label // spec.feature_dim) % 2 == 0 else -1.0
        radius = spec.centroid_scale * (1 + label // (2 * spec.feature_dim))
        centroids[label, axis] = sign * radius
    return centroids


def synth_blobs(spec: BlobSpec) -> Dataset:
    """Gaussian clusters around blob_centroids(spec), label-major order"""
    if spec.num_labels < 2:
        raise ConfigError(f"need at least 2 labels, got {spec.num_labels}")
    if spec.feature_dim < 1:
        raise ConfigError(f"need at least 1 feature, got {spec.feature_dim}")
    if spec.per_label_count < 0 or spec.noise_sigma < 0:
        raise ConfigError("per_label_count and noise_sigma must be non-negative")

    rng = np.random.default_rng(spec.seed)
    centroids = blob_centroids(spec)
    labels = np.repeat(np.arange(spec.num_labels), spec.per_label_count)
    noise = rng.normal(0.0, 1.0, size=(labels.size, spec.feature_dim)) * spec.noise_sigma
    return Dataset(centroids[labels] + noise, labels, spec.num_labels)
