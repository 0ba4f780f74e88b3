"""
Ensembles of global models over client subsamples.

Each row of a PredictionMatrix holds the test predictions of one global model
trained by a base algorithm on k of the n clients. EXACT mode trains one model
per k-subset; SAMPLED mode draws N subsets independently.
"""

import enum
import itertools
import logging
import math
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import anyio
import anyio.to_thread
import numpy as np

from .config import get_config
from .datasets import ClientPartition, Dataset
from .errors import CapError, ConfigError, FedCertError, FormatError, ShapeError, TrainingError
from .fedlearn import BaseAlgorithm, FedConfig
from .model import ModelConfig, ModelParams, save_checkpoint
from .rng import STREAM_ROW_INIT, STREAM_ROW_TRAIN, STREAM_SUBSAMPLE, derive_seed

logger = logging.getLogger(__name__)

Subsample = Tuple[int, ...]


class EnsembleMode(str, enum.Enum):
    EXACT = "EXACT"
    SAMPLED = "SAMPLED"


def _check_nk(n: int, k: int):
    if not 1 <= k <= n:
        raise ConfigError(f"need 1 <= k <= n, got n={n}, k={k}")


def enumerate_subsamples(n: int, k: int, cap: Optional[int] = None) -> List[Subsample]:
    """All C(n,k) subsamples in lexicographic order"""
    _check_nk(n, k)
    cap = get_config().enum_cap if cap is None else cap
    total = math.comb(n, k)
    if total > cap:
        raise CapError(f"C({n},{k}) = {total} subsamples exceeds the cap of {cap}; use SAMPLED mode")
    return list(itertools.combinations(range(n), k))


def sample_subsample(n: int, k: int, stream_seed: int) -> Subsample:
    """Uniform k-subset via a partial Fisher-Yates shuffle, returned sorted"""
    _check_nk(n, k)
    rng = np.random.default_rng(stream_seed)
    pool = list(range(n))
    for i in range(k):
        j = int(rng.integers(i, n))
        pool[i], pool[j] = pool[j], pool[i]
    return tuple(sorted(pool[:k]))


def sample_subsamples(n: int, k: int, count: int, master_seed: int) -> List[Subsample]:
    """`count` independent draws; row r uses stream (master_seed, subsample, r)"""
    return [sample_subsample(n, k, derive_seed(master_seed, STREAM_SUBSAMPLE, r)) for r in range(count)]


@dataclass
class PredictionMatrix:
    """entries[r, t] is the label predicted by model r on test example t"""

    entries: np.ndarray
    n: int
    k: int
    num_labels: int
    mode: EnsembleMode
    subsamples: List[Subsample]
    master_seed: int = 0

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.int64)
        if self.entries.ndim != 2 or self.entries.shape[0] != len(self.subsamples):
            shape = self.entries.shape
            raise FormatError(f"{shape} prediction entries for {len(self.subsamples)} subsamples")
        self.mode = EnsembleMode(self.mode)
        if self.entries.size and (self.entries.min() < 0 or self.entries.max() >= self.num_labels):
            raise FormatError(f"prediction labels must lie in [0, {self.num_labels})")
        for s in self.subsamples:
            if len(s) != self.k or list(s) != sorted(set(s)) or s[0] < 0 or s[-1] >= self.n:
                raise FormatError(f"invalid subsample {s} for n={self.n}, k={self.k}")
        if self.mode is EnsembleMode.EXACT and len(self.subsamples) != math.comb(self.n, self.k):
            raise FormatError(f"EXACT matrix needs C({self.n},{self.k}) rows, got {len(self.subsamples)}")

    @property
    def num_models(self) -> int:
        return int(self.entries.shape[0])

    @property
    def test_count(self) -> int:
        return int(self.entries.shape[1])

    def column(self, t: int) -> np.ndarray:
        if not 0 <= t < self.test_count:
            raise ConfigError(f"example index {t} outside [0, {self.test_count})")
        return self.entries[:, t]

    def counts(self, t: int) -> np.ndarray:
        return np.bincount(self.column(t), minlength=self.num_labels)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = (
            f"{self.n},{self.k},{self.num_models},{self.test_count},"
            f"{self.num_labels},{self.mode.value},{self.master_seed}"
        )
        lines = [header]
        lines.extend(",".join(str(int(v)) for v in row) for row in self.entries)
        lines.extend(",".join(str(c) for c in s) for s in self.subsamples)
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PredictionMatrix":
        path = Path(path)
        # keep empty lines: a zero-column matrix has empty prediction rows
        lines = path.read_text().split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        try:
            n, k, count, d, num_labels, mode, master_seed = lines[0].split(",")
            count, d = int(count), int(d)
            if len(lines) != 1 + 2 * count:
                raise FormatError(f"{path}: expected {1 + 2 * count} lines, found {len(lines)}")
            rows = [[int(v) for v in line.split(",")] if d else [] for line in lines[1 : 1 + count]]
            if any(len(r) != d for r in rows):
                raise FormatError(f"{path}: prediction row width differs from d={d}")
            subsamples = [tuple(int(c) for c in line.split(",")) for line in lines[1 + count :]]
            return cls(
                np.array(rows, dtype=np.int64).reshape(count, d),
                int(n),
                int(k),
                int(num_labels),
                EnsembleMode(mode),
                subsamples,
                int(master_seed),
            )
        except (ValueError, IndexError) as e:
            raise FormatError(f"malformed prediction matrix {path}: {e}")


@dataclass(frozen=True)
class LabelProbabilities:
    """Exact label frequencies over the ensemble's models"""

    p: Tuple[Fraction, ...]
    counts: Tuple[int, ...]
    total: int

    @property
    def num_labels(self) -> int:
        return len(self.p)


def label_probabilities(matrix: PredictionMatrix, t: int) -> LabelProbabilities:
    counts = matrix.counts(t)
    total = matrix.num_models
    return LabelProbabilities(
        tuple(Fraction(int(c), total) for c in counts), tuple(int(c) for c in counts), total
    )


def ensemble_predict(
    p: LabelProbabilities, tie_seed: Optional[int] = None, mode: EnsembleMode = EnsembleMode.EXACT
) -> int:
    """
    Majority label. EXACT mode breaks ties toward the smallest label;
    SAMPLED mode picks uniformly among tied labels using tie_seed.
    """
    best = max(p.counts)
    tied = [label for label, c in enumerate(p.counts) if c == best]
    if len(tied) == 1 or EnsembleMode(mode) is EnsembleMode.EXACT:
        return tied[0]
    rng = np.random.default_rng(tie_seed)
    return tied[int(rng.integers(0, len(tied)))]


def row_configs(
    fed_config: FedConfig, model_config: ModelConfig, master_seed: int, row: int
) -> Tuple[FedConfig, ModelConfig]:
    """Per-row training and initialisation seeds keyed by (master_seed, row)"""
    return (
        replace(fed_config, train_seed=derive_seed(master_seed, STREAM_ROW_TRAIN, row)),
        replace(model_config, init_seed=derive_seed(master_seed, STREAM_ROW_INIT, row)),
    )


def _train_rows(
    rows: Sequence[int],
    subsamples: Sequence[Subsample],
    partition: ClientPartition,
    base: BaseAlgorithm,
    fed_config: FedConfig,
    model_config: ModelConfig,
    test_set: Dataset,
    master_seed: int,
    threads: int,
    checkpoint_dir: Optional[Path] = None,
) -> Dict[int, np.ndarray]:
    """Train the given rows, in worker threads when threads > 1"""

    def train_one(row: int) -> np.ndarray:
        subsample = tuple(subsamples[row])
        row_fed, row_model = row_configs(fed_config, model_config, master_seed, row)
        try:
            classifier = base.train(partition.datasets_for(subsample), row_fed, row_model, subsample)
            predictions = np.asarray(classifier.predict_batch(test_set.features), dtype=np.int64)
        except FedCertError as e:
            raise TrainingError(f"row {row} (clients {list(subsample)}): {e}", row, subsample) from e
        except (ValueError, ArithmeticError) as e:
            raise TrainingError(f"row {row} (clients {list(subsample)}): {e}", row, subsample) from e
        if predictions.shape != (len(test_set),):
            raise TrainingError(
                f"row {row} produced {predictions.shape} predictions for {len(test_set)} examples",
                row,
                subsample,
            )
        if checkpoint_dir is not None and isinstance(classifier, ModelParams):
            save_checkpoint(classifier, Path(checkpoint_dir) / f"row_{row}.ckpt")
        logger.debug("trained row %d on clients %s", row, list(subsample))
        return predictions

    results: Dict[int, np.ndarray] = {}
    if threads <= 1:
        for row in rows:
            results[row] = train_one(row)
        return results

    errors: Dict[int, TrainingError] = {}

    async def run_all():
        limiter = anyio.CapacityLimiter(threads)

        async def run_row(row: int):
            try:
                results[row] = await anyio.to_thread.run_sync(train_one, row, limiter=limiter)
            except TrainingError as e:
                errors[row] = e

        async with anyio.create_task_group() as tg:
            for row in rows:
                tg.start_soon(run_row, row)

    anyio.run(run_all)
    if errors:
        raise errors[min(errors)]
    return results


def train_ensemble(
    partition: ClientPartition,
    base: BaseAlgorithm,
    subsamples: Sequence[Subsample],
    fed_config: FedConfig,
    model_config: ModelConfig,
    test_set: Dataset,
    mode: EnsembleMode = EnsembleMode.EXACT,
    master_seed: int = 0,
    threads: int = 1,
    checkpoint_dir: Optional[Path] = None,
) -> PredictionMatrix:
    """
    Train one model per subsample and collect its test-set predictions.

    Row r trains with seeds derived from (master_seed, r), so the matrix is
    identical for any thread count.

    Raises:
        TrainingError: a row failed; carries the row index and subsample
    """
    k = len(subsamples[0]) if subsamples else 0
    for s in subsamples:
        if len(s) != k or not all(0 <= c < partition.n for c in s):
            raise ConfigError(f"subsample {s} is not valid for {partition.n} clients")

    results = _train_rows(
        range(len(subsamples)),
        subsamples,
        partition,
        base,
        fed_config,
        model_config,
        test_set,
        master_seed,
        threads,
        checkpoint_dir,
    )
    entries = np.zeros((len(subsamples), len(test_set)), dtype=np.int64)
    for row, predictions in results.items():
        entries[row] = predictions
    return PredictionMatrix(
        entries, partition.n, k, test_set.num_labels, mode, [tuple(s) for s in subsamples], master_seed
    )


def retrain_rows(
    matrix: PredictionMatrix,
    rows: Sequence[int],
    partition: ClientPartition,
    base: BaseAlgorithm,
    fed_config: FedConfig,
    model_config: ModelConfig,
    test_set: Dataset,
    threads: int = 1,
) -> PredictionMatrix:
    """Copy of `matrix` with the given rows retrained (same per-row seeds)"""
    if test_set.num_labels != matrix.num_labels or len(test_set) != matrix.test_count:
        raise ShapeError("test set does not match the prediction matrix")
    results = _train_rows(
        list(rows),
        matrix.subsamples,
        partition,
        base,
        fed_config,
        model_config,
        test_set,
        matrix.master_seed,
        threads,
    )
    entries = matrix.entries.copy()
    for row, predictions in results.items():
        entries[row] = predictions
    return replace(matrix, entries=entries, subsamples=list(matrix.subsamples))


def lookup_matrix(
    table: Callable[[Subsample], Sequence[int]],
    n: int,
    k: int,
    num_labels: int,
    subsamples: Optional[Sequence[Subsample]] = None,
    mode: EnsembleMode = EnsembleMode.EXACT,
    master_seed: int = 0,
) -> PredictionMatrix:
    """Prediction matrix of a table-defined base algorithm, no training involved"""
    if subsamples is None:
        subsamples = enumerate_subsamples(n, k)
    rows = [np.asarray(table(tuple(s)), dtype=np.int64) for s in subsamples]
    subsamples = [tuple(s) for s in subsamples]
    return PredictionMatrix(np.array(rows), n, k, num_labels, mode, subsamples, master_seed)

