"""
Experiment pipeline: partition -> train ensemble -> certify -> curve, plus the
optional baseline and attack-evaluation stages.

Every stage writes its artifacts under the experiment's output directory and
records a cache key and artifact hashes in manifest.json. A rerun skips any
stage whose key and artifacts still match, so an interrupted run resumes where
it stopped. One pipeline may run per output directory at a time.
"""

import contextlib
import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .adversary import AttackOutcome, AttackSpec, evaluate_attack, write_attack_report
from .certify import (
    Certificate,
    CertifiedAccuracyCurve,
    baseline_curve,
    certified_accuracy_curve,
    certify_matrix,
    read_certificate_report,
    write_certificate_report,
    write_curve,
)
from .config import ExperimentConfig, get_config
from .datasets import (
    ClientPartition,
    Dataset,
    har_partition,
    load_har,
    load_mnist_idx,
    partition_noniid,
    synth_blobs,
    write_partition,
)
from .ensemble import EnsembleMode, PredictionMatrix, enumerate_subsamples, sample_subsamples, train_ensemble
from .errors import CertificateViolation, ConfigError, FedCertError
from .fedlearn import default_registry, train_baseline
from .model import ModelConfig

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
LOCK_FILE = ".fedcert.lock"

STAGE_PARTITION = "partition"
STAGE_TRAIN = "train-ensemble"
STAGE_CERTIFY = "certify"
STAGE_CURVE = "curve"
STAGE_BASELINE = "baseline"
STAGE_ATTACK = "attack-eval"


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _key(*parts: str) -> str:
    return hashlib.sha256("\n".join(parts).encode()).hexdigest()


@dataclass
class StageRecord:
    key: str = ""
    done: bool = False
    seconds: float = 0.0
    artifacts: Dict[str, str] = field(default_factory=dict)
    hashes: Dict[str, str] = field(default_factory=dict)
    error: Optional[str] = None


@dataclass
class RunManifest:
    """What has been computed in an output directory, and from which inputs"""

    config_hash: str = ""
    stages: Dict[str, StageRecord] = field(default_factory=dict)

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        if not path.exists():
            return cls()
        try:
            raw = json.loads(path.read_text())
            stages = {name: StageRecord(**record) for name, record in raw.get("stages", {}).items()}
            return cls(raw.get("config_hash", ""), stages)
        except (json.JSONDecodeError, TypeError) as e:
            logger.warning("Ignoring unreadable manifest %s: %s", path, e)
            return cls()

    def save(self, path: Path):
        raw = {
            "config_hash": self.config_hash,
            "stages": {name: dataclasses.asdict(r) for name, r in sorted(self.stages.items())},
        }
        path.write_text(json.dumps(raw, indent=2, sort_keys=True) + "\n")


@dataclass
class ExperimentData:
    partition: ClientPartition
    test_set: Dataset
    model_config: ModelConfig


def load_experiment_data(config: ExperimentConfig) -> ExperimentData:
    """Load the configured source, split it across clients and size the model"""
    data = config.data
    if data.source == "har":
        if data.har_dir is None:
            raise ConfigError("data.har_dir is required for the HAR source")
        partition, test_set = har_partition(load_har(data.har_dir, get_config().cache_dir))
        test_set = test_set.head(data.test_limit)
    else:
        if data.source == "blobs":
            train = synth_blobs(data.blobs)
            test_spec = dataclasses.replace(
                data.blobs, per_label_count=data.blobs_test_per_label, seed=data.blobs.seed + 1
            )
            test_set = synth_blobs(test_spec)
        else:
            for name in ("train_images", "train_labels", "test_images", "test_labels"):
                if getattr(data, name) is None:
                    raise ConfigError(f"data.mnist.{name} is required for the MNIST source")
            train = load_mnist_idx(data.train_images, data.train_labels)
            test_set = load_mnist_idx(data.test_images, data.test_labels)
        train = train.head(data.train_limit)
        test_set = test_set.head(data.test_limit)
        partition = partition_noniid(train, config.partition)

    layer_sizes = (partition.feature_dim,) + tuple(config.hidden_layers) + (partition.num_labels,)
    return ExperimentData(partition, test_set, ModelConfig(layer_sizes))


@contextlib.contextmanager
def pipeline_lock(out_dir: Path):
    """
    Hold an exclusive lock file in out_dir for the duration of the block.

    Raises:
        ConfigError: another pipeline holds the lock
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    lock_path = out_dir / LOCK_FILE
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644)
    except FileExistsError:
        raise ConfigError(f"{out_dir} is locked by another pipeline (remove {lock_path} if it is stale)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield lock_path
    finally:
        if lock_path.exists():
            lock_path.unlink()


def alpha_suffix(index: int, alpha: float) -> str:
    return "" if index == 0 else f"_alpha{alpha!r}"


class Pipeline:
    """
    Staged experiment runner bound to one output directory.

    Stage methods return their in-memory results; cached stages are reloaded
    from their artifacts instead of recomputed.
    """

    def __init__(self, config: ExperimentConfig, threads: Optional[int] = None):
        self.config = config
        self.threads = threads if threads is not None else get_config().threads
        self.out_dir = Path(config.output_dir)
        self.manifest_path = self.out_dir / MANIFEST_FILE
        self.manifest = RunManifest.load(self.manifest_path)
        self.manifest.config_hash = config.config_hash()
        self._data: Optional[ExperimentData] = None

    @property
    def data(self) -> ExperimentData:
        if self._data is None:
            self._data = load_experiment_data(self.config)
        return self._data

    def _is_fresh(self, stage: str, key: str) -> bool:
        record = self.manifest.stages.get(stage)
        if record is None or not record.done or record.key != key:
            return False
        for name, rel_path in record.artifacts.items():
            path = self.out_dir / rel_path
            if not path.exists() or file_sha256(path) != record.hashes.get(name):
                return False
        return True

    def _artifact_hash(self, stage: str, name: str) -> str:
        return self.manifest.stages[stage].hashes[name]

    def _run_stage(self, stage: str, key: str, produce: Callable[[], Dict[str, Path]]) -> bool:
        """Run produce() unless the stage is fresh. Returns True when it ran."""
        if self._is_fresh(stage, key):
            logger.info("Stage %s is up to date, skipping", stage)
            return False

        record = StageRecord(key=key)
        self.manifest.stages[stage] = record
        started = time.perf_counter()
        try:
            artifacts = produce()
        except FedCertError as e:
            record.error = str(e)
            record.seconds = time.perf_counter() - started
            self.manifest.save(self.manifest_path)
            raise
        record.seconds = time.perf_counter() - started
        record.artifacts = {name: str(path.relative_to(self.out_dir)) for name, path in artifacts.items()}
        record.hashes = {name: file_sha256(path) for name, path in artifacts.items()}
        record.done = True
        self.manifest.save(self.manifest_path)
        logger.info("Stage %s finished in %.2fs", stage, record.seconds)
        return True

    def run_partition(self) -> ClientPartition:
        key = _key(STAGE_PARTITION, self.config.section_hash("data", "partition"))

        def produce():
            partition_path = write_partition(self.data.partition, self.out_dir / "partition.txt")
            labels_path = self.out_dir / "test_labels.txt"
            labels_path.write_text("".join(f"{int(y)}\n" for y in self.data.test_set.labels))
            return {"partition": partition_path, "test_labels": labels_path}

        self._run_stage(STAGE_PARTITION, key, produce)
        return self.data.partition

    def run_train(self) -> PredictionMatrix:
        self.run_partition()
        key = _key(
            STAGE_TRAIN,
            self._artifact_hash(STAGE_PARTITION, "partition"),
            self.config.section_hash(
                "data", "hidden_layers", "fed", "ensemble", "base_algorithm", "master_seed"
            ),
        )
        matrix_path = self.out_dir / "predictions.csv"

        def produce():
            ens = self.config.ensemble
            n = self.data.partition.n
            if ens.mode == EnsembleMode.EXACT.value:
                subsamples = enumerate_subsamples(n, ens.k)
            else:
                subsamples = sample_subsamples(n, ens.k, ens.num_models, self.config.master_seed)
            base = default_registry().create(self.config.base_algorithm)
            logger.info("Training %d models on %d-client subsamples", len(subsamples), ens.k)
            matrix = train_ensemble(
                self.data.partition,
                base,
                subsamples,
                self.config.fed,
                self.data.model_config,
                self.data.test_set,
                EnsembleMode(ens.mode),
                self.config.master_seed,
                self.threads,
                self.out_dir / "models" if ens.save_models else None,
            )
            return {"predictions": matrix.save(matrix_path)}

        self._run_stage(STAGE_TRAIN, key, produce)
        return PredictionMatrix.load(matrix_path)

    def report_paths(self) -> List[Tuple[float, Path, Path]]:
        paths = []
        for index, alpha in enumerate(self.config.certify.alphas):
            suffix = alpha_suffix(index, alpha)
            report_path = self.out_dir / f"certificates{suffix}.csv"
            paths.append((alpha, report_path, self.out_dir / f"curve{suffix}.csv"))
        return paths

    def run_certify(self) -> List[Certificate]:
        """Certificates for every configured alpha; returns those of the first"""
        matrix = self.run_train()
        key = _key(
            STAGE_CERTIFY,
            self._artifact_hash(STAGE_TRAIN, "predictions"),
            json.dumps(self.config.certify.alphas),
        )
        labels = self.data.test_set.labels

        def produce():
            artifacts = {}
            for index, (alpha, report_path, _) in enumerate(self.report_paths()):
                certs = certify_matrix(matrix, alpha)
                artifacts[f"certificates{index}"] = write_certificate_report(certs, labels, report_path)
                if matrix.mode is EnsembleMode.EXACT:
                    break
            return artifacts

        self._run_stage(STAGE_CERTIFY, key, produce)
        certs, _ = read_certificate_report(self.report_paths()[0][1])
        return certs

    def run_curve(self) -> CertifiedAccuracyCurve:
        self.run_certify()
        record = self.manifest.stages[STAGE_CERTIFY]
        key = _key(STAGE_CURVE, *sorted(record.hashes.values()))
        n, k = self.config.partition.n, self.config.ensemble.k
        curves: List[CertifiedAccuracyCurve] = []

        def produce():
            artifacts = {}
            for index, (alpha, report_path, curve_path) in enumerate(self.report_paths()):
                if not report_path.exists():
                    continue
                curve = curve_from_report(report_path, n, k)
                curves.append(curve)
                artifacts[f"curve{index}"] = write_curve(curve, curve_path)
            return artifacts

        if not self._run_stage(STAGE_CURVE, key, produce):
            curves.append(curve_from_report(self.report_paths()[0][1], n, k))
        return curves[0]

    def run_baseline(self) -> CertifiedAccuracyCurve:
        self.run_partition()
        key = _key(
            STAGE_BASELINE,
            self._artifact_hash(STAGE_PARTITION, "partition"),
            self.config.section_hash("data", "hidden_layers", "fed", "master_seed"),
        )
        n, k = self.config.partition.n, self.config.ensemble.k
        path = self.out_dir / "baseline_curve.csv"
        result: List[CertifiedAccuracyCurve] = []

        def produce():
            data = self.data
            model = train_baseline(
                data.partition.client_data, self.config.fed, data.model_config, self.config.master_seed
            )
            curve = baseline_curve(model.predict_batch(data.test_set.features), data.test_set.labels, n, k)
            result.append(curve)
            return {"baseline_curve": write_curve(curve, path)}

        if not self._run_stage(STAGE_BASELINE, key, produce):
            result.append(read_curve(path))
        return result[0]

    def run_attack(self, sizes: Optional[Sequence[int]] = None) -> List[AttackOutcome]:
        """
        Retrain contaminated rows under the configured attack.

        Raises:
            CertificateViolation: a certified prediction changed
        """
        attack = self.config.attack
        if attack is None:
            raise ConfigError("attack-eval needs an 'attack' section in the experiment config")
        sizes = list(sizes) if sizes is not None else list(attack.sizes)
        if not sizes:
            raise ConfigError("no malicious-set sizes given (attack.sizes or --sizes)")
        if self.config.base_algorithm != "fedavg":
            raise ConfigError("attacks tamper with FedAvg training; base_algorithm must be 'fedavg'")

        matrix = self.run_train()
        certs = self.run_certify()
        spec = AttackSpec(attack.kind, attack.flip_map, attack.factor, attack.target_label)
        outcomes = evaluate_attack(
            matrix,
            certs,
            self.data.partition,
            spec,
            self.config.fed,
            self.data.model_config,
            self.data.test_set,
            sizes,
            self.threads,
        )
        write_attack_report(outcomes, self.out_dir / "attack_report.csv")
        violations = [(o.size, t) for o in outcomes for t in o.violations]
        if violations:
            raise CertificateViolation(
                f"CERTIFICATE VIOLATION: {len(violations)} certified predictions changed "
                f"(size, example): {violations[:10]}"
            )
        return outcomes

    def run(self) -> RunManifest:
        """Full pipeline through the curve (and baseline/attack when configured)"""
        self.run_curve()
        if self.config.certify.baseline:
            self.run_baseline()
        if self.config.attack is not None and self.config.attack.sizes:
            self.run_attack()
        return self.manifest


def curve_from_report(report_path: Path, n: int, k: int) -> CertifiedAccuracyCurve:
    certs, labels = read_certificate_report(report_path)
    alpha = certs[0].alpha if certs else None
    return certified_accuracy_curve(certs, labels, n, k, alpha)


def read_curve(path: Path) -> CertifiedAccuracyCurve:
    lines = Path(path).read_text().splitlines()[1:]
    return CertifiedAccuracyCurve([Fraction(float(line.split(",")[1])) for line in lines])


def cmd_curve(
    report_path: Path, out_path: Path, n: int, k: int, true_labels_path: Optional[Path] = None
) -> Path:
    """
    Curve CSV from an existing certificate report. true_labels_path, when
    given, overrides the report's true_label column (one label per line).
    """
    certs, labels = read_certificate_report(report_path)
    if true_labels_path is not None:
        labels = [int(v) for v in Path(true_labels_path).read_text().split()]
    alpha = certs[0].alpha if certs else None
    return write_curve(certified_accuracy_curve(certs, labels, n, k, alpha), out_path)


def run_pipeline(config: ExperimentConfig, threads: Optional[int] = None) -> RunManifest:
    with pipeline_lock(Path(config.output_dir)):
        return Pipeline(config, threads).run()
