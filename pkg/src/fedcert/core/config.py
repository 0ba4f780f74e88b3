"""
Configuration management for fedcert

Two layers:
1. RuntimeConfig: machine-level knobs (threads, log level, caps) resolved as
   environment variables (FEDCERT_*) > config file (~/.config/fedcert/config
   or $FEDCERT_CONFIG) > defaults
2. ExperimentConfig: one experiment, loaded from a JSON document
"""

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from .datasets import BlobSpec, PartitionConfig
from .errors import ConfigError
from .fedlearn import FedConfig


class RuntimeConfig:
    """Runtime configuration for fedcert"""

    DEFAULT_CONFIG_DIR = "~/.config/fedcert"
    DEFAULT_CONFIG_FILE = "config"
    DEFAULT_CACHE_DIR = "~/.cache/fedcert"
    DEFAULT_ENUM_CAP = 100_000
    DEFAULT_BRUTE_FORCE_CAP = 12

    def __init__(self):
        self._config_file: Optional[Path] = None
        self._threads: int = 1
        self._log_level: str = "INFO"
        self._enum_cap: int = self.DEFAULT_ENUM_CAP
        self._brute_force_cap: int = self.DEFAULT_BRUTE_FORCE_CAP
        self._cache_dir: Optional[Path] = None
        self._load_config()

    def _load_config(self):
        """Load configuration from env vars and/or config file"""
        config_file_env = os.environ.get("FEDCERT_CONFIG")
        if config_file_env:
            self._config_file = Path(config_file_env).expanduser()
        else:
            self._config_file = Path(self.DEFAULT_CONFIG_DIR).expanduser() / self.DEFAULT_CONFIG_FILE

        config_values = self._read_config_file()

        self._threads = self._get_int("FEDCERT_THREADS", config_values.get("threads"), 1, minimum=1)
        self._log_level = self._get_str("FEDCERT_LOG_LEVEL", config_values.get("log_level"), "INFO").upper()
        self._enum_cap = self._get_int(
            "FEDCERT_ENUM_CAP", config_values.get("enum_cap"), self.DEFAULT_ENUM_CAP, minimum=1
        )
        self._brute_force_cap = self._get_int(
            "FEDCERT_BRUTE_FORCE_CAP",
            config_values.get("brute_force_cap"),
            self.DEFAULT_BRUTE_FORCE_CAP,
            minimum=1,
        )
        self._cache_dir = self._get_path(
            "FEDCERT_CACHE_DIR", config_values.get("cache_dir"), Path(self.DEFAULT_CACHE_DIR).expanduser()
        )

    def _get_path(self, env_var: str, config_value: Optional[str], default: Path) -> Path:
        """Get path with priority: env var > config file > default"""
        if os.environ.get(env_var):
            return Path(os.environ[env_var]).expanduser()
        if config_value:
            return Path(config_value).expanduser()
        return default

    def _get_str(self, env_var: str, config_value: Optional[str], default: str) -> str:
        """Get string value with priority: env var > config file > default"""
        env_val = os.environ.get(env_var)
        if env_val:
            return env_val
        if config_value:
            return config_value
        return default

    def _get_int(self, env_var: str, config_value: Optional[str], default: int, minimum: int = 0) -> int:
        """Get integer value with priority: env var > config file > default"""
        raw = self._get_str(env_var, config_value, str(default))
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"{env_var} must be an integer, got '{raw}'")
        if value < minimum:
            raise ConfigError(f"{env_var} must be >= {minimum}, got {value}")
        return value

    def _read_config_file(self) -> dict:
        """Read `key = value` lines from the config file if it exists"""
        if not self._config_file.exists():
            return {}

        values = {}
        with open(self._config_file, "r") as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" in line:
                    key, value = line.split("=", 1)
                    values[key.strip()] = value.strip().strip("\"'")
        return values

    @property
    def config_file(self) -> Path:
        return self._config_file

    @property
    def threads(self) -> int:
        """Worker threads for ensemble training"""
        return self._threads

    @property
    def log_level(self) -> str:
        return self._log_level

    @property
    def enum_cap(self) -> int:
        """Largest C(n,k) EXACT mode will enumerate"""
        return self._enum_cap

    @property
    def brute_force_cap(self) -> int:
        """Largest n for which malicious sets are enumerated"""
        return self._brute_force_cap

    @property
    def cache_dir(self) -> Path:
        return self._cache_dir

    def __repr__(self) -> str:
        return (
            f"RuntimeConfig("
            f"threads={self.threads}, "
            f"log_level='{self.log_level}', "
            f"enum_cap={self.enum_cap}, "
            f"brute_force_cap={self.brute_force_cap}"
            f")"
        )


# Global config instance
_config: Optional[RuntimeConfig] = None


def get_config() -> RuntimeConfig:
    """Get the global configuration instance"""
    global _config
    if _config is None:
        _config = RuntimeConfig()
    return _config


def reset_config():
    """Reset the global configuration (useful for testing)"""
    global _config
    _config = None


DATA_SOURCES = ("blobs", "mnist", "har")
ENSEMBLE_MODES = ("EXACT", "SAMPLED")
ATTACK_KINDS = ("LABEL_FLIP", "SCALED_UPDATE", "ARBITRARY_UPDATE")


@dataclass
class DataSourceConfig:
    """Where examples come from. Paths are absolute after loading."""

    source: str = "blobs"
    blobs: Optional[BlobSpec] = None
    blobs_test_per_label: int = 20
    train_images: Optional[Path] = None
    train_labels: Optional[Path] = None
    test_images: Optional[Path] = None
    test_labels: Optional[Path] = None
    har_dir: Optional[Path] = None
    train_limit: Optional[int] = None
    test_limit: Optional[int] = None


@dataclass
class EnsembleConfig:
    k: int = 2
    mode: str = "EXACT"
    num_models: int = 500
    save_models: bool = False


@dataclass
class CertifyConfig:
    alphas: List[float] = field(default_factory=lambda: [0.001])
    baseline: bool = False

    @property
    def alpha(self) -> float:
        return self.alphas[0]


@dataclass
class AttackConfig:
    kind: str = "LABEL_FLIP"
    flip_map: Dict[int, int] = field(default_factory=dict)
    factor: float = 10.0
    target_label: int = 0
    sizes: List[int] = field(default_factory=list)


@dataclass
class ExperimentConfig:
    """A full experiment: data, split, model, training, ensemble, certification"""

    name: str
    data: DataSourceConfig
    partition: PartitionConfig
    hidden_layers: Tuple[int, ...]
    fed: FedConfig
    ensemble: EnsembleConfig
    certify: CertifyConfig
    attack: Optional[AttackConfig] = None
    base_algorithm: str = "fedavg"
    output_dir: Path = Path("out")
    master_seed: int = 0

    def validate(self):
        if self.data.source not in DATA_SOURCES:
            raise ConfigError(f"data.source must be one of {DATA_SOURCES}, got '{self.data.source}'")
        if self.ensemble.mode not in ENSEMBLE_MODES:
            raise ConfigError(f"ensemble.mode must be one of {ENSEMBLE_MODES}, got '{self.ensemble.mode}'")
        n, k = self.partition.n, self.ensemble.k
        if not 1 <= k <= n:
            raise ConfigError(f"need 1 <= k <= n, got k={k}, n={n}")
        if self.ensemble.mode == "SAMPLED" and self.ensemble.num_models < 1:
            raise ConfigError("SAMPLED mode needs ensemble.N >= 1")
        if self.ensemble.mode == "EXACT" and math.comb(n, k) > get_config().enum_cap:
            raise ConfigError(
                f"EXACT mode would train C({n},{k}) = {math.comb(n, k)} models, above the cap of "
                f"{get_config().enum_cap}; use SAMPLED mode"
            )
        if not self.certify.alphas or not all(0 < a < 1 for a in self.certify.alphas):
            raise ConfigError(f"every alpha must lie in (0, 1), got {self.certify.alphas}")
        if self.attack is not None and self.attack.kind not in ATTACK_KINDS:
            raise ConfigError(f"attack.kind must be one of {ATTACK_KINDS}, got '{self.attack.kind}'")
        if not 0 <= self.master_seed < 2**64:
            raise ConfigError(f"master_seed must be an unsigned 64-bit integer, got {self.master_seed}")
        if self.data.source == "har" and n != 30:
            raise ConfigError("HAR users are the clients, so partition.n must be 30")

    def with_overrides(
        self, seed: Optional[int] = None, output_dir: Optional[Path] = None
    ) -> "ExperimentConfig":
        updated = self
        if seed is not None:
            updated = replace(updated, master_seed=seed)
        if output_dir is not None:
            updated = replace(updated, output_dir=Path(output_dir))
        updated.validate()
        return updated

    def to_dict(self) -> Dict[str, Any]:
        raw = asdict(self)
        raw.pop("output_dir")
        return raw

    def section_hash(self, *sections: str) -> str:
        """SHA-256 of the named top-level sections in canonical JSON"""
        raw = self.to_dict()
        subset = {name: raw.get(name) for name in sections}
        encoded = json.dumps(subset, sort_keys=True, default=str).encode()
        return hashlib.sha256(encoded).hexdigest()

    def config_hash(self) -> str:
        return self.section_hash(*self.to_dict().keys())


def _resolve(base: Path, value: Optional[str]) -> Optional[Path]:
    if value is None:
        return None
    path = Path(value).expanduser()
    return path if path.is_absolute() else (base / path).resolve()


def _section(raw: Dict[str, Any], name: str) -> Dict[str, Any]:
    value = raw.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"'{name}' must be an object")
    return value


def parse_experiment_config(raw: Dict[str, Any], base_dir: Path) -> ExperimentConfig:
    """Build an ExperimentConfig from a parsed JSON document"""
    try:
        data_raw = _section(raw, "data")
        blobs_raw = data_raw.get("blobs")
        blobs = None
        if blobs_raw is not None:
            blobs = BlobSpec(
                num_labels=int(blobs_raw["num_labels"]),
                feature_dim=int(blobs_raw["feature_dim"]),
                per_label_count=int(blobs_raw["per_label_count"]),
                centroid_scale=float(blobs_raw.get("centroid_scale", 1.0)),
                noise_sigma=float(blobs_raw.get("noise_sigma", 0.1)),
                seed=int(blobs_raw.get("seed", 0)),
            )
        mnist_raw = data_raw.get("mnist", {})
        data = DataSourceConfig(
            source=data_raw.get("source", "blobs"),
            blobs=blobs,
            blobs_test_per_label=int(data_raw.get("blobs_test_per_label", 20)),
            train_images=_resolve(base_dir, mnist_raw.get("train_images")),
            train_labels=_resolve(base_dir, mnist_raw.get("train_labels")),
            test_images=_resolve(base_dir, mnist_raw.get("test_images")),
            test_labels=_resolve(base_dir, mnist_raw.get("test_labels")),
            har_dir=_resolve(base_dir, data_raw.get("har_dir")),
            train_limit=data_raw.get("train_limit"),
            test_limit=data_raw.get("test_limit"),
        )
        if data.source == "blobs" and data.blobs is None:
            raise ConfigError("data.source 'blobs' needs a data.blobs section")

        part_raw = _section(raw, "partition")
        groups = part_raw.get("groups")
        partition = PartitionConfig(
            n=int(part_raw["n"]),
            q=float(part_raw.get("q", 1.0)),
            seed=int(part_raw.get("seed", 0)),
            groups=int(groups) if groups is not None else None,
        )

        fed_raw = _section(raw, "fed")
        fed = FedConfig(
            global_iter=int(fed_raw.get("global_iter", 10)),
            local_iter=int(fed_raw.get("local_iter", 5)),
            eta=float(fed_raw.get("eta", 0.001)),
            batch_size=int(fed_raw.get("batch_size", 32)),
        )

        ens_raw = _section(raw, "ensemble")
        ensemble = EnsembleConfig(
            k=int(ens_raw.get("k", 2)),
            mode=str(ens_raw.get("mode", "EXACT")).upper(),
            num_models=int(ens_raw.get("N", 500)),
            save_models=bool(ens_raw.get("save_models", False)),
        )

        cert_raw = _section(raw, "certify")
        alphas = cert_raw.get("alphas", [cert_raw.get("alpha", 0.001)])
        certify = CertifyConfig(
            alphas=[float(a) for a in alphas], baseline=bool(cert_raw.get("baseline", False))
        )

        attack = None
        if raw.get("attack") is not None:
            att_raw = _section(raw, "attack")
            attack = AttackConfig(
                kind=str(att_raw.get("kind", "LABEL_FLIP")).upper(),
                flip_map={int(k): int(v) for k, v in att_raw.get("flip_map", {}).items()},
                factor=float(att_raw.get("factor", 10.0)),
                target_label=int(att_raw.get("target_label", 0)),
                sizes=[int(s) for s in att_raw.get("sizes", [])],
            )

        config = ExperimentConfig(
            name=str(raw.get("name", "experiment")),
            data=data,
            partition=partition,
            hidden_layers=tuple(int(h) for h in _section(raw, "model").get("hidden", [])),
            fed=fed,
            ensemble=ensemble,
            certify=certify,
            attack=attack,
            base_algorithm=str(raw.get("base_algorithm", "fedavg")),
            output_dir=_resolve(base_dir, raw.get("output_dir", "out")),
            master_seed=int(raw.get("master_seed", 0)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid experiment config: {e}")

    config.validate()
    return config


def load_experiment_config(path) -> ExperimentConfig:
    """Load and validate an experiment JSON document; relative paths resolve against its directory"""
    path = Path(path).expanduser()
    if not path.exists():
        raise ConfigError(f"experiment config not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}")
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must contain a JSON object")
    return parse_experiment_config(raw, path.parent.resolve())
