"""
Base federated learning algorithms.

A base algorithm turns the local datasets of a group of clients into one
classifier. FedAvg is the built-in one; others (the lookup-table oracle used
by the tightness and soundness checks) plug in through AlgorithmRegistry.
"""

import abc
import importlib
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple, Type

import numpy as np

from .datasets import Dataset
from .errors import ConfigError, NumericError
from .model import ModelConfig, ModelParams, init_params, loss_and_grad, sgd_step, zeros_like
from .rng import STREAM_BASELINE, STREAM_ROW_INIT, derive_seed

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FedConfig:
    """FedAvg hyperparameters"""

    global_iter: int
    local_iter: int = 5
    eta: float = 0.001
    batch_size: int = 32
    train_seed: int = 0

    def __post_init__(self):
        if self.global_iter < 1 or self.local_iter < 1 or self.batch_size < 1:
            raise ConfigError("global_iter, local_iter and batch_size must all be >= 1")
        if not self.eta > 0:
            raise ConfigError(f"learning rate must be positive, got {self.eta}")


@dataclass(frozen=True)
class ClientUpdate:
    """Model delta sent by one client, weighted by its local dataset size"""

    delta: ModelParams
    weight: int

    def __post_init__(self):
        if self.weight < 1:
            raise ConfigError(f"client weight must be >= 1, got {self.weight}")


class Classifier(Protocol):
    def predict_batch(self, features: np.ndarray) -> np.ndarray: ...


# Called as hook(client_id, update, global_params) after each local update.
UpdateHook = Callable[[int, ClientUpdate, ModelParams], ClientUpdate]


def local_update(
    global_params: ModelParams, data: Dataset, fed_config: FedConfig, round_seed: int
) -> ClientUpdate:
    """
    Run local_iter SGD steps from the global model on batches drawn with
    replacement, and return the resulting delta.
    """
    if len(data) == 0:
        raise ConfigError("local_update needs a non-empty dataset")
    rng = np.random.default_rng(round_seed)
    batch = min(fed_config.batch_size, len(data))
    params = global_params
    for _ in range(fed_config.local_iter):
        rows = rng.integers(0, len(data), size=batch)
        _, grad = loss_and_grad(params, data.features[rows], data.labels[rows])
        params = sgd_step(params, grad, fed_config.eta)
    return ClientUpdate(params - global_params, len(data))


def aggregate(global_params: ModelParams, updates: Sequence[ClientUpdate]) -> ModelParams:
    """global + sum_i (weight_i / total) * delta_i, summed in the given order"""
    if not updates:
        raise ConfigError("cannot aggregate zero client updates")
    total = sum(u.weight for u in updates)
    step = zeros_like(global_params)
    for update in updates:
        step = step + update.delta.scale(update.weight / total)
    return global_params + step


def fedavg_train(
    client_datasets: Sequence[Dataset],
    fed_config: FedConfig,
    model_config: ModelConfig,
    client_ids: Optional[Sequence[int]] = None,
    update_hook: Optional[UpdateHook] = None,
) -> ModelParams:
    """
    Train one global model over the given clients.

    Every client takes part in every round. Client batch streams are seeded by
    (train_seed, round, client_id) so results do not depend on scheduling.
    Empty clients are skipped.
    """
    if client_ids is None:
        client_ids = list(range(len(client_datasets)))
    if len(client_ids) != len(client_datasets):
        raise ConfigError(f"{len(client_ids)} client ids for {len(client_datasets)} datasets")
    if all(len(d) == 0 for d in client_datasets):
        raise ConfigError("every client dataset is empty")

    params = init_params(model_config)
    for round_index in range(fed_config.global_iter):
        updates: List[ClientUpdate] = []
        for client_id, data in zip(client_ids, client_datasets):
            if len(data) == 0:
                continue
            update = local_update(
                params, data, fed_config, derive_seed(fed_config.train_seed, round_index, client_id)
            )
            if update_hook is not None:
                update = update_hook(client_id, update, params)
            updates.append(update)
        params = aggregate(params, updates)
        if not params.is_finite():
            raise NumericError(f"global model diverged in round {round_index}")
        if logger.isEnabledFor(logging.DEBUG):
            features = np.concatenate([d.features for d in client_datasets if len(d)])
            labels = np.concatenate([d.labels for d in client_datasets if len(d)])
            loss, _ = loss_and_grad(params, features, labels)
            logger.debug("round %d: training loss %.6f", round_index, loss)
    return params


def train_baseline(
    client_datasets: Sequence[Dataset], fed_config: FedConfig, model_config: ModelConfig, master_seed: int
) -> ModelParams:
    """One global model over all clients, the single-model reference point"""
    seed = derive_seed(master_seed, STREAM_BASELINE)
    return fedavg_train(
        client_datasets,
        FedConfig(fed_config.global_iter, fed_config.local_iter, fed_config.eta, fed_config.batch_size, seed),
        ModelConfig(model_config.layer_sizes, derive_seed(master_seed, STREAM_BASELINE, STREAM_ROW_INIT)),
    )


class BaseAlgorithm(abc.ABC):
    """
    A base federated learning algorithm.

    train() must be a deterministic function of its arguments: the ensemble
    relies on identical inputs giving identical classifiers.

    Example:
        class MyAlgorithm(BaseAlgorithm):
            ALGORITHM_NAME = "mine"

            @property
            def description(self) -> str:
                return "..."

            def train(self, client_datasets, fed_config, model_config, client_ids):
                ...
    """

    ALGORITHM_NAME: str = ""

    @property
    @abc.abstractmethod
    def description(self) -> str:
        """Short description for `--help` style listings"""
        pass

    @property
    def name(self) -> str:
        return self.ALGORITHM_NAME

    @abc.abstractmethod
    def train(
        self,
        client_datasets: Sequence[Dataset],
        fed_config: FedConfig,
        model_config: ModelConfig,
        client_ids: Tuple[int, ...],
    ) -> Classifier:
        """Train on the clients identified by client_ids (their datasets in the same order)"""
        pass


class FedAvgAlgorithm(BaseAlgorithm):
    """FedAvg, optionally with a hook that rewrites client updates"""

    ALGORITHM_NAME = "fedavg"

    def __init__(self, update_hook: Optional[UpdateHook] = None):
        self.update_hook = update_hook

    @property
    def description(self) -> str:
        return "Federated averaging weighted by local dataset size"

    def train(self, client_datasets, fed_config, model_config, client_ids) -> ModelParams:
        return fedavg_train(client_datasets, fed_config, model_config, client_ids, self.update_hook)


class AlgorithmRegistry:
    """Maps algorithm names to BaseAlgorithm subclasses"""

    def __init__(self):
        self._algorithms: Dict[str, Type[BaseAlgorithm]] = {}

    def register(self, algorithm_class: Type[BaseAlgorithm]):
        name = getattr(algorithm_class, "ALGORITHM_NAME", None)
        if not name:
            return
        self._algorithms[name] = algorithm_class
        logger.debug("Registered base algorithm %s", name)

    def discover(self, modules: Sequence[str] = ("fedcert.core.adversary",)):
        """Import modules and register every BaseAlgorithm subclass they define"""
        for module_name in modules:
            try:
                module = importlib.import_module(module_name)
            except ImportError as e:
                logger.warning("Could not import %s: %s", module_name, e)
                continue
            for attr in vars(module).values():
                if isinstance(attr, type) and issubclass(attr, BaseAlgorithm) and attr is not BaseAlgorithm:
                    self.register(attr)

    def list_algorithms(self) -> List[str]:
        return sorted(self._algorithms)

    def create(self, name: str, **options) -> BaseAlgorithm:
        if name not in self._algorithms:
            available = ", ".join(self.list_algorithms())
            raise ConfigError(f"unknown base algorithm '{name}' (available: {available})")
        try:
            return self._algorithms[name](**options)
        except TypeError as e:
            raise ConfigError(f"bad options for base algorithm '{name}': {e}")


def default_registry() -> AlgorithmRegistry:
    registry = AlgorithmRegistry()
    registry.register(FedAvgAlgorithm)
    registry.discover()
    return registry
