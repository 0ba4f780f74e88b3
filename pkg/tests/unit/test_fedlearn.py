"""
Unit tests for fedlearn.py - FedAvg and the base algorithm registry.
"""

import numpy as np
import pytest

from fedcert.core.adversary import LookupBaseAlgorithm
from fedcert.core.datasets import Dataset
from fedcert.core.errors import ConfigError
from fedcert.core.fedlearn import (
    AlgorithmRegistry,
    BaseAlgorithm,
    ClientUpdate,
    FedAvgAlgorithm,
    FedConfig,
    aggregate,
    default_registry,
    fedavg_train,
    local_update,
    train_baseline,
)
from fedcert.core.model import ModelConfig, init_params, loss_and_grad, sgd_step, zeros_like
from fedcert.core.rng import derive_seed


class TestFedConfig:
    """Test hyperparameter validation."""

    def test_defaults(self):
        """Test the defaults for local steps, learning rate and batch size."""
        config = FedConfig(global_iter=10)
        assert (config.local_iter, config.eta, config.batch_size) == (5, 0.001, 32)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"global_iter": 0},
            {"global_iter": 1, "local_iter": 0},
            {"global_iter": 1, "batch_size": 0},
            {"global_iter": 1, "eta": 0.0},
        ],
    )
    def test_invalid(self, kwargs):
        """Test out-of-range hyperparameters raise ConfigError."""
        with pytest.raises(ConfigError):
            FedConfig(**kwargs)

    def test_client_weight_positive(self):
        """Test a client update with weight 0 is rejected."""
        params = init_params(ModelConfig((2, 2)))
        with pytest.raises(ConfigError):
            ClientUpdate(params, 0)


class TestLocalUpdate:
    """Test one client's local training."""

    def test_same_seed_same_delta(self, blobs):
        """Test the same round seed twice gives identical deltas."""
        params = init_params(ModelConfig((4, 4), init_seed=1))
        config = FedConfig(global_iter=1, local_iter=3, eta=0.1, batch_size=8)
        a = local_update(params, blobs, config, 77)
        b = local_update(params, blobs, config, 77)
        assert a.delta.max_abs_diff(b.delta) == 0.0
        assert a.weight == len(blobs)

    def test_two_steps_unrolled(self, blobs):
        """Test local_iter = 2 equals two chained SGD steps on the sampled batches."""
        params = init_params(ModelConfig((4, 4), init_seed=1))
        config = FedConfig(global_iter=1, local_iter=2, eta=0.1, batch_size=8)
        update = local_update(params, blobs, config, 5)

        rng = np.random.default_rng(5)
        expected = params
        for _ in range(2):
            rows = rng.integers(0, len(blobs), size=8)
            _, grad = loss_and_grad(expected, blobs.features[rows], blobs.labels[rows])
            expected = sgd_step(expected, grad, 0.1)
        assert update.delta.max_abs_diff(expected - params) < 1e-12

    def test_batch_capped_at_dataset_size(self):
        """Test a dataset smaller than the batch size still trains."""
        data = Dataset(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 1]), 2)
        params = init_params(ModelConfig((2, 2)))
        update = local_update(params, data, FedConfig(global_iter=1, batch_size=32), 3)
        assert update.weight == 2
        assert update.delta.is_finite()

    def test_empty_dataset(self):
        """Test local training on no data raises ConfigError."""
        data = Dataset(np.zeros((0, 2)), np.zeros(0, dtype=int), 2)
        with pytest.raises(ConfigError):
            local_update(init_params(ModelConfig((2, 2))), data, FedConfig(global_iter=1), 0)


class TestAggregate:
    """Test weighted averaging of client deltas."""

    def test_weighted_mean(self):
        """Test weights 1 and 3 with deltas d and 0 move the model by d/4."""
        params = init_params(ModelConfig((3, 2), init_seed=4))
        d = init_params(ModelConfig((3, 2), init_seed=5))
        result = aggregate(params, [ClientUpdate(d, 1), ClientUpdate(zeros_like(d), 3)])
        assert (result - params).max_abs_diff(d.scale(0.25)) < 1e-12

    def test_equal_deltas(self, blobs):
        """Test two clients with identical data and seeds aggregate to either delta."""
        params = init_params(ModelConfig((4, 4), init_seed=1))
        config = FedConfig(global_iter=1, local_iter=2, eta=0.1, batch_size=8)
        update = local_update(params, blobs, config, 9)
        result = aggregate(params, [update, local_update(params, blobs, config, 9)])
        assert (result - params).max_abs_diff(update.delta) < 1e-12

    def test_affine(self):
        """Test scaling every delta by c scales the aggregated delta by c."""
        params = init_params(ModelConfig((3, 2), init_seed=4))
        deltas = [init_params(ModelConfig((3, 2), init_seed=s)) for s in (5, 6, 7)]
        weights = [2, 5, 1]
        base = aggregate(params, [ClientUpdate(d, w) for d, w in zip(deltas, weights)]) - params
        scaled = aggregate(params, [ClientUpdate(d.scale(3.0), w) for d, w in zip(deltas, weights)]) - params
        assert scaled.max_abs_diff(base.scale(3.0)) < 1e-12

    def test_equal_weights_unweighted_mean(self):
        """Test equal weights reduce to the plain mean."""
        params = zeros_like(init_params(ModelConfig((3, 2))))
        deltas = [init_params(ModelConfig((3, 2), init_seed=s)) for s in range(4)]
        result = aggregate(params, [ClientUpdate(d, 7) for d in deltas])
        mean = [np.mean(ts, axis=0) for ts in zip(*(d.tensors() for d in deltas))]
        for got, expected in zip(result.tensors(), mean):
            assert np.max(np.abs(got - expected)) <= 1e-12

    def test_no_updates(self):
        """Test aggregating nothing raises ConfigError."""
        with pytest.raises(ConfigError):
            aggregate(init_params(ModelConfig((2, 2))), [])


class TestFedAvgTrain:
    """Test the FedAvg training loop."""

    def test_single_client_single_step(self, blobs):
        """Test one client, one round, one local step equals one plain SGD step."""
        model_config = ModelConfig((4, 4), init_seed=2)
        config = FedConfig(global_iter=1, local_iter=1, eta=0.2, batch_size=16, train_seed=13)
        trained = fedavg_train([blobs], config, model_config)

        rng = np.random.default_rng(derive_seed(13, 0, 0))
        rows = rng.integers(0, len(blobs), size=16)
        start = init_params(model_config)
        _, grad = loss_and_grad(start, blobs.features[rows], blobs.labels[rows])
        assert trained.max_abs_diff(sgd_step(start, grad, 0.2)) < 1e-12

    def test_deterministic(self, tiny_partition, fed_config, model_config):
        """Test identical inputs give identical models."""
        data = tiny_partition.datasets_for((0, 3, 5))
        a = fedavg_train(data, fed_config, model_config, (0, 3, 5))
        b = fedavg_train(data, fed_config, model_config, (0, 3, 5))
        assert a.max_abs_diff(b) == 0.0

    def test_empty_clients_skipped(self, blobs, fed_config, model_config):
        """Test an empty client does not change the result."""
        empty = blobs.subset(np.arange(0))
        a = fedavg_train([blobs], fed_config, model_config, [0])
        b = fedavg_train([blobs, empty], fed_config, model_config, [0, 1])
        assert a.max_abs_diff(b) == 0.0

    def test_all_empty(self, blobs, fed_config, model_config):
        """Test training with only empty clients raises ConfigError."""
        empty = blobs.subset(np.arange(0))
        with pytest.raises(ConfigError, match="empty"):
            fedavg_train([empty, empty], fed_config, model_config)

    def test_learns_blobs(self, blobs, model_config):
        """Test FedAvg fits well separated blobs."""
        config = FedConfig(global_iter=20, local_iter=5, eta=0.5, batch_size=16)
        trained = fedavg_train([blobs], config, model_config)
        accuracy = np.mean(trained.predict_batch(blobs.features) == blobs.labels)
        assert accuracy >= 0.9

    def test_baseline_deterministic(self, tiny_partition, fed_config, model_config):
        """Test the single-model baseline depends only on the master seed."""
        a = train_baseline(tiny_partition.client_data, fed_config, model_config, 3)
        b = train_baseline(tiny_partition.client_data, fed_config, model_config, 3)
        c = train_baseline(tiny_partition.client_data, fed_config, model_config, 4)
        assert a.max_abs_diff(b) == 0.0
        assert a.max_abs_diff(c) > 0.0


class TestAlgorithmRegistry:
    """Test base algorithm registration and lookup."""

    def test_default_algorithms(self):
        """Test fedavg and lookup are registered by default."""
        assert default_registry().list_algorithms() == ["fedavg", "lookup"]

    def test_create_fedavg(self):
        """Test creating FedAvg by name."""
        algorithm = default_registry().create("fedavg")
        assert isinstance(algorithm, FedAvgAlgorithm)
        assert algorithm.name == "fedavg"
        assert algorithm.description

    def test_create_lookup_with_table(self):
        """Test creating the lookup algorithm with its table."""
        algorithm = default_registry().create("lookup", table={(0, 1): (2, 0)})
        assert isinstance(algorithm, LookupBaseAlgorithm)
        assert algorithm((0, 1)) == (2, 0)

    def test_lookup_without_table(self):
        """Test the lookup algorithm cannot be created without its table."""
        with pytest.raises(ConfigError, match="bad options"):
            default_registry().create("lookup")

    def test_unknown(self):
        """Test an unknown algorithm name raises ConfigError listing the choices."""
        with pytest.raises(ConfigError, match="fedavg"):
            default_registry().create("krum")

    def test_register_custom(self):
        """Test registering a custom subclass."""

        class Constant(BaseAlgorithm):
            ALGORITHM_NAME = "constant"

            @property
            def description(self):
                return "Always label 0"

            def train(self, client_datasets, fed_config, model_config, client_ids):
                return None

        registry = AlgorithmRegistry()
        registry.register(Constant)
        assert registry.list_algorithms() == ["constant"]
        assert registry.create("constant").name == "constant"

    def test_abstract_base(self):
        """Test the abstract base cannot be instantiated."""
        with pytest.raises(TypeError):
            BaseAlgorithm()
