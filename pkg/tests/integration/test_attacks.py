"""
Integration tests for attacks on FedAvg ensembles.
"""

import math

import numpy as np
import pytest

from fedcert.core.adversary import (
    AttackKind,
    AttackSpec,
    MaliciousSet,
    apply_attack,
    evaluate_attack,
    pretrain_target,
    write_attack_report,
)
from fedcert.core.certify import exact_certify
from fedcert.core.datasets import PartitionConfig, partition_noniid
from fedcert.core.ensemble import EnsembleMode, enumerate_subsamples, train_ensemble
from fedcert.core.errors import ConfigError, DomainError, ShapeError
from fedcert.core.fedlearn import FedAvgAlgorithm, FedConfig
from fedcert.core.model import init_params


class TestApplyAttack:
    """Test tampered training behaviour."""

    def test_identity_flip_is_clean(self, tiny_partition, blob_test_set, fed_config, model_config):
        """Test an empty flip map trains bit-identical models."""
        malicious = MaliciousSet({0, 3}, 8)
        attacked, algorithm = apply_attack(
            tiny_partition, malicious, AttackSpec(AttackKind.LABEL_FLIP), fed_config, model_config
        )
        subsamples = [(0, 1), (2, 3), (4, 5)]
        clean = train_ensemble(
            tiny_partition, FedAvgAlgorithm(), subsamples, fed_config, model_config, blob_test_set,
            EnsembleMode.SAMPLED,
        )
        tampered = train_ensemble(
            attacked, algorithm, subsamples, fed_config, model_config, blob_test_set, EnsembleMode.SAMPLED
        )
        assert np.array_equal(clean.entries, tampered.entries)

    def test_flip_relabels_only_malicious(self, tiny_partition, fed_config, model_config):
        """Test label flipping touches the malicious clients' data only."""
        spec = AttackSpec(AttackKind.LABEL_FLIP, {0: 1, 1: 0})
        attacked, _ = apply_attack(tiny_partition, MaliciousSet({2}, 8), spec, fed_config, model_config)
        before = tiny_partition.client_data[2].labels
        after = attacked.client_data[2].labels
        assert np.array_equal(after[before == 0], np.ones(np.sum(before == 0)))
        assert np.array_equal(after[before > 1], before[before > 1])
        assert attacked.client_data[5] is tiny_partition.client_data[5]

    def test_zero_scale_keeps_init(self, tiny_partition, fed_config, model_config):
        """Test factor 0 on every participating client leaves the initial model."""
        spec = AttackSpec(AttackKind.SCALED_UPDATE, factor=0.0)
        _, algorithm = apply_attack(tiny_partition, MaliciousSet({0, 1}, 8), spec, fed_config, model_config)
        trained = algorithm.train(tiny_partition.datasets_for((0, 1)), fed_config, model_config, (0, 1))
        assert trained.max_abs_diff(init_params(model_config)) == 0.0

    def test_negative_scale_changes_predictions(self, tiny_partition, blobs, fed_config, model_config):
        """Test factor -100 on a single-client model changes its predictions."""
        spec = AttackSpec(AttackKind.SCALED_UPDATE, factor=-100.0)
        _, algorithm = apply_attack(tiny_partition, MaliciousSet({4}, 8), spec, fed_config, model_config)
        data = tiny_partition.datasets_for((4,))
        clean = FedAvgAlgorithm().train(data, fed_config, model_config, (4,))
        attacked = algorithm.train(data, fed_config, model_config, (4,))
        assert not np.array_equal(clean.predict_batch(blobs.features), attacked.predict_batch(blobs.features))

    def test_scale_ignores_honest_clients(self, tiny_partition, fed_config, model_config):
        """Test the hook leaves honest clients' updates alone."""
        spec = AttackSpec(AttackKind.SCALED_UPDATE, factor=-100.0)
        _, algorithm = apply_attack(tiny_partition, MaliciousSet({4}, 8), spec, fed_config, model_config)
        data = tiny_partition.datasets_for((1, 2))
        clean = FedAvgAlgorithm().train(data, fed_config, model_config, (1, 2))
        assert algorithm.train(data, fed_config, model_config, (1, 2)).max_abs_diff(clean) == 0.0

    def test_arbitrary_update_reaches_target(self, tiny_partition, fed_config, model_config):
        """Test factor 1 with only malicious clients lands on the target model."""
        malicious = MaliciousSet({0, 1}, 8)
        spec = AttackSpec(AttackKind.ARBITRARY_UPDATE, factor=1.0, target_label=2)
        _, algorithm = apply_attack(tiny_partition, malicious, spec, fed_config, model_config)
        target = pretrain_target(tiny_partition, malicious, 2, fed_config, model_config)
        trained = algorithm.train(tiny_partition.datasets_for((0, 1)), fed_config, model_config, (0, 1))
        assert trained.max_abs_diff(target) < 1e-9

    def test_empty_malicious_set(self, tiny_partition, fed_config, model_config):
        """Test an empty malicious set returns the partition and plain FedAvg without pretraining."""
        spec = AttackSpec(AttackKind.ARBITRARY_UPDATE, factor=1.0, target_label=2)
        nobody = MaliciousSet(set(), 8)
        attacked, algorithm = apply_attack(tiny_partition, nobody, spec, fed_config, model_config)
        assert attacked is tiny_partition
        trained = algorithm.train(tiny_partition.datasets_for((0, 1)), fed_config, model_config, (0, 1))
        clean = FedAvgAlgorithm().train(tiny_partition.datasets_for((0, 1)), fed_config, model_config, (0, 1))
        assert trained.max_abs_diff(clean) == 0.0

    def test_invalid_flip(self, tiny_partition, fed_config, model_config):
        """Test a flip to a missing label raises ConfigError."""
        spec = AttackSpec(AttackKind.LABEL_FLIP, {0: 9})
        with pytest.raises(ConfigError):
            apply_attack(tiny_partition, MaliciousSet({0}, 8), spec, fed_config, model_config)

    def test_malicious_set_size_mismatch(self, tiny_partition, fed_config, model_config):
        """Test a malicious set over the wrong number of clients raises DomainError."""
        with pytest.raises(DomainError):
            apply_attack(
                tiny_partition,
                MaliciousSet({0}, 5),
                AttackSpec(AttackKind.LABEL_FLIP),
                fed_config,
                model_config,
            )


class TestEvaluateAttack:
    """Test attack evaluation against certified predictions."""

    @pytest.fixture
    def ten_client_setup(self, blobs, blob_test_set, model_config):
        partition = partition_noniid(blobs, PartitionConfig(n=10, q=0.5, seed=1, groups=2))
        fed = FedConfig(global_iter=3, local_iter=2, eta=0.5, batch_size=8)
        matrix = train_ensemble(
            partition, FedAvgAlgorithm(), enumerate_subsamples(10, 2), fed, model_config, blob_test_set,
            EnsembleMode.EXACT, master_seed=4,
        )
        return partition, fed, matrix, exact_certify(matrix)

    @pytest.mark.parametrize(
        "spec",
        [
            AttackSpec(AttackKind.LABEL_FLIP, {0: 1, 1: 2, 2: 3, 3: 0}),
            AttackSpec(AttackKind.SCALED_UPDATE, factor=100.0),
            AttackSpec(AttackKind.ARBITRARY_UPDATE, factor=5.0, target_label=3),
        ],
    )
    def test_no_certificate_violations(self, ten_client_setup, blob_test_set, model_config, spec):
        """Test no certified prediction changes at any size up to the largest certified level."""
        partition, fed, matrix, certs = ten_client_setup
        top_level = max((c.m_star for c in certs if not c.abstained), default=0)
        assert top_level >= 1
        sizes = list(range(1, top_level + 1))
        outcomes = evaluate_attack(matrix, certs, partition, spec, fed, model_config, blob_test_set, sizes)
        assert [o.size for o in outcomes] == sizes
        assert [o.retrained_rows for o in outcomes] == [45 - math.comb(10 - m, 2) for m in sizes]
        for outcome in outcomes:
            assert outcome.certified > 0
            assert outcome.violations == ()
            assert len(outcome.malicious) == outcome.size

    def test_size_zero_is_clean(self, ten_client_setup, blob_test_set, model_config):
        """Test a sweep starting at size 0 reports the clean ensemble for that size."""
        partition, fed, matrix, certs = ten_client_setup
        spec = AttackSpec(AttackKind.ARBITRARY_UPDATE, factor=5.0, target_label=3)
        clean, attacked = evaluate_attack(
            matrix, certs, partition, spec, fed, model_config, blob_test_set, [0, 1]
        )
        assert (clean.malicious, clean.retrained_rows, clean.changed, clean.violations) == ((), 0, 0, ())
        assert clean.certified == sum(not c.abstained for c in certs)
        assert attacked.retrained_rows == 9

    def test_report(self, ten_client_setup, blob_test_set, model_config, temp_dir):
        """Test the attack report lists one row per size."""
        partition, fed, matrix, certs = ten_client_setup
        spec = AttackSpec(AttackKind.LABEL_FLIP, {0: 1})
        outcomes = evaluate_attack(matrix, certs, partition, spec, fed, model_config, blob_test_set, [1])
        lines = write_attack_report(outcomes, temp_dir / "attack_report.csv").read_text().splitlines()
        assert lines[0] == "size,malicious,retrained_rows,certified,changed,violations"
        assert lines[1].startswith("1,")
        assert lines[1].endswith(",")

    def test_certificate_count_mismatch(self, ten_client_setup, blob_test_set, model_config):
        """Test certificates for the wrong number of examples raise ShapeError."""
        partition, fed, matrix, certs = ten_client_setup
        spec = AttackSpec(AttackKind.LABEL_FLIP)
        with pytest.raises(ShapeError):
            evaluate_attack(matrix, certs[:-1], partition, spec, fed, model_config, blob_test_set, [1])
