"""
Integration tests for the staged experiment pipeline.
"""

import json
import os
from pathlib import Path

import pytest

from fedcert.core.config import load_experiment_config
from fedcert.core.errors import ConfigError
from fedcert.core.pipeline import LOCK_FILE, Pipeline, cmd_curve, run_pipeline


def read_lines(path):
    return path.read_text().splitlines()


@pytest.mark.integration
class TestRunPipeline:
    """Test full pipeline runs on synthetic blobs."""

    def test_exact_run(self, write_experiment, temp_dir):
        """Test n=8, k=2 EXACT writes every artifact and a curve over m=0..6."""
        config = load_experiment_config(write_experiment())
        manifest = run_pipeline(config, threads=1)
        out = temp_dir / "out"
        for name in ("partition.txt", "test_labels.txt", "predictions.csv", "certificates.csv", "curve.csv"):
            assert (out / name).exists(), name
        curve = read_lines(out / "curve.csv")
        assert curve[0] == "m,certified_accuracy"
        assert [line.split(",")[0] for line in curve[1:]] == [str(m) for m in range(7)]
        values = [float(line.split(",")[1]) for line in curve[1:]]
        assert values == sorted(values, reverse=True)
        assert set(manifest.stages) == {"partition", "train-ensemble", "certify", "curve"}
        assert not (out / LOCK_FILE).exists()

    def test_rerun_is_cached(self, write_experiment, temp_dir):
        """Test a second run skips every stage and leaves all files unchanged."""
        config = load_experiment_config(write_experiment())
        run_pipeline(config, threads=1)
        out = temp_dir / "out"
        before = {p.name: p.read_bytes() for p in out.iterdir() if p.is_file()}
        run_pipeline(config, threads=1)
        after = {p.name: p.read_bytes() for p in out.iterdir() if p.is_file()}
        assert before == after

    def test_tampered_artifact_recomputed(self, write_experiment, temp_dir):
        """Test an edited prediction matrix is detected and retrained."""
        config = load_experiment_config(write_experiment())
        run_pipeline(config, threads=1)
        predictions = temp_dir / "out" / "predictions.csv"
        original = predictions.read_text()
        predictions.write_text(original.replace("\n", "\n\n", 1))
        run_pipeline(config, threads=1)
        assert predictions.read_text() == original

    def test_changed_alpha_keeps_training(self, write_experiment, temp_dir):
        """Test changing certification settings reuses the trained ensemble."""
        run_pipeline(load_experiment_config(write_experiment()), threads=1)
        manifest_path = temp_dir / "out" / "manifest.json"
        trained = json.loads(manifest_path.read_text())["stages"]["train-ensemble"]
        certified = json.loads(manifest_path.read_text())["stages"]["certify"]

        config = load_experiment_config(write_experiment(certify={"alphas": [0.05]}))
        run_pipeline(config, threads=1)
        stages = json.loads(manifest_path.read_text())["stages"]
        assert stages["train-ensemble"] == trained
        assert stages["certify"]["key"] != certified["key"]

    def test_threads_do_not_change_outputs(self, write_experiment, temp_dir):
        """Test one and three threads give byte-identical certificates and curves."""
        outputs = []
        for threads in (1, 3):
            out = f"out{threads}"
            run_pipeline(load_experiment_config(write_experiment(f"{out}.json", output_dir=out)), threads)
            outputs.append(
                [(temp_dir / out / name).read_bytes() for name in ("certificates.csv", "curve.csv")]
            )
        assert outputs[0] == outputs[1]

    def test_sampled_several_alphas(self, write_experiment, temp_dir):
        """Test SAMPLED mode writes one report and curve per alpha."""
        config = load_experiment_config(
            write_experiment(ensemble={"k": 2, "mode": "SAMPLED", "N": 40}, certify={"alphas": [0.01, 0.2]})
        )
        run_pipeline(config, threads=2)
        out = temp_dir / "out"
        first = read_lines(out / "certificates.csv")
        second = read_lines(out / "certificates_alpha0.2.csv")
        assert first[1].endswith("CONF(1-0.01)")
        assert second[1].endswith("CONF(1-0.2)")
        assert len(read_lines(out / "curve_alpha0.2.csv")) == 8
        assert len(read_lines(out / "predictions.csv")) == 1 + 2 * 40

    def test_locked_output_dir(self, write_experiment, temp_dir):
        """Test a held lock file stops a second pipeline."""
        config = load_experiment_config(write_experiment())
        (temp_dir / "out").mkdir()
        (temp_dir / "out" / LOCK_FILE).write_text("12345")
        with pytest.raises(ConfigError, match="locked"):
            run_pipeline(config, threads=1)
        assert (temp_dir / "out" / LOCK_FILE).exists()

    def test_baseline(self, write_experiment, temp_dir):
        """Test the baseline curve is positive only at m = 0."""
        config = load_experiment_config(write_experiment(certify={"alphas": [0.01], "baseline": True}))
        manifest = run_pipeline(config, threads=1)
        assert "baseline" in manifest.stages
        rows = read_lines(temp_dir / "out" / "baseline_curve.csv")[1:]
        assert len(rows) == 7
        assert all(float(line.split(",")[1]) == 0.0 for line in rows[1:])


class TestRunAttack:
    """Test the attack-evaluation stage."""

    def test_label_flip(self, write_experiment, temp_dir):
        """Test a configured attack runs as part of the pipeline without violations."""
        attack = {"kind": "LABEL_FLIP", "flip_map": {"0": 1, "1": 0}, "sizes": [1, 2]}
        manifest = run_pipeline(load_experiment_config(write_experiment(attack=attack)), threads=2)
        assert "curve" in manifest.stages
        rows = read_lines(temp_dir / "out" / "attack_report.csv")
        assert len(rows) == 3
        assert all(line.endswith(",") for line in rows[1:])

    def test_missing_attack_section(self, write_experiment):
        """Test attack-eval without an attack section raises ConfigError."""
        pipeline = Pipeline(load_experiment_config(write_experiment()), threads=1)
        with pytest.raises(ConfigError, match="attack"):
            pipeline.run_attack()

    def test_no_sizes(self, write_experiment):
        """Test attack-eval without sizes raises ConfigError."""
        config = load_experiment_config(write_experiment(attack={"kind": "LABEL_FLIP"}))
        with pytest.raises(ConfigError, match="sizes"):
            Pipeline(config, threads=1).run_attack()

    def test_needs_fedavg(self, write_experiment):
        """Test attacks refuse non-FedAvg base algorithms."""
        document = write_experiment(attack={"kind": "LABEL_FLIP"}, base_algorithm="lookup")
        config = load_experiment_config(document)
        with pytest.raises(ConfigError, match="fedavg"):
            Pipeline(config, threads=1).run_attack([1])


class TestCmdCurve:
    """Test rebuilding a curve from an existing report."""

    def test_from_pipeline_report(self, write_experiment, temp_dir):
        """Test the standalone curve matches the pipeline's."""
        run_pipeline(load_experiment_config(write_experiment()), threads=1)
        out = temp_dir / "out"
        path = cmd_curve(out / "certificates.csv", temp_dir / "rebuilt.csv", 8, 2)
        assert path.read_bytes() == (out / "curve.csv").read_bytes()

    def test_labels_override(self, temp_dir):
        """Test an external labels file replaces the report's true labels."""
        report = temp_dir / "certificates.csv"
        report.write_text(
            "example,true_label,predicted,m_star,p_lower,p_upper,mode\n"
            "0,1,0,2,1.0,0.0,EXACT\n"
        )
        labels = temp_dir / "labels.txt"
        labels.write_text("0\n")
        path = cmd_curve(report, temp_dir / "curve.csv", 4, 1, labels)
        assert read_lines(path) == ["m,certified_accuracy", "0,1.0", "1,1.0", "2,1.0", "3,0.0"]


def mnist_files():
    value = os.environ.get("FEDCERT_MNIST_DIR")
    if not value:
        pytest.skip("FEDCERT_MNIST_DIR not set")
    directory = Path(value).expanduser()
    files = {}
    for key, stem in (
        ("train_images", "train-images-idx3-ubyte"),
        ("train_labels", "train-labels-idx1-ubyte"),
        ("test_images", "t10k-images-idx3-ubyte"),
        ("test_labels", "t10k-labels-idx1-ubyte"),
    ):
        found = [directory / name for name in (stem, stem + ".gz") if (directory / name).exists()]
        if not found:
            pytest.skip(f"{stem} not found in {directory}")
        files[key] = str(found[0])
    return files


@pytest.mark.dataset
@pytest.mark.slow
class TestMnistDeskScale:
    """Test a small sampled MNIST run reaches useful certified accuracy."""

    def test_sampled_certified_accuracy(self, write_experiment, temp_dir):
        """Test n=100, k=5 with 100 sampled models certifies at m=0 and m=1."""
        document = write_experiment(
            data={"source": "mnist", "mnist": mnist_files(), "train_limit": 10000, "test_limit": 1000},
            partition={"n": 100, "q": 0.5, "seed": 0},
            model={"hidden": [128]},
            fed={"global_iter": 200, "local_iter": 5, "eta": 0.001, "batch_size": 32},
            ensemble={"k": 5, "mode": "SAMPLED", "N": 100},
            certify={"alphas": [0.001]},
        )
        run_pipeline(load_experiment_config(document))
        curve = dict(line.split(",") for line in read_lines(temp_dir / "out" / "curve.csv")[1:])
        assert float(curve["0"]) >= 0.75
        assert float(curve["1"]) > 0.0
