"""
Main CLI entry point for fedcert

Each pipeline subcommand runs the stages it needs (reusing cached ones) and
prints where its artifacts went. Exit codes: 0 success, 2 bad configuration or
input, 3 certificate violation, 4 numeric or training failure.
"""

import argparse
import logging
import sys
from pathlib import Path

from fedcert import __version__
from fedcert.core.adversary import TIGHTNESS_HEADER, tightness_grid, verify_tightness, write_tightness_report
from fedcert.core.config import get_config, load_experiment_config
from fedcert.core.errors import FedCertError
from fedcert.core.pipeline import Pipeline, pipeline_lock
from fedcert.core.pipeline import cmd_curve as cmd_curve_from_report


def _load_config(args):
    config = load_experiment_config(args.config)
    return config.with_overrides(seed=args.seed, output_dir=Path(args.out) if args.out else None)


def _pipeline(args) -> Pipeline:
    config = _load_config(args)
    return Pipeline(config, threads=args.threads)


def cmd_partition(args):
    """Split the dataset across clients"""
    pipeline = _pipeline(args)
    with pipeline_lock(pipeline.out_dir):
        partition = pipeline.run_partition()
    sizes = [len(d) for d in partition.client_data]
    print(f"✅ Partitioned {sum(sizes)} examples across {partition.n} clients")
    print(f"   Client sizes: min {min(sizes)}, max {max(sizes)}")
    print(f"   Written to {pipeline.out_dir / 'partition.txt'}")


def cmd_train_ensemble(args):
    """Train one global model per client subsample"""
    pipeline = _pipeline(args)
    with pipeline_lock(pipeline.out_dir):
        matrix = pipeline.run_train()
    print(f"✅ Ensemble of {matrix.num_models} models ({matrix.mode.value})")
    print(f"   {matrix.test_count} test examples")
    print(f"   Predictions: {pipeline.out_dir / 'predictions.csv'}")


def cmd_certify(args):
    """Certify every test example"""
    config = _load_config(args)
    if args.alpha:
        config.certify.alphas = list(args.alpha)
        config.validate()
    pipeline = Pipeline(config, threads=args.threads)
    with pipeline_lock(pipeline.out_dir):
        certs = pipeline.run_certify()
    abstained = sum(1 for c in certs if c.abstained)
    print(f"✅ Certified {len(certs) - abstained} of {len(certs)} examples ({abstained} abstained)")
    for _, report_path, _ in pipeline.report_paths():
        if report_path.exists():
            print(f"   📋 {report_path}")


def cmd_curve(args):
    """Certified accuracy at m = 0..n-k"""
    if args.report:
        if args.n is None or args.k is None:
            print("❌ --report needs --n and --k")
            sys.exit(2)
        out = Path(args.out) if args.out else Path(args.report).with_name("curve.csv")
        labels = Path(args.labels) if args.labels else None
        path = cmd_curve_from_report(Path(args.report), out, args.n, args.k, labels)
        print(f"✅ Curve written to {path}")
        return

    if not args.config:
        print("❌ Either --config or --report is required")
        sys.exit(2)
    pipeline = _pipeline(args)
    with pipeline_lock(pipeline.out_dir):
        curve = pipeline.run_curve()
    print("✅ Certified accuracy")
    for m, value in enumerate(curve.ca):
        print(f"   m={m:<3} {float(value):.4f}")


def cmd_attack_eval(args):
    """Retrain contaminated models under attack and check certified predictions"""
    pipeline = _pipeline(args)
    sizes = [int(s) for s in args.sizes.split(",")] if args.sizes else None
    with pipeline_lock(pipeline.out_dir):
        outcomes = pipeline.run_attack(sizes)
    for o in outcomes:
        print(
            f"✅ size {o.size}: retrained {o.retrained_rows} models, {o.changed} predictions changed, "
            f"{o.certified} certified predictions held"
        )
    print(f"   📋 {pipeline.out_dir / 'attack_report.csv'}")


def cmd_tightness_check(args):
    """Check that the certified level cannot be raised"""
    if args.p_lower is not None or args.p_upper is not None:
        if args.p_lower is None or args.p_upper is None or len(args.n) != 1 or len(args.k) != 1:
            print("❌ A single check needs --p-lower, --p-upper and exactly one --n and --k")
            sys.exit(2)
        reports = [verify_tightness(args.n[0], args.k[0], args.p_lower, args.p_upper)]
    else:
        reports = tightness_grid(args.n, args.k, args.pairs, args.seed or 0)

    if args.out:
        write_tightness_report(reports, Path(args.out))
        print(f"📋 Report written to {args.out}")
    else:
        print(TIGHTNESS_HEADER)
        for report in reports:
            print(report.row())

    failed = [r for r in reports if not r.ok]
    for report in failed:
        print(f"⚠️  {report.row()}: {'; '.join(report.failures) or report.verdict}")
    if failed:
        sys.exit(2)
    print(f"✅ All {len(reports)} constructions break at m*+1")


def cmd_run(args):
    """Run the whole pipeline"""
    pipeline = _pipeline(args)
    with pipeline_lock(pipeline.out_dir):
        manifest = pipeline.run()
    print(f"✅ Pipeline finished: {pipeline.out_dir}")
    for name, record in sorted(manifest.stages.items()):
        print(f"   {name:<15} {record.seconds:8.2f}s  {', '.join(sorted(record.artifacts.values()))}")


def _add_common(parser: argparse.ArgumentParser, config_required: bool = True):
    parser.add_argument("--config", required=config_required, help="Experiment JSON document")
    parser.add_argument("--seed", type=int, help="Override the master seed")
    parser.add_argument("--threads", type=int, help="Worker threads (default: FEDCERT_THREADS or 1)")
    parser.add_argument("--out", help="Override the output directory")


def main():
    parser = argparse.ArgumentParser(
        prog="fedcert",
        description="Ensemble federated learning with certified security against malicious clients",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s run --config config/experiment.template.json
  %(prog)s certify --config exp.json --alpha 0.001 --alpha 0.01
  %(prog)s attack-eval --config exp.json --sizes 1,2
  %(prog)s curve --report out/certificates.csv --n 10 --k 2
  %(prog)s tightness-check --n 6 8 --k 2 3 --pairs 20
        """,
    )
    parser.add_argument("--version", "-v", action="store_true", help="Show version information")
    subparsers = parser.add_subparsers(dest="cmd", help="Commands")

    _add_common(subparsers.add_parser("partition", help="Split the dataset across clients"))
    _add_common(subparsers.add_parser("train-ensemble", help="Train the subsample ensemble"))

    certify_parser = subparsers.add_parser("certify", help="Compute certificates")
    _add_common(certify_parser)
    certify_parser.add_argument(
        "--alpha", type=float, action="append", help="Confidence parameter (repeat for a sweep)"
    )

    curve_parser = subparsers.add_parser("curve", help="Certified accuracy curve")
    _add_common(curve_parser, config_required=False)
    curve_parser.add_argument("--report", help="Existing certificate report")
    curve_parser.add_argument("--labels", help="True labels file, one per line (default: report column)")
    curve_parser.add_argument("--n", type=int, help="Number of clients (with --report)")
    curve_parser.add_argument("--k", type=int, help="Subsample size (with --report)")

    attack_parser = subparsers.add_parser("attack-eval", help="Evaluate certificates under attack")
    _add_common(attack_parser)
    attack_parser.add_argument("--sizes", help="Comma-separated malicious-set sizes")

    tight_parser = subparsers.add_parser("tightness-check", help="Verify the certified level is tight")
    tight_parser.add_argument("--n", type=int, nargs="+", default=[6, 8], help="Client counts")
    tight_parser.add_argument("--k", type=int, nargs="+", default=[2, 3], help="Subsample sizes")
    tight_parser.add_argument("--pairs", type=int, default=20, help="Random bound pairs per (n, k)")
    tight_parser.add_argument("--p-lower", type=str, help="Single check: lower bound (e.g. 2/3)")
    tight_parser.add_argument("--p-upper", type=str, help="Single check: upper bound (e.g. 1/6)")
    tight_parser.add_argument("--seed", type=int, help="Seed for random bound pairs")
    tight_parser.add_argument("--out", help="Write the report here instead of stdout")

    _add_common(subparsers.add_parser("run", help="Run the full pipeline"))

    args = parser.parse_args()

    if args.version:
        print(f"fedcert {__version__}")
        sys.exit(0)

    if not args.cmd:
        parser.print_help()
        sys.exit(1)

    logging.basicConfig(
        level=getattr(logging, get_config().log_level, logging.INFO),
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
    )

    handlers = {
        "partition": cmd_partition,
        "train-ensemble": cmd_train_ensemble,
        "certify": cmd_certify,
        "curve": cmd_curve,
        "attack-eval": cmd_attack_eval,
        "tightness-check": cmd_tightness_check,
        "run": cmd_run,
    }
    try:
        handlers[args.cmd](args)
    except FedCertError as e:
        print(f"❌ {e}")
        sys.exit(e.exit_code)
    except AssertionError as e:
        print(f"❌ {e}")
        sys.exit(4)


if __name__ == "__main__":
    main()
