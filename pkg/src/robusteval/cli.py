"""Command line entry point.

Exit status: 0 on success, 1 when an ISP test case's outcome contradicts
its expected validity, 2 on usage or operational errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

from . import harness
from .attacks import KINDS, AttackConfig
from .errors import RobustEvalError
from .nncore import evaluate, save_model
from .testgen import SWEEPS, VARIABLES, base_choice_suite, default_isp, extended_suite, sweep

EXIT_OK, EXIT_MISMATCH, EXIT_ERROR = 0, 1, 2

# testgen variable -> ModelSpec field
_SPEC_FIELDS = {"N": "hidden_neurons", "R": "dropout_rate", "nb": "num_classes", "O": "optimizer"}


def _base_config(args):
    cfg = harness.ExperimentConfig.load(args.config) if getattr(args, "config", None) else harness.ExperimentConfig()
    if getattr(args, "dataset", None):
        cfg.dataset = args.dataset
    if getattr(args, "data_dir", None):
        cfg.data_dir = args.data_dir
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    if getattr(args, "samples", None) is not None:
        cfg.sample_count = args.samples
    if getattr(args, "train_count", None) is not None:
        cfg.train_count = args.train_count
    return cfg


def _print(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def _summary(record):
    return {
        "case_id": record.config.get("case_id", ""),
        "status": record.status,
        "error": record.error,
        "test_acc": record.test_acc,
        "baseline_acc": record.baseline_acc,
        "attacks": [
            {
                "attack": a.kind,
                "eps": a.eps,
                "adv_acc": a.adv_acc,
                "adv_loss": a.adv_loss,
                "success_rate": a.success_rate,
                "ergas": a.quality.ergas,
                "psnr": a.quality.psnr,
                "ssim": [a.quality.ssim_mean, a.quality.ssim_cs],
                "sam": a.quality.sam,
            }
            for a in record.attacks
        ],
    }


def _finish(record, cfg, args):
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    harness.save_record(record, os.path.join(out, "record.json"))
    harness.write_outputs(record, out, args.images or cfg.export_images, args.timing)
    _print(_summary(record))
    if record.status != "ok":
        print(f"error: {record.error}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


def cmd_train(args):
    cfg = _base_config(args)
    spec = cfg.model
    for name, value in (
        ("architecture", args.arch),
        ("hidden_neurons", args.neurons),
        ("dropout_rate", args.dropout),
        ("num_classes", args.classes),
        ("optimizer", args.optimizer),
        ("epochs", args.epochs),
        ("batch_size", args.batch_size),
        ("learning_rate", args.lr),
    ):
        if value is not None:
            spec = replace(spec, **{name: value})
    cfg.model = spec
    model, train_ds, test_ds = harness.prepare(cfg)
    save_model(model, args.model)
    loss, acc = evaluate(model, test_ds)
    _print({"model": args.model, "train_size": len(train_ds), "test_loss": loss, "test_acc": acc})
    return EXIT_OK


def _attack_config(args):
    extra = {}
    if args.iterations is not None:
        extra["iterations"] = args.iterations
    if args.step_size is not None:
        extra["step_size"] = args.step_size
    return AttackConfig(args.attack, eps=args.eps, **extra)


def cmd_attack(args):
    cfg = _base_config(args)
    cfg.model_path = args.model
    cfg.attacks = [_attack_config(args)]
    record = harness.run_matrix(cfg)
    return _finish(record, cfg, args)


def cmd_matrix(args):
    cfg = _base_config(args)
    record = harness.run_matrix(cfg)
    return _finish(record, cfg, args)


def _case_config(base, isp, case, index):
    values = case.values(isp)
    spec = base.model
    for var, field_name in _SPEC_FIELDS.items():
        spec = replace(spec, **{field_name: values[var]})
    return replace(
        base,
        model=spec,
        dataset=values["dataset"],
        case_id=case.id,
        seed=harness.derive_seed(base.seed, harness.STREAM_CASE, index) % (1 << 63),
    )


def cmd_isp_suite(args):
    base = _base_config(args)
    isp = default_isp()
    if args.sweep:
        values = SWEEPS[args.sweep]
        suite = sweep(isp, base_choice_suite(isp)[0], args.sweep, values)
    elif args.no_extra:
        suite = base_choice_suite(isp)
    else:
        suite = extended_suite(isp)
    records = []
    for index, case in enumerate(suite):
        cfg = _case_config(base, isp, case, index)
        record = harness.run_matrix(cfg, expected_valid=case.expected_valid)
        records.append((case, record))
        verdict = "ok" if record.as_expected else "MISMATCH"
        outcome = "ran" if record.status == "ok" else "failed-as-expected" if not case.expected_valid else "failed"
        print(f"{case.id}\t{'/'.join(case.choices)}\texpected_valid={case.expected_valid}\t{outcome}\t{verdict}")
    out = base.output_dir
    os.makedirs(os.path.join(out, "records"), exist_ok=True)
    for case, record in records:
        harness.save_record(record, os.path.join(out, "records", f"{case.id}.json"))
    harness.write_outputs([r for _, r in records], out, args.images or base.export_images, args.timing)
    with open(os.path.join(out, "suite.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("id", "choices", "expected_valid", "status", "as_expected", "error"))
        for case, record in records:
            writer.writerow(
                (case.id, " ".join(case.choices), case.expected_valid, record.status, record.as_expected, record.error)
            )
    return EXIT_OK if all(r.as_expected for _, r in records) else EXIT_MISMATCH


def cmd_report(args):
    record = harness.load_record(args.record)
    out = args.out or os.path.dirname(os.path.abspath(args.record))
    path = harness.write_outputs(record, out, args.images, args.timing)
    print(path)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="robusteval", description="Adversarial robustness evaluation of image classifiers.")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p):
        p.add_argument("--config", help="experiment configuration JSON")
        p.add_argument("--dataset", help="mnist, fashion_mnist, cifar10, cifar100 or synthetic")
        p.add_argument("--data-dir", help="directory with the dataset files")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--train-count", type=int, help="stratified training subsample size")

    def output_args(p):
        p.add_argument("--out", help="output directory")
        p.add_argument("--images", type=int, default=0, metavar="K", help="dump K image triples per attack")
        p.add_argument("--timing", action="store_true", help="fill the seconds column (breaks byte-identical output)")

    p = sub.add_parser("train", help="fit a classifier and save it")
    data_args(p)
    p.add_argument("--model", required=True, help="output model archive (.npz)")
    p.add_argument("--arch", choices=("mlp", "cnn"))
    p.add_argument("--neurons", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--classes", type=int)
    p.add_argument("--optimizer")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="run one attack against a saved model")
    data_args(p)
    output_args(p)
    p.add_argument("--model", required=True, help="saved model archive")
    p.add_argument("--attack", choices=KINDS, default="fgsm")
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--iterations", type=int)
    p.add_argument("--step-size", type=float)
    p.add_argument("--samples", type=int, help="number of test samples to attack")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("matrix", help="run every attack of a configuration")
    data_args(p)
    output_args(p)
    p.add_argument("--samples", type=int)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("isp-suite", help="generate and execute the ISP test suite")
    data_args(p)
    output_args(p)
    p.add_argument("--samples", type=int)
    p.add_argument("--no-extra", action="store_true", help="base choice rows only")
    p.add_argument("--sweep", choices=tuple(v for v in VARIABLES if v in SWEEPS), help="run a one-variable sweep instead")
    p.set_defaults(func=cmd_isp_suite)

    p = sub.add_parser("report", help="re-render CSV and images from a saved record")
    p.add_argument("--record", required=True)
    output_args(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (RobustEvalError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
