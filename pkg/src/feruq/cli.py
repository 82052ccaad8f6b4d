"""Command line entry point.

Exit codes: 0 success, 1 validation error, 2 IO or parse error, 3 training failure.
"""

import argparse
import logging
import os
import sys

from . import harness
from .data import synth_aleatoric, write_ferplus_csv
from .exceptions import ParseError, TrainingError, ValidationError
from .nn import save_model
from .uncertainty import save_ensemble

logger = logging.getLogger("feruq")

METHOD_FLAGS = {
    "deterministic": "deterministic",
    "mc-dropout": "mc_dropout",
    "mc-dropconnect": "mc_dropconnect",
    "ensemble": "deep_ensemble",
}


def _common(parser):
    parser.add_argument("--config", help="JSON config file; flags override its values")
    parser.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--method", choices=sorted(METHOD_FLAGS), action="append",
                        help="method to run; repeat for several (default: all in config)")
    parser.add_argument("--samples", type=int, help="max stochastic passes T / ensemble size N")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--data", help="canonical FER+ CSV (synthetic data when omitted)")
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="feruq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit one model or an ensemble and save it")
    _common(p)

    p = sub.add_parser("sweep", help="error/NLL/ECE as a function of the sample count")
    _common(p)

    p = sub.add_parser("calibration", help="reliability curves at the best-accuracy and best-ECE sample counts")
    _common(p)

    p = sub.add_parser("report", help="most uncertain test inputs with predictions at several sample counts")
    _common(p)
    p.add_argument("--sizes", type=int, nargs="+", help="sample counts to report (default from config)")
    p.add_argument("--top-k", type=int)

    p = sub.add_parser("synth", help="write a synthetic dataset as canonical CSV")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.add_argument("--n", type=int, default=2000, dest="num_samples")
    p.add_argument("--classes", type=int, default=8, dest="num_classes")
    p.add_argument("--input-dim", type=int, default=16)
    p.add_argument("--flip-rate", type=float, default=0.3)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _config(args):
    overrides = dict(
        seed=args.seed,
        out_dir=args.out,
        max_samples=args.samples,
        epochs=args.epochs,
        batch_size=args.batch_size,
        data_path=args.data,
        methods=None if not args.method else tuple(dict.fromkeys(METHOD_FLAGS[m] for m in args.method)),
        top_k=getattr(args, "top_k", None),
        report_sizes=getattr(args, "sizes", None),
    )
    if args.config:
        config = harness.ExperimentConfig.from_file(args.config, **overrides)
    else:
        config = harness.ExperimentConfig().with_overrides(**overrides)
    return config.validate()


def cmd_train(args):
    config = _config(args)
    dataset = harness.load_dataset(config)
    models = harness.fit_models(config, dataset)
    os.makedirs(config.out_dir, exist_ok=True)
    files = []
    for method, model in models.items():
        if method == "deep_ensemble":
            save_ensemble(os.path.join(config.out_dir, "deep_ensemble"), model.ensemble_)
            files.append("deep_ensemble/manifest.json")
            history = model.loss_histories_
        else:
            save_model(os.path.join(config.out_dir, f"{method}.json"), model.config_, model.params_)
            files.append(f"{method}.json")
            history = [model.loss_history_]
        harness.write_json(os.path.join(config.out_dir, f"history_{method}.json"), {"method": method, "loss": history})
        files.append(f"history_{method}.json")
    files.append("manifest.json")
    harness.write_json(os.path.join(config.out_dir, "manifest.json"), harness.make_manifest("train", config, files))


def cmd_sweep(args):
    config = _config(args)
    run = harness.run_sweep(config)
    harness.emit_plot_data(run, config.out_dir, command="sweep")


def cmd_calibration(args):
    config = _config(args)
    run = harness.run_sweep(config)
    harness.emit_plot_data(run, config.out_dir, calibration=harness.calibration_points(run), command="calibration")


def cmd_report(args):
    config = _config(args)
    if not args.method:
        config = config.with_overrides(methods=("deep_ensemble",))
    if max(config.report_sizes) > config.max_samples:
        raise ValidationError(
            f"report size {max(config.report_sizes)} exceeds the {config.max_samples} trained members/samples"
        )
    dataset = harness.load_dataset(config)
    _, held_out = harness.train_eval_splits(dataset)
    models = harness.fit_models(config, dataset)
    os.makedirs(config.out_dir, exist_ok=True)
    reports = {}
    for method, model in models.items():
        samples = harness.predictive_samples(config, model, method, held_out.X)
        reports[method] = harness.report_uncertain(samples, held_out, config.report_sizes, config.top_k)
    if len(reports) == 1:
        doc = next(iter(reports.values()))
    else:
        doc = {"format_version": harness.FORMAT_VERSION, "reports": reports}
    harness.emit_report(doc, config, config.out_dir)


def cmd_synth(args):
    ds = synth_aleatoric(args.num_samples, args.num_classes, args.input_dim, args.flip_rate, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "synthetic.csv")
    write_ferplus_csv(ds, path)
    print(path)


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "calibration": cmd_calibration,
    "report": cmd_report,
    "synth": cmd_synth,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ParseError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
