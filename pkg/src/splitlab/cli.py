"""Command-line driver: ``splitlab train|sweep|infer-k|report``.

A config file (INI sections ``data``, ``arch``, ``train``, ``defense``,
``attacks``) sets the base experiment and flags override it. Exit codes:
0 success, 2 invalid configuration or arguments, 3 training aborted.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .experiment import (
    OUTPUT_ENV,
    ConfigError,
    ExperimentConfig,
    cmd_infer_k,
    cmd_report,
    cmd_sweep,
    cmd_train,
    load_config,
    resolve_output_dir,
)
from .secdt import DefenseConfig
from .splitproto import TrainingAborted

EXIT_OK, EXIT_CONFIG, EXIT_ABORTED = 0, 2, 3

log = logging.getLogger("splitlab")


def _floats(text):
    return [float(t) for t in text.split(",") if t.strip()]


def _add_experiment_flags(p):
    p.add_argument("--config", help="INI config file; flags override its values")
    p.add_argument("--out", dest="output_dir", help=f"output directory (default ${OUTPUT_ENV} or ./runs)")
    g = p.add_argument_group("data")
    g.add_argument("--dataset", choices=["synthetic", "csv", "idx"])
    g.add_argument("--n", type=int)
    g.add_argument("--d", type=int)
    g.add_argument("--k", type=int)
    g.add_argument("--class-weights", type=_floats)
    g.add_argument("--separation", type=float)
    g.add_argument("--data-seed", type=int)
    g.add_argument("--csv", dest="path")
    g.add_argument("--label-column")
    g.add_argument("--idx-images", dest="images")
    g.add_argument("--idx-labels", dest="labels")
    g.add_argument("--test-fraction", type=float)
    g = p.add_argument_group("model")
    g.add_argument("--cut-width", type=int)
    g.add_argument("--bottom-hidden", type=int)
    g.add_argument("--top-hidden", type=int)
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--learning-rate", "--lr", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--tap-window", type=lambda s: [int(t) for t in s.split(",")],
                   help="first,last epoch kept by the tap")
    g = p.add_argument_group("defense")
    g.add_argument("--defense", choices=["off", "secdt"])
    g.add_argument("--K", type=int, help="expanded label dimension")
    g.add_argument("--norm", dest="norm_standard", choices=["min", "mean", "max", "off"])
    g.add_argument("--mu", type=float, help="SGN noise level in [0, 1)")
    g.add_argument("--noise-resample", choices=["per-epoch", "once"])
    g.add_argument("--no-renormalize", action="store_true")
    g = p.add_argument_group("attacks")
    g.add_argument("--attacks", type=lambda s: [t.strip() for t in s.split(",") if t.strip()])
    g.add_argument("--window", help="'last', 'all' or first,last")
    g.add_argument("--majority-hint", type=int)
    g.add_argument("--spectral-source", choices=["embeddings", "gradients"])
    g.add_argument("--aux-per-class", type=int)
    g.add_argument("--k-max", type=int)


def _window(text):
    if text == "last":
        return "last"
    if text == "all":
        return None
    a, b = (int(t) for t in text.split(","))
    return (a, b)


def build_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()

    def put(obj, names):
        for name in names:
            value = getattr(args, name, None)
            if value is not None:
                setattr(obj, name, value)

    put(cfg.data, ["n", "d", "k", "class_weights", "separation", "path", "label_column",
                   "images", "labels", "test_fraction"])
    if args.dataset:
        cfg.data.kind = args.dataset
    elif args.path:
        cfg.data.kind = "csv"
    elif args.images:
        cfg.data.kind = "idx"
    if args.data_seed is not None:
        cfg.data.seed = args.data_seed
    if args.cut_width is not None:
        cfg.arch.cut_width = args.cut_width
    if args.bottom_hidden is not None:
        cfg.arch.bottom_hidden = args.bottom_hidden
    if args.top_hidden is not None:
        cfg.arch.top_hidden = args.top_hidden
    put(cfg, ["epochs", "batch_size", "learning_rate", "seed", "tap_window", "output_dir"])

    defense_flags = [args.K, args.norm_standard, args.mu, args.noise_resample]
    if args.defense == "off":
        cfg.defense = None
    elif args.defense == "secdt" or any(v is not None for v in defense_flags) or args.no_renormalize:
        base = cfg.defense.as_dict() if cfg.defense else {}
        if args.defense == "secdt" and not base:
            # the flag alone means the full defense at its usual settings
            base = {"K": 10 * cfg.n_classes(), "mu": 0.2}
        for key, value in (("K", args.K), ("norm_standard", args.norm_standard),
                           ("mu", args.mu), ("noise_resample", args.noise_resample)):
            if value is not None:
                base[key] = value
        if args.no_renormalize:
            base["renormalize"] = False
        cfg.defense = DefenseConfig(**base)

    if args.attacks is not None:
        cfg.attacks.names = args.attacks
    if args.window is not None:
        cfg.attacks.window = _window(args.window)
    if args.majority_hint is not None:
        cfg.attacks.majority_hint = args.majority_hint
    if args.spectral_source is not None:
        cfg.attacks.spectral_source = args.spectral_source
    if args.aux_per_class is not None:
        cfg.attacks.aux_per_class = args.aux_per_class
    if args.k_max is not None:
        cfg.attacks.k_max = args.k_max
    return cfg


def make_parser():
    parser = argparse.ArgumentParser(prog="splitlab", description="Split-learning label-leakage lab.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train once, run attacks, write a run record")
    _add_experiment_flags(p)

    p = sub.add_parser("sweep", help="vary the label dimension or noise level")
    _add_experiment_flags(p)
    p.add_argument("--axis", choices=["dimension", "noise"], required=True)
    p.add_argument("--values", type=_floats, required=True, help="comma-separated values")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")

    p = sub.add_parser("infer-k", help="repeat training and guess the expanded dimension")
    _add_experiment_flags(p)
    p.add_argument("--trials", type=int, default=20)

    p = sub.add_parser("report", help="aggregate run records into a CSV")
    p.add_argument("records_dir")
    p.add_argument("--out", dest="report_out", help="CSV path (default <records_dir>/report.csv)")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            if not os.path.isdir(args.records_dir):
                raise ConfigError(f"not a directory: {args.records_dir}")
            out = args.report_out or os.path.join(args.records_dir, "report.csv")
            rows = cmd_report(args.records_dir, out)
            print(f"{len(rows)} rows -> {out}")
            return EXIT_OK

        cfg = build_config(args)
        if args.command == "train":
            record = cmd_train(cfg)
            print(json.dumps({"run_id": record.run_id(), "utility": record.utility,
                              "attacks": {k: v.get("leak", v.get("guess")) for k, v in record.attacks.items()},
                              "out": resolve_output_dir(cfg)}, indent=2))
        elif args.command == "sweep":
            if args.jobs < 1:
                raise ConfigError("--jobs must be >= 1")
            _, rows = cmd_sweep(cfg, args.axis, args.values, jobs=args.jobs)
            for row in rows:
                print(json.dumps(row))
        else:
            hist, _ = cmd_infer_k(cfg, args.trials)
            print(json.dumps({str(g): c for g, c in sorted(hist.items())}))
        return EXIT_OK
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
