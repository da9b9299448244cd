"""Command-line front end.

Exit status is 0 on success, 2 when results are partial (non-converged
fits, fallback predictions or failed folds/nodes) and 1 on error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import IngestError, Standardizer, ingest, read_table, standardize_split
from .experiments import (Report, compare_run, cv_run, gibbs_run, grid_sweep, log_predictive,
                          parse_grid, split_train_test)
from .kernel import Hyperparams, LabeledDataset
from .models import INFERENCE_ERRORS, METHODS, Settings, fit, select_hyperparams

logger = logging.getLogger("nestedep")

EXIT_OK, EXIT_ERROR, EXIT_PARTIAL = 0, 1, 2


def _methods(text):
    names = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in names if m not in METHODS]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown method(s) {bad}; choose from {', '.join(METHODS)}")
    return names


def _theta(text):
    try:
        vals = [float(v) for v in text.split(",")]
        return Hyperparams(vals[0], vals[1:] if len(vals) > 1 else [0.0])
    except (ValueError, IndexError):
        raise argparse.ArgumentTypeError("expected 'log_sigma2,log_l1[,log_l2,...]'")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data", required=True, help="delimited text file with a header row")
    common.add_argument("--labels", required=True, help="name of the label column")
    common.add_argument("--delimiter", default=",")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--damping", type=float, default=0.8)
    common.add_argument("--tol", type=float, default=1e-6, help="outer EP tolerance")
    common.add_argument("--max-outer", type=int, default=500)
    common.add_argument("--theta", type=_theta, default=None,
                        help="fixed 'log_sigma2,log_l,...' (skips hyperparameter optimisation)")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--timings", action="store_true", help="record wall-clock timings")
    common.add_argument("--gibbs-samples", type=int, default=4000)
    common.add_argument("--gibbs-burn-in", type=int, default=2000)
    common.add_argument("--gibbs-thin", type=int, default=5)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="nestedep", description="Multiclass GP classification with nested EP")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("ingest-check", parents=[common], help="validate and summarise a dataset")

    s = sub.add_parser("train", parents=[common], help="fit one method and save the model")
    s.add_argument("--method", type=_methods, default=["ep"])

    s = sub.add_parser("predict", parents=[common], help="predict with a saved model")
    s.add_argument("--model", required=True, help="model.json written by 'train'")

    s = sub.add_parser("cv", parents=[common], help="stratified cross-validation")
    s.add_argument("--method", type=_methods, default=["ep", "iep", "la", "la-tkp"])
    s.add_argument("--folds", type=int, default=10)

    s = sub.add_parser("grid", parents=[common], help="evidence / MLPD grid sweep")
    s.add_argument("--method", type=_methods, default=["ep"])
    s.add_argument("--grid", required=True, help="'lmin:lmax:steps,smin:smax:steps' in log space")
    s.add_argument("--test", default=None, help="separate test file (default: seeded split)")
    s.add_argument("--test-fraction", type=float, default=0.3)

    s = sub.add_parser("compare", parents=[common], help="compare approximations with Gibbs at fixed theta")
    s.add_argument("--method", type=_methods, default=["ep", "iep", "la", "la-tkp"])

    s = sub.add_parser("gibbs", parents=[common], help="Gibbs oracle run at fixed theta")
    s.add_argument("--test", default=None)
    return p


def _settings(args):
    return Settings(damping=args.damping, tol=args.tol, max_outer=args.max_outer, seed=args.seed,
                    gibbs_samples=args.gibbs_samples, gibbs_burn_in=args.gibbs_burn_in,
                    gibbs_thin=args.gibbs_thin)


def _emit(rep, args, stem="report"):
    if args.out:
        rep.write(args.out, stem)
    else:
        sys.stdout.write(rep.jsonl())
    return EXIT_PARTIAL if rep.partial else EXIT_OK


def _theta_for(method, data, args, settings, rep):
    if args.theta is not None:
        th = args.theta
        if th.log_lengthscales.size not in (1, data.d):
            raise ValueError(f"--theta gives {th.log_lengthscales.size} lengthscales for {data.d} inputs")
        return th
    th, trace = select_hyperparams(method, data, settings)
    rep.add("hyperopt", method=method, theta=th.to_vector(), evaluations=len(trace))
    return th


def cmd_ingest_check(args):
    data, std, table = ingest(args.data, args.labels, args.delimiter)
    rep = Report()
    rep.add("dataset", path=Path(args.data).name, n=data.n, d=data.d, columns=table.columns,
            classes=table.classes, class_counts=np.bincount(data.y, minlength=data.n_classes),
            standardizer=std.as_dict())
    if np.any(std.constant):
        rep.add("warning", message="constant columns standardised to zero",
                columns=[table.columns[j] for j in np.flatnonzero(std.constant)])
    return _emit(rep, args)


def cmd_train(args):
    settings = _settings(args)
    data, std, table = ingest(args.data, args.labels, args.delimiter)
    method = args.method[0]
    rep = Report(timings=args.timings)
    rep.add("run", command="train", method=method, n=data.n, d=data.d, classes=data.classes, seed=args.seed)
    theta = _theta_for(method, data, args, settings, rep)
    model = fit(method, data, theta, settings)
    rep.partial |= not model.converged
    rep.add("model", method=method, **model.summary())
    rows = rep.table("trace", ["sweep", "log_z", "max_delta", "skipped", "inner_sweeps", "damping"])
    for r in model.trace_rows():
        rows.append([r[c] for c in ("sweep", "log_z", "max_delta", "skipped", "inner_sweeps", "damping")])
    rep.add("status", partial=rep.partial)
    code = _emit(rep, args)
    if args.out:
        saved = {"method": method, "theta": theta.to_vector().tolist(), "classes": data.classes,
                 "columns": table.columns, "label_column": args.labels, "standardizer": std.as_dict(),
                 "X": data.X.tolist(), "y": data.y.tolist(),
                 "settings": {k: getattr(settings, k) for k in ("damping", "tol", "max_outer", "seed",
                                                                 "gibbs_samples", "gibbs_burn_in", "gibbs_thin")}}
        (Path(args.out) / "model.json").write_text(json.dumps(saved, sort_keys=True) + "\n")
    return code


def cmd_predict(args):
    saved = json.loads(Path(args.model).read_text())
    settings = Settings(**saved["settings"])
    train = LabeledDataset(np.array(saved["X"]), np.array(saved["y"]), len(saved["classes"]), saved["classes"])
    theta = Hyperparams.from_vector(saved["theta"])
    std = Standardizer.from_dict(saved["standardizer"])
    table = read_table(args.data, args.labels, args.delimiter, classes=saved["classes"])
    if table.columns != saved["columns"]:
        raise IngestError(f"test columns {table.columns} differ from training columns {saved['columns']}")
    Xs = std.transform(table.X)
    model = fit(saved["method"], train, theta, settings)
    probs, flagged = model.predict(Xs)
    rep = Report(timings=args.timings)
    rep.partial = bool(np.any(flagged)) or not model.converged
    lp = log_predictive(probs, table.labels)
    rep.add("run", command="predict", method=saved["method"], n_test=len(table.labels), theta=theta.to_vector())
    rep.add("metrics", mlpd=lp.mean(), accuracy=np.mean(probs.argmax(1) == table.labels),
            flagged=int(flagged.sum()))
    rows = rep.table("predictions", ["row", "label", "predicted", "log_pred", "flagged"]
                     + [f"p_{c}" for c in saved["classes"]])
    for i in range(len(table.labels)):
        rows.append([i, saved["classes"][table.labels[i]], saved["classes"][int(probs[i].argmax())],
                     lp[i], int(flagged[i])] + list(probs[i]))
    rep.add("status", partial=rep.partial)
    return _emit(rep, args)


def cmd_cv(args):
    table = read_table(args.data, args.labels, args.delimiter)
    rep = cv_run(table.dataset(), args.folds, args.method, args.seed, _settings(args), args.theta,
                 timings=args.timings)
    return _emit(rep, args)


def _train_test(args):
    table = read_table(args.data, args.labels, args.delimiter)
    if args.test:
        test = read_table(args.test, args.labels, args.delimiter, classes=table.classes)
        return standardize_split(table.dataset(), test.dataset())[:2]
    return split_train_test(table.dataset(), args.test_fraction, args.seed)


def cmd_grid(args):
    log_ls, log_s2s = parse_grid(args.grid)
    train, test = _train_test(args)
    rep = grid_sweep(train, test, log_ls, log_s2s, args.method, _settings(args), timings=args.timings)
    return _emit(rep, args)


def cmd_compare(args):
    settings = _settings(args)
    data, _, _ = ingest(args.data, args.labels, args.delimiter)
    pre = Report()
    theta = _theta_for("ep", data, args, settings, pre)
    rep = compare_run(data, theta, args.method, settings, timings=args.timings)
    rep.records[1:1] = pre.records
    return _emit(rep, args)


def cmd_gibbs(args):
    settings = _settings(args)
    if args.test:
        table = read_table(args.data, args.labels, args.delimiter)
        test_t = read_table(args.test, args.labels, args.delimiter, classes=table.classes)
        data, test, _ = standardize_split(table.dataset(), test_t.dataset())
    else:
        data, _, _ = ingest(args.data, args.labels, args.delimiter)
        test = None
    pre = Report()
    theta = _theta_for("ep", data, args, settings, pre)
    rep = gibbs_run(data, theta, settings, test, timings=args.timings)
    rep.records[1:1] = pre.records
    return _emit(rep, args)


COMMANDS = {"ingest-check": cmd_ingest_check, "train": cmd_train, "predict": cmd_predict, "cv": cmd_cv,
            "grid": cmd_grid, "compare": cmd_compare, "gibbs": cmd_gibbs}


def _join_grid(argv):
    # grid ranges often start with a minus sign, which argparse reads as an option
    out, it = [], iter(argv)
    for tok in it:
        out.append(f"--grid={next(it, '')}" if tok == "--grid" else tok)
    return out


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(_join_grid(sys.argv[1:] if argv is None else list(argv)))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "train" and len(args.method) != 1:
        parser.error("train takes exactly one --method")
    try:
        return COMMANDS[args.command](args)
    except (IngestError, ValueError, OSError, RuntimeError) + INFERENCE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
