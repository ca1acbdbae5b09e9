"""Command-line entry point: ``rmprobe <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or file-format
error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import datagen, pipeline
from .alterations import NOISE_STEPS, PGD_EPSILON, PGD_ITERATIONS, AlterationPlan
from .downstream import knn1_accuracy, write_report
from .encoders import Model, load_model
from .errors import ConfigError, NumericError
from .metrics import measure, series, write_metrics_json, write_series_csv
from .trajectories import build_trajectories, read_trajectories, write_trajectories
from .training import METHODS, OPTIMIZERS, SUPERVISED_METHODS, OptimizerConfig, TrainConfig, default_spec, train

log = logging.getLogger("rmprobe")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def load_data(path: str, labels: Optional[str] = None) -> datagen.Dataset:
    """CSV by default; an IDX images file when ``labels`` names its label file."""
    if labels is not None:
        return datagen.load_idx(path, labels)
    return datagen.read_csv(path)


def _meta_for(model_path: str) -> dict:
    meta = pipeline.read_model_meta(Path(model_path))
    meta.pop("loss_history", None)
    meta.setdefault("encoder_id", Path(model_path).name.split(".")[0])
    return meta


def _write_json(path: str, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


# ---------------------------------------------------------------- commands


def cmd_gen_data(a) -> int:
    if a.kind == "blobs":
        ds = datagen.gen_blobs(a.n_per_class, a.classes, a.dim, a.spread, a.seed)
    else:
        ds = datagen.gen_rings(a.n_per_class, a.classes, a.dim, a.noise, a.seed)
    if a.format == "csv":
        datagen.write_csv(ds, a.out)
    else:
        if not a.labels_out:
            raise UsageError("--format idx needs --labels-out")
        datagen.write_idx(ds, a.out, a.labels_out)
    log.info("wrote %d samples (%d classes, dim %d) to %s", len(ds), a.classes, a.dim, a.out)
    return EXIT_OK


def cmd_train(a) -> int:
    data = load_data(a.data, a.labels)
    if a.method in SUPERVISED_METHODS and data.labels is None:
        raise ValueError(f"{a.data}: method {a.method} needs labeled data")
    classes = a.classes
    if classes is None and data.labels is not None:
        classes = max(2, int(data.labels.max()) + 1)
    spec = default_spec(a.method, data.dim, a.dim, a.hidden, classes)
    tcfg = TrainConfig(a.method, a.epochs, a.batch_size, a.seed, a.margin, a.temperature,
                       a.aug_strength, a.mask_fraction)
    ocfg = OptimizerConfig(a.opt, a.lr, a.momentum)
    train_log = logging.getLogger("rmprobe.training")
    handler = None
    if a.log_file:
        handler = logging.FileHandler(a.log_file, mode="w")
        handler.setFormatter(logging.Formatter("%(message)s"))
        train_log.addHandler(handler)
    try:
        result = train(spec, data, tcfg, ocfg)
    finally:
        if handler is not None:
            train_log.removeHandler(handler)
            handler.close()
    meta = {"encoder_id": Path(a.out).name.split(".")[0], "method": a.method, "embedding_dim": a.dim,
            "optimizer": a.opt, "seed": a.seed, "loss_history": result.loss_history}
    pipeline.save_with_meta(Model(spec, result.params), Path(a.out), meta)
    log.info("saved %s (final loss %.6f)", a.out, result.loss_history[-1])
    return EXIT_OK


def cmd_alter(a) -> int:
    model = load_model(a.model)
    meta = _meta_for(a.model)
    data = load_data(a.data, a.labels)
    if a.samples is not None:
        data = data.subset(range(min(a.samples, len(data))))
    if a.kind == "noise":
        plan = AlterationPlan.noise(a.steps, master_seed=a.seed)
        method = a.method or meta.get("method")
    else:
        method = a.method or meta.get("method")
        if method is None:
            raise UsageError("PGD needs --method (no sidecar metadata next to the model)")
        plan = AlterationPlan.pgd(a.iters, a.eps, master_seed=a.seed, margin=a.margin,
                                  temperature=a.temperature, aug_strength=a.aug_strength,
                                  mask_fraction=a.mask_fraction)
    tmeta = {k: str(v) for k, v in meta.items()}
    tset = build_trajectories(model, data, plan, loss_kind=method, metadata=tmeta)
    write_trajectories(tset, a.out)
    log.info("wrote %d trajectories (J=%d, dim %d) to %s", len(tset), tset.steps, tset.dim, a.out)
    return EXIT_OK


def cmd_measure(a) -> int:
    tset = read_trajectories(a.traj)
    record = measure(tset, a.prefactor, normalize=not a.raw)
    doc = write_metrics_json(record, a.out, tset.metadata, include_per_sample=a.per_sample)
    if a.series:
        write_series_csv(series(tset, normalize=not a.raw), a.series)
    log.info("D=%.6f D_RC=%.6f P_RC=%.6f RMQM=%.6f", doc["D"], doc["D_RC"], doc["P_RC"], doc["RMQM"])
    if record.degenerate_samples:
        log.warning("%d degenerate trajectories excluded", record.degenerate_samples)
    return EXIT_OK


def cmd_eval(a) -> int:
    model = load_model(a.model)
    task = load_data(a.task, a.labels)
    if task.labels is None:
        raise ValueError(f"{a.task}: evaluation needs labeled data")
    ref, qry = task.train_test_split(a.test_fraction, a.split_seed)
    acc = knn1_accuracy(model.encode(ref.inputs), ref.labels, model.encode(qry.inputs), qry.labels)
    doc = {
        "encoder_id": a.encoder_id or _meta_for(a.model)["encoder_id"],
        "task_id": a.task_id or Path(a.task).name.split(".")[0],
        "raw_accuracy": acc,
        "n_reference": len(ref),
        "n_query": len(qry),
        "split_seed": a.split_seed,
    }
    _write_json(a.out, doc)
    log.info("%s on %s: 1-NN accuracy %.4f", doc["encoder_id"], doc["task_id"], acc)
    return EXIT_OK


def cmd_report(a) -> int:
    report = pipeline.collect_report(Path(a.metrics), Path(a.evals), a.alteration)
    write_report(report, a.out, a.scatter)
    for w in report.warnings:
        log.warning("%s", w)
    log.info("r(RMQM, performance)=%s r(dim, performance)=%s r(dim, RMQM)=%s",
             report.rmqm_performance, report.dimension_performance, report.dimension_rmqm)
    return EXIT_OK


def cmd_grid(a) -> int:
    overrides = list(a.set or [])
    if a.out:
        overrides.append(f"out={a.out}")
    if a.workers is not None:
        overrides.append(f"workers={a.workers}")
    cfg = pipeline.load_config(a.config, overrides)
    report = pipeline.run_grid(cfg)
    log.info("grid done: %d encoders, r(RMQM, performance)=%s", len({r["encoder_id"] for r in report.rows}),
             report.rmqm_performance)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_aug(p, mask_default: float = 0.05) -> None:
    p.add_argument("--margin", type=float, default=1.0)
    p.add_argument("--temperature", type=float, default=0.5)
    p.add_argument("--aug-strength", type=float, default=0.1)
    p.add_argument("--mask-fraction", type=float, default=mask_default)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS,
                        help="only print warnings and errors")
    p = _Parser(prog="rmprobe", description="Representation manifold quality probes.", parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add = sub.add_parser

    def add_parser(name, **kw):
        return _add(name, parents=[common], **kw)

    sub.add_parser = add_parser

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--kind", choices=["blobs", "rings"], required=True)
    g.add_argument("--dim", type=int, required=True)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--n-per-class", type=int, default=100)
    g.add_argument("--spread", type=float, default=0.1, help="blob standard deviation")
    g.add_argument("--noise", type=float, default=0.02, help="ring jitter")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--format", choices=["csv", "idx"], default="csv")
    g.add_argument("--out", required=True)
    g.add_argument("--labels-out", help="label file for --format idx")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one encoder")
    t.add_argument("--method", choices=METHODS, required=True)
    t.add_argument("--dim", type=int, required=True, help="embedding dimension")
    t.add_argument("--opt", choices=OPTIMIZERS, default="adam")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--data", required=True, help="CSV file, or IDX images with --labels")
    t.add_argument("--labels", help="IDX label file")
    t.add_argument("--hidden", type=_int_list, default=[64], help="comma-separated widths")
    t.add_argument("--classes", type=int, help="head size (default: from the labels)")
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--lr", type=float, default=0.001)
    t.add_argument("--momentum", type=float, default=0.9)
    _add_aug(t)
    t.add_argument("--log-file", help="also write the per-epoch loss lines here")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    al = sub.add_parser("alter", help="alter inputs and record representation trajectories")
    al.add_argument("--kind", choices=["noise", "pgd"], default="noise")
    al.add_argument("--steps", type=int, default=NOISE_STEPS, help="noise steps J")
    al.add_argument("--iters", type=int, default=PGD_ITERATIONS, help="PGD iterations")
    al.add_argument("--eps", type=float, default=PGD_EPSILON, help="PGD step size")
    al.add_argument("--seed", type=int, default=0, help="master seed for the alterations")
    al.add_argument("--model", required=True)
    al.add_argument("--data", required=True)
    al.add_argument("--labels")
    al.add_argument("--samples", type=int, help="only alter the first N samples")
    al.add_argument("--method", choices=METHODS, help="training objective for PGD (default: model sidecar)")
    _add_aug(al)
    al.add_argument("--out", required=True)
    al.set_defaults(func=cmd_alter)

    m = sub.add_parser("measure", help="compute D, D_RC, P_RC and RMQM")
    m.add_argument("--traj", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--prefactor", choices=["J", "J-1"], default="J", help="P_RC averaging prefactor")
    m.add_argument("--raw", action="store_true", help="measure raw embeddings (no RMS scaling)")
    m.add_argument("--series", help="write per-step curves to this CSV")
    m.add_argument("--per-sample", action="store_true", help="include per-sample values in the JSON")
    m.set_defaults(func=cmd_measure)

    e = sub.add_parser("eval", help="1-NN accuracy on a transfer task")
    e.add_argument("--model", required=True)
    e.add_argument("--task", required=True)
    e.add_argument("--labels")
    e.add_argument("--split-seed", type=int, default=0)
    e.add_argument("--test-fraction", type=float, default=0.2)
    e.add_argument("--encoder-id")
    e.add_argument("--task-id")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="correlate RMQM with transfer accuracy")
    r.add_argument("--metrics", required=True, help="directory of metrics JSON files")
    r.add_argument("--evals", required=True, help="directory of eval JSON files")
    r.add_argument("--alteration", choices=["noise", "pgd"], default="noise")
    r.add_argument("--out", required=True)
    r.add_argument("--scatter", help="write the per-row scatter CSV here")
    r.set_defaults(func=cmd_report)

    gr = sub.add_parser("grid", help="run or resume the full experiment grid")
    gr.add_argument("--config", help="key=value file; list keys repeat")
    gr.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    gr.add_argument("--out", help="output directory")
    gr.add_argument("--workers", type=int, help=f"parallel jobs (default: ${pipeline.WORKERS_ENV} or 1)")
    gr.set_defaults(func=cmd_grid)
    return p


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever sys.stderr is at emit time."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value):
        pass


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    root = logging.getLogger("rmprobe")
    handler = next((h for h in root.handlers if isinstance(h, _StderrHandler)), None)
    if handler is None:
        handler = _StderrHandler()
        handler.setFormatter(logging.Formatter("%(message)s"))
        root.addHandler(handler)
    # the logger stays at INFO so --log-file works under -q; only the console is quieted
    root.setLevel(logging.INFO)
    handler.setLevel(logging.WARNING if getattr(args, "quiet", False) else logging.INFO)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"rmprobe {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"rmprobe {args.command}: numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as e:
        print(f"rmprobe {args.command}: error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
