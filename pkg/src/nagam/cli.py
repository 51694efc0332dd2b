"""Command-line entry point (``nagam``).

Exit codes: 0 success, 2 input error, 3 configuration error, 4 lookup error.
Set ``NAGAM_LOG`` (DEBUG, INFO, WARNING, ...) to control stderr logging.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import lidc, surrogate
from .concept_heads import ConceptHeads, HeadsConfig, eval_heads, predicted_features, train_heads
from .errors import ConfigError, InputError, LookupFailure, MissingEmbeddings, UnknownNoduleId
from .evaluation import ExperimentConfig, run_experiment
from .gam import AdditiveModel, GAMConfig, fit_additive, shape_grid
from .ingest import Dataset, build_dataset, load_embeddings, parse_annotations, write_annotations, write_embeddings
from .schema import ConceptSchema, default_schema

log = logging.getLogger("nagam")

EXIT_INPUT, EXIT_CONFIG, EXIT_LOOKUP = 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"no such file: {path}")
    return p


def _load_schema(path) -> ConceptSchema:
    if path is None:
        return default_schema()
    return ConceptSchema.from_json(_existing(path).read_text())


def _load_dataset(args) -> Dataset:
    return Dataset.from_jsonl(_existing(args.data), _load_schema(getattr(args, "schema", None)))


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _log_config(command: str, config: dict) -> None:
    log.info("%s config: %s", command, json.dumps(config, sort_keys=True))


# -- commands ---------------------------------------------------------------


def cmd_schema(args) -> int:
    text = default_schema().to_json()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_ingest(args) -> int:
    schema = _load_schema(args.schema)
    records = parse_annotations(_existing(args.annotations), schema)
    embeddings = load_embeddings(_existing(args.embeddings)) if args.embeddings else None
    dataset = build_dataset(records, schema, embeddings)
    dataset.to_jsonl(args.out)
    print(f"{len(records)} readings, {len(dataset)} nodules -> {args.out}")
    return 0


def _gam_config(args) -> GAMConfig:
    return GAMConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        subnets=args.subnets,
        hidden=args.hidden,
        val_fraction=args.val_fraction,
        seed=args.seed,
    ).validate()


def _concept_features(args, dataset: Dataset):
    if args.source == "consensus":
        return dataset.features()
    if not args.heads:
        raise ConfigError("--source predicted requires --heads")
    heads = ConceptHeads.load(_existing(args.heads))
    return predicted_features(heads, dataset)


def cmd_train(args) -> int:
    config = _gam_config(args)
    dataset = _load_dataset(args)
    _log_config("train", {**asdict(config), "source": args.source})
    X = _concept_features(args, dataset)
    model, state = fit_additive(X, dataset.targets(), dataset.schema, config)
    extra = {
        "seed": config.seed,
        "config": asdict(config),
        "source": args.source,
        "optimizer": state.adam.to_dict(),
        "scheduler": state.scheduler.to_dict(),
    }
    model.save(args.out, extra)
    history = args.history or f"{args.out}.history.json"
    _write_json(history, {"seed": config.seed, "config": asdict(config), "history": state.history})
    print(f"seed {config.seed}: trained {model.n_params} parameters for {config.epochs} epochs -> {args.out}")
    return 0


def cmd_train_heads(args) -> int:
    config = HeadsConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        hidden=tuple(args.hidden),
        val_fraction=args.val_fraction,
        seed=args.seed,
    ).validate()
    dataset = _load_dataset(args)
    _log_config("train-heads", asdict(config))
    heads, history = train_heads(dataset, config)
    cfg = {**asdict(config), "hidden": list(config.hidden)}
    heads.save(args.out, {"seed": config.seed, "config": cfg})
    _write_json(args.history or f"{args.out}.history.json", {"seed": config.seed, "config": cfg, "history": history})
    print(f"seed {config.seed}: trained {heads.n_heads} heads for {config.epochs} epochs -> {args.out}")
    return 0


def cmd_eval_heads(args) -> int:
    heads = ConceptHeads.load(_existing(args.model))
    dataset = _load_dataset(args)
    metrics = eval_heads(heads, dataset).to_dict()
    text = json.dumps(metrics, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_evaluate(args) -> int:
    config = ExperimentConfig(
        seeds=tuple(args.seeds),
        k=args.k,
        epochs=args.epochs,
        batch_size=args.batch_size,
        base_lr=args.lr,
        subnets=args.subnets,
        hidden=args.hidden,
        val_fraction=args.val_fraction,
        train_target_source=args.train_source,
        explain_source=args.explain_source,
        train_heads=args.heads,
        jobs=args.jobs,
    ).validate()
    dataset = _load_dataset(args)
    _log_config("evaluate", config.to_dict())
    report = run_experiment(dataset, config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", report.to_dict())
    text = report.to_text(dataset.schema)
    (out / "report.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def _select_rows(dataset: Dataset, ids):
    if not ids:
        return list(range(len(dataset)))
    found, missing = [], []
    for nodule_id in ids:
        idx = dataset.index_of(nodule_id)
        (missing if idx is None else found).append(nodule_id if idx is None else idx)
    if missing:
        print(f"unknown nodule ids: {', '.join(missing)}", file=sys.stderr)
    if not found:
        raise UnknownNoduleId("none of the requested nodule ids exist")
    return found


def cmd_explain(args) -> int:
    model = AdditiveModel.load(_existing(args.model))
    dataset = _load_dataset(args)
    rows = _select_rows(dataset, args.ids)
    subset = dataset.subset(rows)
    if args.source == "predicted":
        from .concept_heads import predicted_vectors

        if not args.heads:
            raise ConfigError("--source predicted requires --heads")
        vectors = predicted_vectors(ConceptHeads.load(_existing(args.heads)), subset)
    else:
        vectors = subset.rows
    lines = [json.dumps(model.explain(v, clip=args.clip).to_dict()) for v in vectors]
    text = "".join(line + "\n" for line in lines)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_shapes(args) -> int:
    model = AdditiveModel.load(_existing(args.model))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in model.names:
        grid = shape_grid(model, name, args.points, center=args.center)
        with open(out / f"{name}.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["value", "contribution"])
            for value, contribution in grid.rows():
                writer.writerow([value if isinstance(value, str) else repr(value), repr(contribution)])
    print(f"wrote {len(model.names)} shape grids to {out}")
    return 0


def cmd_predict(args) -> int:
    model = AdditiveModel.load(_existing(args.model))
    dataset = _load_dataset(args)
    X = _concept_features(args, dataset)
    preds = model.predict(X)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["nodule_id", "prediction", "ground_truth"])
        for row, p in zip(dataset.rows, preds):
            writer.writerow([row.nodule_id, repr(float(p)), repr(float(row.malignancy_target))])
    finally:
        if args.out:
            fh.close()
    return 0


def cmd_surrogate(args) -> int:
    records, embeddings = surrogate.generate(args.n, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_annotations(records, out / "annotations.csv")
    write_embeddings(embeddings, out / "embeddings.csv")
    print(f"{len(records)} readings of {args.n} synthetic nodules -> {out}")
    return 0


def cmd_lidc_export(args) -> int:
    stats = lidc.export_annotations(args.out, args.db)
    print(
        f"{stats['readings']} readings of {stats['nodules']} nodules from {stats['scans']} scans -> {args.out}"
        f" ({stats['dropped_readings']} readings with out-of-schema codes dropped)"
    )
    return 0


# -- parser -----------------------------------------------------------------


def _add_training_flags(p, epochs=80):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-4, help="base learning rate")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)


def _add_source_flags(p):
    p.add_argument("--source", choices=("consensus", "predicted"), default="consensus")
    p.add_argument("--heads", help="concept-heads checkpoint for --source predicted")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nagam", description="Concept-based explainable malignancy scoring")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("schema", help="concept schema utilities")
    p.add_argument("action", choices=("dump",))
    p.add_argument("--out")
    p.set_defaults(func=cmd_schema)

    p = sub.add_parser("ingest", help="annotations CSV -> dataset cache (JSON lines)")
    p.add_argument("--annotations", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--schema", help="schema JSON (default: built-in LIDC schema)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train the additive malignancy model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history")
    p.add_argument("--subnets", type=int, default=4)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--schema")
    _add_training_flags(p)
    _add_source_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-heads", help="train the concept heads on embeddings")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history")
    p.add_argument("--hidden", type=int, nargs="+", default=[64, 32])
    p.add_argument("--schema")
    _add_training_flags(p)
    p.set_defaults(func=cmd_train_heads)

    p = sub.add_parser("eval-heads", help="MAE / F1 of trained concept heads")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--schema")
    p.set_defaults(func=cmd_eval_heads)

    p = sub.add_parser("evaluate", help="k-fold cross-validated experiment")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--epochs", type=int, default=80)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--subnets", type=int, default=4)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--train-source", choices=("consensus", "predicted"), default="consensus")
    p.add_argument("--explain-source", choices=("consensus", "predicted"), default="consensus")
    p.add_argument("--heads", action="store_true", help="also train and score concept heads")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--schema")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="per-nodule contribution breakdown (JSON lines)")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ids", nargs="*")
    p.add_argument("--clip", action="store_true", help="clip the reported score to [0, 1]")
    p.add_argument("--out")
    p.add_argument("--schema")
    _add_source_flags(p)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("shapes", help="per-concept shape-function grids (CSV)")
    p.add_argument("--model", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--points", type=int, default=50)
    p.add_argument("--center", action="store_true", help="subtract each grid's mean")
    p.set_defaults(func=cmd_shapes)

    p = sub.add_parser("predict", help="malignancy scores (CSV)")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--schema")
    _add_source_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("surrogate", help="write the synthetic surrogate annotations and embeddings")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n", type=int, default=surrogate.N_NODULES)
    p.add_argument("--seed", type=int, default=surrogate.DEFAULT_SEED)
    p.set_defaults(func=cmd_surrogate)

    p = sub.add_parser("lidc-export", help="LIDC-IDRI readings from the pylidc database -> annotations CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--db", help="path to pylidc.sqlite (default: the installed pylidc package)")
    p.set_defaults(func=cmd_lidc_export)
    return parser


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value):
        pass


def _setup_logging():
    level = os.environ.get("NAGAM_LOG", "INFO").upper()
    if not any(isinstance(h, _StderrHandler) for h in log.handlers):
        handler = _StderrHandler()
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        log.addHandler(handler)
        log.propagate = False
    log.setLevel(getattr(logging, level, logging.INFO))


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LookupFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LOOKUP
    except MissingEmbeddings as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except BrokenPipeError:
        # downstream reader (e.g. `head`) closed early
        sys.stderr.close()
        return 0


if __name__ == "__main__":
    sys.exit(main())
