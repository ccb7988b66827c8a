"""Batch command line: ingest, train, nested-cv, evaluate, predict, baseline.

Settings come from an optional TOML file whose sections mirror the flags::

    seed = 0

    [data]
    dataset = "curated.ndjson"
    schema = "schema.json"      # optional, built-in schema otherwise
    era = "pre20"               # all | pre20 | post20 | incomplete
    output_dir = "runs/cnn"

    [model]                     # any McnnConfig field
    variant = "cnn"

    [grid]                      # nested-cv only; omitted keys use [model]
    published = false           # true searches the full published grid
    embedding_size = [50, 100]

    [folds]
    k_outer = 5
    k_inner = 4

Flags override the file.  Exit codes: 0 ok, 2 data error, 3 config error,
4 checkpoint error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

from . import model as model_io
from .baseline import cross_validated_baseline, score_best_hits, read_best_hits
from .data import (
    DATASET_SCHEMA_VERSION,
    LabelSchema,
    StrainRecord,
    assemble_records,
    curate,
    header_key,
    parse_fasta,
    plan_nested_folds,
    read_dataset,
    read_metadata,
    split_by_era,
    stratified_folds,
    write_dataset,
)
from .errors import CheckpointError, ConfigError, McnnError
from .metrics import EvalReport, summarize
from .model import CHECKPOINT_VERSION, McnnConfig, predict_batch
from .seeding import rng_for
from .tokenizer import VOCAB_FORMAT_VERSION
from .train import HyperGrid, evaluate, fit, nested_cv, timestamp

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__version__ = "0.1.0"

EXIT_OK, EXIT_DATA, EXIT_CONFIG, EXIT_CHECKPOINT = 0, 2, 3, 4
ERAS = ("all", "pre20", "post20", "incomplete")
PREDICT_COLUMNS = ("strain_id", "host", "ha_subtype", "na_subtype", "host_confidence",
                   "ha_subtype_confidence", "na_subtype_confidence")

logger = logging.getLogger("mcnn")


class DataError(McnnError):
    """Input files that cannot be read or used."""


# run configuration ------------------------------------------------------

@dataclass
class RunConfig:
    seed: int = 0
    dataset: str | None = None
    schema: str | None = None
    era: str = "all"
    output_dir: str = "."
    model: McnnConfig = field(default_factory=McnnConfig)
    grid: HyperGrid | None = None
    k_outer: int = 5
    k_inner: int = 4

    def label_schema(self) -> LabelSchema:
        return LabelSchema.load(self.schema) if self.schema else LabelSchema.default()

    def records(self) -> list[StrainRecord]:
        records = read_dataset(self.dataset)
        if self.era != "all":
            records = split_by_era(records)[self.era]
        if not records:
            raise DataError(f"no records in {self.dataset} for era {self.era!r}")
        return records

    def out(self, name: str) -> Path:
        path = Path(self.output_dir)
        path.mkdir(parents=True, exist_ok=True)
        return path / name


_SECTIONS = {
    "data": {"dataset", "schema", "era", "output_dir"},
    "model": {f.name for f in fields(McnnConfig)},
    "grid": {"published", "embedding_size", "learning_rate", "kernel_size", "num_heads"},
    "folds": {"k_outer", "k_inner"},
}


def load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def build_run_config(doc: dict, args: argparse.Namespace) -> RunConfig:
    """Merge file settings with flags; every problem is reported at once."""
    problems = []
    for key in doc:
        if key != "seed" and key not in _SECTIONS:
            problems.append(f"unknown top-level key {key!r}")
    sections = {}
    for name, allowed in _SECTIONS.items():
        section = doc.get(name, {})
        if not isinstance(section, dict):
            problems.append(f"[{name}] must be a table")
            section = {}
        for key in sorted(set(section) - allowed):
            problems.append(f"unknown key {key!r} in [{name}]")
        sections[name] = {k: v for k, v in section.items() if k in allowed}

    data, model_doc, grid_doc, folds = (sections[n] for n in ("data", "model", "grid", "folds"))
    for key in ("dataset", "schema", "era", "output_dir"):
        if getattr(args, key, None) is not None:
            data[key] = getattr(args, key)
    for f in fields(McnnConfig):
        value = getattr(args, f"model_{f.name}", None)
        if value is not None:
            model_doc[f.name] = value
    for key in ("k_outer", "k_inner"):
        if getattr(args, key, None) is not None:
            folds[key] = getattr(args, key)
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        problems.append(f"seed must be an integer, got {seed!r}")
        seed = 0
    if args.seed is not None or "seed" not in model_doc:
        model_doc["seed"] = seed

    try:
        model_cfg = McnnConfig.from_dict(model_doc)
    except ConfigError as exc:
        problems += [f"[model] {p}" for p in str(exc).split("; ")]
        model_cfg = McnnConfig()

    era = data.get("era", "all")
    if era not in ERAS:
        problems.append(f"era must be one of {ERAS}, got {era!r}")
    if not data.get("dataset"):
        problems.append("no dataset given (--dataset or [data] dataset)")
    for key in ("dataset", "schema"):
        if data.get(key) and not Path(data[key]).is_file():
            problems.append(f"{key} file not found: {data[key]}")
    for key in ("k_outer", "k_inner"):
        value = folds.get(key, 5 if key == "k_outer" else 4)
        if not isinstance(value, int) or value < 2:
            problems.append(f"{key} must be an integer >= 2, got {value!r}")

    grid = None
    if grid_doc or getattr(args, "published_grid", False):
        grid, grid_problems = _build_grid(grid_doc, model_cfg,
                                          getattr(args, "published_grid", False))
        problems += grid_problems

    if problems:
        raise ConfigError("\n".join(problems))
    return RunConfig(seed, data.get("dataset"), data.get("schema"), era,
                     data.get("output_dir", "."), model_cfg, grid,
                     folds.get("k_outer", 5), folds.get("k_inner", 4))


def _build_grid(doc: dict, base: McnnConfig, published: bool) -> tuple[HyperGrid | None, list[str]]:
    if published or doc.get("published"):
        return HyperGrid.published(base.variant), []
    single = HyperGrid.single(base)
    problems = []
    values = {}
    for key in ("embedding_size", "learning_rate", "kernel_size", "num_heads"):
        v = doc.get(key, getattr(single, key))
        if not isinstance(v, list) or not v:
            problems.append(f"[grid] {key} must be a non-empty list")
        values[key] = v
    if problems:
        return None, problems
    grid = HyperGrid(base.variant, **values)
    if not grid.points():
        problems.append("[grid] every point is invalid for this variant")
    return grid, problems


# output helpers ---------------------------------------------------------

def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _write_report(rep: EvalReport, stem: Path, command: str) -> None:
    rep.metadata.update({"created": timestamp(), "command": command, "version": __version__})
    _atomic_write(stem.with_suffix(".json"), rep.to_json() + "\n")
    _atomic_write(stem.with_suffix(".curves.csv"), rep.curves_csv())


def _write_json(path: Path, doc: dict) -> None:
    _atomic_write(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _read_fastas(paths: Sequence[str]) -> list[tuple[str, str]]:
    entries = []
    for p in paths or ():
        try:
            entries += parse_fasta(p)
        except OSError as exc:
            raise DataError(f"cannot read {p}: {exc}") from None
    return entries


# commands ---------------------------------------------------------------

def cmd_ingest(args) -> int:
    if not args.metadata:
        raise ConfigError("ingest needs --metadata")
    if not args.out:
        raise ConfigError("ingest needs --out")
    schema = LabelSchema.load(args.schema) if args.schema else LabelSchema.default()
    log: Counter = Counter()
    try:
        metadata = read_metadata(args.metadata)
    except OSError as exc:
        raise DataError(f"cannot read {args.metadata}: {exc}") from None
    raw = assemble_records(_read_fastas(args.ha), _read_fastas(args.na), metadata, log)
    records = curate(raw, schema, log)
    out = Path(args.out)
    write_dataset(out, records)
    counts = dict(sorted(log.items()))
    _write_json(out.with_name(out.name + ".log.json"),
                {"input_rows": len(metadata), "counts": counts, "version": 1})
    for reason, n in counts.items():
        print(f"{reason}:{n}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = build_run_config(load_config_file(args.config), args)
    records = run.records()
    schema = run.label_schema()
    # hold out one stratified fold of the k_inner split for early stopping
    folds = stratified_folds([r.strain_id for r in records], [r.host_class for r in records],
                             run.k_inner, rng_for(run.seed, "train-split"))
    val_ids = set(folds[0])
    train_recs = [r for r in records if r.strain_id not in val_ids]
    val_recs = [r for r in records if r.strain_id in val_ids]

    def progress(row):
        scores = " ".join(f"{h}={v:.4f}" for h, v in row.get("val_macro_f1", {}).items())
        print(f"epoch {row['epoch']:3d} loss {row['loss']:.6f} {scores}".rstrip(), flush=True)

    model, history = fit(train_recs, val_recs, run.model, schema, on_epoch=progress)
    model_io.save(model, run.out("model.ckpt"))
    _write_json(run.out("history.json"), {
        "config": run.model.to_dict(), "n_train": len(train_recs), "n_val": len(val_recs),
        "best_epoch": history.best_epoch, "stopped_early": history.stopped_early,
        "epochs": history.epochs, "metadata": {"created": timestamp(), "version": __version__}})
    print(f"best epoch {history.best_epoch}; checkpoint {run.out('model.ckpt')}")
    return EXIT_OK


def cmd_nested_cv(args) -> int:
    run = build_run_config(load_config_file(args.config), args)
    records = run.records()
    plan = plan_nested_folds(records, run.k_outer, run.k_inner, run.seed)
    _atomic_write(run.out("folds.json"), plan.to_json() + "\n")
    result = nested_cv(records, run.label_schema(), run.model, run.grid, run.k_outer,
                       run.k_inner, run.seed, plan, jobs=args.jobs, log=print)
    for o, rep in enumerate(result.reports):
        _write_report(rep, run.out(f"fold{o}"), "nested-cv")
    summary = result.summary()
    summary["inner_scores"] = result.inner_scores
    summary["metadata"] = {"created": timestamp(), "version": __version__}
    _write_json(run.out("summary.json"), summary)
    for head, metrics in summary["heads"].items():
        f1 = metrics["f1"]
        print(f"{head}: macro-F1 {f1['mean']:.4f} "
              f"[{f1['ci95'][0]:.4f}, {f1['ci95'][1]:.4f}]")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if not args.checkpoint:
        raise ConfigError("evaluate needs --checkpoint")
    run = build_run_config(load_config_file(args.config), args)
    model = model_io.load(args.checkpoint)
    drop = "na" if args.ha_only else "ha" if args.na_only else None
    records = run.records()
    if drop:
        keep = "ha_seq" if drop == "na" else "na_seq"
        records = [r for r in records if getattr(r, keep)]
    rep = evaluate(model, records, drop,
                   {"checkpoint": Path(args.checkpoint).name, "dataset": Path(run.dataset).name,
                    "era": run.era, "masked_channel": drop, "n": len(records)})
    name = {"na": "report_ha_only", "ha": "report_na_only"}.get(drop, "report")
    _write_report(rep, run.out(name), "evaluate")
    for head, f1 in rep.macro("f1").items():
        print(f"{head}: macro-F1 {f1:.4f} AP {rep.heads[head].macro['ap']:.4f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    if not args.checkpoint:
        raise ConfigError("predict needs --checkpoint")
    if not args.ha and not args.na:
        raise ConfigError("predict needs --ha and/or --na FASTA files")
    model = model_io.load(args.checkpoint)  # fails before any output is written
    ha = {header_key(h)[0]: s for h, s in _read_fastas(args.ha)}
    na = {header_key(h)[0]: s for h, s in _read_fastas(args.na)}
    ids = list(ha) + [k for k in na if k not in ha]
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
    writer.writerow(PREDICT_COLUMNS)
    if ids:
        batch = model.encode_sequences([ha.get(k) for k in ids], [na.get(k) for k in ids])
        for sid, pred in zip(ids, predict_batch(model, batch)):
            writer.writerow([sid, pred.host, pred.ha_subtype, pred.na_subtype,
                             *(f"{c:.6f}" for c in pred.confidences)])
    if args.out:
        _atomic_write(Path(args.out), buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_baseline(args) -> int:
    run = build_run_config(load_config_file(args.config), args)
    records = run.records()
    schema = run.label_schema()
    plan = plan_nested_folds(records, run.k_outer, run.k_inner, run.seed)
    if args.best_hits:
        hits = read_best_hits(args.best_hits)
        by_id = {r.strain_id: r for r in records}
        reports = []
        for o in range(plan.k_outer):
            train = [by_id[s] for s in plan.outer_train(o)]
            test = [by_id[s] for s in plan.outer_test(o)]
            rep = score_best_hits(hits, train, test, schema)
            rep.provenance.update({"outer_fold": o, "n_train": len(train), "n_test": len(test)})
            reports.append(rep)
    else:
        reports = cross_validated_baseline(records, plan, schema, args.k)
    for o, rep in enumerate(reports):
        _write_report(rep, run.out(f"baseline_fold{o}"), "baseline")
    summary = summarize(reports)
    summary["metadata"] = {"created": timestamp(), "version": __version__}
    _write_json(run.out("baseline_summary.json"), summary)
    for head, metrics in summary["heads"].items():
        print(f"{head}: macro-F1 {metrics['f1']['mean']:.4f}")
    return EXIT_OK


# argument parsing -------------------------------------------------------

def _version_text() -> str:
    return (f"mcnn {__version__} (dataset schema {DATASET_SCHEMA_VERSION}, "
            f"vocab format {VOCAB_FORMAT_VERSION}, checkpoint format {CHECKPOINT_VERSION}, "
            "label schema 1)")


class _Parser(argparse.ArgumentParser):
    """Usage mistakes are configuration errors (exit 3), not argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


class _Version(argparse.Action):
    def __init__(self, option_strings, dest, **kwargs):
        super().__init__(option_strings, dest, nargs=0, help="print format versions and exit")

    def __call__(self, parser, namespace, values, option_string=None):
        print(_version_text())
        parser.exit()


def _add_run_options(p: argparse.ArgumentParser, model_flags: bool = True) -> None:
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--dataset", help="curated NDJSON dataset")
    p.add_argument("--schema", help="label schema JSON (default: built-in)")
    p.add_argument("--era", choices=ERAS)
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--k-outer", dest="k_outer", type=int)
    p.add_argument("--k-inner", dest="k_inner", type=int)
    if not model_flags:
        return
    group = p.add_argument_group("model (mirrors [model])")
    for f in fields(McnnConfig):
        if f.name == "seed":
            continue
        kind = float if f.type in (float, "float") else str if f.name == "variant" else int
        group.add_argument("--" + f.name.replace("_", "-"), dest=f"model_{f.name}", type=kind)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mcnn", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action=_Version)
    parser.add_argument("--seed", type=int, help="master seed (overrides the config file)")
    parser.add_argument("--jobs", type=int, default=1, help="concurrent grid trials")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="curate FASTA + metadata into a dataset")
    p.add_argument("--ha", nargs="*", default=[], help="HA protein FASTA files")
    p.add_argument("--na", nargs="*", default=[], help="NA protein FASTA files")
    p.add_argument("--metadata", help="TSV: strain_id source host subtype year completeness")
    p.add_argument("--schema")
    p.add_argument("--out", help="output NDJSON dataset")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train one model with early stopping")
    _add_run_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("nested-cv", help="grid search inside nested cross-validation")
    _add_run_options(p)
    p.add_argument("--published-grid", action="store_true", help="use the full published grid")
    p.set_defaults(func=cmd_nested_cv)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    _add_run_options(p, model_flags=False)
    p.add_argument("--checkpoint")
    masks = p.add_mutually_exclusive_group()
    masks.add_argument("--ha-only", action="store_true", help="mask the NA channel")
    masks.add_argument("--na-only", action="store_true", help="mask the HA channel")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="label sequences from FASTA")
    p.add_argument("--checkpoint")
    p.add_argument("--ha", nargs="*", default=[])
    p.add_argument("--na", nargs="*", default=[])
    p.add_argument("--out", help="output TSV (default: stdout)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("baseline", help="trigram nearest-neighbour baseline on the fold plan")
    _add_run_options(p, model_flags=False)
    p.add_argument("--k", type=int, default=1, help="neighbours")
    p.add_argument("--best-hits", help="score an external query/subject TSV instead")
    p.set_defaults(func=cmd_baseline)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print("configuration error:", file=sys.stderr)
        for line in str(exc).splitlines():
            print(f"  {line}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (McnnError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
