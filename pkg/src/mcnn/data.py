"""Sequence ingestion and curation: FASTA + metadata TSV in, curated strains out.

Curation keeps one HA/NA pair per strain.  Copies of a strain from other
sources are dropped when an IRD copy exists, H0N0 strains are dropped, hosts
are regrouped through an editable :class:`LabelSchema`, and strains whose
copies disagree on their labels are discarded.  Era splits and the nested
fold plan used by the training harness live here too.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import AlphabetError, ContractError, LabelError, ParseError
from .tokenizer import check_alphabet, clean_sequence

logger = logging.getLogger(__name__)

DATASET_SCHEMA_VERSION = 1
METADATA_COLUMNS = ("strain_id", "source", "host", "subtype", "year", "completeness")
SOURCES = ("IRD", "GISAID", "other")


# FASTA / TSV ------------------------------------------------------------

def parse_fasta_text(text: str, path: str = "<string>") -> list[tuple[str, str]]:
    records: list[tuple[str, str]] = []
    header = None
    header_line = 0
    chunks: list[str] = []

    def flush():
        if header is None:
            return
        seq = "".join(chunks)
        if not seq:
            raise ParseError(f"record {header!r} has no sequence", path, header_line)
        records.append((header, seq))

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(";"):
            continue
        if line.startswith(">"):
            flush()
            header, header_line, chunks = line[1:], lineno, []
        elif header is None:
            raise ParseError("sequence data before the first header", path, lineno)
        else:
            chunks.append(line)
    flush()
    return records


def parse_fasta(path) -> list[tuple[str, str]]:
    path = Path(path)
    return parse_fasta_text(path.read_text(encoding="utf-8"), str(path))


def header_key(header: str) -> tuple[str, str | None]:
    """``strain_id[|source] [description]`` -> (strain_id, source or None)."""
    first = header.split()[0] if header.split() else ""
    parts = first.split("|")
    source = parts[1] if len(parts) > 1 and parts[1] else None
    return parts[0], source


def read_metadata(path) -> list[dict]:
    path = Path(path)
    rows = []
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("missing header row", str(path), 1) from None
        if tuple(h.strip() for h in header) != METADATA_COLUMNS:
            raise ParseError(f"expected columns {'/'.join(METADATA_COLUMNS)}, got {header}",
                             str(path), 1)
        for lineno, row in enumerate(reader, start=2):
            if not any(cell.strip() for cell in row):
                continue
            if len(row) != len(METADATA_COLUMNS):
                raise ParseError(f"expected 6 fields, got {len(row)}", str(path), lineno)
            rec = dict(zip(METADATA_COLUMNS, (c.strip() for c in row)))
            rec["_line"] = lineno
            rows.append(rec)
    return rows


def _parse_year(text) -> int | None:
    if text is None:
        return None
    if isinstance(text, int):
        return text
    m = re.fullmatch(r"\s*(\d{4})(?:[-/].*)?\s*", str(text))
    return int(m.group(1)) if m else None


def _parse_complete(text) -> bool:
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in {"complete", "true", "1", "yes", "y"}:
        return True
    if value in {"incomplete", "partial", "false", "0", "no", "n"}:
        return False
    raise LabelError(f"unrecognised completeness flag {text!r}")


# labels -----------------------------------------------------------------

@dataclass
class LabelSchema:
    host_categories: list[str]
    host_map: dict[str, str]
    ha_classes: list[str]
    na_classes: list[str]
    ha_merge: dict[str, str] = field(default_factory=dict)
    na_merge: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.host_map = {k.strip().lower(): v for k, v in self.host_map.items()}
        unknown = set(self.host_map.values()) - set(self.host_categories)
        if unknown:
            raise LabelError(f"host_map targets unknown categories: {sorted(unknown)}")
        for merge, classes in ((self.ha_merge, self.ha_classes), (self.na_merge, self.na_classes)):
            bad = set(merge.values()) - set(classes)
            if bad:
                raise LabelError(f"merge targets not in class list: {sorted(bad)}")

    @classmethod
    def from_dict(cls, doc: dict) -> "LabelSchema":
        return cls(list(doc["host_categories"]), dict(doc["host_map"]),
                   list(doc["ha_classes"]), list(doc["na_classes"]),
                   dict(doc.get("ha_merge", {})), dict(doc.get("na_merge", {})))

    @classmethod
    def load(cls, path) -> "LabelSchema":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def default(cls) -> "LabelSchema":
        text = resources.files("mcnn").joinpath("data/default_schema.json").read_text("utf-8")
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return {"version": 1, **asdict(self)}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def map_host(self, raw: str) -> str | None:
        return self.host_map.get(raw.strip().lower())

    def ha_label(self, raw: str) -> str:
        label = self.ha_merge.get(raw, raw)
        if label not in self.ha_classes:
            raise LabelError(f"HA subtype {raw!r} not in schema")
        return label

    def na_label(self, raw: str) -> str:
        label = self.na_merge.get(raw, raw)
        if label not in self.na_classes:
            raise LabelError(f"NA subtype {raw!r} not in schema")
        return label

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.host_categories), len(self.ha_classes), len(self.na_classes)

    def encode_labels(self, rec: "StrainRecord") -> tuple[int, int, int]:
        try:
            return (self.host_categories.index(rec.host_class),
                    self.ha_classes.index(rec.ha_subtype),
                    self.na_classes.index(rec.na_subtype))
        except ValueError:
            raise LabelError(f"{rec.strain_id}: labels outside schema") from None


_SUBTYPE_RE = re.compile(r"^(H\d{1,2})(N\d{1,2})$")


def parse_subtype(text: str) -> tuple[str, str]:
    """``"H5N1"`` -> ``("H5", "N1")``."""
    m = _SUBTYPE_RE.match(text.strip().upper())
    if not m:
        raise LabelError(f"cannot parse subtype {text!r}")
    return m.group(1), m.group(2)


# records ----------------------------------------------------------------

@dataclass
class RawRecord:
    strain_id: str
    source: str
    host: str
    subtype: str
    year: int | None
    complete: bool
    ha_seq: str | None = None
    na_seq: str | None = None


@dataclass
class StrainRecord:
    strain_id: str
    ha_seq: str | None
    na_seq: str | None
    host_raw: str
    host_class: str
    ha_subtype: str
    na_subtype: str
    year: int | None
    complete: bool
    source: str
    subtype_raw: str = ""

    def to_raw(self) -> RawRecord:
        return RawRecord(self.strain_id, self.source, self.host_raw,
                         self.subtype_raw or f"{self.ha_subtype}{self.na_subtype}",
                         self.year, self.complete, self.ha_seq, self.na_seq)

    def labels(self) -> tuple[str, str, str]:
        return self.host_class, self.ha_subtype, self.na_subtype


def assemble_records(ha_entries: Iterable[tuple[str, str]], na_entries: Iterable[tuple[str, str]],
                     metadata: Sequence[dict], log: Counter | None = None) -> list[RawRecord]:
    """Join FASTA entries to metadata rows by strain id (and source when the header names one)."""
    log = log if log is not None else Counter()

    def index(entries):
        by_key: dict[tuple[str, str | None], str] = {}
        for header, seq in entries:
            key = header_key(header)
            if key in by_key:
                log["duplicate-fasta"] += 1
                continue
            by_key[key] = seq
        return by_key

    ha, na = index(ha_entries), index(na_entries)
    used: set = set()
    out = []
    for row in metadata:
        sid, src = row["strain_id"], row["source"]

        def lookup(table):
            for key in ((sid, src), (sid, None)):
                if key in table:
                    used.add((id(table), key))
                    return table[key]
            return None

        try:
            complete = _parse_complete(row["completeness"])
        except LabelError as exc:
            logger.warning("line %s: %s", row.get("_line"), exc)
            log["bad-completeness"] += 1
            continue
        out.append(RawRecord(sid, src, row["host"], row["subtype"], _parse_year(row["year"]),
                             complete, lookup(ha), lookup(na)))
    orphans = sum(1 for t in (ha, na) for k in t if (id(t), k) not in used)
    if orphans:
        log["no-metadata"] += orphans
    return out


def _normalise_source(src: str) -> str:
    up = src.strip().upper()
    return up if up in ("IRD", "GISAID") else "other"


def _curate_one(raw: RawRecord, schema: LabelSchema, log: Counter) -> StrainRecord | None:
    seqs = []
    for seq in (raw.ha_seq, raw.na_seq):
        if seq is None:
            seqs.append(None)
            continue
        seq = clean_sequence(seq)
        try:
            check_alphabet(seq)
        except AlphabetError as exc:
            logger.info("%s: dropped, %s", raw.strain_id, exc)
            log["bad-sequence"] += 1
            return None
        seqs.append(seq or None)
    if seqs[0] is None and seqs[1] is None:
        log["no-sequence"] += 1
        return None
    try:
        ha_raw, na_raw = parse_subtype(raw.subtype)
    except LabelError as exc:
        logger.info("%s: dropped, %s", raw.strain_id, exc)
        log["bad-subtype"] += 1
        return None
    if ha_raw == "H0" and na_raw == "N0":
        log["h0n0"] += 1
        return None
    try:
        ha_label, na_label = schema.ha_label(ha_raw), schema.na_label(na_raw)
    except LabelError as exc:
        logger.info("%s: dropped, %s", raw.strain_id, exc)
        log["bad-subtype"] += 1
        return None
    host = schema.map_host(raw.host)
    if host is None:
        logger.info("%s: dropped, unmapped host %r", raw.strain_id, raw.host)
        log["unmapped-host"] += 1
        return None
    return StrainRecord(raw.strain_id, seqs[0], seqs[1], raw.host, host, ha_label, na_label,
                        raw.year, bool(raw.complete), _normalise_source(raw.source),
                        raw.subtype.strip().upper())


def curate(records: Iterable[RawRecord | StrainRecord], schema: LabelSchema,
           log: Counter | None = None) -> list[StrainRecord]:
    """Apply the curation rules; drop reasons are tallied into ``log``."""
    log = log if log is not None else Counter()
    groups: dict[str, list[StrainRecord]] = defaultdict(list)
    for rec in records:
        raw = rec.to_raw() if isinstance(rec, StrainRecord) else rec
        cur = _curate_one(raw, schema, log)
        if cur is not None:
            groups[cur.strain_id].append(cur)

    out = []
    for sid, copies in groups.items():
        if any(c.source == "IRD" for c in copies):
            for c in copies:
                if c.source != "IRD":
                    log["dedup-gisaid" if c.source == "GISAID" else "dedup-other"] += 1
            copies = [c for c in copies if c.source == "IRD"]
        if len({c.labels() for c in copies}) > 1:
            logger.info("%s: dropped, conflicting labels across %d copies", sid, len(copies))
            log["multi-label"] += len(copies)
            continue
        log["duplicate"] += len(copies) - 1
        out.append(copies[0])
    log["kept"] = len(out)
    return out


# persistence ------------------------------------------------------------

def write_dataset(path, records: Sequence[StrainRecord]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({"schema_version": DATASET_SCHEMA_VERSION, **asdict(rec)}) + "\n")


def read_dataset(path) -> list[StrainRecord]:
    out = []
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", str(path), lineno) from None
            if doc.pop("schema_version", None) != DATASET_SCHEMA_VERSION:
                raise ParseError("unsupported dataset schema version", str(path), lineno)
            try:
                out.append(StrainRecord(**doc))
            except TypeError as exc:
                raise ParseError(str(exc), str(path), lineno) from None
    return out


# eras -------------------------------------------------------------------

def split_by_era(records: Iterable[StrainRecord]) -> dict[str, list[StrainRecord]]:
    """Route records to ``pre20``/``post20``/``incomplete``; undatable ones to ``quarantine``."""
    out: dict[str, list[StrainRecord]] = {"pre20": [], "post20": [], "incomplete": [],
                                          "quarantine": []}
    for rec in records:
        if not rec.complete:
            out["incomplete"].append(rec)
        elif rec.year is None or rec.year > 2022:
            out["quarantine"].append(rec)
        elif rec.year < 2020:
            out["pre20"].append(rec)
        else:
            out["post20"].append(rec)
    if out["quarantine"]:
        logger.warning("%d complete records quarantined (missing or out-of-range year)",
                       len(out["quarantine"]))
    return out


# folds ------------------------------------------------------------------

def stratified_folds(ids: Sequence[str], strata: Sequence[str], k: int,
                     rng: np.random.Generator) -> list[list[str]]:
    """Deal ids into ``k`` folds class by class so each fold sees every class it can."""
    by_class: dict[str, list[str]] = defaultdict(list)
    for sid, label in zip(ids, strata):
        by_class[label].append(sid)
    folds: list[list[str]] = [[] for _ in range(k)]
    cursor = 0
    for label in sorted(by_class):
        members = by_class[label]
        if len(members) < k:
            logger.warning("class %r has %d members (< %d folds); placed without stratification",
                           label, len(members), k)
        for j in rng.permutation(len(members)):
            folds[cursor % k].append(members[j])
            cursor += 1
    return folds


@dataclass
class FoldPlan:
    outer: list[list[str]]
    inner: list[list[list[str]]]
    seed: int

    @property
    def k_outer(self) -> int:
        return len(self.outer)

    def outer_test(self, o: int) -> list[str]:
        return list(self.outer[o])

    def outer_train(self, o: int) -> list[str]:
        return [sid for j, fold in enumerate(self.outer) if j != o for sid in fold]

    def inner_val(self, o: int, i: int) -> list[str]:
        return list(self.inner[o][i])

    def inner_train(self, o: int, i: int) -> list[str]:
        return [sid for j, fold in enumerate(self.inner[o]) if j != i for sid in fold]

    def to_json(self) -> str:
        return json.dumps({"version": 1, "seed": self.seed, "outer": self.outer,
                           "inner": self.inner}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        doc = json.loads(text)
        return cls(doc["outer"], doc["inner"], doc["seed"])


def plan_nested_folds(records: Sequence[StrainRecord], k_outer: int = 5, k_inner: int = 4,
                      seed: int = 0) -> FoldPlan:
    if len(records) < k_outer * k_inner:
        raise ContractError(f"need at least {k_outer * k_inner} records, got {len(records)}")
    ids = [r.strain_id for r in records]
    if len(set(ids)) != len(ids):
        raise ContractError("strain ids must be unique before planning folds")
    host = {r.strain_id: r.host_class for r in records}
    rng = np.random.default_rng(seed)
    outer = stratified_folds(ids, [host[s] for s in ids], k_outer, rng)
    inner = []
    for o in range(k_outer):
        train = [s for j, fold in enumerate(outer) if j != o for s in fold]
        inner.append(stratified_folds(train, [host[s] for s in train], k_inner, rng))
    return FoldPlan(outer, inner, seed)
