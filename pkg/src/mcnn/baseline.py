"""Alignment-free similarity baseline and scoring of external best-hit tables.

A test strain takes the labels of its most similar training strain, where
similarity is the cosine between trigram count vectors (HA and NA counts in
separate blocks of one vector).  Per-class ranking scores are the k-nearest
similarity vote plus a small multiple of the best similarity to any training
strain of that class, normalised to sum to 1, so the same one-vs-all report
pipeline applies.
"""

from __future__ import annotations

import csv
from collections import Counter
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse

from .data import FoldPlan, LabelSchema, StrainRecord
from .errors import ContractError, ParseError
from .metrics import EvalReport, one_vs_all_report
from .tokenizer import extract_ngrams

TIE_WEIGHT = 1e-6


def trigram_counts(seq: str | None) -> Counter:
    if not seq or len(seq) < 3:
        return Counter()
    return Counter(extract_ngrams(seq))


def count_matrix(records: Sequence[StrainRecord], index: dict[tuple[str, str], int]) -> sparse.csr_matrix:
    rows, cols, vals = [], [], []
    for i, rec in enumerate(records):
        for channel, seq in (("ha", rec.ha_seq), ("na", rec.na_seq)):
            for tok, c in trigram_counts(seq).items():
                j = index.get((channel, tok))
                if j is not None:
                    rows.append(i)
                    cols.append(j)
                    vals.append(float(c))
    return sparse.csr_matrix((vals, (rows, cols)), shape=(len(records), max(len(index), 1)))


def _feature_index(records: Sequence[StrainRecord]) -> dict[tuple[str, str], int]:
    index: dict[tuple[str, str], int] = {}
    for rec in records:
        for channel, seq in (("ha", rec.ha_seq), ("na", rec.na_seq)):
            for tok in trigram_counts(seq):
                index.setdefault((channel, tok), len(index))
    return index


def _normalise_rows(m: sparse.csr_matrix) -> sparse.csr_matrix:
    norms = np.sqrt(np.asarray(m.multiply(m).sum(axis=1)).ravel())
    norms[norms == 0] = 1.0
    return sparse.diags(1.0 / norms) @ m


def cosine_similarity(train: Sequence[StrainRecord], test: Sequence[StrainRecord]) -> np.ndarray:
    """Dense [n_test, n_train] cosine similarities of trigram count vectors."""
    index = _feature_index(list(train) + list(test))
    a = _normalise_rows(count_matrix(test, index))
    b = _normalise_rows(count_matrix(train, index))
    return np.asarray((a @ b.T).todense())


def knn_scores(train: Sequence[StrainRecord], test: Sequence[StrainRecord], schema: LabelSchema,
               k: int = 1) -> list[np.ndarray]:
    if not train:
        raise ContractError("empty training set for the similarity baseline")
    if k < 1:
        raise ContractError("k must be >= 1")
    sim = cosine_similarity(train, test)
    labels = np.array([schema.encode_labels(r) for r in train], dtype=np.int64)
    # stable sort: among equal similarities the earlier training record wins
    nearest = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    out = []
    for j, n_classes in enumerate(schema.sizes):
        vote = np.zeros((len(test), n_classes))
        best = np.zeros((len(test), n_classes))
        for c in range(n_classes):
            members = labels[:, j] == c
            if members.any():
                best[:, c] = sim[:, members].max(axis=1)
        for row in range(len(test)):
            for t in nearest[row]:
                vote[row, labels[t, j]] += max(sim[row, t], TIE_WEIGHT)
        scores = vote + TIE_WEIGHT * best
        totals = scores.sum(axis=1, keepdims=True)
        out.append(np.where(totals > 0, scores / np.where(totals > 0, totals, 1.0),
                            1.0 / n_classes))
    return out


def knn_baseline(train: Sequence[StrainRecord], test: Sequence[StrainRecord], schema: LabelSchema,
                 k: int = 1, provenance: dict | None = None) -> EvalReport:
    probs = knn_scores(train, test, schema, k)
    y = np.array([schema.encode_labels(r) for r in test], dtype=np.int64).reshape(-1, 3)
    return one_vs_all_report(probs, y, schema, {"method": f"{k}-nn trigram cosine",
                                                **(provenance or {})})


def cross_validated_baseline(records: Sequence[StrainRecord], plan: FoldPlan, schema: LabelSchema,
                             k: int = 1) -> list[EvalReport]:
    """Score the baseline on each outer fold of ``plan``, training on the rest."""
    by_id = {r.strain_id: r for r in records}
    reports = []
    for o in range(plan.k_outer):
        train = [by_id[s] for s in plan.outer_train(o)]
        test = [by_id[s] for s in plan.outer_test(o)]
        reports.append(knn_baseline(train, test, schema, k,
                                    {"outer_fold": o, "n_train": len(train), "n_test": len(test)}))
    return reports


# external aligner results ----------------------------------------------

def read_best_hits(path) -> dict[str, str]:
    """TSV of ``query_id<TAB>subject_id``; a header row is optional, first hit per query wins."""
    path = Path(path)
    hits: dict[str, str] = {}
    with path.open(encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), start=1):
            if not row or not row[0].strip() or row[0].startswith("#"):
                continue
            if len(row) < 2:
                raise ParseError("expected query_id and subject_id", str(path), lineno)
            if lineno == 1 and row[0].strip().lower() in ("query_id", "query", "qseqid"):
                continue
            hits.setdefault(row[0].strip(), row[1].strip())
    return hits


def score_best_hits(hits: dict[str, str], train: Sequence[StrainRecord],
                    test: Sequence[StrainRecord], schema: LabelSchema) -> EvalReport:
    """Each test strain inherits its hit's labels; queries without a hit score uniformly."""
    train_by_id = {r.strain_id: r for r in train}
    probs = [np.zeros((len(test), n)) for n in schema.sizes]
    for i, rec in enumerate(test):
        subject = train_by_id.get(hits.get(rec.strain_id, ""))
        if subject is None:
            for p in probs:
                p[i] = 1.0 / p.shape[1]
            continue
        for j, c in enumerate(schema.encode_labels(subject)):
            probs[j][i, c] = 1.0
    y = np.array([schema.encode_labels(r) for r in test], dtype=np.int64).reshape(-1, 3)
    return one_vs_all_report(probs, y, schema, {"method": "external best hit"})
