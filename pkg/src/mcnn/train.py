"""Optimisation, grid search and nested cross-validation.

Every training run builds its vocabularies from its own training records, so
nothing from a validation or test fold reaches the model.  :class:`LeakageAudit`
records which strain ids each run touched, and :func:`nested_cv` checks the
whole run against it.
"""

from __future__ import annotations

import itertools
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import FoldPlan, LabelSchema, StrainRecord, plan_nested_folds
from .errors import ContractError
from .metrics import EvalReport, one_vs_all_report, summarize
from .model import McnnConfig, McnnModel
from .seeding import derive_seed, rng_for

logger = logging.getLogger(__name__)

LEARNING_RATES = (0.01, 0.005, 0.001, 0.0001)


# optimiser --------------------------------------------------------------

@dataclass
class AdamState:
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new arrays and a new state."""
    if len(params) != len(grads):
        raise ContractError("params and grads differ in length")
    m_prev = state.m or [np.zeros_like(p) for p in params]
    v_prev = state.v or [np.zeros_like(p) for p in params]
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, m_prev, v_prev):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ContractError(f"grad shape {g.shape} != param shape {p.shape}")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(t, new_m, new_v)


# training ---------------------------------------------------------------

def evaluate(model: McnnModel, records: Sequence[StrainRecord], drop: str | None = None,
             provenance: dict | None = None, curves: bool = True) -> EvalReport:
    batch = model.encode_records(records, drop=drop)
    probs = model.probabilities(batch)
    return one_vs_all_report(probs, batch.targets, model.schema, provenance, curves)


def train_accuracy(model: McnnModel, records: Sequence[StrainRecord]) -> tuple[float, float, float]:
    batch = model.encode_records(records)
    probs = model.probabilities(batch)
    return tuple(float(np.mean(np.argmax(p, axis=1) == batch.targets[:, j]))
                 for j, p in enumerate(probs))


@dataclass
class History:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


def train(model: McnnModel, train_records: Sequence[StrainRecord],
          val_records: Sequence[StrainRecord] | None = None, epochs: int | None = None,
          on_epoch: Callable[[dict], bool | None] | None = None) -> tuple[McnnModel, History]:
    """Minibatch Adam on the summed head losses.

    With ``val_records`` the run stops once mean validation macro-F1 has not
    improved for ``config.patience`` epochs and restores the best weights.
    Without them it runs ``epochs`` (default ``config.max_epochs``) epochs.
    ``on_epoch`` sees each history row; a truthy return ends training there.
    """
    if not train_records:
        raise ContractError("empty training set")
    if val_records is not None:
        overlap = {r.strain_id for r in train_records} & {r.strain_id for r in val_records}
        if overlap and {r.strain_id for r in train_records} != {r.strain_id for r in val_records}:
            raise ContractError(f"train and validation sets share {len(overlap)} strains")
    cfg = model.config
    max_epochs = epochs if epochs is not None else cfg.max_epochs
    rng = rng_for(cfg.seed, "shuffle")
    data = model.encode_records(train_records)
    params = model.parameters()
    state = AdamState()
    history = History()
    best_score, best_weights, wait = -np.inf, None, 0
    n = len(data)
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            model.zero_grad()
            loss = model.loss(data.subset(idx))
            loss.backward()
            new, state = adam_step([p.data for p in params], [p.grad for p in params], state,
                                   cfg.learning_rate)
            for p, d in zip(params, new):
                p.data = d
            total += loss.item() * len(idx)
        row = {"epoch": epoch, "loss": total / n}
        if val_records is not None:
            rep = evaluate(model, val_records, curves=False)
            row["val_macro_f1"] = rep.macro("f1")
            row["val_score"] = rep.mean_macro("f1")
            if row["val_score"] > best_score:
                best_score, wait = row["val_score"], 0
                best_weights = [p.data.copy() for p in params]
                history.best_epoch = epoch
            else:
                wait += 1
        history.epochs.append(row)
        if on_epoch is not None and on_epoch(row):
            break
        if val_records is not None and wait >= cfg.patience:
            history.stopped_early = True
            break
    if best_weights is not None:
        for p, d in zip(params, best_weights):
            p.data = d
    else:
        history.best_epoch = len(history.epochs)
    return model, history


def fit(train_records: Sequence[StrainRecord], val_records: Sequence[StrainRecord] | None,
        config: McnnConfig, schema: LabelSchema, epochs: int | None = None,
        on_epoch=None) -> tuple[McnnModel, History]:
    """Fresh model with vocabularies from ``train_records`` only, then :func:`train`."""
    model = McnnModel.for_records(config, schema, train_records)
    return train(model, train_records, val_records, epochs, on_epoch)


# grid -------------------------------------------------------------------

@dataclass
class HyperGrid:
    variant: str
    embedding_size: list[int]
    learning_rate: list[float]
    kernel_size: list[int] = field(default_factory=lambda: [3])
    num_heads: list[int] = field(default_factory=lambda: [1])

    @classmethod
    def published(cls, variant: str) -> "HyperGrid":
        if variant == "cnn":
            return cls("cnn", [50, 100, 150, 200], list(LEARNING_RATES), kernel_size=[3, 4, 5])
        if variant == "bigru":
            return cls("bigru", [50, 100, 150, 200], list(LEARNING_RATES))
        if variant == "transformer":
            return cls("transformer", [32, 64, 128], list(LEARNING_RATES),
                       num_heads=[1, 2, 3, 4, 5])
        raise ContractError(f"unknown variant {variant!r}")

    @classmethod
    def single(cls, config: McnnConfig) -> "HyperGrid":
        return cls(config.variant, [config.embedding_size], [config.learning_rate],
                   [config.kernel_size], [config.num_heads])

    def points(self) -> list[dict]:
        """Grid points in a fixed enumeration order; invalid transformer combos skipped."""
        out = []
        kernels = self.kernel_size if self.variant == "cnn" else self.kernel_size[:1]
        heads = self.num_heads if self.variant == "transformer" else self.num_heads[:1]
        for k, emb, lr, h in itertools.product(kernels, self.embedding_size, self.learning_rate,
                                               heads):
            if self.variant == "transformer" and emb % h:
                logger.info("skipping embedding_size=%d with num_heads=%d (not divisible)", emb, h)
                continue
            out.append({"variant": self.variant, "kernel_size": k, "embedding_size": emb,
                        "learning_rate": lr, "num_heads": h})
        return out

    def to_dict(self) -> dict:
        return {"variant": self.variant, "embedding_size": self.embedding_size,
                "learning_rate": self.learning_rate, "kernel_size": self.kernel_size,
                "num_heads": self.num_heads}


# nested CV --------------------------------------------------------------

@dataclass
class LeakageAudit:
    """Which strain ids each run used, per outer fold."""

    events: list[tuple[int, str, frozenset]] = field(default_factory=list)
    tests: dict[int, frozenset] = field(default_factory=dict)

    def record(self, outer: int, role: str, ids) -> None:
        self.events.append((outer, role, frozenset(ids)))

    def violations(self) -> list[str]:
        out = []
        for outer, role, ids in self.events:
            test = self.tests.get(outer, frozenset())
            if role != "outer-test" and ids & test:
                out.append(f"outer {outer}: {role} touches {len(ids & test)} test ids")
        pairs: dict[tuple[int, str], dict[str, frozenset]] = {}
        for outer, role, ids in self.events:
            if role.startswith("inner-"):
                kind, _, tag = role.partition(":")
                pairs.setdefault((outer, tag), {})[kind] = ids
        for (outer, tag), roles in pairs.items():
            tr, va = roles.get("inner-train", frozenset()), roles.get("inner-val", frozenset())
            if tr & va:
                out.append(f"outer {outer} {tag}: inner train/val overlap")
        return out


@dataclass
class NestedCvResult:
    reports: list[EvalReport]
    chosen: list[dict]
    inner_scores: list[list[dict]]
    audit: LeakageAudit
    plan: FoldPlan

    def summary(self) -> dict:
        doc = summarize(self.reports)
        doc["chosen"] = self.chosen
        return doc


def _run_trial(args) -> tuple[float, int, list[str], list[str]]:
    train_recs, val_recs, config, schema = args
    model, hist = fit(train_recs, val_recs, config, schema)
    rep = evaluate(model, val_recs, curves=False)
    # ids as actually consumed, for the audit
    return (rep.mean_macro("f1"), hist.best_epoch, [r.strain_id for r in train_recs],
            [r.strain_id for r in val_recs])


def nested_cv(records: Sequence[StrainRecord], schema: LabelSchema, base: McnnConfig,
              grid: HyperGrid | None = None, k_outer: int = 5, k_inner: int = 4, seed: int = 0,
              plan: FoldPlan | None = None, jobs: int = 1,
              log: Callable[[str], None] | None = None) -> NestedCvResult:
    """Grid search on inner folds, refit the winner on the outer training set, test once.

    The winner maximises mean inner-validation macro-F1 (ties go to the earlier
    grid point).  The refit runs for the mean of the winner's best inner epochs,
    so the outer test fold is never used for stopping.
    """
    grid = grid or HyperGrid.single(base)
    plan = plan or plan_nested_folds(records, k_outer, k_inner, seed)
    by_id = {r.strain_id: r for r in records}
    audit = LeakageAudit()
    points = grid.points()
    if not points:
        raise ContractError("hyperparameter grid is empty")
    reports, chosen, inner_scores = [], [], []
    say = log or (lambda msg: logger.info(msg))

    for o in range(plan.k_outer):
        test_ids = plan.outer_test(o)
        audit.tests[o] = frozenset(test_ids)
        audit.record(o, "outer-test", test_ids)
        jobs_args, keys = [], []
        for pi, point in enumerate(points):
            for i in range(len(plan.inner[o])):
                tr, va = plan.inner_train(o, i), plan.inner_val(o, i)
                cfg = base.replace(**point, seed=derive_seed(seed, "trial", o, pi, i))
                jobs_args.append(([by_id[s] for s in tr], [by_id[s] for s in va], cfg, schema))
                keys.append((pi, i))
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_run_trial, jobs_args))
        else:
            results = [_run_trial(a) for a in jobs_args]
        for (pi, i), res in zip(keys, results):
            audit.record(o, f"inner-train:p{pi}i{i}", res[2])
            audit.record(o, f"inner-val:p{pi}i{i}", res[3])
        scores = []
        for pi, point in enumerate(points):
            mine = [res for (p, _), res in zip(keys, results) if p == pi]
            scores.append({"point": point, "mean_val_f1": float(np.mean([m[0] for m in mine])),
                           "best_epochs": [m[1] for m in mine]})
        best = max(range(len(points)), key=lambda j: (scores[j]["mean_val_f1"], -j))
        winner = scores[best]
        epochs = max(1, int(round(np.mean(winner["best_epochs"]))))
        train_ids = plan.outer_train(o)
        cfg = base.replace(**winner["point"], seed=derive_seed(seed, "final", o))
        train_recs = [by_id[s] for s in train_ids]
        model, _ = fit(train_recs, None, cfg, schema, epochs=epochs)
        audit.record(o, "outer-train", [r.strain_id for r in train_recs])
        rep = evaluate(model, [by_id[s] for s in test_ids],
                       provenance={"outer_fold": o, "n_train": len(train_ids),
                                   "n_test": len(test_ids), "epochs": epochs,
                                   "hyperparameters": winner["point"]})
        reports.append(rep)
        chosen.append({**winner["point"], "epochs": epochs})
        inner_scores.append(scores)
        say(f"outer fold {o}: chose {winner['point']} "
            f"(inner F1 {winner['mean_val_f1']:.4f}), test macro-F1 "
            f"{rep.mean_macro('f1'):.4f}")

    violations = audit.violations()
    if violations:
        raise ContractError("leakage detected: " + "; ".join(violations))
    return NestedCvResult(reports, chosen, inner_scores, audit, plan)


def timestamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S")
