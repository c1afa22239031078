"""Dice, leave-one-out experiments and report exports."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .pipeline import (
    IdalConfig,
    PreparedCase,
    SimilarityMatrix,
    build_similarity_matrix,
    dice,
    fit_sc,
    oracle_selection,
    segment_oracle_prepared,
    segment_pooled_prepared,
    select_neighbors,
    _segment_with,
)

log = logging.getLogger(__name__)

METHODS = ("pooled", "idal", "oracle")
CSV_SCHEMA_VERSION = 1


class EvaluationError(ValueError):
    pass


@dataclass
class LooRecord:
    case_id: str
    method: str
    dice: float
    selected_ids: list[str]
    training_ids: list[str]
    seconds: float
    sc_training_ids: list[str] = field(default_factory=list)


@dataclass
class LooReport:
    records: list[LooRecord]
    sim: SimilarityMatrix | None = None

    def scores(self, method: str) -> list[float]:
        return [r.dice for r in self.records if r.method == method]

    def methods(self) -> list[str]:
        return [m for m in METHODS if any(r.method == m for r in self.records)]

    def summary(self) -> dict[str, dict[str, float]]:
        out = {}
        for m in self.methods():
            mean, std, med = summarize(self.scores(m))
            out[m] = {"mean": mean, "std": std, "median": med, "n": len(self.scores(m))}
        return out

    def selections(self, method: str = "idal") -> dict[str, list[str]]:
        return {r.case_id: r.selected_ids for r in self.records if r.method == method}


def summarize(scores: Sequence[float]) -> tuple[float, float, float]:
    """(mean, population std, median)."""
    x = np.asarray(scores, dtype=np.float64)
    if x.size == 0:
        raise EvaluationError("cannot summarize an empty list")
    return float(x.mean()), float(x.std()), float(np.median(x))


def leave_one_out(
    prepared: Sequence[PreparedCase],
    methods: Iterable[str] = METHODS,
    cfg: IdalConfig = IdalConfig(),
    sim: SimilarityMatrix | None = None,
) -> LooReport:
    """Hold out each case in turn and segment it with each requested method.

    Single-case classifiers do not depend on which case is held out, so the
    similarity matrix is built once; each fold then uses it with the held-out
    row and column removed.
    """
    requested = set(methods)
    if not requested or requested - set(METHODS):
        raise EvaluationError(f"methods must be a nonempty subset of {METHODS}")
    methods = [m for m in METHODS if m in requested]
    ids = [pc.case_id for pc in prepared]
    need = cfg.k + 1 if ("idal" in methods or "oracle" in methods) else 2
    if len(prepared) < max(need, 4):
        raise EvaluationError(f"leave-one-out needs at least {max(need, 4)} cases, got {len(prepared)}")
    for pc in prepared:
        if pc.gt is None or pc.bundle is None:
            raise EvaluationError(f"{pc.case_id}: needs gt and SUR masks")
    if ("idal" in methods or "oracle" in methods) and sim is None:
        sim = build_similarity_matrix(prepared, cfg)
    by_id = {pc.case_id: pc for pc in prepared}

    records = []
    for held in prepared:
        rest = [i for i in ids if i != held.case_id]
        bundles = {i: by_id[i].bundle for i in rest}
        for method in methods:
            t0 = time.perf_counter()
            sc_ids: list[str] = []
            if method == "pooled":
                res = segment_pooled_prepared([bundles[i] for i in rest], held, cfg)
            elif method == "oracle":
                res = segment_oracle_prepared(bundles, sim, held, cfg)
            else:
                sub = sim.submatrix(rest)
                naf = fit_sc(by_id, sub, cfg)
                sc_ids = list(naf.training_ids)
                chosen = [c for c, _ in select_neighbors(naf, held.stats, cfg.k)]
                res = _segment_with([bundles[c] for c in chosen], held, cfg, "idal",
                                    {"sc_training_ids": sc_ids})
            d = dice(res.mask.data, held.gt)
            records.append(LooRecord(held.case_id, method, d, list(res.selected_case_ids),
                                     list(res.provenance["training_ids"]), time.perf_counter() - t0, sc_ids))
            log.info("LOO %s %-6s dice=%.3f picks=%s", held.case_id, method, d, res.selected_case_ids)
    return LooReport(records, sim)


def check_hygiene(report: LooReport) -> list[str]:
    """Violations of leave-one-out separation; empty when clean."""
    problems = []
    for r in report.records:
        if r.case_id in r.training_ids:
            problems.append(f"{r.method}/{r.case_id}: held-out case in VC training set")
        if r.case_id in r.selected_ids:
            problems.append(f"{r.method}/{r.case_id}: held-out case selected")
        if r.method == "idal":
            if not r.sc_training_ids:
                problems.append(f"idal/{r.case_id}: SC training ids not recorded")
            elif r.case_id in r.sc_training_ids:
                problems.append(f"idal/{r.case_id}: SC trained with the held-out row/column")
    return problems


@dataclass
class SelectionReport:
    per_case: dict[str, dict]
    mean_hit_rate: float


def evaluate_sc_selection(sim: SimilarityMatrix, selections: Mapping[str, Sequence[str]]) -> SelectionReport:
    """Compare similarity-classifier picks against the true similarity column.

    For each held-out case the candidates are all other cases; rank 1 is the
    case whose single-case classifier scored best on it.
    """
    per_case = {}
    for target, picks in selections.items():
        if target not in sim.case_ids or any(p not in sim.case_ids for p in picks):
            raise EvaluationError(f"selection for {target} references unknown ids")
        k = len(picks)
        ranked = oracle_selection(sim, target, len(sim.case_ids) - 1)
        rank_of = {c: i + 1 for i, c in enumerate(ranked)}
        top = set(ranked[:k])
        per_case[target] = {
            "picks": list(picks),
            "ranks": [rank_of[p] for p in picks],
            "true_top": ranked[:k],
            "hit_rate": len(top & set(picks)) / k if k else 0.0,
        }
    mean = float(np.mean([v["hit_rate"] for v in per_case.values()])) if per_case else 0.0
    return SelectionReport(per_case, mean)


# --------------------------------------------------------------------------
# exports


def write_loo_csv(report: LooReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "method", "dice", "selected_ids", "seconds"])
        for r in report.records:
            w.writerow([r.case_id, r.method, f"{r.dice:.6f}", ";".join(r.selected_ids), f"{r.seconds:.3f}"])


def read_loo_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_sim_csv(sim: SimilarityMatrix, selections: Mapping[str, Sequence[str]], path: str | Path) -> None:
    """One row per matrix cell; ``sc_selected`` marks (picked row, held-out column)."""
    marks = {(p, t) for t, picks in selections.items() for p in picks}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row_id", "col_id", "similarity", "sc_selected"])
        for i, a in enumerate(sim.case_ids):
            for j, b in enumerate(sim.case_ids):
                w.writerow([a, b, f"{sim.values[i, j]:.6f}", int((a, b) in marks)])


def write_summary(report: LooReport, path: str | Path, selection: SelectionReport | None = None) -> dict:
    doc = {"schema_version": CSV_SCHEMA_VERSION, "methods": report.summary()}
    if selection is not None:
        doc["sc_mean_hit_rate"] = selection.mean_hit_rate
    Path(path).write_text(json.dumps(doc, indent=2))
    return doc


def write_reports(report: LooReport, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_loo_csv(report, out / "loo_report.csv")
    selection = None
    if report.sim is not None:
        sel = report.selections("idal")
        selection = evaluate_sc_selection(report.sim, sel) if sel else None
        write_sim_csv(report.sim, sel, out / "sim_matrix.csv")
    return write_summary(report, out / "summary.json", selection)
