"""Recursive feature elimination over gene expression.

Importance of a gene is its squared coefficient in an L2-regularized
linear classifier (summed over one-vs-rest problems when there are more
than two classes). Elimination repeatedly refits on the survivors and
drops the lowest-importance genes, ties broken toward the lower column
index, never dropping below the target panel size.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_model import ValidationError
from .linear import (
    LinearClassifier,
    accuracy,
    fit_linear_classifier,
    stratified_fold_indices,
)


@dataclass
class ImportanceModel:
    classifier: LinearClassifier
    importance: np.ndarray  # (n_genes,)


@dataclass
class Elimination:
    round: int
    gene: str
    importance: float


@dataclass
class RfeTrace:
    eliminations: list[Elimination] = field(default_factory=list)
    cv_scores: list[tuple[int, float]] = field(default_factory=list)  # (n_features, accuracy)

    @property
    def elimination_order(self) -> list[str]:
        return [e.gene for e in self.eliminations]


@dataclass
class GenePanel:
    genes: list[str]
    sources: dict[str, str] = field(default_factory=dict)  # id -> rfe | curated | both


def _default_gene_ids(n: int) -> list[str]:
    return [f"g{i:04d}" for i in range(n)]


def fit_importance(
    X: np.ndarray, y: np.ndarray, n_classes: int, reg: float = 1e-3
) -> ImportanceModel:
    clf = fit_linear_classifier(X, y, n_classes, reg)
    return ImportanceModel(classifier=clf, importance=clf.importance())


def select_for_elimination(importance: np.ndarray, n_remove: int) -> np.ndarray:
    """Positions of the n_remove lowest-importance columns; ties resolve to
    the lower column index."""
    order = np.lexsort((np.arange(len(importance)), importance))
    return np.sort(order[:n_remove])


def rfe(
    X: np.ndarray,
    y: np.ndarray,
    k_target: int,
    step: int = 1,
    gene_ids: list[str] | None = None,
    n_classes: int | None = None,
    reg: float = 1e-3,
) -> tuple[GenePanel, RfeTrace]:
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if gene_ids is None:
        gene_ids = _default_gene_ids(d)
    if len(gene_ids) != d:
        raise ValidationError("one gene id per column required")
    if not 1 <= k_target <= d:
        raise ValidationError(f"k_target must be in [1, {d}]")
    if step < 1:
        raise ValidationError("step must be >= 1")
    if n_classes is None:
        n_classes = int(np.max(y)) + 1

    keep = np.arange(d)
    trace = RfeTrace()
    round_no = 0
    while len(keep) > k_target:
        model = fit_importance(X[:, keep], y, n_classes, reg)
        n_remove = min(step, len(keep) - k_target)
        drop = select_for_elimination(model.importance, n_remove)
        for pos in drop:
            trace.eliminations.append(
                Elimination(
                    round=round_no,
                    gene=gene_ids[keep[pos]],
                    importance=float(model.importance[pos]),
                )
            )
        keep = np.delete(keep, drop)
        round_no += 1
    panel = GenePanel(
        genes=[gene_ids[i] for i in keep],
        sources={gene_ids[i]: "rfe" for i in keep},
    )
    return panel, trace


def rfe_cv(
    X: np.ndarray,
    y: np.ndarray,
    k_target: int,
    step: int = 1,
    folds: int = 5,
    seed: int = 0,
    gene_ids: list[str] | None = None,
    n_classes: int | None = None,
    reg: float = 1e-3,
) -> tuple[GenePanel, RfeTrace]:
    """Run rfe per training fold, score each fold's survivors on its held-out
    part with a fresh classifier, and return the best fold's panel (ties to
    the lowest fold index) with all fold scores recorded."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if gene_ids is None:
        gene_ids = _default_gene_ids(X.shape[1])
    if n_classes is None:
        n_classes = int(np.max(y)) + 1
    plan = stratified_fold_indices(y, folds, seed)
    id_to_col = {g: i for i, g in enumerate(gene_ids)}

    candidates: list[tuple[GenePanel, RfeTrace]] = []
    scores: list[float] = []
    for held_out in plan:
        train = np.setdiff1d(np.arange(len(y)), held_out)
        panel, trace = rfe(
            X[train], y[train], k_target, step, gene_ids, n_classes, reg
        )
        cols = [id_to_col[g] for g in panel.genes]
        clf = fit_linear_classifier(X[np.ix_(train, cols)], y[train], n_classes, reg)
        score = accuracy(clf.predict(X[np.ix_(held_out, cols)]), y[held_out])
        candidates.append((panel, trace))
        scores.append(score)

    best = int(np.argmax(scores))
    panel, trace = candidates[best]
    trace.cv_scores = [(k_target, s) for s in scores]
    return panel, trace


def merge_panel(
    rfe_panel: GenePanel, curated: list[str], universe: list[str]
) -> GenePanel:
    """Union of the RFE survivors and a curated list, RFE ids first, with
    per-gene provenance. Curated ids must exist in the gene universe."""
    known = set(universe)
    for gid in curated:
        if gid not in known:
            raise ValidationError(f"curated gene {gid!r} absent from the gene universe")
    genes = list(rfe_panel.genes)
    sources = {g: "rfe" for g in genes}
    for gid in curated:
        if gid in sources:
            sources[gid] = "both"
        else:
            genes.append(gid)
            sources[gid] = "curated"
    return GenePanel(genes=genes, sources=sources)


def write_panel(panel: GenePanel, path: str | Path) -> None:
    doc = {
        "version": 1,
        "genes": [{"id": g, "source": panel.sources.get(g, "rfe")} for g in panel.genes],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def read_panel(path: str | Path) -> GenePanel:
    with open(path) as fh:
        doc = json.load(fh)
    genes = [entry["id"] for entry in doc["genes"]]
    sources = {entry["id"]: entry["source"] for entry in doc["genes"]}
    return GenePanel(genes=genes, sources=sources)


def write_trace(trace: RfeTrace, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "eliminated_gene", "importance"])
        for e in trace.eliminations:
            writer.writerow([e.round, e.gene, repr(e.importance)])
