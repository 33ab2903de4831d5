"""Downstream evaluation of pretrained encoders.

Everything here consumes frozen models: stratified folds, linear and
few-shot probing of the concatenated embeddings, discrete-time survival
with C-index, in-batch cross-modal retrieval, and ridge probes that measure
how much of each synthetic ground-truth factor block a representation
retains.

Embeddings are computed per sample with a bag-sampling seed keyed to the
slide id, so the same sample embeds identically no matter where it sits in
the dataset or what else is in the batch.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data_model import Dataset, ValidationError, sample_bag
from .linear import (
    _log1pexp,
    _sigmoid,
    accelerated_gd,
    accuracy,
    fit_linear_classifier,
    macro_f1,
    ridge_fit,
    ridge_r2,
    stratified_fold_indices,
)
from .objectives import PretrainModel, derive_seed
from .synth import SyntheticGroundTruth, probe_targets

logger = logging.getLogger(__name__)

N_SURVIVAL_BINS = 4


# -------------------------------------------------------------------- folds


@dataclass
class FoldPlan:
    assignments: np.ndarray  # (n,) fold index per sample
    n_folds: int

    def train_test(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        test = np.flatnonzero(self.assignments == fold)
        train = np.flatnonzero(self.assignments != fold)
        return train, test


def plan_from_labels(labels, folds: int, seed: int = 0) -> FoldPlan:
    labels = np.asarray(labels)
    parts = stratified_fold_indices(labels, folds, seed)
    assignments = np.empty(len(labels), dtype=np.int64)
    for fold, idx in enumerate(parts):
        assignments[idx] = fold
    return FoldPlan(assignments, folds)


def make_folds(ds: Dataset, folds: int = 5, seed: int = 0) -> FoldPlan:
    return plan_from_labels(ds.subtypes(), folds, seed)


def subset_dataset(ds: Dataset, indices) -> Dataset:
    samples = [ds.samples[int(i)] for i in indices]
    manifest = dict(ds.manifest)
    manifest["sample_ids"] = [s.bag.slide_id for s in samples]
    return Dataset(
        samples=samples,
        n_classes=ds.n_classes,
        d_p=ds.d_p,
        k_genes=ds.k_genes,
        manifest=manifest,
    )


# --------------------------------------------------------------- embeddings


@dataclass
class EmbeddingBundle:
    encoder: np.ndarray  # (n, 2 d_model): [slide summary | rna vector]
    aligned_slide: np.ndarray  # (n, d_model), unit rows
    aligned_rna: np.ndarray  # (n, d_model), unit rows
    slide_token_mean: np.ndarray  # (n, d_model)
    rna_token_mean: np.ndarray  # (n, d_t)
    slide_tokens: np.ndarray  # (n, n_fixed, d_model)
    rna_tokens: np.ndarray  # (n, g_t, d_t)


def embed_bundle(model: PretrainModel, ds: Dataset) -> EmbeddingBundle:
    """Embed every sample in dataset order. One sample per forward pass, so
    row values are independent of dataset ordering and of one another."""
    dtype = next(model.parameters()).dtype
    n_fixed = model.cfg.n_fixed
    was_training = model.training
    model.eval()
    rows = {k: [] for k in ("enc", "a_s", "a_t", "full_s", "full_t")}
    try:
        with torch.no_grad():
            for sample in ds.samples:
                seed = derive_seed("embed-bag", sample.bag.slide_id)
                feats, _ = sample_bag(sample.bag, n_fixed, seed)
                bags = torch.tensor(feats[None], dtype=dtype)
                expr = torch.tensor(sample.rna.values[None], dtype=dtype)
                out = model.forward_encoders(bags, expr)
                rows["enc"].append(
                    torch.cat([out.slide_summary[0], out.rna_vec[0]]).numpy(force=True)
                )
                rows["a_s"].append(model.align_slide(out.slide_summary)[0].numpy(force=True))
                rows["a_t"].append(model.align_rna(out.rna_vec)[0].numpy(force=True))
                rows["full_s"].append(out.slide_tokens[0].numpy(force=True))
                rows["full_t"].append(out.rna_tokens[0].numpy(force=True))
    finally:
        model.train(was_training)
    stack = {k: np.stack(v).astype(np.float64) for k, v in rows.items()}
    return EmbeddingBundle(
        encoder=stack["enc"],
        aligned_slide=stack["a_s"],
        aligned_rna=stack["a_t"],
        slide_token_mean=stack["full_s"].mean(axis=1),
        rna_token_mean=stack["full_t"].mean(axis=1),
        slide_tokens=stack["full_s"],
        rna_tokens=stack["full_t"],
    )


def embed_dataset(model: PretrainModel, ds: Dataset) -> np.ndarray:
    """Concatenated slide-summary and RNA vectors, one row per sample."""
    return embed_bundle(model, ds).encoder


# ------------------------------------------------------------------ probing


@dataclass
class ProbeResult:
    accuracies: list[float]
    macro_f1s: list[float]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std_accuracy(self) -> float:
        return float(np.std(self.accuracies))

    @property
    def mean_f1(self) -> float:
        return float(np.mean(self.macro_f1s))

    @property
    def std_f1(self) -> float:
        return float(np.std(self.macro_f1s))


def _probe_folds(emb, labels, plan, reg, train_selector):
    emb = np.asarray(emb, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = int(labels.max()) + 1
    accs, f1s = [], []
    for fold in range(plan.n_folds):
        train, test = plan.train_test(fold)
        train = train_selector(fold, train)
        clf = fit_linear_classifier(emb[train], labels[train], n_classes, reg)
        pred = clf.predict(emb[test])
        accs.append(accuracy(pred, labels[test]))
        f1s.append(macro_f1(pred, labels[test], n_classes))
    return ProbeResult(accs, f1s)


def linear_probe(emb, labels, plan: FoldPlan, reg: float = 1e-3) -> ProbeResult:
    return _probe_folds(emb, labels, plan, reg, lambda fold, train: train)


def few_shot_probe(
    emb, labels, plan: FoldPlan, shots: int, seed: int = 0, reg: float = 1e-3
) -> ProbeResult:
    """Per fold, train on a seeded draw of `shots` examples per class; with
    shots equal to the full per-class train count this reduces exactly to
    linear_probe."""
    if shots < 1:
        raise ValidationError("shots must be >= 1")
    labels = np.asarray(labels, dtype=np.int64)

    def selector(fold, train):
        chosen = []
        for cls in np.unique(labels[train]):
            cls_idx = train[labels[train] == cls]
            if len(cls_idx) < shots:
                raise ValidationError(
                    f"class {cls} has only {len(cls_idx)} train samples in fold "
                    f"{fold}, fewer than shots={shots}"
                )
            if len(cls_idx) == shots:
                chosen.append(cls_idx)
            else:
                rng = np.random.default_rng(derive_seed(seed, "shot", fold, int(cls)))
                chosen.append(rng.choice(cls_idx, size=shots, replace=False))
        return np.sort(np.concatenate(chosen))

    return _probe_folds(emb, labels, plan, reg, selector)


# ----------------------------------------------------------------- survival


@dataclass
class SurvivalResult:
    cindices: list[float]
    bin_edges: list[tuple[float, ...]]

    @property
    def mean_cindex(self) -> float:
        return float(np.mean(self.cindices))

    @property
    def std_cindex(self) -> float:
        return float(np.std(self.cindices))


def quartile_edges(times: np.ndarray) -> np.ndarray:
    """Linear-interpolation quartiles; three inner edges for four bins."""
    return np.quantile(np.asarray(times, dtype=np.float64), [0.25, 0.5, 0.75])


def assign_bins(times: np.ndarray, edges: np.ndarray) -> np.ndarray:
    return np.searchsorted(edges, np.asarray(times, dtype=np.float64), side="right")


def _fit_hazard_model(X: np.ndarray, bins: np.ndarray, events: np.ndarray, reg: float):
    """Discrete-time hazards: one logistic logit per bin. An uncensored
    sample in bin b contributes -log h_b - sum_{k<b} log(1-h_k); a censored
    one contributes -sum_{k<=b} log(1-h_k)."""
    n, d = X.shape
    k = N_SURVIVAL_BINS
    # alive[i, j]: sample i was at risk in bin j and survived it.
    cols = np.arange(k)
    alive = cols < bins[:, None]
    alive_cens = cols <= bins[:, None]
    alive = np.where(events[:, None], alive, alive_cens)
    event_at = np.zeros((n, k), dtype=bool)
    event_at[np.arange(n)[events], bins[events]] = True

    def fun_grad(theta):
        W = theta[: d * k].reshape(d, k)
        c = theta[d * k :]
        scores = X @ W + c
        log_h = -_log1pexp(-scores)
        log_1mh = -_log1pexp(scores)
        nll = -(log_h * event_at).sum() - (log_1mh * alive).sum()
        nll = nll / n + 0.5 * reg * float((W * W).sum())
        h = _sigmoid(scores)
        g_scores = np.where(event_at, h - 1.0, 0.0) + np.where(alive, h, 0.0)
        g_w = X.T @ g_scores / n + reg * W
        g_c = g_scores.sum(axis=0) / n
        return nll, np.concatenate([g_w.ravel(), g_c])

    theta = accelerated_gd(fun_grad, np.zeros(d * k + k))
    return theta[: d * k].reshape(d, k), theta[d * k :]


def _hazard_risk(X: np.ndarray, W: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Risk = negative expected number of bins survived."""
    h = _sigmoid(X @ W + c)
    survival = np.cumprod(1.0 - h, axis=1)
    return -survival.sum(axis=1)


def survival_fit_eval(
    emb, times, events, plan: FoldPlan, reg: float = 1e-3
) -> SurvivalResult:
    emb = np.asarray(emb, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    cindices, all_edges = [], []
    for fold in range(plan.n_folds):
        train, test = plan.train_test(fold)
        uncensored = times[train][events[train]]
        if len(uncensored) < 2:
            raise ValidationError(
                f"fold {fold} has {len(uncensored)} uncensored training samples, need >= 2"
            )
        edges = quartile_edges(uncensored)
        bins = assign_bins(times[train], edges)
        W, c = _fit_hazard_model(emb[train], bins, events[train], reg)
        risks = _hazard_risk(emb[test], W, c)
        cindices.append(c_index(times[test], events[test], risks))
        all_edges.append(tuple(float(e) for e in edges))
    return SurvivalResult(cindices, all_edges)


def c_index(times, events, risks) -> float:
    """Concordance over pairs (i, j) with t_i < t_j and event_i: fraction
    where risk_i > risk_j, ties worth half."""
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    risks = np.asarray(risks, dtype=np.float64)
    if not len(times) == len(events) == len(risks):
        raise ValidationError("times, events, risks must have equal length")
    comparable = (times[:, None] < times[None, :]) & events[:, None]
    n_comparable = int(comparable.sum())
    if n_comparable == 0:
        raise ValidationError("no comparable pairs")
    concordant = (comparable & (risks[:, None] > risks[None, :])).sum()
    tied = (comparable & (risks[:, None] == risks[None, :])).sum()
    return float((concordant + 0.5 * tied) / n_comparable)


# ---------------------------------------------------------------- retrieval


def retrieval_recall(
    model: PretrainModel,
    ds: Dataset,
    batch_size: int,
    seed: int = 0,
    embeddings: tuple[np.ndarray, np.ndarray] | None = None,
) -> float:
    """In-batch recall@1: over seeded batches, the fraction of slides whose
    most cosine-similar RNA embedding in the batch is their own pair. Pass
    precomputed (aligned_slide, aligned_rna) to skip re-embedding."""
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    if embeddings is None:
        bundle = embed_bundle(model, ds)
        s, t = bundle.aligned_slide, bundle.aligned_rna
    else:
        s, t = embeddings
    n = len(s)
    order = np.random.default_rng(derive_seed(seed, "retrieval")).permutation(n)
    hits = 0
    for start in range(0, n, batch_size):
        chunk = order[start : start + batch_size]
        if len(chunk) == 1:
            logger.warning("retrieval batch of size 1 is trivially correct")
            hits += 1
            continue
        sim = s[chunk] @ t[chunk].T
        hits += int((sim.argmax(axis=1) == np.arange(len(chunk))).sum())
    return hits / n


# ------------------------------------------------------------ factor probes


PROBE_BLOCKS = ("shared_relevant", "slide_specific", "rna_specific", "irrelevant")


def ridge_probe_r2(
    features: np.ndarray,
    targets: np.ndarray,
    seed: int = 0,
    train_fraction: float = 0.75,
    reg: float = 1e-3,
) -> float:
    """Held-out R-squared of a ridge regression from features to targets."""
    features = np.asarray(features, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = len(features)
    if n < 8:
        raise ValidationError("need at least 8 samples to split a probe")
    perm = np.random.default_rng(derive_seed(seed, "probe-split")).permutation(n)
    n_train = int(round(train_fraction * n))
    train, test = perm[:n_train], perm[n_train:]
    coef, xm, ym = ridge_fit(features[train], targets[train], reg)
    return ridge_r2(coef, xm, ym, features[test], targets[test])


def token_probe_r2(
    tokens: np.ndarray,
    targets: np.ndarray,
    seed: int = 0,
    train_fraction: float = 0.75,
    reg: float = 1e-3,
) -> float:
    """Held-out R-squared of a ridge regression from individual tokens to
    per-sample targets. Every token of a sample is one regression row (the
    sample's target repeated), and the train/test split is by sample, never
    by row, so tokens of a held-out sample cannot leak into the fit."""
    tokens = np.asarray(tokens, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if tokens.ndim != 3:
        raise ValidationError(f"tokens must be (samples, tokens, dim), got {tokens.shape}")
    n, per, _ = tokens.shape
    if len(targets) != n:
        raise ValidationError("tokens and targets disagree on sample count")
    if n < 8:
        raise ValidationError("need at least 8 samples to split a probe")
    perm = np.random.default_rng(derive_seed(seed, "probe-split")).permutation(n)
    n_train = int(round(train_fraction * n))
    train, test = perm[:n_train], perm[n_train:]

    def rows(idx):
        return tokens[idx].reshape(-1, tokens.shape[-1]), np.repeat(targets[idx], per, axis=0)

    x_train, y_train = rows(train)
    x_test, y_test = rows(test)
    coef, xm, ym = ridge_fit(x_train, y_train, reg)
    return ridge_r2(coef, xm, ym, x_test, y_test)


def subspace_probe(
    model: PretrainModel,
    ds: Dataset,
    gt: SyntheticGroundTruth,
    seed: int = 0,
    bundle: EmbeddingBundle | None = None,
) -> dict[str, dict[str, float]]:
    """Held-out R-squared of each ground-truth factor block from the aligned
    and the raw encoder representations: 4 blocks x 2 representations."""
    if bundle is None:
        bundle = embed_bundle(model, ds)
    reps = {
        "aligned": np.concatenate([bundle.aligned_slide, bundle.aligned_rna], axis=1),
        "encoder": bundle.encoder,
    }
    report: dict[str, dict[str, float]] = {}
    for block in PROBE_BLOCKS:
        targets = probe_targets(gt, block)
        report[block] = {
            name: ridge_probe_r2(feats, targets, seed=seed) for name, feats in reps.items()
        }
    return report


# ------------------------------------------------------------------ metrics


def write_metrics(
    rows: list[dict],
    json_path: str | Path | None = None,
    csv_path: str | Path | None = None,
) -> None:
    """Rows carry (task, setting, fold, metric, value). JSON is sorted and
    floats go through repr, so identical results serialize bitwise equal."""
    columns = ["task", "setting", "fold", "metric", "value"]
    for row in rows:
        missing = [c for c in columns if c not in row]
        if missing:
            raise ValidationError(f"metrics row missing {missing}")
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump({"rows": rows}, fh, sort_keys=True, indent=2)
            fh.write("\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(columns)
            for row in rows:
                writer.writerow(
                    [repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns]
                )
