"""Synthetic paired-cohort generator with planted, recoverable structure.

Each sample owns six latent factor blocks, split along two axes: relevant
to the disease labels or not, and visible to one modality or both.

    shared_relevant    drives subtype (class-conditional mean) and survival,
                       observed in both modalities
    slide_relevant     survival-relevant, slide-only
    rna_relevant       survival-relevant, RNA-only
    shared_irrelevant  label-free, observed in both modalities
    slide_irrelevant   label-free, slide-only
    rna_irrelevant     label-free, RNA-only

Tumor patches observe a fixed linear map of the slide-visible blocks plus
isotropic noise; the remaining patches are pure noise with per-dimension
variance matched to the tumor patches. Informative genes observe a linear
map of the RNA-visible blocks; the rest are matched-variance noise.
Expression is z-scored per gene across the cohort before storage.

Survival time is exp(w . [shared_relevant; slide_relevant; rna_relevant]
+ noise); censored samples keep event=False and have their time multiplied
by a uniform(0, 1) draw.

Per-sample draws come from ``default_rng(seed ^ sample_index)`` so samples
can be generated independently in any order; cohort-level draws (class
means, observation maps, gene subset, risk weights, censoring) use a
separate stream.
"""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data_model import (
    Dataset,
    PairedSample,
    PatchFeatureBag,
    SurvivalLabel,
    TranscriptomicsProfile,
    ValidationError,
)

logger = logging.getLogger(__name__)

GROUND_TRUTH_FILENAME = "ground_truth.json"

# Scale constants of the generative process. CLASS_SEPARATION is the minimum
# pairwise distance between class-conditional means of shared_relevant, in
# units of its within-class standard deviation.
CLASS_SEPARATION = 12.0
SHARED_IRRELEVANT_STD = 2.5
PATCH_NOISE_STD = 3.0
GENE_NOISE_STD = 0.3

# How strongly each modality expresses the shared disease factor. Molecular
# subtype is defined from expression, so the RNA map carries it at full
# strength; histology reflects it only faintly, which is what makes the
# cross-modal alignment signal worth learning (a slide-only readout saturates
# well below a paired readout).
SLIDE_SHARED_SCALE = 0.08
RNA_SHARED_SCALE = 3.0
RISK_WEIGHT_STD_SHARED = 0.3
RISK_WEIGHT_STD_SPECIFIC = 0.2
LOG_TIME_NOISE_STD = 0.2

FACTOR_BLOCKS = (
    "shared_relevant",
    "slide_relevant",
    "rna_relevant",
    "shared_irrelevant",
    "slide_irrelevant",
    "rna_irrelevant",
)


@dataclass
class CohortConfig:
    n_samples: int = 512
    n_classes: int = 2
    d_p: int = 64
    k_genes: int = 256
    n_informative_genes: int = 32
    d_rs: int = 8
    d_ru: int = 4
    d_is: int = 4
    d_iu: int = 4
    tumor_patch_fraction: float = 0.3
    patches_min: int = 64
    patches_max: int = 196
    censor_fraction: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        if self.n_samples < 2:
            raise ValidationError("n_samples must be >= 2")
        if self.n_classes < 2:
            raise ValidationError("n_classes must be >= 2")
        if not 0 < self.tumor_patch_fraction <= 1:
            raise ValidationError("tumor_patch_fraction must be in (0, 1]")
        if not 0 <= self.censor_fraction < 1:
            raise ValidationError("censor_fraction must be in [0, 1)")
        if self.patches_min < 1 or self.patches_max < self.patches_min:
            raise ValidationError("need 1 <= patches_min <= patches_max")
        if self.n_informative_genes < 1 or self.n_informative_genes > self.k_genes:
            raise ValidationError("n_informative_genes must be in [1, k_genes]")
        for name in ("d_p", "k_genes", "d_rs", "d_ru", "d_is", "d_iu"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")


@dataclass
class LatentFactors:
    """One sample's latent blocks."""

    shared_relevant: np.ndarray
    slide_relevant: np.ndarray
    rna_relevant: np.ndarray
    shared_irrelevant: np.ndarray
    slide_irrelevant: np.ndarray
    rna_irrelevant: np.ndarray


@dataclass
class SyntheticGroundTruth:
    sample_ids: list[str]
    factors: dict[str, np.ndarray]  # block name -> (n_samples, d_block) float32
    tumor_masks: list[np.ndarray]  # per sample, bool over raw patches
    informative_gene_indices: list[int]
    risk_weights: np.ndarray  # over [shared_relevant; slide_relevant; rna_relevant]
    class_means: np.ndarray  # (n_classes, d_rs)

    def sample_factors(self, i: int) -> LatentFactors:
        return LatentFactors(**{name: self.factors[name][i] for name in FACTOR_BLOCKS})


def _class_means(rng: np.random.Generator, n_classes: int, d_rs: int) -> np.ndarray:
    """Zero-centered class means with min pairwise distance CLASS_SEPARATION."""
    means = rng.normal(size=(n_classes, d_rs))
    means -= means.mean(axis=0, keepdims=True)
    dists = [
        np.linalg.norm(means[a] - means[b])
        for a in range(n_classes)
        for b in range(a + 1, n_classes)
    ]
    closest = min(dists)
    if closest < 1e-6:
        raise ValidationError("degenerate class means; use a different seed")
    if closest < CLASS_SEPARATION:
        means *= CLASS_SEPARATION / closest
    return means


def generate_cohort(cfg: CohortConfig) -> tuple[Dataset, SyntheticGroundTruth]:
    """Generate the cohort deterministically from cfg alone."""
    cfg.validate()
    n = cfg.n_samples
    cohort_rng = np.random.default_rng([cfg.seed, 0x9E3779B9])

    means = _class_means(cohort_rng, cfg.n_classes, cfg.d_rs)
    d_slide = cfg.d_rs + cfg.d_ru + cfg.d_is + cfg.d_iu
    d_rna = cfg.d_rs + cfg.d_ru + cfg.d_is + cfg.d_iu
    slide_map = cohort_rng.normal(scale=1.0 / np.sqrt(d_slide), size=(cfg.d_p, d_slide))
    rna_map = cohort_rng.normal(
        scale=1.0 / np.sqrt(d_rna), size=(cfg.n_informative_genes, d_rna)
    )
    slide_map[:, : cfg.d_rs] *= SLIDE_SHARED_SCALE
    rna_map[:, : cfg.d_rs] *= RNA_SHARED_SCALE
    # The panel is ordered the way curated assay panels usually are: the
    # disease-signature block first, reference genes after it.
    informative = np.arange(cfg.n_informative_genes)
    risk_weights = np.concatenate(
        [
            cohort_rng.normal(scale=RISK_WEIGHT_STD_SHARED, size=cfg.d_rs),
            cohort_rng.normal(scale=RISK_WEIGHT_STD_SPECIFIC, size=2 * cfg.d_ru),
        ]
    )

    # Per-dimension variance of the factor vectors, used to match the noise
    # patches / noise genes to the signal carriers.
    between = (means**2).mean(axis=0)
    var_slide = np.concatenate(
        [
            1.0 + between,
            np.ones(cfg.d_ru),
            np.full(cfg.d_is, SHARED_IRRELEVANT_STD**2),
            np.ones(cfg.d_iu),
        ]
    )
    var_rna = var_slide.copy()  # same block layout on the RNA side
    slide_noise_var = (slide_map**2) @ var_slide + PATCH_NOISE_STD**2
    rna_noise_var = (rna_map**2) @ var_rna + GENE_NOISE_STD**2

    gene_ids = [f"G{i:04d}" for i in range(cfg.k_genes)]
    width = max(4, len(str(n - 1)))

    subtypes = np.empty(n, dtype=np.int64)
    factor_rows: dict[str, list[np.ndarray]] = {name: [] for name in FACTOR_BLOCKS}
    tumor_masks: list[np.ndarray] = []
    samples: list[PairedSample] = []
    expr_all = np.empty((n, cfg.k_genes))
    log_time = np.empty(n)

    for i in range(n):
        rng = np.random.default_rng(cfg.seed ^ i)
        cls = int(rng.integers(cfg.n_classes))
        subtypes[i] = cls
        factors = LatentFactors(
            shared_relevant=means[cls] + rng.normal(size=cfg.d_rs),
            slide_relevant=rng.normal(size=cfg.d_ru),
            rna_relevant=rng.normal(size=cfg.d_ru),
            shared_irrelevant=rng.normal(scale=SHARED_IRRELEVANT_STD, size=cfg.d_is),
            slide_irrelevant=rng.normal(size=cfg.d_iu),
            rna_irrelevant=rng.normal(size=cfg.d_iu),
        )
        for name in FACTOR_BLOCKS:
            factor_rows[name].append(getattr(factors, name))

        n_raw = int(rng.integers(cfg.patches_min, cfg.patches_max + 1))
        n_tumor = max(1, round(cfg.tumor_patch_fraction * n_raw))
        mask = np.zeros(n_raw, dtype=bool)
        mask[rng.choice(n_raw, size=n_tumor, replace=False)] = True
        tumor_masks.append(mask)

        z_slide = np.concatenate(
            [
                factors.shared_relevant,
                factors.slide_relevant,
                factors.shared_irrelevant,
                factors.slide_irrelevant,
            ]
        )
        feats = rng.normal(size=(n_raw, cfg.d_p)) * np.sqrt(slide_noise_var)
        feats[mask] = slide_map @ z_slide + rng.normal(
            scale=PATCH_NOISE_STD, size=(n_tumor, cfg.d_p)
        )

        side = int(np.ceil(np.sqrt(n_raw)))
        cells = rng.permutation(side * side)[:n_raw]
        coords = np.stack([cells // side, cells % side], axis=1).astype(np.int32)

        z_rna = np.concatenate(
            [
                factors.shared_relevant,
                factors.rna_relevant,
                factors.shared_irrelevant,
                factors.rna_irrelevant,
            ]
        )
        expr = rng.normal(size=cfg.k_genes) * np.sqrt(rna_noise_var.mean())
        expr[informative] = rna_map @ z_rna + rng.normal(
            scale=GENE_NOISE_STD, size=cfg.n_informative_genes
        )

        expr_all[i] = expr
        risk_in = np.concatenate(
            [factors.shared_relevant, factors.slide_relevant, factors.rna_relevant]
        )
        log_time[i] = risk_weights @ risk_in + rng.normal(scale=LOG_TIME_NOISE_STD)

        sid = f"S{i:0{width}d}"
        samples.append(
            PairedSample(
                bag=PatchFeatureBag(sid, feats.astype(np.float32), coords),
                rna=TranscriptomicsProfile(sid, np.empty(0, dtype=np.float32), gene_ids),
                subtype=cls,
                survival=SurvivalLabel(time=float(np.exp(log_time[i])), event=True),
            )
        )

    # z-score expression per gene across the cohort
    mu = expr_all.mean(axis=0)
    sd = expr_all.std(axis=0)
    sd[sd < 1e-12] = 1.0
    expr_all = (expr_all - mu) / sd
    for i, sample in enumerate(samples):
        sample.rna.values = expr_all[i].astype(np.float32)

    # censoring pass: exact fraction, drawn at cohort level
    n_cens = round(cfg.censor_fraction * n)
    if n_cens:
        cens_idx = cohort_rng.choice(n, size=n_cens, replace=False)
        # 1 - uniform keeps the multiplier strictly positive
        for j, mult in zip(cens_idx, 1.0 - cohort_rng.uniform(size=n_cens)):
            lbl = samples[j].survival
            samples[j].survival = SurvivalLabel(time=float(lbl.time * mult), event=False)

    ds = Dataset(
        samples=samples,
        n_classes=cfg.n_classes,
        d_p=cfg.d_p,
        k_genes=cfg.k_genes,
        manifest={"cohort": asdict(cfg)},
    )
    gt = SyntheticGroundTruth(
        sample_ids=[s.bag.slide_id for s in samples],
        factors={
            name: np.stack(rows).astype(np.float32) for name, rows in factor_rows.items()
        },
        tumor_masks=tumor_masks,
        informative_gene_indices=[int(g) for g in informative],
        risk_weights=risk_weights.astype(np.float32),
        class_means=means.astype(np.float32),
    )
    return ds, gt


def probe_targets(gt: SyntheticGroundTruth, which: str) -> np.ndarray:
    """Per-sample regression targets for representation probes.

    ``which`` is one of shared_relevant, slide_specific, rna_specific,
    irrelevant; the last concatenates all three label-free blocks.
    """
    if which == "shared_relevant":
        return gt.factors["shared_relevant"].copy()
    if which == "slide_specific":
        return gt.factors["slide_relevant"].copy()
    if which == "rna_specific":
        return gt.factors["rna_relevant"].copy()
    if which == "irrelevant":
        return np.concatenate(
            [
                gt.factors["shared_irrelevant"],
                gt.factors["slide_irrelevant"],
                gt.factors["rna_irrelevant"],
            ],
            axis=1,
        )
    raise ValidationError(f"unknown probe target {which!r}")


def permute_rna_pairing(ds: Dataset, seed: int = 0) -> Dataset:
    """Control cohort: reassign RNA values across samples by a seeded
    derangement, keeping ids, labels and slides as they are."""
    n = len(ds.samples)
    order = np.random.default_rng([seed, 0x5EED]).permutation(n)
    take = {int(order[i]): int(order[(i + 1) % n]) for i in range(n)}
    samples = []
    for i, s in enumerate(ds.samples):
        donor = ds.samples[take[i]]
        samples.append(
            PairedSample(
                bag=s.bag,
                rna=TranscriptomicsProfile(
                    s.rna.sample_id, donor.rna.values.copy(), list(s.rna.gene_ids)
                ),
                subtype=s.subtype,
                survival=s.survival,
            )
        )
    return Dataset(
        samples=samples,
        n_classes=ds.n_classes,
        d_p=ds.d_p,
        k_genes=ds.k_genes,
        manifest={**ds.manifest, "rna_pairing": "permuted"},
    )


def _encode(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr)
    return {
        "shape": list(arr.shape),
        "dtype": str(arr.dtype),
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def _decode(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype=np.dtype(obj["dtype"])).reshape(obj["shape"]).copy()


def write_ground_truth(gt: SyntheticGroundTruth, path: str | Path) -> None:
    doc = {
        "version": 1,
        "sample_ids": gt.sample_ids,
        "factors": {name: _encode(arr) for name, arr in gt.factors.items()},
        "tumor_masks": [_encode(m.astype(np.uint8)) for m in gt.tumor_masks],
        "informative_gene_indices": gt.informative_gene_indices,
        "risk_weights": _encode(gt.risk_weights),
        "class_means": _encode(gt.class_means),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def read_ground_truth(path: str | Path) -> SyntheticGroundTruth:
    with open(path) as fh:
        doc = json.load(fh)
    return SyntheticGroundTruth(
        sample_ids=list(doc["sample_ids"]),
        factors={name: _decode(obj) for name, obj in doc["factors"].items()},
        tumor_masks=[_decode(obj).astype(bool) for obj in doc["tumor_masks"]],
        informative_gene_indices=[int(g) for g in doc["informative_gene_indices"]],
        risk_weights=_decode(doc["risk_weights"]),
        class_means=_decode(doc["class_means"]),
    )
