import numpy as np
import pytest
from scipy import stats

from duomics import data_model as dm
from duomics import synth


def small_cfg(**kw) -> synth.CohortConfig:
    base = dict(
        n_samples=128,
        d_p=16,
        k_genes=40,
        n_informative_genes=10,
        patches_min=12,
        patches_max=30,
        seed=7,
    )
    base.update(kw)
    return synth.CohortConfig(**base)


@pytest.fixture(scope="module")
def default_cohort():
    return synth.generate_cohort(synth.CohortConfig(seed=3))


def test_deterministic_bitwise():
    ds1, gt1 = synth.generate_cohort(small_cfg())
    ds2, gt2 = synth.generate_cohort(small_cfg())
    assert dm.datasets_equal(ds1, ds2)
    for name in synth.FACTOR_BLOCKS:
        assert np.array_equal(gt1.factors[name], gt2.factors[name])
    assert gt1.informative_gene_indices == gt2.informative_gene_indices


def test_different_seed_changes_data():
    ds1, _ = synth.generate_cohort(small_cfg(seed=1))
    ds2, _ = synth.generate_cohort(small_cfg(seed=2))
    assert not dm.datasets_equal(ds1, ds2)


def test_output_passes_validation():
    ds, _ = synth.generate_cohort(small_cfg())
    dm.validate_dataset(ds)


def test_tumor_fraction_one_marks_every_patch():
    _, gt = synth.generate_cohort(small_cfg(tumor_patch_fraction=1.0))
    assert all(mask.all() for mask in gt.tumor_masks)


def test_patch_counts_in_range():
    ds, _ = synth.generate_cohort(small_cfg())
    for s in ds.samples:
        assert 12 <= s.bag.features.shape[0] <= 30


def test_censor_fraction_exact():
    ds, _ = synth.generate_cohort(small_cfg(censor_fraction=0.25))
    events = ds.survival_events()
    assert (~events).sum() == round(0.25 * len(ds))
    assert (ds.survival_times() > 0).all()


def test_expression_zscored_per_gene():
    ds, _ = synth.generate_cohort(small_cfg())
    expr = np.stack([s.rna.values for s in ds.samples]).astype(np.float64)
    np.testing.assert_allclose(expr.mean(axis=0), 0.0, atol=1e-4)
    np.testing.assert_allclose(expr.std(axis=0), 1.0, atol=1e-3)


def test_class_means_separated(default_cohort):
    _, gt = default_cohort
    m = gt.class_means.astype(np.float64)
    for a in range(len(m)):
        for b in range(a + 1, len(m)):
            assert np.linalg.norm(m[a] - m[b]) >= synth.CLASS_SEPARATION - 1e-6


def test_raw_shared_relevant_linearly_separable(default_cohort):
    # closed-form least squares on the raw factor recovers labels >= 99%
    ds, gt = default_cohort
    u = gt.factors["shared_relevant"].astype(np.float64)
    y = ds.subtypes()
    X = np.column_stack([u, np.ones(len(u))])
    onehot = np.eye(ds.n_classes)[y]
    beta, *_ = np.linalg.lstsq(X, onehot, rcond=None)
    acc = float((np.argmax(X @ beta, axis=1) == y).mean())
    assert acc >= 0.99


def _r2_on_holdout(X, Y, n_train):
    Xtr, Xte = X[:n_train], X[n_train:]
    Ytr, Yte = Y[:n_train], Y[n_train:]
    Xtr = np.column_stack([Xtr, np.ones(len(Xtr))])
    Xte = np.column_stack([Xte, np.ones(len(Xte))])
    beta, *_ = np.linalg.lstsq(Xtr, Ytr, rcond=None)
    resid = Yte - Xte @ beta
    base = Yte - Ytr.mean(axis=0)
    return 1.0 - (resid**2).sum() / (base**2).sum()


def test_mean_patch_features_exclude_rna_specific(default_cohort):
    # slides must carry no information about the RNA-only factor
    ds, gt = default_cohort
    pooled = np.stack([s.bag.features.mean(axis=0) for s in ds.samples]).astype(np.float64)
    X = gt.factors["rna_relevant"].astype(np.float64)
    beta, *_ = np.linalg.lstsq(
        np.column_stack([X, np.ones(len(X))]), pooled, rcond=None
    )
    pred = np.column_stack([X, np.ones(len(X))]) @ beta
    resid = pooled - pred
    base = pooled - pooled.mean(axis=0)
    r2 = 1.0 - (resid**2).sum() / (base**2).sum()
    assert r2 < 0.05


def test_expression_excludes_slide_specific(default_cohort):
    ds, gt = default_cohort
    expr = np.stack([s.rna.values for s in ds.samples]).astype(np.float64)
    r2 = _r2_on_holdout(gt.factors["slide_relevant"].astype(np.float64), expr, 400)
    assert r2 < 0.05


def test_informative_genes_carry_factor_signal(default_cohort):
    ds, gt = default_cohort
    expr = np.stack([s.rna.values for s in ds.samples]).astype(np.float64)
    factors = np.concatenate(
        [gt.factors[name] for name in synth.FACTOR_BLOCKS], axis=1
    ).astype(np.float64)
    info = np.array(gt.informative_gene_indices)
    r2_info = _r2_on_holdout(factors, expr[:, info], 400)
    assert r2_info >= 0.5
    noise = np.setdiff1d(np.arange(ds.k_genes), info)
    r2_noise = _r2_on_holdout(factors, expr[:, noise], 400)
    assert r2_noise < 0.05


def test_survival_follows_risk_weights(default_cohort):
    ds, gt = default_cohort
    risk_in = np.concatenate(
        [
            gt.factors["shared_relevant"],
            gt.factors["slide_relevant"],
            gt.factors["rna_relevant"],
        ],
        axis=1,
    ).astype(np.float64)
    score = risk_in @ gt.risk_weights.astype(np.float64)
    events = ds.survival_events()
    tau = stats.kendalltau(score[events], np.log(ds.survival_times()[events])).statistic
    assert tau >= 0.8


def test_probe_targets_blocks(default_cohort):
    _, gt = default_cohort
    n = len(gt.sample_ids)
    assert synth.probe_targets(gt, "shared_relevant").shape == (n, 8)
    assert synth.probe_targets(gt, "slide_specific").shape == (n, 4)
    assert synth.probe_targets(gt, "rna_specific").shape == (n, 4)
    assert synth.probe_targets(gt, "irrelevant").shape == (n, 12)
    with pytest.raises(dm.ValidationError):
        synth.probe_targets(gt, "everything")


def test_ground_truth_roundtrip(tmp_path, default_cohort):
    _, gt = default_cohort
    path = tmp_path / synth.GROUND_TRUTH_FILENAME
    synth.write_ground_truth(gt, path)
    back = synth.read_ground_truth(path)
    assert back.sample_ids == gt.sample_ids
    for name in synth.FACTOR_BLOCKS:
        assert np.array_equal(back.factors[name], gt.factors[name])
    assert all(np.array_equal(a, b) for a, b in zip(back.tumor_masks, gt.tumor_masks))
    assert back.informative_gene_indices == gt.informative_gene_indices
    assert np.array_equal(back.risk_weights, gt.risk_weights)


def test_permuted_pairing_is_a_derangement():
    ds, _ = synth.generate_cohort(small_cfg())
    ctrl = synth.permute_rna_pairing(ds, seed=5)
    moved = 0
    for a, b in zip(ds.samples, ctrl.samples):
        assert a.bag.slide_id == b.rna.sample_id
        assert a.subtype == b.subtype
        if not np.array_equal(a.rna.values, b.rna.values):
            moved += 1
    assert moved == len(ds)
    dm.validate_dataset(ctrl)


def test_config_validation():
    with pytest.raises(dm.ValidationError):
        synth.CohortConfig(tumor_patch_fraction=0.0).validate()
    with pytest.raises(dm.ValidationError):
        synth.CohortConfig(censor_fraction=1.0).validate()
    with pytest.raises(dm.ValidationError):
        synth.CohortConfig(patches_min=10, patches_max=5).validate()
