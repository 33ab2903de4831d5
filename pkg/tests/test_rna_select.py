import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duomics import rna_select as rs
from duomics.data_model import ValidationError
from duomics.linear import fit_linear_classifier, stratified_fold_indices


def planted(n=160, d=12, signal_cols=(3, 7), sep=2.5, seed=0, n_classes=2):
    """Binary data where only signal_cols carry class information."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, n_classes, size=n)
    X = rng.normal(size=(n, d))
    for c in signal_cols:
        X[:, c] += sep * (2.0 * (y == 1) - 1.0) if n_classes == 2 else sep * y
    return X, y


def test_solver_reaches_gradient_tolerance():
    X, y = planted()
    clf = fit_linear_classifier(X, y, 2, reg=1e-3)
    # recompute the gradient at the solution
    w, b = clf.weights[:, 0], clf.bias[0]
    z = X @ w + b
    p = 1.0 / (1.0 + np.exp(-z))
    r = (p - (y == 1)) / len(y)
    grad = np.concatenate([X.T @ r + 1e-3 * w, [r.sum()]])
    assert np.linalg.norm(grad) <= 1e-5


def test_importance_peaks_on_signal_columns():
    X, y = planted()
    model = rs.fit_importance(X, y, 2)
    top2 = set(np.argsort(model.importance)[-2:])
    assert top2 == {3, 7}


def test_single_class_rejected():
    X = np.random.default_rng(0).normal(size=(20, 4))
    with pytest.raises(ValidationError):
        rs.fit_importance(X, np.zeros(20, dtype=int), 2)


def test_column_scaling_keeps_top_rank():
    X, y = planted()
    model_a = rs.fit_importance(X, y, 2)
    X2 = X.copy()
    X2[:, 0] *= 2.0  # scale an uninformative column
    model_b = rs.fit_importance(X2, y, 2)
    assert np.argmax(model_a.importance) == np.argmax(model_b.importance)


def test_elimination_tiebreak_prefers_lower_index():
    drop = rs.select_for_elimination(np.array([0.9, 0.1, 0.5]), 1)
    assert list(drop) == [1]
    drop = rs.select_for_elimination(np.array([0.5, 0.9, 0.5]), 1)
    assert list(drop) == [0]


def test_rfe_single_round_when_one_above_target():
    X, y = planted(d=6, signal_cols=(1,))
    panel, trace = rs.rfe(X, y, k_target=5)
    assert len(trace.eliminations) == 1
    assert len(panel.genes) == 5
    assert trace.eliminations[0].round == 0


def test_rfe_recovers_planted_columns():
    X, y = planted(n=200, d=30, signal_cols=(2, 11, 17), sep=2.0, seed=4)
    ids = [f"g{i:04d}" for i in range(30)]
    panel, trace = rs.rfe(X, y, k_target=3, gene_ids=ids)
    assert sorted(panel.genes) == ["g0002", "g0011", "g0017"]
    assert len(trace.eliminations) == 27
    assert set(trace.elimination_order) | set(panel.genes) == set(ids)


@given(d=st.integers(4, 16), k=st.integers(1, 4), step=st.integers(1, 5))
@settings(max_examples=20, deadline=None)
def test_rfe_partitions_genes(d, k, step):
    k = min(k, d)
    X, y = planted(n=60, d=d, signal_cols=(0,), seed=d)
    panel, trace = rs.rfe(X, y, k_target=k, step=step)
    assert len(panel.genes) == k
    assert len(trace.elimination_order) == d - k
    assert set(panel.genes).isdisjoint(trace.elimination_order)


def test_rfe_deterministic():
    X, y = planted(seed=9)
    p1, t1 = rs.rfe(X, y, 4)
    p2, t2 = rs.rfe(X, y, 4)
    assert p1.genes == p2.genes
    assert t1.elimination_order == t2.elimination_order


def test_rfe_cv_records_all_fold_scores():
    X, y = planted(n=100, d=10, signal_cols=(2,), sep=3.0)
    panel, trace = rs.rfe_cv(X, y, k_target=2, folds=5, seed=1)
    assert len(trace.cv_scores) == 5
    assert all(n_feat == 2 and 0.0 <= s <= 1.0 for n_feat, s in trace.cv_scores)
    assert "g0002" in panel.genes


def test_rfe_cv_separable_data_perfect_fold():
    X, y = planted(n=100, d=8, signal_cols=(1,), sep=6.0, seed=2)
    _, trace = rs.rfe_cv(X, y, k_target=1, folds=5, seed=0)
    assert max(s for _, s in trace.cv_scores) == 1.0


def test_rfe_cv_deterministic():
    X, y = planted(n=90, d=9, seed=5)
    p1, t1 = rs.rfe_cv(X, y, 3, seed=7)
    p2, t2 = rs.rfe_cv(X, y, 3, seed=7)
    assert p1.genes == p2.genes
    assert t1.cv_scores == t2.cv_scores


def test_stratified_folds_balanced():
    y = np.array([0] * 13 + [1] * 7)
    plan = stratified_fold_indices(y, 5, seed=0)
    assert sorted(np.concatenate(plan).tolist()) == list(range(20))
    for cls in (0, 1):
        counts = [np.sum(y[f] == cls) for f in plan]
        assert max(counts) - min(counts) <= 1


def test_stratified_folds_small_class_rejected():
    y = np.array([0] * 10 + [1] * 3)
    with pytest.raises(ValidationError):
        stratified_fold_indices(y, 5, seed=0)


def test_merge_panel_union_and_provenance():
    base = rs.GenePanel(genes=["a", "b"], sources={"a": "rfe", "b": "rfe"})
    merged = rs.merge_panel(base, ["b", "c"], universe=["a", "b", "c", "d"])
    assert merged.genes == ["a", "b", "c"]
    assert merged.sources == {"a": "rfe", "b": "both", "c": "curated"}


def test_merge_panel_unknown_curated_gene():
    base = rs.GenePanel(genes=["a"], sources={"a": "rfe"})
    with pytest.raises(ValidationError, match="ZZZ"):
        rs.merge_panel(base, ["ZZZ"], universe=["a", "b"])


def test_panel_roundtrip(tmp_path):
    panel = rs.GenePanel(genes=["x", "y"], sources={"x": "rfe", "y": "both"})
    rs.write_panel(panel, tmp_path / "panel.json")
    back = rs.read_panel(tmp_path / "panel.json")
    assert back.genes == panel.genes
    assert back.sources == panel.sources


def test_trace_csv(tmp_path):
    X, y = planted(d=6, signal_cols=(1,))
    _, trace = rs.rfe(X, y, k_target=4)
    rs.write_trace(trace, tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().strip().splitlines()
    assert lines[0] == "round,eliminated_gene,importance"
    assert len(lines) == 3
