import numpy as np
import pytest
from sklearn.cluster import KMeans
from sklearn.decomposition import PCA as SkPCA

import hiertriplet as ht
from hiertriplet.viz import read_projection_csv


def quick_config(**kw):
    base = dict(tsne_perplexity=15.0, tsne_iters=400, exaggeration_iters=100, seed=0)
    base.update(kw)
    return ht.ProjectionConfig(**base)


def blobs(n_per=50, d=5, spread=20.0, noise=0.5, seed=0, k=3):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(k, d)) * spread
    X = np.vstack([centers[c] + rng.normal(size=(n_per, d)) * noise for c in range(k)])
    labels = np.repeat(np.arange(k), n_per)
    return X, labels


def cluster_agreement(Y, labels, k):
    """Fraction of points whose cluster's majority label matches their own."""
    pred = KMeans(n_clusters=k, n_init=10, random_state=0).fit_predict(Y)
    hits = 0
    for c in range(k):
        mask = pred == c
        if mask.any():
            majority = np.bincount(labels[mask]).argmax()
            hits += int((labels[mask] == majority).sum())
    return hits / len(labels)


# -- pca -----------------------------------------------------------------


def test_pca_recovers_planted_subspace():
    rng = np.random.default_rng(0)
    basis = np.linalg.qr(rng.normal(size=(8, 2)))[0]  # 8 x 2
    X = rng.normal(size=(300, 2)) * np.array([5.0, 3.0]) @ basis.T
    X += rng.normal(size=(300, 8)) * 0.01
    proj, ratios = ht.pca(X, 2)
    assert proj.shape == (300, 2)
    assert ratios.sum() > 0.99
    assert ratios[0] > ratios[1]


def test_pca_isotropic_variance_split():
    # white noise spreads variance evenly, so k of d components explain
    # about k/d of it (Marchenko-Pastur keeps this loose at finite n)
    X = np.random.default_rng(1).normal(size=(2000, 10))
    _, ratios = ht.pca(X, 3)
    assert ratios.sum() == pytest.approx(0.3, rel=0.2)


def test_pca_full_rank_preserves_distances():
    # with k = d the projection is an orthonormal change of basis
    rng = np.random.default_rng(2)
    X = rng.normal(size=(40, 6))
    proj, ratios = ht.pca(X, 6)
    d_before = np.linalg.norm(X[:, None] - X[None, :], axis=2)
    d_after = np.linalg.norm(proj[:, None] - proj[None, :], axis=2)
    assert np.allclose(d_before, d_after, atol=1e-8)
    assert ratios.sum() == pytest.approx(1.0)


def test_pca_sign_convention_is_deterministic():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(50, 4)) * np.array([6.0, 1.0, 0.5, 0.2])
    p1, r1 = ht.pca(X, 3)
    p2, r2 = ht.pca(X.copy(), 3)
    assert np.array_equal(p1, p2)
    assert np.array_equal(r1, r2)
    # data stretched along a known direction: the dominant loading is made
    # positive, so points with growing t project to growing coordinates
    t = np.linspace(-1, 1, 30)
    line = t[:, None] * np.array([3.0, 4.0]) + rng.normal(size=(30, 2)) * 1e-6
    proj, _ = ht.pca(line, 1)
    assert np.corrcoef(t, proj[:, 0])[0, 1] > 0.999


def test_pca_matches_sklearn():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(80, 7)) * np.linspace(3, 0.3, 7)
    proj, ratios = ht.pca(X, 4)
    sk = SkPCA(n_components=4).fit(X)
    assert ratios == pytest.approx(sk.explained_variance_ratio_, abs=1e-10)
    # signs are convention-dependent; magnitudes must agree
    assert np.allclose(np.abs(proj), np.abs(sk.transform(X)), atol=1e-8)


def test_pca_argument_errors():
    X = np.random.default_rng(0).normal(size=(10, 4))
    with pytest.raises(ValueError):
        ht.pca(X, 0)
    with pytest.raises(ValueError):
        ht.pca(X, 5)
    with pytest.raises(ValueError):
        ht.pca(X[0], 1)
    with pytest.raises(ValueError):
        ht.pca(X[:1], 1)


def test_pca_zero_variance_warns():
    X = np.ones((5, 3))
    with pytest.warns(UserWarning, match="zero-variance"):
        proj, ratios = ht.pca(X, 2)
    assert not proj.any()
    assert not ratios.any()


# -- t-sne ---------------------------------------------------------------


def test_tsne_separates_three_blobs():
    X, labels = blobs()
    Y, trace = ht.tsne(X, quick_config())
    assert Y.shape == (150, 2)
    assert cluster_agreement(Y, labels, 3) >= 0.95
    assert trace[-1][0] == 400


def test_tsne_two_blobs_linearly_split():
    X, labels = blobs(n_per=40, k=2, seed=5)
    Y, _ = ht.tsne(X, quick_config(tsne_perplexity=10.0))
    assert cluster_agreement(Y, labels, 2) >= 0.95


def test_tsne_duplicate_rows_stay_together():
    X, _ = blobs(n_per=30, seed=6)
    X = np.vstack([X, X[0]])
    Y, _ = ht.tsne(X, quick_config(tsne_perplexity=10.0))
    twin_dist = np.linalg.norm(Y[0] - Y[-1])
    d = np.linalg.norm(Y[:, None] - Y[None, :], axis=2)
    median = np.median(d[np.triu_indices(len(Y), k=1)])
    assert twin_dist < 0.1 * median


def test_tsne_kl_trace_settles_after_exaggeration():
    X, _ = blobs(seed=7)
    cfg = quick_config(tsne_iters=600, exaggeration_iters=250)
    _, trace = ht.tsne(X, cfg)
    tail = [kl for it, kl in trace if it >= 300]
    assert len(tail) >= 3
    for earlier, later in zip(tail, tail[1:]):
        assert later <= earlier + 0.01
    # the final fit is much better than the early-exaggeration phase
    assert trace[-1][1] < trace[0][1]


def test_tsne_trace_every_fifty_iters():
    X, _ = blobs(n_per=20, seed=8)
    cfg = quick_config(tsne_perplexity=8.0, tsne_iters=120, exaggeration_iters=40)
    _, trace = ht.tsne(X, cfg)
    assert [it for it, _ in trace] == [50, 100, 120]


def test_tsne_deterministic():
    X, _ = blobs(n_per=20, seed=9)
    cfg = quick_config(tsne_perplexity=8.0, tsne_iters=150, exaggeration_iters=50)
    Y1, t1 = ht.tsne(X, cfg)
    Y2, t2 = ht.tsne(X, cfg)
    assert np.array_equal(Y1, Y2)
    assert t1 == t2
    Y3, _ = ht.tsne(X, quick_config(tsne_perplexity=8.0, tsne_iters=150,
                                    exaggeration_iters=50, seed=1))
    assert not np.array_equal(Y1, Y3)


def test_tsne_perplexity_must_fit_sample_count():
    X = np.random.default_rng(0).normal(size=(20, 4))
    with pytest.raises(ValueError, match="perplexity"):
        ht.tsne(X, quick_config(tsne_perplexity=30.0))


def test_projection_config_validation():
    with pytest.raises(ValueError):
        ht.ProjectionConfig(pca_dim=0).validate()
    with pytest.raises(ValueError):
        ht.ProjectionConfig(tsne_perplexity=0.0).validate()
    with pytest.raises(ValueError):
        ht.ProjectionConfig(tsne_iters=0).validate()
    with pytest.raises(ValueError):
        ht.ProjectionConfig(tsne_iters=100, exaggeration_iters=101).validate()


def test_project_composes_pca_and_tsne():
    X, labels = blobs(d=30, seed=10)
    out = ht.project(X, quick_config(pca_dim=5))
    assert out["coords"].shape == (150, 2)
    assert out["pca_dim"] == 5
    assert len(out["explained_variance_ratio"]) == 5
    assert out["final_kl"] == out["kl_trace"][-1][1]
    assert cluster_agreement(out["coords"], labels, 3) >= 0.95


def test_project_skip_pca_keeps_raw_features():
    X, _ = blobs(n_per=20, d=4, seed=11)
    out = ht.project(X, quick_config(tsne_perplexity=8.0, skip_pca=True))
    assert "pca_dim" not in out
    assert "explained_variance_ratio" not in out
    assert out["coords"].shape == (60, 2)


def test_project_narrow_input_clamps_pca_dim():
    X, _ = blobs(n_per=20, d=3, seed=12)
    out = ht.project(X, quick_config(tsne_perplexity=8.0, pca_dim=50))
    assert out["pca_dim"] == 3


# -- export --------------------------------------------------------------


def test_export_projection_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    coords = rng.normal(size=(12, 2)) * 17.3
    ids = [f"img{i:02d}" for i in range(12)]
    level1 = {i: ("wing/a" if k < 6 else "wing/b") for k, i in enumerate(ids)}
    classes = {i: f"cls{k % 3}" for k, i in enumerate(ids)}
    written = ht.export_projection(coords, ids, level1, classes, tmp_path)
    got_ids, got = read_projection_csv(written["csv"])
    assert got_ids == ids
    assert np.array_equal(got, coords)  # repr floats survive the round trip
    header = written["csv"].read_text().splitlines()[0]
    assert header == "image_id,x,y,level1_concept,probe_class"
    for view in ("level1", "class"):
        svg = written[view].read_text()
        assert svg.startswith("<svg")
        assert svg.count("fill-opacity") == 12  # one data point per row
    assert "wing/a" in written["level1"].read_text()
    assert "cls2" in written["class"].read_text()


def test_export_projection_partial_views_and_missing_labels(tmp_path):
    coords = np.zeros((3, 2))
    ids = ["a", "b", "c"]
    written = ht.export_projection(coords, ids, {}, {"a": "x"}, tmp_path,
                                   views=("class",))
    assert set(written) == {"csv", "class"}
    assert not (tmp_path / "projection_level1.svg").exists()
    lines = (tmp_path / "projection.csv").read_text().splitlines()
    assert lines[1].endswith(",x")  # "a" keeps its class label
    assert lines[2].endswith(",,")  # "b" has neither label
    svg = written["class"].read_text()
    assert "#555555" in svg  # unlabeled points fall back to monochrome


def test_export_projection_misalignment(tmp_path):
    with pytest.raises(ValueError, match="misaligned"):
        ht.export_projection(np.zeros((3, 2)), ["a", "b"], {}, {}, tmp_path)
