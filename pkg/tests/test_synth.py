import numpy as np
import pytest
from dataclasses import replace

import hiertriplet as ht
from hiertriplet.synth import SynthSpec


def test_small_preset_shape(small_dataset):
    ds = small_dataset
    assert ds.tree.depth == 2
    assert len(ht.nodes_at_level(ds.tree, 1)) == 3
    assert len(ht.nodes_at_level(ds.tree, 2)) == 6
    assert len(ds.records) == 600
    assert len(ds.class_names) == 6
    # leaves own everything; interior nodes own nothing directly
    for nid in ht.nodes_at_level(ds.tree, 1):
        assert not ds.tree.node(nid).owned_images


def test_split_carve_covers_every_leaf(small_dataset):
    ds = small_dataset
    for leaf in ht.nodes_at_level(ds.tree, 2):
        owned = ds.tree.node(leaf).owned_images
        splits = {ds.records[i].split for i in owned}
        assert splits == {"pretrain", "probe_train", "probe_val"}


def test_split_fractions(small_dataset):
    ds = small_dataset
    n = len(ds.records)
    assert len(ds.split_ids("probe_val")) == pytest.approx(0.2 * n, abs=6)
    assert len(ds.split_ids("probe_train")) == pytest.approx(0.2 * n, abs=6)


def test_labels_default_to_leaves(small_dataset):
    ds = small_dataset
    leaves = set(ht.nodes_at_level(ds.tree, 2))
    assert set(ds.class_names) == leaves
    for img, rec in ds.records.items():
        leaf = img.split(":")[0]
        assert ds.class_names[rec.probe_label] == leaf


def test_label_level_coarsens_classes():
    ds = ht.generate(ht.preset("forgetting", 3))
    assert ds.tree.depth == 4
    assert len(ds.class_names) == 3  # level-1 concepts
    lvl1 = ht.image_concept_labels(ds.tree, 1)
    for img, rec in ds.records.items():
        assert ds.class_names[rec.probe_label] == lvl1[img]


def test_generation_deterministic():
    a = ht.generate(ht.preset("small", 11))
    b = ht.generate(ht.preset("small", 11))
    assert set(a.records) == set(b.records)
    for img in a.records:
        assert np.array_equal(a.records[img].features, b.records[img].features)
        assert a.records[img].split == b.records[img].split
    c = ht.generate(ht.preset("small", 12))
    some = next(iter(a.records))
    assert not np.array_equal(a.records[some].features, c.records[some].features)


def test_center_separation_matches_parameters():
    # with unit directions, squared distance between two same-level sibling
    # subtree centers is 2*scale^2 on average-free exact terms:
    # ||c + s*u1 - (c + s*u2)||^2 = s^2 * ||u1 - u2||^2, and E||u1-u2||^2 = 2
    # for independent unit vectors. Noise adds 2*d*sigma^2 to expected
    # squared distances within and across groups alike, so the group gap is
    # the center term alone.
    spec = SynthSpec(
        depth=1,
        branching=(12,),
        images_per_leaf=200,
        d_in=48,
        level_scales=(9.0,),
        noise_std=1.0,
        seed=5,
    )
    ds = ht.generate(spec)
    leaves = ht.nodes_at_level(ds.tree, 1)
    centers = []
    for leaf in leaves:
        X = ht.feature_matrix(ds.records, sorted(ds.tree.node(leaf).owned_images))
        centers.append(X.mean(axis=0))
    dists = [
        float(np.sum((centers[i] - centers[j]) ** 2))
        for i in range(len(centers))
        for j in range(i + 1, len(centers))
    ]
    expected = 2.0 * spec.level_scales[0] ** 2
    assert np.mean(dists) == pytest.approx(expected, rel=0.25)


def test_within_noise_variance():
    spec = SynthSpec(
        depth=1,
        branching=(3,),
        images_per_leaf=400,
        d_in=32,
        level_scales=(50.0,),
        noise_std=2.0,
        seed=9,
    )
    ds = ht.generate(spec)
    leaf = ht.nodes_at_level(ds.tree, 1)[0]
    X = ht.feature_matrix(ds.records, sorted(ds.tree.node(leaf).owned_images))
    per_dim_var = X.var(axis=0, ddof=1).mean()
    assert per_dim_var == pytest.approx(spec.noise_std**2, rel=0.15)


def test_count_skew_varies_leaf_sizes():
    spec = replace(ht.preset("small"), count_skew=0.5, seed=4)
    ds = ht.generate(spec)
    counts = sorted(
        len(ds.tree.node(leaf).owned_images) for leaf in ht.nodes_at_level(ds.tree, 2)
    )
    assert counts[0] < counts[-1]
    assert counts[0] >= 3


def test_validate_rejects_bad_specs():
    with pytest.raises(ValueError, match="decreas"):
        SynthSpec(depth=2, branching=(2, 2), level_scales=(1.0, 5.0)).validate()
    with pytest.raises(ValueError):
        SynthSpec(images_per_leaf=2).validate()
    with pytest.raises(ValueError):
        SynthSpec(probe_train_fraction=0.6, probe_val_fraction=0.5).validate()
    with pytest.raises(ValueError):
        SynthSpec(depth=2, branching=(2,)).validate()


def test_unknown_preset():
    with pytest.raises(ValueError, match="unknown preset"):
        ht.preset("gigantic")


def test_presets_generate():
    for name in sorted(ht.PRESETS):
        ds = ht.generate(ht.preset(name, 1))
        assert len(ds.records) > 0
        assert ds.class_names
        pools = ht.pretraining_pools(ds.tree, ds.records)
        for h in range(1, ds.tree.depth + 1):
            assert ht.eligible_anchor_nodes(ds.tree, pools, h), (name, h)
