import numpy as np
import pytest

import hiertriplet as ht


@pytest.fixture(scope="session")
def small_dataset():
    return ht.generate(ht.preset("small", 7))


@pytest.fixture(scope="session")
def small_pools(small_dataset):
    return ht.pretraining_pools(small_dataset.tree, small_dataset.records)


@pytest.fixture
def cathedral_nodes():
    """A little scene taxonomy: two wings under the building root, each with
    two parts. The rose window image is owned by both facade and nave to
    exercise shared-image pooling."""
    return [
        {"id": "cathedral", "name": "cathedral", "parent": None, "images": ["c0"]},
        {
            "id": "cathedral/exterior",
            "name": "exterior",
            "parent": "cathedral",
            "images": ["e0", "e1"],
        },
        {
            "id": "cathedral/exterior/facade",
            "name": "facade",
            "parent": "cathedral/exterior",
            "images": ["f0", "f1", "rose"],
        },
        {
            "id": "cathedral/exterior/towers",
            "name": "towers",
            "parent": "cathedral/exterior",
            "images": ["t0", "t1"],
        },
        {
            "id": "cathedral/interior",
            "name": "interior",
            "parent": "cathedral",
            "images": [],
        },
        {
            "id": "cathedral/interior/nave",
            "name": "nave",
            "parent": "cathedral/interior",
            "images": ["n0", "rose"],
        },
        {
            "id": "cathedral/interior/organ",
            "name": "organ",
            "parent": "cathedral/interior",
            "images": ["o0"],
        },
    ]


@pytest.fixture
def cathedral_tree(cathedral_nodes):
    return ht.build_tree(cathedral_nodes)


def write_demo_manifest(tmp_path, nodes, d=4, labels=None, splits=None):
    """Materialize a manifest plus a bin feature file for the given nodes."""
    tmp_path.mkdir(parents=True, exist_ok=True)
    tree = ht.build_tree(nodes)
    ids = list(tree.image_ids())
    rng = np.random.default_rng(42)
    X = rng.normal(size=(len(ids), d))
    ht.write_features_bin(tmp_path / "features.bin", ids, X)
    ht.write_manifest(
        tmp_path / "manifest.json",
        tree,
        {"path": "features.bin", "dim": d, "format": "bin"},
        labels=labels,
        splits=splits,
    )
    return tmp_path / "manifest.json"
