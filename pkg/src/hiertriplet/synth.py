"""Synthetic hierarchical datasets: Gaussian mixtures with tree structure.

Each node gets a latent center placed at a level-specific distance from its
parent's center; leaf images are center plus isotropic noise. Scales shrink
with depth, so coarse concepts are far apart and siblings are close -- the
structure the hierarchical trainer is supposed to recover.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .hierarchy import ConceptNode, ConceptTree, Dataset, ImageRecord, level_ancestors


@dataclass(frozen=True)
class SynthSpec:
    depth: int = 2
    branching: tuple[int, ...] = (3, 2)
    images_per_leaf: int = 40
    d_in: int = 32
    level_scales: tuple[float, ...] = (10.0, 2.0)
    noise_std: float = 1.5
    count_skew: float = 0.0
    probe_train_fraction: float = 0.2
    probe_val_fraction: float = 0.2
    label_level: int | None = None  # None: classes are leaves
    seed: int = 0

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if len(self.branching) != self.depth:
            raise ValueError(
                f"branching has {len(self.branching)} entries for depth {self.depth}"
            )
        if any(b < 1 for b in self.branching):
            raise ValueError(f"zero branching factor in {self.branching}")
        if len(self.level_scales) != self.depth:
            raise ValueError(
                f"level_scales has {len(self.level_scales)} entries for depth {self.depth}"
            )
        if any(s <= 0 for s in self.level_scales):
            raise ValueError(f"level_scales must be positive, got {self.level_scales}")
        if any(b >= a for a, b in zip(self.level_scales, self.level_scales[1:])):
            raise ValueError(
                f"level_scales must be strictly decreasing, got {self.level_scales}"
            )
        if self.images_per_leaf < 3:
            raise ValueError("images_per_leaf must be >= 3 to carve out splits")
        if not 0.0 <= self.count_skew < 1.0:
            raise ValueError(f"count_skew must be in [0, 1), got {self.count_skew}")
        frac = self.probe_train_fraction + self.probe_val_fraction
        if not (0.0 < self.probe_val_fraction and frac < 1.0):
            raise ValueError("probe fractions must leave room for a pretrain split")
        if self.label_level is not None and not 1 <= self.label_level <= self.depth:
            raise ValueError(f"label_level {self.label_level} outside [1, {self.depth}]")


def _unit(rng: np.random.Generator, d: int) -> np.ndarray:
    v = rng.normal(size=d)
    return v / np.linalg.norm(v)


def generate(spec: SynthSpec) -> Dataset:
    """Build the tree, draw centers and images, and carve out probe splits.

    Deterministic in spec.seed. Probe-validation images are a per-leaf
    holdout; the trainer's pool construction drops them.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)

    nodes: dict[str, ConceptNode] = {}
    centers: dict[str, np.ndarray] = {}
    leaf_ids: list[str] = []

    def grow(node_id: str, name: str, parent: str | None, level: int) -> list[str]:
        if level < spec.depth:
            width = spec.branching[level]
            child_ids = [f"{node_id}/c{j:02d}" for j in range(width)]
        else:
            child_ids = []
        if parent is None:
            centers[node_id] = np.zeros(spec.d_in)
        else:
            step = spec.level_scales[level - 1] * _unit(rng, spec.d_in)
            centers[node_id] = centers[parent] + step
        for child in child_ids:
            grow(child, child.rsplit("/", 1)[1], node_id, level + 1)
        nodes[node_id] = ConceptNode(
            node_id=node_id,
            name=name,
            parent=parent,
            children=tuple(sorted(child_ids)),
            owned_images=frozenset(),
            level=level,
        )
        if not child_ids:
            leaf_ids.append(node_id)
        return child_ids

    grow("root", "root", None, 0)
    leaf_ids.sort()

    # Images hang off leaves only; parents see them through pooling.
    image_rows: list[tuple[str, str]] = []  # (image_id, leaf_id)
    features: dict[str, np.ndarray] = {}
    for k, leaf in enumerate(leaf_ids):
        count = spec.images_per_leaf
        if spec.count_skew > 0:
            count = max(3, round(count * (1.0 + spec.count_skew * rng.uniform(-1, 1))))
        for j in range(count):
            img = f"{leaf}:{j:04d}"
            features[img] = centers[leaf] + spec.noise_std * rng.normal(size=spec.d_in)
            image_rows.append((img, leaf))

    owned: dict[str, set[str]] = {leaf: set() for leaf in leaf_ids}
    for img, leaf in image_rows:
        owned[leaf].add(img)
    nodes = {
        nid: (
            ConceptNode(
                node_id=n.node_id,
                name=n.name,
                parent=n.parent,
                children=n.children,
                owned_images=frozenset(owned.get(nid, ())),
                level=n.level,
            )
        )
        for nid, n in nodes.items()
    }
    tree = ConceptTree(nodes=nodes, root_id="root")

    label_level = spec.label_level if spec.label_level is not None else spec.depth
    ancestor = level_ancestors(tree, label_level)
    class_names = tuple(sorted({ancestor[leaf] for leaf in leaf_ids}))
    class_index = {name: i for i, name in enumerate(class_names)}

    # Per-leaf split carving keeps every class present in every split.
    splits: dict[str, str] = {}
    for leaf in leaf_ids:
        imgs = sorted(owned[leaf])
        perm = rng.permutation(len(imgs))
        n_val = max(1, round(spec.probe_val_fraction * len(imgs)))
        n_train = max(1, round(spec.probe_train_fraction * len(imgs)))
        for pos, idx in enumerate(perm):
            if pos < n_val:
                splits[imgs[idx]] = "probe_val"
            elif pos < n_val + n_train:
                splits[imgs[idx]] = "probe_train"
            else:
                splits[imgs[idx]] = "pretrain"

    records = {
        img: ImageRecord(
            image_id=img,
            features=features[img],
            probe_label=class_index[ancestor[leaf]],
            split=splits[img],
        )
        for img, leaf in image_rows
    }
    return Dataset(tree=tree, records=records, class_names=class_names)


# The three dataset sizes are 1 / 7 / 20 top-level subtrees; the single-tree
# preset omits the super-root so its first level has siblings to contrast.
# "forgetting" is a deep tree with strong coarse structure and coarse probe
# labels, built to expose catastrophic forgetting of early levels.
PRESETS: dict[str, SynthSpec] = {
    "small": SynthSpec(
        depth=2,
        branching=(3, 2),
        images_per_leaf=100,
        d_in=32,
        # coarse groups far apart, sibling leaves close relative to the
        # noise: raw features rank leaves poorly until training compresses
        # the within-pool spread
        level_scales=(16.0, 2.0),
        noise_std=5.0,
        seed=0,
    ),
    "medium": SynthSpec(
        depth=3,
        branching=(7, 3, 2),
        images_per_leaf=30,
        d_in=32,
        level_scales=(20.0, 8.0, 2.0),
        noise_std=1.5,
        seed=0,
    ),
    "large": SynthSpec(
        depth=3,
        branching=(20, 3, 2),
        images_per_leaf=20,
        d_in=32,
        level_scales=(20.0, 8.0, 2.0),
        noise_std=1.5,
        seed=0,
    ),
    "forgetting": SynthSpec(
        depth=4,
        branching=(3, 2, 2, 2),
        images_per_leaf=24,
        d_in=32,
        level_scales=(16.0, 6.0, 3.0, 1.5),
        # noisy fine levels scramble the coarse structure when training
        # never revisits level 1, which is the point of this preset
        noise_std=2.0,
        label_level=1,
        seed=0,
    ),
}


def preset(name: str, seed: int | None = None) -> SynthSpec:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    spec = PRESETS[name]
    if seed is not None:
        spec = replace(spec, seed=seed)
    return spec
