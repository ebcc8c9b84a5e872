"""Concept trees: manifest loading, validation, and descendant image pooling.

A concept tree is a rooted tree of named nodes, each owning a set of image
ids. A node's image pool is its own images plus everything owned below it.
The same image id may legally appear under several nodes; within one node's
owned list duplicates are rejected.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"HTFEAT01"
SPLITS = ("pretrain", "probe_train", "probe_val")


class ManifestError(ValueError):
    """A manifest or feature file failed validation."""


@dataclass(frozen=True)
class ConceptNode:
    node_id: str
    name: str
    parent: str | None
    children: tuple[str, ...]
    owned_images: frozenset[str]
    level: int


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    features: np.ndarray
    probe_label: int | None
    split: str


@dataclass(frozen=True)
class ConceptTree:
    nodes: dict[str, ConceptNode]
    root_id: str

    @property
    def depth(self) -> int:
        return max(n.level for n in self.nodes.values())

    def node(self, node_id: str) -> ConceptNode:
        return self.nodes[node_id]

    def siblings(self, node_id: str) -> tuple[str, ...]:
        parent = self.nodes[node_id].parent
        if parent is None:
            return ()
        return tuple(c for c in self.nodes[parent].children if c != node_id)

    def image_ids(self) -> tuple[str, ...]:
        ids: set[str] = set()
        for node in self.nodes.values():
            ids.update(node.owned_images)
        return tuple(sorted(ids))


@dataclass(frozen=True)
class Dataset:
    tree: ConceptTree
    records: dict[str, ImageRecord]
    class_names: tuple[str, ...]

    @property
    def d_in(self) -> int:
        first = next(iter(self.records.values()))
        return int(first.features.shape[0])

    def split_ids(self, split: str) -> list[str]:
        return sorted(i for i, r in self.records.items() if r.split == split)


def build_tree(raw_nodes: list[dict]) -> ConceptTree:
    """Assemble and validate a tree from manifest node dicts.

    Children are ordered lexicographically by node id so that every
    downstream traversal and sampling order is reproducible.
    """
    if not raw_nodes:
        raise ManifestError("manifest contains no nodes")
    seen: dict[str, dict] = {}
    for raw in raw_nodes:
        nid = raw.get("id")
        if not isinstance(nid, str) or not nid:
            raise ManifestError(f"node with missing or non-string id: {raw!r}")
        if nid in seen:
            raise ManifestError(f"duplicate node id {nid!r}")
        seen[nid] = raw

    roots = [nid for nid, raw in seen.items() if raw.get("parent") is None]
    if not roots:
        raise ManifestError("no root node (every node names a parent)")
    if len(roots) > 1:
        raise ManifestError(f"multiple roots: {sorted(roots)}")
    root_id = roots[0]

    children: dict[str, list[str]] = {nid: [] for nid in seen}
    for nid, raw in seen.items():
        parent = raw.get("parent")
        if parent is None:
            continue
        if parent not in seen:
            raise ManifestError(f"node {nid!r} references unknown parent {parent!r}")
        children[parent].append(nid)
    for nid in children:
        children[nid].sort()

    # Levels via BFS from the root; anything unreached sits on a cycle
    # (or hangs off one), since parent references were all resolved above.
    levels: dict[str, int] = {root_id: 0}
    frontier = [root_id]
    while frontier:
        nxt: list[str] = []
        for nid in frontier:
            for child in children[nid]:
                levels[child] = levels[nid] + 1
                nxt.append(child)
        frontier = nxt
    unreachable = sorted(set(seen) - set(levels))
    if unreachable:
        raise ManifestError(
            f"cycle detected: node {unreachable[0]!r} is not reachable from the root"
        )

    nodes: dict[str, ConceptNode] = {}
    for nid, raw in seen.items():
        images = raw.get("images", [])
        if len(images) != len(set(images)):
            dupes = sorted({i for i in images if images.count(i) > 1})
            raise ManifestError(f"node {nid!r} lists image {dupes[0]!r} more than once")
        nodes[nid] = ConceptNode(
            node_id=nid,
            name=raw.get("name", nid),
            parent=raw.get("parent"),
            children=tuple(children[nid]),
            owned_images=frozenset(images),
            level=levels[nid],
        )
    return ConceptTree(nodes=nodes, root_id=root_id)


def build_pools(tree: ConceptTree) -> dict[str, tuple[str, ...]]:
    """Per-node image pools: owned images union all descendant pools.

    One bottom-up pass; pools are sorted tuples so indexing into them with
    seeded integer draws is deterministic across processes.
    """
    pools: dict[str, tuple[str, ...]] = {}

    def visit(nid: str) -> set[str]:
        node = tree.nodes[nid]
        acc = set(node.owned_images)
        for child in node.children:
            acc.update(visit(child))
        pools[nid] = tuple(sorted(acc))
        return acc

    visit(tree.root_id)
    return pools


def owned_only_pools(tree: ConceptTree) -> dict[str, tuple[str, ...]]:
    """Pools restricted to each node's directly owned images (no descendant
    pooling). Exists to reproduce the degenerate configuration where parent
    nodes see none of their children's images."""
    return {nid: tuple(sorted(n.owned_images)) for nid, n in tree.nodes.items()}


def drop_images(
    pools: dict[str, tuple[str, ...]], banned: set[str]
) -> dict[str, tuple[str, ...]]:
    return {nid: tuple(i for i in pool if i not in banned) for nid, pool in pools.items()}


def pretraining_pools(
    tree: ConceptTree,
    records: dict[str, ImageRecord],
    *,
    owned_only: bool = False,
) -> dict[str, tuple[str, ...]]:
    """Pools offered to the contrastive trainer: probe-validation images are
    removed so the held-out set never leaks into pretraining."""
    base = owned_only_pools(tree) if owned_only else build_pools(tree)
    held_out = {i for i, r in records.items() if r.split == "probe_val"}
    pools = drop_images(base, held_out)
    for nid, pool in pools.items():
        leaked = [i for i in pool if i in held_out]
        assert not leaked, f"probe_val image {leaked[0]!r} leaked into pool {nid!r}"
    return pools


def nodes_at_level(tree: ConceptTree, h: int) -> list[str]:
    if h < 1:
        raise ValueError(f"level must be >= 1, got {h}")
    return sorted(nid for nid, n in tree.nodes.items() if n.level == h)


def level_ancestors(tree: ConceptTree, level: int) -> dict[str, str]:
    """Map each node to its ancestor at the given level (itself if it sits
    exactly there). Nodes above that level are omitted."""
    out: dict[str, str] = {}

    def visit(nid: str, anchor: str | None) -> None:
        node = tree.nodes[nid]
        if node.level == level:
            anchor = nid
        if anchor is not None:
            out[nid] = anchor
        for child in node.children:
            visit(child, anchor)

    visit(tree.root_id, None)
    return out


def image_concept_labels(
    tree: ConceptTree, level: int = 1
) -> dict[str, str]:
    """Label every image with a concept node at the given level: the
    ancestor at that level of whichever node owns it. Images owned by
    several subtrees take the lexicographically first concept so the
    labeling is reproducible."""
    ancestor = level_ancestors(tree, level)
    labels: dict[str, str] = {}
    for nid in sorted(tree.nodes):
        concept = ancestor.get(nid)
        if concept is None:
            continue
        for img in sorted(tree.nodes[nid].owned_images):
            if img not in labels or concept < labels[img]:
                labels[img] = concept
    return labels


def subtree_depths(tree: ConceptTree) -> dict[str, int]:
    """Depth (max level) of each node's level-1 subtree, keyed by node id.
    Used to clamp the margin schedule per subtree when the tree's branches
    have uneven depth."""
    ancestor = level_ancestors(tree, 1)
    max_level: dict[str, int] = {}
    for nid, anc in ancestor.items():
        lvl = tree.nodes[nid].level
        max_level[anc] = max(max_level.get(anc, 0), lvl)
    return {nid: max_level[anc] for nid, anc in ancestor.items()}


# ---------------------------------------------------------------------------
# Feature files
#
# Binary layout: 16-byte header (8-byte magic, uint32 row count, uint32 dim,
# both little-endian) followed by row-major float32 rows. Rows are keyed by
# lexicographic image-id order over the manifest's image universe. CSV files
# carry explicit ids: image_id,v1,...,vd per line.
# ---------------------------------------------------------------------------


def write_features_bin(path: Path | str, ids: list[str], X: np.ndarray) -> None:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 2 or X.shape[0] != len(ids):
        raise ValueError(f"feature matrix shape {X.shape} does not match {len(ids)} ids")
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    with open(path, "wb") as fh:
        fh.write(struct.pack("<8sII", FEATURE_MAGIC, X.shape[0], X.shape[1]))
        fh.write(np.ascontiguousarray(X[order]).tobytes())


def read_features_bin(path: Path | str) -> tuple[int, int, np.ndarray]:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise ManifestError(f"feature file {path} is truncated (no header)")
        magic, n_rows, dim = struct.unpack("<8sII", header)
        if magic != FEATURE_MAGIC:
            raise ManifestError(f"feature file {path} has bad magic {magic!r}")
        raw = fh.read()
    expected = n_rows * dim * 4
    if len(raw) != expected:
        raise ManifestError(
            f"feature file {path} has {len(raw)} payload bytes, expected {expected}"
        )
    X = np.frombuffer(raw, dtype="<f4").reshape(n_rows, dim)
    return n_rows, dim, X.astype(np.float64)


def write_features_csv(path: Path | str, ids: list[str], X: np.ndarray) -> None:
    X = np.asarray(X, dtype=np.float64)
    with open(path, "w") as fh:
        for i, img in enumerate(ids):
            fh.write(img + "," + ",".join(repr(float(v)) for v in X[i]) + "\n")


def read_features_csv(path: Path | str) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) < 2:
                raise ManifestError(f"{path}:{lineno}: expected image_id,v1,...")
            try:
                vec = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: bad float ({exc})") from None
            out[parts[0]] = vec
    return out


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


def write_manifest(
    path: Path | str,
    tree: ConceptTree,
    features_meta: dict,
    labels: dict[str, int | str] | None = None,
    splits: dict[str, str] | None = None,
) -> None:
    doc: dict = {
        "nodes": [
            {
                "id": n.node_id,
                "name": n.name,
                "parent": n.parent,
                "images": sorted(n.owned_images),
            }
            for n in (tree.nodes[k] for k in sorted(tree.nodes))
        ],
        "features": features_meta,
    }
    if labels is not None:
        doc["labels"] = {k: labels[k] for k in sorted(labels)}
    if splits is not None:
        doc["splits"] = {k: splits[k] for k in sorted(splits)}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_dataset(dataset: Dataset, out_dir: Path | str) -> Path:
    """Write a dataset as manifest.json plus features.bin in out_dir.

    Labels are stored as class-name strings for readability; splits are
    written for every image. Returns the manifest path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = list(dataset.tree.image_ids())
    X = feature_matrix(dataset.records, ids)
    write_features_bin(out_dir / "features.bin", ids, X)

    labels: dict[str, str] = {}
    splits: dict[str, str] = {}
    for img in ids:
        rec = dataset.records[img]
        if rec.probe_label is not None:
            labels[img] = dataset.class_names[rec.probe_label]
        splits[img] = rec.split
    manifest_path = out_dir / "manifest.json"
    write_manifest(
        manifest_path,
        dataset.tree,
        {"path": "features.bin", "dim": dataset.d_in, "format": "bin"},
        labels=labels or None,
        splits=splits,
    )
    return manifest_path


def _load_feature_vectors(
    manifest_dir: Path, meta: dict, universe: tuple[str, ...]
) -> dict[str, np.ndarray]:
    for key in ("path", "dim", "format"):
        if key not in meta:
            raise ManifestError(f"features entry missing {key!r}")
    fpath = manifest_dir / meta["path"]
    dim = int(meta["dim"])
    if not fpath.exists():
        raise ManifestError(f"missing feature file {fpath}")
    fmt = meta["format"]
    if fmt == "bin":
        n_rows, file_dim, X = read_features_bin(fpath)
        if file_dim != dim:
            raise ManifestError(
                f"feature file {fpath} has dim {file_dim}, manifest says {dim}"
            )
        if n_rows != len(universe):
            raise ManifestError(
                f"feature file {fpath} has {n_rows} rows for {len(universe)} images"
            )
        return {img: X[i] for i, img in enumerate(universe)}
    if fmt == "csv":
        table = read_features_csv(fpath)
        missing = [i for i in universe if i not in table]
        if missing:
            raise ManifestError(f"feature file {fpath} missing image {missing[0]!r}")
        for img in universe:
            if table[img].shape[0] != dim:
                raise ManifestError(
                    f"image {img!r} has dimension {table[img].shape[0]}, expected {dim}"
                )
        return {img: table[img] for img in universe}
    raise ManifestError(f"unknown feature format {fmt!r}")


def _resolve_labels(
    labels_raw: dict, universe: set[str]
) -> tuple[dict[str, int], tuple[str, ...]]:
    for img in labels_raw:
        if img not in universe:
            raise ManifestError(f"label for unknown image {img!r}")
    values = list(labels_raw.values())
    if all(isinstance(v, int) and not isinstance(v, bool) for v in values):
        n_classes = max(values) + 1 if values else 0
        if values and min(values) < 0:
            raise ManifestError("integer class labels must be >= 0")
        names = tuple(str(i) for i in range(n_classes))
        return dict(labels_raw), names
    if all(isinstance(v, str) for v in values):
        names = tuple(sorted(set(values)))
        index = {name: i for i, name in enumerate(names)}
        return {img: index[v] for img, v in labels_raw.items()}, names
    raise ManifestError("labels must be all ints or all strings")


def load_dataset(path: Path | str) -> Dataset:
    """Load and validate a manifest plus its feature file.

    Raises ManifestError naming the offending node or image on any
    structural problem.
    """
    path = Path(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ManifestError(f"manifest {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from None

    if "nodes" not in doc:
        raise ManifestError("manifest missing 'nodes'")
    if "features" not in doc:
        raise ManifestError("manifest missing 'features'")
    tree = build_tree(doc["nodes"])
    universe = tree.image_ids()
    vectors = _load_feature_vectors(path.parent, doc["features"], universe)

    labels_map: dict[str, int] = {}
    class_names: tuple[str, ...] = ()
    if doc.get("labels"):
        labels_map, class_names = _resolve_labels(doc["labels"], set(universe))

    splits_raw = doc.get("splits", {})
    for img, split in splits_raw.items():
        if img not in set(universe):
            raise ManifestError(f"split for unknown image {img!r}")
        if split not in SPLITS:
            raise ManifestError(f"image {img!r} has unknown split {split!r}")

    records = {
        img: ImageRecord(
            image_id=img,
            features=vectors[img],
            probe_label=labels_map.get(img),
            split=splits_raw.get(img, "pretrain"),
        )
        for img in universe
    }
    return Dataset(tree=tree, records=records, class_names=class_names)


def load_manifest(path: Path | str) -> ConceptTree:
    return load_dataset(path).tree


def feature_matrix(records: dict[str, ImageRecord], ids: list[str]) -> np.ndarray:
    return np.stack([records[i].features for i in ids]).astype(np.float64)
