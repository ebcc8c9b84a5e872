"""End-to-end acceptance gate: one test per core guarantee of the toolkit.

Each test is self-contained and asserts the stated tolerance; run with -v to
get one pass/fail line per guarantee. The heavier behavioral checks share a
module fixture so the suite stays inside its runtime budgets.
"""

import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats
from sklearn.cluster import KMeans
from sklearn.metrics import silhouette_score

import hiertriplet as ht
from hiertriplet.contrastive import batch_triplet_loss, eligible_anchor_nodes
from hiertriplet.numerics import finite_difference_grads, max_relative_error


@pytest.fixture(scope="module")
def small_run():
    """Shared depth-2 synthetic run: dataset, trained and untrained encoders."""
    ds = ht.generate(ht.preset("small", 7))
    pools = ht.pretraining_pools(ds.tree, ds.records)
    enc_cfg = ht.EncoderConfig(d_in=ds.d_in, seed=1)
    trained = ht.EncoderModel(enc_cfg)
    ht.train(ds.tree, pools, ds.records, trained, ht.TrainConfig(seed=1))
    untrained = ht.EncoderModel(enc_cfg)
    return {"ds": ds, "enc_cfg": enc_cfg, "trained": trained, "untrained": untrained}


def _level1_labels(ds, ids):
    level1 = ht.image_concept_labels(ds.tree, 1)
    names = sorted({level1[i] for i in ids})
    return np.array([names.index(level1[i]) for i in ids]), names


def _probe_map(model, ds, seed=0):
    cfg = ht.ProbeConfig(num_classes=len(ds.class_names), seed=seed)
    probe = ht.train_probe(model, ds.records, cfg)
    return ht.evaluate_probe(
        model, probe, ds.records, cfg, class_names=ds.class_names
    )


# 1 ------------------------------------------------------------------------


def test_head_gradients_match_finite_differences():
    """Analytic head gradients of the batch triplet loss agree with central
    finite differences (step 1e-4) to max relative error < 1e-4 on 100
    random nonzero-loss cases, in under 30 seconds."""
    start = time.monotonic()
    rng = np.random.default_rng(0)
    checked = 0
    attempts = 0
    worst = 0.0
    while checked < 100:
        attempts += 1
        assert attempts < 2000, "could not find enough well-conditioned cases"
        model = ht.EncoderModel(
            ht.EncoderConfig(d_in=5, d_mid=6, d_h1=4, d_out=3, seed=attempts)
        )
        b = 2
        X = rng.normal(size=(3 * b, 5))
        alphas = rng.uniform(0.5, 4.0, size=b)

        def loss_fn(params):
            Y, _ = model.forward_cached(X)
            A, P, N = Y[:b], Y[b : 2 * b], Y[2 * b :]
            return batch_triplet_loss(A, P, N, alphas)[0]

        Y, cache = model.forward_cached(X)
        A, P, N = Y[:b], Y[b : 2 * b], Y[2 * b :]
        raw = np.sum((A - P) ** 2, axis=1) - np.sum((A - N) ** 2, axis=1) + alphas
        # nonzero loss, and far enough from the hinge and relu kinks that
        # the central difference never crosses either
        if np.min(raw) < 1e-2 or np.min(np.abs(cache["a1"])) < 1e-2:
            continue
        loss, _, dA, dP, dN = batch_triplet_loss(A, P, N, alphas)
        assert loss > 0.0
        analytic = model.grad_head(X, np.concatenate([dA, dP, dN], axis=0))
        numeric = finite_difference_grads(loss_fn, model.params, step=1e-4)
        worst = max(worst, max_relative_error(analytic, numeric))
        checked += 1
    elapsed = time.monotonic() - start
    assert worst < 1e-4, f"worst relative gradient error {worst}"
    assert elapsed < 30.0, f"gradient check took {elapsed:.1f}s"


# 2 ------------------------------------------------------------------------


def test_margin_schedule_closed_form_is_exact():
    """margin(h) equals (h_max - h)^2 + alpha_min bit-for-bit for every
    valid pair with h_max up to 10, and strictly decreases in h."""
    for alpha_min in (1.0, 0.1, 0.25):
        for h_max in range(1, 11):
            sched = ht.MarginSchedule(h_max=h_max, alpha_min=alpha_min)
            for h in range(1, h_max + 1):
                assert sched.margin(h) == (h_max - h) ** 2 + alpha_min
                if h < h_max:
                    assert sched.margin(h) > sched.margin(h + 1)


# 3 ------------------------------------------------------------------------


def _random_tree(rng):
    """Small random hierarchy over a shared image universe."""
    universe = [f"img{i}" for i in range(12)]
    nodes = [{"id": "n0", "name": "n0", "parent": None, "images": []}]
    frontier = ["n0"]
    counter = 1
    for _ in range(int(rng.integers(1, 4))):  # depth of growth
        next_frontier = []
        for parent in frontier:
            for _ in range(int(rng.integers(1, 4))):
                nid = f"n{counter}"
                counter += 1
                k = int(rng.integers(0, 5))
                imgs = sorted(rng.choice(universe, size=k, replace=False).tolist())
                nodes.append(
                    {"id": nid, "name": nid, "parent": parent, "images": imgs}
                )
                next_frontier.append(nid)
        frontier = next_frontier
    return ht.build_tree(nodes)


def test_sampled_triplets_respect_every_contract():
    """100% of 1e5 triplets drawn over randomized trees satisfy the sampling
    invariants, and anchor nodes stay uniform over a (100, 10, 10) sibling
    pool set (chi-square p > 0.01)."""
    rng = np.random.default_rng(0)
    total = 0
    while total < 100_000:
        tree = _random_tree(rng)
        pools = ht.build_pools(tree)
        levels = [
            h
            for h in range(1, tree.depth + 1)
            if eligible_anchor_nodes(tree, pools, h)
        ]
        if not levels:
            continue
        for level in levels:
            chunk = min(2500, 100_000 - total)
            if chunk <= 0:
                break
            try:
                batch = ht.sample_batch(tree, pools, level, chunk, rng)
            except ht.TripletRetryExhausted:
                # legal on trees whose sibling pools almost coincide
                continue
            for t in batch:
                assert len({t.anchor, t.positive, t.negative}) == 3
                assert t.level == level
                assert tree.nodes[t.anchor_node].level == level
                assert t.negative_node in tree.siblings(t.anchor_node)
                assert t.anchor in pools[t.anchor_node]
                assert t.positive in pools[t.anchor_node]
                assert t.negative in pools[t.negative_node]
            total += len(batch)
    assert total == 100_000

    # node-first balancing: pool sizes 100/10/10 must not skew anchor choice
    nodes = [{"id": "r", "name": "r", "parent": None, "images": []}]
    for i, size in enumerate((100, 10, 10)):
        nodes.append(
            {
                "id": f"s{i}",
                "name": f"s{i}",
                "parent": "r",
                "images": [f"s{i}/x{j}" for j in range(size)],
            }
        )
    tree = ht.build_tree(nodes)
    pools = ht.build_pools(tree)
    batch = ht.sample_batch(tree, pools, 1, 30_000, np.random.default_rng(11))
    counts = [sum(t.anchor_node == f"s{i}" for t in batch) for i in range(3)]
    assert stats.chisquare(counts).pvalue > 0.01


# 4 ------------------------------------------------------------------------


def test_replay_frequencies_follow_the_mixture():
    """At current level 3 with replay rate one half, batch levels land
    within 3 points of (50%, 25%, 25%) over 1e4 draws."""
    rng = np.random.default_rng(7)
    draws = [ht.draw_batch_level(rng, 3, 0.5) for _ in range(10_000)]
    freq = {h: draws.count(h) / len(draws) for h in (1, 2, 3)}
    assert abs(freq[3] - 0.50) <= 0.03
    assert abs(freq[2] - 0.25) <= 0.03
    assert abs(freq[1] - 0.25) <= 0.03


# 5 ------------------------------------------------------------------------


def test_training_separates_coarse_concepts():
    """After hierarchy training on the depth-2 preset the level-1 silhouette
    strictly improves over the untrained encoder, and 3-means on the t-SNE
    projection agrees with level-1 concepts on at least 90% of points.
    Budget: 5 minutes."""
    start = time.monotonic()
    ds = ht.generate(ht.preset("small", 7))
    pools = ht.pretraining_pools(ds.tree, ds.records)
    enc_cfg = ht.EncoderConfig(d_in=ds.d_in, seed=1)
    trained = ht.EncoderModel(enc_cfg)
    ht.train(ds.tree, pools, ds.records, trained, ht.TrainConfig(seed=1))
    untrained = ht.EncoderModel(enc_cfg)

    val_ids = ds.split_ids("probe_val")
    labels, _ = _level1_labels(ds, val_ids)
    X = ht.feature_matrix(ds.records, val_ids)
    s_trained = silhouette_score(trained.encode(X), labels)
    s_untrained = silhouette_score(untrained.encode(X), labels)
    assert s_trained > s_untrained, (s_trained, s_untrained)

    out = ht.project(trained.encode(X), ht.ProjectionConfig())
    pred = KMeans(n_clusters=3, n_init=10, random_state=0).fit_predict(out["coords"])
    hits = 0
    for c in range(3):
        mask = pred == c
        if mask.any():
            majority = np.bincount(labels[mask]).argmax()
            hits += int((labels[mask] == majority).sum())
    agreement = hits / len(labels)
    assert agreement >= 0.90, f"cluster agreement {agreement:.3f}"
    assert time.monotonic() - start < 300.0


# 6 ------------------------------------------------------------------------


def test_pretraining_lifts_probe_map_by_five_points(small_run):
    """The hierarchy-pretrained encoder beats the untrained baseline by at
    least 5 absolute mAP points under the pinned probe protocol (batch 64,
    4 epochs, lr 1e-3). Budget: 5 minutes."""
    start = time.monotonic()
    ds = small_run["ds"]
    cfg = ht.ProbeConfig(num_classes=len(ds.class_names))
    assert (cfg.batch_size, cfg.epochs, cfg.learning_rate) == (64, 4, 1e-3)
    trained_map = _probe_map(small_run["trained"], ds).map_score
    untrained_map = _probe_map(small_run["untrained"], ds).map_score
    gap = trained_map - untrained_map
    assert gap >= 0.05, f"mAP gap {gap:+.4f} (trained {trained_map:.4f})"
    assert time.monotonic() - start < 300.0


# 7 ------------------------------------------------------------------------


def test_replay_protects_early_levels_on_deep_trees():
    """On the deep forgetting-prone preset, probe mAP* with replay rate 0.5
    is at least as good as with replay disabled, same seeds."""
    ds = ht.generate(ht.preset("forgetting", 7))
    pools = ht.pretraining_pools(ds.tree, ds.records)
    enc_cfg = ht.EncoderConfig(d_in=ds.d_in, seed=1)
    stars = {}
    for r_p in (0.0, 0.5):
        model = ht.EncoderModel(enc_cfg)
        ht.train(ds.tree, pools, ds.records, model, ht.TrainConfig(seed=1, r_p=r_p))
        stars[r_p] = _probe_map(model, ds).map_star
    assert stars[0.5] >= stars[0.0], stars


# 8 ------------------------------------------------------------------------


def test_leaf_only_pools_shrink_embedding_variance(small_run):
    """Training with owned-only pools (no descendant pooling) ends with
    embedding variance no larger than the pooled configuration: the
    collapse-prone regime really collapses."""
    ds = small_run["ds"]
    own_pools = ht.pretraining_pools(ds.tree, ds.records, owned_only=True)
    leafy = ht.EncoderModel(small_run["enc_cfg"])
    ht.train(ds.tree, own_pools, ds.records, leafy, ht.TrainConfig(seed=1))

    ids = ds.split_ids("pretrain")
    X = ht.feature_matrix(ds.records, ids)
    var_pooled = float(np.sum(np.var(small_run["trained"].encode(X), axis=0)))
    var_leaf = float(np.sum(np.var(leafy.encode(X), axis=0)))
    assert var_leaf <= var_pooled, (var_leaf, var_pooled)


# 9 ------------------------------------------------------------------------


def test_ranked_ap_matches_hand_computation_exactly():
    """AP agrees exactly with hand-computed values on 20 small ranked lists,
    and mAP is exactly the mean of the per-class APs."""
    # scores strictly decreasing, so list position i is rank i+1
    cases = [
        # 1-5: single positive at rank k of 5 -> 1/k
        (5, [1], 1.0),
        (5, [2], 1.0 / 2.0),
        (5, [3], 1.0 / 3.0),
        (5, [4], 1.0 / 4.0),
        (5, [5], 1.0 / 5.0),
        # 6: the worked example: positives at ranks 1 and 3 of 4
        (4, [1, 3], (1.0 + 2.0 / 3.0) / 2.0),
        (4, [1, 2], 1.0),
        (4, [3, 4], (1.0 / 3.0 + 2.0 / 4.0) / 2.0),
        (4, [2, 4], (1.0 / 2.0 + 2.0 / 4.0) / 2.0),
        (4, [1, 2, 3, 4], 1.0),
        (5, [1, 2, 3], 1.0),
        (5, [1, 4, 5], (1.0 + 2.0 / 4.0 + 3.0 / 5.0) / 3.0),
        (3, [2, 3], (1.0 / 2.0 + 2.0 / 3.0) / 2.0),
        (1, [1], 1.0),
        (8, [1, 3, 5, 7], (1.0 + 2.0 / 3.0 + 3.0 / 5.0 + 4.0 / 7.0) / 4.0),
        (6, [5, 6], (1.0 / 5.0 + 2.0 / 6.0) / 2.0),
        (6, [2, 5], (1.0 / 2.0 + 2.0 / 5.0) / 2.0),
        (10, [4], 1.0 / 4.0),
        (10, [1, 2, 4, 8], (1.0 + 1.0 + 3.0 / 4.0 + 4.0 / 8.0) / 4.0),
        (9, [3, 6, 9], (1.0 / 3.0 + 2.0 / 6.0 + 3.0 / 9.0) / 3.0),
    ]
    assert len(cases) == 20
    for n, pos_ranks, expected in cases:
        scores = np.arange(n, 0, -1, dtype=np.float64)
        positives = np.zeros(n, dtype=bool)
        positives[np.array(pos_ranks) - 1] = True
        got = ht.binary_average_precision(scores, positives)
        assert got == expected, (n, pos_ranks, got, expected)

    # reported mAP is exactly the mean of the reported per-class APs, with
    # classes absent from the val split (AP undefined) left out of the mean
    rng = np.random.default_rng(3)
    records = {}
    centers = np.eye(4) * 6.0
    idx = 0
    for c in range(4):
        for j in range(12):
            # class 3 never reaches the val split, so its AP is undefined
            split = "probe_train" if (j < 6 or c == 3) else "probe_val"
            records[f"v{idx:03d}"] = ht.ImageRecord(
                image_id=f"v{idx:03d}",
                features=rng.normal(size=4) + centers[c],
                probe_label=c,
                split=split,
            )
            idx += 1
    model = ht.EncoderModel(ht.EncoderConfig(d_in=4, seed=2))
    cfg = ht.ProbeConfig(num_classes=4, seed=0)
    probe = ht.train_probe(model, records, cfg)
    report = ht.evaluate_probe(model, probe, records, cfg)
    assert report.per_class_ap[3] is None
    defined = [ap for ap in report.per_class_ap if ap is not None]
    assert report.map_score == float(np.mean(defined))


# 10 -----------------------------------------------------------------------


def test_pipeline_reruns_are_byte_identical(tmp_path):
    """Two complete pipeline runs (synth, train, probe, viz) with the same
    seeds, in different directories and under different hash seeds, produce
    byte-identical training logs, probe reports, and projection CSVs."""

    def pipeline(out_root: Path, hash_seed: str) -> dict[str, bytes]:
        env = dict(os.environ)
        env["PYTHONHASHSEED"] = hash_seed
        env.pop("HIERTRIPLET_OUT", None)
        out_root.mkdir(exist_ok=True)
        run = out_root / "run"

        def call(*argv):
            proc = subprocess.run(
                [sys.executable, "-m", "hiertriplet", *argv],
                capture_output=True, text=True, env=env, cwd=out_root,
            )
            assert proc.returncode == 0, proc.stderr
            return proc

        call("synth", "--preset", "small", "--synth-seed", "7", "--out", str(run))
        call("train", "--manifest", str(run / "manifest.json"), "--out", str(run))
        call("probe", "--manifest", str(run / "manifest.json"),
             "--checkpoint", str(run / "checkpoint.npz"), "--out", str(run))
        call("viz", "--manifest", str(run / "manifest.json"),
             "--checkpoint", str(run / "checkpoint.npz"), "--out", str(run))
        return {
            name: (run / name).read_bytes()
            for name in ("training_log.jsonl", "probe_report.json", "projection.csv")
        }

    first = pipeline(tmp_path / "a", "0")
    second = pipeline(tmp_path / "b", "1")
    for name in first:
        assert first[name] == second[name], f"{name} differs between reruns"
