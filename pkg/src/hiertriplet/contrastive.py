"""Hierarchical contrastive training: triplet sampling over a concept tree,
level-scheduled margins, replay of earlier levels, and the training loop.

The curriculum walks the tree top-down. At level h triplets contrast an
anchor node's pool against a sibling node's pool under margin
(h_max - h)^2 + alpha_min, so coarse concepts get pushed far apart and leaf
concepts only gently. Replay re-draws batches from already-visited levels
to keep the coarse separation from being forgotten.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .hierarchy import ConceptTree, ImageRecord, subtree_depths
from .numerics import AdamState, EncoderModel, adam_step

MAX_TRIPLET_RETRIES = 16


class LevelUnsampleable(Exception):
    """No node at this level can anchor a triplet; the caller should skip it."""


class TripletRetryExhausted(Exception):
    """Every redraw collided; pools overlap pathologically."""


@dataclass(frozen=True)
class Triplet:
    anchor: str
    positive: str
    negative: str
    level: int
    anchor_node: str
    negative_node: str


@dataclass(frozen=True)
class MarginSchedule:
    h_max: int
    alpha_min: float

    def __post_init__(self):
        if self.h_max < 1:
            raise ValueError(f"h_max must be >= 1, got {self.h_max}")
        if self.alpha_min <= 0:
            raise ValueError(f"alpha_min must be positive, got {self.alpha_min}")

    def margin(self, h: int) -> float:
        if not 1 <= h <= self.h_max:
            raise ValueError(f"level {h} outside [1, {self.h_max}]")
        return float((self.h_max - h) ** 2 + self.alpha_min)


def margin(schedule: MarginSchedule, h: int) -> float:
    return schedule.margin(h)


def triplet_loss(a: np.ndarray, p: np.ndarray, n: np.ndarray, alpha: float) -> float:
    """max(0, |a-p|^2 - |a-n|^2 + alpha) with squared euclidean distances."""
    a = np.asarray(a, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(p)) and np.all(np.isfinite(n))):
        raise ValueError("non-finite embedding passed to triplet_loss")
    if alpha <= 0:
        raise ValueError(f"margin must be positive, got {alpha}")
    d_ap = float(np.sum((a - p) ** 2))
    d_an = float(np.sum((a - n) ** 2))
    return max(0.0, d_ap - d_an + alpha)


def batch_triplet_loss(
    A: np.ndarray, P: np.ndarray, N: np.ndarray, alphas: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Mean triplet loss over a batch plus gradients w.r.t. each embedding.

    Returns (mean_loss, per_triplet_losses, dA, dP, dN); inactive triplets
    (hinge at zero) contribute zero gradient.
    """
    diff_ap = A - P
    diff_an = A - N
    raw = np.sum(diff_ap**2, axis=1) - np.sum(diff_an**2, axis=1) + alphas
    losses = np.maximum(raw, 0.0)
    active = (raw > 0.0).astype(np.float64)[:, None]
    b = A.shape[0]
    dA = active * 2.0 * (N - P) / b
    dP = active * (-2.0) * diff_ap / b
    dN = active * 2.0 * diff_an / b
    return float(losses.mean()), losses, dA, dP, dN


@dataclass
class ReplayScheduler:
    """Chooses each batch's level: the current one, or (with probability
    r_p) a uniformly drawn earlier one."""

    r_p: float
    current_level: int
    rng: np.random.Generator

    def next_batch_level(self) -> int:
        return draw_batch_level(self.rng, self.current_level, self.r_p)


def draw_batch_level(rng: np.random.Generator, current_level: int, r_p: float) -> int:
    if current_level < 1:
        raise ValueError(f"current_level must be >= 1, got {current_level}")
    if current_level == 1:
        return 1
    if rng.uniform() < r_p:
        return int(rng.integers(1, current_level))
    return current_level


def eligible_anchor_nodes(
    tree: ConceptTree, pools: dict[str, tuple[str, ...]], level: int
) -> list[str]:
    """Nodes at `level` that can anchor a triplet: at least two pool images
    (anchor and positive are drawn without replacement) and at least one
    sibling with a nonempty pool to supply the negative."""
    out = []
    for nid in sorted(tree.nodes):
        node = tree.nodes[nid]
        if node.level != level or len(pools.get(nid, ())) < 2:
            continue
        if any(len(pools.get(s, ())) >= 1 for s in tree.siblings(nid)):
            out.append(nid)
    return out


def sample_triplet(
    tree: ConceptTree,
    pools: dict[str, tuple[str, ...]],
    level: int,
    rng: np.random.Generator,
    *,
    eligible: list[str] | None = None,
) -> Triplet:
    """Draw one triplet at a hierarchy level, node-first.

    The anchor node is uniform over eligible nodes (so image-rich nodes do
    not dominate), anchor/positive are drawn without replacement from its
    pool, and the negative comes from a uniformly chosen sibling's pool.
    Image-id collisions across the triplet are redrawn a bounded number of
    times; they occur because an image may live under several nodes.
    """
    if eligible is None:
        eligible = eligible_anchor_nodes(tree, pools, level)
    if not eligible:
        raise LevelUnsampleable(f"no eligible anchor nodes at level {level}")
    last_node = None
    for _ in range(MAX_TRIPLET_RETRIES):
        anchor_node = eligible[rng.integers(len(eligible))]
        last_node = anchor_node
        pool = pools[anchor_node]
        i, j = rng.choice(len(pool), size=2, replace=False)
        anchor, positive = pool[i], pool[j]
        siblings = [s for s in tree.siblings(anchor_node) if len(pools.get(s, ())) >= 1]
        negative_node = siblings[rng.integers(len(siblings))]
        neg_pool = pools[negative_node]
        negative = neg_pool[rng.integers(len(neg_pool))]
        if negative == anchor or negative == positive:
            continue
        return Triplet(
            anchor=anchor,
            positive=positive,
            negative=negative,
            level=level,
            anchor_node=anchor_node,
            negative_node=negative_node,
        )
    raise TripletRetryExhausted(
        f"exhausted {MAX_TRIPLET_RETRIES} redraws at node {last_node!r} "
        f"(level {level}); pools overlap almost entirely"
    )


def sample_batch(
    tree: ConceptTree,
    pools: dict[str, tuple[str, ...]],
    level: int,
    size: int,
    rng: np.random.Generator,
) -> list[Triplet]:
    eligible = eligible_anchor_nodes(tree, pools, level)
    if not eligible:
        raise LevelUnsampleable(f"no eligible anchor nodes at level {level}")
    return [
        sample_triplet(tree, pools, level, rng, eligible=eligible) for _ in range(size)
    ]


@dataclass(frozen=True)
class TrainConfig:
    h_max: int | None = None  # None: train down to the tree's full depth
    alpha_min: float = 1.0
    r_p: float = 0.5
    learning_rate: float = 1e-4
    triplet_batch_size: int = 16
    steps_per_level: int = 500
    seed: int = 0
    adaptive_h_max: bool = False

    def validate(self) -> None:
        if self.h_max is not None and self.h_max < 1:
            raise ValueError(f"h_max must be >= 1, got {self.h_max}")
        if self.alpha_min <= 0:
            raise ValueError(f"alpha_min must be positive, got {self.alpha_min}")
        if not 0.0 <= self.r_p <= 1.0:
            raise ValueError(f"r_p must be in [0, 1], got {self.r_p}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.triplet_batch_size < 1:
            raise ValueError("triplet_batch_size must be >= 1")
        if self.steps_per_level < 0:
            raise ValueError("steps_per_level must be >= 0")


class NonFiniteLossError(RuntimeError):
    """Training hit a non-finite loss; carries the last good state."""

    def __init__(self, message: str, params, adam, log):
        super().__init__(message)
        self.last_good_params = params
        self.last_good_adam = adam
        self.log = log


@dataclass
class TrainResult:
    model: EncoderModel
    adam: AdamState
    log: list[dict]
    levels_trained: list[int] = field(default_factory=list)


def train(
    tree: ConceptTree,
    pools: dict[str, tuple[str, ...]],
    records: dict[str, ImageRecord],
    model: EncoderModel,
    config: TrainConfig,
) -> TrainResult:
    """Run the level curriculum: levels 1..min(h_max, depth), steps_per_level
    batches each, batch level chosen by the replay draw and evaluated with
    that level's own margin.

    Deterministic in config.seed: each step re-derives its RNG stream from
    (seed, step), so the log is independent of where sampling runs.
    """
    config.validate()
    held_out = {i for i, r in records.items() if r.split == "probe_val"}
    for nid, pool in pools.items():
        for img in pool:
            if img in held_out:
                raise ValueError(
                    f"probe_val image {img!r} present in training pool {nid!r}"
                )

    depth = tree.depth
    h_max = config.h_max if config.h_max is not None else max(depth, 1)
    schedule = MarginSchedule(h_max=h_max, alpha_min=config.alpha_min)
    top_level = min(h_max, depth)
    sub_depth = subtree_depths(tree) if config.adaptive_h_max else {}

    adam = AdamState(lr=config.learning_rate)
    log: list[dict] = []
    levels_trained: list[int] = []
    eligible_by_level = {
        h: eligible_anchor_nodes(tree, pools, h) for h in range(1, top_level + 1)
    }

    def batch_alpha(level: int, anchor_node: str) -> float:
        if config.adaptive_h_max:
            clamped = min(h_max, max(sub_depth.get(anchor_node, h_max), level))
            return float((clamped - level) ** 2 + config.alpha_min)
        return schedule.margin(level)

    step = 0
    for current_level in range(1, top_level + 1):
        if not eligible_by_level[current_level]:
            log.append(
                {
                    "step": step,
                    "level": current_level,
                    "skipped": True,
                    "reason": "no eligible anchor nodes at level",
                }
            )
            continue
        levels_trained.append(current_level)
        for _ in range(config.steps_per_level):
            rng = np.random.default_rng((config.seed, step))
            level = draw_batch_level(rng, current_level, config.r_p)
            replayed = level != current_level
            if not eligible_by_level[level]:
                log.append(
                    {
                        "step": step,
                        "level": level,
                        "skipped": True,
                        "reason": "replayed level has no eligible anchor nodes",
                    }
                )
                step += 1
                continue
            triplets = [
                sample_triplet(
                    tree, pools, level, rng, eligible=eligible_by_level[level]
                )
                for _ in range(config.triplet_batch_size)
            ]
            anchor_x = np.stack([records[t.anchor].features for t in triplets])
            pos_x = np.stack([records[t.positive].features for t in triplets])
            neg_x = np.stack([records[t.negative].features for t in triplets])
            alphas = np.array([batch_alpha(level, t.anchor_node) for t in triplets])

            x_all = np.concatenate([anchor_x, pos_x, neg_x], axis=0)
            y_all, _ = model.forward_cached(x_all)
            b = len(triplets)
            A, P, N = y_all[:b], y_all[b : 2 * b], y_all[2 * b :]
            loss, _, dA, dP, dN = batch_triplet_loss(A, P, N, alphas)
            if not np.isfinite(loss):
                # no update has happened this step, so the model still holds
                # the last state that produced a finite loss
                raise NonFiniteLossError(
                    f"non-finite loss at step {step} (level {level})",
                    model.copy_params(),
                    adam,
                    log,
                )
            g_all = np.concatenate([dA, dP, dN], axis=0)
            grads = model.grad_head(x_all, g_all)
            adam_step(adam, model.params, grads)
            log.append(
                {
                    "step": step,
                    "level": int(level),
                    "alpha": float(alphas.mean()),
                    "loss": float(loss),
                    "replay": bool(replayed),
                }
            )
            step += 1

    return TrainResult(model=model, adam=adam, log=log, levels_trained=levels_trained)


def write_training_log(path, log: list[dict]) -> None:
    with open(path, "w") as fh:
        for record in log:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
