"""Qualitative latent-space evaluation: PCA down to a stable dimension,
then exact t-SNE to 2-D, with CSV/SVG export of the projection.

The t-SNE here is the exact O(n^2) algorithm: per-point Gaussian bandwidth
calibrated to a target perplexity by bisection, symmetrized affinities, a
Student-t low-dimensional kernel, and momentum gradient descent with early
exaggeration. Fine for a few thousand points, which is all this toolkit
ever projects.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ProjectionConfig:
    pca_dim: int = 50
    tsne_perplexity: float = 30.0
    tsne_iters: int = 1000
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    momentum_start: float = 0.5
    momentum_final: float = 0.8
    learning_rate: float = 200.0
    seed: int = 0
    skip_pca: bool = False

    def validate(self) -> None:
        if self.pca_dim < 1:
            raise ValueError("pca_dim must be >= 1")
        if self.tsne_perplexity <= 0:
            raise ValueError("perplexity must be positive")
        if self.tsne_iters < 1:
            raise ValueError("tsne_iters must be >= 1")
        if not 0 <= self.exaggeration_iters <= self.tsne_iters:
            raise ValueError("exaggeration_iters outside [0, tsne_iters]")


def pca(X: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Project onto the top-k principal directions.

    Returns (n x k projection, explained-variance ratios). Directions are
    orthonormal with a deterministic sign convention (largest-magnitude
    loading positive).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need an n x d matrix with n >= 2")
    n, d = X.shape
    if not 1 <= k <= min(n, d):
        raise ValueError(f"k={k} outside [1, {min(n, d)}]")
    centered = X - X.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    total = float(np.sum(s**2))
    if total == 0.0:
        warnings.warn("zero-variance input; PCA projection is all zeros")
        return np.zeros((n, k)), np.zeros(k)
    components = vt[:k]
    flips = np.sign(components[np.arange(k), np.abs(components).argmax(axis=1)])
    flips[flips == 0] = 1.0
    components = components * flips[:, None]
    ratios = (s[:k] ** 2) / total
    return centered @ components.T, ratios


def _perplexity_calibration(
    sq_dists: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 64
) -> np.ndarray:
    """Per-row conditional affinities with entropy matched to log(perplexity)
    by bisecting each row's Gaussian precision."""
    n = sq_dists.shape[0]
    target = np.log(perplexity)
    P = np.zeros((n, n))
    for i in range(n):
        beta, beta_min, beta_max = 1.0, 0.0, np.inf
        row = np.delete(sq_dists[i], i)
        for _ in range(max_iter):
            w = np.exp(-row * beta)
            total = w.sum()
            if total <= 0:
                entropy, probs = 0.0, w
            else:
                probs = w / total
                nz = probs > 0
                entropy = float(-np.sum(probs[nz] * np.log(probs[nz])))
            if abs(entropy - target) < tol:
                break
            if entropy > target:
                beta_min = beta
                beta = beta * 2.0 if beta_max == np.inf else (beta + beta_max) / 2.0
            else:
                beta_max = beta
                beta = (beta + beta_min) / 2.0
        P[i] = np.insert(probs, i, 0.0)
    return P


def _joint_affinities(X: np.ndarray, perplexity: float) -> np.ndarray:
    sq = np.sum(X**2, axis=1)
    d2 = np.maximum(sq[:, None] - 2.0 * (X @ X.T) + sq[None, :], 0.0)
    cond = _perplexity_calibration(d2, perplexity)
    P = (cond + cond.T) / (2.0 * X.shape[0])
    if not np.all(np.isfinite(P)):
        raise FloatingPointError("non-finite affinities")
    return np.maximum(P, 1e-12)


def _kl(P: np.ndarray, Q: np.ndarray) -> float:
    mask = P > 1e-12
    return float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))


def tsne(
    X: np.ndarray, config: ProjectionConfig
) -> tuple[np.ndarray, list[tuple[int, float]]]:
    """Exact t-SNE to 2-D. Returns coordinates and the KL trace, one entry
    per 50 iterations plus the final one, measured against the
    un-exaggerated affinities."""
    config.validate()
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if config.tsne_perplexity >= (n - 1) / 3.0:
        raise ValueError(
            f"perplexity {config.tsne_perplexity} infeasible for n={n}; "
            f"needs perplexity < (n-1)/3"
        )
    P = _joint_affinities(X, config.tsne_perplexity)

    rng = np.random.default_rng(config.seed)
    Y = rng.normal(scale=1e-4, size=(n, 2))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    trace: list[tuple[int, float]] = []

    for it in range(config.tsne_iters):
        exaggerating = it < config.exaggeration_iters
        P_eff = P * config.early_exaggeration if exaggerating else P
        momentum = config.momentum_start if exaggerating else config.momentum_final

        sq = np.sum(Y**2, axis=1)
        num = 1.0 / (1.0 + np.maximum(sq[:, None] - 2.0 * (Y @ Y.T) + sq[None, :], 0.0))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)

        PQn = (P_eff - Q) * num
        grad = 4.0 * ((np.diag(PQn.sum(axis=1)) - PQn) @ Y)

        inc = (update * grad) < 0.0
        gains[inc] += 0.2
        gains[~inc] *= 0.8
        np.clip(gains, 0.01, None, out=gains)
        update = momentum * update - config.learning_rate * (gains * grad)
        Y = Y + update
        Y = Y - Y.mean(axis=0)

        if (it + 1) % 50 == 0 or it == config.tsne_iters - 1:
            trace.append((it + 1, _kl(P, Q)))

    if not np.all(np.isfinite(Y)):
        raise FloatingPointError("t-SNE diverged to non-finite coordinates")
    return Y, trace


def project(X: np.ndarray, config: ProjectionConfig) -> dict:
    """The full qualitative pipeline: PCA to a stable dimension, then t-SNE.

    PCA runs first unless skip_pca is set or the input is already narrower
    than pca_dim.
    """
    X = np.asarray(X, dtype=np.float64)
    info: dict = {}
    reduced = X
    if not config.skip_pca:
        k = min(config.pca_dim, X.shape[1], X.shape[0])
        reduced, ratios = pca(X, k)
        info["pca_dim"] = k
        info["explained_variance_ratio"] = ratios
    coords, trace = tsne(reduced, config)
    info["kl_trace"] = trace
    info["final_kl"] = trace[-1][1] if trace else float("nan")
    return {"coords": coords, **info}


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

_PALETTE = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f",
    "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac",
    "#1170aa", "#fc7d0b", "#a3acb9", "#57606c", "#5fa2ce",
    "#c85200", "#7b848f", "#a3cce9", "#ffbc79", "#c8d0d9",
]


def _scatter_svg(
    coords: np.ndarray, labels: list[str], title: str, width: int = 640, height: int = 520
) -> str:
    pad = 40
    xs, ys = coords[:, 0], coords[:, 1]
    span_x = float(xs.max() - xs.min()) or 1.0
    span_y = float(ys.max() - ys.min()) or 1.0
    px = pad + (xs - xs.min()) / span_x * (width - 2 * pad)
    py = pad + (ys.max() - ys) / span_y * (height - 2 * pad - 40)

    names = sorted({l for l in labels if l})
    color = {name: _PALETTE[i % len(_PALETTE)] for i, name in enumerate(names)}
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
    ]
    for i in range(len(labels)):
        fill = color.get(labels[i], "#555555")
        parts.append(
            f'<circle cx="{px[i]:.2f}" cy="{py[i]:.2f}" r="3" fill="{fill}" '
            f'fill-opacity="0.75"/>'
        )
    for j, name in enumerate(names):
        lx = pad + j * ((width - 2 * pad) / max(len(names), 1))
        ly = height - 14
        parts.append(f'<circle cx="{lx:.1f}" cy="{ly - 4:.1f}" r="4" fill="{color[name]}"/>')
        parts.append(
            f'<text x="{lx + 8:.1f}" y="{ly:.1f}" font-family="sans-serif" '
            f'font-size="11">{name}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)


def export_projection(
    coords: np.ndarray,
    image_ids: list[str],
    level1_labels: dict[str, str],
    class_labels: dict[str, str],
    out_dir: Path | str,
    *,
    views: tuple[str, ...] = ("level1", "class"),
) -> dict[str, Path]:
    """Write projection.csv plus one SVG scatter per requested label view.

    The CSV round-trips coordinates exactly (repr floats). Missing labels
    become empty fields and monochrome points.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape[0] != len(image_ids):
        raise ValueError("coords and image ids are misaligned")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}

    csv_path = out_dir / "projection.csv"
    with open(csv_path, "w") as fh:
        fh.write("image_id,x,y,level1_concept,probe_class\n")
        for i, img in enumerate(image_ids):
            fh.write(
                f"{img},{float(coords[i, 0])!r},{float(coords[i, 1])!r},"
                f"{level1_labels.get(img, '')},{class_labels.get(img, '')}\n"
            )
    written["csv"] = csv_path

    for view, labels, title in (
        ("level1", level1_labels, "colored by first-level concept"),
        ("class", class_labels, "colored by classification label"),
    ):
        if view not in views:
            continue
        svg_path = out_dir / f"projection_{view}.svg"
        label_list = [labels.get(img, "") for img in image_ids]
        svg_path.write_text(_scatter_svg(coords, label_list, title))
        written[view] = svg_path
    return written


def read_projection_csv(path: Path | str) -> tuple[list[str], np.ndarray]:
    ids: list[str] = []
    rows: list[tuple[float, float]] = []
    with open(path) as fh:
        next(fh)
        for line in fh:
            img, x, y, _, _ = line.rstrip("\n").split(",", 4)
            ids.append(img)
            rows.append((float(x), float(y)))
    return ids, np.array(rows, dtype=np.float64)
