"""Numeric kernels: the encoder, its head gradients, Adam, checkpoints.

The encoder is a frozen random projection (the stand-in for a pretrained
convolutional stack) followed by a trainable two-layer head. Only the head
ever receives optimizer updates; the backbone bytes must survive training
untouched. All training math runs in float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    d_in: int
    d_mid: int = 256
    d_h1: int = 128
    d_out: int = 64
    seed: int = 0
    normalize_embeddings: bool = False
    head_init_scale: float = 0.05

    def validate(self) -> None:
        for name in ("d_in", "d_mid", "d_h1", "d_out"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.head_init_scale <= 0:
            raise ValueError("head_init_scale must be positive")


def _orthogonalish(rng: np.random.Generator, d_in: int, d_mid: int) -> np.ndarray:
    """Random projection with orthonormal rows or columns, whichever fits."""
    a = rng.normal(size=(max(d_in, d_mid), min(d_in, d_mid)))
    q, _ = np.linalg.qr(a)
    return q if d_in >= d_mid else q.T


class EncoderModel:
    """Frozen backbone projection + trainable two-layer head.

    forward: y = relu(x B) W1 + b1 -> relu -> W2 + b2, optionally followed
    by row L2 normalization of the embedding.
    """

    def __init__(self, config: EncoderConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.backbone = _orthogonalish(rng, config.d_in, config.d_mid)
        self.backbone.setflags(write=False)
        s = config.head_init_scale
        self.params: dict[str, np.ndarray] = {
            "w1": rng.normal(size=(config.d_mid, config.d_h1))
            * np.sqrt(2.0 / config.d_mid),
            "b1": np.zeros(config.d_h1),
            # small output layer keeps initial embeddings near the origin,
            # so every margin starts active instead of already satisfied
            "w2": rng.normal(size=(config.d_h1, config.d_out))
            * (s / np.sqrt(config.d_h1)),
            "b2": np.zeros(config.d_out),
        }

    def _as_batch(self, x: np.ndarray) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.config.d_in:
            raise ValueError(
                f"input has shape {x.shape}, expected (*, {self.config.d_in})"
            )
        return x, single

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        x, _ = self._as_batch(x)
        z = np.maximum(x @ self.backbone, 0.0)
        a1 = z @ self.params["w1"] + self.params["b1"]
        h = np.maximum(a1, 0.0)
        y = h @ self.params["w2"] + self.params["b2"]
        cache = {"z": z, "a1": a1, "h": h}
        if self.config.normalize_embeddings:
            norms = np.linalg.norm(y, axis=1, keepdims=True)
            norms = np.maximum(norms, 1e-12)
            cache["y_raw"] = y
            cache["norms"] = norms
            y = y / norms
        return y, cache

    def encode(self, x: np.ndarray) -> np.ndarray:
        x_batch, single = self._as_batch(x)
        y, _ = self.forward_cached(x_batch)
        if not np.all(np.isfinite(y)):
            raise FloatingPointError("non-finite embedding")
        return y[0] if single else y

    def grad_head(
        self, x: np.ndarray, grad_y: np.ndarray
    ) -> dict[str, np.ndarray]:
        """Analytic gradients of the head parameters given upstream
        gradients with respect to the embeddings. The backbone gets none."""
        x, _ = self._as_batch(x)
        grad_y = np.asarray(grad_y, dtype=np.float64)
        if grad_y.shape != (x.shape[0], self.config.d_out):
            raise ValueError(
                f"upstream gradient has shape {grad_y.shape}, "
                f"expected {(x.shape[0], self.config.d_out)}"
            )
        _, cache = self.forward_cached(x)
        if self.config.normalize_embeddings:
            y_raw, norms = cache["y_raw"], cache["norms"]
            y_n = y_raw / norms
            # d(y/|y|) backprop: remove the radial component, divide by |y|
            grad_y = (grad_y - y_n * np.sum(grad_y * y_n, axis=1, keepdims=True)) / norms
        h, a1, z = cache["h"], cache["a1"], cache["z"]
        grads = {
            "w2": h.T @ grad_y,
            "b2": grad_y.sum(axis=0),
        }
        dh = grad_y @ self.params["w2"].T
        da1 = dh * (a1 > 0.0)
        grads["w1"] = z.T @ da1
        grads["b1"] = da1.sum(axis=0)
        return grads

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for k in self.params:
            self.params[k] = np.asarray(params[k], dtype=np.float64).copy()


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]
) -> None:
    """One bias-corrected Adam update, in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient in parameter block {name!r}")
    state.step += 1
    t = state.step
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        m_hat = state.m[name] / (1 - state.beta1**t)
        v_hat = state.v[name] / (1 - state.beta2**t)
        params[name] -= state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)


def finite_difference_grads(
    loss_fn, params: dict[str, np.ndarray], step: float = 1e-4
) -> dict[str, np.ndarray]:
    """Central finite differences of loss_fn over every parameter entry.

    loss_fn takes the params dict and returns a scalar; params are restored
    bit-exactly afterwards. Intended for small test models -- cost is two
    evaluations per scalar parameter.
    """
    grads = {}
    for name, value in params.items():
        g = np.zeros_like(value)
        flat = value.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn(params)
            flat[i] = orig - step
            down = loss_fn(params)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        grads[name] = g
    return grads


def max_relative_error(
    a: dict[str, np.ndarray], b: dict[str, np.ndarray], floor: float = 1e-3
) -> float:
    """Worst elementwise relative discrepancy between two gradient dicts.

    Entries where both sides are tiny are judged against `floor` so that
    finite-difference noise on genuinely-zero gradients does not divide by
    zero.
    """
    worst = 0.0
    for name in a:
        diff = np.abs(a[name] - b[name])
        denom = np.maximum(np.maximum(np.abs(a[name]), np.abs(b[name])), floor)
        worst = max(worst, float(np.max(diff / denom)) if diff.size else 0.0)
    return worst


# ---------------------------------------------------------------------------
# Checkpoints: npz blob with a format version + JSON sidecar for the config.
# ---------------------------------------------------------------------------


def save_checkpoint(
    path: Path | str,
    model: EncoderModel,
    adam: AdamState | None = None,
    meta: dict | None = None,
) -> None:
    path = Path(path)
    if path.suffix != ".npz":  # np.savez appends .npz itself; keep names paired
        path = path.with_suffix(".npz")
    arrays: dict[str, np.ndarray] = {
        "format_version": np.array([CHECKPOINT_FORMAT_VERSION]),
        "backbone": model.backbone,
    }
    for k, v in model.params.items():
        arrays[f"head_{k}"] = v
    if adam is not None:
        arrays["adam_scalars"] = np.array(
            [adam.lr, adam.beta1, adam.beta2, adam.epsilon, float(adam.step)]
        )
        for k in model.params:
            if k in adam.m:
                arrays[f"adam_m_{k}"] = adam.m[k]
                arrays[f"adam_v_{k}"] = adam.v[k]
    np.savez(path, **arrays)

    cfg = model.config
    sidecar = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "encoder": {
            "d_in": cfg.d_in,
            "d_mid": cfg.d_mid,
            "d_h1": cfg.d_h1,
            "d_out": cfg.d_out,
            "seed": cfg.seed,
            "normalize_embeddings": cfg.normalize_embeddings,
            "head_init_scale": cfg.head_init_scale,
        },
        "has_adam": adam is not None,
        "meta": meta or {},
    }
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: Path | str) -> tuple[EncoderModel, AdamState | None, dict]:
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    with open(path.with_suffix(".json")) as fh:
        sidecar = json.load(fh)
    version = sidecar.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r}")
    blob = np.load(path)
    cfg = EncoderConfig(**sidecar["encoder"])
    model = EncoderModel(cfg)
    stored_backbone = blob["backbone"]
    if stored_backbone.shape != model.backbone.shape:
        raise ValueError("checkpoint backbone shape does not match its config")
    model.backbone = stored_backbone
    model.backbone.setflags(write=False)
    model.set_params({k: blob[f"head_{k}"] for k in model.params})
    adam = None
    if sidecar.get("has_adam"):
        lr, b1, b2, eps, step = blob["adam_scalars"]
        adam = AdamState(lr=lr, beta1=b1, beta2=b2, epsilon=eps, step=int(step))
        for k in model.params:
            if f"adam_m_{k}" in blob:
                adam.m[k] = blob[f"adam_m_{k}"]
                adam.v[k] = blob[f"adam_v_{k}"]
    return model, adam, sidecar.get("meta", {})
