"""Command-line pipeline wiring the library end to end.

One config file (TOML or JSON) drives every subcommand, with dotted
``--set section.key=value`` overrides on top. The effective config and its
sha256 hash are embedded in every artifact a command writes, so any result
file can be traced back to the exact settings that produced it. Artifacts
never embed filesystem paths or timestamps: identical settings produce
byte-identical outputs wherever they run.

Exit codes: 0 success, 1 runtime failure, 2 config or usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import shutil
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from . import __version__
from .contrastive import NonFiniteLossError, TrainConfig, train, write_training_log
from .hierarchy import (
    Dataset,
    ManifestError,
    build_tree,
    feature_matrix,
    image_concept_labels,
    load_dataset,
    pretraining_pools,
    read_features_bin,
    read_features_csv,
    save_dataset,
    write_features_bin,
    write_features_csv,
    write_manifest,
)
from .numerics import EncoderConfig, EncoderModel, load_checkpoint, save_checkpoint
from .probe import ProbeConfig, evaluate_probe, train_probe, write_report
from .synth import PRESETS, SynthSpec, generate, preset
from .viz import ProjectionConfig, export_projection, project

OUT_ENV = "HIERTRIPLET_OUT"


class UsageError(Exception):
    """Bad flags, bad config values, malformed user input. Exit code 2."""


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _load_config_file(path: str) -> tuple[dict, str]:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    try:
        if p.suffix == ".toml":
            return tomllib.loads(text), text
        if p.suffix == ".json":
            return json.loads(text), text
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise UsageError(f"config {path} failed to parse: {exc}") from None
    raise UsageError(f"config {path} must be .toml or .json")


def _apply_override(data: dict, item: str) -> None:
    if "=" not in item:
        raise UsageError(f"--set expects section.key=value, got {item!r}")
    dotted, raw = item.split("=", 1)
    keys = dotted.split(".")
    if len(keys) < 2:
        # a dotless key would land outside every config section and be
        # silently ignored; refuse instead
        raise UsageError(f"--set expects section.key=value, got {item!r}")
    if not all(keys):
        raise UsageError(f"--set has an empty key segment: {item!r}")
    cursor = data
    for key in keys[:-1]:
        nxt = cursor.setdefault(key, {})
        if not isinstance(nxt, dict):
            raise UsageError(f"--set {dotted}: {key!r} is not a section")
        cursor = nxt
    cursor[keys[-1]] = _coerce(raw)


@dataclass
class Ctx:
    """Parsed config file plus overrides, shared by every subcommand."""

    data: dict
    text: str | None
    overrides: list[str]

    def section(self, name: str) -> dict:
        sec = self.data.get(name, {})
        if not isinstance(sec, dict):
            raise UsageError(f"config section [{name}] must be a table")
        return dict(sec)


def _load_ctx(args: argparse.Namespace) -> Ctx:
    data: dict = {}
    text = None
    if getattr(args, "config", None):
        data, text = _load_config_file(args.config)
    overrides = list(getattr(args, "overrides", []) or [])
    for item in overrides:
        _apply_override(data, item)
    return Ctx(data=data, text=text, overrides=overrides)


def _build(cls, section: dict, name: str, **fixed):
    """Construct and validate a config dataclass, mapping any complaint to a
    usage error that names the config section."""
    kwargs = {
        k: tuple(v) if isinstance(v, list) else v for k, v in section.items()
    }
    kwargs.update(fixed)
    try:
        obj = cls(**kwargs)
        obj.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"[{name}] {exc}") from None
    return obj


def _config_doc(sections: dict, data_desc: dict | None) -> dict:
    doc = {
        name: asdict(obj) if not isinstance(obj, dict) else obj
        for name, obj in sections.items()
    }
    if data_desc is not None:
        doc["data"] = data_desc
    return doc


def _config_hash(doc: dict) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _meta_block(command: str, ctx: Ctx, sections: dict, data_desc: dict | None) -> dict:
    doc = _config_doc(sections, data_desc)
    return {
        "command": command,
        "tool_version": __version__,
        "config": doc,
        "config_sha256": _config_hash(doc),
        "config_file": ctx.text,
        "overrides": ctx.overrides,
    }


def _write_json(path: Path, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _out_dir(args: argparse.Namespace) -> Path:
    target = getattr(args, "out", None) or os.environ.get(OUT_ENV)
    if not target:
        raise UsageError(f"no output directory: pass --out or set {OUT_ENV}")
    p = Path(target)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_data(args: argparse.Namespace, ctx: Ctx) -> tuple[Dataset, dict]:
    """Resolve the data source: an on-disk manifest, a named preset, or a
    full [synth] config section. Returns the dataset plus a path-free
    descriptor for artifact embedding."""
    manifest = getattr(args, "manifest", None)
    preset_name = getattr(args, "preset", None)
    if manifest:
        ds = load_dataset(manifest)
        digest = hashlib.sha256(Path(manifest).read_bytes()).hexdigest()
        return ds, {"manifest_sha256": digest}
    if preset_name:
        spec = _preset_spec(preset_name, getattr(args, "synth_seed", None))
        return generate(spec), {"preset": preset_name, "synth": asdict(spec)}
    synth_sec = ctx.section("synth")
    if synth_sec:
        spec = _synth_spec_from_section(synth_sec, getattr(args, "synth_seed", None))
        return generate(spec), {"synth": asdict(spec)}
    raise UsageError("no data source: pass --manifest or --preset, or add [synth]")


def _preset_spec(name: str, seed: int | None) -> SynthSpec:
    try:
        return preset(name, seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _synth_spec_from_section(section: dict, seed_flag: int | None) -> SynthSpec:
    if "preset" in section:
        name = section.pop("preset")
        base = _preset_spec(name, seed_flag)
        if not section:
            return base
        merged = {**asdict(base), **section}
        return _build(SynthSpec, merged, "synth")
    if seed_flag is not None:
        section = {**section, "seed": seed_flag}
    return _build(SynthSpec, section, "synth")


def _encoder_config(ctx: Ctx, d_in: int) -> EncoderConfig:
    sec = ctx.section("encoder")
    if "d_in" in sec:
        raise UsageError("[encoder] d_in is derived from the data, do not set it")
    return _build(EncoderConfig, sec, "encoder", d_in=d_in)


def _train_config(ctx: Ctx) -> TrainConfig:
    return _build(TrainConfig, ctx.section("train"), "train")


def _probe_config(ctx: Ctx, dataset: Dataset) -> ProbeConfig:
    sec = ctx.section("probe")
    if "num_classes" in sec:
        raise UsageError("[probe] num_classes is derived from the data, do not set it")
    if not dataset.class_names:
        raise UsageError("dataset has no class labels, cannot probe")
    return _build(ProbeConfig, sec, "probe", num_classes=len(dataset.class_names))


def _viz_config(ctx: Ctx) -> ProjectionConfig:
    return _build(ProjectionConfig, ctx.section("viz"), "viz")


def _load_model(args: argparse.Namespace, ctx: Ctx, dataset: Dataset) -> tuple[EncoderModel, str]:
    """Encoder from a checkpoint, or a freshly initialized one when the run
    wants the no-pretraining baseline."""
    ckpt = getattr(args, "checkpoint", None)
    if ckpt:
        model, _, _ = load_checkpoint(ckpt)
        return model, Path(ckpt).stem
    if getattr(args, "untrained", False):
        return EncoderModel(_encoder_config(ctx, dataset.d_in)), "untrained"
    raise UsageError("pass --checkpoint PATH or --untrained")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace, ctx: Ctx) -> int:
    if args.preset:
        spec = _preset_spec(args.preset, args.synth_seed)
    else:
        sec = ctx.section("synth")
        if not sec:
            raise UsageError("pass --preset or provide a [synth] config section")
        spec = _synth_spec_from_section(sec, args.synth_seed)
    ds = generate(spec)
    out = _out_dir(args)
    manifest_path = save_dataset(ds, out)
    meta = _meta_block("synth", ctx, {"synth": spec}, None)
    _write_json(out / "synth_meta.json", meta)
    n_images = len(ds.records)
    print(f"synth: {n_images} images, {len(ds.tree.nodes)} nodes -> {manifest_path}")
    return 0


def cmd_ingest(args: argparse.Namespace, ctx: Ctx) -> int:
    root = Path(args.root)
    if not root.is_dir():
        raise UsageError(f"--root {args.root} is not a directory")
    out = _out_dir(args)
    root_name = args.name or root.name

    raw_nodes: list[dict] = []
    image_paths: dict[str, Path] = {}
    for dirpath in sorted([root, *root.rglob("*")]):
        if not dirpath.is_dir() or any(part.startswith(".") for part in dirpath.parts):
            continue
        rel = dirpath.relative_to(root).as_posix()
        node_id = root_name if rel == "." else f"{root_name}/{rel}"
        parent = None
        if rel != ".":
            up = dirpath.parent.relative_to(root).as_posix()
            parent = root_name if up == "." else f"{root_name}/{up}"
        images = []
        for f in sorted(dirpath.iterdir()):
            if f.is_file() and not f.name.startswith("."):
                img_id = f"{node_id}/{f.name}"
                images.append(img_id)
                image_paths[img_id] = f
        raw_nodes.append(
            {"id": node_id, "name": dirpath.name, "parent": parent, "images": images}
        )
    tree = build_tree(raw_nodes)
    ids = sorted(image_paths)
    if not ids:
        raise ManifestError(f"no image files found under {root}")

    if args.features:
        features_meta = _ingest_sidecar_features(Path(args.features), ids, out)
    else:
        features_meta = _ingest_parse_features(image_paths, ids, out)

    labels = _read_mapping(args.labels, "labels") if args.labels else None
    splits = _read_mapping(args.splits, "splits") if args.splits else None
    manifest_path = out / "manifest.json"
    write_manifest(manifest_path, tree, features_meta, labels=labels, splits=splits)
    ds = load_dataset(manifest_path)

    meta = _meta_block("ingest", ctx, {"ingest": {"root_name": root_name}}, None)
    _write_json(out / "ingest_meta.json", meta)
    print(
        f"ingest: {len(ds.records)} images, {len(tree.nodes)} nodes, "
        f"depth {tree.depth} -> {manifest_path}"
    )
    return 0


def _read_mapping(path: str, what: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read {what} file {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{what} file {path} must be a JSON object")
    return doc


def _ingest_sidecar_features(src: Path, ids: list[str], out: Path) -> dict:
    if not src.exists():
        raise UsageError(f"--features {src} does not exist")
    if src.suffix == ".bin":
        n_rows, dim, _ = read_features_bin(src)
        if n_rows != len(ids):
            raise ManifestError(
                f"feature file {src} has {n_rows} rows for {len(ids)} images"
            )
        dest = out / "features.bin"
        if src.resolve() != dest.resolve():
            shutil.copyfile(src, dest)
        return {"path": "features.bin", "dim": dim, "format": "bin"}
    if src.suffix == ".csv":
        table = read_features_csv(src)
        missing = [i for i in ids if i not in table]
        if missing:
            raise ManifestError(f"feature file {src} missing image {missing[0]!r}")
        dim = int(table[ids[0]].shape[0])
        dest = out / "features.csv"
        if src.resolve() != dest.resolve():
            shutil.copyfile(src, dest)
        return {"path": "features.csv", "dim": dim, "format": "csv"}
    raise UsageError(f"--features {src} must be .bin or .csv")


def _ingest_parse_features(
    image_paths: dict[str, Path], ids: list[str], out: Path
) -> dict:
    """No sidecar file: each image file itself must hold one whitespace or
    comma separated float vector."""
    rows = []
    dim = None
    for img in ids:
        text = image_paths[img].read_text()
        try:
            vec = [float(v) for v in text.replace(",", " ").split()]
        except ValueError:
            raise ManifestError(
                f"file {image_paths[img]} is not a parseable feature vector; "
                f"pass --features instead"
            ) from None
        if not vec:
            raise ManifestError(f"file {image_paths[img]} holds no values")
        if dim is None:
            dim = len(vec)
        elif len(vec) != dim:
            raise ManifestError(
                f"file {image_paths[img]} has dimension {len(vec)}, expected {dim}"
            )
        rows.append(vec)
    X = np.array(rows, dtype=np.float64)
    write_features_bin(out / "features.bin", ids, X)
    return {"path": "features.bin", "dim": int(dim), "format": "bin"}


def cmd_train(args: argparse.Namespace, ctx: Ctx) -> int:
    ds, data_desc = _load_data(args, ctx)
    encoder_cfg = _encoder_config(ctx, ds.d_in)
    train_cfg = _train_config(ctx)
    out = _out_dir(args)

    model = EncoderModel(encoder_cfg)
    pools = pretraining_pools(ds.tree, ds.records, owned_only=args.owned_only_pools)
    sections = {
        "encoder": encoder_cfg,
        "train": train_cfg,
        "pools": {"owned_only": bool(args.owned_only_pools)},
    }
    meta = _meta_block("train", ctx, sections, data_desc)

    try:
        result = train(ds.tree, pools, ds.records, model, train_cfg)
    except NonFiniteLossError as exc:
        # keep the evidence: parameters from just before the bad step
        model.set_params(exc.last_good_params)
        save_checkpoint(
            out / "checkpoint_lastgood.npz", model, exc.last_good_adam, meta=meta
        )
        write_training_log(out / "training_log.jsonl", exc.log)
        raise

    ckpt = out / "checkpoint.npz"
    save_checkpoint(ckpt, model, result.adam, meta=meta)
    write_training_log(out / "training_log.jsonl", result.log)
    losses = [rec["loss"] for rec in result.log if "loss" in rec]
    _write_json(
        out / "train_meta.json",
        {
            **meta,
            "levels_trained": result.levels_trained,
            "steps_logged": len(result.log),
            "final_loss": losses[-1] if losses else None,
        },
    )
    print(
        f"train: levels {result.levels_trained}, {len(result.log)} records -> {ckpt}"
    )
    return 0


def cmd_probe(args: argparse.Namespace, ctx: Ctx) -> int:
    ds, data_desc = _load_data(args, ctx)
    model, model_name = _load_model(args, ctx, ds)
    probe_cfg = _probe_config(ctx, ds)
    out = _out_dir(args)

    probe = train_probe(model, ds.records, probe_cfg)
    report = evaluate_probe(
        model,
        probe,
        ds.records,
        probe_cfg,
        model_name=args.model_name or model_name,
        class_names=ds.class_names,
    )
    sections = {"probe": probe_cfg, "encoder": model.config}
    meta = _meta_block("probe", ctx, sections, data_desc)
    report_path = out / "probe_report.json"
    write_report(report_path, report, extra=meta)
    print(
        f"probe: mAP {report.map_score:.4f} mAP* {report.map_star:.4f} "
        f"top-1 {report.top1_accuracy:.4f} -> {report_path}"
    )
    return 0


def cmd_embed(args: argparse.Namespace, ctx: Ctx) -> int:
    ds, data_desc = _load_data(args, ctx)
    model, _ = _load_model(args, ctx, ds)
    out = _out_dir(args)

    if args.split == "all":
        ids = list(ds.tree.image_ids())
    else:
        ids = ds.split_ids(args.split)
    if not ids:
        raise ValueError(f"no images in split {args.split!r}")
    E = model.encode(feature_matrix(ds.records, ids))

    if args.format == "csv":
        path = out / "embeddings.csv"
        write_features_csv(path, ids, E)
    else:
        path = out / "embeddings.bin"
        write_features_bin(path, ids, E)
    meta = _meta_block("embed", ctx, {"encoder": model.config}, data_desc)
    _write_json(out / "embed_meta.json", {**meta, "split": args.split, "rows": len(ids)})
    print(f"embed: {len(ids)} rows, dim {E.shape[1]} -> {path}")
    return 0


def cmd_viz(args: argparse.Namespace, ctx: Ctx) -> int:
    ds, data_desc = _load_data(args, ctx)
    model, _ = _load_model(args, ctx, ds)
    viz_cfg = _viz_config(ctx)
    out = _out_dir(args)

    ids = list(ds.tree.image_ids()) if args.split == "all" else ds.split_ids(args.split)
    if not ids:
        raise ValueError(f"no images in split {args.split!r}; try --split all")
    if viz_cfg.tsne_perplexity >= (len(ids) - 1) / 3.0:
        raise UsageError(
            f"[viz] perplexity {viz_cfg.tsne_perplexity} too large for {len(ids)} "
            f"points; needs perplexity < (n-1)/3"
        )

    E = model.encode(feature_matrix(ds.records, ids))
    result = project(E, viz_cfg)
    level1 = image_concept_labels(ds.tree, 1)
    class_labels = {
        img: ds.class_names[ds.records[img].probe_label]
        for img in ids
        if ds.records[img].probe_label is not None
    }
    written = export_projection(result["coords"], ids, level1, class_labels, out)

    meta = _meta_block("viz", ctx, {"viz": viz_cfg, "encoder": model.config}, data_desc)
    _write_json(
        out / "projection_meta.json",
        {
            **meta,
            "split": args.split,
            "rows": len(ids),
            "pca_dim": result.get("pca_dim"),
            "explained_variance_ratio": [
                float(v) for v in result.get("explained_variance_ratio", [])
            ],
            "kl_trace": [[int(i), float(k)] for i, k in result["kl_trace"]],
        },
    )
    print(f"viz: {len(ids)} points, final KL {result['final_kl']:.4f} -> {written['csv']}")
    return 0


# ---------------------------------------------------------------------------
# Ablation harness
# ---------------------------------------------------------------------------

ABLATION_AXES = ("hierarchy_level", "dataset_size", "replay")


@dataclass(frozen=True)
class AblationPlan:
    """One swept axis; everything else held fixed.

    Axis values: hierarchy_level takes h_max integers with 0 meaning no
    contrastive pretraining at all; dataset_size takes preset names; replay
    takes r_p floats. Repeat k re-runs every value with all seeds shifted by
    k * seed_stride, so repeats are genuinely different runs.
    """

    axis: str
    values: tuple
    base_train: TrainConfig
    repeats: int = 1
    seed_stride: int = 1

    def validate(self) -> None:
        if self.axis not in ABLATION_AXES:
            raise ValueError(f"axis must be one of {ABLATION_AXES}, got {self.axis!r}")
        if not self.values:
            raise ValueError("values must be non-empty")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.axis == "replay":
            bad = [v for v in self.values if not 0.0 <= float(v) <= 1.0]
            if bad:
                raise ValueError(f"replay values outside [0, 1]: {bad}")
        elif self.axis == "hierarchy_level":
            bad = [v for v in self.values if int(v) != v or int(v) < 0]
            if bad:
                raise ValueError(f"hierarchy levels must be integers >= 0: {bad}")
        else:
            bad = [v for v in self.values if v not in PRESETS]
            if bad:
                raise ValueError(f"unknown presets: {bad}; have {sorted(PRESETS)}")


def _pretrain_and_probe(
    ds: Dataset,
    encoder_kwargs: dict,
    train_cfg: TrainConfig | None,
    probe_kwargs: dict,
    *,
    model_name: str,
):
    """One full run: fresh encoder, optional contrastive pretraining, then
    the linear probe. train_cfg None means the untrained baseline."""
    model = EncoderModel(_build(EncoderConfig, encoder_kwargs, "encoder", d_in=ds.d_in))
    if train_cfg is not None:
        pools = pretraining_pools(ds.tree, ds.records)
        train(ds.tree, pools, ds.records, model, train_cfg)
    if not ds.class_names:
        raise ValueError("dataset has no class labels, cannot probe")
    probe_cfg = _build(
        ProbeConfig, probe_kwargs, "probe", num_classes=len(ds.class_names)
    )
    probe = train_probe(model, ds.records, probe_cfg)
    return evaluate_probe(
        model,
        probe,
        ds.records,
        probe_cfg,
        model_name=model_name,
        class_names=ds.class_names,
    )


def run_ablation(
    plan: AblationPlan,
    *,
    dataset: Dataset | None,
    encoder_kwargs: dict,
    probe_kwargs: dict,
    synth_seed: int | None = None,
) -> list[dict]:
    """Run the sweep and return one row per (value, repeat).

    A failed sub-run is recorded with its error message and the sweep keeps
    going. Relative mAP* is regression from the best run: (best - this)/best,
    so the best row is exactly 0 and worse rows grow toward 1.
    """
    plan.validate()
    if plan.axis != "dataset_size" and dataset is None:
        raise ValueError(f"axis {plan.axis!r} needs a dataset")

    rows: list[dict] = []
    for value in plan.values:
        for rep in range(plan.repeats):
            shift = rep * plan.seed_stride
            train_cfg: TrainConfig | None = replace(
                plan.base_train, seed=plan.base_train.seed + shift
            )
            enc_kwargs = dict(encoder_kwargs)
            enc_kwargs["seed"] = int(enc_kwargs.get("seed", 0)) + shift
            prb_kwargs = dict(probe_kwargs)
            prb_kwargs["seed"] = int(prb_kwargs.get("seed", 0)) + shift

            ds = dataset
            if plan.axis == "replay":
                train_cfg = replace(train_cfg, r_p=float(value))
            elif plan.axis == "hierarchy_level":
                train_cfg = None if int(value) == 0 else replace(train_cfg, h_max=int(value))
            else:
                ds = generate(preset(str(value), synth_seed))

            row = {
                "axis": plan.axis,
                "value": value,
                "repeat": rep,
                "seed": plan.base_train.seed + shift,
                "mAP": None,
                "mAP_star": None,
                "relative_mAP_star": None,
                "status": "ok",
            }
            try:
                report = _pretrain_and_probe(
                    ds,
                    enc_kwargs,
                    train_cfg,
                    prb_kwargs,
                    model_name=f"{plan.axis}={value}",
                )
                row["mAP"] = report.map_score
                row["mAP_star"] = report.map_star
            except Exception as exc:
                row["status"] = "error: " + str(exc).replace("\n", "; ")
            rows.append(row)

    ok = [r for r in rows if r["status"] == "ok"]
    if ok:
        best = max(r["mAP_star"] for r in ok)
        for r in ok:
            r["relative_mAP_star"] = (best - r["mAP_star"]) / best if best > 0 else 0.0
    return rows


def _write_ablation_csv(path: Path, rows: list[dict], config_hash: str) -> None:
    fields = [
        "axis", "value", "repeat", "seed",
        "mAP", "mAP_star", "relative_mAP_star", "status", "config_sha256",
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for r in rows:
            writer.writerow(
                [
                    r["axis"],
                    r["value"],
                    r["repeat"],
                    r["seed"],
                    "" if r["mAP"] is None else repr(r["mAP"]),
                    "" if r["mAP_star"] is None else repr(r["mAP_star"]),
                    "" if r["relative_mAP_star"] is None else repr(r["relative_mAP_star"]),
                    r["status"],
                    config_hash,
                ]
            )


def cmd_ablate(args: argparse.Namespace, ctx: Ctx) -> int:
    sec = ctx.section("ablate")
    axis = args.axis or sec.get("axis")
    if not axis:
        raise UsageError("pass --axis or set [ablate] axis")
    if args.values:
        values = tuple(_coerce(v) for v in args.values.split(","))
    elif "values" in sec:
        values = tuple(sec["values"])
    else:
        raise UsageError("pass --values or set [ablate] values")
    repeats = args.repeats if args.repeats is not None else int(sec.get("repeats", 1))
    seed_stride = int(sec.get("seed_stride", 1))

    train_cfg = _train_config(ctx)
    plan = AblationPlan(
        axis=axis,
        values=values,
        base_train=train_cfg,
        repeats=repeats,
        seed_stride=seed_stride,
    )
    try:
        plan.validate()
    except ValueError as exc:
        raise UsageError(f"[ablate] {exc}") from None

    dataset = None
    data_desc: dict | None = None
    if axis != "dataset_size":
        dataset, data_desc = _load_data(args, ctx)
    out = _out_dir(args)

    encoder_kwargs = ctx.section("encoder")
    if "d_in" in encoder_kwargs:
        raise UsageError("[encoder] d_in is derived from the data, do not set it")
    probe_kwargs = ctx.section("probe")
    if "num_classes" in probe_kwargs:
        raise UsageError("[probe] num_classes is derived from the data, do not set it")

    rows = run_ablation(
        plan,
        dataset=dataset,
        encoder_kwargs=encoder_kwargs,
        probe_kwargs=probe_kwargs,
        synth_seed=getattr(args, "synth_seed", None),
    )

    sections = {
        "train": train_cfg,
        "encoder": encoder_kwargs,
        "probe": probe_kwargs,
        "ablate": {
            "axis": axis,
            "values": list(values),
            "repeats": repeats,
            "seed_stride": seed_stride,
        },
    }
    meta = _meta_block("ablate", ctx, sections, data_desc)
    csv_path = out / "ablation.csv"
    _write_ablation_csv(csv_path, rows, meta["config_sha256"])
    svg_path = out / "ablation.svg"
    svg_path.write_text(_line_plot_svg(f"mAP* by {axis}", rows))
    _write_json(out / "ablation_meta.json", {**meta, "rows": rows})

    n_ok = sum(1 for r in rows if r["status"] == "ok")
    print(f"ablate: {n_ok}/{len(rows)} runs ok -> {csv_path}")
    return 0 if n_ok == len(rows) else 1


def _line_plot_svg(title: str, rows: list[dict], width: int = 560, height: int = 360) -> str:
    """Mean mAP* per axis value as a polyline, individual runs as dots."""
    pad = 56
    values: list = []
    for r in rows:
        if r["value"] not in values:
            values.append(r["value"])
    by_value: dict = {v: [] for v in values}
    for r in rows:
        if r["status"] == "ok":
            by_value[r["value"]].append(float(r["mAP_star"]))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
    ]
    all_y = [y for ys in by_value.values() for y in ys]
    if not all_y:
        parts.append(
            f'<text x="{width / 2:.0f}" y="{height / 2:.0f}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="12">no successful runs</text></svg>'
        )
        return "\n".join(parts)

    lo, hi = min(all_y), max(all_y)
    span = (hi - lo) or 1.0
    lo -= 0.05 * span
    hi += 0.05 * span
    span = hi - lo

    def sx(i: int) -> float:
        if len(values) == 1:
            return width / 2
        return pad + i * (width - 2 * pad) / (len(values) - 1)

    def sy(y: float) -> float:
        return height - pad - (y - lo) / span * (height - 2 * pad)

    for frac in (0.0, 0.5, 1.0):
        y_val = lo + frac * span
        yy = sy(y_val)
        parts.append(
            f'<line x1="{pad}" y1="{yy:.2f}" x2="{width - pad}" y2="{yy:.2f}" '
            f'stroke="#dddddd"/>'
        )
        parts.append(
            f'<text x="{pad - 6}" y="{yy + 4:.2f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="10">{y_val:.3f}</text>'
        )

    line_pts = []
    for i, v in enumerate(values):
        ys = by_value[v]
        for y in ys:
            parts.append(
                f'<circle cx="{sx(i):.2f}" cy="{sy(y):.2f}" r="3" fill="#4e79a7" '
                f'fill-opacity="0.6"/>'
            )
        if ys:
            line_pts.append(f"{sx(i):.2f},{sy(sum(ys) / len(ys)):.2f}")
        parts.append(
            f'<text x="{sx(i):.2f}" y="{height - pad + 16}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="10">{v}</text>'
        )
    if len(line_pts) > 1:
        parts.append(
            f'<polyline points="{" ".join(line_pts)}" fill="none" stroke="#4e79a7" '
            f'stroke-width="2"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts)


# ---------------------------------------------------------------------------
# Report merging
# ---------------------------------------------------------------------------


def _format_cell(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _format_table(header: list[str], rows: list[list]) -> str:
    cells = [[_format_cell(v) for v in row] for row in rows]
    widths = [
        max(len(header[i]), *(len(r[i]) for r in cells)) if cells else len(header[i])
        for i in range(len(header))
    ]
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(header)),
        "  ".join("-" * w for w in widths),
    ]
    for r in cells:
        lines.append("  ".join(r[i].ljust(widths[i]) for i in range(len(header))))
    return "\n".join(lines) + "\n"


def cmd_report(args: argparse.Namespace, ctx: Ctx) -> int:
    docs: list[tuple[str, dict]] = []
    for p in args.reports:
        try:
            doc = json.loads(Path(p).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read report {p}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"report {p} is not valid JSON: {exc}") from None
        docs.append((Path(p).stem, doc))

    class_cols = sorted({c for _, d in docs for c in (d.get("per_class") or {})})
    header = ["run", "model", "mAP", "mAP*", "top-1"] + class_cols
    rows = []
    for stem, doc in docs:
        per_class = doc.get("per_class") or {}
        rows.append(
            [
                stem,
                doc.get("model_name", "-"),
                doc.get("mAP"),
                doc.get("mAP_star"),
                doc.get("top1_accuracy"),
            ]
            + [per_class.get(c) for c in class_cols]
        )
    text = _format_table(header, rows)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
        print(f"report: {len(rows)} runs -> {args.out}")
    else:
        print(text, end="")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for r in rows:
                writer.writerow(["" if v is None else v for v in r])
    return 0


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------


def _add_common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", help="TOML or JSON config file")
    sp.add_argument(
        "--set",
        action="append",
        dest="overrides",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable)",
    )
    sp.add_argument("--out", help=f"output directory (default ${OUT_ENV})")


def _add_data(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--manifest", help="manifest.json of an ingested dataset")
    sp.add_argument("--preset", help=f"synthetic preset: {', '.join(sorted(PRESETS))}")
    sp.add_argument("--synth-seed", type=int, help="seed for synthetic generation")


def _add_model(sp: argparse.ArgumentParser) -> None:
    group = sp.add_mutually_exclusive_group()
    group.add_argument("--checkpoint", help="encoder checkpoint (.npz)")
    group.add_argument(
        "--untrained",
        action="store_true",
        help="use a freshly initialized encoder (no-pretraining baseline)",
    )


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hiertriplet",
        description="hierarchy-aware contrastive embedding pipeline",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(sp)
    sp.add_argument("--preset", help=f"one of: {', '.join(sorted(PRESETS))}")
    sp.add_argument("--synth-seed", type=int, help="override the generation seed")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("ingest", help="build a manifest from a directory tree")
    _add_common(sp)
    sp.add_argument("--root", required=True, help="directory whose layout is the tree")
    sp.add_argument("--features", help="sidecar feature file (.bin or .csv)")
    sp.add_argument("--labels", help="JSON file mapping image_id to class")
    sp.add_argument("--splits", help="JSON file mapping image_id to split")
    sp.add_argument("--name", help="root node id (default: directory name)")
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("train", help="contrastive pretraining over the hierarchy")
    _add_common(sp)
    _add_data(sp)
    sp.add_argument(
        "--owned-only-pools",
        action="store_true",
        help="disable descendant pooling (collapse-prone configuration)",
    )
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("probe", help="linear probe evaluation of an encoder")
    _add_common(sp)
    _add_data(sp)
    _add_model(sp)
    sp.add_argument("--model-name", help="name recorded in the report")
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("embed", help="write embeddings for a split")
    _add_common(sp)
    _add_data(sp)
    _add_model(sp)
    sp.add_argument(
        "--split",
        default="all",
        choices=["all", "pretrain", "probe_train", "probe_val"],
    )
    sp.add_argument("--format", default="csv", choices=["csv", "bin"])
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("viz", help="PCA + t-SNE projection with SVG scatters")
    _add_common(sp)
    _add_data(sp)
    _add_model(sp)
    sp.add_argument(
        "--split",
        default="probe_val",
        choices=["all", "pretrain", "probe_train", "probe_val"],
    )
    sp.set_defaults(func=cmd_viz)

    sp = sub.add_parser("ablate", help="sweep one axis, probe every run")
    _add_common(sp)
    _add_data(sp)
    sp.add_argument("--axis", choices=list(ABLATION_AXES))
    sp.add_argument("--values", help="comma-separated axis values")
    sp.add_argument("--repeats", type=int)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("report", help="merge probe reports into one table")
    _add_common(sp)
    sp.add_argument("reports", nargs="+", help="probe_report.json files")
    sp.add_argument("--csv", help="also write the table as CSV")
    sp.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        return code if isinstance(code, int) else (0 if code is None else 2)
    try:
        ctx = _load_ctx(args)
        return args.func(args, ctx)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
