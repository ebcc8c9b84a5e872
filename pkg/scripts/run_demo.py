#!/usr/bin/env python3
"""End-to-end demo on a synthetic hierarchy.

Generates a dataset, pretrains the encoder head over the concept tree,
probes the trained encoder against an untrained baseline, and writes the
2-D projection with one SVG per label view. Artifacts land in --out.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import hiertriplet as ht


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", default="small", help="synthetic preset name")
    ap.add_argument("--synth-seed", type=int, default=7)
    ap.add_argument("--seed", type=int, default=1, help="encoder + training seed")
    ap.add_argument("--r-p", type=float, default=0.5, help="replay probability")
    ap.add_argument("--out", default="runs/demo", help="artifact directory")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    ds = ht.generate(ht.preset(args.preset, args.synth_seed))
    print(
        f"dataset: preset={args.preset} images={len(ds.records)} "
        f"d_in={ds.d_in} depth={ds.tree.depth} classes={len(ds.class_names)}"
    )

    pools = ht.pretraining_pools(ds.tree, ds.records)
    enc_cfg = ht.EncoderConfig(d_in=ds.d_in, seed=args.seed)
    model = ht.EncoderModel(enc_cfg)
    t0 = time.monotonic()
    result = ht.train(
        ds.tree, pools, ds.records, model, ht.TrainConfig(seed=args.seed, r_p=args.r_p)
    )
    steps = [r for r in result.log if not r.get("skipped")]
    print(
        f"trained levels {result.levels_trained} in {time.monotonic() - t0:.1f}s "
        f"({len(steps)} steps, final loss {steps[-1]['loss']:.4f})"
    )
    ht.save_checkpoint(out / "checkpoint.npz", model, adam=result.adam)
    ht.write_training_log(out / "training_log.jsonl", result.log)

    probe_cfg = ht.ProbeConfig(num_classes=len(ds.class_names))
    print(f"{'model':<12} {'mAP':>8} {'mAP*':>8} {'top-1':>8}")
    for name, enc in (("trained", model), ("untrained", ht.EncoderModel(enc_cfg))):
        probe = ht.train_probe(enc, ds.records, probe_cfg)
        report = ht.evaluate_probe(
            enc, probe, ds.records, probe_cfg,
            model_name=name, class_names=ds.class_names,
        )
        ht.write_report(out / f"probe_{name}.json", report)
        print(
            f"{name:<12} {report.map_score:>8.4f} {report.map_star:>8.4f} "
            f"{report.top1_accuracy:>8.4f}"
        )

    val_ids = ds.split_ids("probe_val")
    coords = ht.project(
        model.encode(ht.feature_matrix(ds.records, val_ids)), ht.ProjectionConfig()
    )["coords"]
    class_labels = {
        i: ds.class_names[r.probe_label]
        for i, r in ds.records.items()
        if r.probe_label is not None
    }
    written = ht.export_projection(
        coords, val_ids, ht.image_concept_labels(ds.tree, 1), class_labels, out
    )
    print(f"artifacts in {out}: " + ", ".join(p.name for p in written.values()))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
