#!/usr/bin/env python3
"""Replay-rate sweep on a forgetting-prone hierarchy.

Trains one encoder per replay probability on a deep synthetic tree and
probes each, so the r_p = 0 column shows how much early-level structure is
lost without replay. Writes a CSV and prints the table.
"""

import argparse
import csv
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import hiertriplet as ht
from hiertriplet.cli import AblationPlan, run_ablation


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", default="forgetting")
    ap.add_argument("--synth-seed", type=int, default=7)
    ap.add_argument("--seed", type=int, default=1, help="base encoder/train seed")
    ap.add_argument(
        "--values", default="0.0,0.25,0.5,0.75,1.0",
        help="comma-separated replay probabilities",
    )
    ap.add_argument("--repeats", type=int, default=1)
    ap.add_argument("--out", default="runs/replay_sweep")
    args = ap.parse_args()

    values = tuple(float(v) for v in args.values.split(","))
    ds = ht.generate(ht.preset(args.preset, args.synth_seed))
    plan = AblationPlan(
        axis="replay",
        values=values,
        base_train=ht.TrainConfig(seed=args.seed),
        repeats=args.repeats,
    )
    rows = run_ablation(
        plan,
        dataset=ds,
        encoder_kwargs={"seed": args.seed},
        probe_kwargs={},
    )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "replay_sweep.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)

    print(f"{'r_p':>6} {'rep':>4} {'mAP':>8} {'mAP*':>8} {'rel mAP*':>9}  status")
    for r in rows:
        if r["status"] == "ok":
            print(
                f"{r['value']:>6} {r['repeat']:>4} {r['mAP']:>8.4f} "
                f"{r['mAP_star']:>8.4f} {r['relative_mAP_star']:>9.4f}  ok"
            )
        else:
            print(f"{r['value']:>6} {r['repeat']:>4} {'-':>8} {'-':>8} {'-':>9}  {r['status']}")
    print(f"wrote {csv_path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
