"""Run the four ablation conditions at toy scale on synthetic pairs and print the table.

    python scripts/toy_ablation.py --steps 200 --out runs/toy_ablation

Each condition trains from the same seed on the same pairs; evaluation uses
separate synthetic test pairs at full canonical size.
"""

import argparse
import dataclasses
import logging
from pathlib import Path

from flash2ambient.data import synth_pairs
from flash2ambient.trainer import Ablation, RunConfig, format_ablation_table, run_ablation_matrix


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pairs", type=int, default=4)
    ap.add_argument("--test-pairs", type=int, default=4)
    ap.add_argument("--steps", type=int, default=200, help="steps per condition (batch size 1)")
    ap.add_argument("--crop", type=int, default=64)
    ap.add_argument("--width-divisor", type=int, default=4)
    ap.add_argument("--lr-generator", type=float, default=2e-5)
    ap.add_argument("--lr-discriminator", type=float, default=2e-6)
    ap.add_argument("--weights", help="pretrained encoder archive (random init when omitted)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--conditions", nargs="+", default=[a.value for a in Ablation], choices=[a.value for a in Ablation])
    ap.add_argument("--out", default="runs/toy_ablation")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    size = (args.crop + 16, args.crop + 16)
    train = synth_pairs(args.pairs, seed=args.seed, size=size)
    test = synth_pairs(args.test_pairs, seed=args.seed + 1000)
    if args.steps % args.pairs:
        raise SystemExit("--steps must be a multiple of --pairs (one step per pair per epoch)")
    base = RunConfig(
        epochs=args.steps // args.pairs,
        crop=args.crop,
        seed=args.seed,
        width_divisor=args.width_divisor,
        lr_generator=args.lr_generator,
        lr_discriminator=args.lr_discriminator,
        weights=args.weights,
        output_dir=args.out,
        checkpoint_every=0,
    )
    rows = run_ablation_matrix(base, [Ablation(c) for c in args.conditions], train, test)
    table = format_ablation_table(rows)
    print(table)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "ablation_table.txt").write_text(table + "\n")
    for r in rows:
        print(dataclasses.asdict(r))


if __name__ == "__main__":
    main()
