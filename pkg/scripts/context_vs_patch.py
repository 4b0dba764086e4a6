"""Context-aware grader vs. patch-only vote on synthetic datasets, one row per data seed.

    python scripts/context_vs_patch.py --seeds 7 11 13 --workdir runs/compare
"""
import argparse
import csv
import dataclasses
import logging
from pathlib import Path

from cact.experiment import ComparisonConfig, compare, summary_rows


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--seeds", type=int, nargs="+", default=[7, 11, 13])
    parser.add_argument("--workdir", type=Path, default=Path("runs/compare"))
    parser.add_argument("--block", default="B1", choices=["B1", "B2", "B3"])
    parser.add_argument("--epochs", type=int, default=ComparisonConfig.epochs)
    parser.add_argument("--finetune", action="store_true", help="train the extractor jointly (slower)")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    config = dataclasses.replace(ComparisonConfig(), block_kind=args.block, epochs=args.epochs,
                                 finetune_extractor=args.finetune)
    args.workdir.mkdir(parents=True, exist_ok=True)
    rows = summary_rows(compare(seed, args.workdir, config) for seed in args.seeds)
    out = args.workdir / "comparison.csv"
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    print(f"{'seed':>4}  {'context':>7}  {'patch':>6}  {'gap':>5}  {'sec':>5}")
    for r in rows:
        print(f"{r['data_seed']:>4}  {r['context_accuracy']:>7.1%}  {r['patch_accuracy']:>6.1%}  "
              f"{100 * r['gap']:>4.0f}pt  {r['seconds']:>5.0f}")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
