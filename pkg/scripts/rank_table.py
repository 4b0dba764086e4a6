"""Color-band ranking of accuracy/F1 matrices stored as matrix CSVs.

A matrix CSV has a header ``label,<col>,<col>,...`` and one labelled row per
model/setting. Lower column rank-sums are better.

    python scripts/rank_table.py results.csv [--out DIR]
"""
import argparse
from pathlib import Path

from cact.evaluation import rank_cells, read_matrix_csv, render_report


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("matrices", type=Path, nargs="+")
    parser.add_argument("--out", type=Path, help="also write the report bundle under this directory")
    args = parser.parse_args()
    for path in args.matrices:
        rows, cols, values = read_matrix_csv(path)
        table = rank_cells(values, rows, cols)
        print(f"== {path}")
        print(table.to_text("{:.3f}" if values.max() <= 1.0 else "{:.2f}"))
        if args.out:
            written = render_report(table, args.out / path.stem)
            print(f"wrote {', '.join(str(p) for p in written.values())}")


if __name__ == "__main__":
    main()
