"""Analytic extractor vs. aggregation cost for cached sliding-window grading.

    python scripts/cost_report.py [--config run.json] [--image 1792] [--strides 1 2 4 8]
"""
import argparse

from cact.config import RunConfig
from cact.context_net import ContextModel
from cact.inference import cost_report


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", help="JSON run config (defaults otherwise)")
    parser.add_argument("--image", type=int, help="square image side in pixels (default: config image_size)")
    parser.add_argument("--strides", type=int, nargs="*", default=[], help="extra stride values to sweep")
    args = parser.parse_args()

    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    side = args.image or cfg.image_size
    model = ContextModel(cfg.architecture())
    report = cost_report((side, side), cfg.patch_size, cfg.window_cells, cfg.stride_cells, model)
    print(f"image {side}x{side}, patch {cfg.patch_size}, window {cfg.window_cells} cells, "
          f"stride {cfg.stride_cells}, block {cfg.block_kind}")
    print("\n".join(report.lines()))
    if args.strides:
        print(f"\n{'stride':>6}  {'windows':>7}  {'overhead':>8}")
        for stride in args.strides:
            r = cost_report((side, side), cfg.patch_size, cfg.window_cells, stride, model)
            print(f"{stride:>6}  {r.n_windows:>7}  {r.overhead_ratio:>8.4f}")


if __name__ == "__main__":
    main()
