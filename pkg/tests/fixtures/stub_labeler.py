"""
Stub depth labeler used by the curation tests.

Usage: stub_labeler.py LIST_PATH OUTPUT_DIR [--depth D] [--fail-on ID ...]
                       [--exit-code N] [--fail-once MARKER]

Reads "id<TAB>image_path" lines and writes OUTPUT_DIR/<id>.pfm. An image with
a sibling "<image>.depth.pfm" gets that canned file copied; otherwise a 4 x 8
constant map of depth D is written.
"""

import argparse
import shutil
import sys
from pathlib import Path

import numpy as np


def write_constant_pfm(path: Path, depth: float, width: int = 8, height: int = 4) -> None:
    values = np.full((height, width), depth, dtype="<f4")
    path.write_bytes(f"Pf\n{width} {height}\n-1.0\n".encode("ascii") + values.tobytes())


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("list_path")
    parser.add_argument("output_dir")
    parser.add_argument("--depth", type=float, default=2.0)
    parser.add_argument("--fail-on", action="append", default=[])
    parser.add_argument("--exit-code", type=int, default=0)
    parser.add_argument("--fail-once", default=None)
    args = parser.parse_args()

    if args.fail_once:
        marker = Path(args.fail_once)
        if not marker.exists():
            marker.write_text("failed once\n")
            print("transient labeler failure", file=sys.stderr)
            return 3

    if args.exit_code:
        print("labeler crashed", file=sys.stderr)
        return args.exit_code

    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for line in Path(args.list_path).read_text().splitlines():
        if not line.strip():
            continue
        record_id, image_path = line.split("\t")
        if record_id in args.fail_on:
            print(f"could not label {record_id}", file=sys.stderr)
            continue
        canned = Path(image_path + ".depth.pfm")
        if canned.exists():
            shutil.copyfile(canned, out / f"{record_id}.pfm")
        else:
            write_constant_pfm(out / f"{record_id}.pfm", args.depth)
    return 0


if __name__ == "__main__":
    sys.exit(main())
