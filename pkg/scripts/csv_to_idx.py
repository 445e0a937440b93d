"""Convert a label-last pixel CSV (one 28x28 image per row) into MNIST IDX files.

    python scripts/csv_to_idx.py digits.csv.gz data/mnist --n-test 1000

Rows are shuffled with ``--seed`` (pass ``--no-shuffle`` to keep file order),
then the last ``--n-test`` rows become the test split.  Output uses the
standard MNIST file names.
"""

import argparse
import gzip
import io
from pathlib import Path

import numpy as np

from swbnlab.data import MNIST_FILES, make_rng, write_idx_images, write_idx_labels


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("csv")
    ap.add_argument("out_dir")
    ap.add_argument("--n-test", type=int, default=1000)
    ap.add_argument("--side", type=int, default=28)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--no-shuffle", action="store_true")
    args = ap.parse_args()

    raw = Path(args.csv).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    if not args.no_shuffle:
        table = table[make_rng(args.seed).permutation(len(table))]
    pixels = table[:, :-1].astype(np.uint8).reshape(-1, args.side, args.side)
    labels = table[:, -1].astype(np.uint8)
    split = len(labels) - args.n_test
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, sl in (("train", slice(0, split)), ("test", slice(split, None))):
        img_name, lbl_name = MNIST_FILES[name]
        write_idx_images(out / img_name, pixels[sl])
        write_idx_labels(out / lbl_name, labels[sl])
        print(f"{name}: {len(labels[sl])} images")


if __name__ == "__main__":
    main()
