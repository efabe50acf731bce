"""Write IDX digit files from the 5000-sample MNIST subset bundled with mlxtend.

usage: python3 scripts/make_digits_idx.py [outdir] [--test N] [--seed S]

The split is stratified: every class contributes N/10 test images.
"""
import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))
from steercnn.data import IdxDataset, save_idx  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("outdir", nargs="?", default="data")
    ap.add_argument("--test", type=int, default=1500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    try:
        from mlxtend.data import mnist_data
    except ImportError:
        sys.exit("mlxtend is required: pip install mlxtend")
    X, y = mnist_data()
    images = X.reshape(-1, 28, 28).astype(np.uint8)
    labels = y.astype(np.uint8)
    rng = np.random.default_rng(args.seed)
    test_idx = []
    for c in range(10):
        members = np.flatnonzero(labels == c)
        test_idx.extend(rng.choice(members, args.test // 10, replace=False))
    test_mask = np.zeros(len(labels), bool)
    test_mask[test_idx] = True
    splits = {"train": np.flatnonzero(~test_mask), "test": np.flatnonzero(test_mask)}
    for name, idx in splits.items():
        ds = IdxDataset(images[idx], labels[idx])
        prefix = "t10k" if name == "test" else "train"
        save_idx(ds, os.path.join(args.outdir, f"{prefix}-images-idx3-ubyte"),
                 os.path.join(args.outdir, f"{prefix}-labels-idx1-ubyte"))
        print(f"{name}: {len(ds)} samples -> {args.outdir}")


if __name__ == "__main__":
    main()
