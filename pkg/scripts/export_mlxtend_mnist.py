"""Write the 5000-digit MNIST sample shipped inside mlxtend as IDX files.

    python scripts/export_mlxtend_mnist.py data/mnist

The files use the official training-set names, so ``SINGLEDIR_DATA=data``
makes the toolkit pick them up.  Full MNIST files, when available, can be
dropped into the same directory instead.
"""
import argparse
import gzip
import importlib.util
import io
from pathlib import Path

import numpy as np

from singledir.data import Dataset, write_idx


def mlxtend_csv() -> Path:
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or not spec.submodule_search_locations:
        raise SystemExit("mlxtend is not installed (pip install --no-deps mlxtend)")
    return Path(spec.submodule_search_locations[0]) / "data" / "data" / "mnist_5k.csv.gz"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--csv", type=Path, default=None, help="path to mnist_5k.csv.gz")
    args = ap.parse_args()
    raw = np.loadtxt(io.BytesIO(gzip.decompress((args.csv or mlxtend_csv()).read_bytes())),
                     delimiter=",", dtype=np.int64)
    pixels, labels = raw[:, :-1], raw[:, -1]
    ds = Dataset(pixels.reshape(-1, 28, 28) / 255.0, labels, 10, "mnist-5k")
    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(ds, args.out_dir / "train-images-idx3-ubyte", args.out_dir / "train-labels-idx1-ubyte")
    print(f"wrote {len(ds)} examples to {args.out_dir}")


if __name__ == "__main__":
    main()
