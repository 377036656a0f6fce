"""Write the 5000-image MNIST subset bundled with mlxtend as an IDX pair.

    python scripts/make_mnist_idx.py data/mnist5k

Produces ``images-idx3-ubyte`` and ``labels-idx1-ubyte`` in the target
directory (500 images per digit, 28x28).  Needs ``pip install mlxtend``.
"""
import argparse
import gzip
import importlib.resources
import io
from pathlib import Path

import numpy as np

from oneshot_dil.data import write_idx


def mnist5k_arrays():
    src = importlib.resources.files("mlxtend.data") / "data" / "mnist_5k.csv.gz"
    table = np.loadtxt(io.BytesIO(gzip.decompress(src.read_bytes())), delimiter=",", dtype=np.int64)
    return table[:, :-1].reshape(-1, 28, 28), table[:, -1]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("outdir", type=Path)
    args = ap.parse_args(argv)
    args.outdir.mkdir(parents=True, exist_ok=True)
    images, labels = mnist5k_arrays()
    write_idx(images, labels, args.outdir / "images-idx3-ubyte", args.outdir / "labels-idx1-ubyte")
    print(f"wrote {len(labels)} samples to {args.outdir}")


if __name__ == "__main__":
    main()
