"""Convert the 5000-image MNIST sample shipped inside the mlxtend wheel into IDX files.

Usage: pip download mlxtend --no-deps -d /tmp/mlx
       python3 -m zipfile -e /tmp/mlx/mlxtend-*.whl /tmp/mlx
       python3 scripts/make_mnist5k_idx.py /tmp/mlx/mlxtend/data/data/mnist_5k.csv.gz data/
"""
import gzip
import struct
import sys

import numpy as np


def main(src, out_dir):
    rows = np.genfromtxt(gzip.open(src), delimiter=",").astype(np.uint8)
    # The source is sorted by label; a fixed permutation keeps first-N splits class-balanced.
    rows = rows[np.random.RandomState(20201022).permutation(rows.shape[0])]
    labels, images = rows[:, -1], rows[:, :-1]
    n = rows.shape[0]
    with open(f"{out_dir}/mnist5k-images-idx3-ubyte", "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        fh.write(images.tobytes())
    with open(f"{out_dir}/mnist5k-labels-idx1-ubyte", "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, n))
        fh.write(labels.tobytes())


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
