#!/usr/bin/env python3
"""Build a 10k-sample MNIST subset in IDX format from the `mnist` npm package.

The npm package (https://www.npmjs.com/package/mnist) ships 10,000 MNIST
digits as JSON arrays of pixel/255 values rounded to three decimals. This
script maps them back to bytes and writes gzip-compressed IDX files.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/make_mnist_subset.py package/src/digits data/mnist10k
"""
import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np


def main() -> int:
    if len(sys.argv) != 3:
        print(__doc__)
        return 2
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    images, labels = [], []
    for digit in range(10):
        raw = json.loads((src / f"{digit}.json").read_text())["data"]
        arr = np.asarray(raw, dtype=np.float64).reshape(-1, 28 * 28)
        images.append(np.rint(arr * 255.0).astype(np.uint8))
        labels.extend([digit] * arr.shape[0])
    x = np.vstack(images)
    y = np.asarray(labels, dtype=np.uint8)
    order = np.random.default_rng(0).permutation(len(y))
    x, y = x[order], y[order]

    dst.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(dst / "train-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(y), 28, 28))
        f.write(x.tobytes())
    with gzip.GzipFile(dst / "train-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(y)))
        f.write(y.tobytes())
    print(f"wrote {len(y)} samples to {dst}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
