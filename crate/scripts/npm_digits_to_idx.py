#!/usr/bin/env python3
"""Convert the JSON digit dumps shipped in the `mnist` and `fashion-mnist` npm
packages into gzipped IDX files.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/npm_digits_to_idx.py mnist package/src/digits data/mnist-npm 10000
"""
import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np


def load_class(path):
    data = json.load(open(path))["data"]
    if data and isinstance(data[0], list):
        data = [row for row in data if len(row) == 784]
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 784)
    if arr.max() <= 1.0:
        arr = np.rint(arr * 255.0)
    return arr.clip(0, 255).astype(np.uint8)


def main():
    kind, src, dst, limit = sys.argv[1], Path(sys.argv[2]), Path(sys.argv[3]), int(sys.argv[4])
    images, labels = [], []
    for c in range(10):
        a = load_class(src / f"{c}.json")
        images.append(a)
        labels.append(np.full(len(a), c, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(0).permutation(len(labels))[:limit]
    images, labels = images[order], labels[order]
    dst.mkdir(parents=True, exist_ok=True)
    n = len(labels)
    with gzip.GzipFile(dst / f"{kind}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        f.write(images.tobytes())
    with gzip.GzipFile(dst / f"{kind}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(labels.tobytes())
    print(kind, n, np.bincount(labels, minlength=10))


if __name__ == "__main__":
    main()
