#!/usr/bin/env python3
"""Rebuild data/mnist-subset from the `mnist` npm package (10,000 MNIST digits).

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/make_mnist_subset.py package/src/digits data/mnist-subset

Writes gzipped IDX files (the format MNIST is published in) with an
8,000 / 2,000 train/test split fixed by seed 7.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def main(src: Path, dst: Path) -> None:
    images, labels = [], []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        for i in range(len(data) // 784):
            px = data[i * 784:(i + 1) * 784]
            images.append(bytes(int(round(v * 255)) for v in px))
            labels.append(digit)
    order = list(range(len(images)))
    random.Random(7).shuffle(order)
    dst.mkdir(parents=True, exist_ok=True)
    for prefix, sel in (("train", order[:8000]), ("t10k", order[8000:])):
        with gzip.open(dst / f"{prefix}-images-idx3-ubyte.gz", "wb", compresslevel=9) as f:
            f.write(struct.pack(">IIII", 2051, len(sel), 28, 28))
            for i in sel:
                f.write(images[i])
        with gzip.open(dst / f"{prefix}-labels-idx1-ubyte.gz", "wb", compresslevel=9) as f:
            f.write(struct.pack(">II", 2049, len(sel)))
            f.write(bytes(labels[i] for i in sel))


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
