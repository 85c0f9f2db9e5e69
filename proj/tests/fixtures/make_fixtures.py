"""Writes tiny dataset files in the published formats with known contents."""
import gzip
import os
import struct

import numpy as np
import scipy.io
from PIL import Image

HERE = os.path.dirname(os.path.abspath(__file__))


def pattern(i, c, h, w):
    return (i * 11 + c * 7 + h * 3 + w) % 256


def cifar():
    out = os.path.join(HERE, "cifar10")
    os.makedirs(out, exist_ok=True)
    names = [f"data_batch_{k}.bin" for k in range(1, 6)] + ["test_batch.bin"]
    idx = 0
    for name in names:
        recs = []
        for _ in range(4):
            img = np.fromfunction(lambda c, h, w: pattern(idx, c, h, w), (3, 32, 32), dtype=np.int64)
            recs.append(bytes([idx % 10]) + img.astype(np.uint8).tobytes())
            idx += 1
        with open(os.path.join(out, name), "wb") as f:
            f.write(b"".join(recs))


def svhn():
    out = os.path.join(HERE, "svhn")
    os.makedirs(out, exist_ok=True)
    for name, n, compress in (("train_32x32.mat", 6, True), ("test_32x32.mat", 3, False)):
        x = np.zeros((32, 32, 3, n), dtype=np.uint8)
        for i in range(n):
            x[:, :, :, i] = np.fromfunction(lambda h, w, c: pattern(i, c, h, w), (32, 32, 3), dtype=np.int64)
        y = np.array([[(i % 10) + 1] for i in range(n)], dtype=np.float64)  # label 10 means digit 0
        scipy.io.savemat(os.path.join(out, name), {"X": x, "y": y}, do_compression=compress)


def intel():
    colors = [(200, 30, 30), (30, 200, 30), (30, 30, 200), (200, 200, 30), (30, 200, 200), (200, 30, 200)]
    classes = ["buildings", "forest", "glacier", "mountain", "sea", "street"]
    for split, count in (("seg_train", 2), ("seg_test", 1)):
        for c, name in enumerate(classes):
            d = os.path.join(HERE, "intel", split, split, name)
            os.makedirs(d, exist_ok=True)
            for k in range(count):
                Image.new("RGB", (150, 150), colors[c]).save(os.path.join(d, f"{k}.jpg"), quality=95)


def mnist():
    out = os.path.join(HERE, "mnist")
    os.makedirs(out, exist_ok=True)
    for split, n in (("train", 30), ("t10k", 10)):
        imgs = np.zeros((n, 28, 28), dtype=np.uint8)
        for i in range(n):
            imgs[i] = np.fromfunction(lambda h, w: pattern(i, 0, h, w), (28, 28), dtype=np.int64)
        labels = np.array([i % 10 for i in range(n)], dtype=np.uint8)
        with gzip.open(os.path.join(out, f"{split}-images-idx3-ubyte.gz"), "wb") as f:
            f.write(struct.pack(">IIII", 0x803, n, 28, 28) + imgs.tobytes())
        with open(os.path.join(out, f"{split}-labels-idx1-ubyte"), "wb") as f:
            f.write(struct.pack(">II", 0x801, n) + labels.tobytes())


if __name__ == "__main__":
    cifar()
    svhn()
    intel()
    mnist()
