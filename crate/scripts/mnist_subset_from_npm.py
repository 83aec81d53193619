#!/usr/bin/env python3
"""Convert the 10k MNIST digits bundled with the npm `mnist` package into
gzipped IDX files (8000 train / 2000 test, stratified, fixed shuffle).

Usage: npm pack mnist && tar xzf mnist-*.tgz && \
       python3 scripts/mnist_subset_from_npm.py package/src/digits data/mnist-10k
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def write_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))


def main(src, dst):
    src, dst = Path(src), Path(dst)
    train, test = [], []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        n = len(data) // 784
        samples = []
        for i in range(n):
            px = data[i * 784:(i + 1) * 784]
            samples.append(([int(round(v * 255)) for v in px], digit))
        cut = (n * 4) // 5
        train += samples[:cut]
        test += samples[cut:]
    rng = random.Random(0)
    rng.shuffle(train)
    rng.shuffle(test)
    dst.mkdir(parents=True, exist_ok=True)
    for name, split in (("train", train), ("t10k", test)):
        write_images(dst / f"{name}-images-idx3-ubyte.gz", [s[0] for s in split])
        write_labels(dst / f"{name}-labels-idx1-ubyte.gz", [s[1] for s in split])
        print(name, len(split))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
