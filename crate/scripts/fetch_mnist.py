#!/usr/bin/env python3
"""Build gzipped MNIST IDX files under data/mnist/.

The digits come from the `mnist` npm package (10,000 real MNIST samples stored
as JSON grayscale arrays). They are converted back to bytes, split per class
into train (80%) and test (20%) portions, shuffled with a fixed seed and
written in the standard IDX layout.

Usage: python3 scripts/fetch_mnist.py [OUT_DIR]
"""

import gzip
import json
import os
import random
import struct
import subprocess
import sys
import tarfile
import tempfile

PACKAGE = "mnist@1.1.0"
SIDE = 28


def write_images(path, images):
    header = struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header)
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    header = struct.pack(">II", 0x00000801, len(labels))
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header)
        f.write(bytes(labels))


def main():
    out_dir = sys.argv[1] if len(sys.argv) > 1 else os.path.join(
        os.path.dirname(os.path.abspath(__file__)), "..", "data", "mnist")
    os.makedirs(out_dir, exist_ok=True)

    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", PACKAGE], cwd=tmp, check=True,
                       stdout=subprocess.DEVNULL)
        tgz = [f for f in os.listdir(tmp) if f.endswith(".tgz")][0]
        with tarfile.open(os.path.join(tmp, tgz)) as tar:
            tar.extractall(tmp)

        train, test = [], []
        for digit in range(10):
            path = os.path.join(tmp, "package", "src", "digits", f"{digit}.json")
            with open(path) as f:
                flat = json.load(f)["data"]
            n = len(flat) // (SIDE * SIDE)
            samples = []
            for i in range(n):
                px = flat[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]
                samples.append(([min(255, max(0, round(v * 255))) for v in px], digit))
            cut = (n * 4) // 5
            train.extend(samples[:cut])
            test.extend(samples[cut:])

    rng = random.Random(20170831)
    rng.shuffle(train)
    rng.shuffle(test)

    for prefix, rows in (("train", train), ("t10k", test)):
        write_images(os.path.join(out_dir, f"{prefix}-images-idx3-ubyte.gz"),
                     [img for img, _ in rows])
        write_labels(os.path.join(out_dir, f"{prefix}-labels-idx1-ubyte.gz"),
                     [lab for _, lab in rows])
        print(f"{prefix}: {len(rows)} samples")


if __name__ == "__main__":
    main()
