#!/usr/bin/env python3
"""Writes a 5000-image MNIST subset as IDX files.

The subset ships inside the mlxtend wheel (mlxtend/data/data/mnist_5k.csv.gz:
784 pixel columns then the label). The wheel is fetched with pip unless a
path is given. Images are shuffled with a fixed seed; the first 2000 become
the training file, the remaining 3000 the test file.

usage: prepare_mnist_subset.py [--wheel PATH] [--out data/mnist]
"""

import argparse
import glob
import gzip
import os
import random
import struct
import subprocess
import sys
import tempfile
import zipfile

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"
TRAIN = 2000


def fetch_wheel(tmp):
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "-d", tmp, "mlxtend==0.24.0"],
        check=True,
    )
    return glob.glob(os.path.join(tmp, "mlxtend-*.whl"))[0]


def write_idx(out, name, rows):
    images = bytearray(struct.pack(">IIII", 0x803, len(rows), 28, 28))
    labels = bytearray(struct.pack(">II", 0x801, len(rows)))
    for pixels, label in rows:
        images.extend(pixels)
        labels.append(label)
    with open(os.path.join(out, f"{name}-images-idx3-ubyte"), "wb") as f:
        f.write(images)
    with open(os.path.join(out, f"{name}-labels-idx1-ubyte"), "wb") as f:
        f.write(labels)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--wheel")
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data", "mnist"))
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel or fetch_wheel(tmp)
        text = gzip.decompress(zipfile.ZipFile(wheel).read(MEMBER)).decode()
    rows = []
    for line in text.splitlines():
        values = [int(float(v)) for v in line.split(",")]
        rows.append((bytes(values[:784]), values[784]))
    random.Random(0).shuffle(rows)
    os.makedirs(args.out, exist_ok=True)
    write_idx(args.out, "train", rows[:TRAIN])
    write_idx(args.out, "t10k", rows[TRAIN:])
    print(f"wrote {TRAIN} train and {len(rows) - TRAIN} test images to {args.out}")


if __name__ == "__main__":
    main()
