#!/usr/bin/env python3
"""Build MNIST IDX files for the desk-scale experiments.

Real MNIST IDX files (train-images-idx3-ubyte / train-labels-idx1-ubyte) are
used as-is when they already sit in the target directory. Otherwise the
10000-digit subset shipped inside the npm ``mnist`` package is converted to
the IDX byte layout.

    python3 tools/fetch_mnist.py [--out DIR] [--tarball mnist-1.1.0.tgz]
"""
import argparse
import json
import os
import struct
import subprocess
import sys
import tarfile
import tempfile

IMAGES = "train-images-idx3-ubyte"
LABELS = "train-labels-idx1-ubyte"


def write_idx(out_dir, images, labels):
    with open(os.path.join(out_dir, IMAGES), "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))
    with open(os.path.join(out_dir, LABELS), "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def load_npm_tarball(path):
    per_digit = {}
    with tarfile.open(path) as tar:
        for digit in range(10):
            member = tar.getmember(f"package/src/digits/{digit}.json")
            flat = json.load(tar.extractfile(member))["data"]
            if len(flat) % 784:
                raise ValueError(f"digit {digit}: {len(flat)} values is not a multiple of 784")
            per_digit[digit] = [
                [min(255, max(0, round(v * 255))) for v in flat[i:i + 784]]
                for i in range(0, len(flat), 784)
            ]
    # interleave classes so any prefix of the file is roughly balanced
    images, labels = [], []
    longest = max(len(v) for v in per_digit.values())
    for i in range(longest):
        for digit in range(10):
            if i < len(per_digit[digit]):
                images.append(per_digit[digit][i])
                labels.append(digit)
    return images, labels


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    default_out = os.environ.get("MODNET_DATA_DIR", os.path.join(os.path.dirname(__file__), "..", "data"))
    parser.add_argument("--out", default=os.path.join(default_out, "mnist"))
    parser.add_argument("--tarball", help="pre-downloaded npm mnist tarball")
    args = parser.parse_args()

    os.makedirs(args.out, exist_ok=True)
    if all(os.path.exists(os.path.join(args.out, n)) for n in (IMAGES, LABELS)):
        print(f"{args.out}: IDX files already present")
        return 0

    tarball = args.tarball
    if tarball is None:
        tmp = tempfile.mkdtemp()
        subprocess.run(["npm", "pack", "mnist@1.1.0", "--silent"], cwd=tmp, check=True,
                       stdout=subprocess.DEVNULL)
        tarball = os.path.join(tmp, "mnist-1.1.0.tgz")

    images, labels = load_npm_tarball(tarball)
    write_idx(args.out, images, labels)
    print(f"{args.out}: wrote {len(images)} images")
    return 0


if __name__ == "__main__":
    sys.exit(main())
