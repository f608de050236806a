#!/usr/bin/env python3
"""Build a 10k-digit MNIST subset in IDX format from the `mnist` npm package.

The npm package ships 10,000 MNIST digits as JSON arrays of pixel/255 values
rounded to three decimals; rounding back to bytes recovers the original pixels
exactly. The digits are shuffled with a fixed seed and split 8000/2000 into
train and t10k files, gzip-compressed like the upstream MNIST distribution.

Usage: scripts/fetch_mnist_subset.py [--out data/mnist-subset] [--package DIR]
"""
import argparse
import gzip
import json
import pathlib
import struct
import subprocess
import tarfile
import tempfile

import numpy as np


def fetch_package(workdir: pathlib.Path) -> pathlib.Path:
    subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=workdir, check=True,
                   stdout=subprocess.DEVNULL)
    tgz = next(workdir.glob("mnist-*.tgz"))
    with tarfile.open(tgz) as tar:
        tar.extractall(workdir)
    return workdir / "package"


def write_idx(path: pathlib.Path, array: np.ndarray) -> None:
    header = struct.pack(">I", 0x0800 | array.ndim)
    header += b"".join(struct.pack(">I", d) for d in array.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + array.astype(np.uint8).tobytes())


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/mnist-subset")
    ap.add_argument("--package", default=None,
                    help="already-extracted npm package directory")
    ap.add_argument("--train", type=int, default=8000)
    ap.add_argument("--seed", type=int, default=20210901)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        pkg = pathlib.Path(args.package) if args.package else fetch_package(pathlib.Path(tmp))
        images, labels = [], []
        for digit in range(10):
            flat = json.loads((pkg / "src" / "digits" / f"{digit}.json").read_text())["data"]
            pixels = np.rint(np.asarray(flat, dtype=np.float64) * 255.0).reshape(-1, 28, 28)
            images.append(pixels)
            labels.append(np.full(len(pixels), digit))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.RandomState(args.seed).permutation(len(labels))
    images, labels = images[order], labels[order]

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = args.train
    write_idx(out / "train-images-idx3-ubyte.gz", images[:n])
    write_idx(out / "train-labels-idx1-ubyte.gz", labels[:n])
    write_idx(out / "t10k-images-idx3-ubyte.gz", images[n:])
    write_idx(out / "t10k-labels-idx1-ubyte.gz", labels[n:])
    print(f"wrote {n} train / {len(labels) - n} test digits to {out}")


if __name__ == "__main__":
    main()
