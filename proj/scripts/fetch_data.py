#!/usr/bin/env python3
"""Fetch the MNIST and Penn Treebank data used by the experiments.

MNIST digits come from the `mnist` npm package (10k 28x28 digits stored as
JSON), re-encoded here as standard IDX files. The Penn Treebank splits come
from the `treebank` PyPI wheel (Mikolov preprocessing). Output layout:

    <root>/mnist/{train,test}-{images-idx3,labels-idx1}-ubyte
    <root>/ptb/ptb.{train,valid,test}.txt
"""
import argparse
import json
import random
import struct
import subprocess
import sys
import tarfile
import tempfile
import zipfile
from pathlib import Path


def write_idx_images(path, images, rows, cols):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), rows, cols))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def fetch_mnist(root, work, n_train):
    out = root / "mnist"
    if (out / "train-images-idx3-ubyte").exists():
        print(f"mnist: already present in {out}")
        return
    subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=work, check=True,
                   stdout=subprocess.DEVNULL)
    with tarfile.open(work / "mnist-1.1.0.tgz") as tar:
        tar.extractall(work)
    samples = []
    for digit in range(10):
        data = json.loads((work / "package" / "src" / "digits" / f"{digit}.json").read_text())["data"]
        size = 28 * 28
        for s in range(len(data) // size):
            px = [max(0, min(255, round(v * 255))) for v in data[s * size:(s + 1) * size]]
            samples.append((px, digit))
    random.Random(20190101).shuffle(samples)
    out.mkdir(parents=True, exist_ok=True)
    train, test = samples[:n_train], samples[n_train:]
    write_idx_images(out / "train-images-idx3-ubyte", [s[0] for s in train], 28, 28)
    write_idx_labels(out / "train-labels-idx1-ubyte", [s[1] for s in train])
    write_idx_images(out / "test-images-idx3-ubyte", [s[0] for s in test], 28, 28)
    write_idx_labels(out / "test-labels-idx1-ubyte", [s[1] for s in test])
    print(f"mnist: {len(train)} train / {len(test)} test images -> {out}")


def fetch_ptb(root, work):
    out = root / "ptb"
    if (out / "ptb.train.txt").exists():
        print(f"ptb: already present in {out}")
        return
    subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "-q",
                    "-d", str(work), "treebank==0.0.0"], check=True)
    wheel = next(work.glob("treebank-*.whl"))
    source = zipfile.ZipFile(wheel).read("treebank/__init__.py").decode("utf-8")
    scope = {}
    exec(compile(source, "treebank", "exec"), scope)
    penn = scope["penn"]
    out.mkdir(parents=True, exist_ok=True)
    for split in ("train", "valid", "test"):
        (out / f"ptb.{split}.txt").write_text(penn[split], encoding="utf-8")
        print(f"ptb: {split} {len(penn[split])} chars")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", default=str(Path(__file__).resolve().parent.parent / "data"))
    ap.add_argument("--mnist-train", type=int, default=7000)
    args = ap.parse_args()
    root = Path(args.root)
    with tempfile.TemporaryDirectory() as tmp:
        fetch_mnist(root, Path(tmp), args.mnist_train)
        fetch_ptb(root, Path(tmp))


if __name__ == "__main__":
    main()
