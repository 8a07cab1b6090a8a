#!/usr/bin/env python3
"""Build a desk-scale MNIST split in IDX format from locally packaged digits.

Source: the npm ``mnist`` package tarball (10,000 real MNIST digits stored as
JSON, pixel/255 quantized to 3 decimals). Fetch it with ``npm pack mnist``.

The last TEST_PER_CLASS digits of every class form the test split; the rest
(663 to 927 per class) form the training split.

usage: make_desk_mnist.py MNIST_NPM_TGZ OUT_DIR
"""
import json
import struct
import sys
import tarfile
from pathlib import Path

TEST_PER_CLASS = 200


def write_idx_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(bytes(labels))


def load_npm(tgz):
    images, labels = [], []
    with tarfile.open(tgz) as tar:
        for digit in range(10):
            raw = tar.extractfile(f"package/src/digits/{digit}.json").read()
            data = json.loads(raw)["data"]
            for i in range(0, len(data), 784):
                images.append([min(255, max(0, round(v * 255))) for v in data[i:i + 784]])
                labels.append(digit)
    return images, labels


def main():
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    out = Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    images, labels = load_npm(sys.argv[1])
    train_x, train_y, test_x, test_y = [], [], [], []
    for digit in range(10):
        idx = [i for i, y in enumerate(labels) if y == digit]
        cut = len(idx) - TEST_PER_CLASS
        for j, i in enumerate(idx):
            (train_x if j < cut else test_x).append(images[i])
            (train_y if j < cut else test_y).append(digit)
    write_idx_images(out / "train-images-idx3-ubyte", train_x)
    write_idx_labels(out / "train-labels-idx1-ubyte", train_y)
    write_idx_images(out / "t10k-images-idx3-ubyte", test_x)
    write_idx_labels(out / "t10k-labels-idx1-ubyte", test_y)
    print(f"train {len(train_x)}  test {len(test_x)}")


if __name__ == "__main__":
    main()
