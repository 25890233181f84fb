#!/usr/bin/env python3
"""Export the scikit-learn handwritten-digits dataset to IDX files.

Produces the four-file layout used by classic digit-recognition corpora
(big-endian IDX, magic 0x00000803 for images / 0x00000801 for labels) so the
Rust loader and the desk-scale experiment suite have a real, hermetic dataset
checked into the repository. Images are 8x8 grayscale, rescaled from the
source 0..16 range to 0..255 bytes. A fixed shuffle splits 1797 samples into
1437 train / 360 test.

Usage: python3 scripts/make_fixture_data.py [out_dir]
"""

import struct
import sys
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits


def write_images(path: Path, images: np.ndarray) -> None:
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">iiii", 0x00000803, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())


def write_labels(path: Path, labels: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">ii", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main() -> None:
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("testdata/digits-8x8")
    out.mkdir(parents=True, exist_ok=True)

    digits = load_digits()
    images = np.round(digits.images * (255.0 / 16.0)).astype(np.uint8)
    labels = digits.target.astype(np.uint8)

    rng = np.random.RandomState(0)
    order = rng.permutation(len(labels))
    images, labels = images[order], labels[order]

    n_train = 1437
    write_images(out / "train-images-idx3-ubyte", images[:n_train])
    write_labels(out / "train-labels-idx1-ubyte", labels[:n_train])
    write_images(out / "t10k-images-idx3-ubyte", images[n_train:])
    write_labels(out / "t10k-labels-idx1-ubyte", labels[n_train:])

    print(f"wrote {n_train} train / {len(labels) - n_train} test samples to {out}")


if __name__ == "__main__":
    main()
