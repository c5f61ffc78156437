"""Build a 28x28 IDX digit dataset from scikit-learn's bundled 8x8 digits.

Each 8x8 image (levels 0..16) is bilinearly resized to 20x20 and centred
in a 28x28 frame, the same framing MNIST uses. The result is written as
MNIST-named IDX files so the loaders treat it like any other IDX set.

    python3 scripts/make_digits_idx.py crates/core/tests/data/digits
"""

import struct
import sys
from pathlib import Path

import numpy as np
from PIL import Image
from sklearn.datasets import load_digits

TRAIN = 1297


def write_images(path, images):
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, h, w))
        f.write(images.astype(np.uint8).tobytes())


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else ".")
    out.mkdir(parents=True, exist_ok=True)
    digits = load_digits()
    frames = np.zeros((len(digits.images), 28, 28), dtype=np.uint8)
    for i, img in enumerate(digits.images):
        small = Image.fromarray((img * (255.0 / 16.0)).astype(np.uint8))
        big = np.asarray(small.resize((20, 20), Image.BILINEAR))
        frames[i, 4:24, 4:24] = big
    order = np.random.default_rng(0).permutation(len(frames))
    frames, labels = frames[order], digits.target[order]
    write_images(out / "train-images-idx3-ubyte", frames[:TRAIN])
    write_labels(out / "train-labels-idx1-ubyte", labels[:TRAIN])
    write_images(out / "t10k-images-idx3-ubyte", frames[TRAIN:])
    write_labels(out / "t10k-labels-idx1-ubyte", labels[TRAIN:])


if __name__ == "__main__":
    main()
