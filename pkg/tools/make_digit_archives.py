"""Builds the committed data/ archives from the npm `mnist` package.

The npm package (cazala/mnist) bundles ~10k real MNIST digits as JSON with
pixels stored as round(u8/255, 3); this recovers the exact 8-bit pixels and
writes standard gzipped IDX archives. Per class, the last 200 images become
the validation split, the rest the training split.

Usage: npm install mnist (anywhere), then
       python3 tools/make_digit_archives.py <node_modules/mnist/src/digits> <outdir>
"""

import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np

VAL_PER_CLASS = 200


def _gz(path: Path):
    # mtime pinned to zero so the archives are byte-reproducible
    return gzip.GzipFile(path, "wb", mtime=0)


def write_idx_images(path: Path, images: np.ndarray) -> None:
    with _gz(path) as fh:
        fh.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        fh.write(images.tobytes())


def write_idx_labels(path: Path, labels: np.ndarray) -> None:
    with _gz(path) as fh:
        fh.write(struct.pack(">II", 0x801, len(labels)))
        fh.write(labels.tobytes())


def main(digits_dir: str, outdir: str) -> None:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    train_x, train_y, val_x, val_y = [], [], [], []
    for digit in range(10):
        raw = json.loads((Path(digits_dir) / f"{digit}.json").read_text())["data"]
        flat = np.asarray(raw, dtype=np.float64)
        images = flat.reshape(-1, 784)
        pixels = np.rint(images * 255.0)
        assert np.abs(pixels / 255.0 - images).max() < 5e-4, "pixel recovery drifted"
        pixels = pixels.astype(np.uint8)
        print(f"digit {digit}: {len(pixels)} images")
        val_x.append(pixels[-VAL_PER_CLASS:])
        val_y.append(np.full(VAL_PER_CLASS, digit, np.uint8))
        train_x.append(pixels[:-VAL_PER_CLASS])
        train_y.append(np.full(len(pixels) - VAL_PER_CLASS, digit, np.uint8))

    def shuffled(xs, ys, seed):
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        order = np.random.default_rng(seed).permutation(len(y))
        return x[order], y[order]

    tx, ty = shuffled(train_x, train_y, seed=0)
    vx, vy = shuffled(val_x, val_y, seed=1)
    write_idx_images(out / "train-images-idx3-ubyte.gz", tx.reshape(-1, 28, 28))
    write_idx_labels(out / "train-labels-idx1-ubyte.gz", ty)
    write_idx_images(out / "val-images-idx3-ubyte.gz", vx.reshape(-1, 28, 28))
    write_idx_labels(out / "val-labels-idx1-ubyte.gz", vy)
    print(f"train: {len(ty)}  val: {len(vy)}  -> {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
