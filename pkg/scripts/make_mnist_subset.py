"""Build the bundled 5000-image MNIST subset as gzipped IDX files.

The sandbox has no route to the canonical MNIST mirrors, so the subset is
taken from the ``mnist_5k.csv.gz`` table shipped inside the mlxtend wheel
(500 images per digit, raw 0-255 pixels, label in the last column).

Usage::

    pip download --no-deps -d /tmp/dl_mlx mlxtend==0.24.0
    python3 scripts/make_mnist_subset.py /tmp/dl_mlx/mlxtend-0.24.0-py3-none-any.whl data/
"""
import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from widthlab.data import write_idx_images, write_idx_labels

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main(wheel: str, out_dir: str) -> None:
    with zipfile.ZipFile(wheel) as zf:
        raw = gzip.decompress(zf.read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    pixels = table[:, :784].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, 784].astype(np.uint8)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx_images(out / "mnist5k-images-idx3-ubyte.gz", pixels)
    write_idx_labels(out / "mnist5k-labels-idx1-ubyte.gz", labels)
    print(f"wrote {len(labels)} images to {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
