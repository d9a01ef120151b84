#!/usr/bin/env python3
"""Convert the digit bundle shipped in the `mnist` npm package (10k MNIST
digits, intensities stored as /255 floats) into gzipped IDX files.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/mnist_from_npm.py package/src/digits data/mnist10k
"""
import gzip
import json
import struct
import sys
from pathlib import Path


def main(src: Path, dst: Path) -> None:
    images, labels = [], []
    for digit in range(10):
        blob = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(blob) % 784 == 0
        for off in range(0, len(blob), 784):
            images.append(bytes(min(255, max(0, round(v * 255))) for v in blob[off:off + 784]))
            labels.append(digit)
    n = len(images)
    dst.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(dst / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        for img in images:
            f.write(img)
    with gzip.GzipFile(dst / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(labels))
    print(f"wrote {n} images to {dst}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
