#!/usr/bin/env python3
"""Convert the digits bundled in the npm `mnist` package into IDX files.

The package (MIT, github.com/cazala/mnist) carries 10,000 MNIST digits as
JSON. They are split 8,000 / 2,000 into train / test with a fixed shuffle
and written as gzipped IDX files plus a SHA256SUMS manifest.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits $PARETO_DATA_DIR/mnist
"""
import gzip
import hashlib
import json
import random
import struct
import sys
from pathlib import Path


def idx_images(images):
    head = struct.pack(">IIII", 0x00000803, len(images), 28, 28)
    return head + b"".join(bytes(img) for img in images)


def idx_labels(labels):
    return struct.pack(">II", 0x00000801, len(labels)) + bytes(labels)


def main(src, dst):
    samples = []
    for digit in range(10):
        flat = json.loads((Path(src) / f"{digit}.json").read_text())["data"]
        for k in range(len(flat) // 784):
            px = flat[k * 784:(k + 1) * 784]
            samples.append(([min(255, max(0, round(v * 255))) for v in px], digit))
    random.Random(20201).shuffle(samples)
    test, train = samples[:2000], samples[2000:]
    out = Path(dst)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "train-images-idx3-ubyte.gz": idx_images([s[0] for s in train]),
        "train-labels-idx1-ubyte.gz": idx_labels([s[1] for s in train]),
        "t10k-images-idx3-ubyte.gz": idx_images([s[0] for s in test]),
        "t10k-labels-idx1-ubyte.gz": idx_labels([s[1] for s in test]),
    }
    sums = []
    for name, payload in files.items():
        data = gzip.compress(payload, mtime=0)
        (out / name).write_bytes(data)
        sums.append(f"{hashlib.sha256(data).hexdigest()}  {name}")
    (out / "SHA256SUMS").write_text("\n".join(sums) + "\n")
    print(f"wrote {len(train)} train / {len(test)} test examples to {out}")


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    main(sys.argv[1], sys.argv[2])
