"""Rebuild data/mnist10k-*.gz from the digits bundled in the npm `mnist` package.

The package stores each pixel as round(byte / 255, 3); the original byte is
recovered exactly with round(value * 255). Samples are interleaved with a
fixed-seed shuffle so any prefix is class balanced in expectation.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/build_mnist_subset.py package/src/digits data
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

src, dst = Path(sys.argv[1]), Path(sys.argv[2])
samples = []
for label in range(10):
    flat = json.loads((src / f"{label}.json").read_text())["data"]
    assert len(flat) % 784 == 0
    for i in range(0, len(flat), 784):
        px = [round(v * 255) for v in flat[i:i + 784]]
        assert all(round(b / 255, 3) == v for b, v in zip(px, flat[i:i + 784]))
        samples.append((label, bytes(px)))

random.Random(0).shuffle(samples)
n = len(samples)
with gzip.GzipFile(dst / "mnist10k-images-idx3-ubyte.gz", "wb", mtime=0) as f:
    f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
    for _, px in samples:
        f.write(px)
with gzip.GzipFile(dst / "mnist10k-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
    f.write(struct.pack(">II", 0x00000801, n))
    f.write(bytes(label for label, _ in samples))
print(n, "samples")
