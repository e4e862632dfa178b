"""Convert the digit sample shipped in the `mnist` npm package into IDX files.

Usage: python3 scripts/mnist_sample_to_idx.py <path-to-unpacked-npm-package> <out-dir>

The npm package stores each digit class as a JSON list of pixels scaled to
[0, 1] and rounded to three decimals; round(v * 255) recovers the original
bytes. Classes are interleaved round-robin so the file is not sorted by label.
"""
import gzip
import json
import os
import struct
import sys


def main():
    pkg, out = sys.argv[1], sys.argv[2]
    per_class = []
    for digit in range(10):
        with open(os.path.join(pkg, "src", "digits", f"{digit}.json")) as f:
            flat = json.load(f)["data"]
        rows = [flat[i:i + 784] for i in range(0, len(flat), 784)]
        per_class.append(rows)

    images, labels = [], []
    depth = max(len(rows) for rows in per_class)
    for i in range(depth):
        for digit, rows in enumerate(per_class):
            if i < len(rows):
                images.append(bytes(round(v * 255) for v in rows[i]))
                labels.append(digit)

    os.makedirs(out, exist_ok=True)
    with gzip.GzipFile(os.path.join(out, "images-idx3-ubyte.gz"), "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        for img in images:
            f.write(img)
    with gzip.GzipFile(os.path.join(out, "labels-idx1-ubyte.gz"), "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))
    print(f"wrote {len(images)} samples to {out}")


if __name__ == "__main__":
    main()
