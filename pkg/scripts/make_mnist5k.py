"""Build the bundled MNIST subset under data/mnist5k/.

Source: the 5,000-example MNIST sample (500 per digit) shipped inside the
mlxtend wheel as ``mlxtend/data/data/mnist_5k.csv.gz``. Rows are shuffled
with a fixed seed and split 4,000 train / 1,000 test, then written as
gzipped IDX files.

    pip download mlxtend --no-deps -d /tmp/mlx
    python scripts/make_mnist5k.py /tmp/mlx/mlxtend-*.whl
"""

import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from noisyfed.data import LabeledDataset, write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_csv(source: Path) -> np.ndarray:
    if source.suffix == ".whl":
        raw = zipfile.ZipFile(source).read(MEMBER)
    else:
        raw = source.read_bytes()
    return np.loadtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("source", type=Path, help="mlxtend wheel or mnist_5k.csv.gz")
    parser.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "data" / "mnist5k")
    parser.add_argument("--train", type=int, default=4000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    table = read_csv(args.source)
    pixels, labels = table[:, :-1], table[:, -1].astype(np.int64)
    order = np.random.default_rng(args.seed).permutation(len(labels))
    full = LabeledDataset(pixels[order] / 255.0, labels[order], 10)

    args.out.mkdir(parents=True, exist_ok=True)
    splits = {"train": np.arange(args.train), "t10k": np.arange(args.train, len(labels))}
    for name, idx in splits.items():
        part = full.subset(idx)
        write_idx(part, args.out / f"{name}-images-idx3-ubyte.gz",
                  args.out / f"{name}-labels-idx1-ubyte.gz", image_shape=(28, 28))
        print(f"{name}: {len(part)} examples, class counts {np.bincount(part.labels, minlength=10).tolist()}")


if __name__ == "__main__":
    main()
