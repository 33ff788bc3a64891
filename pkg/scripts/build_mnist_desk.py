"""Build a desk-scale MNIST split (IDX files) from the ``mnist`` npm package.

The npm package ships 10,000 MNIST digits as JSON (pixels rounded to three
decimals of x/255, which round-trips to the original bytes). This writes a
stratified 1,000-image test split and a 9,000-image training split:

    npm pack mnist && tar xzf mnist-*.tgz
    python scripts/build_mnist_desk.py package/src/digits data/mnist
"""

import argparse
import json
import os

import numpy as np

from robusteval.dataset import LabeledDataset, stratified_indices, write_idx


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("digits_dir", help="directory holding 0.json .. 9.json")
    parser.add_argument("out_dir")
    parser.add_argument("--test-size", type=int, default=1000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(args.digits_dir, f"{digit}.json")) as fh:
            data = np.asarray(json.load(fh)["data"], dtype=np.float64).reshape(-1, 28, 28, 1)
        images.append(np.rint(data * 255.0) / 255.0)
        labels.append(np.full(len(data), digit))
    full = LabeledDataset(np.concatenate(images), np.concatenate(labels), 10, "mnist")

    test_idx = stratified_indices(full.labels, 10, args.test_size, args.seed)
    rest = np.setdiff1d(np.arange(len(full)), test_idx)
    train = full.take(np.random.default_rng(args.seed).permutation(rest))
    test = full.take(test_idx)

    os.makedirs(args.out_dir, exist_ok=True)
    write_idx(train, os.path.join(args.out_dir, "train-images-idx3-ubyte"),
              os.path.join(args.out_dir, "train-labels-idx1-ubyte"))
    write_idx(test, os.path.join(args.out_dir, "t10k-images-idx3-ubyte"),
              os.path.join(args.out_dir, "t10k-labels-idx1-ubyte"))
    print(f"train {len(train)}  test {len(test)}  -> {args.out_dir}")


if __name__ == "__main__":
    main()
