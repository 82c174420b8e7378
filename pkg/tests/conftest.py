"""Shared fixtures: a deterministic synthetic two-class image set.

Real MNIST IDX files are used instead when VQWGAN_MNIST_DIR points at a
directory containing them; the synthetic set keeps the suite self-contained.
Class 0 is a ring, class 1 a vertical bar, both jittered per sample.
"""

import os

import numpy as np
import pytest

from vqwgan import data


def synthetic_images(n: int, seed: int, side: int = 28):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    images = np.empty((n, side, side))
    labels = np.empty(n, dtype=np.int64)
    mid = (side - 1) / 2.0
    for i in range(n):
        label = i % 2
        cx = mid + rng.uniform(-2, 2)
        cy = mid + rng.uniform(-2, 2)
        if label == 0:
            radius = rng.uniform(side * 0.22, side * 0.32)
            dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
            img = np.exp(-((dist - radius) ** 2) / 4.0)
        else:
            x0 = mid + rng.uniform(-4, 4)
            width = rng.uniform(1.5, 3.0)
            img = np.exp(-((xx - x0) ** 2) / (2.0 * width))
        images[i] = img / img.max()
        labels[i] = label
    return images, labels


def synthetic_dataset(n: int, seed: int = 0) -> data.Dataset:
    images, labels = synthetic_images(n, seed)
    return data.Dataset(images, labels, name="synthetic")


def mnist_dir():
    path = os.environ.get("VQWGAN_MNIST_DIR", "")
    return path if path and os.path.isdir(path) else None


def training_dataset(n: int, seed: int = 0) -> data.Dataset:
    """Binary-class image set: real MNIST 0/1 when available, synthetic otherwise."""
    root = mnist_dir()
    if root is not None:
        for suffix in ("", ".gz"):
            imgs = os.path.join(root, "train-images-idx3-ubyte" + suffix)
            labs = os.path.join(root, "train-labels-idx1-ubyte" + suffix)
            if os.path.exists(imgs) and os.path.exists(labs):
                ds = data.load_dataset(imgs, labs, name="mnist")
                return data.subsample(ds, {0, 1}, n, np.random.default_rng(seed))
    return synthetic_dataset(n, seed)


def write_idx_pair(dataset: data.Dataset, images_path, labels_path):
    quantized = np.rint(dataset.images * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(data.encode_idx_images(quantized))
    with open(labels_path, "wb") as fh:
        fh.write(data.encode_idx_labels(dataset.labels.astype(np.uint8)))


@pytest.fixture(scope="session")
def small_image_set():
    return synthetic_dataset(64, seed=7)
