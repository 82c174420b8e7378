#!/usr/bin/env python3
"""Full-scale reference experiment: all three variants, several seeds.

Trains on 2600 binary-class images for 15 epochs (325 iterations per
epoch at batch size 8), then scores 2600 fresh samples per run against
the training set. Expect hours of CPU time per run at full scale; use
--samples/--epochs to scale down for a smoke test.

Real data comes from IDX files (--images/--labels, classes 0 and 1);
--synthetic N substitutes the deterministic ring/bar set used by the
test suite so the script runs without any dataset on disk.
"""

import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from vqwgan import data, infer, metrics, model, nn, train


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
    return data.Dataset(images, labels, name="synthetic")


def load_real(images_path: str, labels_path: str, n: int, seed: int):
    ds = data.load_dataset(images_path, labels_path, name="idx")
    return data.subsample(ds, {0, 1}, n, np.random.default_rng(seed))


def fresh_samples(result, cfg, n: int) -> np.ndarray:
    """Post-training sample set: mixture inference for the encoder variant,
    native prior draws otherwise."""
    if cfg.variant == "vae-qwgan":
        best, grid = infer.select_gmm(result.latents,
                                      train.make_stream(cfg.seed, "gmm"))
        print(f"  gmm: K={best.n_components} {best.covariance_type} "
              f"(grid of {len(grid)})")
        return infer.sample_and_generate(best, result.checkpoint.gen, n,
                                         train.make_stream(cfg.seed, "eval"),
                                         threads=cfg.resolved_threads()
                                         ).reshape(n, -1)
    z = train._prior_latents(cfg, train.make_stream(cfg.seed, "prior"), n)
    out = np.empty((n, cfg.generator.n_pixels))
    for s in range(0, n, 64):
        chunk = z[s:s + 64]
        out[s:s + len(chunk)] = model.generate(
            nn.Tensor(chunk), result.checkpoint.gen,
            threads=cfg.resolved_threads()).data
    return out


METRIC_KEYS = ("jsd", "ndb_k", "ssim", "psnr", "cosine", "fd")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--images", help="IDX image file (classes 0/1 are kept)")
    ap.add_argument("--labels", help="IDX label file")
    ap.add_argument("--synthetic", type=int, metavar="N",
                    help="use N synthetic ring/bar images instead of IDX data")
    ap.add_argument("--samples", type=int, default=2600)
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--threads", type=int, default=0)
    ap.add_argument("--out-dir", default="runs")
    args = ap.parse_args(argv)

    if args.synthetic:
        ds = synthetic_images(args.synthetic, seed=123)
    elif args.images and args.labels:
        ds = load_real(args.images, args.labels, args.samples, seed=123)
    else:
        ap.error("need --images/--labels or --synthetic N")
    real = ds.images.reshape(len(ds), -1)
    n_score = len(ds)

    rows = []
    for variant in train.VARIANTS:
        for seed in args.seeds:
            cfg = train.TrainConfig(epochs=args.epochs, batch_size=8,
                                    seed=seed, variant=variant,
                                    threads=args.threads)
            run_dir = os.path.join(args.out_dir, f"{variant}_seed{seed}")
            os.makedirs(run_dir, exist_ok=True)
            print(f"[{variant} seed {seed}] training "
                  f"({args.epochs} epochs x {len(ds) // 8} iterations)")
            result = train.train(cfg, ds, out_dir=run_dir, log=print)
            gen_imgs = fresh_samples(result, cfg, n_score)
            scores = metrics.evaluate_batches(
                real, gen_imgs, train.make_stream(seed, "eval"))
            rows.append((variant, seed, scores))
            print("  " + "  ".join(f"{k}={scores[k]:.4f}" for k in METRIC_KEYS))

    summary_path = os.path.join(args.out_dir, "summary.csv")
    with open(summary_path, "w") as fh:
        fh.write("variant,seed," + ",".join(METRIC_KEYS) + "\n")
        for variant, seed, scores in rows:
            fh.write(f"{variant},{seed},"
                     + ",".join(repr(float(scores[k])) for k in METRIC_KEYS)
                     + "\n")

    print(f"\nper-variant aggregates over seeds {args.seeds} "
          f"(median / mean +- std):")
    for variant in train.VARIANTS:
        picked = [s for v, _, s in rows if v == variant]
        parts = []
        for k in METRIC_KEYS:
            vals = np.array([s[k] for s in picked])
            parts.append(f"{k} {np.median(vals):.4f} / "
                         f"{vals.mean():.4f}+-{vals.std(ddof=0):.4f}")
        print(f"  {variant}: " + "  ".join(parts))
    print(f"summary written to {summary_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
