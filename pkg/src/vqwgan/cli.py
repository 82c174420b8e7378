"""Command-line front end: train, gmm, generate, evaluate.

Configuration is a flat UTF-8 text file of `key = value` lines ('#' starts
a comment).  Unknown keys are rejected.  One `seed` key controls every
random draw; each command prints the seed it actually used.  Exit codes:
0 success, 1 usage or config error, 2 runtime failure.
"""

import argparse
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import data, infer, metrics, model, nn, train

EVAL_CSV_HEADER = "jsd,ndb_k,ssim,psnr,cosine,fd,metric_bins,ndb_alpha,pairing,seed"
BIC_CSV_HEADER = "components,covariance_type,bic,n_parameters"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # route argparse failures through the documented exit-code contract
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunConfig:
    training: train.TrainConfig = field(default_factory=train.TrainConfig)
    train_images: str = ""
    train_labels: str = ""
    classes: tuple = ()
    samples: int = 0
    output_dir: str = "out"


def run_config_from_dict(kv: dict) -> RunConfig:
    kv = dict(kv)
    rc = RunConfig()
    if "train_images" in kv:
        rc.train_images = kv.pop("train_images")
    if "train_labels" in kv:
        rc.train_labels = kv.pop("train_labels")
    if "classes" in kv:
        raw = kv.pop("classes")
        try:
            rc.classes = tuple(int(c) for c in raw.split(",") if c.strip())
        except ValueError:
            raise ValueError(f"bad value for classes: {raw!r}")
    if "samples" in kv:
        raw = kv.pop("samples")
        try:
            rc.samples = int(raw)
        except ValueError:
            raise ValueError(f"bad value for samples: {raw!r}")
    if "output_dir" in kv:
        rc.output_dir = kv.pop("output_dir")
    rc.training = train.config_from_dict(kv)
    if rc.samples < 0:
        raise ValueError("samples must be >= 0")
    return rc


def load_run_config(path: str) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return run_config_from_dict(train.parse_kv_text(text))


def _load_real_images(rc: RunConfig) -> data.Dataset:
    """The training/reference set: optional class filter, optional subsample."""
    if not rc.train_images or not rc.train_labels:
        raise UsageError("config must set train_images and train_labels")
    ds = data.load_dataset(rc.train_images, rc.train_labels)
    classes = rc.classes if rc.classes else tuple(np.unique(ds.labels).tolist())
    if rc.samples > 0:
        return data.subsample(ds, classes, rc.samples,
                              train.make_stream(rc.training.seed, "data"))
    mask = np.isin(ds.labels, list(classes))
    return data.Dataset(ds.images[mask], ds.labels[mask], ds.name)


def _say_seed(seed: int):
    print(f"effective seed: {seed}")


def cmd_train(args) -> int:
    rc = load_run_config(args.config)
    if args.variant:
        rc.training.variant = args.variant
    if args.seed is not None:
        rc.training.seed = args.seed
    if args.output_dir:
        rc.output_dir = args.output_dir
    rc.training.validate()
    _say_seed(rc.training.seed)
    dataset = _load_real_images(rc)
    os.makedirs(rc.output_dir, exist_ok=True)
    train.train(rc.training, dataset, out_dir=rc.output_dir,
                init_from=args.init_from, log=print)
    print(f"wrote {rc.output_dir}")
    return 0


def cmd_gmm(args) -> int:
    seed = 0
    if args.config:
        seed = load_run_config(args.config).training.seed
    if args.seed is not None:
        seed = args.seed
    _say_seed(seed)
    latents = np.load(args.latents)
    if latents.ndim != 2 or latents.shape[0] == 0:
        raise ValueError(f"latents must be a non-empty 2-D array, "
                         f"got shape {latents.shape}")
    if not np.isfinite(latents).all():
        raise ValueError("latents contain non-finite values")
    best, results = infer.select_gmm(latents, train.make_stream(seed, "gmm"))
    infer.save_gmm(best, args.out)
    bic_path = args.bic_csv or os.path.splitext(args.out)[0] + "_bic.csv"
    with open(bic_path, "w", encoding="utf-8") as fh:
        fh.write(BIC_CSV_HEADER + "\n")
        for k, cov_type, score, p in results:
            fh.write(f"{k},{cov_type},{repr(float(score))},{p}\n")
    print(f"selected {best.n_components} components ({best.covariance_type}); "
          f"wrote {args.out} and {bic_path}")
    return 0


def _generate_images(ckpt: train.Checkpoint, gmm, n: int, seed: int,
                     threads: int) -> np.ndarray:
    cfg = ckpt.config
    if cfg.variant == "vae-qwgan":
        if gmm is None:
            raise UsageError("vae-qwgan checkpoints need --gmm for generation")
        if gmm.dim != cfg.generator.n_qubits:
            raise ValueError(f"mixture dimension {gmm.dim} does not match "
                             f"latent dimension {cfg.generator.n_qubits}")
        return infer.sample_and_generate(gmm, ckpt.gen, n,
                                         train.make_stream(seed, "gmm"),
                                         threads=threads)
    z = train._prior_latents(cfg, train.make_stream(seed, "prior"), n)
    g = cfg.generator
    out = np.empty((n, g.image_height, g.image_width))
    for start in range(0, n, 64):
        chunk = z[start:start + 64]
        imgs = model.generate(nn.Tensor(chunk), ckpt.gen, threads=threads).data
        out[start:start + len(chunk)] = imgs.reshape(len(chunk), g.image_height,
                                                     g.image_width)
    return out


def cmd_generate(args) -> int:
    ckpt = train.load_checkpoint(args.checkpoint)
    seed = ckpt.config.seed if args.seed is None else args.seed
    _say_seed(seed)
    if args.num < 0:
        raise UsageError("-n must be >= 0")
    if args.num == 0:
        print("nothing to generate")
        return 0
    gmm = infer.load_gmm(args.gmm) if args.gmm else None
    threads = ckpt.config.resolved_threads()
    images = _generate_images(ckpt, gmm, args.num, seed, threads)
    os.makedirs(args.out_dir, exist_ok=True)
    np.save(os.path.join(args.out_dir, "generated.npy"), images)
    rows = max(1, int(np.floor(np.sqrt(args.num))))
    cols = int(np.ceil(args.num / rows))
    data.export_image_grid(images, rows, cols,
                           os.path.join(args.out_dir, "generated.pgm"))
    print(f"wrote {args.num} images to {args.out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    rc = load_run_config(args.config)
    if args.pairing:
        rc.training.pairing = args.pairing
    rc.training.validate()
    seed = rc.training.seed if args.seed is None else args.seed
    _say_seed(seed)
    real = _load_real_images(rc).images
    gen = np.load(args.generated)
    if gen.ndim not in (2, 3) or len(gen) == 0:
        raise ValueError(f"generated array has unusable shape {gen.shape}")
    scores = metrics.evaluate_batches(real.reshape(len(real), -1),
                                      gen.reshape(len(gen), -1),
                                      train.make_stream(seed, "eval"),
                                      k=rc.training.metric_bins,
                                      alpha=rc.training.ndb_alpha,
                                      pairing=rc.training.pairing)
    row = ",".join(repr(float(scores[k]))
                   for k in ("jsd", "ndb_k", "ssim", "psnr", "cosine", "fd"))
    row += f",{rc.training.metric_bins},{repr(float(rc.training.ndb_alpha))}"
    row += f",{rc.training.pairing},{seed}"
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(EVAL_CSV_HEADER + "\n")
        fh.write(row + "\n")
    print(f"wrote {args.out}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="vqwgan",
                     description="hybrid quantum-classical image generation")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the training loop")
    t.add_argument("--config", required=True)
    t.add_argument("--variant", choices=train.VARIANTS)
    t.add_argument("--init-from", help="warm-start parameters from a checkpoint")
    t.add_argument("--output-dir")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("gmm", help="fit the latent mixture by BIC grid search")
    g.add_argument("--latents", required=True, help=".npy file of latent vectors")
    g.add_argument("--out", required=True, help="path for the mixture model")
    g.add_argument("--bic-csv", help="path for the per-configuration scores")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gmm)

    gen = sub.add_parser("generate", help="sample images from a trained model")
    gen.add_argument("--checkpoint", required=True)
    gen.add_argument("--gmm", help="mixture model (required for vae-qwgan)")
    gen.add_argument("-n", "--num", type=int, default=16)
    gen.add_argument("--out-dir", required=True)
    gen.add_argument("--seed", type=int)
    gen.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="score generated images against the data")
    e.add_argument("--config", required=True)
    e.add_argument("--generated", required=True, help=".npy file of images")
    e.add_argument("--out", required=True, help="path for the one-row CSV")
    e.add_argument("--pairing", choices=metrics.PAIRING_POLICIES)
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures: missing files, divergence
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
