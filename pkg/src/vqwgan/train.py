"""Training loop, RNG stream discipline, checkpointing, per-epoch metric log.

One iteration follows the training algorithm literally: sample a batch X,
draw Z from the encoder posterior (or the prior, for the encoder-free
variants), render X' = G(Z) once, run n_critic critic updates on the
detached X' with fresh interpolation noise each time, then one encoder
update (KL + reconstruction) and one generator update (gamma * recon minus
the adversarial gap).  The gradient penalty reaches only the critic.

Randomness comes from one master seed fanned out into fixed named streams,
so adding a consumer to one stream never shifts any other.
"""

import io
import json
import os
import struct
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import data as data_mod
from . import losses, metrics, model, nn
from .qsim import DegeneratePostselectionError

VARIANTS = ("vae-qwgan", "pqwgan-normal", "pqwgan-uniform")
LATENT_SOURCES = ("mean", "sample")
INTERPOLATIONS = ("per-sample", "per-batch")

# fixed stream labels: adding a new consumer gets a new id, existing ids never move
RNG_STREAMS = {
    "init": 0,
    "shuffle": 1,
    "reparam": 2,
    "interp": 3,
    "gmm": 4,
    "eval": 5,
    "prior": 6,
    "data": 7,
}

CSV_HEADER = "epoch,wasserstein_estimate,recon,kl,jsd,ndb_k,ssim,psnr,cosine,fd"

CHECKPOINT_MAGIC = b"VQG1"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointFormatError(ValueError):
    pass


def make_stream(seed: int, name: str) -> np.random.Generator:
    """Named child generator of the master seed."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(RNG_STREAMS[name],))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 8
    n_critic: int = 5
    gp_lambda: float = 10.0
    gamma: float = 0.0005
    lr_generator: float = 0.01
    lr_encoder: float = 0.0003
    lr_critic: float = 0.0005
    beta1: float = 0.0
    beta2: float = 0.9
    adam_eps: float = 1e-8
    seed: int = 0
    critic_sign: str = "mirrored"
    variant: str = "vae-qwgan"
    latent_source: str = "mean"
    interpolation: str = "per-sample"
    threads: int = 0
    metric_bins: int = 20
    ndb_alpha: float = 0.05
    pairing: str = "nearest"
    eval_samples: int = 0
    warm_start: str = ""
    generator: model.GeneratorConfig = field(default_factory=model.GeneratorConfig)

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.n_critic < 1:
            raise ValueError("n_critic must be >= 1")
        for name in ("lr_generator", "lr_encoder", "lr_critic"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.critic_sign not in losses.SIGN_CONVENTIONS:
            raise ValueError(f"critic_sign must be one of {losses.SIGN_CONVENTIONS}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.latent_source not in LATENT_SOURCES:
            raise ValueError(f"latent_source must be one of {LATENT_SOURCES}")
        if self.interpolation not in INTERPOLATIONS:
            raise ValueError(f"interpolation must be one of {INTERPOLATIONS}")
        if self.pairing not in metrics.PAIRING_POLICIES:
            raise ValueError(f"pairing must be one of {metrics.PAIRING_POLICIES}")
        if not 0.0 <= self.ndb_alpha < 1.0:
            raise ValueError("ndb_alpha must lie in [0, 1)")
        if self.metric_bins < 1:
            raise ValueError("metric_bins must be >= 1")
        if self.threads < 0:
            raise ValueError("threads must be >= 0")
        self.generator.validate()
        return self

    def resolved_threads(self) -> int:
        if self.threads == 0:
            return min(self.generator.n_subgens, os.cpu_count() or 1)
        return self.threads


# config <-> flat text.  The generator sub-config is inlined under its own keys.
_GENERATOR_KEYS = ("n_subgens", "n_qubits", "n_ancilla", "layers",
                   "image_height", "image_width")


def iterations_per_epoch(n_samples: int, batch_size: int) -> int:
    """Remainder samples that do not fill a batch are dropped."""
    return n_samples // batch_size


def config_to_text(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        # threads is an execution detail: results are thread-count invariant,
        # and checkpoints must be byte-identical across thread settings
        if f.name in ("generator", "threads"):
            continue
        value = getattr(cfg, f.name)
        if isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name} = {value}")
    for key in _GENERATOR_KEYS:
        lines.append(f"{key} = {getattr(cfg.generator, key)}")
    return "\n".join(lines) + "\n"


def parse_kv_text(text: str) -> dict:
    """Flat `key = value` lines; '#' starts a comment; blank lines ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def config_from_dict(kv: dict, reject_unknown: bool = True) -> TrainConfig:
    kv = dict(kv)
    cfg = TrainConfig()
    gen_kwargs = {}
    for key in _GENERATOR_KEYS:
        if key in kv:
            gen_kwargs[key] = int(kv.pop(key))
    for f in fields(TrainConfig):
        if f.name == "generator" or f.name not in kv:
            continue
        raw = kv.pop(f.name)
        kind = type(getattr(cfg, f.name))
        try:
            value = kind(raw)
        except ValueError as exc:
            raise ValueError(f"bad value for {f.name}: {raw!r}") from exc
        setattr(cfg, f.name, value)
    if reject_unknown and kv:
        raise ValueError(f"unknown config keys: {sorted(kv)}")
    cfg.generator = replace(model.GeneratorConfig(), **gen_kwargs)
    return cfg.validate()


def config_from_text(text: str) -> TrainConfig:
    return config_from_dict(parse_kv_text(text))


def init_params(cfg: TrainConfig, rng: np.random.Generator):
    """(theta, omega, phi): generator angles U[0, 2pi), Kaiming nets, zero biases.

    Draw order is fixed: generator, then encoder, then critic, so the
    encoder-free variants still give the critic different bits than the
    generator got.
    """
    gen = model.init_generator(cfg.generator, rng)
    enc = None
    if cfg.variant == "vae-qwgan":
        enc = model.init_encoder(rng, latent_dim=cfg.generator.n_qubits,
                                 input_hw=cfg.generator.image_height)
    critic = model.init_critic(rng, input_dim=cfg.generator.n_pixels)
    return gen, enc, critic


@dataclass
class MetricReport:
    epoch: int
    wasserstein_estimate: float
    recon: float
    kl: float
    jsd: float
    ndb_k: float
    ssim: float
    psnr: float
    cosine: float
    fd: float

    def csv_row(self) -> str:
        vals = [self.epoch, self.wasserstein_estimate, self.recon, self.kl,
                self.jsd, self.ndb_k, self.ssim, self.psnr, self.cosine, self.fd]
        return ",".join(str(v) if isinstance(v, int) else repr(float(v))
                        for v in vals)


def write_metrics_csv(reports, path: str):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in reports:
            fh.write(r.csv_row() + "\n")


@dataclass
class Checkpoint:
    config: TrainConfig
    epoch: int
    gen: model.GeneratorParams
    enc: model.EncoderParams
    critic: model.CriticParams
    adam_gen: tuple
    adam_enc: tuple
    adam_critic: tuple
    rng_states: dict


def _pack_arrays(arrays) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(arrays)))
    for arr in arrays:
        arr = np.asarray(arr, dtype=np.float64)
        buf.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(arr.astype("<f8").tobytes())
    return buf.getvalue()


def _unpack_arrays(blob: bytes):
    view = memoryview(blob)
    (count,) = struct.unpack_from("<I", view, 0)
    offset = 4
    arrays = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", view, offset)
        offset += 4
        shape = []
        for _ in range(ndim):
            (dim,) = struct.unpack_from("<Q", view, offset)
            offset += 8
            shape.append(dim)
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(view, dtype="<f8", count=n, offset=offset).reshape(shape)
        offset += n * 8
        arrays.append(arr.copy())
    return arrays


def _pack_adam(state) -> bytes:
    if state is None:
        return struct.pack("<Q", 0) + _pack_arrays([])
    arrays, t = state
    return struct.pack("<Q", t) + _pack_arrays(arrays)


def _unpack_adam(blob: bytes):
    (t,) = struct.unpack("<Q", blob[:8])
    arrays = _unpack_arrays(blob[8:])
    if not arrays:
        return None
    return arrays, t


_SECTION_ORDER = ("config", "state", "theta", "encoder", "critic",
                  "adam_gen", "adam_enc", "adam_critic")


def save_checkpoint(ckpt: Checkpoint, path: str):
    sections = {
        "config": config_to_text(ckpt.config).encode("utf-8"),
        "state": json.dumps({"epoch": ckpt.epoch, "rng": ckpt.rng_states},
                            sort_keys=True).encode("utf-8"),
        "theta": _pack_arrays([t.data for t in ckpt.gen.thetas]),
        "encoder": _pack_arrays([p.data for p in ckpt.enc.parameters()]
                                if ckpt.enc is not None else []),
        "critic": _pack_arrays([p.data for p in ckpt.critic.parameters()]),
        "adam_gen": _pack_adam(ckpt.adam_gen),
        "adam_enc": _pack_adam(ckpt.adam_enc),
        "adam_critic": _pack_adam(ckpt.adam_critic),
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(_SECTION_ORDER)))
        for name in _SECTION_ORDER:
            blob = sections[name]
            encoded = name.encode("ascii")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<Q", len(blob)))
        for name in _SECTION_ORDER:
            fh.write(sections[name])


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    version, n_sections = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    offset = 12
    table = []
    for _ in range(n_sections):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + name_len].decode("ascii")
        offset += name_len
        (size,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
        table.append((name, size))
    sections = {}
    for name, size in table:
        sections[name] = blob[offset:offset + size]
        offset += size
    missing = set(_SECTION_ORDER) - set(sections)
    if missing:
        raise CheckpointFormatError(f"missing checkpoint sections: {sorted(missing)}")

    cfg = config_from_text(sections["config"].decode("utf-8"))
    state = json.loads(sections["state"].decode("utf-8"))

    thetas = _unpack_arrays(sections["theta"])
    gen = model.GeneratorParams(cfg.generator,
                                [nn.Tensor(t, requires_grad=True) for t in thetas])
    enc_arrays = _unpack_arrays(sections["encoder"])
    enc = None
    if enc_arrays:
        enc = model.init_encoder(np.random.default_rng(0),
                                 latent_dim=cfg.generator.n_qubits,
                                 input_hw=cfg.generator.image_height)
        for p, arr in zip(enc.parameters(), enc_arrays, strict=True):
            p.data = arr.reshape(p.data.shape)
    critic_arrays = _unpack_arrays(sections["critic"])
    critic = model.init_critic(np.random.default_rng(0),
                               input_dim=cfg.generator.n_pixels)
    for p, arr in zip(critic.parameters(), critic_arrays, strict=True):
        p.data = arr.reshape(p.data.shape)

    return Checkpoint(cfg, int(state["epoch"]), gen, enc, critic,
                      _unpack_adam(sections["adam_gen"]),
                      _unpack_adam(sections["adam_enc"]),
                      _unpack_adam(sections["adam_critic"]),
                      state["rng"])


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    reports: list
    latents: np.ndarray
    degenerate_steps: int = 0


def _prior_latents(cfg: TrainConfig, rng: np.random.Generator, n: int) -> np.ndarray:
    if cfg.variant == "pqwgan-uniform":
        return rng.uniform(0.0, 1.0, size=(n, cfg.generator.n_qubits))
    return rng.standard_normal((n, cfg.generator.n_qubits))


def _zero_all(*param_lists):
    for params in param_lists:
        for p in params:
            p.grad = None


def _check_finite(value: float, what: str, epoch: int, iteration: int):
    if not np.isfinite(value):
        raise TrainingDivergedError(
            f"{what} is {value} at epoch {epoch}, iteration {iteration}")


def train(cfg: TrainConfig, dataset: data_mod.Dataset, out_dir: str = None,
          init_from: str = None, log=None) -> TrainResult:
    """Run the full training loop.

    ``out_dir``, when given, receives one checkpoint and one sample-grid PGM
    per epoch plus metrics.csv and the collected latents.  ``init_from``
    warm-starts all parameter sets from an existing checkpoint (the
    transfer-learning protocol); optimizer and RNG state start fresh.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if len(dataset) < cfg.batch_size:
        raise ValueError("dataset smaller than one batch")
    say = log if log is not None else (lambda msg: None)

    rng_init = make_stream(cfg.seed, "init")
    rng_shuffle = make_stream(cfg.seed, "shuffle")
    rng_reparam = make_stream(cfg.seed, "reparam")
    rng_interp = make_stream(cfg.seed, "interp")
    rng_eval = make_stream(cfg.seed, "eval")
    rng_prior = make_stream(cfg.seed, "prior")

    gen, enc, critic = init_params(cfg, rng_init)
    if init_from:
        warm = load_checkpoint(init_from)
        pairs = list(zip(gen.thetas, warm.gen.thetas, strict=True))
        if enc is not None and warm.enc is not None:
            pairs += list(zip(enc.parameters(), warm.enc.parameters(), strict=True))
        pairs += list(zip(critic.parameters(), warm.critic.parameters(), strict=True))
        for dst, src in pairs:
            if dst.data.shape != src.data.shape:
                raise ValueError(
                    f"warm-start shape mismatch: {src.data.shape} vs {dst.data.shape}")
            dst.data = src.data.copy()

    opt_gen = nn.Adam(gen.parameters(), cfg.lr_generator, cfg.beta1, cfg.beta2,
                      cfg.adam_eps)
    opt_enc = (nn.Adam(enc.parameters(), cfg.lr_encoder, cfg.beta1, cfg.beta2,
                       cfg.adam_eps) if enc is not None else None)
    opt_critic = nn.Adam(critic.parameters(), cfg.lr_critic, cfg.beta1, cfg.beta2,
                         cfg.adam_eps)

    n = len(dataset)
    m = cfg.batch_size
    iters = iterations_per_epoch(n, m)
    if iters == 0:
        raise ValueError("batch size larger than dataset")
    flat = dataset.images.reshape(n, -1)
    threads = cfg.resolved_threads()
    latent_dim = cfg.generator.n_qubits
    vae = enc is not None

    n_eval = cfg.eval_samples if cfg.eval_samples > 0 else min(256, n)
    n_eval = min(n_eval, n)
    eval_idx = rng_eval.choice(n, size=n_eval, replace=False)
    eval_real = flat[eval_idx]

    all_params = [gen.parameters(), critic.parameters()]
    if vae:
        all_params.append(enc.parameters())

    reports = []
    degenerate_steps = 0
    latents = np.zeros((0, latent_dim))
    for epoch in range(1, cfg.epochs + 1):
        perm = rng_shuffle.permutation(n)
        w_sum = recon_sum = kl_sum = 0.0
        steps_done = 0
        for it in range(iters):
            batch_idx = perm[it * m:(it + 1) * m]
            x_real = flat[batch_idx]
            # draws happen before the try block so a degenerate step cannot
            # desynchronize the streams between runs
            eps_rep = rng_reparam.standard_normal((m, latent_dim))
            if cfg.interpolation == "per-sample":
                eps_int = rng_interp.uniform(size=(cfg.n_critic, m, 1))
            else:
                eps_int = np.broadcast_to(
                    rng_interp.uniform(size=(cfg.n_critic, 1, 1)),
                    (cfg.n_critic, m, 1)).copy()
            z_prior = None if vae else _prior_latents(cfg, rng_prior, m)
            try:
                if vae:
                    mu, logvar = model.encode(x_real, enc)
                    z = model.reparameterize(mu, logvar, eps_rep)
                else:
                    z = nn.Tensor(z_prior)
                x_fake = model.generate(z, gen, threads=threads)

                recon = losses.recon_loss(x_real, x_fake) if vae else None
                kl = losses.kl_loss(mu, logvar) if vae else None

                fake_detached = x_fake.data.copy()
                for t in range(cfg.n_critic):
                    _zero_all(*all_params)
                    closs = losses.critic_loss(x_real, fake_detached, critic,
                                               eps_int[t], cfg.gp_lambda,
                                               cfg.critic_sign)
                    _check_finite(closs.item(), "critic loss", epoch, it)
                    nn.backward(closs)
                    opt_critic.step()

                scores_real = model.criticize(x_real, critic).data
                scores_fake = model.criticize(fake_detached, critic).data
                w_sum += losses.wasserstein_estimate(scores_real, scores_fake)

                if vae:
                    _zero_all(*all_params)
                    eloss = losses.encoder_loss(kl, recon)
                    _check_finite(eloss.item(), "encoder loss", epoch, it)
                    nn.backward(eloss)
                    opt_enc.step()
                    recon_sum += recon.item()
                    kl_sum += kl.item()

                _zero_all(*all_params)
                gap = losses.critic_gap(model.criticize(x_real, critic),
                                        model.criticize(x_fake, critic),
                                        cfg.critic_sign)
                gloss = (losses.generator_loss(recon, gap, cfg.gamma) if vae
                         else nn.mul(gap, -1.0))
                _check_finite(gloss.item(), "generator loss", epoch, it)
                nn.backward(gloss)
                opt_gen.step()
                steps_done += 1
            except DegeneratePostselectionError:
                degenerate_steps += 1
                say(f"epoch {epoch} iteration {it}: degenerate post-selection, "
                    f"step skipped")
                continue

        if steps_done == 0:
            raise TrainingDivergedError(
                f"every iteration of epoch {epoch} hit degenerate post-selection")

        report = _evaluate_epoch(cfg, epoch, gen, enc, eval_real, rng_eval,
                                 threads,
                                 w_sum / steps_done,
                                 recon_sum / steps_done if vae else float("nan"),
                                 kl_sum / steps_done if vae else float("nan"),
                                 out_dir)
        reports.append(report)
        say(f"epoch {epoch}: " + report.csv_row())

        if epoch == cfg.epochs:
            latents = collect_latents(cfg, gen, enc, flat, rng_eval)

        if out_dir:
            ckpt = Checkpoint(cfg, epoch, gen, enc, critic,
                              opt_gen.state_arrays(),
                              opt_enc.state_arrays() if opt_enc else None,
                              opt_critic.state_arrays(),
                              _rng_states({"shuffle": rng_shuffle,
                                           "reparam": rng_reparam,
                                           "interp": rng_interp,
                                           "eval": rng_eval,
                                           "prior": rng_prior}))
            save_checkpoint(ckpt, os.path.join(out_dir, f"epoch_{epoch:03d}.ckpt"))

    final = Checkpoint(cfg, cfg.epochs, gen, enc, critic,
                       opt_gen.state_arrays(),
                       opt_enc.state_arrays() if opt_enc else None,
                       opt_critic.state_arrays(),
                       _rng_states({"shuffle": rng_shuffle,
                                    "reparam": rng_reparam,
                                    "interp": rng_interp,
                                    "eval": rng_eval,
                                    "prior": rng_prior}))
    if out_dir:
        write_metrics_csv(reports, os.path.join(out_dir, "metrics.csv"))
        np.save(os.path.join(out_dir, "latents.npy"), latents)
    return TrainResult(final, reports, latents, degenerate_steps)


def _rng_states(streams: dict) -> dict:
    return {name: json.loads(json.dumps(rng.bit_generator.state))
            for name, rng in streams.items()}


def _epoch_eval_images(cfg: TrainConfig, gen, enc, eval_real, rng_eval, threads):
    """Generated images for the per-epoch metric row.

    The encoder variant reconstructs the held-out inputs (paired by index);
    the prior variants sample fresh z and pair by config policy.
    """
    n_eval = len(eval_real)
    out = np.empty((n_eval, cfg.generator.n_pixels))
    step = 64
    if enc is not None:
        for s in range(0, n_eval, step):
            chunk = eval_real[s:s + step]
            mu, _ = model.encode(chunk, enc)
            out[s:s + len(chunk)] = model.generate(nn.Tensor(mu.data), gen,
                                                   threads=threads).data
        return out, "index"
    z = _prior_latents(cfg, rng_eval, n_eval)
    for s in range(0, n_eval, step):
        chunk = z[s:s + step]
        out[s:s + len(chunk)] = model.generate(nn.Tensor(chunk), gen,
                                               threads=threads).data
    return out, cfg.pairing


def _evaluate_epoch(cfg, epoch, gen, enc, eval_real, rng_eval, threads,
                    w_mean, recon_mean, kl_mean, out_dir):
    gen_imgs, pairing = _epoch_eval_images(cfg, gen, enc, eval_real, rng_eval,
                                           threads)
    scores = metrics.evaluate_batches(eval_real, gen_imgs, rng_eval,
                                      k=cfg.metric_bins, alpha=cfg.ndb_alpha,
                                      pairing=pairing)
    if out_dir:
        side = cfg.generator.image_height
        count = min(16, len(gen_imgs))
        rows = max(1, int(np.floor(np.sqrt(count))))
        cols = int(np.ceil(count / rows))
        data_mod.export_image_grid(gen_imgs[:count].reshape(count, side, -1),
                                   rows, cols,
                                   os.path.join(out_dir, f"samples_{epoch:03d}.pgm"))
    return MetricReport(epoch, w_mean, recon_mean, kl_mean,
                        scores["jsd"], scores["ndb_k"], scores["ssim"],
                        scores["psnr"], scores["cosine"], scores["fd"])


def collect_latents(cfg: TrainConfig, gen, enc, flat: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    """One latent per training sample, for the GMM stage.

    ``mean`` takes the posterior mean; ``sample`` draws one z per input.
    The prior variants have no encoder, so they yield an empty array.
    """
    if enc is None:
        return np.zeros((0, cfg.generator.n_qubits))
    out = np.empty((len(flat), cfg.generator.n_qubits))
    step = 256
    for s in range(0, len(flat), step):
        chunk = flat[s:s + step]
        mu, logvar = model.encode(chunk, enc)
        if cfg.latent_source == "mean":
            out[s:s + len(chunk)] = mu.data
        else:
            eps = rng.standard_normal(mu.data.shape)
            out[s:s + len(chunk)] = mu.data + np.exp(logvar.data / 2.0) * eps
    return out
