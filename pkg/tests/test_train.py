import os

import numpy as np
import pytest
from scipy import stats

from vqwgan import data, losses, model, nn, train


def tiny_gen_config():
    return model.GeneratorConfig(n_subgens=4, n_qubits=5, n_ancilla=1,
                                 layers=2, image_height=8, image_width=8)


def tiny_cfg(**kw):
    base = dict(epochs=1, batch_size=4, n_critic=2, seed=0, threads=1,
                eval_samples=8, metric_bins=4, generator=tiny_gen_config())
    base.update(kw)
    return train.TrainConfig(**base)


def tiny_dataset(n=12, seed=0):
    rng = np.random.default_rng(seed)
    imgs = rng.uniform(0.2, 1.0, size=(n, 8, 8))
    return data.Dataset(images=imgs, labels=np.zeros(n, dtype=np.int64), name="tiny")


def theta_stack(ckpt):
    return np.stack([t.data for t in ckpt.gen.thetas])


def test_config_text_roundtrip():
    cfg = tiny_cfg(gamma=0.125, variant="pqwgan-uniform", critic_sign="standard",
                   seed=42, warm_start="prev.ckpt", threads=0)
    back = train.config_from_text(train.config_to_text(cfg))
    assert back == cfg


def test_thread_count_is_not_persisted():
    # checkpoints must not depend on the execution thread count
    text = train.config_to_text(tiny_cfg(threads=5))
    assert "threads" not in text
    assert train.config_from_text(text).threads == 0


def test_config_rejects_unknown_key():
    with pytest.raises(ValueError, match="unknown config keys"):
        train.config_from_dict({"learning_rate": "0.1"})


def test_config_rejects_bad_value():
    with pytest.raises(ValueError, match="bad value"):
        train.config_from_dict({"epochs": "ten"})


def test_kv_text_parsing():
    kv = train.parse_kv_text("a = 1  # trailing comment\n\n# full line\n b=2\n")
    assert kv == {"a": "1", "b": "2"}
    with pytest.raises(ValueError, match="duplicate"):
        train.parse_kv_text("a = 1\na = 2\n")
    with pytest.raises(ValueError, match="key = value"):
        train.parse_kv_text("just words\n")


def test_config_validation():
    with pytest.raises(ValueError, match="variant"):
        tiny_cfg(variant="dcgan").validate()
    with pytest.raises(ValueError, match="n_critic"):
        tiny_cfg(n_critic=0).validate()
    with pytest.raises(ValueError, match="lr_generator"):
        tiny_cfg(lr_generator=0.0).validate()


def test_named_streams_are_independent():
    a1 = train.make_stream(0, "shuffle").uniform(size=5)
    # consuming another stream first must not shift this one
    train.make_stream(0, "reparam").uniform(size=100)
    a2 = train.make_stream(0, "shuffle").uniform(size=5)
    assert np.array_equal(a1, a2)
    b = train.make_stream(0, "reparam").uniform(size=5)
    c = train.make_stream(1, "shuffle").uniform(size=5)
    assert not np.array_equal(a1, b)
    assert not np.array_equal(a1, c)


def test_init_angles_look_uniform():
    # all 3528 full-size angles against U[0, 2*pi)
    gen = model.init_generator(model.GeneratorConfig(),
                               train.make_stream(0, "init"))
    angles = np.concatenate([t.data.ravel() for t in gen.thetas])
    assert angles.size == 3528
    assert stats.kstest(angles / (2.0 * np.pi), "uniform").pvalue > 0.01


def test_step_counts_follow_the_algorithm():
    # 12 samples, batch 4 -> 3 iterations; critic steps n_critic times each
    cfg = tiny_cfg()
    result = train.train(cfg, tiny_dataset())
    assert result.checkpoint.adam_critic[1] == 3 * cfg.n_critic
    assert result.checkpoint.adam_gen[1] == 3
    assert result.checkpoint.adam_enc[1] == 3


def test_remainder_batches_are_dropped():
    cfg = tiny_cfg(batch_size=5)
    result = train.train(cfg, tiny_dataset(n=13))
    assert result.checkpoint.adam_gen[1] == 2


def test_one_iteration_touches_every_network():
    cfg = tiny_cfg()
    ds = tiny_dataset(n=4)  # exactly one batch
    rng = train.make_stream(cfg.seed, "init")
    gen0, enc0, critic0 = train.init_params(cfg, rng)
    before = [t.data.copy() for t in gen0.thetas]
    result = train.train(cfg, ds)
    ck = result.checkpoint
    assert all(not np.array_equal(a.data, b) for a, b in zip(ck.gen.thetas, before))
    assert ck.adam_critic[1] == cfg.n_critic
    assert ck.adam_gen[1] == 1
    assert ck.adam_enc[1] == 1


def test_training_is_deterministic():
    cfg = tiny_cfg(epochs=2)
    r1 = train.train(cfg, tiny_dataset())
    r2 = train.train(cfg, tiny_dataset())
    assert np.array_equal(theta_stack(r1.checkpoint), theta_stack(r2.checkpoint))
    assert [m.csv_row() for m in r1.reports] == [m.csv_row() for m in r2.reports]
    assert np.array_equal(r1.latents, r2.latents)


def test_thread_count_does_not_change_results():
    r1 = train.train(tiny_cfg(threads=1), tiny_dataset())
    r2 = train.train(tiny_cfg(threads=3), tiny_dataset())
    assert np.array_equal(theta_stack(r1.checkpoint), theta_stack(r2.checkpoint))
    assert [m.csv_row() for m in r1.reports] == [m.csv_row() for m in r2.reports]


def test_seed_changes_results():
    r1 = train.train(tiny_cfg(), tiny_dataset())
    r2 = train.train(tiny_cfg(seed=1), tiny_dataset())
    assert not np.array_equal(theta_stack(r1.checkpoint), theta_stack(r2.checkpoint))


def test_output_files(tmp_path):
    cfg = tiny_cfg()
    result = train.train(cfg, tiny_dataset(), out_dir=str(tmp_path))
    assert (tmp_path / "epoch_001.ckpt").exists()
    assert (tmp_path / "samples_001.pgm").exists()
    assert (tmp_path / "metrics.csv").exists()
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == train.CSV_HEADER
    assert len(lines) == 1 + cfg.epochs
    row = lines[1].split(",")
    assert int(row[0]) == 1
    for cell in row[1:]:
        float(cell)  # every metric parses back
    latents = np.load(tmp_path / "latents.npy")
    assert latents.shape == (12, cfg.generator.n_qubits)
    assert np.array_equal(latents, result.latents)
    grid = data.read_pgm(str(tmp_path / "samples_001.pgm"))
    assert grid.shape == (2 * 8 + 1, 4 * 8 + 3)  # 8 tiles in 2 rows of 4


def test_checkpoint_roundtrip_is_byte_exact(tmp_path):
    result = train.train(tiny_cfg(), tiny_dataset())
    p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    train.save_checkpoint(result.checkpoint, p1)
    loaded = train.load_checkpoint(p1)
    train.save_checkpoint(loaded, p2)
    with open(p1, "rb") as f1, open(p2, "rb") as f2:
        assert f1.read() == f2.read()
    assert np.array_equal(theta_stack(loaded), theta_stack(result.checkpoint))
    from dataclasses import replace
    assert loaded.config == replace(result.checkpoint.config, threads=0)
    assert loaded.rng_states == result.checkpoint.rng_states
    got = [p.data for p in loaded.enc.parameters()]
    want = [p.data for p in result.checkpoint.enc.parameters()]
    assert all(np.array_equal(a, b) for a, b in zip(got, want, strict=True))


def test_checkpoint_bad_magic_and_version(tmp_path):
    result = train.train(tiny_cfg(), tiny_dataset())
    path = str(tmp_path / "c.ckpt")
    train.save_checkpoint(result.checkpoint, path)
    blob = bytearray(open(path, "rb").read())
    wrong = bytes(blob).replace(train.CHECKPOINT_MAGIC, b"XXXX", 1)
    open(path, "wb").write(wrong)
    with pytest.raises(train.CheckpointFormatError, match="magic"):
        train.load_checkpoint(path)
    blob[4] = 99  # version field
    open(path, "wb").write(bytes(blob))
    with pytest.raises(train.CheckpointFormatError, match="version"):
        train.load_checkpoint(path)


def test_warm_start(tmp_path):
    ds = tiny_dataset()
    train.train(tiny_cfg(), ds, out_dir=str(tmp_path))
    ckpt_path = str(tmp_path / "epoch_001.ckpt")
    cold = train.train(tiny_cfg(seed=1), ds)
    warm1 = train.train(tiny_cfg(seed=1), ds, init_from=ckpt_path)
    warm2 = train.train(tiny_cfg(seed=1), ds, init_from=ckpt_path)
    assert np.array_equal(theta_stack(warm1.checkpoint), theta_stack(warm2.checkpoint))
    assert not np.array_equal(theta_stack(warm1.checkpoint),
                              theta_stack(cold.checkpoint))


def test_warm_start_shape_mismatch(tmp_path):
    train.train(tiny_cfg(), tiny_dataset(), out_dir=str(tmp_path))
    other = tiny_gen_config()
    other.layers = 3
    with pytest.raises(ValueError, match="shape mismatch"):
        train.train(tiny_cfg(generator=other), tiny_dataset(),
                    init_from=str(tmp_path / "epoch_001.ckpt"))


def test_prior_variants_have_no_encoder():
    for variant in ("pqwgan-normal", "pqwgan-uniform"):
        cfg = tiny_cfg(variant=variant)
        result = train.train(cfg, tiny_dataset())
        assert result.checkpoint.enc is None
        assert result.checkpoint.adam_enc is None
        assert result.latents.shape == (0, cfg.generator.n_qubits)
        assert np.isnan(result.reports[0].recon)
        assert np.isnan(result.reports[0].kl)
        assert np.isfinite(result.reports[0].fd)


def test_uniform_prior_draws_differ_from_normal():
    cfg_n = tiny_cfg(variant="pqwgan-normal")
    cfg_u = tiny_cfg(variant="pqwgan-uniform")
    rng = train.make_stream(0, "prior")
    zn = train._prior_latents(cfg_n, rng, 64)
    rng = train.make_stream(0, "prior")
    zu = train._prior_latents(cfg_u, rng, 64)
    assert zn.min() < 0.0
    assert zu.min() >= 0.0 and zu.max() <= 1.0


def test_latent_source_sample_differs_from_mean():
    r_mean = train.train(tiny_cfg(), tiny_dataset())
    r_samp = train.train(tiny_cfg(latent_source="sample"), tiny_dataset())
    assert r_mean.latents.shape == r_samp.latents.shape
    assert not np.array_equal(r_mean.latents, r_samp.latents)


def test_degenerate_step_is_skipped(monkeypatch):
    calls = {"n": 0}
    original = model.generate

    def flaky(z, gen, threads=1):
        calls["n"] += 1
        if calls["n"] == 1:
            raise train.DegeneratePostselectionError("forced")
        return original(z, gen, threads=threads)

    monkeypatch.setattr(model, "generate", flaky)
    logged = []
    result = train.train(tiny_cfg(), tiny_dataset(), log=logged.append)
    assert result.degenerate_steps == 1
    assert result.checkpoint.adam_gen[1] == 2  # one of three iterations lost
    assert any("degenerate" in msg for msg in logged)


def test_all_steps_degenerate_raises(monkeypatch):
    def broken(z, gen, threads=1):
        raise train.DegeneratePostselectionError("forced")

    monkeypatch.setattr(model, "generate", broken)
    with pytest.raises(train.TrainingDivergedError, match="degenerate"):
        train.train(tiny_cfg(), tiny_dataset())


def test_nan_aborts_with_location(monkeypatch):
    monkeypatch.setattr(losses, "critic_loss",
                        lambda *a, **k: nn.Tensor(np.nan))
    with pytest.raises(train.TrainingDivergedError, match="critic loss.*epoch 1"):
        train.train(tiny_cfg(), tiny_dataset())


def test_dataset_too_small_raises():
    with pytest.raises(ValueError, match="smaller than one batch"):
        train.train(tiny_cfg(batch_size=64), tiny_dataset(n=12))
