import dataclasses
import json
import logging
import math

import numpy as np
import pytest
import torch

from flash2ambient import trainer
from flash2ambient.data import PairImages, make_training_sample, synth_pairs
from flash2ambient.trainer import Ablation, ConfigError, RunConfig, TrainingDiverged


def tiny(tmp_path, **kw):
    base = dict(epochs=2, crop=32, seed=0, width_divisor=8, output_dir=str(tmp_path / "run"), checkpoint_every=1)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def pairs():
    return synth_pairs(3, seed=1, size=(40, 48))


def batch_of(pairs, seed=0, epoch=0, crop=32):
    return trainer.collate([make_training_sample(p, seed, epoch, i, crop) for i, p in enumerate(pairs)])


def test_defaults_follow_protocol():
    c = RunConfig()
    assert (c.lr_generator, c.lr_discriminator, c.adam_beta1, c.lam) == (2e-5, 2e-6, 0.5, 1.0)
    assert (c.crop, c.epochs, c.batch_size, c.ablation) == (224, 1000, 1, Ablation.DEFAULT)
    assert (c.adam_beta2, c.adam_eps, c.checkpoint_every) == (0.999, 1e-8, 50)


def test_lr_ratio_guard(caplog):
    with pytest.raises(ConfigError):
        RunConfig(lr_discriminator=2e-5)
    with caplog.at_level(logging.WARNING):
        RunConfig(lr_discriminator=1e-4, allow_lr_override=True)
    assert "diverge" in caplog.text


def test_r_only_allocates_no_discriminator(tmp_path, pairs):
    cfg = tiny(tmp_path, ablation="R_ONLY")
    state = trainer.init_state(cfg)
    assert state.discriminator is None and state.opt_d is None
    bundle, rows = trainer.train(cfg, pairs)
    assert bundle.discriminator is None
    assert rows and all(r["total_g"] == r["reconstruction"] and r["adversarial_d"] is None for r in rows)


def test_unet_scratch_defaults_to_reconstruction_only(tmp_path):
    cfg = tiny(tmp_path, ablation="UNET_SCRATCH")
    assert cfg.discriminator_spec() is None and cfg.generator_spec().arch == "unet_scratch"
    assert tiny(tmp_path, ablation="UNET_SCRATCH", unet_adversarial=True).uses_discriminator


def test_default_equals_unguided_when_flash_is_ambient(tmp_path):
    img = synth_pairs(1, seed=2, size=(32, 32))[0].ambient
    batch = batch_of([PairImages("same", img, img.copy())])
    assert torch.equal(batch["attention"], torch.ones_like(batch["attention"]))
    a = trainer.init_state(tiny(tmp_path, ablation="DEFAULT"))
    b = trainer.init_state(tiny(tmp_path, ablation="R_PLUS_A"))
    _, ra = trainer.train_step(a, batch)
    _, rb = trainer.train_step(b, batch)
    assert ra == rb
    for p, q in zip(a.generator.parameters(), b.generator.parameters()):
        assert torch.equal(p, q)
    for p, q in zip(a.discriminator.parameters(), b.discriminator.parameters()):
        assert torch.equal(p, q)


def test_attention_only_in_default(tmp_path, pairs):
    batch = batch_of(pairs)
    a = trainer.init_state(tiny(tmp_path, ablation="DEFAULT"))
    b = trainer.init_state(tiny(tmp_path, ablation="R_PLUS_A"))
    assert trainer.compute_losses(a, batch).reconstruction < trainer.compute_losses(b, batch).reconstruction


def test_lambda_linearity(tmp_path, pairs):
    state = trainer.init_state(tiny(tmp_path))
    batch = batch_of(pairs)
    vals = {lam: trainer.compute_losses(state, batch, lam) for lam in (0.0, 0.5, 1.0)}
    adv = vals[0.0].adversarial_g
    assert vals[0.0].total_g == vals[0.0].reconstruction
    for lam, br in vals.items():
        assert br.total_g == pytest.approx(vals[0.0].total_g + lam * adv, abs=1e-6)


def test_learning_rate_wiring(tmp_path):
    state = trainer.init_state(tiny(tmp_path))
    for opt, lr in ((state.opt_g, 2e-5), (state.opt_d, 2e-6)):
        params = [p for g in opt.param_groups for p in g["params"]]
        probe = params[0]
        with torch.no_grad():
            probe.zero_()
        before = [p.detach().clone() for p in params]
        opt.zero_grad(set_to_none=True)
        probe.grad = torch.ones_like(probe)
        opt.step()
        # first Adam step moves by lr * g / (|g| + eps) for a unit gradient
        torch.testing.assert_close(-probe.detach(), torch.full_like(probe, lr), rtol=1e-6, atol=0)
        assert all(torch.equal(b, p) for b, p in zip(before[1:], params[1:]))


def test_discriminator_updates_before_generator_reads_it(tmp_path, pairs, monkeypatch):
    state = trainer.init_state(tiny(tmp_path))
    snapshots = []
    real_logits = trainer.discriminator_logits

    def spy(model, images):
        snapshots.append(next(model.parameters()).detach().clone())
        return real_logits(model, images)

    monkeypatch.setattr(trainer, "discriminator_logits", spy)
    initial = next(state.discriminator.parameters()).detach().clone()
    trainer.train_step(state, batch_of(pairs))
    assert len(snapshots) == 3
    assert torch.equal(snapshots[0], initial) and torch.equal(snapshots[1], initial)
    assert not torch.equal(snapshots[2], initial)
    assert torch.equal(snapshots[2], next(state.discriminator.parameters()))


def test_non_finite_loss_aborts(tmp_path, pairs):
    state = trainer.init_state(tiny(tmp_path))
    batch = batch_of(pairs)
    batch["ambient"][0, 0, 0, 0] = math.nan
    with pytest.raises(TrainingDiverged, match="synth_0000"):
        trainer.train_step(state, batch)
    assert list((tmp_path / "run").glob("diverged_step*.npz"))


def test_divergence_guard(tmp_path):
    state = trainer.init_state(tiny(tmp_path))
    state.rec_epoch1 = [0.01]
    state.epoch = 1
    rec = trainer.losses.LossBreakdown(1.0, None, 0.0, 1.0, 0.0)
    for _ in range(trainer.DIVERGENCE_PATIENCE - 1):
        trainer._divergence_guard(state, rec)
    with pytest.raises(TrainingDiverged):
        trainer._divergence_guard(state, rec)


def test_epochs_zero(tmp_path, pairs):
    bundle, rows = trainer.train(tiny(tmp_path, epochs=0), pairs)
    assert rows == [] and bundle.training_meta["epoch"] == 0
    assert (tmp_path / "run" / "final.safetensors").exists()


def _losses(rows):
    return [(r["step"], r["reconstruction"], r["adversarial_d"], r["adversarial_g"], r["total_g"]) for r in rows]


def test_runs_are_deterministic(tmp_path, pairs):
    _, a = trainer.train(tiny(tmp_path / "a"), pairs)
    _, b = trainer.train(tiny(tmp_path / "b"), pairs)
    assert _losses(a) == _losses(b)
    log_rows = [json.loads(x) for x in (tmp_path / "a" / "run" / "train_log.jsonl").read_text().splitlines()]
    assert _losses(log_rows) == _losses(a)
    assert set(log_rows[0]) == {"step", "epoch", "reconstruction", "adversarial_d", "adversarial_g", "total_g", "lambda", "wall_ms"}


def test_resume_matches_uninterrupted(tmp_path, pairs):
    full_cfg = tiny(tmp_path / "full", epochs=4)
    _, full = trainer.train(full_cfg, pairs)
    cut_cfg = tiny(tmp_path / "cut", epochs=4)
    trainer.train(dataclasses.replace(cut_cfg, epochs=2), pairs)
    ckpt = tmp_path / "cut" / "run" / "checkpoints" / "epoch_0002.safetensors"
    _, resumed = trainer.train(cut_cfg, pairs, resume=ckpt)
    assert len(resumed) == len(full)
    np.testing.assert_allclose(np.array(_losses(resumed), float), np.array(_losses(full), float), atol=1e-6, rtol=0)


def test_resume_refuses_other_config(tmp_path, pairs):
    cfg = tiny(tmp_path, epochs=1)
    trainer.train(cfg, pairs)
    with pytest.raises(ConfigError):
        trainer.train(dataclasses.replace(cfg, lam=0.5), pairs, resume=tmp_path / "run" / "final.safetensors")


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("lambda = 0.5\nepochs = 3\nablation = R_ONLY\nmanifest = data/m.tsv\nweights = none\n")
    cfg = trainer.make_config(path, epochs=7)
    assert (cfg.lam, cfg.epochs, cfg.ablation, cfg.manifest, cfg.weights) == (0.5, 7, Ablation.R_ONLY, "data/m.tsv", None)
    path.write_text("bogus = 1\n")
    with pytest.raises(ConfigError):
        trainer.make_config(path)


def test_ablation_matrix_records_failures(tmp_path, pairs, monkeypatch):
    base = tiny(tmp_path, epochs=1)
    real_train = trainer.train

    def flaky(cfg, *a, **kw):
        if cfg.ablation is Ablation.R_PLUS_A:
            raise RuntimeError("boom")
        return real_train(cfg, *a, **kw)

    monkeypatch.setattr(trainer, "train", flaky)
    test = synth_pairs(2, seed=7, size=(32, 32))
    rows = trainer.run_ablation_matrix(base, tuple(Ablation), pairs, test)
    assert [r.condition for r in rows] == list(Ablation)
    assert rows[1].error and "boom" in rows[1].error and math.isnan(rows[1].psnr)
    assert all(r.error is None and math.isfinite(r.psnr) for r in rows if r is not rows[1])
    assert rows[2].discriminator_params == 0 and rows[0].discriminator_params > 0
    table = trainer.format_ablation_table(rows)
    assert "R_PLUS_A failed" in table and "15.67" in table

    single = trainer.run_ablation_matrix(base, [Ablation.R_ONLY], pairs, test)
    assert len(single) == 1
