import numpy as np
import pytest
import torch

from flash2ambient.networks import (
    ArchitectureMismatchError,
    ArchiveError,
    CheckpointError,
    DiscriminatorSpec,
    GeneratorSpec,
    ModelBundle,
    ShapeError,
    build_discriminator,
    build_generator,
    discriminator_forward,
    export_vgg16_archive,
    generator_forward,
    infer_image,
    load_checkpoint,
    load_vgg16_archive,
    save_checkpoint,
    save_vgg16_archive,
    vgg16_conv_names,
)

SMALL = GeneratorSpec(widths=(8, 8, 16, 16, 16))


@pytest.fixture(scope="module")
def vgg_archive(tmp_path_factory):
    """A full-size encoder archive with random (but fixed) contents."""
    path = tmp_path_factory.mktemp("weights") / "vgg16.safetensors"
    donor = build_generator(GeneratorSpec(), seed=99)
    save_vgg16_archive(export_vgg16_archive(donor), path)
    return path


def test_generator_shapes_and_range():
    g = build_generator(SMALL, seed=0)
    x = torch.rand(2, 3, 64, 96)
    y = generator_forward(g, x)
    assert y.shape == x.shape
    assert y.min() >= 0 and y.max() <= 1
    assert torch.equal(y, generator_forward(g, x))
    with pytest.raises(ShapeError):
        generator_forward(g, torch.rand(1, 3, 60, 64))


def test_full_generator_224():
    g = build_generator(GeneratorSpec(), seed=0)
    with torch.no_grad():
        y = generator_forward(g, torch.rand(1, 3, 224, 224))
    assert y.shape == (1, 3, 224, 224)
    assert 0.0 <= float(y.min()) and float(y.max()) <= 1.0


def test_output_range_under_extreme_params():
    g = build_generator(SMALL, seed=0)
    with torch.no_grad():
        for p in g.parameters():
            p.mul_(50.0)
        y = g(torch.rand(1, 3, 32, 32))
    assert torch.isfinite(y).all() and y.min() >= 0 and y.max() <= 1


def test_same_seed_same_params():
    a, b = build_generator(SMALL, seed=3), build_generator(SMALL, seed=3)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    c = build_generator(SMALL, seed=4)
    assert not torch.equal(a.head.weight, c.head.weight)


def test_decoder_init_is_small_gaussian():
    g = build_generator(GeneratorSpec(), seed=0)
    w = torch.cat([m.weight.detach().flatten() for m in g.modules() if isinstance(m, torch.nn.Conv2d) and m not in g.encoder_convs()])
    assert abs(float(w.std()) - 0.02) < 1e-3 and abs(float(w.mean())) < 1e-3


@pytest.mark.parametrize("stage", range(5))
def test_skip_connections_are_live(stage):
    # float64: at init the decoder is N(0, 0.02) and deep skips move the output by < 1 float32 ulp
    g = build_generator(SMALL, seed=0).double()
    x = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    with torch.no_grad():
        base = g(x)
        g.skip_gain[stage] = 0.0
        cut = g(x)
    assert not torch.equal(base, cut)


def test_pretrained_encoder_matches_archive(vgg_archive):
    g = build_generator(GeneratorSpec(pretrained=True), vgg_archive, seed=0)
    archive = load_vgg16_archive(vgg_archive)
    assert archive["conv1_1.weight"].shape == (3, 3, 3, 64)
    exported = export_vgg16_archive(g)
    for name in archive:
        assert exported[name].tobytes() == archive[name].tobytes()
    before = [c.weight.detach().clone() for c in g.encoder_convs()]
    opt = torch.optim.Adam(g.parameters(), lr=2e-5)
    g(torch.rand(1, 3, 32, 32)).mean().backward()
    opt.step()
    assert all(not torch.equal(b, c.weight) for b, c in zip(before, g.encoder_convs()))


def test_archive_errors(tmp_path, vgg_archive):
    tensors = load_vgg16_archive(vgg_archive)
    broken = dict(tensors)
    del broken["conv3_2.bias"]
    save_vgg16_archive(broken, tmp_path / "missing.safetensors")
    with pytest.raises(ArchiveError, match="conv3_2.bias"):
        build_generator(GeneratorSpec(pretrained=True), tmp_path / "missing.safetensors")
    broken = dict(tensors)
    broken["conv1_2.weight"] = np.zeros((3, 3, 64, 32), np.float32)
    save_vgg16_archive(broken, tmp_path / "shape.safetensors")
    with pytest.raises(ArchiveError, match="conv1_2.weight"):
        build_generator(GeneratorSpec(pretrained=True), tmp_path / "shape.safetensors")
    with pytest.raises(ArchiveError):
        build_generator(GeneratorSpec(pretrained=True), None)
    assert len(vgg16_conv_names()) == 13


def test_scratch_unet():
    spec = GeneratorSpec.scratch_unet(width_divisor=4)
    g = build_generator(spec, seed=0)
    assert spec.divisor == 16 and not spec.pretrained
    y = generator_forward(g, torch.rand(1, 3, 48, 64))
    assert y.shape == (1, 3, 48, 64) and y.min() >= 0 and y.max() <= 1
    with pytest.raises(ValueError):
        GeneratorSpec(arch="unet_scratch", pretrained=True)


def test_infer_pads_and_crops():
    g = build_generator(SMALL, seed=0)
    img = np.random.default_rng(0).random((240, 320, 3))
    out = infer_image(g, img)
    assert out.shape == (240, 320, 3)
    assert out.min() >= 0 and out.max() <= 1
    ident = build_generator(GeneratorSpec(arch="identity"))
    assert np.array_equal(infer_image(ident, img), img)


def test_discriminator_receptive_field_and_grid():
    spec = DiscriminatorSpec()
    assert spec.receptive_field == 70
    d = build_discriminator(spec, seed=0)
    with torch.no_grad():
        p = discriminator_forward(d, torch.rand(1, 3, 224, 224))
    assert p.shape == (1, 1, 26, 26)
    assert torch.isfinite(p).all() and p.min() > 0 and p.max() < 1


def test_receptive_field_by_perturbation():
    """Only inputs within the computed receptive field influence a given score."""
    spec = DiscriminatorSpec(base_width=4, normalization="none")
    d = build_discriminator(spec, seed=0)
    x = torch.rand(1, 3, 128, 128, requires_grad=True)
    d(x)[0, 0, 5, 5].backward()
    rows = torch.nonzero(x.grad.abs().sum(dim=(0, 1, 3))).flatten()
    assert int(rows.max() - rows.min()) + 1 <= spec.receptive_field


def test_discriminator_zero_params_and_flip():
    d = build_discriminator(DiscriminatorSpec(base_width=8), seed=0)
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        flipped = discriminator_forward(d, x.flip(-1))
        assert not torch.allclose(discriminator_forward(d, x), flipped.flip(-1))
        for p in d.parameters():
            p.zero_()
        assert torch.equal(discriminator_forward(d, x), torch.full_like(flipped, 0.5))
    a, b = build_discriminator(DiscriminatorSpec(), seed=5), build_discriminator(DiscriminatorSpec(), seed=5)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    with pytest.raises(ShapeError):
        discriminator_forward(d, torch.rand(1, 6, 64, 64))


def test_discriminator_learns_bright_vs_dark():
    torch.manual_seed(0)
    d = build_discriminator(DiscriminatorSpec(), seed=0)
    opt = torch.optim.Adam(d.parameters(), lr=2e-4, betas=(0.5, 0.999))
    rng = np.random.default_rng(0)

    def batch():
        bright = torch.from_numpy(rng.uniform(0.7, 1.0, (4, 1, 1, 1))).float().expand(4, 3, 64, 64)
        dark = torch.from_numpy(rng.uniform(0.0, 0.3, (4, 1, 1, 1))).float().expand(4, 3, 64, 64)
        return bright, dark

    for _ in range(200):
        bright, dark = batch()
        loss = -torch.nn.functional.logsigmoid(d(bright)).mean() - torch.nn.functional.logsigmoid(-d(dark)).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    bright, dark = batch()
    with torch.no_grad():
        acc = 0.5 * ((d(bright) > 0).float().mean() + (d(dark) < 0).float().mean())
    assert float(acc) > 0.95


def _bundle(with_disc=True):
    g = build_generator(SMALL, seed=1)
    dspec = DiscriminatorSpec(base_width=8) if with_disc else None
    d = build_discriminator(dspec, seed=2) if with_disc else None
    return ModelBundle(g, SMALL, d, dspec, {"epoch": 3, "step": 12, "config_hash": "abc"})


def test_checkpoint_roundtrip(tmp_path):
    b = _bundle()
    save_checkpoint(b, tmp_path / "a.safetensors")
    loaded = load_checkpoint(tmp_path / "a.safetensors")
    for k, v in b.generator_params.items():
        assert torch.equal(v, loaded.generator_params[k])
    for k, v in b.discriminator_params.items():
        assert torch.equal(v, loaded.discriminator_params[k])
    assert loaded.training_meta == b.training_meta
    save_checkpoint(loaded, tmp_path / "b.safetensors")
    assert (tmp_path / "a.safetensors").read_bytes() == (tmp_path / "b.safetensors").read_bytes()


def test_checkpoint_without_discriminator(tmp_path):
    save_checkpoint(_bundle(with_disc=False), tmp_path / "r.safetensors")
    loaded = load_checkpoint(tmp_path / "r.safetensors")
    assert loaded.discriminator is None and loaded.discriminator_spec is None


def test_checkpoint_guards(tmp_path):
    path = tmp_path / "a.safetensors"
    save_checkpoint(_bundle(), path)
    with pytest.raises(ArchitectureMismatchError):
        load_checkpoint(path, expected_generator=GeneratorSpec())
    raw = bytearray(path.read_bytes())
    (tmp_path / "trunc.safetensors").write_bytes(bytes(raw[: len(raw) // 2]))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "trunc.safetensors")
    (tmp_path / "junk.safetensors").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.safetensors")
    text = raw.decode("latin-1").replace('\\"widths\\": [8, 8', '\\"widths\\": [9, 8', 1)
    (tmp_path / "tampered.safetensors").write_bytes(text.encode("latin-1"))
    with pytest.raises(CheckpointError, match="hash"):
        load_checkpoint(tmp_path / "tampered.safetensors")


def test_identity_checkpoint(tmp_path):
    spec = GeneratorSpec(arch="identity")
    save_checkpoint(ModelBundle(build_generator(spec), spec), tmp_path / "id.safetensors")
    assert load_checkpoint(tmp_path / "id.safetensors").generator_spec == spec
