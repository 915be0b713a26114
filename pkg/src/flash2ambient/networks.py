"""Generator and patch discriminator construction, forward passes, and weight I/O."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors import SafetensorError, safe_open
from safetensors.numpy import load_file as load_numpy_file
from safetensors.numpy import save_file as save_numpy_file
from safetensors.torch import load_file, save_file

VGG16_WIDTHS = (64, 128, 256, 512, 512)
VGG16_DEPTHS = (2, 2, 3, 3, 3)
UNET_WIDTHS = (32, 64, 128, 256, 512)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
CHECKPOINT_FORMAT_VERSION = 1
_META_KEY = "flash2ambient"


class ShapeError(ValueError):
    pass


class ArchiveError(ValueError):
    """A pretrained-encoder archive is missing a tensor or has a wrong shape."""


class CheckpointError(ValueError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class GeneratorSpec:
    """Architecture of the flash-to-ambient generator.

    ``arch`` is one of ``"vgg16_unet"`` (VGG-16 encoder, mirrored decoder),
    ``"unet_scratch"`` (the low-light U-Net trained from scratch) or ``"identity"``
    (parameter-free debug model that returns its input).
    """

    arch: str = "vgg16_unet"
    widths: tuple[int, ...] = VGG16_WIDTHS
    pretrained: bool = False
    output_activation: str = "sigmoid"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.arch not in ("vgg16_unet", "unet_scratch", "identity"):
            raise ValueError(f"unknown generator arch {self.arch!r}")
        if self.output_activation != "sigmoid":
            raise ValueError("only the sigmoid output activation is supported")
        if self.pretrained and (self.arch != "vgg16_unet" or self.widths != VGG16_WIDTHS):
            raise ValueError("pretrained weights need the full-width vgg16_unet architecture")

    @property
    def encoder_stages(self) -> int:
        return 0 if self.arch == "identity" else len(self.widths)

    @property
    def skip_connections(self) -> tuple[tuple[int, int], ...]:
        """(encoder stage, decoder stage) pairs; decoder stage k restores stage k's resolution."""
        if self.arch == "vgg16_unet":
            return tuple((k, k) for k in range(1, len(self.widths) + 1))
        if self.arch == "unet_scratch":
            return tuple((k, k) for k in range(1, len(self.widths)))
        return ()

    @property
    def divisor(self) -> int:
        """Spatial dims must be multiples of this."""
        if self.arch == "vgg16_unet":
            return 2 ** len(self.widths)
        if self.arch == "unet_scratch":
            return 2 ** (len(self.widths) - 1)
        return 1

    @classmethod
    def scratch_unet(cls, width_divisor: int = 1) -> "GeneratorSpec":
        return cls(arch="unet_scratch", widths=tuple(w // width_divisor for w in UNET_WIDTHS))


@dataclass(frozen=True)
class DiscriminatorSpec:
    """Strided fully convolutional patch classifier (4x4 kernels)."""

    in_channels: int = 3
    base_width: int = 64
    n_layers: int = 3
    normalization: str = "instance"

    def __post_init__(self):
        if self.normalization not in ("instance", "none"):
            raise ValueError(f"unknown normalization {self.normalization!r}")

    @property
    def layers(self) -> list[tuple[int, int]]:
        """(kernel, stride) of every convolution, input to output."""
        return [(4, 2)] * self.n_layers + [(4, 1), (4, 1)]

    @property
    def receptive_field(self) -> int:
        rf = 1
        for k, s in reversed(self.layers):
            rf = rf * s + (k - s)
        return rf


def _conv_relu(cin, cout, slope=0.0):
    act = nn.ReLU(inplace=True) if slope == 0.0 else nn.LeakyReLU(slope, inplace=True)
    return [nn.Conv2d(cin, cout, 3, padding=1), act]


class VGGUNetGenerator(nn.Module):
    """VGG-16 convolutional encoder with a mirrored decoder and concatenating skips.

    Encoder stage ``k`` holds the VGG block ``conv{k}_*``; its pre-pooling output is
    concatenated into decoder stage ``k``. Decoder stages upsample with a nearest
    resize followed by a 3x3 convolution.
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)
        self.encoder = nn.ModuleList()
        cin = 3
        for width, depth in zip(spec.widths, VGG16_DEPTHS):
            layers = []
            for _ in range(depth):
                layers += _conv_relu(cin, width)
                cin = width
            self.encoder.append(nn.Sequential(*layers))
        self.up = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for width in reversed(spec.widths):
            self.up.append(nn.Sequential(*_conv_relu(cin, width)))
            self.decoder.append(nn.Sequential(*_conv_relu(2 * width, width), *_conv_relu(width, width)))
            cin = width
        self.head = nn.Conv2d(cin, 3, 1)
        # multiplier on each skip, indexed by encoder stage - 1; used to probe the wiring
        self.skip_gain = [1.0] * len(spec.widths)

    def encoder_convs(self) -> list[nn.Conv2d]:
        return [m for stage in self.encoder for m in stage if isinstance(m, nn.Conv2d)]

    def decoder_modules(self) -> list[nn.Module]:
        return [*self.up, *self.decoder, self.head]

    def forward(self, x):
        x = (x - self.mean) / self.std
        skips = []
        for stage in self.encoder:
            x = stage(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        for k, (up, dec) in enumerate(zip(self.up, self.decoder)):
            stage = len(skips) - 1 - k
            x = up(F.interpolate(x, scale_factor=2, mode="nearest"))
            x = dec(torch.cat([x, skips[stage] * self.skip_gain[stage]], dim=1))
        return torch.sigmoid(self.head(x))


class ScratchUNet(nn.Module):
    """Five-resolution U-Net (four poolings) of the extreme low-light enhancement lineage (LeakyReLU 0.2,
    transposed-convolution upsampling), with an RGB sigmoid head."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        w = spec.widths
        self.encoder = nn.ModuleList()
        cin = 3
        for width in w:
            self.encoder.append(nn.Sequential(*_conv_relu(cin, width, 0.2), *_conv_relu(width, width, 0.2)))
            cin = width
        self.up = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for width in reversed(w[:-1]):
            self.up.append(nn.ConvTranspose2d(cin, width, 2, stride=2))
            self.decoder.append(nn.Sequential(*_conv_relu(2 * width, width, 0.2), *_conv_relu(width, width, 0.2)))
            cin = width
        self.head = nn.Conv2d(cin, 3, 1)
        self.skip_gain = [1.0] * (len(w) - 1)

    def encoder_convs(self) -> list[nn.Conv2d]:
        return [m for stage in self.encoder for m in stage if isinstance(m, nn.Conv2d)]

    def decoder_modules(self) -> list[nn.Module]:
        return [*self.up, *self.decoder, self.head]

    def forward(self, x):
        skips = []
        for k, stage in enumerate(self.encoder):
            if k:
                x = F.max_pool2d(x, 2)
            x = stage(x)
            skips.append(x)
        skips.pop()
        for k, (up, dec) in enumerate(zip(self.up, self.decoder)):
            stage = len(skips) - 1 - k
            x = dec(torch.cat([up(x), skips[stage] * self.skip_gain[stage]], dim=1))
        return torch.sigmoid(self.head(x))


class IdentityGenerator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec

    def forward(self, x):
        return x.clone()


class PatchDiscriminator(nn.Module):
    """Returns raw logits on an ``(N, 1, h, w)`` grid, one per overlapping patch."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        norm = (lambda c: nn.InstanceNorm2d(c)) if spec.normalization == "instance" else (lambda c: nn.Identity())
        w = spec.base_width
        layers = [nn.Conv2d(spec.in_channels, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        cin = w
        for n in range(1, spec.n_layers):
            cout = w * min(2**n, 8)
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), norm(cout), nn.LeakyReLU(0.2, inplace=True)]
            cin = cout
        cout = w * min(2**spec.n_layers, 8)
        layers += [nn.Conv2d(cin, cout, 4, stride=1, padding=1), norm(cout), nn.LeakyReLU(0.2, inplace=True)]
        layers += [nn.Conv2d(cout, 1, 4, stride=1, padding=1)]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


def _init_gaussian(modules, gen: torch.Generator, std: float = 0.02):
    for module in modules:
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.normal_(m.weight, 0.0, std, generator=gen)
                nn.init.zeros_(m.bias)


def _init_kaiming(convs, gen: torch.Generator):
    for m in convs:
        nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu", generator=gen)
        nn.init.zeros_(m.bias)


def vgg16_conv_names() -> list[str]:
    return [f"conv{b + 1}_{i + 1}" for b, depth in enumerate(VGG16_DEPTHS) for i in range(depth)]


def load_vgg16_archive(path: str | Path) -> dict[str, np.ndarray]:
    """Read and validate a pretrained-encoder archive.

    The archive is a safetensors file with ``conv{b}_{i}.weight`` stored as
    ``(3, 3, in, out)`` float32 kernels and ``conv{b}_{i}.bias`` as ``(out,)``,
    for the 13 VGG-16 convolutions, RGB input order, expecting ImageNet-normalized input.
    """
    try:
        tensors = load_numpy_file(str(path))
    except (OSError, SafetensorError) as exc:
        raise ArchiveError(f"cannot read weights archive {path}: {exc}") from exc
    cin = 3
    names = vgg16_conv_names()
    widths = [w for w, d in zip(VGG16_WIDTHS, VGG16_DEPTHS) for _ in range(d)]
    for name, cout in zip(names, widths):
        for suffix, shape in (("weight", (3, 3, cin, cout)), ("bias", (cout,))):
            key = f"{name}.{suffix}"
            if key not in tensors:
                raise ArchiveError(f"weights archive is missing tensor {key}")
            if tuple(tensors[key].shape) != shape:
                raise ArchiveError(f"tensor {key} has shape {tensors[key].shape}, expected {shape}")
        cin = cout
    return tensors


def save_vgg16_archive(tensors: dict[str, np.ndarray], path: str | Path) -> None:
    save_numpy_file({k: np.ascontiguousarray(v, dtype=np.float32) for k, v in tensors.items()}, str(path))


def export_vgg16_archive(model: VGGUNetGenerator) -> dict[str, np.ndarray]:
    """Encoder kernels of ``model`` in archive layout."""
    out = {}
    for name, conv in zip(vgg16_conv_names(), model.encoder_convs()):
        out[f"{name}.weight"] = conv.weight.detach().numpy().transpose(2, 3, 1, 0).copy()
        out[f"{name}.bias"] = conv.bias.detach().numpy().copy()
    return out


def build_generator(spec: GeneratorSpec, weights_archive: str | Path | None = None, seed: int = 0) -> nn.Module:
    """Construct a generator.

    Encoder convolutions are Kaiming-normal (or copied from ``weights_archive`` when
    ``spec.pretrained``); decoder convolutions are N(0, 0.02) with zero bias.
    """
    gen = torch.Generator().manual_seed(seed)
    if spec.arch == "identity":
        return IdentityGenerator(spec)
    model = VGGUNetGenerator(spec) if spec.arch == "vgg16_unet" else ScratchUNet(spec)
    _init_kaiming(model.encoder_convs(), gen)
    _init_gaussian(model.decoder_modules(), gen)
    if spec.pretrained:
        if weights_archive is None:
            raise ArchiveError("pretrained generator requested but no weights archive given")
        tensors = load_vgg16_archive(weights_archive)
        with torch.no_grad():
            for name, conv in zip(vgg16_conv_names(), model.encoder_convs()):
                conv.weight.copy_(torch.from_numpy(tensors[f"{name}.weight"].transpose(3, 2, 0, 1).copy()))
                conv.bias.copy_(torch.from_numpy(tensors[f"{name}.bias"]))
    return model


def check_spatial(spec: GeneratorSpec, batch: torch.Tensor) -> None:
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise ShapeError(f"expected (N, 3, H, W) batch, got {tuple(batch.shape)}")
    h, w = batch.shape[-2:]
    if h % spec.divisor or w % spec.divisor:
        raise ShapeError(f"spatial dims {h}x{w} must be multiples of {spec.divisor}")


def generator_forward(model: nn.Module, flash: torch.Tensor) -> torch.Tensor:
    check_spatial(model.spec, flash)
    return model(flash)


def build_discriminator(spec: DiscriminatorSpec, seed: int = 0) -> PatchDiscriminator:
    gen = torch.Generator().manual_seed(seed)
    model = PatchDiscriminator(spec)
    _init_gaussian([model], gen)
    return model


def discriminator_logits(model: PatchDiscriminator, images: torch.Tensor) -> torch.Tensor:
    if images.ndim != 4 or images.shape[1] != model.spec.in_channels:
        raise ShapeError(f"discriminator expects {model.spec.in_channels} channels, got {tuple(images.shape)}")
    return model(images)


def discriminator_forward(model: PatchDiscriminator, images: torch.Tensor) -> torch.Tensor:
    """Patch scores as probabilities in (0, 1)."""
    return torch.sigmoid(discriminator_logits(model, images))


def infer_image(model: nn.Module, image: np.ndarray) -> np.ndarray:
    """Run the generator on one ``(H, W, 3)`` image of any size.

    The image is reflect-padded at the bottom/right to the next multiple of the
    architecture's divisor and the output is cropped back.
    """
    h, w = image.shape[:2]
    d = model.spec.divisor
    ph, pw = -h % d, -w % d
    padded = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="reflect") if (ph or pw) else image
    params = list(model.parameters())
    dtype = params[0].dtype if params else torch.float64
    x = torch.from_numpy(np.ascontiguousarray(padded.transpose(2, 0, 1))).to(dtype)[None]
    was_training = model.training
    model.eval()
    with torch.no_grad():
        y = generator_forward(model, x)
    model.train(was_training)
    return y[0, :, :h, :w].numpy().transpose(1, 2, 0).astype(np.float64)


@dataclass
class ModelBundle:
    generator: nn.Module
    generator_spec: GeneratorSpec
    discriminator: PatchDiscriminator | None = None
    discriminator_spec: DiscriminatorSpec | None = None
    training_meta: dict = field(default_factory=dict)

    @property
    def generator_params(self) -> dict[str, torch.Tensor]:
        return dict(self.generator.state_dict())

    @property
    def discriminator_params(self) -> dict[str, torch.Tensor] | None:
        return None if self.discriminator is None else dict(self.discriminator.state_dict())


def _spec_json(spec) -> str | None:
    return None if spec is None else json.dumps(asdict(spec), sort_keys=True)


def spec_hash(gspec: GeneratorSpec, dspec: DiscriminatorSpec | None) -> str:
    payload = json.dumps([_spec_json(gspec), _spec_json(dspec)])
    return hashlib.sha256(payload.encode()).hexdigest()


def save_checkpoint(bundle: ModelBundle, path: str | Path, extra: dict[str, torch.Tensor] | None = None) -> None:
    """Write a bundle as one safetensors archive.

    Tensors are named ``generator.<param>`` / ``discriminator.<param>``; a single
    metadata entry holds the specs, their hash, the format version and training meta.
    ``extra`` tensors (e.g. optimizer moments) are stored under their own names.
    """
    tensors = {f"generator.{k}": v.detach().contiguous() for k, v in bundle.generator.state_dict().items()}
    if bundle.discriminator is not None:
        tensors.update(
            {f"discriminator.{k}": v.detach().contiguous() for k, v in bundle.discriminator.state_dict().items()}
        )
    if extra:
        tensors.update({k: v.detach().contiguous() for k, v in extra.items()})
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "generator_spec": asdict(bundle.generator_spec),
        "discriminator_spec": None if bundle.discriminator_spec is None else asdict(bundle.discriminator_spec),
        "spec_hash": spec_hash(bundle.generator_spec, bundle.discriminator_spec),
        "training_meta": bundle.training_meta,
    }
    save_file(tensors, str(path), metadata={_META_KEY: json.dumps(meta, sort_keys=True)})


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Return (metadata, all tensors) of a checkpoint file."""
    try:
        tensors = load_file(str(path))
        with safe_open(str(path), framework="pt") as f:
            raw = (f.metadata() or {}).get(_META_KEY)
    except (OSError, SafetensorError) as exc:
        raise CheckpointError(f"corrupt or unreadable checkpoint {path}: {exc}") from exc
    if raw is None:
        raise CheckpointError(f"{path} has no {_META_KEY} metadata block")
    try:
        meta = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: malformed metadata: {exc}") from exc
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')}")
    return meta, tensors


def load_checkpoint(
    path: str | Path,
    expected_generator: GeneratorSpec | None = None,
    expected_discriminator: DiscriminatorSpec | None = None,
) -> ModelBundle:
    meta, tensors = read_checkpoint(path)
    gspec = GeneratorSpec(**meta["generator_spec"])
    dspec = None if meta["discriminator_spec"] is None else DiscriminatorSpec(**meta["discriminator_spec"])
    if spec_hash(gspec, dspec) != meta.get("spec_hash"):
        raise CheckpointError(f"{path}: spec hash mismatch, metadata is inconsistent")
    if expected_generator is not None and expected_generator != gspec:
        raise ArchitectureMismatchError(f"checkpoint generator {gspec} differs from expected {expected_generator}")
    if expected_discriminator is not None and expected_discriminator != dspec:
        raise ArchitectureMismatchError(
            f"checkpoint discriminator {dspec} differs from expected {expected_discriminator}"
        )

    def take(prefix):
        return {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}

    # the archive is only needed at first build; load_state_dict overwrites everything
    generator = build_generator(GeneratorSpec(**{**asdict(gspec), "pretrained": False}))
    generator.spec = gspec
    discriminator = None if dspec is None else build_discriminator(dspec)
    try:
        generator.load_state_dict(take("generator."), strict=True)
        if discriminator is not None:
            discriminator.load_state_dict(take("discriminator."), strict=True)
    except RuntimeError as exc:
        raise ArchitectureMismatchError(f"{path}: tensors do not match the stored spec: {exc}") from exc
    return ModelBundle(generator, gspec, discriminator, dspec, meta.get("training_meta", {}))
