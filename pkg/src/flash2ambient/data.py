"""Paired flash/ambient datasets: manifest files, training samples and synthetic scenes."""

from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw

from .imagecore import (
    PairedAugmentation,
    attention_map,
    load_image,
    paired_augment,
    resize_canonical,
    sample_augmentation,
    save_image,
)

log = logging.getLogger(__name__)

CATEGORIES = ("People", "Shelves", "Plants", "Toys", "Rooms", "Objects")
SPLITS = ("train", "test")
MANIFEST_FIELDS = ("pair_id", "flash_path", "ambient_path", "category", "split")


class ManifestError(ValueError):
    pass


class SampleError(RuntimeError):
    def __init__(self, pair_id: str, message: str):
        super().__init__(f"{pair_id}: {message}")
        self.pair_id = pair_id


@dataclass(frozen=True)
class ManifestEntry:
    pair_id: str
    flash_path: Path
    ambient_path: Path
    category: str
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    missing: list[Path] = field(default_factory=list)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    @property
    def counts(self) -> tuple[int, int]:
        c = Counter(e.split for e in self.entries)
        return c["train"], c["test"]


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse a tab-separated manifest.

    The first line is the header ``pair_id flash_path ambient_path category split``.
    Relative paths resolve against the manifest's directory. Missing files are
    collected in ``missing`` rather than raised.
    """
    path = Path(path)
    root = path.parent
    entries, missing, seen = [], [], set()
    with path.open(newline="") as fh:
        lines = fh.read().splitlines()
    if not lines or tuple(lines[0].split("\t")) != MANIFEST_FIELDS:
        raise ManifestError(f"{path}:1: header must be {' / '.join(MANIFEST_FIELDS)}")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ManifestError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
        pid, flash, ambient, category, split = parts
        if category not in CATEGORIES:
            raise ManifestError(f"{path}:{lineno}: unknown category {category!r}")
        if split not in SPLITS:
            raise ManifestError(f"{path}:{lineno}: split must be train or test, got {split!r}")
        if pid in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate pair_id {pid!r}")
        seen.add(pid)
        entry = ManifestEntry(pid, root / flash, root / ambient, category, split)
        missing += [p for p in (entry.flash_path, entry.ambient_path) if not p.is_file()]
        entries.append(entry)
    manifest = DatasetManifest(entries, missing)
    log.info("manifest %s: %d train / %d test pairs", path, *manifest.counts)
    if missing:
        log.warning("manifest %s references %d missing file(s)", path, len(missing))
    return manifest


def write_manifest(rows, path: str | Path) -> None:
    """Write ``(pair_id, flash, ambient, category, split)`` rows; paths are written as given."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        w.writerows([[str(v) for v in row] for row in rows])


@dataclass
class PairImages:
    pair_id: str
    flash: np.ndarray
    ambient: np.ndarray


def load_pair(pair) -> PairImages:
    """Materialize a manifest entry at canonical size; in-memory pairs pass through."""
    if isinstance(pair, PairImages):
        return pair
    flash = resize_canonical(load_image(pair.flash_path))
    ambient = resize_canonical(load_image(pair.ambient_path))
    if flash.shape != ambient.shape:
        raise ValueError(f"{pair.pair_id}: flash and ambient orientations differ")
    return PairImages(pair.pair_id, flash, ambient)


@dataclass
class TrainingSample:
    flash_crop: np.ndarray
    ambient_crop: np.ndarray
    attention: np.ndarray
    pair_id: str
    augmentation: PairedAugmentation


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def make_training_sample(pair, seed: int, epoch: int, index: int, crop: int = 224) -> TrainingSample:
    """Crop/flip a pair identically and compute the attention map on the crops.

    The augmentation is a pure function of ``(seed, epoch, index)``.
    """
    pid = getattr(pair, "pair_id", "?")
    try:
        images = load_pair(pair)
    except (OSError, ValueError) as exc:
        raise SampleError(pid, str(exc)) from exc
    h, w = images.flash.shape[:2]
    aug = sample_augmentation(h, w, crop, sample_rng(seed, epoch, index), seed)
    flash, ambient = paired_augment(images.flash, images.ambient, aug)
    return TrainingSample(flash, ambient, attention_map(ambient, flash), images.pair_id, aug)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic shuffle of ``range(n)`` for one epoch."""
    return np.random.default_rng([seed, epoch, 2**31 - 1]).permutation(n)


@dataclass(frozen=True)
class SynthSceneSpec:
    """Procedural flash/ambient pair.

    ``flash_falloff`` is ``(peak, floor, width)``: the flash multiplies the ambient
    image by ``floor + (peak - floor) * exp(-r^2 / (2 (width * diag)^2))`` where ``r`` is
    the distance to the image center. ``None`` disables it.
    """

    seed: int = 0
    size: tuple[int, int] = (240, 320)
    shadow_polygons: int = 2
    flash_falloff: tuple[float, float, float] | None = (1.8, 0.5, 0.2)
    noise_level: float = 0.01
    shadow_strength: float = 0.25


@dataclass
class SynthScene:
    flash: np.ndarray
    ambient: np.ndarray
    shadow_mask: np.ndarray
    flash_gain: np.ndarray


def _smooth_field(rng, h, w, n_waves=4):
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    out = np.zeros((h, w))
    for _ in range(n_waves):
        fy, fx = rng.uniform(-4.0, 4.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        out += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    return out / n_waves


def synth_scene(spec: SynthSceneSpec) -> SynthScene:
    """Build a pair with a bright flash center, dark periphery and hard polygon shadows."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.size
    base = np.stack([_smooth_field(rng, h, w) for _ in range(3)], axis=-1)
    # ambient stays inside [0.25, 0.75] so the flash effects are always visible
    ambient = 0.5 + 0.25 * np.clip(base * 1.5, -1.0, 1.0)
    ambient *= 1.0 - 0.15 * (np.arange(h) / max(h - 1, 1))[:, None, None]  # light from above
    ambient = np.clip(ambient, 0.25, 0.75)

    yy, xx = np.mgrid[0:h, 0:w]
    r2 = (yy - (h - 1) / 2) ** 2 + (xx - (w - 1) / 2) ** 2
    if spec.flash_falloff is None:
        gain = np.ones((h, w))
    else:
        peak, floor, width = spec.flash_falloff
        sigma = width * np.hypot(h, w)
        gain = floor + (peak - floor) * np.exp(-r2 / (2 * sigma**2))

    canvas = PILImage.new("L", (w, h), 0)
    draw = ImageDraw.Draw(canvas)
    for _ in range(spec.shadow_polygons):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        n_vertices = int(rng.integers(3, 6))
        angles = np.sort(rng.uniform(0, 2 * np.pi, n_vertices))
        radii = rng.uniform(0.08, 0.2, n_vertices) * min(h, w)
        draw.polygon([(cx + r * np.cos(a), cy + r * np.sin(a)) for a, r in zip(angles, radii)], fill=255)
    shadow = np.asarray(canvas) > 0

    flash = ambient * gain[..., None]
    flash[shadow] *= spec.shadow_strength
    if spec.noise_level > 0:
        flash = flash + rng.normal(0.0, spec.noise_level, flash.shape)
    flash = np.clip(flash, 0.0, 1.0)
    return SynthScene(flash, ambient, shadow, gain)


def synth_pair(spec: SynthSceneSpec) -> tuple[np.ndarray, np.ndarray]:
    scene = synth_scene(spec)
    return scene.flash, scene.ambient


def pair_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def synth_pairs(count: int, seed: int = 0, **spec_kwargs) -> list[PairImages]:
    """In-memory synthetic pairs, ``synth_0000`` onwards."""
    out = []
    for i in range(count):
        flash, ambient = synth_pair(SynthSceneSpec(seed=pair_seed(seed, i), **spec_kwargs))
        out.append(PairImages(f"synth_{i:04d}", flash, ambient))
    return out


def write_synth_dataset(
    out_dir: str | Path, count: int, test_count: int = 0, seed: int = 0, **spec_kwargs
) -> tuple[Path, list[Path]]:
    """Write PNG pairs plus ``manifest.tsv``; the last ``test_count`` pairs form the test split."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, written = [], []
    for i, pair in enumerate(synth_pairs(count + test_count, seed, **spec_kwargs)):
        fname, aname = f"{pair.pair_id}_flash.png", f"{pair.pair_id}_ambient.png"
        save_image(pair.flash, out_dir / fname)
        save_image(pair.ambient, out_dir / aname)
        written += [out_dir / fname, out_dir / aname]
        split = "train" if i < count else "test"
        rows.append((pair.pair_id, fname, aname, CATEGORIES[i % len(CATEGORIES)], split))
    manifest = out_dir / "manifest.tsv"
    write_manifest(rows, manifest)
    return manifest, written + [manifest]
