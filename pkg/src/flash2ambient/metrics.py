"""PSNR / SSIM and test-split evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .imagecore import InvalidPairError

log = logging.getLogger(__name__)

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

# published full-scale ablation results, shown as context only
REFERENCE_ABLATION = {
    "DEFAULT": (15.67, 0.684),
    "R_PLUS_A": (15.55, 0.676),
    "R_ONLY": (15.64, 0.681),
    "UNET_SCRATCH": (14.81, 0.643),
}


def _pair(reference, candidate):
    x = np.asarray(reference, dtype=np.float64)
    y = np.asarray(candidate, dtype=np.float64)
    if x.shape != y.shape:
        raise InvalidPairError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def psnr(reference, candidate, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` when the images are equal."""
    x, y = _pair(reference, candidate)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value**2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    p = len(g) // 2
    return out[p : img.shape[0] - p, p : img.shape[1] - p]


def ssim_map(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    """Local SSIM of two single-channel images over the valid window positions."""
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(reference, candidate, data_range: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03.

    Channels are scored independently and averaged.
    """
    x, y = _pair(reference, candidate)
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape[:2]}")
    scores = [ssim_map(x[..., k], y[..., k], data_range).mean() for k in range(x.shape[2])]
    return float(np.mean(scores))


@dataclass
class EvalReport:
    per_image: list[tuple[str, float, float]]
    errors: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        self.per_image = sorted(self.per_image, key=lambda r: r[0])

    @property
    def n_infinite(self) -> int:
        return sum(1 for _, p, _ in self.per_image if math.isinf(p))

    @property
    def mean_psnr(self) -> float:
        """Mean over finite PSNRs; ``inf`` if every pair was reproduced exactly."""
        finite = [p for _, p, _ in self.per_image if not math.isinf(p)]
        if not self.per_image:
            return math.nan
        if not finite:
            return math.inf
        return float(np.mean(finite))

    @property
    def mean_ssim(self) -> float:
        if not self.per_image:
            return math.nan
        return float(np.mean([s for _, _, s in self.per_image]))

    def to_text(self) -> str:
        lines = ["pair_id\tpsnr_db\tssim"]
        lines += [f"{pid}\t{_fmt(p)}\t{s:.4f}" for pid, p, s in self.per_image]
        lines += [
            f"# n_pairs\t{len(self.per_image)}",
            f"# n_infinite_psnr\t{self.n_infinite}",
            f"# n_errors\t{len(self.errors)}",
            f"# mean_psnr_db\t{_fmt(self.mean_psnr)}",
            f"# mean_ssim\t{self.mean_ssim:.4f}",
        ]
        lines += [f"# error\t{pid}\t{msg}" for pid, msg in self.errors]
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.4f}"


def read_report(path: str | Path) -> EvalReport:
    rows, errors = [], []
    for line in Path(path).read_text().splitlines()[1:]:
        parts = line.split("\t")
        if parts[0] == "# error":
            errors.append((parts[1], parts[2]))
        elif not line.startswith("#"):
            rows.append((parts[0], float(parts[1]), float(parts[2])))
    return EvalReport(rows, errors)


def format_table(rows: list[tuple[str, float, float]], header: str = "Method", footer: str = "") -> str:
    """Plain-text Method / PSNR / SSIM table."""
    width = max([len(header)] + [len(r[0]) for r in rows]) + 2
    out = [f"{header:<{width}}{'PSNR':>8}{'SSIM':>8}", "-" * (width + 16)]
    for name, p, s in rows:
        ps = "inf" if math.isinf(p) else ("n/a" if math.isnan(p) else f"{p:.2f}")
        ss = "n/a" if math.isnan(s) else f"{s:.3f}"
        out.append(f"{name:<{width}}{ps:>8}{ss:>8}")
    if footer:
        out.append(footer)
    return "\n".join(out)


def evaluate(pairs, model) -> EvalReport:
    """Score a generator on paired test images at canonical resolution.

    ``pairs`` is a :class:`~flash2ambient.data.DatasetManifest` (its test split is
    used; images are resized to canonical size) or an iterable of in-memory
    :class:`~flash2ambient.data.PairImages`. ``model`` is a ``ModelBundle`` or a
    generator module. Unreadable pairs are recorded in ``errors`` and skipped.
    """
    from .data import DatasetManifest, load_pair
    from .networks import infer_image

    generator = getattr(model, "generator", model)
    if isinstance(pairs, DatasetManifest):
        items = pairs.split("test")
        if not items:
            raise ValueError("test split is empty; nothing to evaluate")
    else:
        items = list(pairs)
    rows, errors = [], []
    for item in items:
        try:
            pair = load_pair(item)
        except (OSError, ValueError) as exc:
            pid = getattr(item, "pair_id", str(item))
            log.warning("skipping %s: %s", pid, exc)
            errors.append((pid, str(exc)))
            continue
        output = infer_image(generator, pair.flash)
        rows.append((pair.pair_id, psnr(pair.ambient, output), ssim(pair.ambient, output)))
    report = EvalReport(rows, errors)
    if report.n_infinite:
        log.warning("%d pair(s) have zero MSE; excluded from the PSNR mean", report.n_infinite)
    return report
